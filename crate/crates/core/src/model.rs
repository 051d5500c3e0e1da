//! Shared embeddings with two independent feedforward scoring heads.
//!
//! A score is computed from the concatenation `[user | video | length bucket]`
//! of three embedding rows, passed through ReLU hidden layers (with inverted
//! dropout at training time) and a final linear unit. The embedding tables
//! are shared by both heads; the dense layers are not.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Trained on general pairs.
    F,
    /// Trained on length-conditioned pairs.
    FUn,
}

impl Head {
    pub const ALL: [Head; 2] = [Head::F, Head::FUn];

    fn index(self) -> usize {
        match self {
            Head::F => 0,
            Head::FUn => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub user_vocab: usize,
    pub video_vocab: usize,
    pub length_buckets: usize,
    pub embedding_dim: usize,
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("user_vocab", self.user_vocab),
            ("video_vocab", self.video_vocab),
            ("length_buckets", self.length_buckets),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Width of the concatenated embedding input.
    pub fn input_width(&self) -> usize {
        3 * self.embedding_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_sizes: vec![32, 16],
            dropout_rate: 0.0,
            activation: Activation::Relu,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::config(
                "model.hidden_sizes",
                "must be a non-empty list of positive sizes",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Row-major table of `rows × dim` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embedding {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// `y = W x + b` with `W` stored row-major as `output × input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            weight: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    fn apply(&self, x: &[f64], y: &mut Vec<f64>) {
        y.clear();
        y.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let w = &self.weight[o * self.input..(o + 1) * self.input];
            b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

/// Hidden ReLU layers followed by a scalar linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Mlp {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Activations recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Trace {
    head: Head,
    user: usize,
    video: usize,
    bucket: usize,
    /// `layer_inputs[i]` feeds layer `i`; index 0 is the concatenated embedding.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit (0 or 1/(1-rate)); empty in eval mode.
    masks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Random,
    /// All parameters zero. Used in tests.
    Zeros,
}

/// All trainable parameters plus the feature encoding they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: FeatureSpec,
    pub head_config: HeadConfig,
    /// Length bucket of every video.
    pub video_bucket: Vec<usize>,
    pub user: Embedding,
    pub video: Embedding,
    pub length: Embedding,
    pub heads: [Mlp; 2],
}

impl ModelParams {
    /// Embeddings ~ N(0, 0.01²); dense weights and biases ~ U(±1/√fan_in).
    pub fn init(
        spec: FeatureSpec,
        head_config: HeadConfig,
        video_bucket: Vec<usize>,
        seed: u64,
        mode: InitMode,
    ) -> Result<Self> {
        spec.validate()?;
        head_config.validate()?;
        if video_bucket.len() != spec.video_vocab {
            return Err(Error::ShapeMismatch(format!(
                "{} video buckets for a vocabulary of {}",
                video_bucket.len(),
                spec.video_vocab
            )));
        }
        if let Some(&b) = video_bucket.iter().find(|&&b| b >= spec.length_buckets) {
            return Err(Error::UnknownId {
                kind: "length bucket",
                index: b,
                size: spec.length_buckets,
            });
        }
        let d = spec.embedding_dim;
        let mlp = || Mlp::zeros(spec.input_width(), &head_config.hidden_sizes);
        let mut params = ModelParams {
            user: Embedding::zeros(spec.user_vocab, d),
            video: Embedding::zeros(spec.video_vocab, d),
            length: Embedding::zeros(spec.length_buckets, d),
            heads: [mlp(), mlp()],
            spec,
            head_config,
            video_bucket,
        };
        if mode == InitMode::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.01).unwrap();
            for table in [&mut params.user, &mut params.video, &mut params.length] {
                table.data.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
            for head in &mut params.heads {
                for layer in &mut head.layers {
                    let bound = 1.0 / (layer.input as f64).sqrt();
                    layer
                        .weight
                        .iter_mut()
                        .chain(layer.bias.iter_mut())
                        .for_each(|x| *x = rng.random_range(-bound..=bound));
                }
            }
        }
        Ok(params)
    }

    pub fn head(&self, head: Head) -> &Mlp {
        &self.heads[head.index()]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut Mlp {
        &mut self.heads[head.index()]
    }

    fn check_ids(&self, user: usize, video: usize) -> Result<()> {
        if user >= self.spec.user_vocab {
            return Err(Error::UnknownId {
                kind: "user",
                index: user,
                size: self.spec.user_vocab,
            });
        }
        if video >= self.spec.video_vocab {
            return Err(Error::UnknownId {
                kind: "video",
                index: video,
                size: self.spec.video_vocab,
            });
        }
        Ok(())
    }

    /// Forward pass. Dropout is applied only when `dropout` carries an rng.
    pub fn forward(
        &self,
        head: Head,
        user: usize,
        video: usize,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Trace)> {
        self.check_ids(user, video)?;
        let bucket = self.video_bucket[video];
        let mut input = Vec::with_capacity(self.spec.input_width());
        input.extend_from_slice(self.user.row(user));
        input.extend_from_slice(self.video.row(video));
        input.extend_from_slice(self.length.row(bucket));

        let rate = self.head_config.dropout_rate;
        let mut dropout = dropout.filter(|_| rate > 0.0);
        let mlp = self.head(head);
        let hidden = mlp.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(mlp.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        let mut masks = Vec::new();
        layer_inputs.push(input);
        for layer in &mlp.layers[..hidden] {
            let mut z = Vec::with_capacity(layer.output);
            layer.apply(layer_inputs.last().unwrap(), &mut z);
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                a.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                masks.push(mask);
            }
            pre.push(z);
            layer_inputs.push(a);
        }
        let mut out = Vec::with_capacity(1);
        mlp.layers[hidden].apply(layer_inputs.last().unwrap(), &mut out);
        Ok((
            out[0],
            Trace {
                head,
                user,
                video,
                bucket,
                layer_inputs,
                pre,
                masks,
            },
        ))
    }

    /// Evaluation-mode score.
    pub fn score(&self, head: Head, user: usize, video: usize) -> Result<f64> {
        self.forward(head, user, video, None).map(|(s, _)| s)
    }

    /// Accumulates `upstream · ∂score/∂θ` for the pass recorded in `trace`.
    pub fn backward(&self, trace: &Trace, upstream: f64, grads: &mut Gradients) -> Result<()> {
        if grads.spec != self.spec || grads.heads[0].num_params() != self.heads[0].num_params() {
            return Err(Error::ShapeMismatch("gradient buffer does not match model".into()));
        }
        let mlp = self.head(trace.head);
        let gmlp = &mut grads.heads[trace.head.index()];
        let hidden = mlp.layers.len() - 1;
        let mut delta = vec![upstream];
        for l in (0..=hidden).rev() {
            let layer = &mlp.layers[l];
            let glayer = &mut gmlp.layers[l];
            let x = &trace.layer_inputs[l];
            for (o, &d) in delta.iter().enumerate() {
                glayer.bias[o] += d;
                let gw = &mut glayer.weight[o * layer.input..(o + 1) * layer.input];
                gw.iter_mut().zip(x).for_each(|(g, x)| *g += d * x);
            }
            let mut back = vec![0.0; layer.input];
            for (o, &d) in delta.iter().enumerate() {
                let w = &layer.weight[o * layer.input..(o + 1) * layer.input];
                back.iter_mut().zip(w).for_each(|(b, w)| *b += d * w);
            }
            if l > 0 {
                let z = &trace.pre[l - 1];
                let mask = trace.masks.get(l - 1);
                for (j, b) in back.iter_mut().enumerate() {
                    let scale = mask.map_or(1.0, |m| m[j]);
                    if z[j] <= 0.0 {
                        *b = 0.0;
                    } else {
                        *b *= scale;
                    }
                }
            }
            delta = back;
        }
        let d = self.spec.embedding_dim;
        add_row(&mut grads.user, trace.user, &delta[..d]);
        add_row(&mut grads.video, trace.video, &delta[d..2 * d]);
        add_row(&mut grads.length, trace.bucket, &delta[2 * d..]);
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.user.data.len()
            + self.video.data.len()
            + self.length.data.len()
            + self.heads.iter().map(Mlp::num_params).sum::<usize>()
    }

    /// Parameters flattened as user, video, length tables, then head f and
    /// head f_un layers (weights then bias per layer).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.user.data);
        out.extend_from_slice(&self.video.data);
        out.extend_from_slice(&self.length.data);
        for h in &self.heads {
            out.extend(h.values());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut it = values.iter().copied();
        let tables = [&mut self.user, &mut self.video, &mut self.length];
        for t in tables {
            t.data.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        for h in &mut self.heads {
            h.values_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

fn add_row(rows: &mut BTreeMap<usize, Vec<f64>>, r: usize, g: &[f64]) {
    let row = rows.entry(r).or_insert_with(|| vec![0.0; g.len()]);
    row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Gradient buffer congruent to [`ModelParams`]: embedding gradients are kept
/// only for touched rows, dense heads are stored in full.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    spec: FeatureSpec,
    pub user: BTreeMap<usize, Vec<f64>>,
    pub video: BTreeMap<usize, Vec<f64>>,
    pub length: BTreeMap<usize, Vec<f64>>,
    pub heads: [Mlp; 2],
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let mlp = || Mlp::zeros(params.spec.input_width(), &params.head_config.hidden_sizes);
        Gradients {
            spec: params.spec.clone(),
            user: BTreeMap::new(),
            video: BTreeMap::new(),
            length: BTreeMap::new(),
            heads: [mlp(), mlp()],
        }
    }

    pub fn head(&self, head: Head) -> &Mlp {
        &self.heads[head.index()]
    }

    /// Multiplies every entry by `s`.
    pub fn scale(&mut self, s: f64) {
        for rows in [&mut self.user, &mut self.video, &mut self.length] {
            rows.values_mut().flatten().for_each(|g| *g *= s);
        }
        for h in &mut self.heads {
            h.values_mut().for_each(|g| *g *= s);
        }
    }

    /// Adds `s · other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (dst, src) in [
            (&mut self.user, &other.user),
            (&mut self.video, &other.video),
            (&mut self.length, &other.length),
        ] {
            for (&r, g) in src {
                let row = dst.entry(r).or_insert_with(|| vec![0.0; g.len()]);
                row.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
        }
        for (dst, src) in self.heads.iter_mut().zip(&other.heads) {
            dst.values_mut().zip(src.values()).for_each(|(a, b)| *a += s * b);
        }
    }

    /// Dense gradient in the order of [`ModelParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let d = self.spec.embedding_dim;
        let mut out = Vec::new();
        for (rows, n) in [
            (&self.user, self.spec.user_vocab),
            (&self.video, self.spec.video_vocab),
            (&self.length, self.spec.length_buckets),
        ] {
            let start = out.len();
            out.resize(start + n * d, 0.0);
            for (&r, g) in rows {
                out[start + r * d..start + (r + 1) * d].copy_from_slice(g);
            }
        }
        for h in &self.heads {
            out.extend(h.values());
        }
        out
    }
}

/// Independent dropout stream for one forward pass, keyed by step, example
/// and slot so that masks do not depend on evaluation order.
pub fn dropout_rng(step_seed: u64, example: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(((example as u64) << 8) | slot);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelParams {
        ModelParams::init(
            FeatureSpec {
                user_vocab: 3,
                video_vocab: 4,
                length_buckets: 2,
                embedding_dim: 2,
            },
            HeadConfig {
                hidden_sizes: vec![3],
                dropout_rate: 0.0,
                activation: Activation::Relu,
            },
            vec![0, 1, 1, 0],
            seed,
            InitMode::Random,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        assert_eq!(small(4), small(4));
        assert_ne!(small(4), small(5));
        let p = ModelParams::init(
            FeatureSpec {
                user_vocab: 100,
                video_vocab: 10,
                length_buckets: 5,
                embedding_dim: 8,
            },
            HeadConfig::default(),
            vec![0; 10],
            1,
            InitMode::Random,
        )
        .unwrap();
        assert_eq!((p.user.rows, p.user.dim), (100, 8));
        assert_eq!(p.heads[0].layers[0].input, 24);
        assert_eq!(p.heads[0].layers[0].output, 32);
        assert_eq!(p.heads[0].layers[1].output, 16);
        assert_eq!(p.heads[0].layers[2].output, 1);
    }

    #[test]
    fn zero_init_scores_bias_path() {
        let mut p = ModelParams::init(
            small(0).spec,
            small(0).head_config,
            vec![0, 1, 1, 0],
            0,
            InitMode::Zeros,
        )
        .unwrap();
        assert_eq!(p.score(Head::F, 1, 2).unwrap(), 0.0);
        p.heads[0].layers[1].bias[0] = 0.25;
        p.heads[0].layers[0].bias = vec![1.0, -1.0, 2.0];
        p.heads[0].layers[1].weight = vec![0.5, 3.0, 0.1];
        // relu([1, -1, 2]) · [0.5, 3, 0.1] + 0.25
        for (u, v) in [(0, 0), (2, 3)] {
            assert!((p.score(Head::F, u, v).unwrap() - 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_single_unit() {
        let mut p = ModelParams::init(
            FeatureSpec {
                user_vocab: 1,
                video_vocab: 1,
                length_buckets: 1,
                embedding_dim: 2,
            },
            HeadConfig {
                hidden_sizes: vec![1],
                ..Default::default()
            },
            vec![0],
            0,
            InitMode::Zeros,
        )
        .unwrap();
        p.user.data = vec![0.5, -1.0];
        p.video.data = vec![2.0, 0.25];
        p.length.data = vec![-0.5, 1.5];
        p.heads[0].layers[0].weight = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        p.heads[0].layers[0].bias = vec![0.1];
        p.heads[0].layers[1].weight = vec![-2.0];
        p.heads[0].layers[1].bias = vec![0.3];
        // z = 0.5 - 2 + 6 + 1 - 2.5 + 9 + 0.1 = 12.1; out = -2 * 12.1 + 0.3
        assert!((p.score(Head::F, 0, 0).unwrap() - (-23.9)).abs() < 1e-12);
    }

    #[test]
    fn unknown_ids_are_errors() {
        let p = small(1);
        assert!(matches!(
            p.score(Head::F, 3, 0),
            Err(Error::UnknownId { kind: "user", .. })
        ));
        assert!(matches!(
            p.score(Head::FUn, 0, 4),
            Err(Error::UnknownId { kind: "video", .. })
        ));
    }

    #[test]
    fn dropout_only_in_training() {
        let mut p = small(2);
        let base = p.score(Head::F, 1, 1).unwrap();
        assert_eq!(base, p.score(Head::F, 1, 1).unwrap());
        let mut rng = dropout_rng(1, 0, 0);
        assert_eq!(p.forward(Head::F, 1, 1, Some(&mut rng)).unwrap().0, base);
        p.head_config.dropout_rate = 0.5;
        assert_eq!(p.score(Head::F, 1, 1).unwrap(), base);
    }

    #[test]
    fn heads_are_disjoint_and_embeddings_shared() {
        let mut p = small(3);
        let un = p.score(Head::FUn, 0, 1).unwrap();
        let f = p.score(Head::F, 0, 1).unwrap();
        p.heads[0].layers[0].weight.iter_mut().for_each(|w| *w += 1.0);
        assert_eq!(p.score(Head::FUn, 0, 1).unwrap(), un);
        assert_ne!(p.score(Head::F, 0, 1).unwrap(), f);
        let f = p.score(Head::F, 0, 1).unwrap();
        p.user.row_mut(0).iter_mut().for_each(|x| *x += 0.5);
        assert_ne!(p.score(Head::FUn, 0, 1).unwrap(), un);
        assert_ne!(p.score(Head::F, 0, 1).unwrap(), f);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = small(5);
        let (_, trace) = p.forward(Head::F, 1, 2, None).unwrap();
        let mut g = Gradients::zeros_like(&p);
        p.backward(&trace, 0.0, &mut g).unwrap();
        assert!(g.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn untouched_rows_have_no_gradient() {
        let p = small(6);
        let (_, trace) = p.forward(Head::FUn, 1, 2, None).unwrap();
        let mut g = Gradients::zeros_like(&p);
        p.backward(&trace, 1.0, &mut g).unwrap();
        assert_eq!(g.user.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(g.video.keys().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(g.length.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert!(g.head(Head::F).values().all(|&x| x == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let mut p = small(7);
        let flat = p.flat();
        assert_eq!(flat.len(), p.num_params());
        let doubled: Vec<f64> = flat.iter().map(|x| 2.0 * x).collect();
        p.set_flat(&doubled).unwrap();
        assert_eq!(p.flat(), doubled);
        assert!(p.set_flat(&doubled[1..]).is_err());
    }
}

//! BPR losses, the two-head objective, Adam, and the epoch loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    caus_e_penalty, caus_e_penalty_grad, default_ips_cap, ips_batch_weights, rank_negative_sampler,
    regression_rank_score, MethodKind, MethodSpec, RankTarget, RegressionTarget,
};
use crate::data::{Dataset, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{mean_view_time_at_t, Scorer};
use crate::grouping::{compute_tau, GroupScheme};
use crate::model::{dropout_rng, Embedding, FeatureSpec, Gradients, Head, HeadConfig, InitMode, Mlp, ModelParams};
use crate::sampling::{epoch_stream, LabelingConfig, PreferencePair, SamplingContext, TrainingTriple};

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(pos - neg)`.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> Result<f64> {
    if !score_pos.is_finite() || !score_neg.is_finite() {
        return Err(Error::NonFinite("bpr score".into()));
    }
    Ok(softplus(score_neg - score_pos))
}

/// `∂/∂pos` of [`bpr_loss`]; the negative score receives the opposite sign.
fn bpr_grad(score_pos: f64, score_neg: f64) -> f64 {
    -sigmoid(score_neg - score_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Score pair `(pos, neg)` on one head, optionally accumulating
/// `coeff · ∂bpr/∂θ`. Dropout streams are keyed by `(example, slot)`.
#[allow(clippy::too_many_arguments)]
fn bpr_pair(
    params: &ModelParams,
    head: Head,
    user: usize,
    pos_video: usize,
    neg_video: usize,
    dropout: Option<(u64, usize, u64)>,
    coeff: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let dropout = dropout.filter(|_| params.head_config.dropout_rate > 0.0);
    let mut rng_pos = dropout.map(|(s, ex, slot)| dropout_rng(s, ex, slot));
    let mut rng_neg = dropout.map(|(s, ex, slot)| dropout_rng(s, ex, slot + 1));
    let (sp, tp) = params.forward(head, user, pos_video, rng_pos.as_mut().map(|r| r as &mut dyn RngCore))?;
    let (sn, tn) = params.forward(head, user, neg_video, rng_neg.as_mut().map(|r| r as &mut dyn RngCore))?;
    let loss = bpr_loss(sp, sn)?;
    if let Some(g) = grads {
        if coeff != 0.0 {
            let d = coeff * bpr_grad(sp, sn);
            params.backward(&tp, d, g)?;
            params.backward(&tn, -d, g)?;
        }
    }
    Ok(loss)
}

fn pair_videos(data: &Dataset, p: PreferencePair) -> (usize, usize, usize) {
    let x = data.interactions();
    (x[p.positive].user, x[p.positive].video, x[p.negative].video)
}

/// Two-head objective on a batch of triples:
/// `L = α·L1 + (1-α)·L2`, each term the mean BPR loss over triples whose slot
/// is present. A slot masked for the whole batch contributes 0.
pub fn batch_loss(
    params: &ModelParams,
    data: &Dataset,
    triples: &[TrainingTriple],
    alpha: f64,
    dropout_seed: Option<u64>,
    mut grads: Option<&mut Gradients>,
) -> Result<LossParts> {
    let n1 = triples.iter().filter(|t| t.general.is_some()).count();
    let n2 = triples.iter().filter(|t| t.grouped.is_some()).count();
    let c1 = if n1 > 0 { alpha / n1 as f64 } else { 0.0 };
    let c2 = if n2 > 0 { (1.0 - alpha) / n2 as f64 } else { 0.0 };
    let (mut s1, mut s2) = (0.0, 0.0);
    for (i, t) in triples.iter().enumerate() {
        if let Some(p) = t.general {
            let (u, pos, neg) = pair_videos(data, p);
            let key = dropout_seed.map(|s| (s, i, 0));
            s1 += bpr_pair(params, Head::F, u, pos, neg, key, c1, grads.as_deref_mut())?;
        }
        if let Some(p) = t.grouped {
            let (u, pos, neg) = pair_videos(data, p);
            let key = dropout_seed.map(|s| (s, i, 2));
            s2 += bpr_pair(params, Head::FUn, u, pos, neg, key, c2, grads.as_deref_mut())?;
        }
    }
    let l1 = if n1 > 0 { s1 / n1 as f64 } else { 0.0 };
    let l2 = if n2 > 0 { s2 / n2 as f64 } else { 0.0 };
    Ok(LossParts {
        total: alpha * l1 + (1.0 - alpha) * l2,
        l1,
        l2,
    })
}

/// Single-task BPR on head `f`: `Σ w_i·bpr_i / n` (unit weights when absent).
pub fn pairwise_batch_loss(
    params: &ModelParams,
    data: &Dataset,
    pairs: &[PreferencePair],
    weights: Option<&[f64]>,
    dropout_seed: Option<u64>,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != pairs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} pairs",
                w.len(),
                pairs.len()
            )));
        }
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for (i, &p) in pairs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (u, pos, neg) = pair_videos(data, p);
        let key = dropout_seed.map(|s| (s, i, 0));
        total += w * bpr_pair(params, Head::F, u, pos, neg, key, w / n, grads.as_deref_mut())?;
    }
    Ok(total / n)
}

/// Mean squared error of head `f` against view time or progress.
pub fn regression_batch_loss(
    params: &ModelParams,
    data: &Dataset,
    points: &[usize],
    target: RegressionTarget,
    dropout_seed: Option<u64>,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let n = points.len() as f64;
    let mut total = 0.0;
    for (i, &j) in points.iter().enumerate() {
        let x = data.interactions()[j];
        let mut rng = dropout_seed
            .filter(|_| params.head_config.dropout_rate > 0.0)
            .map(|s| dropout_rng(s, i, 0));
        let (pred, trace) = params.forward(Head::F, x.user, x.video, rng.as_mut().map(|r| r as &mut dyn RngCore))?;
        let err = pred - target.value(x.view_time, data.video_length(x.video));
        total += err * err;
        if let Some(g) = grads.as_deref_mut() {
            params.backward(&trace, 2.0 * err / n, g)?;
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a scalar with bias correction at step `t` (1-based).
pub fn adam_update(x: &mut f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, cfg: &AdamConfig) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - cfg.beta2.powi(t as i32));
    *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// First and second moments for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Moments,
    v: Moments,
}

#[derive(Debug, Clone)]
struct Moments {
    tables: [Embedding; 3],
    heads: [Mlp; 2],
}

impl Moments {
    fn zeros(p: &ModelParams) -> Self {
        let d = p.spec.embedding_dim;
        let mlp = || Mlp::zeros(p.spec.input_width(), &p.head_config.hidden_sizes);
        Moments {
            tables: [
                Embedding::zeros(p.spec.user_vocab, d),
                Embedding::zeros(p.spec.video_vocab, d),
                Embedding::zeros(p.spec.length_buckets, d),
            ],
            heads: [mlp(), mlp()],
        }
    }
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Moments::zeros(params),
            v: Moments::zeros(params),
        }
    }
}

fn check_finite(grads: &Gradients) -> Result<()> {
    for (name, rows) in [
        ("user", &grads.user),
        ("video", &grads.video),
        ("length", &grads.length),
    ] {
        for (r, g) in rows {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} embedding row {r}")));
            }
        }
    }
    for head in Head::ALL {
        for (l, layer) in grads.head(head).layers.iter().enumerate() {
            if layer.weight.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("head {head:?} layer {l} weight")));
            }
            if layer.bias.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("head {head:?} layer {l} bias")));
            }
        }
    }
    Ok(())
}

/// Adam step. Embedding rows absent from `grads` are skipped entirely,
/// leaving their moments untouched.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    check_finite(grads)?;
    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    let d = params.spec.embedding_dim;
    let tables = [&mut params.user, &mut params.video, &mut params.length];
    let rows = [&grads.user, &grads.video, &grads.length];
    for (k, (table, rows)) in tables.into_iter().zip(rows).enumerate() {
        for (&r, g) in rows {
            let range = r * d..(r + 1) * d;
            let m = &mut state.m.tables[k].data[range.clone()];
            let v = &mut state.v.tables[k].data[range.clone()];
            for (i, x) in table.data[range].iter_mut().enumerate() {
                adam_update(x, g[i], &mut m[i], &mut v[i], t, lr, &cfg);
            }
        }
    }
    for h in 0..2 {
        let layers = params.heads[h].layers.iter_mut();
        let glayers = grads.heads[h].layers.iter();
        let ml = state.m.heads[h].layers.iter_mut();
        let vl = state.v.heads[h].layers.iter_mut();
        for (((p, g), m), v) in layers.zip(glayers).zip(ml).zip(vl) {
            let pv = p.weight.iter_mut().chain(p.bias.iter_mut());
            let gv = g.weight.iter().chain(&g.bias);
            let mv = m.weight.iter_mut().chain(m.bias.iter_mut());
            let vv = v.weight.iter_mut().chain(v.bias.iter_mut());
            for (((x, g), m), v) in pv.zip(gv).zip(mv).zip(vv) {
                adam_update(x, *g, m, v, t, lr, &cfg);
            }
        }
    }
    Ok(())
}

/// How the two-head model ranks at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceHead {
    F,
    FUn,
    /// `α·f + (1-α)·f_un`.
    #[default]
    Mix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    #[serde(flatten)]
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 8,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: MethodSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Weight of the general-pair loss.
    pub alpha: f64,
    pub labeling: LabelingConfig,
    pub model: ModelConfig,
    /// Budget T (seconds) of the validation View_Time@T used for early stopping.
    pub validation_t: f64,
    pub inference: InferenceHead,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: MethodSpec::new(MethodKind::Vldrec),
            learning_rate: 0.005,
            batch_size: 1024,
            max_epochs: 50,
            patience: 5,
            alpha: 0.5,
            labeling: LabelingConfig::default(),
            model: ModelConfig::default(),
            validation_t: 120.0,
            inference: InferenceHead::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.labeling.validate()?;
        self.model.head.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("train.alpha", "must be in [0, 1]"));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be at least 1"));
        }
        if !(self.validation_t > 0.0) {
            return Err(Error::config("train.validation_t", "must be positive"));
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score: method, thresholds, ids and parameters.
/// Serialized as the checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub method: MethodSpec,
    pub alpha: f64,
    pub inference: InferenceHead,
    pub scheme: GroupScheme,
    pub vocab: Vocab,
    pub params: ModelParams,
    /// Second model of CausE, trained on within-group pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<ModelParams>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: serde_json::Value = serde_json::from_str(&text)?;
        let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn vocab_arc(&self) -> Arc<Vocab> {
        Arc::new(self.vocab.clone())
    }
}

impl Scorer for TrainedModel {
    fn score(&self, user: usize, video: usize) -> Result<f64> {
        let p = &self.params;
        match self.method.kind {
            MethodKind::Vldrec => match self.inference {
                InferenceHead::F => p.score(Head::F, user, video),
                InferenceHead::FUn => p.score(Head::FUn, user, video),
                InferenceHead::Mix => Ok(self.alpha * p.score(Head::F, user, video)?
                    + (1.0 - self.alpha) * p.score(Head::FUn, user, video)?),
            },
            kind => {
                let s = p.score(Head::F, user, video)?;
                Ok(match RegressionTarget::for_kind(kind) {
                    Some(target) => regression_rank_score(target, s, self.vocab.video(video).length),
                    None => s,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub valid_view_time_at_t: Option<f64>,
    pub examples: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Writes `epoch,L,L1,L2,valid_view_time_at_T`.
pub fn write_history(history: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "L", "L1", "L2", "valid_view_time_at_T"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.l1.to_string(),
            r.l2.to_string(),
            r.valid_view_time_at_t.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

/// SplitMix64 mixing of a base seed with stream tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seed of the example stream of `epoch` (1-based) for a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &[TAG_EPOCH, epoch as u64])
}

const TAG_INIT: u64 = 1;
const TAG_INIT_AUX: u64 = 2;
const TAG_EPOCH: u64 = 3;
const TAG_DROPOUT: u64 = 4;

enum EpochExamples {
    Triples(Vec<TrainingTriple>),
    Pairs(Vec<PreferencePair>),
    Points(Vec<usize>),
    TwoModel(Vec<(Option<PreferencePair>, Option<PreferencePair>)>),
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn rank_pairs(data: &Dataset, target: RankTarget, rng: &mut ChaCha8Rng) -> Result<(Vec<PreferencePair>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for anchor in shuffled(data.len(), rng) {
        let history = data.user_interactions(data.interactions()[anchor].user);
        if history.len() < 2 {
            skipped += 1;
            continue;
        }
        match rank_negative_sampler(data, history, anchor, target, rng)? {
            Some(p) => pairs.push(p),
            None => skipped += 1,
        }
    }
    Ok((pairs, skipped))
}

/// Main-model and auxiliary-model pair drawn for one anchor.
type PairSlots = (Option<PreferencePair>, Option<PreferencePair>);

fn two_model_pairs(ctx: &SamplingContext, rng: &mut ChaCha8Rng) -> Result<(Vec<PairSlots>, usize)> {
    let data = ctx.data();
    let mut out = Vec::new();
    let mut skipped = 0;
    for anchor in shuffled(data.len(), rng) {
        let user = data.interactions()[anchor].user;
        let history = data.user_interactions(user);
        let group = ctx.user_group(user, ctx.group(anchor));
        let main = if history.len() >= 2 {
            rank_negative_sampler(data, history, anchor, RankTarget::Time, rng)?
        } else {
            None
        };
        let aux = if group.len() >= 2 {
            rank_negative_sampler(data, group, anchor, RankTarget::Time, rng)?
        } else {
            None
        };
        if main.is_none() && aux.is_none() {
            skipped += 1;
        } else {
            out.push((main, aux));
        }
    }
    Ok((out, skipped))
}

struct Trainer<'a> {
    data: &'a Dataset,
    cfg: &'a TrainConfig,
    method: MethodSpec,
    ctx: SamplingContext<'a>,
}

impl Trainer<'_> {
    fn epoch_examples(&self, epoch: usize) -> Result<(EpochExamples, usize)> {
        let seed = epoch_seed(self.cfg.seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.method.kind;
        Ok(match kind {
            MethodKind::Vldrec => {
                let s = epoch_stream(&self.ctx, &self.cfg.labeling, seed)?;
                (EpochExamples::Triples(s.triples), s.skipped)
            }
            MethodKind::TReg | MethodKind::RReg => (EpochExamples::Points(shuffled(self.data.len(), &mut rng)), 0),
            MethodKind::CausE => {
                let (p, skipped) = two_model_pairs(&self.ctx, &mut rng)?;
                (EpochExamples::TwoModel(p), skipped)
            }
            _ => {
                let (p, skipped) = rank_pairs(self.data, RankTarget::for_kind(kind), &mut rng)?;
                (EpochExamples::Pairs(p), skipped)
            }
        })
    }

    /// Runs one epoch, updating `params` (and `aux` for CausE). Returns mean batch losses.
    fn run_epoch(
        &self,
        epoch: usize,
        params: &mut ModelParams,
        adam: &mut AdamState,
        aux: Option<(&mut ModelParams, &mut AdamState)>,
    ) -> Result<(LossParts, usize, usize)> {
        let (examples, skipped) = self.epoch_examples(epoch)?;
        let bs = self.cfg.batch_size;
        let lr = self.cfg.learning_rate;
        let dropout = |b: usize| Some(derive_seed(self.cfg.seed, &[TAG_DROPOUT, epoch as u64, b as u64]));
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        let count;
        match examples {
            EpochExamples::Triples(t) => {
                count = t.len();
                for (b, chunk) in t.chunks(bs).enumerate() {
                    let mut g = Gradients::zeros_like(params);
                    let l = batch_loss(params, self.data, chunk, self.cfg.alpha, dropout(b), Some(&mut g))?;
                    adam_step(params, &g, adam, lr)?;
                    accumulate(&mut sums, l, &mut batches)?;
                }
            }
            EpochExamples::Pairs(p) => {
                count = p.len();
                let kind = self.method.kind;
                for (b, chunk) in p.chunks(bs).enumerate() {
                    let weights = if kind.is_ips() {
                        let lengths: Vec<f64> = chunk
                            .iter()
                            .map(|q| self.data.video_length(self.data.interactions()[q.positive].video))
                            .collect();
                        Some(ips_batch_weights(kind, &lengths, self.method.ips_cap)?)
                    } else {
                        None
                    };
                    let mut g = Gradients::zeros_like(params);
                    let l =
                        pairwise_batch_loss(params, self.data, chunk, weights.as_deref(), dropout(b), Some(&mut g))?;
                    adam_step(params, &g, adam, lr)?;
                    accumulate(
                        &mut sums,
                        LossParts {
                            total: l,
                            l1: l,
                            l2: 0.0,
                        },
                        &mut batches,
                    )?;
                }
            }
            EpochExamples::Points(p) => {
                count = p.len();
                let target = RegressionTarget::for_kind(self.method.kind).unwrap();
                for (b, chunk) in p.chunks(bs).enumerate() {
                    let mut g = Gradients::zeros_like(params);
                    let l = regression_batch_loss(params, self.data, chunk, target, dropout(b), Some(&mut g))?;
                    adam_step(params, &g, adam, lr)?;
                    accumulate(
                        &mut sums,
                        LossParts {
                            total: l,
                            l1: l,
                            l2: 0.0,
                        },
                        &mut batches,
                    )?;
                }
            }
            EpochExamples::TwoModel(p) => {
                count = p.len();
                let (aux, aux_adam) = aux.ok_or_else(|| Error::InvalidInput("CausE needs two models".into()))?;
                let lambda = self.method.caus_e_lambda.unwrap_or(0.0);
                for (b, chunk) in p.chunks(bs).enumerate() {
                    let main_pairs: Vec<PreferencePair> = chunk.iter().filter_map(|c| c.0).collect();
                    let aux_pairs: Vec<PreferencePair> = chunk.iter().filter_map(|c| c.1).collect();
                    let mut gm = Gradients::zeros_like(params);
                    let mut ga = Gradients::zeros_like(aux);
                    let l1 = pairwise_batch_loss(params, self.data, &main_pairs, None, dropout(b), Some(&mut gm))?;
                    let aux_seed = dropout(b).map(|s| derive_seed(s, &[TAG_INIT_AUX]));
                    let l2 = pairwise_batch_loss(aux, self.data, &aux_pairs, None, aux_seed, Some(&mut ga))?;
                    let pen = caus_e_penalty(params, aux, lambda)?;
                    caus_e_penalty_grad(params, aux, lambda, &mut gm, &mut ga)?;
                    adam_step(params, &gm, adam, lr)?;
                    adam_step(aux, &ga, aux_adam, lr)?;
                    accumulate(
                        &mut sums,
                        LossParts {
                            total: l1 + l2 + pen,
                            l1,
                            l2,
                        },
                        &mut batches,
                    )?;
                }
            }
        }
        let n = batches.max(1) as f64;
        Ok((
            LossParts {
                total: sums.total / n,
                l1: sums.l1 / n,
                l2: sums.l2 / n,
            },
            count,
            skipped,
        ))
    }
}

fn accumulate(sums: &mut LossParts, l: LossParts, batches: &mut usize) -> Result<()> {
    if !l.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    sums.total += l.total;
    sums.l1 += l.l1;
    sums.l2 += l.l2;
    *batches += 1;
    Ok(())
}

/// Trains `cfg.method` on `train`, early-stopping on validation View_Time@T.
///
/// Thresholds τ(g) are computed from `train` only. Returns the parameters of
/// the best validation epoch (the last epoch when `valid` is empty).
pub fn train(train: &Dataset, valid: &Dataset, boundaries: &GroupScheme, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if !Arc::ptr_eq(train.vocab(), valid.vocab()) && train.vocab() != valid.vocab() {
        return Err(Error::InvalidInput(
            "training and validation sets use different vocabularies".into(),
        ));
    }
    let scheme = compute_tau(train, boundaries, cfg.labeling.positive_fraction)?;
    let mut method = cfg.method.clone();
    if method.kind.is_capped_ips() && method.ips_cap.is_none() {
        method.ips_cap = default_ips_cap(train);
    }
    if method.kind == MethodKind::CausE && method.caus_e_lambda.is_none() {
        method.caus_e_lambda = Some(0.0);
    }
    let spec = FeatureSpec {
        user_vocab: train.vocab().num_users(),
        video_vocab: train.vocab().num_videos(),
        length_buckets: scheme.num_groups(),
        embedding_dim: cfg.model.embedding_dim,
    };
    let buckets = scheme.video_groups(train)?;
    let init = |tag| {
        ModelParams::init(
            spec.clone(),
            cfg.model.head.clone(),
            buckets.clone(),
            derive_seed(cfg.seed, &[tag]),
            InitMode::Random,
        )
    };
    let mut params = init(TAG_INIT)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut aux = if method.kind == MethodKind::CausE {
        let a = init(TAG_INIT_AUX)?;
        let s = AdamState::new(&a, cfg.adam);
        Some((a, s))
    } else {
        None
    };

    let mut model = TrainedModel {
        format_version: CHECKPOINT_VERSION,
        method: method.clone(),
        alpha: cfg.alpha,
        inference: cfg.inference,
        scheme: scheme.clone(),
        vocab: (**train.vocab()).clone(),
        params: params.clone(),
        aux: aux.as_ref().map(|a| a.0.clone()),
    };
    let trainer = Trainer {
        data: train,
        cfg,
        method,
        ctx: SamplingContext::new(train, &scheme)?,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let (loss, examples, skipped) =
            trainer.run_epoch(epoch, &mut params, &mut adam, aux.as_mut().map(|(a, s)| (a, s)))?;
        let candidate = TrainedModel {
            params: params.clone(),
            aux: aux.as_ref().map(|a| a.0.clone()),
            ..model.clone()
        };
        let metric = mean_view_time_at_t(&candidate, valid, cfg.validation_t)?;
        log::info!(
            "epoch {epoch}: L={:.6} L1={:.6} L2={:.6} valid={metric:?} examples={examples} skipped={skipped}",
            loss.total,
            loss.l1,
            loss.l2
        );
        history.push(EpochRecord {
            epoch,
            loss: loss.total,
            l1: loss.l1,
            l2: loss.l2,
            valid_view_time_at_t: metric,
            examples,
            skipped,
        });
        match metric {
            None => model = candidate,
            Some(m) if best.is_none_or(|(b, _)| m > b) => {
                best = Some((m, epoch));
                stale = 0;
                model = candidate;
            }
            Some(_) => {
                stale += 1;
                if stale > cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.map(|b| b.1),
    })
}

//! Synthetic interactions with planted, length-independent preferences and a
//! length-correlated view-time floor.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction, Video, Vocab};
use crate::error::{Error, Result};
use crate::grouping::GroupScheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_interactions: usize,
    pub n_topics: usize,
    /// Upper edges of the length ranges lengths are drawn from.
    pub length_boundaries: Vec<f64>,
    /// Mixture weight of each range; lengths are uniform integers within a range.
    pub length_weights: Vec<f64>,
    /// Symmetric Dirichlet concentration of user topic preferences.
    pub affinity_concentration: f64,
    pub bias_strength: f64,
    /// Standard deviation of additive view-time noise, in seconds.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_videos: 5_000,
            n_interactions: 100_000,
            n_topics: 5,
            length_boundaries: GroupScheme::kuaishou().boundaries().to_vec(),
            length_weights: vec![0.3, 0.3, 0.2, 0.1, 0.1],
            affinity_concentration: 0.5,
            bias_strength: 0.5,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("synth.n_users", self.n_users),
            ("synth.n_videos", self.n_videos),
            ("synth.n_interactions", self.n_interactions),
            ("synth.n_topics", self.n_topics),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        GroupScheme::new(self.length_boundaries.clone())
            .map_err(|_| Error::config("synth.length_boundaries", "must be positive and strictly ascending"))?;
        if self.length_weights.len() != self.length_boundaries.len() {
            return Err(Error::config(
                "synth.length_weights",
                "needs one weight per length range",
            ));
        }
        if self.length_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.length_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "synth.length_weights",
                "must be non-negative with a positive sum",
            ));
        }
        // every selectable range must contain an integer length
        let mut lower: f64 = 0.0;
        for (&upper, &w) in self.length_boundaries.iter().zip(&self.length_weights) {
            if w > 0.0 && lower.floor() + 1.0 > upper {
                return Err(Error::config(
                    "synth.length_boundaries",
                    "a weighted range holds no integer length",
                ));
            }
            lower = upper;
        }
        if !(self.affinity_concentration > 0.0) || !self.affinity_concentration.is_finite() {
            return Err(Error::config("synth.affinity_concentration", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::config("synth.bias_strength", "must be in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("synth.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Planted preferences: one topic per video, a topic weight vector per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_topic: Vec<usize>,
    /// Per-user topic weights scaled so the favourite topic has weight 1.
    pub user_affinity: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn affinity(&self, user: usize, video: usize) -> Result<f64> {
        let row = self.user_affinity.get(user).ok_or(Error::UnknownId {
            kind: "user",
            index: user,
            size: self.user_affinity.len(),
        })?;
        let topic = *self.video_topic.get(video).ok_or(Error::UnknownId {
            kind: "video",
            index: video,
            size: self.video_topic.len(),
        })?;
        Ok(row[topic])
    }

    /// Writes `user_id,video_id,affinity` for every pair present in `d`.
    pub fn write_csv(&self, d: &Dataset, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "video_id", "affinity"])?;
        let vocab = d.vocab();
        let mut seen = std::collections::BTreeSet::new();
        for x in d.interactions() {
            if seen.insert((x.user, x.video)) {
                w.write_record([
                    vocab.user_id(x.user),
                    &vocab.video(x.video).id,
                    &self.affinity(x.user, x.video)?.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<ground truth>", e))?;
        Ok(())
    }
}

/// Bias-free view time `l · a(u, v)`.
pub fn oracle_view_time(truth: &GroundTruth, d: &Dataset, user: usize, video: usize) -> Result<f64> {
    let a = truth.affinity(user, video)?;
    if video >= d.vocab().num_videos() {
        return Err(Error::UnknownId {
            kind: "video",
            index: video,
            size: d.vocab().num_videos(),
        });
    }
    Ok(d.video_length(video) * a)
}

/// Copy of `d` whose view times are replaced by [`oracle_view_time`].
pub fn with_oracle_view_time(truth: &GroundTruth, d: &Dataset) -> Result<Dataset> {
    let xs = d
        .interactions()
        .iter()
        .map(|x| {
            Ok(Interaction {
                view_time: oracle_view_time(truth, d, x.user, x.video)?,
                ..*x
            })
        })
        .collect::<Result<Vec<_>>>()?;
    d.with_interactions(xs)
}

fn draw_length(cfg: &SynthConfig, total_weight: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut r = rng.random::<f64>() * total_weight;
    let mut k = 0;
    while k + 1 < cfg.length_weights.len() && (r >= cfg.length_weights[k] || cfg.length_weights[k] == 0.0) {
        r -= cfg.length_weights[k];
        k += 1;
    }
    let lo = if k == 0 { 0.0 } else { cfg.length_boundaries[k - 1] };
    let lo = lo.floor() as u64 + 1;
    let hi = cfg.length_boundaries[k].floor() as u64;
    rng.random_range(lo..=hi) as f64
}

/// Generates a dataset and its ground truth.
///
/// Observed view time is `clamp(l·((1-b)·a + b·base) + noise, 0, 3l)` with
/// `base ~ U(0, 2l/l_max)`, so the progress floor (and hence mean view time)
/// grows with length while `a` does not depend on it.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_weight: f64 = cfg.length_weights.iter().sum();
    let l_max = *cfg.length_boundaries.last().unwrap();

    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut video_topic = Vec::with_capacity(cfg.n_videos);
    for j in 0..cfg.n_videos {
        videos.push(Video {
            id: format!("v{j}"),
            length: draw_length(cfg, total_weight, &mut rng),
        });
        video_topic.push(rng.random_range(0..cfg.n_topics));
    }

    let gamma = Gamma::new(cfg.affinity_concentration, 1.0)
        .map_err(|e| Error::config("synth.affinity_concentration", e.to_string()))?;
    let mut user_affinity = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let theta: Vec<f64> = (0..cfg.n_topics).map(|_| gamma.sample(&mut rng)).collect();
        let max = theta.iter().cloned().fold(0.0, f64::max);
        user_affinity.push(if max > 0.0 {
            theta.iter().map(|x| x / max).collect()
        } else {
            vec![1.0; cfg.n_topics]
        });
    }
    let truth = GroundTruth {
        video_topic,
        user_affinity,
    };

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("synth.noise_std", e.to_string()))?;
    let b = cfg.bias_strength;
    let mut interactions = Vec::with_capacity(cfg.n_interactions);
    for _ in 0..cfg.n_interactions {
        let user = rng.random_range(0..cfg.n_users);
        let video = rng.random_range(0..cfg.n_videos);
        let l = videos[video].length;
        let a = truth.affinity(user, video)?;
        let base = rng.random::<f64>() * 2.0 * l / l_max;
        let t = l * ((1.0 - b) * a + b * base) + noise.sample(&mut rng);
        interactions.push(Interaction {
            user,
            video,
            view_time: t.clamp(0.0, 3.0 * l),
        });
    }
    let users = (0..cfg.n_users).map(|i| format!("u{i}")).collect();
    let data = Dataset::new(Arc::new(Vocab::new(users, videos)), interactions)?;
    Ok((data, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(bias: f64, noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_users: 40,
            n_videos: 300,
            n_interactions: 4_000,
            n_topics: 5,
            bias_strength: bias,
            noise_std: noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_bias_no_noise_progress_is_affinity() {
        let (d, truth) = generate(&small(0.0, 0.0, 1)).unwrap();
        for (i, x) in d.interactions().iter().enumerate() {
            let a = truth.affinity(x.user, x.video).unwrap();
            assert!((d.progress(i) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn full_bias_ignores_affinity() {
        let cfg = small(1.0, 0.0, 2);
        let (d, _) = generate(&cfg).unwrap();
        let l_max = 60.0;
        for (i, x) in d.interactions().iter().enumerate() {
            let l = d.video_length(x.video);
            assert!(d.progress(i) <= 2.0 * l / l_max + 1e-12);
        }
    }

    #[test]
    fn mean_view_time_grows_with_length() {
        let (d, _) = generate(&small(0.5, 1.0, 3)).unwrap();
        let xs: Vec<(f64, f64)> = d
            .interactions()
            .iter()
            .map(|x| (d.video_length(x.video), x.view_time))
            .collect();
        let n = xs.len() as f64;
        let (mx, my) = xs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
        let cov: f64 = xs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        assert!(cov > 0.0);
    }

    #[test]
    fn outputs_are_bounded_and_deterministic() {
        let cfg = small(0.5, 5.0, 4);
        let (d, t) = generate(&cfg).unwrap();
        for i in 0..d.len() {
            assert!((0.0..=3.0).contains(&d.progress(i)));
        }
        for v in d.vocab().videos() {
            assert!(v.length >= 1.0 && v.length <= 60.0 && v.length.fract() == 0.0);
        }
        let (d2, t2) = generate(&cfg).unwrap();
        assert_eq!(d.interactions(), d2.interactions());
        assert_eq!(t, t2);
    }

    #[test]
    fn oracle_view_time_examples() {
        let truth = GroundTruth {
            video_topic: vec![0, 1, 2],
            user_affinity: vec![vec![1.0, 0.0, 0.5]],
        };
        let vocab = Vocab::new(
            vec!["u".into()],
            vec![
                Video {
                    id: "a".into(),
                    length: 30.0,
                },
                Video {
                    id: "b".into(),
                    length: 30.0,
                },
                Video {
                    id: "c".into(),
                    length: 40.0,
                },
            ],
        );
        let d = Dataset::new(Arc::new(vocab), vec![]).unwrap();
        assert_eq!(oracle_view_time(&truth, &d, 0, 0).unwrap(), 30.0);
        assert_eq!(oracle_view_time(&truth, &d, 0, 1).unwrap(), 0.0);
        assert_eq!(oracle_view_time(&truth, &d, 0, 2).unwrap(), 20.0);
        assert!(oracle_view_time(&truth, &d, 1, 0).is_err());
        assert!(oracle_view_time(&truth, &d, 0, 3).is_err());
    }

    #[test]
    fn rejects_bad_bias() {
        let cfg = SynthConfig {
            bias_strength: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig { .. })));
    }
}

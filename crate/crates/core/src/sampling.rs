//! Progress-based labeling and length-conditioned negative sampling.
//!
//! Every anchor interaction yields up to two preference pairs drawn from the
//! same user's history: a general pair from anywhere in the history and a
//! grouped pair restricted to videos in the anchor's length group. Labels are
//! derived from play progress, either by the per-group threshold τ(g)
//! (pointwise) or by a progress margin ε (pairwise).

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grouping::GroupScheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    /// Probability of labeling an anchor with the pointwise threshold rule.
    pub beta: f64,
    /// Minimum progress gap for the pairwise rule.
    pub epsilon: f64,
    /// Share of each group's interactions above τ(g).
    pub positive_fraction: f64,
    /// Rejection-sampling budget per slot before the slot is masked.
    pub max_resample_attempts: usize,
    /// Histories up to this size are enumerated instead of rejection-sampled.
    pub exhaustive_threshold: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            beta: 0.5,
            epsilon: 0.1,
            positive_fraction: 0.2,
            max_resample_attempts: 20,
            exhaustive_threshold: 64,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("labeling.beta", "must be in [0, 1]"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("labeling.epsilon", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::config("labeling.positive_fraction", "must be in [0, 1]"));
        }
        if self.max_resample_attempts == 0 {
            return Err(Error::config("labeling.max_resample_attempts", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Pointwise,
    Pairwise,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Pointwise => "pointwise",
            Branch::Pairwise => "pairwise",
        }
    }
}

/// Two interactions of one user, `positive` preferred over `negative`.
/// Both are indices into the training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreferencePair {
    pub positive: usize,
    pub negative: usize,
}

/// The training unit for one anchor. A missing slot masks its loss term.
///
/// Each slot is oriented independently: when the anchor is the low side the
/// drawn candidate becomes that slot's positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: usize,
    pub anchor: usize,
    pub general: Option<PreferencePair>,
    pub grouped: Option<PreferencePair>,
    pub branch: Branch,
}

/// Uniformly random element of `candidates`.
pub fn uniform_sampler<T: Copy, R: Rng + ?Sized>(candidates: &[T], rng: &mut R) -> Result<T> {
    candidates
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::InvalidInput("cannot sample from an empty candidate list".into()))
}

/// Per-interaction progress, group and threshold flags for one training set.
#[derive(Debug, Clone)]
pub struct SamplingContext<'a> {
    data: &'a Dataset,
    scheme: &'a GroupScheme,
    progress: Vec<f64>,
    group: Vec<usize>,
    exceeds: Vec<bool>,
    by_user_group: Vec<Vec<Vec<usize>>>,
}

impl<'a> SamplingContext<'a> {
    /// `scheme` must carry thresholds (see [`crate::grouping::compute_tau`]).
    pub fn new(data: &'a Dataset, scheme: &'a GroupScheme) -> Result<Self> {
        if !scheme.has_tau() {
            return Err(Error::InvalidInput(
                "group scheme has no thresholds; compute them on the training split".into(),
            ));
        }
        let video_group = scheme.video_groups(data)?;
        let n = data.len();
        let mut progress = Vec::with_capacity(n);
        let mut group = Vec::with_capacity(n);
        let mut exceeds = Vec::with_capacity(n);
        let mut by_user_group = vec![vec![Vec::new(); scheme.num_groups()]; data.vocab().num_users()];
        for (i, x) in data.interactions().iter().enumerate() {
            let p = data.progress(i);
            let g = video_group[x.video];
            progress.push(p);
            group.push(g);
            exceeds.push(p > scheme.tau(g));
            by_user_group[x.user][g].push(i);
        }
        Ok(SamplingContext {
            data,
            scheme,
            progress,
            group,
            exceeds,
            by_user_group,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn scheme(&self) -> &GroupScheme {
        self.scheme
    }

    pub fn progress(&self, i: usize) -> f64 {
        self.progress[i]
    }

    pub fn group(&self, i: usize) -> usize {
        self.group[i]
    }

    /// Whether interaction `i` is above τ of its own group.
    pub fn exceeds_tau(&self, i: usize) -> bool {
        self.exceeds[i]
    }

    pub fn user_group(&self, user: usize, group: usize) -> &[usize] {
        &self.by_user_group[user][group]
    }
}

fn admissible(ctx: &SamplingContext, branch: Branch, epsilon: f64, anchor: usize, k: usize) -> bool {
    if k == anchor {
        return false;
    }
    match branch {
        Branch::Pointwise => ctx.exceeds[anchor] != ctx.exceeds[k],
        Branch::Pairwise => (ctx.progress[anchor] - ctx.progress[k]).abs() > epsilon,
    }
}

fn draw_candidate<R: Rng + ?Sized>(
    ctx: &SamplingContext,
    cfg: &LabelingConfig,
    branch: Branch,
    anchor: usize,
    pool: &[usize],
    rng: &mut R,
) -> Option<usize> {
    let ok = |k: usize| admissible(ctx, branch, cfg.epsilon, anchor, k);
    if pool.len() <= cfg.exhaustive_threshold {
        let candidates: Vec<usize> = pool.iter().copied().filter(|&k| ok(k)).collect();
        return uniform_sampler(&candidates, rng).ok();
    }
    (0..cfg.max_resample_attempts)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .find(|&k| ok(k))
}

fn orient(ctx: &SamplingContext, branch: Branch, anchor: usize, k: usize) -> PreferencePair {
    let anchor_wins = match branch {
        Branch::Pointwise => ctx.exceeds[anchor],
        Branch::Pairwise => ctx.progress[anchor] > ctx.progress[k],
    };
    if anchor_wins {
        PreferencePair {
            positive: anchor,
            negative: k,
        }
    } else {
        PreferencePair {
            positive: k,
            negative: anchor,
        }
    }
}

/// Draws the general and length-conditioned pairs for one anchor.
///
/// Returns `Ok(None)` when neither slot has an admissible candidate.
pub fn generate_triple<R: Rng + ?Sized>(
    ctx: &SamplingContext,
    user: usize,
    anchor: usize,
    cfg: &LabelingConfig,
    rng: &mut R,
) -> Result<Option<TrainingTriple>> {
    let history = ctx.data.user_interactions(user);
    if history.binary_search(&anchor).is_err() {
        return Err(Error::InvalidInput(format!(
            "anchor {anchor} is not in the history of user {user}"
        )));
    }
    let branch = if rng.random::<f64>() < cfg.beta {
        Branch::Pointwise
    } else {
        Branch::Pairwise
    };
    let same_group = &ctx.by_user_group[user][ctx.group[anchor]];
    let general = draw_candidate(ctx, cfg, branch, anchor, history, rng).map(|k| orient(ctx, branch, anchor, k));
    let grouped = draw_candidate(ctx, cfg, branch, anchor, same_group, rng).map(|k| orient(ctx, branch, anchor, k));
    if general.is_none() && grouped.is_none() {
        return Ok(None);
    }
    Ok(Some(TrainingTriple {
        user,
        anchor,
        general,
        grouped,
        branch,
    }))
}

/// One shuffled pass over the training interactions.
#[derive(Debug, Clone, Default)]
pub struct EpochSample {
    pub triples: Vec<TrainingTriple>,
    pub anchors: usize,
    pub skipped: usize,
    pub masked_general: usize,
    pub masked_grouped: usize,
}

pub fn epoch_stream(ctx: &SamplingContext, cfg: &LabelingConfig, seed: u64) -> Result<EpochSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ctx.data.len()).collect();
    order.shuffle(&mut rng);
    let mut out = EpochSample {
        anchors: order.len(),
        ..Default::default()
    };
    for anchor in order {
        let user = ctx.data.interactions()[anchor].user;
        match generate_triple(ctx, user, anchor, cfg, &mut rng)? {
            Some(t) => {
                out.masked_general += usize::from(t.general.is_none());
                out.masked_grouped += usize::from(t.grouped.is_none());
                out.triples.push(t);
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Audit dump: `user,pos_video,neg_video,grouped_neg_video,branch,grouped_pos_video`.
///
/// `pos_video` is the general pair's positive (the grouped one when the
/// general slot is masked); masked negatives are left empty.
pub fn write_triples(ctx: &SamplingContext, triples: &[TrainingTriple], out: impl Write) -> Result<()> {
    let d = ctx.data;
    let video_of = |i: usize| d.vocab().video(d.interactions()[i].video).id.clone();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "user",
        "pos_video",
        "neg_video",
        "grouped_neg_video",
        "branch",
        "grouped_pos_video",
    ])?;
    for t in triples {
        let pos = t
            .general
            .or(t.grouped)
            .map(|p| video_of(p.positive))
            .unwrap_or_default();
        w.write_record([
            d.vocab().user_id(t.user).to_string(),
            pos,
            t.general.map(|p| video_of(p.negative)).unwrap_or_default(),
            t.grouped.map(|p| video_of(p.negative)).unwrap_or_default(),
            t.branch.as_str().to_string(),
            t.grouped.map(|p| video_of(p.positive)).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<triples>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest;

    fn dataset(rows: &[(&str, &str, f64)], videos: &[(&str, f64)]) -> Dataset {
        let i: String = rows.iter().map(|(u, v, t)| format!("{u},{v},{t}\n")).collect();
        let v: String = videos.iter().map(|(v, l)| format!("{v},{l}\n")).collect();
        ingest(
            format!("user_id,video_id,view_time\n{i}").as_bytes(),
            "i",
            format!("video_id,length\n{v}").as_bytes(),
            "v",
        )
        .unwrap()
    }

    fn scheme_with_tau(tau: f64) -> GroupScheme {
        GroupScheme::new(vec![20.0, 60.0])
            .unwrap()
            .with_tau(vec![tau, tau])
            .unwrap()
    }

    #[test]
    fn uniform_sampler_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(uniform_sampler(&[42], &mut rng).unwrap(), 42);
        assert!(uniform_sampler::<u8, _>(&[], &mut rng).is_err());
    }

    #[test]
    fn pointwise_single_admissible_assignment() {
        let d = dataset(&[("u", "a", 9.0), ("u", "b", 1.0)], &[("a", 10.0), ("b", 10.0)]);
        let scheme = scheme_with_tau(0.5);
        let ctx = SamplingContext::new(&d, &scheme).unwrap();
        let cfg = LabelingConfig {
            beta: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for anchor in [0, 1] {
            let t = generate_triple(&ctx, 0, anchor, &cfg, &mut rng).unwrap().unwrap();
            assert_eq!(t.branch, Branch::Pointwise);
            let expected = PreferencePair {
                positive: 0,
                negative: 1,
            };
            assert_eq!(t.general, Some(expected));
            assert_eq!(t.grouped, Some(expected));
        }
    }

    #[test]
    fn pairwise_margin_unsatisfiable_skips() {
        let d = dataset(&[("u", "a", 6.0), ("u", "b", 5.5)], &[("a", 10.0), ("b", 10.0)]);
        let scheme = scheme_with_tau(0.5);
        let ctx = SamplingContext::new(&d, &scheme).unwrap();
        let cfg = LabelingConfig {
            beta: 0.0,
            epsilon: 0.1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(generate_triple(&ctx, 0, 0, &cfg, &mut rng).unwrap(), None);
    }

    #[test]
    fn grouped_slot_masked_when_group_has_no_partner() {
        let d = dataset(&[("u", "a", 9.0), ("u", "b", 5.0)], &[("a", 10.0), ("b", 50.0)]);
        let scheme = scheme_with_tau(0.5);
        let ctx = SamplingContext::new(&d, &scheme).unwrap();
        let cfg = LabelingConfig {
            beta: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = generate_triple(&ctx, 0, 0, &cfg, &mut rng).unwrap().unwrap();
        assert_eq!(
            t.general,
            Some(PreferencePair {
                positive: 0,
                negative: 1
            })
        );
        assert_eq!(t.grouped, None);
    }

    #[test]
    fn anchor_outside_history_is_an_error() {
        let d = dataset(&[("u", "a", 9.0), ("w", "b", 1.0)], &[("a", 10.0), ("b", 10.0)]);
        let scheme = scheme_with_tau(0.5);
        let ctx = SamplingContext::new(&d, &scheme).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_triple(&ctx, 0, 1, &LabelingConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn single_interaction_user_is_always_skipped() {
        let d = dataset(
            &[("u", "a", 9.0), ("w", "b", 1.0), ("w", "a", 1.0)],
            &[("a", 10.0), ("b", 10.0)],
        );
        let scheme = scheme_with_tau(0.5);
        let ctx = SamplingContext::new(&d, &scheme).unwrap();
        let sample = epoch_stream(&ctx, &LabelingConfig::default(), 5).unwrap();
        assert!(sample.triples.iter().all(|t| t.user == 1));
        assert!(sample.skipped >= 1);
        assert_eq!(sample.triples.len() + sample.skipped, 3);
    }

    #[test]
    fn scheme_without_tau_is_rejected() {
        let d = dataset(&[("u", "a", 9.0)], &[("a", 10.0)]);
        let scheme = GroupScheme::new(vec![60.0]).unwrap();
        assert!(SamplingContext::new(&d, &scheme).is_err());
    }
}

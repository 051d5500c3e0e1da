//! Per-user ranked lists and view-time metrics.
//!
//! Candidates for a user are that user's own held-out interactions; lists are
//! ranked by descending score with ties broken by ascending video id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Vocab};
use crate::error::{Error, Result};
use crate::grouping::GroupScheme;

/// Anything that scores a (user, video) pair by vocabulary index.
pub trait Scorer: Sync {
    fn score(&self, user: usize, video: usize) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    fn score(&self, user: usize, video: usize) -> Result<f64> {
        Ok(self(user, video))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub video: usize,
    pub length: f64,
    pub view_time: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Sorts `entries` by descending score, then ascending video id.
    pub fn new(user: usize, mut entries: Vec<RankedEntry>, vocab: &Vocab) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| vocab.video(a.video).id.cmp(&vocab.video(b.video).id))
        });
        RankedList { user, entries }
    }
}

/// Ranks one user's interactions, optionally restricted to a set of videos.
pub fn rank_user(scorer: &dyn Scorer, data: &Dataset, user: usize, keep: impl Fn(usize) -> bool) -> Result<RankedList> {
    let entries = data
        .user_interactions(user)
        .iter()
        .map(|&i| data.interactions()[i])
        .filter(|x| keep(x.video))
        .map(|x| {
            Ok(RankedEntry {
                video: x.video,
                length: data.video_length(x.video),
                view_time: x.view_time,
                score: scorer.score(user, x.video)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::new(user, entries, data.vocab()))
}

/// Total true view time of the first `k` entries.
pub fn view_time_at_k(list: &RankedList, k: usize) -> f64 {
    list.entries.iter().take(k).map(|e| e.view_time).sum()
}

/// Total true view time of the ranked prefix whose lengths sum to `t`,
/// scaling the entry that crosses the budget by the fraction that fits.
pub fn view_time_at_t(list: &RankedList, t: f64) -> f64 {
    let mut used = 0.0;
    let mut total = 0.0;
    for e in &list.entries {
        let remaining = t - used;
        if remaining <= 0.0 {
            break;
        }
        if e.length > remaining {
            total += e.view_time * (remaining / e.length);
            break;
        }
        used += e.length;
        total += e.view_time;
    }
    total
}

/// Mean View_Time@T over every user with interactions in `data`, or `None`
/// when there is no such user.
pub fn mean_view_time_at_t(scorer: &dyn Scorer, data: &Dataset, t: f64) -> Result<Option<f64>> {
    let users: Vec<usize> = data.active_users().collect();
    let values = users
        .par_iter()
        .map(|&u| Ok(view_time_at_t(&rank_user(scorer, data, u, |_| true)?, t)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

/// Number of common elements between two top-k sets.
pub fn size_of_intersection<T: Ord>(recommended: &[T], truth: &[T]) -> usize {
    let a: BTreeSet<&T> = recommended.iter().collect();
    let b: BTreeSet<&T> = truth.iter().collect();
    a.intersection(&b).count()
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>()
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has a negative or non-finite mass")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits over a shared support.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions over {} and {} outcomes",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = entropy_bits(&m) - 0.5 * (entropy_bits(p) + entropy_bits(q));
    Ok(d.clamp(0.0, 1.0))
}

/// Empirical distributions of two label multisets over their union support.
pub fn label_distributions<T: Ord + Clone>(a: &[T], b: &[T]) -> (Vec<f64>, Vec<f64>) {
    let support: BTreeSet<T> = a.iter().chain(b).cloned().collect();
    let dist = |xs: &[T]| {
        let mut counts: BTreeMap<&T, usize> = support.iter().map(|s| (s, 0)).collect();
        xs.iter().for_each(|x| *counts.get_mut(x).unwrap() += 1);
        counts.values().map(|&c| c as f64 / xs.len().max(1) as f64).collect()
    };
    (dist(a), dist(b))
}

/// Video categories keyed by vocabulary index.
#[derive(Debug, Clone, Default)]
pub struct Categories {
    by_video: HashMap<usize, String>,
}

impl Categories {
    /// Reads `video_id,category`; rows for videos outside `vocab` are ignored.
    pub fn read(reader: impl Read, vocab: &Vocab) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let pos = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidInput(format!("category file lacks column `{name}`")))
        };
        let (vid, cat) = (pos("video_id")?, pos("category")?);
        let mut by_video = HashMap::new();
        for r in rdr.records() {
            let r = r?;
            if let (Some(v), Some(c)) = (r.get(vid), r.get(cat)) {
                if let Some(idx) = vocab.video_index(v) {
                    by_video.insert(idx, c.to_string());
                }
            }
        }
        Ok(Categories { by_video })
    }

    pub fn from_map(by_video: HashMap<usize, String>) -> Self {
        Categories { by_video }
    }

    pub fn get(&self, video: usize) -> &str {
        self.by_video.get(&video).map_or("", String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cut-offs for View_Time@K.
    pub k: Vec<usize>,
    /// Length budgets (seconds) for View_Time@T.
    pub t: Vec<f64>,
    /// K used for the per-group tables.
    pub group_k: usize,
    /// Top-k size used for intersection and JSD.
    pub intersection_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: vec![3],
            t: vec![120.0, 240.0],
            group_k: 3,
            intersection_k: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k.contains(&0) || self.group_k == 0 || self.intersection_k == 0 {
            return Err(Error::config("evaluation.k", "cut-offs must be at least 1"));
        }
        if self.t.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("evaluation.t", "budgets must be positive"));
        }
        Ok(())
    }
}

pub fn k_key(k: usize) -> String {
    format!("View_Time@K={k}")
}

pub fn t_key(t: f64) -> String {
    format!("View_Time@{t}")
}

/// Per-group mean and population standard deviation of min-max normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScoreStats {
    pub group: usize,
    pub samples: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// All scores were equal; every normalized score is reported as 0.
    pub degenerate: bool,
    pub groups: Vec<GroupScoreStats>,
}

impl ScoreStats {
    /// Max minus min of the defined group means.
    pub fn mean_spread(&self) -> f64 {
        let means: Vec<f64> = self.groups.iter().filter_map(|g| g.mean).collect();
        let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        if means.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

pub fn score_distribution_stats(scorer: &dyn Scorer, data: &Dataset, scheme: &GroupScheme) -> Result<ScoreStats> {
    if data.len() < 2 {
        return Err(Error::InvalidInput("score statistics need at least two samples".into()));
    }
    let groups = scheme.video_groups(data)?;
    let scores = data
        .interactions()
        .par_iter()
        .map(|x| scorer.score(x.user, x.video))
        .collect::<Result<Vec<f64>>>()?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(max > min);
    if degenerate {
        log::warn!("{}", Error::DegenerateScores(scores.len()));
    }
    let mut per_group = vec![Vec::new(); scheme.num_groups()];
    for (x, s) in data.interactions().iter().zip(&scores) {
        let norm = if degenerate { 0.0 } else { (s - min) / (max - min) };
        per_group[groups[x.video]].push(norm);
    }
    let groups = per_group
        .into_iter()
        .enumerate()
        .map(|(group, v)| {
            let n = v.len();
            let (mean, std) = if n == 0 {
                (None, None)
            } else {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                (Some(mean), Some(var.sqrt()))
            };
            GroupScoreStats {
                group,
                samples: n,
                mean,
                std,
            }
        })
        .collect();
    Ok(ScoreStats { degenerate, groups })
}

/// Per-group View_Time@K, macro-averaged over users with at least one held-out
/// interaction in the group. `None` for groups with no such user.
pub fn per_group_view_time_at_k(
    scorer: &dyn Scorer,
    data: &Dataset,
    scheme: &GroupScheme,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    let groups = scheme.video_groups(data)?;
    let users: Vec<usize> = data.active_users().collect();
    (0..scheme.num_groups())
        .map(|g| {
            let values = users
                .par_iter()
                .map(|&u| {
                    let list = rank_user(scorer, data, u, |v| groups[v] == g)?;
                    Ok((!list.entries.is_empty()).then(|| view_time_at_k(&list, k)))
                })
                .collect::<Result<Vec<Option<f64>>>>()?;
            let values: Vec<f64> = values.into_iter().flatten().collect();
            Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub lower: f64,
    pub upper: f64,
    pub view_time_at_k: Option<f64>,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Macro-averaged metrics plus per-group and per-user tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
    pub group_k: usize,
    pub groups: Vec<GroupMetrics>,
    pub scores_degenerate: bool,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

fn per_user_metrics(
    scorer: &dyn Scorer,
    data: &Dataset,
    user: usize,
    cfg: &EvalConfig,
    categories: Option<&Categories>,
) -> Result<BTreeMap<String, f64>> {
    let list = rank_user(scorer, data, user, |_| true)?;
    let mut m = BTreeMap::new();
    for &k in &cfg.k {
        m.insert(k_key(k), view_time_at_k(&list, k));
    }
    for &t in &cfg.t {
        m.insert(t_key(t), view_time_at_t(&list, t));
    }
    let n = cfg.intersection_k;
    let recommended: Vec<usize> = list.entries.iter().take(n).map(|e| e.video).collect();
    let mut by_truth = list.entries.clone();
    by_truth.sort_by(|a, b| {
        b.view_time
            .total_cmp(&a.view_time)
            .then_with(|| data.vocab().video(a.video).id.cmp(&data.vocab().video(b.video).id))
    });
    let truth: Vec<usize> = by_truth.iter().take(n).map(|e| e.video).collect();
    let key = |name: &str| format!("{name}@{n}");
    match categories {
        Some(c) => {
            let rec: Vec<&str> = recommended.iter().map(|&v| c.get(v)).collect();
            let tru: Vec<&str> = truth.iter().map(|&v| c.get(v)).collect();
            m.insert(key("Intersection"), size_of_intersection(&rec, &tru) as f64);
            let (p, q) = label_distributions(&rec, &tru);
            m.insert(key("JSD"), jsd(&p, &q)?);
        }
        None => {
            m.insert(key("Intersection"), size_of_intersection(&recommended, &truth) as f64);
        }
    }
    Ok(m)
}

/// Full evaluation over every user with held-out interactions.
pub fn evaluate(
    scorer: &dyn Scorer,
    data: &Dataset,
    scheme: &GroupScheme,
    cfg: &EvalConfig,
    categories: Option<&Categories>,
) -> Result<MetricReport> {
    cfg.validate()?;
    let users: Vec<usize> = data.active_users().collect();
    let per_user = users
        .par_iter()
        .map(|&u| {
            Ok(UserMetrics {
                user: data.vocab().user_id(u).to_string(),
                metrics: per_user_metrics(scorer, data, u, cfg, categories)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = BTreeMap::new();
    if !per_user.is_empty() {
        for key in per_user[0].metrics.keys() {
            let total: f64 = per_user.iter().map(|u| u.metrics[key]).sum();
            metrics.insert(key.clone(), total / per_user.len() as f64);
        }
    }

    let per_group = per_group_view_time_at_k(scorer, data, scheme, cfg.group_k)?;
    let stats = if data.len() >= 2 {
        Some(score_distribution_stats(scorer, data, scheme)?)
    } else {
        None
    };
    let groups = per_group
        .into_iter()
        .enumerate()
        .map(|(g, vt)| {
            let (lower, upper) = scheme.bounds(g);
            let s = stats.as_ref().map(|s| &s.groups[g]);
            GroupMetrics {
                group: g,
                lower,
                upper,
                view_time_at_k: vt,
                score_mean: s.and_then(|s| s.mean),
                score_std: s.and_then(|s| s.std),
                samples: s.map_or(0, |s| s.samples),
            }
        })
        .collect();
    Ok(MetricReport {
        users: per_user.len(),
        samples: data.len(),
        metrics,
        group_k: cfg.group_k,
        groups,
        scores_degenerate: stats.is_some_and(|s| s.degenerate),
        per_user,
    })
}

impl MetricReport {
    pub fn view_time_at_t(&self, t: f64) -> Option<f64> {
        self.metrics.get(&t_key(t)).copied()
    }

    /// Spread (max - min) of the per-group mean normalized score.
    pub fn score_mean_spread(&self) -> f64 {
        ScoreStats {
            degenerate: self.scores_degenerate,
            groups: self
                .groups
                .iter()
                .map(|g| GroupScoreStats {
                    group: g.group,
                    samples: g.samples,
                    mean: g.score_mean,
                    std: g.score_std,
                })
                .collect(),
        }
        .mean_spread()
    }

    /// `group,metric,value` rows.
    pub fn write_group_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "metric", "value"])?;
        for g in &self.groups {
            let rows = [
                (k_key(self.group_k), g.view_time_at_k),
                ("score_mean".to_string(), g.score_mean),
                ("score_std".to_string(), g.score_std),
                ("samples".to_string(), Some(g.samples as f64)),
            ];
            for (name, value) in rows {
                if let Some(v) = value {
                    w.serialize((g.group, name, v))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<groups>", e))?;
        Ok(())
    }

    /// `user,metric,value` rows.
    pub fn write_user_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user", "metric", "value"])?;
        for u in &self.per_user {
            for (k, v) in &u.metrics {
                w.serialize((&u.user, k, v))?;
            }
        }
        w.flush().map_err(|e| Error::io("<users>", e))?;
        Ok(())
    }
}

/// `(ours - baseline) / baseline` for every metric present in both reports.
pub fn relative_improvement(ours: &MetricReport, baseline: &MetricReport) -> BTreeMap<String, f64> {
    ours.metrics
        .iter()
        .filter_map(|(k, &v)| {
            baseline
                .metrics
                .get(k)
                .filter(|&&b| b != 0.0)
                .map(|&b| (k.clone(), (v - b) / b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest;

    fn list(lt: &[(f64, f64)]) -> RankedList {
        RankedList {
            user: 0,
            entries: lt
                .iter()
                .enumerate()
                .map(|(i, &(length, view_time))| RankedEntry {
                    video: i,
                    length,
                    view_time,
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn view_time_at_k_cases() {
        let l = list(&[(10.0, 10.0), (10.0, 5.0), (30.0, 20.0)]);
        assert_eq!(view_time_at_k(&l, 2), 15.0);
        assert_eq!(view_time_at_k(&l, 10), 35.0);
        assert_eq!(view_time_at_k(&list(&[]), 3), 0.0);
    }

    #[test]
    fn view_time_at_t_cases() {
        assert_eq!(
            view_time_at_t(&list(&[(30.0, 30.0), (30.0, 15.0), (60.0, 20.0)]), 60.0),
            45.0
        );
        assert_eq!(view_time_at_t(&list(&[(40.0, 40.0), (40.0, 20.0)]), 60.0), 50.0);
        assert_eq!(view_time_at_t(&list(&[(10.0, 5.0)]), 60.0), 5.0);
        assert_eq!(view_time_at_t(&list(&[]), 60.0), 0.0);
    }

    #[test]
    fn length_proportional_ranking_wins_at_k_but_not_at_t() {
        // short videos fully watched vs long videos barely watched
        let short_first = list(&[(10.0, 10.0), (10.0, 10.0), (10.0, 10.0), (60.0, 12.0), (60.0, 12.0)]);
        let long_first = list(&[(60.0, 12.0), (60.0, 12.0), (10.0, 10.0), (10.0, 10.0), (10.0, 10.0)]);
        assert!(view_time_at_k(&long_first, 2) > view_time_at_k(&short_first, 2));
        assert!(view_time_at_t(&long_first, 60.0) < view_time_at_t(&short_first, 60.0));
    }

    #[test]
    fn intersection_counts() {
        assert_eq!(size_of_intersection(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]), 5);
        assert_eq!(size_of_intersection(&[1, 2, 3, 4, 5], &[6, 7, 8, 9, 10]), 0);
        assert_eq!(size_of_intersection(&[1, 2, 3, 4, 5], &[1, 2, 8, 9, 10]), 2);
    }

    #[test]
    fn jsd_edges() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn label_distributions_use_union_support() {
        let (p, q) = label_distributions(&["a", "a", "b"], &["c"]);
        assert_eq!(p, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(q, vec![0.0, 0.0, 1.0]);
    }

    fn four_samples() -> Dataset {
        ingest(
            "user_id,video_id,view_time\nu,a,1\nu,b,1\nw,c,1\nw,d,1\n".as_bytes(),
            "i",
            "video_id,length\na,5\nb,10\nc,50\nd,60\n".as_bytes(),
            "v",
        )
        .unwrap()
    }

    #[test]
    fn score_stats_hand_computed() {
        let d = four_samples();
        let scheme = GroupScheme::new(vec![20.0, 60.0]).unwrap();
        let scores = [0.0, 2.0, 4.0, 8.0];
        let s = score_distribution_stats(&|_u: usize, v: usize| scores[v], &d, &scheme).unwrap();
        // normalized: 0, .25, .5, 1
        assert!(!s.degenerate);
        assert_eq!(s.groups[0].mean, Some(0.125));
        assert_eq!(s.groups[0].std, Some(0.125));
        assert_eq!(s.groups[1].mean, Some(0.75));
        assert_eq!(s.groups[1].std, Some(0.25));
        assert_eq!(s.mean_spread(), 0.625);
    }

    #[test]
    fn constant_scorer_is_degenerate() {
        let d = four_samples();
        let scheme = GroupScheme::new(vec![20.0, 60.0]).unwrap();
        let s = score_distribution_stats(&|_: usize, _: usize| 3.0, &d, &scheme).unwrap();
        assert!(s.degenerate);
        assert!(s.groups.iter().all(|g| g.mean == Some(0.0) && g.std == Some(0.0)));
    }

    #[test]
    fn length_scorer_orders_group_means() {
        let d = four_samples();
        let scheme = GroupScheme::new(vec![8.0, 20.0, 55.0, 60.0]).unwrap();
        let lengths: Vec<f64> = d.vocab().videos().iter().map(|v| v.length).collect();
        let s = score_distribution_stats(&|_: usize, v: usize| lengths[v], &d, &scheme).unwrap();
        let means: Vec<f64> = s.groups.iter().map(|g| g.mean.unwrap()).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn per_group_single_group_matches_global() {
        let d = four_samples();
        let one = GroupScheme::new(vec![60.0]).unwrap();
        let two = GroupScheme::new(vec![20.0, 60.0]).unwrap();
        let scorer = |_: usize, v: usize| v as f64;
        let per = per_group_view_time_at_k(&scorer, &d, &one, 1).unwrap();
        let global = evaluate(
            &scorer,
            &d,
            &one,
            &EvalConfig {
                k: vec![1],
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(per[0], global.metrics.get(&k_key(1)).copied());
        // user u has no videos in group 1 and w none in group 0
        let split = per_group_view_time_at_k(&scorer, &d, &two, 3).unwrap();
        assert_eq!(split, vec![Some(2.0), Some(2.0)]);
    }

    #[test]
    fn ties_break_by_video_id() {
        let d = four_samples();
        let list = rank_user(&|_: usize, _: usize| 1.0, &d, 0, |_| true).unwrap();
        let ids: Vec<&str> = list
            .entries
            .iter()
            .map(|e| d.vocab().video(e.video).id.as_str())
            .collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn relative_improvement_convention() {
        let mk = |v: f64| MetricReport {
            users: 1,
            samples: 1,
            metrics: BTreeMap::from([(t_key(120.0), v)]),
            group_k: 3,
            groups: vec![],
            scores_degenerate: false,
            per_user: vec![],
        };
        let r = relative_improvement(&mk(44.96), &mk(35.78));
        assert!((r["View_Time@120"] - (44.96 - 35.78) / 35.78).abs() < 1e-12);
    }
}

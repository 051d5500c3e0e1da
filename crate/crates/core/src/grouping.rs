//! Length groups, completion-rate curves and per-group progress thresholds.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Contiguous half-open length intervals `(0, b_0], (b_0, b_1], ...` with an
/// optional play-progress threshold per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScheme {
    boundaries: Vec<f64>,
    #[serde(default)]
    tau: Vec<f64>,
}

impl GroupScheme {
    /// `boundaries` are the upper edges of each group, strictly ascending.
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::config("boundaries", "at least one boundary is required"));
        }
        if !(boundaries[0] > 0.0) {
            return Err(Error::config("boundaries", "boundaries must be positive"));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("boundaries", "boundaries must be strictly ascending"));
        }
        Ok(GroupScheme {
            boundaries,
            tau: Vec::new(),
        })
    }

    /// Five groups up to 60s: 1-8, 9-18, 19-30, 31-40, 41-60.
    pub fn kuaishou() -> Self {
        GroupScheme::new(vec![8.0, 18.0, 30.0, 40.0, 60.0]).unwrap()
    }

    /// Seven groups up to 120s: 0-13, 14-20, 21-30, 31-41, 42-59, 60-92, 93-120.
    pub fn wechat() -> Self {
        GroupScheme::new(vec![13.0, 20.0, 30.0, 41.0, 59.0, 92.0, 120.0]).unwrap()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kuaishou" => Some(Self::kuaishou()),
            "wechat" => Some(Self::wechat()),
            _ => None,
        }
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn num_groups(&self) -> usize {
        self.boundaries.len()
    }

    pub fn max_length(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// `(lower, upper]` of group `g`.
    pub fn bounds(&self, g: usize) -> (f64, f64) {
        let lower = if g == 0 { 0.0 } else { self.boundaries[g - 1] };
        (lower, self.boundaries[g])
    }

    /// Index of the group whose interval contains `length`.
    pub fn assign_group(&self, length: f64) -> Result<usize> {
        if !(length > 0.0) || length > self.max_length() {
            return Err(Error::LengthOutOfRange {
                length,
                max: self.max_length(),
            });
        }
        Ok(self.boundaries.partition_point(|&b| b < length))
    }

    pub fn has_tau(&self) -> bool {
        self.tau.len() == self.boundaries.len()
    }

    pub fn tau(&self, g: usize) -> f64 {
        self.tau[g]
    }

    pub fn taus(&self) -> &[f64] {
        &self.tau
    }

    pub fn with_tau(mut self, tau: Vec<f64>) -> Result<Self> {
        if tau.len() != self.boundaries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} thresholds for {} groups",
                tau.len(),
                self.boundaries.len()
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    /// Group of every video in the dataset's vocabulary.
    pub fn video_groups(&self, d: &Dataset) -> Result<Vec<usize>> {
        d.vocab().videos().iter().map(|v| self.assign_group(v.length)).collect()
    }
}

/// Percentile of an ascending slice using linear interpolation between
/// closest ranks, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Fraction of a video's plays with progress ≥ 1, or `None` without plays.
pub fn completion_rate(d: &Dataset, video: usize) -> Option<f64> {
    let (completed, total) = d
        .interactions()
        .iter()
        .enumerate()
        .filter(|(_, x)| x.video == video)
        .fold((0usize, 0usize), |(c, n), (i, _)| {
            (c + usize::from(d.progress(i) >= 1.0), n + 1)
        });
    (total > 0).then(|| completed as f64 / total as f64)
}

/// Completion rate of every video in one pass.
pub fn completion_rates(d: &Dataset) -> Vec<Option<f64>> {
    let n = d.vocab().num_videos();
    let mut completed = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (i, x) in d.interactions().iter().enumerate() {
        total[x.video] += 1;
        if d.progress(i) >= 1.0 {
            completed[x.video] += 1;
        }
    }
    completed
        .into_iter()
        .zip(total)
        .map(|(c, t)| (t > 0).then(|| c as f64 / t as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Integer length bucket: lengths in `(length - 1, length]`.
    pub length: u64,
    pub p50: f64,
    pub p75: f64,
    /// Number of videos in the bucket.
    pub count: usize,
}

/// Per-length-bucket completion-rate quartiles, used to choose boundaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionCurve {
    pub points: Vec<CurvePoint>,
}

pub fn completion_curves(d: &Dataset) -> CompletionCurve {
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (v, rate) in completion_rates(d).into_iter().enumerate() {
        if let Some(rate) = rate {
            let bucket = d.video_length(v).ceil() as u64;
            buckets.entry(bucket).or_default().push(rate);
        }
    }
    let points = buckets
        .into_iter()
        .map(|(length, rates)| {
            let rates = sorted(rates);
            CurvePoint {
                length,
                p50: percentile(&rates, 0.5),
                p75: percentile(&rates, 0.75),
                count: rates.len(),
            }
        })
        .collect();
    CompletionCurve { points }
}

impl CompletionCurve {
    /// CSV with columns `length,p50,p75,count`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["length", "p50", "p75", "count"])?;
        for p in &self.points {
            w.serialize((p.length, p.p50, p.p75, p.count))?;
        }
        w.flush().map_err(|e| Error::io("<curve>", e))?;
        Ok(())
    }
}

/// Fills per-group thresholds: τ(g) is the `1 - positive_fraction` quantile of
/// play progress over the dataset's interactions in group `g`.
pub fn compute_tau(d: &Dataset, scheme: &GroupScheme, positive_fraction: f64) -> Result<GroupScheme> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::config(
            "positive_fraction",
            format!("{positive_fraction} is not in [0, 1]"),
        ));
    }
    let groups = scheme.video_groups(d)?;
    let mut progress = vec![Vec::new(); scheme.num_groups()];
    for (i, x) in d.interactions().iter().enumerate() {
        progress[groups[x.video]].push(d.progress(i));
    }
    let tau = progress
        .into_iter()
        .enumerate()
        .map(|(g, p)| {
            if p.is_empty() {
                Err(Error::EmptyGroup { group: g })
            } else {
                Ok(percentile(&sorted(p), 1.0 - positive_fraction))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    scheme.clone().with_tau(tau)
}

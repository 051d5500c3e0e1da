//! Reference methods sharing the model and trainer: view-time and progress
//! regression, view-time and progress ranking, inverse-propensity weighting
//! by video length, and two-model embedding regularization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::sampling::PreferencePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Multi-task ranking with length-conditioned negatives.
    Vldrec,
    TReg,
    RReg,
    TRank,
    RRank,
    Ips,
    IpsC,
    IpsCn,
    IpsCnsr,
    CausE,
}

impl MethodKind {
    pub const ALL: [MethodKind; 10] = [
        MethodKind::Vldrec,
        MethodKind::TReg,
        MethodKind::RReg,
        MethodKind::TRank,
        MethodKind::RRank,
        MethodKind::Ips,
        MethodKind::IpsC,
        MethodKind::IpsCn,
        MethodKind::IpsCnsr,
        MethodKind::CausE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Vldrec => "vldrec",
            MethodKind::TReg => "t_reg",
            MethodKind::RReg => "r_reg",
            MethodKind::TRank => "t_rank",
            MethodKind::RRank => "r_rank",
            MethodKind::Ips => "ips",
            MethodKind::IpsC => "ips_c",
            MethodKind::IpsCn => "ips_cn",
            MethodKind::IpsCnsr => "ips_cnsr",
            MethodKind::CausE => "caus_e",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_capped_ips(self) -> bool {
        matches!(self, MethodKind::IpsC | MethodKind::IpsCn | MethodKind::IpsCnsr)
    }

    pub fn is_ips(self) -> bool {
        self == MethodKind::Ips || self.is_capped_ips()
    }

    pub fn is_regression(self) -> bool {
        matches!(self, MethodKind::TReg | MethodKind::RReg)
    }
}

/// Training method with its method-specific knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Weight cap for the capped IPS variants; defaults to the training p95.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ips_cap: Option<f64>,
    /// Embedding tie strength for CausE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caus_e_lambda: Option<f64>,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            ips_cap: None,
            caus_e_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ips_cap.is_some() && !self.kind.is_capped_ips() {
            return Err(Error::config(
                "method.ips_cap",
                format!("only applies to capped IPS variants, not {}", self.kind.name()),
            ));
        }
        if let Some(cap) = self.ips_cap {
            if !(cap > 0.0) {
                return Err(Error::config("method.ips_cap", "must be positive"));
            }
        }
        if self.caus_e_lambda.is_some() && self.kind != MethodKind::CausE {
            return Err(Error::config("method.caus_e_lambda", "only applies to caus_e"));
        }
        if let Some(l) = self.caus_e_lambda {
            if !(l >= 0.0) {
                return Err(Error::config("method.caus_e_lambda", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// What a regression baseline predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionTarget {
    ViewTime,
    Progress,
}

impl RegressionTarget {
    pub fn for_kind(kind: MethodKind) -> Option<Self> {
        match kind {
            MethodKind::TReg => Some(RegressionTarget::ViewTime),
            MethodKind::RReg => Some(RegressionTarget::Progress),
            _ => None,
        }
    }

    pub fn value(self, view_time: f64, length: f64) -> f64 {
        match self {
            RegressionTarget::ViewTime => view_time,
            RegressionTarget::Progress => view_time / length,
        }
    }
}

/// Squared error of a prediction against view time or progress.
pub fn regression_loss(target: RegressionTarget, predicted: f64, view_time: f64, length: f64) -> f64 {
    (predicted - target.value(view_time, length)).powi(2)
}

/// Ranking score implied by a regression prediction: progress predictions
/// are turned back into view time.
pub fn regression_rank_score(target: RegressionTarget, predicted: f64, length: f64) -> f64 {
    match target {
        RegressionTarget::ViewTime => predicted,
        RegressionTarget::Progress => predicted * length,
    }
}

/// Ordering key for the plain ranking baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankTarget {
    Time,
    Progress,
}

impl RankTarget {
    pub fn for_kind(kind: MethodKind) -> Self {
        match kind {
            MethodKind::RRank => RankTarget::Progress,
            _ => RankTarget::Time,
        }
    }

    fn value(self, d: &Dataset, i: usize) -> f64 {
        match self {
            RankTarget::Time => d.interactions()[i].view_time,
            RankTarget::Progress => d.progress(i),
        }
    }
}

/// Uniform draw of another interaction from `history`, oriented so the larger
/// target value is the positive. Ties give `Ok(None)`.
pub fn rank_negative_sampler<R: Rng + ?Sized>(
    d: &Dataset,
    history: &[usize],
    anchor: usize,
    target: RankTarget,
    rng: &mut R,
) -> Result<Option<PreferencePair>> {
    let Some(pos) = history.iter().position(|&i| i == anchor) else {
        return Err(Error::InvalidInput(format!("anchor {anchor} is not in the history")));
    };
    if history.len() < 2 {
        return Err(Error::InvalidInput("no candidate besides the anchor".into()));
    }
    let mut j = rng.random_range(0..history.len() - 1);
    if j >= pos {
        j += 1;
    }
    let other = history[j];
    let (a, b) = (target.value(d, anchor), target.value(d, other));
    Ok(if a > b {
        Some(PreferencePair {
            positive: anchor,
            negative: other,
        })
    } else if b > a {
        Some(PreferencePair {
            positive: other,
            negative: anchor,
        })
    } else {
        None
    })
}

/// Single-instance propensity weight before any batch normalization:
/// `1/length`, capped for the capped variants, square-rooted for `ips_cnsr`.
pub fn ips_raw_weight(kind: MethodKind, length: f64, cap: Option<f64>) -> Result<f64> {
    if !(length > 0.0) {
        return Err(Error::InvalidInput(format!("non-positive video length {length}")));
    }
    let w = 1.0 / length;
    let capped = || -> Result<f64> {
        let cap = cap.ok_or_else(|| Error::config("method.ips_cap", "required for capped IPS"))?;
        Ok(w.min(cap))
    };
    match kind {
        MethodKind::Ips => Ok(w),
        MethodKind::IpsC | MethodKind::IpsCn => capped(),
        MethodKind::IpsCnsr => Ok(capped()?.sqrt()),
        k => Err(Error::InvalidInput(format!("{} is not an IPS method", k.name()))),
    }
}

/// Weights for a batch of positive-instance lengths; the normalized variants
/// divide by the batch mean so the weights average to one.
pub fn ips_batch_weights(kind: MethodKind, lengths: &[f64], cap: Option<f64>) -> Result<Vec<f64>> {
    let mut w = lengths
        .iter()
        .map(|&l| ips_raw_weight(kind, l, cap))
        .collect::<Result<Vec<f64>>>()?;
    if matches!(kind, MethodKind::IpsCn | MethodKind::IpsCnsr) && !w.is_empty() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        w.iter_mut().for_each(|x| *x /= mean);
    }
    Ok(w)
}

/// Default cap: 95th percentile of raw `1/length` weights over the training split.
pub fn default_ips_cap(d: &Dataset) -> Option<f64> {
    let mut w: Vec<f64> = d.interactions().iter().map(|x| 1.0 / d.video_length(x.video)).collect();
    if w.is_empty() {
        return None;
    }
    w.sort_by(f64::total_cmp);
    Some(crate::grouping::percentile(&w, 0.95))
}

fn check_congruent(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.spec != b.spec {
        return Err(Error::ShapeMismatch("CausE models have different feature specs".into()));
    }
    Ok(())
}

fn embedding_pairs<'a>(a: &'a ModelParams, b: &'a ModelParams) -> [(&'a [f64], &'a [f64]); 3] {
    [
        (&a.user.data, &b.user.data),
        (&a.video.data, &b.video.data),
        (&a.length.data, &b.length.data),
    ]
}

/// `λ · Σ ||E_main - E_aux||²` over all embedding tables.
pub fn caus_e_penalty(main: &ModelParams, aux: &ModelParams, lambda: f64) -> Result<f64> {
    check_congruent(main, aux)?;
    let sq: f64 = embedding_pairs(main, aux)
        .iter()
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)))
        .sum();
    Ok(lambda * sq)
}

/// Adds the penalty gradient to both models' gradient buffers.
pub fn caus_e_penalty_grad(
    main: &ModelParams,
    aux: &ModelParams,
    lambda: f64,
    g_main: &mut Gradients,
    g_aux: &mut Gradients,
) -> Result<()> {
    check_congruent(main, aux)?;
    if lambda == 0.0 {
        return Ok(());
    }
    let d = main.spec.embedding_dim;
    let tables = embedding_pairs(main, aux);
    let gm = [&mut g_main.user, &mut g_main.video, &mut g_main.length];
    let ga = [&mut g_aux.user, &mut g_aux.video, &mut g_aux.length];
    for (((a, b), gm), ga) in tables.iter().zip(gm).zip(ga) {
        for r in 0..a.len() / d {
            let (ra, rb) = (&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]);
            let rm = gm.entry(r).or_insert_with(|| vec![0.0; d]);
            let rx = ga.entry(r).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                let g = 2.0 * lambda * (ra[k] - rb[k]);
                rm[k] += g;
                rx[k] -= g;
            }
        }
    }
    Ok(())
}

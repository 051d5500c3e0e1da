//! Sequential grid search. Progress is recorded in `grid.json` after every
//! trial, so an interrupted search resumes where it stopped.

use std::fs;
use std::io::Write;
use std::path::Path;

use lenrank_core::training::{train, write_history, TrainConfig};
use lenrank_core::Error;
use serde::{Deserialize, Serialize};

use crate::commands::{create, load_train_valid, print_json, train_summary, write_json, Context};
use crate::config::{GridConfig, RunConfig};
use crate::manifest::Manifest;
use crate::{CliError, GridArgs};

pub const LEARNING_RATES: [f64; 4] = [0.005, 0.001, 0.0005, 0.0001];
pub const WEIGHTS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DROPOUTS: [f64; 4] = [0.0, 0.1, 0.3, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub learning_rate: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl TrialParams {
    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.learning_rate = self.learning_rate;
        cfg.model.head.dropout_rate = self.dropout;
        cfg.alpha = self.alpha;
        cfg.labeling.beta = self.beta;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub params: TrialParams,
    pub checkpoint: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub valid_view_time_at_t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub config: RunConfig,
    pub trials: Vec<TrialParams>,
    pub completed: Vec<TrialRecord>,
    pub best: Option<usize>,
}

/// Cartesian product of the axes in a fixed order; empty axes take the base value.
pub fn expand(grid: &GridConfig, base: &TrainConfig) -> Vec<TrialParams> {
    let axis = |v: &Vec<f64>, default: f64| if v.is_empty() { vec![default] } else { v.clone() };
    let mut out = Vec::new();
    for &learning_rate in &axis(&grid.learning_rate, base.learning_rate) {
        for &dropout in &axis(&grid.dropout, base.model.head.dropout_rate) {
            for &alpha in &axis(&grid.alpha, base.alpha) {
                for &beta in &axis(&grid.beta, base.labeling.beta) {
                    out.push(TrialParams {
                        learning_rate,
                        dropout,
                        alpha,
                        beta,
                    });
                }
            }
        }
    }
    out
}

fn apply_args(grid: &mut GridConfig, a: &GridArgs) -> Result<(), CliError> {
    for name in &a.presets {
        match name.as_str() {
            "learning_rate" | "lr" => grid.learning_rate = LEARNING_RATES.to_vec(),
            "dropout" => grid.dropout = DROPOUTS.to_vec(),
            "alpha" => grid.alpha = WEIGHTS.to_vec(),
            "beta" => grid.beta = WEIGHTS.to_vec(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown grid axis `{other}` (expected learning_rate, dropout, alpha or beta)"
                )))
            }
        }
    }
    for (dst, src) in [
        (&mut grid.learning_rate, &a.learning_rate),
        (&mut grid.dropout, &a.dropout),
        (&mut grid.alpha, &a.alpha),
        (&mut grid.beta, &a.beta),
    ] {
        if !src.is_empty() {
            *dst = src.clone();
        }
    }
    Ok(())
}

fn save_state(path: &Path, state: &GridState) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, state)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn better(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x > y,
        (Some(_), None) => true,
        _ => false,
    }
}

pub(crate) fn grid_cmd(ctx: &mut Context, a: &GridArgs) -> Result<(), CliError> {
    apply_args(&mut ctx.config.grid, a)?;
    ctx.config.validate()?;
    let trials = expand(&ctx.config.grid, &ctx.config.train);
    for (i, t) in trials.iter().enumerate() {
        t.apply(&ctx.config.train)
            .validate()
            .map_err(|e| CliError::Usage(format!("trial {i}: {e}")))?;
    }
    let dir = ctx.out_dir(&a.out)?;
    let state_path = dir.join("grid.json");
    let mut state = if state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let prev: GridState = serde_json::from_str(&text).map_err(Error::from)?;
        if prev.config != ctx.config || prev.trials != trials {
            return Err(CliError::Usage(format!(
                "{} belongs to a different search; use another --out",
                state_path.display()
            )));
        }
        log::info!("resuming: {} of {} trials done", prev.completed.len(), trials.len());
        prev
    } else {
        GridState {
            config: ctx.config.clone(),
            trials: trials.clone(),
            completed: Vec::new(),
            best: None,
        }
    };

    let videos = ctx.videos(a.videos.as_deref())?;
    let (train_set, valid) = load_train_valid(ctx, &a.train, Some(&a.valid), &videos)?;
    let scheme = ctx.config.data.scheme()?;
    for (index, params) in trials.iter().enumerate() {
        if state.completed.iter().any(|r| r.index == index) {
            continue;
        }
        log::info!("trial {index}: {params:?}");
        let outcome = train(&train_set, &valid, &scheme, &params.apply(&ctx.config.train))?;
        let ckpt = dir.join(format!("trial-{index:03}.json"));
        outcome.model.save(&ckpt)?;
        let hist = dir.join(format!("trial-{index:03}.history.csv"));
        let mut w = create(&hist)?;
        write_history(&outcome.history, &mut w)?;
        w.flush().map_err(|e| Error::io(&hist, e))?;
        let summary = train_summary(&outcome);
        state.completed.push(TrialRecord {
            index,
            params: *params,
            checkpoint: ckpt.file_name().unwrap().to_string_lossy().into_owned(),
            epochs: summary.epochs,
            best_epoch: summary.best_epoch,
            valid_view_time_at_t: summary.best_valid_view_time_at_t,
        });
        state.best = None;
        for r in &state.completed {
            let current = state.best.and_then(|b| state.completed.iter().find(|c| c.index == b));
            if current.is_none() || better(r.valid_view_time_at_t, current.unwrap().valid_view_time_at_t) {
                state.best = Some(r.index);
            }
        }
        save_state(&state_path, &state)?;
    }

    let mut manifest = Manifest::new("grid", &ctx.config);
    manifest
        .input("train", &a.train)
        .input("valid", &a.valid)
        .input("videos", &videos)
        .output(&state_path);
    manifest.write(&dir.join("manifest.json"))?;
    let best = state.best.and_then(|b| state.completed.iter().find(|r| r.index == b));
    print_json(&serde_json::json!({
        "trials": state.completed.len(),
        "best": best,
    }))
}

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lenrank_core::baselines::{MethodKind, MethodSpec};
use lenrank_core::data::{
    ingest_path_with_vocab, ingest_paths, preprocess, split, write_interactions, write_videos, Dataset, UnknownIds,
};
use lenrank_core::evaluation::{evaluate, relative_improvement, Categories, MetricReport};
use lenrank_core::grouping::{completion_curves, compute_tau, percentile, GroupScheme};
use lenrank_core::sampling::{epoch_stream, write_triples, SamplingContext};
use lenrank_core::synthgen::generate;
use lenrank_core::training::{epoch_seed, train, write_history, TrainOutcome, TrainedModel};
use lenrank_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{manifest_path, Manifest};
use crate::{AnalyzeArgs, Cli, CliError, Command, DataArgs, EvaluateArgs, IngestArgs, SynthArgs, TrainArgs};

/// Shared per-invocation state: the resolved configuration and output root.
pub(crate) struct Context {
    pub config: RunConfig,
    out_dir: Option<PathBuf>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut config = RunConfig::load(cli.config.as_deref())?;
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        Ok(Context {
            config,
            out_dir: cli.out_dir.clone(),
        })
    }

    /// Resolves an output path against the output root and creates its parent.
    pub fn out(&self, path: &Path) -> Result<PathBuf, CliError> {
        let p = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    /// Resolves and creates an output directory.
    pub fn out_dir(&self, path: &Path) -> Result<PathBuf, CliError> {
        let p = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn videos(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.data.videos.clone())
            .ok_or_else(|| CliError::Usage("a video table is required (--videos or data.videos)".into()))
    }
}

pub(crate) fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut ctx = Context::new(cli)?;
    match &cli.command {
        Command::Ingest(a) => {
            ctx.config.validate()?;
            ingest_cmd(&ctx, a)
        }
        Command::AnalyzeGroups(a) => {
            ctx.config.validate()?;
            analyze_cmd(&ctx, a)
        }
        Command::Synthgen(a) => synth_cmd(&mut ctx, a),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::Evaluate(a) => {
            ctx.config.validate()?;
            evaluate_cmd(&ctx, a)
        }
        Command::Grid(a) => crate::grid::grid_cmd(&mut ctx, a),
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
pub(crate) fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn load_raw(ctx: &Context, data: &DataArgs) -> Result<(Dataset, PathBuf, PathBuf), CliError> {
    let interactions = data
        .interactions
        .clone()
        .or_else(|| ctx.config.data.interactions.clone())
        .ok_or_else(|| {
            CliError::Usage("an interaction log is required (--interactions or data.interactions)".into())
        })?;
    let videos = ctx.videos(data.videos.as_deref())?;
    Ok((ingest_paths(&interactions, &videos)?, interactions, videos))
}

#[derive(Debug, Serialize)]
struct CountStats {
    users: usize,
    videos: usize,
    interactions: usize,
}

impl CountStats {
    fn of(d: &Dataset) -> Self {
        CountStats {
            users: d.active_users().count(),
            videos: d.vocab().num_videos(),
            interactions: d.len(),
        }
    }
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    group: usize,
    lower: f64,
    upper: f64,
    videos: usize,
    interactions: usize,
    completion_rate: Option<f64>,
    mean_progress: Option<f64>,
    tau: Option<f64>,
}

fn group_summaries(d: &Dataset, scheme: &GroupScheme, positive_fraction: f64) -> Result<Vec<GroupSummary>, CliError> {
    let groups = scheme.video_groups(d)?;
    let mut progress = vec![Vec::new(); scheme.num_groups()];
    for (i, x) in d.interactions().iter().enumerate() {
        progress[groups[x.video]].push(d.progress(i));
    }
    let mut videos = vec![0; scheme.num_groups()];
    for &g in &groups {
        videos[g] += 1;
    }
    Ok(progress
        .into_iter()
        .enumerate()
        .map(|(g, mut p)| {
            let (lower, upper) = scheme.bounds(g);
            p.sort_by(f64::total_cmp);
            let n = p.len();
            let defined = n > 0;
            GroupSummary {
                group: g,
                lower,
                upper,
                videos: videos[g],
                interactions: n,
                completion_rate: defined.then(|| p.iter().filter(|&&x| x >= 1.0).count() as f64 / n as f64),
                mean_progress: defined.then(|| p.iter().sum::<f64>() / n as f64),
                tau: defined.then(|| percentile(&p, 1.0 - positive_fraction)),
            }
        })
        .collect())
}

fn ingest_cmd(ctx: &Context, a: &IngestArgs) -> Result<(), CliError> {
    let (raw, interactions, videos) = load_raw(ctx, &a.data)?;
    let scheme = ctx.config.data.scheme()?;
    let (kept, pre) = preprocess(&raw, &ctx.config.data.preprocess)?;
    let mut stats = serde_json::Map::new();
    let mut put = |k: &str, v: serde_json::Value| {
        stats.insert(k.to_string(), v);
    };
    put("raw", serde_json::to_value(CountStats::of(&raw)).map_err(Error::from)?);
    put("preprocess", serde_json::to_value(pre).map_err(Error::from)?);
    put(
        "kept",
        serde_json::to_value(CountStats::of(&kept)).map_err(Error::from)?,
    );
    let groups = group_summaries(&kept, &scheme, ctx.config.train.labeling.positive_fraction)?;
    put("groups", serde_json::to_value(groups).map_err(Error::from)?);

    let mut manifest = Manifest::new("ingest", &ctx.config);
    manifest.input("interactions", &interactions).input("videos", &videos);
    if let Some(dir) = &a.split_out {
        let dir = ctx.out_dir(dir)?;
        let s = split(&kept, &ctx.config.split)?;
        for (name, d) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
            let p = dir.join(format!("{name}.csv"));
            let mut w = create(&p)?;
            write_interactions(d, &mut w)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
            manifest.output(&p);
        }
        let p = dir.join("videos.csv");
        let mut w = create(&p)?;
        write_videos(kept.vocab(), &mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        manifest.output(&p);
        put(
            "splits",
            serde_json::json!({
                "train": s.train.len(),
                "validation": s.validation.len(),
                "test": s.test.len(),
            }),
        );
        manifest.write(&dir.join("manifest.json"))?;
    }
    let stats = serde_json::Value::Object(stats);
    if let Some(p) = &a.stats_out {
        let p = ctx.out(p)?;
        write_json(&p, &stats)?;
        manifest.output(&p);
        manifest.write(&manifest_path(&p))?;
    }
    print_json(&stats)
}

fn analyze_cmd(ctx: &Context, a: &AnalyzeArgs) -> Result<(), CliError> {
    let (raw, interactions, videos) = load_raw(ctx, &a.data)?;
    let scheme = ctx.config.data.scheme()?;
    let (kept, _) = preprocess(&raw, &ctx.config.data.preprocess)?;
    let out = ctx.out(&a.out)?;
    let mut w = create(&out)?;
    completion_curves(&kept).write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&out, e))?;

    let mut manifest = Manifest::new("analyze-groups", &ctx.config);
    manifest
        .input("interactions", &interactions)
        .input("videos", &videos)
        .output(&out);
    let summary = group_summaries(&kept, &scheme, ctx.config.train.labeling.positive_fraction)?;
    if let Some(p) = &a.summary_out {
        let p = ctx.out(p)?;
        write_json(&p, &summary)?;
        manifest.output(&p);
    }
    manifest.write(&manifest_path(&out))?;
    print_json(&summary)
}

fn synth_cmd(ctx: &mut Context, a: &SynthArgs) -> Result<(), CliError> {
    let s = &mut ctx.config.synth;
    if let Some(v) = a.users {
        s.n_users = v;
    }
    if let Some(v) = a.videos {
        s.n_videos = v;
    }
    if let Some(v) = a.interactions {
        s.n_interactions = v;
    }
    if let Some(v) = a.topics {
        s.n_topics = v;
    }
    if let Some(v) = a.bias {
        s.bias_strength = v;
    }
    if let Some(v) = a.noise {
        s.noise_std = v;
    }
    ctx.config.validate()?;
    let (data, truth) = generate(&ctx.config.synth)?;
    let dir = ctx.out_dir(&a.out)?;
    let mut manifest = Manifest::new("synthgen", &ctx.config);
    manifest.seed = ctx.config.synth.seed;

    let p = dir.join("interactions.csv");
    let mut w = create(&p)?;
    write_interactions(&data, &mut w)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    manifest.output(&p);

    let p = dir.join("videos.csv");
    let mut w = create(&p)?;
    write_videos(data.vocab(), &mut w)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    manifest.output(&p);

    let p = dir.join("truth.csv");
    let mut w = create(&p)?;
    truth.write_csv(&data, &mut w)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    manifest.output(&p);

    manifest.write(&dir.join("manifest.json"))?;
    print_json(&CountStats::of(&data))
}

/// Training set (preprocessed) and validation set on the same vocabulary.
pub(crate) fn load_train_valid(
    ctx: &Context,
    train_path: &Path,
    valid_path: Option<&Path>,
    videos: &Path,
) -> Result<(Dataset, Dataset), CliError> {
    let raw = ingest_paths(train_path, videos)?;
    let (train_set, stats) = preprocess(&raw, &ctx.config.data.preprocess)?;
    if stats != Default::default() {
        log::warn!(
            "preprocessing removed {} training interactions",
            stats.removed_by_length + stats.removed_by_progress
        );
    }
    let vocab = Arc::clone(train_set.vocab());
    let valid = match valid_path {
        Some(p) => ingest_path_with_vocab(p, vocab, UnknownIds::Skip)?.0,
        None => Dataset::new(vocab, Vec::new())?,
    };
    Ok((train_set, valid))
}

fn train_cmd(ctx: &mut Context, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(name) = &a.method {
        let kind = MethodKind::parse(name).ok_or_else(|| {
            let names: Vec<&str> = MethodKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!(
                "unknown method `{name}` (expected one of {})",
                names.join(", ")
            ))
        })?;
        if kind != ctx.config.train.method.kind {
            ctx.config.train.method = MethodSpec::new(kind);
        }
    }
    if let Some(n) = a.max_epochs {
        ctx.config.train.max_epochs = n;
    }
    ctx.config.validate()?;
    let videos = ctx.videos(a.videos.as_deref())?;
    let (train_set, valid) = load_train_valid(ctx, &a.train, a.valid.as_deref(), &videos)?;
    let scheme = ctx.config.data.scheme()?;
    let outcome = train(&train_set, &valid, &scheme, &ctx.config.train)?;

    let out = ctx.out(&a.out)?;
    outcome.model.save(&out)?;
    let mut manifest = Manifest::new("train", &ctx.config);
    manifest.input("train", &a.train).input("videos", &videos);
    if let Some(v) = &a.valid {
        manifest.input("valid", v);
    }
    manifest.output(&out);
    if let Some(p) = &a.history {
        let p = ctx.out(p)?;
        let mut w = create(&p)?;
        write_history(&outcome.history, &mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        manifest.output(&p);
    }
    if let Some(p) = &a.dump_triples {
        if ctx.config.train.method.kind != MethodKind::Vldrec {
            return Err(CliError::Usage("--dump-triples applies to vldrec only".into()));
        }
        let p = ctx.out(p)?;
        let tau = compute_tau(&train_set, &scheme, ctx.config.train.labeling.positive_fraction)?;
        let sc = SamplingContext::new(&train_set, &tau)?;
        let sample = epoch_stream(&sc, &ctx.config.train.labeling, epoch_seed(ctx.config.train.seed, 1))?;
        let mut w = create(&p)?;
        write_triples(&sc, &sample.triples, &mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        manifest.output(&p);
    }
    manifest.write(&manifest_path(&out))?;
    print_json(&train_summary(&outcome))
}

#[derive(Debug, Serialize)]
pub(crate) struct TrainSummary {
    pub method: &'static str,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_view_time_at_t: Option<f64>,
    pub final_loss: Option<f64>,
}

pub(crate) fn train_summary(o: &TrainOutcome) -> TrainSummary {
    TrainSummary {
        method: o.model.method.kind.name(),
        epochs: o.history.len(),
        best_epoch: o.best_epoch,
        best_valid_view_time_at_t: o
            .best_epoch
            .and_then(|e| o.history.iter().find(|h| h.epoch == e))
            .and_then(|h| h.valid_view_time_at_t),
        final_loss: o.history.last().map(|h| h.loss),
    }
}

/// The JSON written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(flatten)]
    pub report: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_improvement: Option<BTreeMap<String, f64>>,
}

fn evaluate_cmd(ctx: &Context, a: &EvaluateArgs) -> Result<(), CliError> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let unknown = if a.skip_unknown {
        UnknownIds::Skip
    } else {
        UnknownIds::Error
    };
    let (test, _) = ingest_path_with_vocab(&a.test, model.vocab_arc(), unknown)?;
    let category_path = a
        .category_file
        .clone()
        .or_else(|| ctx.config.data.category_file.clone());
    let categories = match &category_path {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
            Some(Categories::read(f, test.vocab())?)
        }
        None => None,
    };
    let report = evaluate(
        &model,
        &test,
        &model.scheme,
        &ctx.config.evaluation,
        categories.as_ref(),
    )?;
    let relative = match &a.baseline {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let base: EvalReport = serde_json::from_str(&text).map_err(Error::from)?;
            Some(relative_improvement(&report, &base.report))
        }
        None => None,
    };
    let full = EvalReport {
        method: model.method.kind.name().to_string(),
        report,
        relative_improvement: relative,
    };

    let mut manifest = Manifest::new("evaluate", &ctx.config);
    manifest.input("checkpoint", &a.checkpoint).input("test", &a.test);
    if let Some(p) = &category_path {
        manifest.input("categories", p);
    }
    if let Some(p) = &a.baseline {
        manifest.input("baseline", p);
    }
    if let Some(p) = &a.groups_csv {
        let p = ctx.out(p)?;
        let mut w = create(&p)?;
        full.report.write_group_csv(&mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        manifest.output(&p);
    }
    if let Some(p) = &a.users_csv {
        let p = ctx.out(p)?;
        let mut w = create(&p)?;
        full.report.write_user_csv(&mut w)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        manifest.output(&p);
    }
    match &a.out {
        Some(p) => {
            let p = ctx.out(p)?;
            write_json(&p, &full)?;
            manifest.output(&p);
            manifest.write(&manifest_path(&p))?;
        }
        None => print_json(&full)?,
    }
    Ok(())
}

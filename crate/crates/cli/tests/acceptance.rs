//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lenrank_core::baselines::{
    ips_batch_weights, ips_raw_weight, rank_negative_sampler, MethodKind, MethodSpec, RankTarget,
};
use lenrank_core::data::{split, Dataset, SplitSpec};
use lenrank_core::evaluation::{evaluate, jsd, view_time_at_k, view_time_at_t, EvalConfig, RankedEntry, RankedList};
use lenrank_core::grouping::{compute_tau, GroupScheme};
use lenrank_core::model::{Activation, FeatureSpec, Gradients, Head, HeadConfig, InitMode, ModelParams};
use lenrank_core::sampling::{epoch_stream, Branch, LabelingConfig, PreferencePair, SamplingContext, TrainingTriple};
use lenrank_core::synthgen::{generate, with_oracle_view_time, SynthConfig};
use lenrank_core::training::{batch_loss, pairwise_batch_loss, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn tiny_data(seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_users: 4,
        n_videos: 50,
        n_interactions: 300,
        n_topics: 3,
        // even group weights keep every length group populated
        length_weights: vec![0.2; 5],
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn random_model(d: &Dataset, dim: usize, hidden: Vec<usize>, dropout: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let scheme = GroupScheme::kuaishou();
    let spec = FeatureSpec {
        user_vocab: d.vocab().num_users(),
        video_vocab: d.vocab().num_videos(),
        length_buckets: scheme.num_groups(),
        embedding_dim: dim,
    };
    let head = HeadConfig {
        hidden_sizes: hidden,
        dropout_rate: dropout,
        activation: Activation::Relu,
    };
    let mut p = ModelParams::init(
        spec,
        head,
        scheme.video_groups(d).unwrap(),
        rng.random(),
        InitMode::Random,
    )
    .unwrap();
    let flat: Vec<f64> = p.flat().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    p.set_flat(&flat).unwrap();
    p
}

fn stream(d: &Dataset, cfg: &LabelingConfig, seed: u64) -> Vec<TrainingTriple> {
    let tau = compute_tau(d, &GroupScheme::kuaishou(), cfg.positive_fraction).unwrap();
    let ctx = SamplingContext::new(d, &tau).unwrap();
    epoch_stream(&ctx, cfg, seed).unwrap().triples
}

fn criterion_1() -> Outcome {
    const H: f64 = 1e-6;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let d = tiny_data(trial);
        let dim = rng.random_range(1..=4);
        let mut hidden = vec![rng.random_range(1..=5)];
        if rng.random_bool(0.5) {
            hidden.push(rng.random_range(1..=3));
        }
        let dropout = if trial % 2 == 0 {
            0.0
        } else {
            rng.random_range(0.05..0.5)
        };
        let alpha = rng.random_range(0.0..=1.0);
        let p = random_model(&d, dim, hidden, dropout, &mut rng);
        let mut batch = stream(&d, &LabelingConfig::default(), trial);
        batch.truncate(8);
        let drop_seed = Some(trial);
        let mut g = Gradients::zeros_like(&p);
        batch_loss(&p, &d, &batch, alpha, drop_seed, Some(&mut g)).unwrap();
        let analytic = g.flat();
        let base = p.flat();
        let mut q = p.clone();
        let mut x = base.clone();
        for i in 0..base.len() {
            x[i] = base[i] + H;
            q.set_flat(&x).unwrap();
            let up = batch_loss(&q, &d, &batch, alpha, drop_seed, None).unwrap().total;
            x[i] = base[i] - H;
            q.set_flat(&x).unwrap();
            let down = batch_loss(&q, &d, &batch, alpha, drop_seed, None).unwrap().total;
            x[i] = base[i];
            let numeric = (up - down) / (2.0 * H);
            // central differences carry ~1e-10 absolute roundoff at this step,
            // so smaller components are compared against the floor instead
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 30.0,
        format!("100 models, max relative error {worst:.2e} (limit 1e-4, denominator floor 1e-5), {secs:.1}s"),
    )
}

// ------------------------------------------------------------------ sampler

fn criterion_2() -> Outcome {
    let (d, _) = generate(&SynthConfig {
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let mut violations = 0usize;
    let mut total = 0usize;
    let mut worst_z: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for (i, beta) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let cfg = LabelingConfig {
            beta,
            ..Default::default()
        };
        let tau = compute_tau(&d, &GroupScheme::kuaishou(), cfg.positive_fraction).unwrap();
        let ctx = SamplingContext::new(&d, &tau).unwrap();
        let t0 = Instant::now();
        let triples = epoch_stream(&ctx, &cfg, 20 + i as u64).unwrap().triples;
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        total += triples.len();
        let xs = d.interactions();
        let admissible = |t: &TrainingTriple, p: &PreferencePair, grouped: bool| {
            let anchored = p.positive == t.anchor || p.negative == t.anchor;
            let same_user = xs[p.positive].user == t.user && xs[p.negative].user == t.user;
            let rule = match t.branch {
                Branch::Pointwise => ctx.exceeds_tau(p.positive) && !ctx.exceeds_tau(p.negative),
                Branch::Pairwise => d.progress(p.positive) - d.progress(p.negative) > cfg.epsilon,
            };
            let group = !grouped || ctx.group(p.positive) == ctx.group(p.negative);
            anchored && same_user && rule && group
        };
        for t in &triples {
            for (slot, grouped) in [(&t.general, false), (&t.grouped, true)] {
                if let Some(p) = slot {
                    if !admissible(t, p, grouped) {
                        violations += 1;
                    }
                }
            }
        }
        let n = triples.len() as f64;
        let pointwise = triples.iter().filter(|t| t.branch == Branch::Pointwise).count() as f64;
        let z = (pointwise - n * beta).abs() / (n * beta * (1.0 - beta)).sqrt();
        worst_z = worst_z.max(z);
    }
    check(
        violations == 0 && total >= 10_000 && worst_z <= 3.0 && slowest < 10.0,
        format!(
            "{total} triples, {violations} violations, branch share within {worst_z:.2} sigma of beta, slowest epoch {slowest:.2}s"
        ),
    )
}

// ------------------------------------------------------------------ metrics

/// Walks the list one second at a time: lengths and budgets are integers, so
/// each second of an entry contributes view_time / length.
fn walk_view_time(list: &RankedList, budget: u32) -> f64 {
    let mut clock = 0u32;
    let mut total = 0.0;
    'outer: for e in &list.entries {
        let rate = e.view_time / e.length;
        for _ in 0..e.length as u32 {
            if clock == budget {
                break 'outer;
            }
            total += rate;
            clock += 1;
        }
    }
    total
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut identity_failures = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..30);
        let entries: Vec<RankedEntry> = (0..n)
            .map(|i| {
                let length = rng.random_range(1..=60) as f64;
                RankedEntry {
                    video: i,
                    length,
                    view_time: length * rng.random_range(0.0..1.5),
                    score: 0.0,
                }
            })
            .collect();
        let list = RankedList { user: 0, entries };
        let t = rng.random_range(0..=400u32);
        let got = view_time_at_t(&list, t as f64);
        let want = walk_view_time(&list, t);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));

        let c = rng.random_range(1..=60) as f64;
        let flat = RankedList {
            user: 0,
            entries: list.entries.iter().map(|e| RankedEntry { length: c, ..*e }).collect(),
        };
        let k = rng.random_range(0..35);
        if view_time_at_t(&flat, k as f64 * c) != view_time_at_k(&flat, k) {
            identity_failures += 1;
        }
    }
    let p = [0.1, 0.2, 0.3, 0.4];
    let q = [0.4, 0.3, 0.2, 0.1];
    let same = jsd(&p, &p).unwrap();
    let disjoint = jsd(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5]).unwrap();
    let asym = (jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs();
    let jsd_ok = same.abs() <= 1e-12 && (disjoint - 1.0).abs() <= 1e-12 && asym <= 1e-12;
    check(
        worst <= 1e-12 && identity_failures == 0 && jsd_ok,
        format!(
            "1000 lists, max relative gap to walk {worst:.1e}, {identity_failures} identity failures, \
             JSD(p,p)={same:.1e} JSD(disjoint)={disjoint} |JSD asymmetry|={asym:.1e}"
        ),
    )
}

// ------------------------------------------------------------- reduction

fn criterion_4() -> Outcome {
    let d = tiny_data(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_model(&d, 4, vec![5, 3], 0.3, &mut rng);
    let tau = compute_tau(&d, &GroupScheme::kuaishou(), 0.2).unwrap();
    let ctx = SamplingContext::new(&d, &tau).unwrap();
    // time-oriented pairs, as the plain ranking baseline draws them; the
    // within-group slot gets its own time-oriented pair, which α = 1 must ignore
    let mut triples = Vec::new();
    for anchor in 0..d.len() {
        let user = d.interactions()[anchor].user;
        let history = d.user_interactions(user);
        let group = ctx.user_group(user, ctx.group(anchor));
        let Some(general) = rank_negative_sampler(&d, history, anchor, RankTarget::Time, &mut rng).unwrap() else {
            continue;
        };
        let grouped = if group.len() >= 2 {
            rank_negative_sampler(&d, group, anchor, RankTarget::Time, &mut rng).unwrap()
        } else {
            None
        };
        triples.push(TrainingTriple {
            user,
            anchor,
            general: Some(general),
            grouped,
            branch: Branch::Pairwise,
        });
    }
    let mut loss_gap: f64 = 0.0;
    let mut grad_gap: f64 = 0.0;
    let mut silent = true;
    let batches = triples.chunks(32).count();
    for (step, batch) in triples.chunks(32).enumerate() {
        let seed = Some(1000 + step as u64);
        let pairs: Vec<PreferencePair> = batch.iter().filter_map(|t| t.general).collect();
        let mut g = Gradients::zeros_like(&p);
        let two_head = batch_loss(&p, &d, batch, 1.0, seed, Some(&mut g)).unwrap().total;
        let mut gp = Gradients::zeros_like(&p);
        let pairwise = pairwise_batch_loss(&p, &d, &pairs, None, seed, Some(&mut gp)).unwrap();
        loss_gap = loss_gap.max((two_head - pairwise).abs());
        let f_un = g.head(Head::FUn);
        silent &= f_un
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|&x| x == 0.0));
        let gap = g
            .flat()
            .iter()
            .zip(gp.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        grad_gap = grad_gap.max(gap);
    }
    check(
        loss_gap <= 1e-12 && silent && grad_gap <= 1e-12 && !triples.is_empty(),
        format!(
            "{} time-oriented pairs in {batches} batches with dropout, max |L - L_pairwise| = {loss_gap:.1e}, \
             gradient gap {grad_gap:.1e}, f_un gradient all zero: {silent}",
            triples.len()
        ),
    )
}

// ------------------------------------------------------------ debiasing

fn criterion_5() -> Outcome {
    let scheme = GroupScheme::kuaishou();
    let mut rows = Vec::new();
    let t0 = Instant::now();
    for seed in 0..5u64 {
        let (d, truth) = generate(&SynthConfig {
            seed,
            bias_strength: 0.5,
            ..Default::default()
        })
        .unwrap();
        let s = split(
            &d,
            &SplitSpec {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let test = with_oracle_view_time(&truth, &s.test).unwrap();
        let mut row = Vec::new();
        for kind in [MethodKind::TReg, MethodKind::Vldrec] {
            let cfg = TrainConfig {
                method: MethodSpec::new(kind),
                seed,
                ..Default::default()
            };
            let out = train(&s.train, &s.validation, &scheme, &cfg).unwrap();
            let report = evaluate(&out.model, &test, &scheme, &EvalConfig::default(), None).unwrap();
            row.push((report.view_time_at_t(120.0).unwrap(), report.score_mean_spread()));
        }
        rows.push(row);
    }
    let median = |f: fn(&Vec<(f64, f64)>) -> f64| {
        let mut v: Vec<f64> = rows.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let treg_vt = median(|r| r[0].0);
    let ours_vt = median(|r| r[1].0);
    let treg_spread = median(|r| r[0].1);
    let ours_spread = median(|r| r[1].1);
    let secs = t0.elapsed().as_secs_f64();
    check(
        ours_vt >= 1.05 * treg_vt && ours_spread <= 0.5 * treg_spread,
        format!(
            "median over 5 seeds: View_Time@120 {ours_vt:.2} vs TReg {treg_vt:.2} (ratio {:.3}, need 1.05); \
             group score spread {ours_spread:.3} vs {treg_spread:.3} (ratio {:.3}, need 0.5); {secs:.0}s",
            ours_vt / treg_vt,
            ours_spread / treg_spread
        ),
    )
}

// --------------------------------------------------------------------- IPS

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_mean: f64 = 0.0;
    let mut over_cap = 0;
    for _ in 0..200 {
        let lengths: Vec<f64> = (0..rng.random_range(1..200))
            .map(|_| rng.random_range(1.0..120.0))
            .collect();
        let cap = rng.random_range(0.01..0.5);
        let cn = ips_batch_weights(MethodKind::IpsCn, &lengths, Some(cap)).unwrap();
        let mean = cn.iter().sum::<f64>() / cn.len() as f64;
        worst_mean = worst_mean.max((mean - 1.0).abs());
        for &l in &lengths {
            if ips_raw_weight(MethodKind::IpsC, l, Some(cap)).unwrap() > cap {
                over_cap += 1;
            }
        }
    }
    let plain = ips_raw_weight(MethodKind::Ips, 20.0, None).unwrap();
    check(
        worst_mean <= 1e-12 && over_cap == 0 && (plain - 0.05).abs() <= 1e-15,
        format!("normalized mean off by {worst_mean:.1e}, {over_cap} capped weights above cap, ips(20) = {plain}"),
    )
}

// ------------------------------------------------------------ reproducible

/// Runs the pipeline in `dir`; returns the report and the train and evaluate manifests.
fn pipeline(dir: &Path) -> Result<[Vec<u8>; 3], String> {
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_lenrank"))
            .args(["--threads", "1", "--seed", "7"])
            .args(args)
            .current_dir(dir)
            .env_remove("LENRANK_SEED")
            .env_remove("LENRANK_OUT_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
        }
    };
    run(&[
        "synthgen",
        "--out",
        "synth",
        "--users",
        "40",
        "--videos",
        "400",
        "--interactions",
        "6000",
    ])?;
    run(&[
        "ingest",
        "--interactions",
        "synth/interactions.csv",
        "--videos",
        "synth/videos.csv",
        "--split-out",
        "split",
    ])?;
    run(&[
        "train",
        "--train",
        "split/train.csv",
        "--valid",
        "split/validation.csv",
        "--videos",
        "split/videos.csv",
        "--out",
        "model.json",
        "--max-epochs",
        "3",
    ])?;
    run(&[
        "evaluate",
        "--checkpoint",
        "model.json",
        "--test",
        "split/test.csv",
        "--out",
        "report.json",
    ])?;
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    Ok([
        read("report.json")?,
        read("model.manifest.json")?,
        read("report.manifest.json")?,
    ])
}

fn criterion_7() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let [first, train_a, eval_a] = pipeline(a.path())?;
    let [second, train_b, eval_b] = pipeline(b.path())?;
    if train_a != train_b || eval_a != eval_b {
        return Err("manifests of the two runs differ".into());
    }
    check(
        !first.is_empty() && first == second,
        format!(
            "two synthgen/ingest/train/evaluate runs with identical manifests, report of {} bytes, identical: {}",
            first.len(),
            first == second
        ),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("gradients match finite differences", criterion_1),
        ("sampled pairs obey their labeling rule", criterion_2),
        ("metrics agree with oracles", criterion_3),
        ("alpha = 1 reduces to the pairwise ranking loss", criterion_4),
        ("debiasing beats view-time regression on planted data", criterion_5),
        ("IPS weight algebra", criterion_6),
        ("CLI runs are byte-reproducible", criterion_7),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

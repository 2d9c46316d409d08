//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria 8, 9 and 11 train on the 64x32 toy dataset
//! (8 train identities, 8 test identities, 2 cameras); the whole suite
//! takes roughly half an hour on one core.
//!
//! `cargo test -p msfl-core --test acceptance -- 3 7` runs a subset.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msfl_core::autodiff::Tape;
use msfl_core::config::{parse_overrides, ExperimentConfig};
use msfl_core::data::{generate, Dataset, GenerateSpec};
use msfl_core::eval::{self, ItemMeta};
use msfl_core::net::{ModelConfig, MsflModel};
use msfl_core::tensor::Tensor;
use msfl_core::train::{self, checkpoint_path, params_bit_equal, TrainOptions, LOG_FILE};
use msfl_core::verify::{self, random};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

type Check = fn(&Env) -> Verdict;

/// Shared scratch space and the toy dataset.
struct Env {
    dir: tempfile::TempDir,
    data: String,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().join("toy");
        let mut spec = GenerateSpec::new(16, 12, 2, 0);
        spec.height = 64;
        spec.width = 32;
        generate(&spec, &root, false).expect("toy dataset");
        let data = root.display().to_string();
        Env { dir, data }
    }

    /// `configs/toy.toml` plus overrides, writing under the scratch dir.
    fn config(&self, run: &str, sets: &[&str]) -> ExperimentConfig {
        let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml"))
            .expect("configs/toy.toml");
        let owned: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        let mut cfg = ExperimentConfig::resolve(&text, &parse_overrides(&owned).unwrap()).unwrap();
        cfg.data.root = self.data.clone();
        cfg.output_dir = self.dir.path().join(run).display().to_string();
        cfg
    }
}

const BASELINE: [&str; 3] = ["model.csip=off", "model.msff=off", "msgr.mode=off"];

fn c1_closed_form_optimality(_: &Env) -> Verdict {
    let start = Instant::now();
    let rows = verify::oracle_suite(1000, 64, msfl_core::msgr::ORACLE_MIN_SAMPLES, 0).unwrap();
    let elapsed = start.elapsed();
    let dominated = rows.iter().all(|r| r.dominated == r.trials);
    let tight = rows.iter().map(|r| r.max_tightness_error).fold(0.0, f64::max);
    let detail = rows
        .iter()
        .map(|r| format!("p={} {}/{}", r.p, r.dominated, r.trials))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        dominated && tight <= 1e-10 && elapsed < Duration::from_secs(30),
        format!("{detail}; tightness {tight:.1e} (tol 1e-10); {:.1}s (limit 30s)", elapsed.as_secs_f64()),
    )
}

fn c2_double_backward(_: &Env) -> Verdict {
    let start = Instant::now();
    let params = verify::toy_model_parameter_count().unwrap();
    let lines = verify::penalty_suite().unwrap();
    let elapsed = start.elapsed();
    let l2: Vec<_> = lines.iter().filter(|l| l.name.contains("p*=2")).collect();
    let both = ["target input", "target c2"].iter().all(|t| l2.iter().any(|l| l.name.contains(t)));
    let worst = lines.iter().map(|l| l.error).fold(0.0, f64::max);
    verdict(
        both && lines.iter().all(|l| l.passed && l.tolerance <= 1e-4)
            && params <= 5000
            && elapsed < Duration::from_secs(120),
        format!(
            "{} checks on input and C2, worst rel. error {worst:.1e} (tol 1e-4); {params} parameters; {:.1}s",
            lines.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c3_analytic_second_order(_: &Env) -> Verdict {
    let x0 = random(&[2, 3, 4, 5], 11);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.grad_graph(loss, &[x]).unwrap()[0];
    let g2 = tape.mul(g, g).unwrap();
    let n = tape.sum(g2).unwrap();
    let h = tape.grad(n, &[x]).unwrap().remove(0);
    let exact = h.data().iter().zip(x0.data()).all(|(a, b)| *a == 8.0 * b);
    let worst = h
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (a - 8.0 * b).abs() / (8.0 * b).abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    verdict(exact, format!("grad of |grad sum x^2|^2 vs 8x on 120 entries, max rel. deviation {worst:.1e}"))
}

fn c4_chain_rule(_: &Env) -> Verdict {
    let lines = verify::chain_suite().unwrap();
    let worst = lines.iter().map(|l| l.error).fold(0.0, f64::max);
    verdict(
        lines.iter().all(|l| l.passed) && worst <= 1e-8,
        format!("{} stagewise comparisons, max rel. error {worst:.1e} (tol 1e-8)", lines.len()),
    )
}

fn c5_zero_strength(env: &Env) -> Verdict {
    let epochs = ["schedule.epochs=5", "schedule.scale=1.0", "schedule.decay_epochs=[3]"];
    let zero = env.config("c5-zero", &[&epochs[..], &["msgr.mode=penalty", "msgr.sigma=0"]].concat());
    let off = env.config("c5-off", &[&epochs[..], &["msgr.mode=off"]].concat());
    let a = train::train(&zero, &TrainOptions::default()).unwrap();
    let b = train::train(&off, &TrainOptions::default()).unwrap();
    let bits = |h: &[train::LogRecord]| -> Vec<(u64, u64)> {
        h.iter().map(|r| (r.base_loss.to_bits(), r.train_accuracy.to_bits())).collect()
    };
    let same_params = params_bit_equal(&a.model, &b.model);
    let same_trace = bits(&a.history) == bits(&b.history);
    verdict(
        same_params && same_trace && a.epochs == 5,
        format!(
            "5 epochs; parameters bit-equal: {same_params}, per-epoch loss/accuracy bit-equal: {same_trace}"
        ),
    )
}

fn c6_pyramid_shapes(_: &Env) -> Verdict {
    let cfg = ModelConfig::full_scale(4);
    let extents = cfg.stage_extents();
    let mut model = MsflModel::new(cfg.clone(), 0).unwrap();
    let maps = model.feature_maps(&random(&[1, 3, 256, 128], 2)).unwrap();
    let want = [(64, 32), (32, 16), (16, 8), (8, 4)];
    let mut ok = extents == want;
    let mut problems = Vec::new();
    for (name, t) in &maps {
        let level: usize = name[1..].parse().unwrap();
        let (h, w) = want[level - 2];
        let c = t.dims()[1];
        if t.dims()[2..] != [h, w] {
            problems.push(format!("{name} is {:?}", t.dims()));
        }
        if !name.starts_with('C') && c != 512 {
            problems.push(format!("{name} has width {c}"));
        }
    }
    let names: Vec<&str> = maps.iter().map(|(n, _)| n.as_str()).collect();
    ok &= names == ["C2", "C3", "C4", "C5", "P2", "P3", "P4", "P5", "F2", "F3", "F4"];
    let depths = model.net.msff_depths();
    ok &= depths == [(2, 3), (3, 2), (4, 1)];
    ok &= problems.is_empty();
    verdict(
        ok,
        format!(
            "256x128, stage blocks {:?}: extents {:?}, P/F widths {}, refinement depths {:?}{}",
            cfg.stage_blocks,
            extents,
            cfg.lateral_width,
            depths,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    )
}

/// CMC and AP by counting, per positive, how many valid gallery items
/// precede it; no sorting involved.
fn brute_force(dist: &[Vec<f64>], query: &[ItemMeta], gallery: &[ItemMeta], max_rank: usize) -> (Vec<f64>, f64, usize) {
    let mut cmc = vec![0.0; max_rank];
    let mut ap_sum = 0.0;
    let mut counted = 0;
    for (qi, q) in query.iter().enumerate() {
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&j| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera))
            .collect();
        let position = |j: usize| {
            1 + valid
                .iter()
                .filter(|&&k| dist[qi][k] < dist[qi][j] || (dist[qi][k] == dist[qi][j] && k < j))
                .count()
        };
        let mut ranks: Vec<usize> = valid
            .iter()
            .filter(|&&j| gallery[j].identity == q.identity)
            .map(|&j| position(j))
            .collect();
        if ranks.is_empty() {
            continue;
        }
        counted += 1;
        ranks.sort();
        for (r, slot) in cmc.iter_mut().enumerate() {
            if ranks[0] <= r + 1 {
                *slot += 1.0;
            }
        }
        ap_sum += ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
    }
    let excluded = query.len() - counted;
    if counted == 0 {
        return (cmc, 0.0, excluded);
    }
    (cmc.iter().map(|c| c / counted as f64).collect(), ap_sum / counted as f64, excluded)
}

fn c7_ranking_oracle(_: &Env) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    let (mut ties, mut excluded_seen, mut all_excluded) = (0, 0, 0);
    let instances = 200;
    for i in 0..instances {
        let nq = rng.random_range(1..=20);
        let ng = rng.random_range(1..=20);
        let ids = rng.random_range(1..=6);
        let cams = rng.random_range(1..=3);
        let mut meta = |_| ItemMeta {
            identity: rng.random_range(0..ids),
            camera: rng.random_range(0..cams),
        };
        let query: Vec<ItemMeta> = (0..nq).map(&mut meta).collect();
        let gallery: Vec<ItemMeta> = (0..ng).map(&mut meta).collect();
        // Every fourth instance draws from a handful of values to force ties.
        let levels = if i % 4 == 0 { 3 } else { 1_000_000 };
        let dist: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect())
            .collect();
        let flat = Tensor::new(vec![nq, ng], dist.concat()).unwrap();
        let max_rank = 10;
        let (cmc, map, excluded) = brute_force(&dist, &query, &gallery, max_rank);
        let r = eval::evaluate(&flat, &query, &gallery, max_rank).unwrap();
        if r.cmc == cmc && r.map == map && r.excluded_queries == excluded {
            agree += 1;
        }
        if excluded == nq {
            all_excluded += 1;
        } else if excluded > 0 {
            excluded_seen += 1;
        }
        if i % 4 == 0 {
            ties += 1;
        }
    }
    verdict(
        agree == instances && excluded_seen > 0 && all_excluded > 0,
        format!(
            "{agree}/{instances} exact matches (Q,G <= 20); {ties} with ties, {excluded_seen} with some queries lacking a valid positive, {all_excluded} with none valid"
        ),
    )
}

fn c8_learning(env: &Env) -> Verdict {
    let start = Instant::now();
    let cfg = env.config("c8-baseline", &BASELINE);
    let out = train::train(&cfg, &TrainOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let best = out.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let first = out.history.iter().position(|r| r.train_accuracy >= 0.95);
    verdict(
        out.epochs <= 30 && first.is_some() && elapsed < Duration::from_secs(15 * 60),
        format!(
            "baseline, {} epochs: best train accuracy {best:.3} (first >= 0.95 at epoch {}), final {:.3}; {:.0}s (limit 900s)",
            out.epochs,
            first.map_or("-".into(), |e| (e + 1).to_string()),
            out.final_train_accuracy(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Paired deltas over seeds; a reversal counts only when the mean is
/// negative by more than two standard errors.
fn paired(deltas: &[f64]) -> (f64, f64, bool) {
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    (mean, se, mean < 0.0 && -mean > 2.0 * se)
}

fn trend(mean: f64, reversed: bool) -> &'static str {
    if reversed {
        " REVERSED"
    } else if mean < 0.0 {
        " (lower, within seed noise)"
    } else {
        ""
    }
}

fn c9_directional(env: &Env) -> Verdict {
    let start = Instant::now();
    let seeds = 0..5u64;
    let rank1 = |name: &str, sets: &[&str], seed: u64| -> f64 {
        let seed_set = format!("seed={seed}");
        let mut all: Vec<&str> = sets.to_vec();
        all.push(&seed_set);
        let cfg = env.config(&format!("c9-{name}-{seed}"), &all);
        let out = train::train(&cfg, &TrainOptions::default()).unwrap();
        let ds = Dataset::open(Path::new(&cfg.data.root)).unwrap();
        let mut model = out.model;
        let r = train::evaluate_model(&mut model, &ds, cfg.eval.max_rank, cfg.eval.batch_size).unwrap();
        eprintln!("  c9 {name:<10} seed {seed}: rank1 {:.4} mAP {:.4}", r.rank(1), r.map);
        r.rank(1)
    };
    let mut base = Vec::new();
    let mut msfl = Vec::new();
    let mut msgr = Vec::new();
    for s in seeds {
        base.push(rank1("baseline", &BASELINE, s));
        msfl.push(rank1("msfl", &["msgr.mode=off"], s));
        msgr.push(rank1("msfl-msgr", &["msgr.mode=penalty", "msgr.p=2", "msgr.sigma=0.01"], s));
    }
    let elapsed = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let da: Vec<f64> = msfl.iter().zip(&base).map(|(a, b)| a - b).collect();
    let db: Vec<f64> = msgr.iter().zip(&msfl).map(|(a, b)| a - b).collect();
    let (ma, sa, ra) = paired(&da);
    let (mb, sb, rb) = paired(&db);
    verdict(
        !ra && !rb && elapsed < Duration::from_secs(2 * 3600),
        format!(
            "rank-1 over 5 seeds: baseline {:.3}, MSFL {:.3}, MSFL+MSGR {:.3}; (a) delta {ma:+.3} +/- {sa:.3}{}, (b) delta {mb:+.3} +/- {sb:.3}{}; {:.0}s",
            mean(&base),
            mean(&msfl),
            mean(&msgr),
            trend(ma, ra),
            trend(mb, rb),
            elapsed.as_secs_f64()
        ),
    )
}

fn c10_activation_maps(_: &Env) -> Verdict {
    let mut model = MsflModel::new(ModelConfig::desk(8), 5).unwrap();
    let mut maps_checked = 0;
    let mut worst = 0.0f64;
    let mut invariant = true;
    for seed in 0..4 {
        for (_, feat) in model.feature_maps(&random(&[2, 3, 64, 32], 100 + seed)).unwrap() {
            let (map, zero) = eval::activation_map(&feat).unwrap();
            let [n, h, w] = [0, 1, 2].map(|i| map.dims()[i]);
            for s in 0..n {
                if zero[s] {
                    continue;
                }
                let norm = map.data()[s * h * w..(s + 1) * h * w].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
                maps_checked += 1;
            }
            // Whole-tensor and per-channel sign flips.
            let neg = Tensor::new(feat.dims().to_vec(), feat.data().iter().map(|v| -v).collect()).unwrap();
            let plane = feat.dims()[2] * feat.dims()[3];
            let mixed: Vec<f64> = feat
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| if (i / plane) % 2 == 1 { -v } else { *v })
                .collect();
            let mixed = Tensor::new(feat.dims().to_vec(), mixed).unwrap();
            for flipped in [neg, mixed] {
                invariant &= eval::activation_map(&flipped).unwrap().0 == map;
            }
        }
    }
    verdict(
        worst <= 1e-9 && invariant,
        format!("{maps_checked} maps: max |norm - 1| {worst:.1e} (tol 1e-9), sign-flip invariant: {invariant}"),
    )
}

fn c11_determinism(env: &Env) -> Verdict {
    let sets = [
        "schedule.epochs=4",
        "schedule.scale=1.0",
        "schedule.decay_epochs=[3]",
        "train.checkpoint_every=2",
    ];
    let a = env.config("c11-a", &sets);
    let b = env.config("c11-b", &sets);
    let ra = train::train(&a, &TrainOptions::default()).unwrap();
    let rb = train::train(&b, &TrainOptions::default()).unwrap();
    let log = |c: &ExperimentConfig| std::fs::read(Path::new(&c.output_dir).join(LOG_FILE)).unwrap();
    let same_logs = log(&a) == log(&b) && params_bit_equal(&ra.model, &rb.model);

    let r = env.config("c11-resumed", &sets);
    let stop = TrainOptions {
        stop_after: Some(2),
        ..TrainOptions::default()
    };
    train::train(&r, &stop).unwrap();
    let resume = TrainOptions {
        resume: Some(checkpoint_path(Path::new(&r.output_dir), 2)),
        ..TrainOptions::default()
    };
    let rr = train::train(&r, &resume).unwrap();
    let resumed_equal = params_bit_equal(&ra.model, &rr.model) && log(&a) == log(&r);
    verdict(
        same_logs && resumed_equal,
        format!(
            "MSFL+MSGR, 4 epochs: two runs byte-identical logs: {same_logs}; stop at 2 + resume equals straight run: {resumed_equal}"
        ),
    )
}

const CRITERIA: [(&str, &str, Check); 11] = [
    ("1", "closed-form perturbation optimality", c1_closed_form_optimality),
    ("2", "penalty gradient through double backward", c2_double_backward),
    ("3", "analytic second-order case", c3_analytic_second_order),
    ("4", "stagewise chain rule", c4_chain_rule),
    ("5", "zero-strength equivalence", c5_zero_strength),
    ("6", "pyramid shapes", c6_pyramid_shapes),
    ("7", "ranking oracle", c7_ranking_oracle),
    ("8", "desk-scale learning", c8_learning),
    ("9", "directional ablation", c9_directional),
    ("10", "activation-map contract", c10_activation_maps),
    ("11", "determinism and checkpointing", c11_determinism),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<_> = CRITERIA
        .iter()
        .filter(|(id, _, _)| filters.is_empty() || filters.iter().any(|f| f == id))
        .collect();
    let env = Env::new();
    let mut failed = 0;
    for (id, name, check) in selected {
        let start = Instant::now();
        let v = check(&env);
        println!(
            "{} [{id:>2}] {name}: {} ({:.1}s)",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Verification suites shared by the command line and the acceptance tests:
//! finite-difference checks per layer, through the full model and through
//! the penalty's double backward, the stagewise chain-rule probe, and the
//! closed-form versus numerical-oracle comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{GradCheck, Tape, Var};
use crate::error::Result;
use crate::msgr::{self, NormOrder};
use crate::net::{MsflModel, ModelConfig};
use crate::nn::{BatchNormLayer, BottleneckBlock, ConvLayer, EmbeddingHead, Forward, LinearLayer, Mode, ParamId, ParamStore};
use crate::objective::{batch_hard_triplet, cross_entropy};
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const PENALTY_TOLERANCE: f64 = 1e-4;
pub const CHAIN_TOLERANCE: f64 = 1e-8;
pub const TIGHTNESS_TOLERANCE: f64 = 1e-10;

/// One named check with its measured error.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        CheckLine {
            name: name.into(),
            error,
            tolerance,
            passed: error.is_finite() && error <= tolerance,
        }
    }
}

pub fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("consistent extents")
}

/// The smallest legal network: 32x32 input, widths of 4 and 8.
pub fn toy_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_height: 32,
        input_width: 32,
        stem_width: 4,
        stage_widths: [4, 8, 8, 8],
        lateral_width: 4,
        embedding_dim: 6,
        ..ModelConfig::desk(num_classes)
    }
}

type Layer<'a> = dyn Fn(&mut Forward, Var) -> Result<Var> + 'a;

/// Input and per-parameter checks of `sum(layer(x) * probe)`.
fn check_layer(name: &str, store: &ParamStore, input: &Tensor, layer: &Layer, out: &mut Vec<CheckLine>) -> Result<()> {
    let probe = {
        let mut tape = Tape::new();
        let mut s = store.clone();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let x = f.tape.constant(input.clone());
        let y = layer(&mut f, x)?;
        random(f.tape.shape(y).dims(), 99)
    };
    let run = |target: Option<ParamId>| {
        let probe = probe.clone();
        move |tape: &mut Tape, v: Var| -> Result<Var> {
            let mut s = store.clone();
            let mut f = Forward::new(tape, &mut s, Mode::Train);
            let x = match target {
                Some(id) => {
                    f.bind(id, v);
                    f.tape.constant(input.clone())
                }
                None => v,
            };
            let y = layer(&mut f, x)?;
            let w = f.tape.constant(probe.clone());
            let yw = f.tape.mul(y, w)?;
            Ok(f.tape.sum(yw)?)
        }
    };
    let r = GradCheck::new(LAYER_TOLERANCE).run(run(None), input)?;
    out.push(CheckLine::new(format!("{name} / input"), r.max_rel_error, LAYER_TOLERANCE));
    for id in store.ids() {
        let p = store.param(id);
        let r = GradCheck::new(LAYER_TOLERANCE).run(run(Some(id)), &p.value)?;
        out.push(CheckLine::new(format!("{name} / {}", p.name), r.max_rel_error, LAYER_TOLERANCE));
    }
    Ok(())
}

/// Every layer type and loss against central differences.
pub fn layer_suite() -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let conv = ConvLayer::new(&mut s, "conv3x3", 2, 3, 3, 1, 1, true, &mut rng)?;
    check_layer("conv 3x3", &s, &random(&[2, 2, 5, 4], 1), &|f, x| conv.forward(f, x), &mut out)?;

    let mut s = ParamStore::new();
    let conv = ConvLayer::new(&mut s, "conv_s2", 3, 2, 3, 2, 1, false, &mut rng)?;
    check_layer("conv stride 2", &s, &random(&[1, 3, 6, 6], 2), &|f, x| conv.forward(f, x), &mut out)?;

    let mut s = ParamStore::new();
    let bn = BatchNormLayer::new(&mut s, "bn", 3)?;
    s.param_mut(bn.gamma).value = Tensor::vector(vec![0.5, 1.5, -1.0]);
    s.param_mut(bn.beta).value = Tensor::vector(vec![0.1, 0.0, -0.2]);
    check_layer("batchnorm", &s, &random(&[3, 3, 2, 2], 3), &|f, x| bn.forward(f, x), &mut out)?;

    let mut s = ParamStore::new();
    let fc = LinearLayer::new(&mut s, "linear", 5, 3, &mut rng)?;
    check_layer("linear", &s, &random(&[4, 5], 4), &|f, x| fc.forward(f, x), &mut out)?;

    let mut s = ParamStore::new();
    let block = BottleneckBlock::new(&mut s, "bottleneck", 4, 8, 2, &mut rng)?;
    check_layer("bottleneck", &s, &random(&[2, 4, 4, 4], 5), &|f, x| block.forward(f, x), &mut out)?;

    let mut s = ParamStore::new();
    let head = EmbeddingHead::new(&mut s, "head", 6, 5, &mut rng)?;
    check_layer("embedding head", &s, &random(&[4, 6], 6), &|f, x| head.forward(f, x), &mut out)?;

    let s = ParamStore::new();
    let merge = |f: &mut Forward, x: Var| -> Result<Var> {
        let small = f.tape.constant(random(&[1, 2, 2, 2], 7));
        let up = f.tape.upsample2x(small)?;
        let sum = f.tape.add(x, up)?;
        let pooled = f.tape.global_avg_pool(sum)?;
        let cat = f.tape.concat(&[x, sum])?;
        let a = f.tape.channel_sum(cat)?;
        let total = f.tape.sum(a)?;
        let m = f.tape.mul(total, total)?;
        let p = f.tape.sum(pooled)?;
        Ok(f.tape.add(m, p)?)
    };
    check_layer("top-down merge and pooling", &s, &random(&[1, 2, 4, 4], 8), &merge, &mut out)?;

    let labels = [0usize, 2, 1, 2];
    let ce = |f: &mut Forward, x: Var| -> Result<Var> { cross_entropy(f.tape, x, &labels) };
    check_layer("cross entropy", &s, &random(&[4, 3], 9).map(|v| 3.0 * v), &ce, &mut out)?;

    let pairs = [0usize, 0, 1, 1];
    let tri = |f: &mut Forward, x: Var| -> Result<Var> { batch_hard_triplet(f.tape, x, &pairs, 0.3) };
    check_layer("batch-hard triplet", &s, &random(&[4, 3], 10), &tri, &mut out)?;
    Ok(out)
}

/// End-to-end check of the toy network: input coordinates and samples of
/// six parameter tensors from every part of the model.
pub fn model_suite() -> Result<Vec<CheckLine>> {
    let m = MsflModel::new(toy_model_config(3), 12)?;
    let x = random(&[3, 3, 32, 32], 13);
    let probe = random(&[3, 3], 14);
    let build = |target: Option<ParamId>| {
        let m = &m;
        let x = x.clone();
        let probe = probe.clone();
        move |tape: &mut Tape, v: Var| -> Result<Var> {
            let mut store = m.store.clone();
            let mut f = Forward::new(tape, &mut store, Mode::Train);
            let xv = match target {
                Some(id) => {
                    f.bind(id, v);
                    f.tape.constant(x.clone())
                }
                None => v,
            };
            let out = m.net.forward_var(&mut f, xv)?;
            let w = f.tape.constant(probe.clone());
            let lw = f.tape.mul(out.logits, w)?;
            Ok(f.tape.sum(lw)?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..x.numel())).collect();
    let mut out = Vec::new();
    let r = GradCheck::new(MODEL_TOLERANCE).with_coords(coords).run(build(None), &x)?;
    out.push(CheckLine::new("model / input", r.max_rel_error, MODEL_TOLERANCE));
    for name in [
        "stem.conv.weight",
        "backbone.c3.0.spatial.conv.weight",
        "csip.lateral2.weight",
        "csip.smooth4.bias",
        "msff.f2.2.expand.bn.gamma",
        "head.fc.weight",
    ] {
        let id = m.store.find(name).ok_or_else(|| crate::error::contract(format!("no parameter {name}")))?;
        let value = m.store.param(id).value.clone();
        let n = value.numel().min(12);
        let r = GradCheck::new(MODEL_TOLERANCE).with_coords((0..n).collect()).run(build(Some(id)), &value)?;
        out.push(CheckLine::new(format!("model / {name}"), r.max_rel_error, MODEL_TOLERANCE));
    }
    Ok(out)
}

/// Parameter gradients of `sigma * ||dL/dt||_2` on the toy network, for
/// `t` = input and `t` = C2, against central differences. `L` is the
/// cross-entropy of the logits, so every check runs a double backward.
pub fn penalty_suite() -> Result<Vec<CheckLine>> {
    let m = MsflModel::new(toy_model_config(3), 21)?;
    let x = random(&[2, 3, 32, 32], 22);
    let labels = [0usize, 2];
    let sigma = 0.5;
    let mut out = Vec::new();
    for target in ["input", "c2"] {
        for p in [NormOrder::Two, NormOrder::Inf, NormOrder::One] {
            // p = 2 is the required case; the other dual norms are checked
            // on the stem only.
            let names: &[&str] = if p == NormOrder::Two {
                &["stem.conv.weight", "backbone.c2.0.reduce.conv.weight", "csip.lateral2.weight", "head.fc.weight"]
            } else {
                &["stem.conv.weight"]
            };
            for name in names {
                let id = m.store.find(name).ok_or_else(|| crate::error::contract(format!("no parameter {name}")))?;
                let f = |tape: &mut Tape, v: Var| -> Result<Var> {
                    let mut store = m.store.clone();
                    let mut f = Forward::new(tape, &mut store, Mode::Train);
                    f.bind(id, v);
                    let xv = f.tape.leaf(x.clone());
                    let o = m.net.forward_var(&mut f, xv)?;
                    let loss = cross_entropy(f.tape, o.logits, &labels)?;
                    let t = if target == "input" { xv } else { o.features.c[0] };
                    Ok(msgr::penalty(f.tape, loss, &[t], p, sigma)?.value)
                };
                let value = m.store.param(id).value.clone();
                let n = value.numel().min(10);
                let r = GradCheck::new(PENALTY_TOLERANCE).with_coords((0..n).collect()).run(f, &value)?;
                out.push(CheckLine::new(
                    format!("penalty p*={} target {target} / {name}", p.dual()),
                    r.max_rel_error,
                    PENALTY_TOLERANCE,
                ));
            }
        }
    }
    Ok(out)
}

pub fn toy_model_parameter_count() -> Result<usize> {
    Ok(MsflModel::new(toy_model_config(3), 21)?.store.num_scalars())
}

/// Stagewise vector-Jacobian products versus the end-to-end input gradient
/// on the toy network.
pub fn chain_suite() -> Result<Vec<CheckLine>> {
    let m = MsflModel::new(toy_model_config(3), 31)?;
    let labels = [1usize, 0];
    let probe = random(&[2, 6], 32);
    let loss = |t: &mut Tape, emb: Var, logits: Var| -> Result<Var> {
        let ce = cross_entropy(t, logits, &labels)?;
        let w = t.constant(probe.clone());
        let ew = t.mul(emb, w)?;
        let s = t.sum(ew)?;
        Ok(t.add(ce, s)?)
    };
    let r = msgr::model_chain_rule_consistency(&m, &random(&[2, 3, 32, 32], 33), &loss)?;
    let mut out: Vec<CheckLine> = r
        .per_stage
        .iter()
        .map(|(n, e)| CheckLine::new(format!("chain / {n}"), *e, CHAIN_TOLERANCE))
        .collect();
    out.push(CheckLine::new("chain / max", r.max_rel_error, CHAIN_TOLERANCE));
    Ok(out)
}

/// Aggregate of closed form versus oracle over random gradients for one `p`.
#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub p: NormOrder,
    pub trials: usize,
    /// Trials where the closed form attains at least the oracle's best.
    pub dominated: usize,
    /// Largest `|g.e - sigma ||g||_{p*}| / (sigma ||g||_{p*})`.
    pub max_tightness_error: f64,
    /// Largest `(closed - oracle) / closed`: how far the search falls short.
    pub max_oracle_gap: f64,
    /// Zero-gradient trials, flagged rather than failed.
    pub degenerate: usize,
}

impl OracleRow {
    pub fn passed(&self) -> bool {
        self.dominated == self.trials && self.max_tightness_error <= TIGHTNESS_TOLERANCE
    }
}

/// Random gradients with dimensions in `1..=max_dim`; every 100th trial is
/// an all-zero gradient.
pub fn oracle_suite(trials: usize, max_dim: usize, samples: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for (pi, p) in NormOrder::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((pi as u64 + 1) * 0x9e37_79b9));
        let mut row = OracleRow {
            p,
            trials,
            dominated: 0,
            max_tightness_error: 0.0,
            max_oracle_gap: 0.0,
            degenerate: 0,
        };
        for trial in 0..trials {
            let d = rng.random_range(1..=max_dim.min(msgr::ORACLE_MAX_DIM));
            let scale: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
            let zero = trial % 100 == 99;
            let g: Vec<f64> = (0..d)
                .map(|_| if zero { 0.0 } else { scale * rng.sample::<f64, _>(StandardNormal) })
                .collect();
            let g = Tensor::vector(g);
            let sigma = 10f64.powf(rng.random_range(-3.0..0.0));
            let closed = msgr::worst_case_perturbation(&g, p, sigma)?;
            let oracle = msgr::perturbation_oracle(&g, p, sigma, samples, rng.random())?;
            // The oracle re-projects onto the ball, so its point may sit a
            // rounding error outside; allow that much.
            if closed.attained >= oracle.attained - 1e-12 * oracle.attained.abs() {
                row.dominated += 1;
            }
            if closed.degenerate {
                row.degenerate += 1;
                continue;
            }
            let bound = sigma * p.dual().of(&g);
            row.max_tightness_error = row.max_tightness_error.max((closed.attained - bound).abs() / bound);
            row.max_oracle_gap = row.max_oracle_gap.max((closed.attained - oracle.attained) / closed.attained);
        }
        rows.push(row);
    }
    Ok(rows)
}

//! Multi-scale gradient regularization.
//!
//! For a loss `L` and a quantity `t` it depends on, the linearized worst case
//! of a perturbation `||e||_p <= sigma` is `max g.e = sigma * ||g||_{p*}` with
//! `g = dL/dt`, attained by
//!
//! ```text
//! e = sigma * sign(g) * (|g| / ||g||_{p*})^(1 / (p - 1))
//! ```
//!
//! The regularizer adds `sigma * sum_t ||dL/dt||_{p*}` over a set of targets
//! (the input and backbone stage outputs). Minimizing it needs the gradient of
//! a gradient, which the tape provides through `Tape::grad_graph`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::net::MsflModel;
use crate::nn::{Forward, Mode};
use crate::tensor::kernels::{lp_norm, Norm};
use crate::tensor::Tensor;

/// Added under the square root of the 2-norm so that its derivative stays
/// finite when a target momentarily has zero gradient.
pub const L2_SMOOTHING: f64 = 1e-12;

/// Largest gradient the brute-force oracle accepts.
pub const ORACLE_MAX_DIM: usize = 64;
pub const ORACLE_MIN_SAMPLES: usize = 10_000;

/// Perturbation norm order `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NormOrder {
    One,
    Two,
    Inf,
}

impl NormOrder {
    pub const ALL: [NormOrder; 3] = [NormOrder::One, NormOrder::Two, NormOrder::Inf];

    /// Hölder conjugate: `1/p + 1/p* = 1`.
    pub fn dual(self) -> NormOrder {
        match self {
            NormOrder::One => NormOrder::Inf,
            NormOrder::Two => NormOrder::Two,
            NormOrder::Inf => NormOrder::One,
        }
    }

    pub fn norm(self) -> Norm {
        match self {
            NormOrder::One => Norm::L1,
            NormOrder::Two => Norm::L2,
            NormOrder::Inf => Norm::Inf,
        }
    }

    pub fn of(self, t: &Tensor) -> f64 {
        lp_norm(t, self.norm())
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormOrder::One => "1",
            NormOrder::Two => "2",
            NormOrder::Inf => "inf",
        })
    }
}

impl FromStr for NormOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "1.0" => Ok(NormOrder::One),
            "2" | "2.0" => Ok(NormOrder::Two),
            "inf" | "infinity" | "∞" => Ok(NormOrder::Inf),
            other => Err(format!("unsupported norm order {other:?} (expected 1, 2 or inf)")),
        }
    }
}

macro_rules! string_conversions {
    ($($t:ty),*) => {$(
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }

        impl TryFrom<String> for $t {
            type Error = String;

            fn try_from(s: String) -> std::result::Result<Self, String> {
                s.parse()
            }
        }
    )*};
}

string_conversions!(NormOrder, Target, RegMode);

/// `p -> p*`.
pub fn dual_exponent(p: NormOrder) -> NormOrder {
    p.dual()
}

#[derive(Debug, Clone)]
pub struct PerturbationResult {
    pub epsilon: Tensor,
    /// `g . epsilon`.
    pub attained: f64,
    /// Zero gradient: every feasible perturbation is optimal, `epsilon = 0`.
    pub degenerate: bool,
}

/// Closed-form maximizer of `g . e` over `||e||_p <= sigma`.
///
/// `p = 1` takes the limit of the general formula: all mass on the largest
/// `|g_j|`, ties to the lowest flat index.
pub fn worst_case_perturbation(grad: &Tensor, p: NormOrder, sigma: f64) -> Result<PerturbationResult> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(contract(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient passed to worst_case_perturbation".into()));
    }
    let g = grad.data();
    let dual = p.dual().of(grad);
    if dual == 0.0 {
        return Ok(PerturbationResult {
            epsilon: grad.zeros_like(),
            attained: 0.0,
            degenerate: true,
        });
    }
    let eps: Vec<f64> = match p {
        NormOrder::Two => g.iter().map(|v| sigma * v / dual).collect(),
        NormOrder::Inf => g.iter().map(|&v| sigma * signum0(v)).collect(),
        NormOrder::One => {
            let j = argmax_abs(g);
            let mut e = vec![0.0; g.len()];
            e[j] = sigma * signum0(g[j]);
            e
        }
    };
    let epsilon = Tensor::from_shape(grad.shape().clone(), eps)?;
    let attained = grad.dot(&epsilon);
    Ok(PerturbationResult {
        epsilon,
        attained,
        degenerate: false,
    })
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// First index of the largest absolute value.
fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub epsilon: Tensor,
    pub attained: f64,
    pub evaluations: usize,
}

/// Numerical maximizer of `g . e` over `||e||_p <= sigma` that knows nothing
/// of the closed form: random directions scaled onto the ball, then
/// coordinate ascent with projection and a shrinking step.
pub fn perturbation_oracle(
    grad: &Tensor,
    p: NormOrder,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<OracleResult> {
    let d = grad.numel();
    if d > ORACLE_MAX_DIM {
        return Err(contract(format!("oracle handles at most {ORACLE_MAX_DIM} coordinates, got {d}")));
    }
    if samples < ORACLE_MIN_SAMPLES {
        return Err(contract(format!("oracle needs at least {ORACLE_MIN_SAMPLES} samples")));
    }
    let g = grad.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |e: &[f64]| g.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();

    let mut best = vec![0.0; d];
    let mut best_val = 0.0;
    let mut evals = 0;
    let mut cand = vec![0.0; d];

    while evals < samples / 2 {
        for c in cand.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        project(&mut cand, p, sigma, true);
        let v = objective(&cand);
        evals += 1;
        if v > best_val {
            best_val = v;
            best.copy_from_slice(&cand);
        }
    }

    let mut step = sigma;
    while evals < samples && step > sigma * 1e-14 {
        let mut improved = false;
        for i in 0..d {
            for dir in [1.0, -1.0] {
                cand.copy_from_slice(&best);
                cand[i] += dir * step;
                project(&mut cand, p, sigma, true);
                let v = objective(&cand);
                evals += 1;
                if v > best_val {
                    best_val = v;
                    best.copy_from_slice(&cand);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    Ok(OracleResult {
        epsilon: Tensor::from_shape(grad.shape().clone(), best)?,
        attained: best_val,
        evaluations: evals,
    })
}

/// Map `v` into the `p`-ball of radius `sigma`: clipping for `p = inf`,
/// radial scaling otherwise (onto the sphere when `to_boundary`).
fn project(v: &mut [f64], p: NormOrder, sigma: f64, to_boundary: bool) {
    match p {
        NormOrder::Inf => {
            for x in v.iter_mut() {
                *x = x.clamp(-sigma, sigma);
            }
        }
        NormOrder::One | NormOrder::Two => {
            let n = match p {
                NormOrder::One => v.iter().map(|x| x.abs()).sum::<f64>(),
                _ => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            };
            if n > 0.0 && (to_boundary || n > sigma) {
                let s = sigma / n;
                for x in v.iter_mut() {
                    *x *= s;
                }
            }
        }
    }
}

/// Quantity whose loss gradient is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Target {
    Input,
    C2,
    C3,
    C4,
    C5,
}

impl Target {
    pub const ALL: [Target; 5] = [Target::Input, Target::C2, Target::C3, Target::C4, Target::C5];

    pub fn name(self) -> &'static str {
        match self {
            Target::Input => "input",
            Target::C2 => "c2",
            Target::C3 => "c3",
            Target::C4 => "c4",
            Target::C5 => "c5",
        }
    }

    /// Index into `PyramidFeatures::c`, `None` for the input.
    pub fn stage_index(self) -> Option<usize> {
        match self {
            Target::Input => None,
            Target::C2 => Some(0),
            Target::C3 => Some(1),
            Target::C4 => Some(2),
            Target::C5 => Some(3),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown regularizer target {s:?} (expected input, c2, c3, c4, c5)"))
    }
}

/// How the regularizer enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RegMode {
    /// Gradient-norm penalty added to the loss.
    Penalty,
    /// Train on the closed-form worst-case perturbed input.
    AdversarialStep,
    Off,
}

impl RegMode {
    pub fn name(self) -> &'static str {
        match self {
            RegMode::Penalty => "penalty",
            RegMode::AdversarialStep => "adversarial-step",
            RegMode::Off => "off",
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "penalty" => Ok(RegMode::Penalty),
            "adversarial-step" | "adversarial_step" => Ok(RegMode::AdversarialStep),
            "off" | "false" => Ok(RegMode::Off),
            other => Err(format!(
                "unknown msgr mode {other:?} (expected penalty, adversarial-step, off)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    pub p: NormOrder,
    pub sigma: f64,
    pub targets: Vec<Target>,
    pub mode: RegMode,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            p: NormOrder::Two,
            sigma: 1e-2,
            targets: vec![Target::Input, Target::C2, Target::C3],
            mode: RegMode::Penalty,
        }
    }
}

impl RegularizerConfig {
    pub fn off() -> Self {
        RegularizerConfig {
            mode: RegMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            errs.push(format!("msgr.sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.mode != RegMode::Off && self.targets.is_empty() {
            errs.push("msgr.targets must be nonempty when the regularizer is enabled".into());
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            errs.push("msgr.targets contains duplicates".into());
        }
        if self.mode == RegMode::AdversarialStep && self.targets != [Target::Input] {
            errs.push("msgr.mode=adversarial-step perturbs the input only; set msgr.targets=[\"input\"]".into());
        }
        errs
    }
}

/// Penalty node plus the per-target gradient norms it was built from.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub value: Var,
    /// `||dL/dt||_{p*}` per target, in target order.
    pub grad_norms: Vec<f64>,
}

/// Differentiable dual norm of `g`.
///
/// The 2-norm is `s / sqrt(s + 1e-12)` with `s = sum g^2`: smooth at zero,
/// exactly zero there, and within `1e-12 / (2 s)` relative of `sqrt(s)`. The inf-norm picks `|g_j|` at the first maximizer
/// through a constant one-hot mask, so its derivative is the subgradient that
/// flows to that coordinate.
pub fn dual_norm_var(tape: &mut Tape, g: Var, dual: NormOrder) -> Result<Var> {
    Ok(match dual {
        NormOrder::Two => {
            let sq = tape.mul(g, g)?;
            let s = tape.sum(sq)?;
            let shifted = tape.add_const(s, L2_SMOOTHING)?;
            let r = tape.sqrt(shifted)?;
            let inv = tape.recip(r)?;
            tape.mul(s, inv)?
        }
        NormOrder::One => {
            let a = tape.abs(g)?;
            tape.sum(a)?
        }
        NormOrder::Inf => {
            let value = tape.value(g);
            let j = argmax_abs(value.data());
            let mut mask = vec![0.0; value.numel()];
            mask[j] = 1.0;
            let mask = tape.constant(Tensor::from_shape(value.shape().clone(), mask)?);
            let a = tape.abs(g)?;
            let picked = tape.mul(a, mask)?;
            tape.sum(picked)?
        }
    })
}

/// `sigma * sum_t ||dL/dt||_{p*}` with the derivative graph recorded, so the
/// result can be differentiated with respect to the parameters.
pub fn penalty(
    tape: &mut Tape,
    loss: Var,
    targets: &[Var],
    p: NormOrder,
    sigma: f64,
) -> Result<PenaltyTerm> {
    if targets.is_empty() {
        return Err(contract("penalty needs at least one target"));
    }
    let grads = tape.grad_graph(loss, targets)?;
    let mut norms = Vec::with_capacity(grads.len());
    let mut total: Option<Var> = None;
    for g in grads {
        let n = dual_norm_var(tape, g, p.dual())?;
        norms.push(tape.value(n).item());
        total = Some(match total {
            None => n,
            Some(t) => tape.add(t, n)?,
        });
    }
    let value = tape.scale(total.expect("nonempty"), sigma)?;
    Ok(PenaltyTerm {
        value,
        grad_norms: norms,
    })
}

/// Perturbed input `x + e` with `e` the worst case for the given input
/// gradient.
pub fn perturb_input(
    x: &Tensor,
    grad: &Tensor,
    p: NormOrder,
    sigma: f64,
) -> Result<(Tensor, PerturbationResult)> {
    let r = worst_case_perturbation(grad, p, sigma)?;
    let shifted = crate::tensor::kernels::add(x, &r.epsilon)?;
    Ok((shifted, r))
}

/// One adversarial-training step on a tensor -> scalar loss: the input
/// gradient of `loss` at `x`, the closed-form perturbation, and the loss
/// re-evaluated at `x + e`.
pub fn adversarial_step<F>(
    x: &Tensor,
    p: NormOrder,
    sigma: f64,
    loss: F,
) -> Result<AdversarialOutcome>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = loss(&mut tape, xv)?;
    let clean = tape.value(l).item();
    let g = tape.grad(l, &[xv])?.remove(0);
    let (shifted, perturbation) = perturb_input(x, &g, p, sigma)?;
    let mut tape = Tape::new();
    let sv = tape.constant(shifted.clone());
    let l = loss(&mut tape, sv)?;
    Ok(AdversarialOutcome {
        clean_loss: clean,
        perturbed_loss: tape.value(l).item(),
        perturbed_input: shifted,
        perturbation,
    })
}

#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub clean_loss: f64,
    pub perturbed_loss: f64,
    pub perturbed_input: Tensor,
    pub perturbation: PerturbationResult,
}

/// Result of comparing an end-to-end gradient with the composition of
/// per-stage vector-Jacobian products.
#[derive(Debug, Clone)]
pub struct ChainReport {
    pub max_rel_error: f64,
    /// Error at each stage boundary, from the loss end back to the input.
    pub per_stage: Vec<(String, f64)>,
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        a.max_abs_diff(b) / scale
    }
}

/// A stage of a sequential pipeline: maps its input node to its output node.
pub type Stage<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

/// Chain-rule check for a sequential pipeline whose last stage yields a
/// scalar. Each stage is re-run on its own tape with its input as the only
/// leaf; the vector-Jacobian products are then chained from the loss back to
/// the input.
pub fn chain_rule_consistency(stages: &[(&str, Stage)], input: &Tensor) -> Result<ChainReport> {
    if stages.is_empty() {
        return Err(contract("chain needs at least one stage"));
    }
    // End to end, keeping every boundary.
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let mut bounds = vec![x];
    for (_, s) in stages {
        let next = s(&mut tape, *bounds.last().expect("nonempty"))?;
        bounds.push(next);
    }
    let root = *bounds.last().expect("nonempty");
    let full = tape.grad(root, &bounds[..stages.len()])?;

    let mut values: Vec<Tensor> = bounds.iter().map(|&b| tape.value(b).clone()).collect();
    let mut upstream = Tensor::scalar(1.0);
    let mut per_stage = Vec::new();
    for (i, (name, s)) in stages.iter().enumerate().rev() {
        upstream = vjp(|t, v| s(t, v), &values[i], &upstream)?;
        per_stage.push((name.to_string(), rel_error(&upstream, &full[i])));
    }
    values.clear();
    let max_rel_error = per_stage.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(ChainReport {
        max_rel_error,
        per_stage,
    })
}

/// `J^T w` for `f` at `x`, by reverse mode on `sum(f(x) * w)`.
fn vjp<F>(f: F, x: &Tensor, w: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let wv = tape.constant(w.clone());
    let yw = tape.mul(y, wv)?;
    let s = tape.sum(yw)?;
    Ok(tape.grad(s, &[xv])?.remove(0))
}

/// Loss on top of a forward pass: `(tape, embedding, logits) -> scalar`.
pub type HeadLoss<'a> = dyn Fn(&mut Tape, Var, Var) -> Result<Var> + 'a;

/// Chain-rule check on the network. The backbone stages `x -> C2 -> .. -> C5`
/// are chained; everything after the backbone reads all four stage outputs,
/// so the total gradient at `C_k` is the head's partial derivative plus the
/// pullback from `C_{k+1}`. Batch statistics are used without updating
/// running averages.
pub fn model_chain_rule_consistency(
    model: &MsflModel,
    images: &Tensor,
    loss: &HeadLoss,
) -> Result<ChainReport> {
    let net = &model.net;
    let mut store = model.store.clone();

    // End to end.
    let mut tape = Tape::new();
    let (c_vals, full) = {
        let mut f = Forward::new(&mut tape, &mut store, Mode::Train).without_stat_updates();
        let x = f.tape.leaf(images.clone());
        let out = net.forward_var(&mut f, x)?;
        let l = loss(f.tape, out.embedding, out.logits)?;
        let c = out.features.c;
        let wrt = [x, c[0], c[1], c[2], c[3]];
        let grads = f.tape.grad(l, &wrt)?;
        let vals: Vec<Tensor> = c.iter().map(|&v| f.tape.value(v).clone()).collect();
        (vals, grads)
    };

    // Partial derivatives of the head with every stage output held as an
    // independent leaf.
    let head = {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut store, Mode::Train).without_stat_updates();
        let c = [0, 1, 2, 3].map(|i| f.tape.leaf(c_vals[i].clone()));
        let (e, lg, _, _) = net.head_from_stages(&mut f, &c)?;
        let l = loss(f.tape, e, lg)?;
        f.tape.grad(l, &c)?
    };

    let mut per_stage = Vec::new();
    let mut total = head[3].clone();
    per_stage.push(("c5".to_string(), rel_error(&total, &full[4])));
    for k in (0..4).rev() {
        let input = if k == 0 { images } else { &c_vals[k - 1] };
        let pulled = vjp(
            |t, v| {
                let mut s = store.clone();
                let mut f = Forward::new(t, &mut s, Mode::Train).without_stat_updates();
                net.backbone_stage(&mut f, k, v)
            },
            input,
            &total,
        )?;
        if k == 0 {
            total = pulled;
            per_stage.push(("input".to_string(), rel_error(&total, &full[0])));
        } else {
            total = crate::tensor::kernels::add(&head[k - 1], &pulled)?;
            per_stage.push((format!("c{}", k + 1), rel_error(&total, &full[k])));
        }
    }
    let max_rel_error = per_stage.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(ChainReport {
        max_rel_error,
        per_stage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::tensor::kernels::ConvGeometry;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn duals() {
        assert_eq!(dual_exponent(NormOrder::Two), NormOrder::Two);
        assert_eq!(dual_exponent(NormOrder::Inf), NormOrder::One);
        assert_eq!(dual_exponent(NormOrder::One), NormOrder::Inf);
        assert_eq!("inf".parse::<NormOrder>().unwrap(), NormOrder::Inf);
        assert!("3".parse::<NormOrder>().is_err());
    }

    #[test]
    fn closed_form_examples() {
        let r = worst_case_perturbation(&t(&[3.0, 4.0]), NormOrder::Two, 0.1).unwrap();
        assert!(r.epsilon.max_abs_diff(&t(&[0.06, 0.08])) < 1e-15);
        assert!((r.attained - 0.5).abs() < 1e-15);

        let r = worst_case_perturbation(&t(&[3.0, -4.0]), NormOrder::Inf, 0.1).unwrap();
        assert_eq!(r.epsilon.data(), &[0.1, -0.1]);
        assert!((r.attained - 0.7).abs() < 1e-15);

        let r = worst_case_perturbation(&t(&[3.0, -4.0]), NormOrder::One, 0.1).unwrap();
        assert_eq!(r.epsilon.data(), &[0.0, -0.1]);
        assert!((r.attained - 0.4).abs() < 1e-15);

        let r = worst_case_perturbation(&t(&[2.0, -2.0]), NormOrder::One, 1.0).unwrap();
        assert_eq!(r.epsilon.data(), &[1.0, 0.0], "tie goes to the lowest index");

        let r = worst_case_perturbation(&t(&[0.0, 0.0]), NormOrder::Two, 0.1).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.attained, 0.0);
    }

    #[test]
    fn tightness_constraint_and_homogeneity() {
        for seed in 0..200 {
            let g = random(&[1 + seed as usize % 40], seed);
            for p in NormOrder::ALL {
                let r = worst_case_perturbation(&g, p, 0.3).unwrap();
                let bound = 0.3 * p.dual().of(&g);
                assert!((r.attained - bound).abs() <= 1e-10 * bound);
                assert!((p.of(&r.epsilon) - 0.3).abs() <= 1e-9 * 0.3);
                let scaled = worst_case_perturbation(&g.map(|v| 7.5 * v), p, 0.3).unwrap();
                assert!(scaled.epsilon.max_abs_diff(&r.epsilon) <= 1e-15);
            }
        }
    }

    #[test]
    fn oracle_is_dominated_and_close() {
        for seed in 0..20 {
            let g = random(&[2 + seed as usize * 3], 100 + seed);
            for p in NormOrder::ALL {
                let closed = worst_case_perturbation(&g, p, 0.1).unwrap();
                let o = perturbation_oracle(&g, p, 0.1, 10_000, seed).unwrap();
                assert!(o.attained <= closed.attained * (1.0 + 1e-12));
                assert!(p.of(&o.epsilon) <= 0.1 * (1.0 + 1e-12));
                let gap = (closed.attained - o.attained) / closed.attained;
                assert!(gap < 1e-3, "p={p} dim={} gap {gap}", g.numel());
                if p == NormOrder::Inf {
                    assert_eq!(o.epsilon, closed.epsilon);
                }
            }
        }
        let o = perturbation_oracle(&t(&[0.0; 5]), NormOrder::Two, 0.1, 10_000, 0).unwrap();
        assert_eq!(o.attained, 0.0);
    }

    #[test]
    fn penalty_analytic_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let pen = penalty(&mut tape, l, &[x], NormOrder::Two, 0.01).unwrap();
        let v = tape.value(pen.value).item();
        assert!((v - 0.01 * 20f64.sqrt()).abs() < 1e-12, "{v}");
        assert!((pen.grad_norms[0] - 20f64.sqrt()).abs() < 1e-9);

        // Each dual norm of [2, 4].
        for (p, want) in [(NormOrder::Inf, 6.0), (NormOrder::One, 4.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1.0, 2.0]));
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            let pen = penalty(&mut tape, l, &[x], p, 1.0).unwrap();
            assert!((tape.value(pen.value).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_penalty() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        let c = tape.constant(t(&[0.0, 0.0]));
        let m = tape.mul(x, c).unwrap();
        let l = tape.sum(m).unwrap();
        for p in NormOrder::ALL {
            let pen = penalty(&mut tape, l, &[x], p, 0.5).unwrap();
            assert_eq!(tape.value(pen.value).item(), 0.0);
        }
    }

    #[test]
    fn zero_sigma_leaves_gradient_bit_exact() {
        let w0 = random(&[3, 2, 3, 3], 1);
        let x0 = random(&[2, 2, 5, 5], 2);
        let grads = |with_penalty: bool| {
            let mut tape = Tape::new();
            let w = tape.leaf(w0.clone());
            let x = tape.leaf(x0.clone());
            let y = tape.conv2d(x, w, ConvGeometry::new(1, 1)).unwrap();
            let r = tape.relu(y).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let base = tape.sum(sq).unwrap();
            let total = if with_penalty {
                let pen = penalty(&mut tape, base, &[x], NormOrder::Two, 0.0).unwrap();
                tape.add(base, pen.value).unwrap()
            } else {
                base
            };
            (tape.value(total).clone(), tape.grad(total, &[w]).unwrap().remove(0))
        };
        let (l0, g0) = grads(false);
        let (l1, g1) = grads(true);
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        use crate::autodiff::GradCheck;
        let x0 = random(&[2, 2, 6, 6], 3);
        let w1 = random(&[3, 2, 3, 3], 4);
        for p in NormOrder::ALL {
            let f = |tape: &mut Tape, w: Var| -> Result<Var> {
                let x = tape.leaf(x0.clone());
                let k = tape.constant(w1.clone());
                let h = tape.conv2d(x, w, ConvGeometry::new(1, 1))?;
                let h = tape.scale(h, 0.3)?;
                let h = tape.exp(h)?;
                let y = tape.conv2d(h, k, ConvGeometry::new(2, 1))?;
                let y2 = tape.mul(y, y)?;
                let l = tape.sum(y2)?;
                Ok(penalty(tape, l, &[x], p, 0.5)?.value)
            };
            let r = GradCheck::new(1e-5).run(f, &random(&[2, 2, 3, 3], 5)).unwrap();
            assert!(r.passed, "p={p}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn adversarial_step_contract() {
        let w = random(&[6], 6);
        let loss = |tape: &mut Tape, x: Var| -> Result<Var> {
            let wv = tape.constant(w.clone());
            let m = tape.mul(x, wv)?;
            let e = tape.exp(m)?;
            Ok(tape.sum(e)?)
        };
        let x = random(&[6], 7);
        let zero = adversarial_step(&x, NormOrder::Two, 0.0, loss).unwrap();
        assert_eq!(zero.clean_loss, zero.perturbed_loss);
        for p in NormOrder::ALL {
            let s = adversarial_step(&x, p, 1e-3, loss).unwrap();
            assert!(s.perturbed_loss >= s.clean_loss);
            let diff = crate::tensor::kernels::sub(&s.perturbed_input, &x).unwrap();
            assert!((p.of(&diff) - 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rule_linear_pipeline_is_exact() {
        let a = random(&[3, 4], 8);
        let b = random(&[4, 2], 9);
        let stages: Vec<(&str, Stage)> = vec![
            ("s1", Box::new(|t: &mut Tape, x: Var| {
                let a = t.constant(a.clone());
                Ok(t.matmul(x, a)?)
            })),
            ("s2", Box::new(|t: &mut Tape, x: Var| {
                let b = t.constant(b.clone());
                Ok(t.matmul(x, b)?)
            })),
            ("loss", Box::new(|t: &mut Tape, x: Var| Ok(t.sum(x)?))),
        ];
        let r = chain_rule_consistency(&stages, &random(&[5, 3], 10)).unwrap();
        assert!(r.max_rel_error < 1e-15, "{r:?}");
        assert_eq!(r.per_stage.len(), 3);
    }

    #[test]
    fn chain_rule_on_the_network() {
        let cfg = ModelConfig {
            input_height: 32,
            input_width: 32,
            stem_width: 4,
            stage_widths: [4, 8, 8, 8],
            lateral_width: 4,
            embedding_dim: 6,
            ..ModelConfig::desk(3)
        };
        let m = MsflModel::new(cfg, 1).unwrap();
        let probe = random(&[2, 3], 11);
        let loss = |t: &mut Tape, _e: Var, l: Var| -> Result<Var> {
            let w = t.constant(probe.clone());
            let m = t.mul(l, w)?;
            Ok(t.sum(m)?)
        };
        let r = model_chain_rule_consistency(&m, &random(&[2, 3, 32, 32], 12), &loss).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let names: Vec<&str> = r.per_stage.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["c5", "c4", "c3", "c2", "input"]);
    }
}

//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
///
/// `max_rel_error` is the largest absolute coordinate discrepancy divided by
/// the larger infinity-norm of the two gradients, over the smooth
/// coordinates only.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates where the one-sided differences disagree, i.e. the
    /// perturbation crosses a kink. Excluded from the error.
    pub nonsmooth: Vec<usize>,
    pub non_finite: bool,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn is_nonsmooth_point(&self) -> bool {
        !self.nonsmooth.is_empty()
    }
}

/// Configurable finite-difference check of a `Tensor -> scalar` function
/// built on a fresh tape.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Threshold on |forward difference - backward difference| (scaled by
    /// max(1, |central|)) above which a coordinate is treated as a kink.
    pub kink_threshold: f64,
    /// Restrict the check to these flat coordinates.
    pub coords: Option<Vec<usize>>,
}

impl GradCheck {
    pub fn new(tolerance: f64) -> Self {
        GradCheck {
            step: 1e-5,
            tolerance,
            kink_threshold: 1e-3,
            coords: None,
        }
    }

    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = Some(coords);
        self
    }

    /// `f` may fail with any error convertible to the crate error; non-finite
    /// failures become a failed report rather than an error.
    pub fn run<F, E>(&self, f: F, input: &Tensor) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
        E: Into<Error>,
    {
        let f = |t: &mut Tape, v: Var| f(t, v).map_err(Into::into);
        let eval = |x: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let out = f(&mut tape, v)?;
            Ok(tape.value(out).item())
        };

        let (f0, analytic) = {
            let mut tape = Tape::new();
            let v = tape.leaf(input.clone());
            let out = match f(&mut tape, v) {
                Ok(o) => o,
                Err(e) if e.is_non_finite() => return Ok(self.non_finite_report()),
                Err(e) => return Err(e),
            };
            let grad = match tape.grad(out, &[v]).map_err(Error::from) {
                Ok(mut g) => g.remove(0),
                Err(e) if e.is_non_finite() => return Ok(self.non_finite_report()),
                Err(e) => return Err(e),
            };
            (tape.value(out).item(), grad)
        };

        let coords: Vec<usize> = match &self.coords {
            Some(c) => c.clone(),
            None => (0..input.numel()).collect(),
        };
        let mut base = input.clone().into_vec();
        let mut numeric = Vec::with_capacity(coords.len());
        let mut analytic_sel = Vec::with_capacity(coords.len());
        let mut nonsmooth = Vec::new();
        let mut non_finite = !f0.is_finite();
        for &i in &coords {
            let orig = base[i];
            base[i] = orig + self.step;
            let plus = eval(&Tensor::new(input.dims().to_vec(), base.clone())?);
            base[i] = orig - self.step;
            let minus = eval(&Tensor::new(input.dims().to_vec(), base.clone())?);
            base[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) if e.is_non_finite() => {
                    non_finite = true;
                    (f64::NAN, f64::NAN)
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let central = (plus - minus) / (2.0 * self.step);
            let forward = (plus - f0) / self.step;
            let backward = (f0 - minus) / self.step;
            if !central.is_finite() {
                non_finite = true;
            }
            if (forward - backward).abs() > self.kink_threshold * central.abs().max(1.0) {
                nonsmooth.push(i);
            }
            numeric.push(central);
            analytic_sel.push(analytic.data()[i]);
        }

        let smooth: Vec<(f64, f64)> = coords
            .iter()
            .zip(analytic_sel.iter().zip(&numeric))
            .filter(|(i, _)| !nonsmooth.contains(i))
            .map(|(_, (a, n))| (*a, *n))
            .collect();
        let scale = smooth
            .iter()
            .fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()))
            .max(1e-12);
        let max_rel_error = smooth
            .iter()
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max);
        let non_finite = non_finite || !max_rel_error.is_finite();
        Ok(GradCheckReport {
            max_rel_error,
            tolerance: self.tolerance,
            passed: !non_finite && max_rel_error <= self.tolerance,
            nonsmooth,
            non_finite,
            checked: smooth.len(),
            analytic: analytic_sel,
            numeric,
        })
    }

    fn non_finite_report(&self) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            tolerance: self.tolerance,
            passed: false,
            nonsmooth: Vec::new(),
            non_finite: true,
            checked: 0,
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }
}

/// Check `f` at `input` over every coordinate.
pub fn grad_check<F, E>(f: F, input: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: Into<Error>,
{
    GradCheck::new(tolerance).run(f, input)
}

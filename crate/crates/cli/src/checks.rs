use msfl_core::msgr::NormOrder;
use msfl_core::verify::{self, CheckLine};

use crate::{Failure, Outcome, Scope};

fn print_lines(title: &str, lines: &[CheckLine]) -> usize {
    println!("{title}");
    for l in lines {
        println!(
            "  {:<4} {:<58} {:>10.3e}  (tol {:.0e})",
            if l.passed { "ok" } else { "FAIL" },
            l.name,
            l.error,
            l.tolerance
        );
    }
    lines.iter().filter(|l| !l.passed).count()
}

pub fn grad_check(scope: Scope) -> Outcome {
    let all = scope == Scope::All;
    let mut failed = 0;
    if all || scope == Scope::Layers {
        failed += print_lines("layers", &verify::layer_suite()?);
    }
    if all || scope == Scope::Model {
        failed += print_lines("full model", &verify::model_suite()?);
    }
    if all || scope == Scope::Msgr {
        println!("toy model: {} parameters", verify::toy_model_parameter_count()?);
        failed += print_lines("penalty through double backward", &verify::penalty_suite()?);
    }
    if all || scope == Scope::Chain {
        failed += print_lines("stagewise chain rule", &verify::chain_suite()?);
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks exceeded their tolerance")));
    }
    Ok(())
}

/// Relative shortfall of the oracle allowed for `p = inf`, where the search
/// should reach the vertex `sigma * sign(g)`.
const INF_ORACLE_GAP: f64 = 1e-3;

pub fn oracle_check(trials: usize, max_dim: usize, samples: usize, seed: u64) -> Outcome {
    if max_dim == 0 || max_dim > msfl_core::msgr::ORACLE_MAX_DIM {
        return Err(Failure::Invalid(anyhow::anyhow!(
            "--max-dim must be in 1..={}",
            msfl_core::msgr::ORACLE_MAX_DIM
        )));
    }
    let rows = verify::oracle_suite(trials, max_dim, samples, seed)?;
    println!(
        "{:<4} {:>7} {:>10} {:>13} {:>11} {:>11}",
        "p", "trials", "dominated", "tightness", "oracle gap", "degenerate"
    );
    let mut ok = true;
    for r in &rows {
        let gap_ok = r.p != NormOrder::Inf || r.max_oracle_gap <= INF_ORACLE_GAP;
        ok &= r.passed() && gap_ok;
        println!(
            "{:<4} {:>7} {:>10} {:>13.2e} {:>11.2e} {:>11}",
            r.p.to_string(),
            r.trials,
            r.dominated,
            r.max_tightness_error,
            r.max_oracle_gap,
            r.degenerate
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("closed form was beaten or not tight".into()))
    }
}

//! Finite-difference verification of the analytic gradients, family by
//! family, on tiny fixed-seed instances.
//!
//! The checked loss is evaluated through the public forward/loss path while
//! the analytic gradients come from the backward pass, so the two routes
//! are independent down to the layer primitives. Instances whose
//! combination layer has near-tied pre-kWTA entries (or near-tied gate
//! probabilities) are redrawn: central differences straddle the selection
//! boundary there and neither side is wrong.

use crate::ensemble::{EnsembleModel, Family};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

/// Central-difference step, chosen for f64 losses of order one.
pub const FD_STEP: f64 = 1e-6;

/// Pass threshold on the worst relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Minimum separation demanded between competing entries before a
/// perturbation of size [`FD_STEP`] is trusted not to flip the selection.
const TIE_MARGIN: f64 = 1e-3;

/// Relative-error denominator floor: below this magnitude the comparison
/// degrades to an absolute one, which keeps finite-difference noise
/// (about 1e-10 here) from failing healthy near-zero gradients.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    /// Parameter block, e.g. "subnet1.w2" or "combiner.wz".
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub family: Family,
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub worst: Option<WorstEntry>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "family={:<11} entries={:<4} max_rel_err={:.3e} {}",
            self.family.tag(),
            self.entries_checked,
            self.max_rel_err,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &self.worst {
            if !self.passed {
                write!(
                    f,
                    "  worst: {}[{},{}] analytic={:.6e} numeric={:.6e}",
                    w.param, w.row, w.col, w.analytic, w.numeric
                )?;
            }
        }
        Ok(())
    }
}

struct Instance {
    model: EnsembleModel<f64>,
    x: Matrix<f64>,
    labels: Vec<usize>,
}

/// Draw a 3-input / 4-hidden / 3-class / M=2 instance on a batch of 3,
/// redrawing until the competitive selections sit safely away from ties.
fn draw_instance(family: Family, seed: u64) -> Result<Instance> {
    const IN: usize = 3;
    const HIDDEN: usize = 4;
    const OUT: usize = 3;
    const M: usize = 2;
    const BATCH: usize = 3;

    for attempt in 0..64 {
        let mut rng = Rng::with_stream(seed, attempt);
        let model = EnsembleModel::init(family, &mut rng, IN, HIDDEN, OUT, M, 0.75, 0)?;
        let x: Matrix<f64> = rng.uniform(-1.0, 1.0, BATCH, IN)?;
        let labels: Vec<usize> = (0..BATCH).map(|i| i % OUT).collect();

        if selection_margins_ok(&model, &x)? {
            return Ok(Instance { model, x, labels });
        }
    }
    Err(Error::Domain(format!(
        "could not draw a tie-free {family} instance in 64 attempts"
    )))
}

/// Reject instances whose kWTA pre-activation rows have two entries within
/// [`TIE_MARGIN`] of each other, or whose gate rows have a top-2 gap below
/// it.
fn selection_margins_ok(model: &EnsembleModel<f64>, x: &Matrix<f64>) -> Result<bool> {
    let out = model.forward(x, 0)?;
    match model.family() {
        Family::KwtaEnn => {
            // Recover the pre-kWTA rows from the combiner input.
            let comb = model.combiner.as_ref().expect("kwta combiner");
            let yhat = out
                .subnet_probs
                .iter()
                .collect::<Vec<_>>();
            let yhat = Matrix::concat_cols(&yhat)?;
            let z = crate::nn::affine(&yhat, &comb.wz.value, &comb.bz.value)?;
            for r in 0..z.rows() {
                let row = z.row(r);
                for a in 0..row.len() {
                    for b in a + 1..row.len() {
                        if (row[a] - row[b]).abs() < TIE_MARGIN {
                            return Ok(false);
                        }
                    }
                }
            }
            Ok(true)
        }
        Family::MoE => {
            let gate = out.gate_probs.as_ref().expect("moe gate output");
            for r in 0..gate.rows() {
                let row = gate.row(r);
                let mut sorted = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] < TIE_MARGIN {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        _ => Ok(true),
    }
}

/// The scalar objective whose exact gradient the backward pass populates.
/// For the independent family that is the *sum* of the members' own
/// losses (each member trains on its own cross-entropy, unscaled); the
/// gradients stay disjoint, so one finite-difference probe covers all of
/// them. Every other family differentiates its reported loss directly.
fn fd_objective(model: &EnsembleModel<f64>, x: &Matrix<f64>, labels: &[usize]) -> Result<f64> {
    let out = model.forward(x, 0)?;
    match model.family() {
        Family::Independent => {
            let mut total = 0.0;
            for probs in &out.subnet_probs {
                total += crate::nn::cross_entropy(probs, labels)?;
            }
            Ok(total)
        }
        _ => model.loss(&out, labels),
    }
}

/// Named view over every parameter block of a model.
fn block_names(model: &EnsembleModel<f64>) -> Vec<String> {
    let mut names = Vec::new();
    for m in 0..model.subnet_count() {
        for p in ["w1", "b1", "w2", "b2"] {
            names.push(format!("subnet{m}.{p}"));
        }
    }
    if model.gate.is_some() {
        for p in ["w1", "b1", "w2", "b2"] {
            names.push(format!("gate.{p}"));
        }
    }
    if model.combiner.is_some() {
        names.push("combiner.wz".into());
        names.push("combiner.bz".into());
    }
    names
}

/// Run the finite-difference check for one family.
pub fn check_family(family: Family, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    check_family_with_grad_perturbation(family, tolerance, seed, 1.0)
}

/// Harness entry that additionally scales the analytic gradients, used by
/// the mutation test that proves the checker notices a wrong backward
/// pass. `scale == 1.0` is the honest check.
#[doc(hidden)]
pub fn check_family_with_grad_perturbation(
    family: Family,
    tolerance: f64,
    seed: u64,
    scale: f64,
) -> Result<GradCheckReport> {
    let Instance {
        mut model,
        x,
        labels,
    } = draw_instance(family, seed)?;

    // Analytic gradients via the backward pass.
    let out = model.forward(&x, 0)?;
    let loss0 = model.loss(&out, &labels)?;
    let loss_b = model.backward(&out, &labels)?;
    debug_assert!((loss0 - loss_b).abs() < 1e-12);
    let analytic: Vec<Matrix<f64>> = {
        let params = model.params_mut();
        params.iter().map(|p| p.grad.scaled(scale)).collect()
    };
    let names = block_names(&model);

    // Numeric gradients by central differences through the pure loss path.
    let mut max_rel_err: f64 = 0.0;
    let mut entries_checked = 0usize;
    let mut worst: Option<WorstEntry> = None;

    let block_count = analytic.len();
    for bi in 0..block_count {
        let (rows, cols) = analytic[bi].shape();
        for r in 0..rows {
            for c in 0..cols {
                let numeric = {
                    let mut probe = |delta: f64| -> Result<f64> {
                        let mut params = model.params_mut();
                        let old = params[bi].value.get(r, c);
                        params[bi].value.set(r, c, old + delta);
                        drop(params);
                        let loss = fd_objective(&model, &x, &labels)?;
                        let mut params = model.params_mut();
                        params[bi].value.set(r, c, old);
                        Ok(loss)
                    };
                    (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP)
                };
                let a = analytic[bi].get(r, c);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                entries_checked += 1;
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst = Some(WorstEntry {
                        param: names[bi].clone(),
                        row: r,
                        col: c,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
    }

    Ok(GradCheckReport {
        family,
        max_rel_err,
        entries_checked,
        worst,
        passed: max_rel_err < tolerance,
    })
}

/// Check all four families at the default tolerance.
pub fn check_all(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    [
        Family::Independent,
        Family::Cooperative,
        Family::MoE,
        Family::KwtaEnn,
    ]
    .into_iter()
    .map(|family| check_family(family, tolerance, 7))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_families_pass_at_default_tolerance() {
        for report in check_all(DEFAULT_TOLERANCE).unwrap() {
            assert!(report.passed, "{report}");
            assert!(report.entries_checked > 0);
        }
    }

    #[test]
    fn kwta_composite_check_holds_across_seeds() {
        for seed in [1u64, 2, 3, 11, 19] {
            let report = check_family(Family::KwtaEnn, DEFAULT_TOLERANCE, seed).unwrap();
            assert!(report.passed, "seed {seed}: {report}");
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // A one-percent scale error on the analytic gradients must blow
        // well past the tolerance.
        let report =
            check_family_with_grad_perturbation(Family::KwtaEnn, DEFAULT_TOLERANCE, 7, 1.01)
                .unwrap();
        assert!(!report.passed, "{report}");
        let worst = report.worst.unwrap();
        assert!(!worst.param.is_empty());
    }
}

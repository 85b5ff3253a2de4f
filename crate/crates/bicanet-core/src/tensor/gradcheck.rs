//! Finite-difference verification of tape gradients.
//!
//! Central differences on the tape's f64 replay path, compared against the
//! analytic f32 backward pass. The f64 shadow keeps truncation noise well
//! below the pass threshold at eps = 1e-3.

use super::tape::{Gradients, Tape, ValueId};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entry index where the worst relative error occurred.
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `leaf` against central finite differences
/// of `loss`, perturbing each checked entry by `eps` on the f64 replay path.
///
/// `sample` restricts the check to the given entry indices; `None` checks
/// every entry. Entries that agree to within 1e-6 absolutely, or whose
/// magnitudes both sit below 1e-5, are counted as matching without a
/// relative-error contribution.
pub fn check_gradient(
    tape: &Tape,
    loss: ValueId,
    leaf: ValueId,
    grads: &Gradients,
    eps: f64,
    sample: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let analytic = grads.get(leaf).ok_or_else(|| {
        Error::InvalidArgument("leaf has no gradient (was it recorded with requires_grad?)".into())
    })?;
    let base = tape.value(leaf).to_f64();
    let all: Vec<usize>;
    let indices: &[usize] = match sample {
        Some(s) => s,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
    };
    let mut perturbed = base.clone();
    for &i in indices {
        perturbed[i] = base[i] + eps;
        let plus = tape.replay_f64(&[(leaf, &perturbed)], loss)[0];
        perturbed[i] = base[i] - eps;
        let minus = tape.replay_f64(&[(leaf, &perturbed)], loss)[0];
        perturbed[i] = base[i];

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i] as f64;
        let abs = (a - numeric).abs();
        if abs > report.max_abs_err {
            report.max_abs_err = abs;
        }
        // Entries agreeing to within f32 noise pass outright; the relative
        // test is meaningless below that floor.
        let denom = a.abs().max(numeric.abs());
        if abs > 1e-6 && denom >= 1e-5 {
            let rel = abs / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

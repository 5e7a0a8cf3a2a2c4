//! Central-finite-difference verification of tape gradients.

use super::{Element, Tape, Tensor};
use crate::error::{CapError, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub tol: f64,
    pub passed: bool,
    pub tape_grad: Vec<f64>,
    pub fd_grad: Vec<f64>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (coord {}) vs tol {:.1e}",
            if self.passed { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_coord,
            self.tol
        )
    }
}

/// Error denominator floor: coordinates with sub-unit gradient magnitude
/// are held to the absolute form of the same tolerance, since central
/// differences carry absolute roundoff noise scaled by |f|, not |g|.
const REL_FLOOR: f64 = 1.0;

/// Compare the tape gradient of a scalar-valued `f` at `point` against
/// central finite differences (f(x+h)-f(x-h))/2h, per coordinate.
///
/// `f` must be deterministic; it is evaluated twice and the check aborts if
/// the two values differ bitwise.
pub fn grad_check<E, F>(f: F, point: &Tensor<E>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &Tensor<E>) -> Result<Tensor<E>>,
{
    let probe = point.detach();
    let v1 = eval_scalar(&f, &probe)?;
    let v2 = eval_scalar(&f, &probe)?;
    if v1.to_f64().to_bits() != v2.to_f64().to_bits() {
        return Err(CapError::NonDeterministic(format!(
            "two evaluations returned {} and {}",
            v1, v2
        )));
    }

    // Tape gradient at the point.
    let x = point.detach();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let loss = f(&tape, &x)?;
    if loss.len() != 1 {
        return Err(CapError::NonScalarLoss(loss.dims().to_vec()));
    }
    tape.backward(&loss)?;
    let tape_grad: Vec<f64> = x
        .grad()
        .unwrap_or_else(|| vec![E::ZERO; x.len()])
        .iter()
        .map(|g| g.to_f64())
        .collect();

    // Finite differences, one coordinate at a time.
    let base = point.to_vec();
    let mut fd_grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = E::from_f64(plus[i].to_f64() + h);
        let mut minus = base.clone();
        minus[i] = E::from_f64(minus[i].to_f64() - h);
        let fp = eval_scalar(&f, &Tensor::new(point.dims().to_vec(), plus)?)?;
        let fm = eval_scalar(&f, &Tensor::new(point.dims().to_vec(), minus)?)?;
        fd_grad[i] = (fp.to_f64() - fm.to_f64()) / (2.0 * h);
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    for (i, (&a, &b)) in tape_grad.iter().zip(&fd_grad).enumerate() {
        let denom = a.abs().max(b.abs()).max(REL_FLOOR);
        let rel = (a - b).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_coord,
        tol,
        passed: max_rel_err < tol,
        tape_grad,
        fd_grad,
    })
}

fn eval_scalar<E, F>(f: &F, x: &Tensor<E>) -> Result<E>
where
    E: Element,
    F: Fn(&Tape<E>, &Tensor<E>) -> Result<Tensor<E>>,
{
    let tape = Tape::inference();
    let out = f(&tape, x)?;
    if out.len() != 1 {
        return Err(CapError::NonScalarLoss(out.dims().to_vec()));
    }
    Ok(out.item())
}

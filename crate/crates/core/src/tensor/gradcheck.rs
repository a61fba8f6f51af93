//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose `eps` stencil straddled a kink and were rechecked
    /// at a smaller step. Always empty for [`grad_check`].
    pub kinks: Vec<Kink>,
}

/// A coordinate where the one-sided slopes at `eps` disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Kink {
    pub coord: (usize, usize),
    /// Central difference at `eps`, straddling the kink.
    pub straddled: f64,
    /// Step at which the one-sided slopes agreed again, or the smallest
    /// step tried.
    pub step: f64,
    pub numeric: f64,
}

const REFINE_STEPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape with `params` registered as leaves (in
/// order) and returns the scalar loss node. It must be deterministic: any
/// randomness inside has to be reseeded identically on every call.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], eps: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    check(f, params, eps, None)
}

/// [`grad_check`] for piecewise-smooth graphs (ReLU, max pooling).
///
/// A coordinate that fails `tolerance` and whose forward and backward
/// slopes at `eps` also disagree by `tolerance` is treated as a stencil
/// straddling a kink: the step shrinks until both slopes agree within
/// `tolerance` and the central difference at that step becomes the
/// oracle. Such coordinates are listed in
/// [`GradCheckReport::kinks`]; a failing coordinate without a slope break
/// is never refined.
pub fn grad_check_piecewise<S, F>(f: F, params: &[Tensor<S>], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    check(f, params, eps, Some(tolerance))
}

fn check<S, F>(f: F, params: &[Tensor<S>], eps: f64, refine: Option<f64>) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item()?.as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    let base = tape.value(loss).item()?.as_f64();

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: Vec::new(),
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            let mut stencil = |h: f64| -> Result<(f64, f64)> {
                work[p].data_mut()[i] = orig + S::of(h);
                let up = eval(&work)?;
                work[p].data_mut()[i] = orig - S::of(h);
                let down = eval(&work)?;
                work[p].data_mut()[i] = orig;
                Ok(((up - base) / h, (base - down) / h))
            };

            let (fwd, bwd) = stencil(eps)?;
            let mut numeric = (fwd + bwd) / 2.0;
            let a = analytic[p].data()[i].as_f64();
            if let Some(tol) = refine {
                if rel(a, numeric) >= tol && rel(fwd, bwd) >= tol {
                    let straddled = numeric;
                    let mut step = eps;
                    for k in REFINE_STEPS {
                        step = eps * k;
                        let (fwd, bwd) = stencil(step)?;
                        numeric = (fwd + bwd) / 2.0;
                        if rel(fwd, bwd) < tol {
                            break;
                        }
                    }
                    report.kinks.push(Kink { coord: (p, i), straddled, step, numeric });
                }
            }
            let rel = rel(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst: (p, i), analytic: a, numeric, ..report };
            }
        }
    }
    Ok(report)
}

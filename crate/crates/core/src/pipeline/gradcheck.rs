use crate::error::Result;
use crate::numkernel::{Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms; central
/// differences at h = 1e-5 carry roundoff near 1e-11 for O(1) losses.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Analytic-versus-numeric gradient comparison, one entry per parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over entries of |analytic − numeric|, divided by the larger of
    /// the two gradients' max-norms, floored at [`GRAD_FLOOR`].
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Checks tape gradients of `loss(params)` against central differences with
/// step `h`. The closure must be deterministic and return a scalar.
pub fn grad_check<F>(loss: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.scalar_value(l))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut rel_errors = Vec::with_capacity(params.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; params[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = analytic
            .max_abs()
            .max(numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        rel_errors.push(diff / scale.max(GRAD_FLOOR));
    }
    Ok(GradCheckReport { rel_errors })
}

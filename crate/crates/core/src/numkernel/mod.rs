//! Dense linear algebra and the reverse-mode tape every trainable module
//! is built on.

mod linalg;
mod tape;
mod tensor;

pub use linalg::{cholesky, cholesky_solve, spd_inverse, spd_log_det, sym_eig_jacobi};
pub use tape::{sigmoid, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Floor applied to the variance before the square root in pooled statistics.
pub const STD_EPS: f64 = 1e-8;

/// Weighted mean and standard deviation over the time axis of a C×T map.
///
/// `weights` (length T) must be nonnegative and sum to one; `None` means
/// uniform weights. Variance is clamped at [`STD_EPS`] before the root.
pub fn mean_std_over_time(tape: &mut Tape, m: Var, weights: Option<Var>) -> Result<(Var, Var)> {
    let (c, t) = (tape.value(m).rows(), tape.value(m).cols());
    if tape.value(m).rank() != 2 || t == 0 || c == 0 {
        return Err(Error::EmptyInput("mean_std_over_time"));
    }
    let w = match weights {
        Some(w) => {
            let wv = tape.value(w);
            if wv.numel() != t {
                return Err(Error::dim(
                    "mean_std_over_time",
                    format!("{t} frames but {} weights", wv.numel()),
                ));
            }
            let total: f64 = wv.data().iter().sum();
            if wv.data().iter().any(|&a| a < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::contract("time weights must be a probability vector"));
            }
            tape.reshape(w, &[t, 1])?
        }
        None => tape.constant(Tensor::filled(&[t, 1], 1.0 / t as f64)),
    };
    let mean = tape.matmul(m, w)?;
    let mean = tape.reshape(mean, &[c])?;
    let sq = tape.mul(m, m)?;
    let ex2 = tape.matmul(sq, w)?;
    let ex2 = tape.reshape(ex2, &[c])?;
    let mean_sq = tape.mul(mean, mean)?;
    let var = tape.sub(ex2, mean_sq)?;
    let var = tape.clamp(var, STD_EPS, f64::INFINITY)?;
    let std = tape.sqrt(var)?;
    Ok((mean, std))
}

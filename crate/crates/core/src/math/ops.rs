//! Composite primitives built on the tape.

use rand::Rng;

use crate::error::{FgaError, Result};
use crate::math::{Graph, Mode, Var};

/// `W x (+ b)`; `x` may hold several inputs as columns.
pub fn linear(g: &mut Graph, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(w, x)?;
    match b {
        Some(b) => g.add_col(y, b),
        None => Ok(y),
    }
}

/// Column-wise `x / max(|x|, eps)`.
pub fn l2_normalize(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    g.normalize_cols(x, eps)
}

/// Inverted dropout. Returns `x` itself in eval mode or when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FgaError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mul_const(x, mask)
}

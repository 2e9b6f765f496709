use crate::error::Result;
use crate::tape::{Tape, Var};

/// Input-dependent SSM recurrence, run left to right.
///
/// For channel `c` and state `s`, with `h₀ = 0`:
///
/// ```text
/// h_t = exp(Δ[t,c]·A[c,s])·h_{t−1} + Δ[t,c]·B[t,s]·x[t,c]
/// y[t,c] = Σ_s C[t,s]·h_t + D[c]·x[t,c]
/// ```
///
/// `A` is discretised by zero-order hold and `B` by an Euler step. Shapes:
/// `x, Δ: [L × C]`, `A: [C × S]`, `B, C: [L × S]`, `D: [C]`. Every `Δ` must
/// be strictly positive.
pub fn selective_scan(
    tape: &mut Tape,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    tape.selective_scan(x, delta, a, b, c, d)
}

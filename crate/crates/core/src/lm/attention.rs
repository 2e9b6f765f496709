use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mask;

pub struct AttentionOutput {
    /// `[n × d]`, heads concatenated.
    pub out: Var,
    /// Per-head attention weights `[n × m]`.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention of `q[n × d]` over `k, v[m × d]`, split into
/// `n_heads` contiguous column groups.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: &Mask,
) -> Result<AttentionOutput> {
    let (_, d) = tape.value(q).dims2()?;
    let (m, dk) = tape.value(k).dims2()?;
    if dk != d || tape.shape(v) != [m, d] {
        return Err(Error::dim(
            "multi_head_attention",
            tape.shape(q),
            tape.shape(k),
        ));
    }
    if m == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    let dh = d / n_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.narrow_cols(q, h * dh, dh)?;
        let kh = tape.narrow_cols(k, h * dh, dh)?;
        let vh = tape.narrow_cols(v, h * dh, dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.masked_softmax(scores, mask)?;
        heads.push(tape.matmul(p, vh)?);
        weights.push(p);
    }
    let out = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok(AttentionOutput { out, weights })
}

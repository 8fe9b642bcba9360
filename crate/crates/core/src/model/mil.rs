//! Gated-attention multiple-instance pooling: the baseline aggregator for
//! models without the fusion transformer.

use super::params::{linear, Bound, Initializer};
use crate::tensor::{Tensor, Var};
use crate::Result;

pub fn init(init: &mut Initializer<'_>, in_dim: usize, d: usize, attn_hidden: usize, classes: usize) -> Result<()> {
    init.linear("mil.embed", in_dim, d)?;
    init.linear("mil.attn_v", d, attn_hidden)?;
    init.linear("mil.attn_u", d, attn_hidden)?;
    init.linear("mil.attn_w", attn_hidden, 1)?;
    init.linear("mil.cls", d, classes)
}

pub struct MilOutput<'g> {
    pub logits: Var<'g>,
    /// Softmax weight of each instance.
    pub attention: Tensor,
}

/// `h = ReLU(x W_e)`, `a = softmax((tanh(h V) ⊙ sigmoid(h U)) w)`,
/// logits from `Σ a_n h_n`.
pub fn mil_forward<'g>(p: &Bound<'g, '_>, instances: Var<'g>) -> Result<MilOutput<'g>> {
    let h = linear(p, "mil.embed", instances)?.relu()?;
    let v = linear(p, "mil.attn_v", h)?.tanh()?;
    let u = linear(p, "mil.attn_u", h)?.sigmoid()?;
    let scores = linear(p, "mil.attn_w", v.mul(&u)?)?;
    let a = scores.transpose()?.softmax(1)?;
    let pooled = a.matmul(&h)?;
    Ok(MilOutput {
        logits: linear(p, "mil.cls", pooled)?,
        attention: (*a.value()).clone(),
    })
}

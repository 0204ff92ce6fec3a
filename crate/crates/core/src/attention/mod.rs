//! Attention-weight generators.
//!
//! Every generator produces raw logits of shape `[B, L, H, n, n]` (or
//! `[B, H, n, n]` for the per-layer deterministic baseline) and the same
//! stack after a causal mask and row softmax. Masked (future) entries of the
//! normalized form are exactly zero.

mod diffusion;
mod vae;

pub use diffusion::{
    build_schedule, diffusion_forward, diffusion_loss, diffusion_reverse_step, diffusion_training_loss,
    generate_attention_diffusion, init_diffusion, predict_noise, reverse_step_var, time_embedding, NoiseSchedule,
    TIME_DIM,
};
pub use vae::{generate_attention_vae, init_vae, reparameterize, vae_decode, vae_encode, LatentState};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Layer/head/length layout of a generated stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub n: usize,
}

impl StackShape {
    pub fn per_sample(&self) -> usize {
        self.layers * self.heads * self.n * self.n
    }

    pub fn dims(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.layers, self.heads, self.n, self.n]
    }
}

#[derive(Debug, Clone)]
pub enum GenAux {
    None,
    Vae(LatentState),
    /// Predicted noise at each reverse step, ordered `t = T, ..., 1`.
    Diffusion {
        eps_hat: Vec<Var>,
    },
}

#[derive(Debug, Clone)]
pub struct GenAttention {
    pub logits: Var,
    pub normalized: Var,
    pub aux: GenAux,
}

/// Row-major `[n, n]` lower-triangular (diagonal included) allowance mask.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

/// Causal mask followed by row softmax over the last two axes.
pub fn normalize_causal<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let n = *tape.shape(logits).last().unwrap_or(&0);
    Ok(tape.softmax_rows(logits, Some(&causal_mask(n)))?)
}

/// Errors unless every `n × n` block is row-stochastic on its causal prefix
/// (within `1e-6`) and exactly zero above the diagonal.
pub fn check_normalized<T: Scalar>(a: &Tensor<T>) -> Result<()> {
    let n = *a.shape().last().unwrap_or(&0);
    if a.rank() < 2 || a.shape()[a.rank() - 2] != n {
        return Err(Error::Contract(format!(
            "attention shape {:?} is not square",
            a.shape()
        )));
    }
    for (r, row) in a.data().chunks(n).enumerate() {
        let i = r % n;
        if row[i + 1..].iter().any(|&x| x != T::zero()) {
            return Err(Error::Contract(format!("row {r} attends to future positions")));
        }
        let total: f64 = row[..=i].iter().map(|x| x.as_f64()).sum();
        if (total - 1.0).abs() > 1e-6 || row[..=i].iter().any(|&x| x < T::zero()) {
            return Err(Error::Contract(format!("row {r} sums to {total}, not 1")));
        }
    }
    Ok(())
}

/// `normalized` block for layer `l` of a `[B, L, H, n, n]` stack, as `[B, H, n, n]`.
pub fn layer_slice<T: Scalar>(tape: &mut Tape<T>, stack: Var, l: usize) -> Result<Var> {
    let s = tape.shape(stack).to_vec();
    let part = tape.narrow(stack, 1, l, 1)?;
    Ok(tape.reshape(part, vec![s[0], s[2], s[3], s[4]])?)
}

/// Scaled dot-product weights `softmax(mask(Q·Kᵀ/√d))`.
///
/// `q`, `k` are `[.., n, d]` (a head axis may precede `n`). `mask = None`
/// applies no mask; pass [`causal_mask`] for next-item use.
pub fn deterministic_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    mask: Option<&[bool]>,
) -> Result<GenAttention> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::config("attention key dimension is zero"));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let logits = tape.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let normalized = tape.softmax_rows(logits, mask)?;
    Ok(GenAttention {
        logits,
        normalized,
        aux: GenAux::None,
    })
}

/// Runs `generate` twice on fresh tapes and reports whether the normalized
/// attention is bitwise identical across the two calls.
pub fn collapse_check<T, G>(mut generate: G) -> Result<bool>
where
    T: Scalar,
    G: FnMut(&mut Tape<T>) -> Result<Var>,
{
    let mut first = Tape::new();
    let a = generate(&mut first)?;
    let mut second = Tape::new();
    let b = generate(&mut second)?;
    Ok(first.value(a).bitwise_eq(second.value(b)))
}

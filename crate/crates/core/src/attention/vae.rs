use super::{normalize_causal, GenAttention, GenAux, StackShape};
use crate::params::{Bound, ParamStore};
use crate::tensor::{RngStream, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

const LOG_VAR_BOUND: f64 = 10.0;

/// Tape handles for one VAE pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentState {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub h_s: Var,
    /// The standard-normal draw used for `z` (zeros in collapse mode).
    pub eps: Var,
}

pub fn init_vae<T: Scalar>(store: &mut ParamStore<T>, d_h: usize, shape: StackShape, rng: &mut RngStream) {
    let b = 1.0 / (d_h as f64).sqrt();
    store.init_uniform("vae.enc.w1", &[d_h, d_h], b, rng);
    store.init_zeros("vae.enc.b1", &[d_h]);
    store.init_uniform("vae.enc.w2", &[d_h, 2 * d_h], b, rng);
    store.init_zeros("vae.enc.b2", &[2 * d_h]);
    store.init_uniform("vae.dec.w1", &[d_h, d_h], b, rng);
    store.init_zeros("vae.dec.b1", &[d_h]);
    store.init_uniform("vae.dec.heads.w", &[d_h, shape.per_sample()], b, rng);
    store.init_zeros("vae.dec.heads.b", &[shape.per_sample()]);
}

/// One tanh hidden layer mapping `h_g [B, d_h]` to `(mu, log_var)`, each
/// `[B, d_h]`; `log_var` is clamped to `[-10, 10]`.
pub fn vae_encode<T: Scalar>(tape: &mut Tape<T>, h_g: Var, p: &Bound) -> Result<(Var, Var)> {
    let hid = tape.linear(h_g, p.get("vae.enc.w1")?, Some(p.get("vae.enc.b1")?))?;
    let hid = tape.tanh(hid);
    let out = tape.linear(hid, p.get("vae.enc.w2")?, Some(p.get("vae.enc.b2")?))?;
    let d_h = tape.shape(out)[1] / 2;
    let mu = tape.narrow(out, 1, 0, d_h)?;
    let lv = tape.narrow(out, 1, d_h, d_h)?;
    let lv = tape.clamp(lv, T::of(-LOG_VAR_BOUND), T::of(LOG_VAR_BOUND));
    Ok((mu, lv))
}

/// `z = mu + exp(log_var / 2) ⊙ eps`, with `eps` held constant.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(log_var, T::of(0.5));
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// Shared tanh map `z -> h_s`, then one affine head per (layer, head)
/// producing `n²` logits, stacked to `[B, L, H, n, n]`.
///
/// Returns the attention and `h_s`.
pub fn vae_decode<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &Bound, shape: StackShape) -> Result<(GenAttention, Var)> {
    let w = p.get("vae.dec.heads.w")?;
    let width = tape.shape(w)[1];
    if width != shape.per_sample() {
        return Err(Error::Config(format!(
            "decoder emits {width} logits per sample but {}x{}x{}² are configured",
            shape.layers, shape.heads, shape.n
        )));
    }
    let h_s = tape.linear(z, p.get("vae.dec.w1")?, Some(p.get("vae.dec.b1")?))?;
    let h_s = tape.tanh(h_s);
    let flat = tape.linear(h_s, w, Some(p.get("vae.dec.heads.b")?))?;
    let batch = tape.shape(z)[0];
    let logits = tape.reshape(flat, shape.dims(batch))?;
    let normalized = normalize_causal(tape, logits)?;
    Ok((
        GenAttention {
            logits,
            normalized,
            aux: GenAux::None,
        },
        h_s,
    ))
}

/// Full V-GenAtt pass. `rng = None` is collapse mode: `σ` is forced to zero
/// and `z = mu` exactly.
pub fn generate_attention_vae<T: Scalar>(
    tape: &mut Tape<T>,
    h_g: Var,
    p: &Bound,
    shape: StackShape,
    rng: Option<&mut RngStream>,
) -> Result<GenAttention> {
    let (mu, log_var) = vae_encode(tape, h_g, p)?;
    let dims = tape.shape(mu).to_vec();
    let (z, eps) = match rng {
        Some(rng) => {
            let eps = tape.constant(Tensor::randn(dims, rng));
            (reparameterize(tape, mu, log_var, eps)?, eps)
        }
        None => (mu, tape.constant(Tensor::zeros(dims))),
    };
    let (mut att, h_s) = vae_decode(tape, z, p, shape)?;
    att.aux = GenAux::Vae(LatentState {
        mu,
        log_var,
        z,
        h_s,
        eps,
    });
    Ok(att)
}

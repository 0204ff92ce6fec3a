//! Next-item scorer: embeddings, recurrent summary, generated (or
//! dot-product) attention inside residual blocks, and a tied-embedding head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{Mode, ModelConfig};

use crate::attention::{
    build_schedule, causal_mask, check_normalized, deterministic_attention, generate_attention_diffusion,
    generate_attention_vae, init_diffusion, init_vae, layer_slice, GenAttention, NoiseSchedule,
};
use crate::encoder::{embed_sequence, encode_sequence, init_embeddings, init_encoder};
use crate::params::{Bound, ParamStore};
use crate::tensor::{RngStream, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

const LN_EPS: f64 = 1e-6;

/// A configured model and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    schedule: NoiseSchedule,
}

/// Per-call settings of [`forward`].
#[derive(Debug)]
pub struct Pass<'a> {
    /// Source of dropout masks and generative noise.
    pub rng: &'a mut RngStream,
    /// Enables dropout.
    pub train: bool,
    /// VAE collapse mode: `σ = 0`, so `z = mu`.
    pub collapse: bool,
    /// Also compute final-position scores over the catalog.
    pub score: bool,
}

impl<'a> Pass<'a> {
    pub fn train(rng: &'a mut RngStream) -> Self {
        Pass {
            rng,
            train: true,
            collapse: false,
            score: false,
        }
    }

    pub fn eval(rng: &'a mut RngStream) -> Self {
        Pass {
            rng,
            train: false,
            collapse: false,
            score: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final per-position states `[B, n, d]`.
    pub hidden: Var,
    /// Normalized weights applied in each layer, `[B, H, n, n]`.
    pub layer_attention: Vec<Var>,
    /// The generated stack (generative modes only).
    pub generated: Option<GenAttention>,
    pub h_g: Option<Var>,
    /// `[B, |V|]` scores of items `1..=|V|` at the final position.
    pub scores: Option<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed).fork(0x1417);
        let mut params = ParamStore::new();
        let (d, d_h) = (config.d, config.d_h);
        init_embeddings(&mut params, config.num_items, config.n, d, &mut rng);
        match config.mode {
            Mode::Deterministic => {
                let b = 1.0 / (d as f64).sqrt();
                for l in 0..config.layers {
                    params.init_uniform(&format!("det.l{l}.w_q"), &[config.heads, d, d], b, &mut rng);
                    params.init_uniform(&format!("det.l{l}.w_k"), &[config.heads, d, d], b, &mut rng);
                }
            }
            Mode::Vae => {
                init_encoder(&mut params, d, d_h, &mut rng);
                init_vae(&mut params, d_h, config.stack_shape(), &mut rng);
            }
            Mode::Diffusion => {
                init_encoder(&mut params, d, d_h, &mut rng);
                init_diffusion(
                    &mut params,
                    d_h,
                    config.stack_shape(),
                    config.diffusion_hidden,
                    &mut rng,
                );
            }
        }
        for l in 0..config.layers {
            params.init_ones(&format!("blk{l}.ln1.g"), &[d]);
            params.init_zeros(&format!("blk{l}.ln1.b"), &[d]);
            params.init_uniform(
                &format!("blk{l}.ffn.w1"),
                &[d, 4 * d],
                1.0 / (d as f64).sqrt(),
                &mut rng,
            );
            params.init_zeros(&format!("blk{l}.ffn.b1"), &[4 * d]);
            params.init_uniform(
                &format!("blk{l}.ffn.w2"),
                &[4 * d, d],
                1.0 / (4.0 * d as f64).sqrt(),
                &mut rng,
            );
            params.init_zeros(&format!("blk{l}.ffn.b2"), &[d]);
            params.init_ones(&format!("blk{l}.ln2.g"), &[d]);
            params.init_zeros(&format!("blk{l}.ln2.b"), &[d]);
        }
        Self::from_parts(config, params)
    }

    /// Wraps existing parameters; shapes are not checked here.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let schedule = build_schedule(config.steps, config.beta_start, config.beta_end)?;
        Ok(Model {
            config,
            params,
            schedule,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Forces the padding row of the item table back to zero.
    pub fn zero_pad_row(&mut self) -> Result<()> {
        let d = self.config.d;
        self.params.get_mut("emb.item")?.data_mut()[..d].fill(T::zero());
        Ok(())
    }

    /// Eval-mode scores `[B, |V|]` for a batch of padded sequences.
    pub fn scores(&self, items: &[usize], mask: &[bool], rng: &mut RngStream, collapse: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut pass = Pass {
            collapse,
            ..Pass::eval(rng)
        };
        let out = forward(&mut tape, &self.config, &self.schedule, &p, items, mask, &mut pass)?;
        let scores = out.scores.expect("eval pass scores");
        Ok(tape.value(scores).clone())
    }

    /// Eval-mode final hidden states `[B, n, d]`.
    pub fn hidden(&self, items: &[usize], mask: &[bool], rng: &mut RngStream) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut pass = Pass {
            score: false,
            ..Pass::eval(rng)
        };
        let out = forward(&mut tape, &self.config, &self.schedule, &p, items, mask, &mut pass)?;
        Ok(tape.value(out.hidden).clone())
    }
}

/// `O = mean_h(Â_h · X)` with no value projection.
///
/// `a` is `[B, H, n, n]` and must be normalized (see
/// [`check_normalized`]); `x` is `[B, n, d]`. With `dropout`, the weights
/// are dropped after the contract check.
pub fn apply_generated_attention<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    x: Var,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    check_normalized(tape.value(a))?;
    let sa = tape.shape(a).to_vec();
    let sx = tape.shape(x).to_vec();
    if sa.len() != 4 || sx.len() != 3 || sa[0] != sx[0] || sa[2] != sx[1] {
        return Err(Error::Contract(format!("attention {sa:?} does not match input {sx:?}")));
    }
    let a = match dropout {
        Some((rate, rng)) => tape.dropout(a, rate, Some(rng))?,
        None => a,
    };
    let x4 = tape.reshape(x, vec![sx[0], 1, sx[1], sx[2]])?;
    let o = tape.matmul(a, x4)?;
    if sa[1] == 1 {
        Ok(tape.reshape(o, sx)?)
    } else {
        Ok(tape.mean_axis(o, 1)?)
    }
}

/// `Y = LN(X + drop(attn))`, `Z = LN(Y + drop(FFN(Y)))` with a GELU FFN of width `4d`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    a: Var,
    p: &Bound,
    layer: usize,
    mut dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    let name = |s: &str| format!("blk{layer}.{s}");
    let attn = apply_generated_attention(tape, a, x, dropout.as_mut().map(|(r, g)| (*r, &mut **g)))?;
    let attn = drop(tape, attn, &mut dropout)?;
    let y = tape.add(x, attn)?;
    let y = tape.layer_norm(y, p.get(&name("ln1.g"))?, p.get(&name("ln1.b"))?, LN_EPS)?;
    let f = tape.linear(y, p.get(&name("ffn.w1"))?, Some(p.get(&name("ffn.b1"))?))?;
    let f = tape.gelu(f);
    let f = tape.linear(f, p.get(&name("ffn.w2"))?, Some(p.get(&name("ffn.b2"))?))?;
    let f = drop(tape, f, &mut dropout)?;
    let z = tape.add(y, f)?;
    Ok(tape.layer_norm(z, p.get(&name("ln2.g"))?, p.get(&name("ln2.b"))?, LN_EPS)?)
}

fn drop<T: Scalar>(tape: &mut Tape<T>, v: Var, dropout: &mut Option<(f64, &mut RngStream)>) -> Result<Var> {
    Ok(match dropout {
        Some((rate, rng)) => tape.dropout(v, *rate, Some(&mut **rng))?,
        None => v,
    })
}

/// Dot products of `h_last [B, d]` with item rows `1..=|V|`, giving `[B, |V|]`.
pub fn score_items<T: Scalar>(tape: &mut Tape<T>, h_last: Var, item_table: Var) -> Result<Var> {
    let rows = tape.shape(item_table)[0];
    let items = tape.narrow(item_table, 0, 1, rows - 1)?;
    let items_t = tape.transpose(items)?;
    Ok(tape.matmul(h_last, items_t)?)
}

/// Embed, encode, generate the attention stack for the configured mode, run
/// the blocks and (optionally) score the catalog from the final position.
///
/// `items` and `mask` are row-major `[B, n]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    p: &Bound,
    items: &[usize],
    mask: &[bool],
    pass: &mut Pass<'_>,
) -> Result<ForwardOutput> {
    let n = cfg.n;
    if items.len() != mask.len() || !items.len().is_multiple_of(n) || items.is_empty() {
        return Err(Error::Config(format!(
            "batch of {} ids / {} mask entries does not tile length {n}",
            items.len(),
            mask.len()
        )));
    }
    let batch = items.len() / n;
    let rate = if pass.train { cfg.dropout } else { 0.0 };
    let m = embed_sequence(tape, items, n, p)?;
    let mut x = if rate > 0.0 {
        tape.dropout(m, rate, Some(&mut *pass.rng))?
    } else {
        m
    };
    let (generated, h_g) = match cfg.mode {
        Mode::Deterministic => (None, None),
        Mode::Vae | Mode::Diffusion => {
            let enc = encode_sequence(tape, x, mask, p)?;
            let gen = if cfg.mode == Mode::Vae {
                let rng = (!pass.collapse).then_some(&mut *pass.rng);
                generate_attention_vae(tape, enc.h_g, p, cfg.stack_shape(), rng)?
            } else {
                generate_attention_diffusion(tape, enc.h_g, sched, p, pass.rng, cfg.stack_shape())?
            };
            (Some(gen), Some(enc.h_g))
        }
    };
    let causal = causal_mask(n);
    let mut layer_attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let a = match &generated {
            Some(g) => layer_slice(tape, g.normalized, l)?,
            None => {
                let x4 = tape.reshape(x, vec![batch, 1, n, cfg.d])?;
                let q = tape.matmul(x4, p.get(&format!("det.l{l}.w_q"))?)?;
                let k = tape.matmul(x4, p.get(&format!("det.l{l}.w_k"))?)?;
                deterministic_attention(tape, q, k, Some(&causal))?.normalized
            }
        };
        layer_attention.push(a);
        let dropout = (rate > 0.0).then_some((rate, &mut *pass.rng));
        x = transformer_block(tape, x, a, p, l, dropout)?;
    }
    let scores = if pass.score {
        let last = tape.select(x, 1, n - 1)?;
        Some(score_items(tape, last, p.get("emb.item")?)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        hidden: x,
        layer_attention,
        generated,
        h_g,
        scores,
    })
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{build_schedule, StackShape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Query/key dot-product attention (baseline).
    Deterministic,
    Vae,
    Diffusion,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Deterministic, Mode::Vae, Mode::Diffusion];

    pub fn is_generative(self) -> bool {
        self != Mode::Deterministic
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Deterministic => "deterministic",
            Mode::Vae => "vae",
            Mode::Diffusion => "diffusion",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "det" => Ok(Mode::Deterministic),
            "vae" => Ok(Mode::Vae),
            "diffusion" => Ok(Mode::Diffusion),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected deterministic, vae or diffusion)"
            ))),
        }
    }
}

/// Architecture and generative hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub num_items: usize,
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    /// Encoder state and latent width.
    pub d_h: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma: f64,
    pub dropout: f64,
    /// Hidden width of the noise predictor.
    pub diffusion_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: `n = 50`, `d_h = 2d`, `T = n`, dropout 0.4, `γ = 1`,
    /// `β` from 1e-4 to 0.02.
    pub fn new(mode: Mode, num_items: usize) -> Self {
        let d = 64;
        let n = 50;
        ModelConfig {
            mode,
            num_items,
            d,
            n,
            layers: 2,
            heads: 1,
            d_h: 2 * d,
            steps: n,
            beta_start: 1e-4,
            beta_end: 0.02,
            gamma: 1.0,
            dropout: 0.4,
            diffusion_hidden: 2 * d,
            seed: 0,
        }
    }

    /// Sets `d` and the widths that default to multiples of it.
    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self.d_h = 2 * d;
        self.diffusion_hidden = 2 * d;
        self
    }

    /// Sets `n` and `T = n`.
    pub fn with_len(mut self, n: usize) -> Self {
        self.n = n;
        self.steps = n;
        self
    }

    pub fn stack_shape(&self) -> StackShape {
        StackShape {
            layers: self.layers,
            heads: self.heads,
            n: self.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("d", self.d),
            ("n", self.n),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("steps", self.steps),
            ("diffusion_hidden", self.diffusion_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        build_schedule(self.steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

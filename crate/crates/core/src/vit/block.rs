use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::posembed::sincos_2d;
use crate::error::{Error, Result};
use crate::rng::trunc_normal;
use crate::tensor::{lit, ParamId, ParamStore, Scalar, Session, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
}

impl StackConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                format!("{field}.dim"),
                format!("dim {} not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.mlp_ratio == 0 || self.patch_size == 0 {
            return Err(Error::config(
                field,
                "mlp_ratio and patch_size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(
                format!("{name}.w"),
                trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
                trainable,
            )?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), trainable)?,
        })
    }

    pub fn forward<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        x: Var<'s, F>,
    ) -> Result<Var<'s, F>> {
        x.matmul(s.param(self.w))?.add(s.param(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.add(
                format!("{name}.gain"),
                Tensor::full(&[dim], F::one()),
                trainable,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable)?,
        })
    }

    pub fn forward<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        x: Var<'s, F>,
    ) -> Result<Var<'s, F>> {
        x.layernorm(s.param(self.gain), s.param(self.bias), lit(LN_EPS))
    }
}

/// Global multi-head self-attention over all `N` rows of its input.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // Stored as wq/bq, wk/bk, ... under `<name>.`.
        let mut lin = |tag: &str, rng: &mut ChaCha8Rng| -> Result<Linear> {
            Ok(Linear {
                w: store.add(
                    format!("{name}.w{tag}"),
                    trunc_normal(&[dim, dim], INIT_STD, rng),
                    trainable,
                )?,
                b: store.add(format!("{name}.b{tag}"), Tensor::zeros(&[dim]), trainable)?,
            })
        };
        Ok(Self {
            heads,
            q: lin("q", rng)?,
            k: lin("k", rng)?,
            v: lin("v", rng)?,
            o: lin("o", rng)?,
        })
    }

    /// Returns the output and the `[heads, N, N]` attention weights.
    pub fn forward_with_weights<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        x: Var<'s, F>,
    ) -> Result<(Var<'s, F>, Var<'s, F>)> {
        let shape = x.shape();
        let (n, d) = (shape[0], shape[1]);
        let h = self.heads;
        let dh = d / h;
        let q = self
            .q
            .forward(s, x)?
            .reshape(&[n, h, dh])?
            .permute(&[1, 0, 2])?;
        let k = self
            .k
            .forward(s, x)?
            .reshape(&[n, h, dh])?
            .permute(&[1, 2, 0])?;
        let v = self
            .v
            .forward(s, x)?
            .reshape(&[n, h, dh])?
            .permute(&[1, 0, 2])?;
        let scores = q.matmul(k)?.scale(lit(1.0 / (dh as f64).sqrt()));
        s.tape().count_attention((n * n) as u64);
        let weights = scores.softmax(2)?;
        let mixed = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
        Ok((self.o.forward(s, mixed)?, weights))
    }

    pub fn forward<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        x: Var<'s, F>,
    ) -> Result<Var<'s, F>> {
        Ok(self.forward_with_weights(s, x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `+ mlp(ln(·))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &StackConfig,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim, trainable)?,
            attn: Attention::new(
                store,
                &format!("{name}.attn"),
                cfg.dim,
                cfg.heads,
                trainable,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim, trainable)?,
            mlp: Mlp {
                fc1: Linear::new(
                    store,
                    &format!("{name}.mlp.fc1"),
                    cfg.dim,
                    hidden,
                    trainable,
                    rng,
                )?,
                fc2: Linear::new(
                    store,
                    &format!("{name}.mlp.fc2"),
                    hidden,
                    cfg.dim,
                    trainable,
                    rng,
                )?,
            },
        })
    }

    pub fn forward<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        x: Var<'s, F>,
    ) -> Result<Var<'s, F>> {
        let a = self.attn.forward(s, self.norm1.forward(s, x)?)?;
        let x = x.add(a)?;
        let h = self.mlp.fc1.forward(s, self.norm2.forward(s, x)?)?.gelu();
        x.add(self.mlp.fc2.forward(s, h)?)
    }
}

/// A sequence of blocks with no final norm, so a depth-0 stack is the identity.
#[derive(Debug, Clone)]
pub struct Stack {
    pub config: StackConfig,
    pub blocks: Vec<Block>,
}

impl Stack {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: StackConfig,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(name)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), &cfg, trainable, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg,
            blocks,
        })
    }

    pub fn forward<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        mut x: Var<'s, F>,
    ) -> Result<Var<'s, F>> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }

    /// Outputs after each 1-based block index in `taps` (ascending).
    pub fn forward_taps<'s, F: Scalar>(
        &self,
        s: &'s Session<'_, F>,
        mut x: Var<'s, F>,
        taps: &[usize],
    ) -> Result<Vec<Var<'s, F>>> {
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.blocks.len()) {
            return Err(Error::config(
                "taps",
                format!("tap {bad} outside 1..={}", self.blocks.len()),
            ));
        }
        let last = taps.iter().copied().max().unwrap_or(0);
        let mut outs = vec![None; self.blocks.len() + 1];
        for (i, b) in self.blocks.iter().take(last).enumerate() {
            x = b.forward(s, x)?;
            outs[i + 1] = Some(x);
        }
        Ok(taps.iter().map(|&t| outs[t].expect("computed")).collect())
    }
}

/// Linear patch projection plus the fixed sine-cosine table for one grid.
#[derive(Debug, Clone)]
pub struct PatchEmbed<F> {
    pub proj: Linear,
    pub pos: Tensor<F>,
    pub grid: (usize, usize),
}

impl<F: Scalar> PatchEmbed<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        patch_width: usize,
        dim: usize,
        grid: (usize, usize),
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                patch_width,
                dim,
                trainable,
                rng,
            )?,
            pos: sincos_2d(dim, grid.0, grid.1),
            grid,
        })
    }

    /// `tokens · W + b + pos` for all grid tokens (`[T, C·p²]` → `[T, D]`).
    pub fn forward<'s>(&self, s: &'s Session<'_, F>, tokens: &Tensor<F>) -> Result<Var<'s, F>> {
        let x = self.proj.forward(s, s.constant(tokens.clone()))?;
        x.add(s.constant(self.pos.clone()))
    }
}

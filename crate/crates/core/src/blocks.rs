//! The modified transformer block: time attention, variable attention,
//! dynamic FFN and the three output gates.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{DyLinearOp, Init, LayerNorm, Linear, Session};
use crate::registry::ParameterRegistry;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Var};
use crate::tokenizer::{SegmentedTokens, Spans};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    /// Base length of every DyLinear weight (square).
    pub dylinear_base: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("dynamic FFN needs an even dim, got {}", self.d)));
        }
        if self.dylinear_base == 0 {
            return Err(Error::Config("dylinear base length must be positive".into()));
        }
        Ok(())
    }
}

/// Q/K/V/output projections shared by the time and variable attentions.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::register(reg, rng, &format!("{prefix}.q"), d, d, true, Init::Xavier)?,
            k: Linear::register(reg, rng, &format!("{prefix}.k"), d, d, true, Init::Xavier)?,
            v: Linear::register(reg, rng, &format!("{prefix}.v"), d, d, true, Init::Xavier)?,
            out: Linear::register(reg, rng, &format!("{prefix}.out"), d, d, true, Init::Zeros)?,
            heads,
            d,
        })
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> Scalar {
        1.0 / (self.head_dim() as Scalar).sqrt()
    }

    /// `[B, L, V, d]` → `[B·V·h, L, dh]`, grouping by variable and head.
    fn split_time_heads(&self, s: &mut Session, x: Var, dims: [usize; 3]) -> Result<Var> {
        let [b, l, v] = dims;
        let (h, dh) = (self.heads, self.head_dim());
        let x = s.tape.reshape(x, &[b, l, v, h, dh])?;
        let x = s.tape.permute(x, &[0, 2, 3, 1, 4])?;
        s.tape.reshape(x, &[b * v * h, l, dh])
    }

    fn merge_time_heads(&self, s: &mut Session, x: Var, dims: [usize; 3]) -> Result<Var> {
        let [b, l, v] = dims;
        let (h, dh) = (self.heads, self.head_dim());
        let x = s.tape.reshape(x, &[b, v, h, l, dh])?;
        let x = s.tape.permute(x, &[0, 3, 1, 2, 4])?;
        s.tape.reshape(x, &[b, l, v, self.d])
    }

    /// Multi-head attention from `query: [B, Lq, V, d]` over
    /// `context: [B, Lk, V, d]` along the time axis, separately per variable.
    pub fn cross_time(&self, s: &mut Session, query: Var, context: Var) -> Result<Var> {
        let qs = s.tape.shape(query).to_vec();
        let cs = s.tape.shape(context).to_vec();
        if qs.len() != 4 || cs.len() != 4 || qs[0] != cs[0] || qs[2] != cs[2] || qs[3] != self.d || cs[3] != self.d {
            return Err(Error::dim("attention", &qs, &cs));
        }
        let (b, lq, lk, v) = (qs[0], qs[1], cs[1], qs[2]);
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, context)?;
        let val = self.v.forward(s, context)?;
        let q = self.split_time_heads(s, q, [b, lq, v])?;
        let k = self.split_time_heads(s, k, [b, lk, v])?;
        let val = self.split_time_heads(s, val, [b, lk, v])?;
        let scores = s.tape.bmm(q, k, true)?;
        let scores = s.tape.scale(scores, self.scale());
        let attn = s.tape.softmax(scores, 2)?;
        let o = s.tape.bmm(attn, val, false)?;
        let o = self.merge_time_heads(s, o, [b, lq, v])?;
        self.out.forward(s, o)
    }

    /// Standard self-attention along time, applied per variable.
    pub fn time_mhsa(&self, s: &mut Session, z: Var) -> Result<Var> {
        self.cross_time(s, z, z)
    }

    /// Variable attention map `[B·h, V, V]` from time-averaged queries and keys.
    pub fn variable_attention_map(&self, s: &mut Session, z: Var) -> Result<Var> {
        let zs = s.tape.shape(z).to_vec();
        if zs.len() != 4 || zs[3] != self.d {
            return Err(Error::dim("variable_mhsa", &zs, &[self.d]));
        }
        let (b, v) = (zs[0], zs[2]);
        let (h, dh) = (self.heads, self.head_dim());
        let q = self.q.forward(s, z)?;
        let k = self.k.forward(s, z)?;
        let q = s.tape.mean(q, 1)?;
        let k = s.tape.mean(k, 1)?;
        let pooled = |s: &mut Session, x: Var| -> Result<Var> {
            let x = s.tape.reshape(x, &[b, v, h, dh])?;
            let x = s.tape.permute(x, &[0, 2, 1, 3])?;
            s.tape.reshape(x, &[b * h, v, dh])
        };
        let q = pooled(s, q)?;
        let k = pooled(s, k)?;
        let scores = s.tape.bmm(q, k, true)?;
        let scores = s.tape.scale(scores, self.scale());
        s.tape.softmax(scores, 2)
    }

    /// Attention across variables with one map shared by every time position.
    pub fn variable_mhsa(&self, s: &mut Session, z: Var) -> Result<Var> {
        let zs = s.tape.shape(z).to_vec();
        let attn = self.variable_attention_map(s, z)?;
        let (b, l, v) = (zs[0], zs[1], zs[2]);
        let (h, dh) = (self.heads, self.head_dim());
        let val = self.v.forward(s, z)?;
        let val = s.tape.reshape(val, &[b, l, v, h, dh])?;
        let val = s.tape.permute(val, &[0, 3, 2, 1, 4])?;
        let val = s.tape.reshape(val, &[b * h, v, l * dh])?;
        let o = s.tape.bmm(attn, val, false)?;
        let o = s.tape.reshape(o, &[b, h, v, l, dh])?;
        let o = s.tape.permute(o, &[0, 3, 2, 1, 4])?;
        let o = s.tape.reshape(o, &[b, l, v, self.d])?;
        self.out.forward(s, o)
    }
}

/// Per-token sigmoid rescaling: `sigmoid(linear(z)) ⊙ z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub proj: Linear,
}

impl Gate {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, d: usize) -> Result<Self> {
        Ok(Gate {
            proj: Linear::register(reg, rng, prefix, d, 1, true, Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let d = *s.tape.shape(z).last().unwrap_or(&0);
        let g = self.proj.forward(s, z)?;
        let g = s.tape.sigmoid(g);
        let g = s.tape.repeat(g, s.tape.shape(g).len() - 1, d)?;
        s.tape.mul(g, z)
    }
}

/// Kernel-3 convolution, channel split with DyLinear on the first half,
/// output linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFfn {
    pub conv_weight: alloc::string::String,
    pub conv_bias: alloc::string::String,
    pub dy_prompt: DyLinearOp,
    pub dy_sample: DyLinearOp,
    pub out: Linear,
    pub d: usize,
}

impl DynamicFfn {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, d: usize, base: usize) -> Result<Self> {
        let conv_weight = format!("{prefix}.conv.weight");
        let conv_bias = format!("{prefix}.conv.bias");
        reg.insert(&conv_weight, rng::xavier_uniform(rng, &[3, d, d], 3 * d, d))?;
        reg.insert(&conv_bias, crate::tensor::Tensor::zeros(&[d]))?;
        Ok(DynamicFfn {
            conv_weight,
            conv_bias,
            dy_prompt: DyLinearOp::register(reg, rng, &format!("{prefix}.dylinear_prompt"), base, base)?,
            dy_sample: DyLinearOp::register(reg, rng, &format!("{prefix}.dylinear_sample"), base, base)?,
            out: Linear::register(reg, rng, &format!("{prefix}.out"), d, d, true, Init::Xavier)?,
            d,
        })
    }

    pub fn forward(&self, s: &mut Session, z: Var, spans: Spans) -> Result<Var> {
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("dynamic FFN needs an even dim, got {}", self.d)));
        }
        let shape = s.tape.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != spans.len() {
            return Err(Error::dim("dynamic_ffn", &shape, &[spans.len()]));
        }
        let w = s.param(&self.conv_weight)?;
        let b = s.param(&self.conv_bias)?;
        let mid = s.tape.conv1d_k3(z, w, Some(b))?;
        let half = self.d / 2;
        let halves = s.tape.split(mid, 3, &[half, half])?;
        let (mid1, mid2) = (halves[0], halves[1]);

        let body = spans.sample + spans.gen;
        let mut sizes = Vec::new();
        for n in [spans.prompt, body, spans.cls] {
            if n > 0 {
                sizes.push(n);
            }
        }
        let pieces = s.tape.split(mid1, 1, &sizes)?;
        let mut it = pieces.into_iter();
        let mut mixed = Vec::with_capacity(3);
        if spans.prompt > 0 {
            let p = it.next().expect("prompt piece");
            mixed.push(self.dy_prompt.forward(s, p, spans.prompt)?);
        }
        if body > 0 {
            let x = it.next().expect("sample piece");
            mixed.push(self.dy_sample.forward(s, x, body)?);
        }
        // the CLS row skips DyLinear
        mixed.extend(it);
        let mid1 = s.tape.concat(&mixed, 1)?;
        let joined = s.tape.concat(&[mid1, mid2], 3)?;
        self.out.forward(s, joined)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniTSBlock {
    pub time_attn: Attention,
    pub var_attn: Attention,
    pub ffn: DynamicFfn,
    pub gates: [Gate; 3],
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl UniTSBlock {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(UniTSBlock {
            time_attn: Attention::register(reg, rng, &format!("{prefix}.time_attn"), d, cfg.heads)?,
            var_attn: Attention::register(reg, rng, &format!("{prefix}.var_attn"), d, cfg.heads)?,
            ffn: DynamicFfn::register(reg, rng, &format!("{prefix}.ffn"), d, cfg.dylinear_base)?,
            gates: [
                Gate::register(reg, rng, &format!("{prefix}.gate_time"), d)?,
                Gate::register(reg, rng, &format!("{prefix}.gate_var"), d)?,
                Gate::register(reg, rng, &format!("{prefix}.gate_ffn"), d)?,
            ],
            norm_attn: LayerNorm::register(reg, &format!("{prefix}.norm_attn"), d)?,
            norm_ffn: LayerNorm::register(reg, &format!("{prefix}.norm_ffn"), d)?,
        })
    }

    /// Pre-norm residual composition; both attentions read the same
    /// normalisation parameters.
    pub fn forward(&self, s: &mut Session, z: SegmentedTokens) -> Result<SegmentedTokens> {
        let mut x = z.data;

        let n = self.norm_attn.forward(s, x)?;
        let t = self.time_attn.time_mhsa(s, n)?;
        let t = self.gates[0].forward(s, t)?;
        x = s.tape.add(x, t)?;

        let n = self.norm_attn.forward(s, x)?;
        let v = self.var_attn.variable_mhsa(s, n)?;
        let v = self.gates[1].forward(s, v)?;
        x = s.tape.add(x, v)?;

        let n = self.norm_ffn.forward(s, x)?;
        let f = self.ffn.forward(s, n, z.spans)?;
        let f = self.gates[2].forward(s, f)?;
        x = s.tape.add(x, f)?;

        Ok(SegmentedTokens {
            data: x,
            spans: z.spans,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<UniTSBlock>,
}

impl Backbone {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, n: usize, cfg: BlockConfig) -> Result<Self> {
        let blocks = (0..n)
            .map(|i| UniTSBlock::register(reg, rng, &format!("{prefix}.blocks.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Backbone { blocks })
    }

    pub fn forward(&self, s: &mut Session, mut z: SegmentedTokens) -> Result<SegmentedTokens> {
        for b in &self.blocks {
            z = b.forward(s, z)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests;

//! Patch embedding, per-source token sets and the task token layouts.
//!
//! Sample tokens are kept as `[B, s, v, d]`: batch, time tokens, variables,
//! embedding. Every assembly concatenates along axis 1 and records the
//! segment spans so later stages can address prompt, sample, GEN and CLS
//! rows by name.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Session};
use crate::registry::ParameterRegistry;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor, Var};

/// Standard deviation for prompt/GEN/CLS tokens and positional embeddings.
pub const TOKEN_INIT_STD: Scalar = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub d: usize,
    pub max_positions: usize,
    pub proj: Linear,
    pub positions: String,
    pub unpatch: Linear,
}

/// Number of tokens covering `t` timesteps with right zero-padding.
pub fn token_count(t: usize, patch: usize) -> usize {
    t.div_ceil(patch)
}

impl PatchEmbedding {
    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        prefix: &str,
        patch: usize,
        d: usize,
        max_positions: usize,
    ) -> Result<Self> {
        if patch == 0 || d == 0 || max_positions == 0 {
            return Err(Error::Config("patch size, d and positions must be positive".into()));
        }
        let proj = Linear::register(reg, rng, &format!("{prefix}.patch"), patch, d, true, Init::Xavier)?;
        let positions = format!("{prefix}.positions");
        reg.insert(&positions, rng::normal_tensor(rng, &[max_positions, d], TOKEN_INIT_STD))?;
        let unpatch = Linear::register(reg, rng, &format!("{prefix}.unpatch"), d, patch, true, Init::Xavier)?;
        Ok(PatchEmbedding {
            patch,
            d,
            max_positions,
            proj,
            positions,
            unpatch,
        })
    }

    /// Projects non-overlapping patches of `x: [B, t, v]` to `[B, s, v, d]`
    /// without positional embeddings.
    pub fn embed_patches(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("patchify", &shape, &[3]));
        }
        let (b, t, v) = (shape[0], shape[1], shape[2]);
        let n = token_count(t, self.patch);
        let padded = if n * self.patch == t {
            x
        } else {
            let pad = s.constant(Tensor::zeros(&[b, n * self.patch - t, v]));
            s.tape.concat(&[x, pad], 1)?
        };
        let p = s.tape.reshape(padded, &[b, n, self.patch, v])?;
        let p = s.tape.permute(p, &[0, 1, 3, 2])?;
        self.proj.forward(s, p)
    }

    /// Adds positional embeddings `0..L` to `z: [B, L, v, d]`, shared across
    /// batch and variables.
    pub fn add_positions(&self, s: &mut Session, z: Var) -> Result<Var> {
        let shape = s.tape.shape(z).to_vec();
        let (b, l, v) = (shape[0], shape[1], shape[2]);
        if l > self.max_positions {
            return Err(Error::Contract(format!(
                "sequence of {l} tokens exceeds {} positions",
                self.max_positions
            )));
        }
        let table = s.param(&self.positions)?;
        let pos = s.tape.slice(table, 0, 0, l)?;
        let pos = s.tape.reshape(pos, &[1, l, 1, self.d])?;
        let pos = s.tape.repeat(pos, 2, v)?;
        let pos = s.tape.repeat(pos, 0, b)?;
        s.tape.add(z, pos)
    }

    /// Sample tokens with positions `0..s` added.
    pub fn patchify(&self, s: &mut Session, x: Var) -> Result<Var> {
        let z = self.embed_patches(s, x)?;
        self.add_positions(s, z)
    }

    /// Maps `[B, f, v, d]` tokens back to `[B, f·k, v]`, trimmed to
    /// `horizon` steps when given.
    pub fn unpatchify(&self, s: &mut Session, tokens: Var, horizon: Option<usize>) -> Result<Var> {
        let shape = s.tape.shape(tokens).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("unpatchify", &shape, &[4]));
        }
        let (b, f, v) = (shape[0], shape[1], shape[2]);
        let y = self.unpatch.forward(s, tokens)?;
        let y = s.tape.permute(y, &[0, 1, 3, 2])?;
        let y = s.tape.reshape(y, &[b, f * self.patch, v])?;
        match horizon {
            Some(h) if h < f * self.patch => s.tape.slice(y, 1, 0, h),
            Some(h) if h > f * self.patch => Err(Error::Contract(format!(
                "horizon {h} exceeds {} decoded steps",
                f * self.patch
            ))),
            _ => Ok(y),
        }
    }
}

/// Learnable prompt, GEN and CLS tokens of one data source.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub source: String,
    pub prompt: Option<String>,
    pub gen: String,
    pub cls: String,
    pub prompt_len: usize,
    pub vars: usize,
}

impl TokenSet {
    pub fn prefix(source: &str) -> String {
        format!("tokens.{source}")
    }

    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        source: &str,
        prompt_len: usize,
        vars: usize,
        d: usize,
    ) -> Result<Self> {
        if vars == 0 {
            return Err(Error::Config(format!("source `{source}` has zero variables")));
        }
        let pre = Self::prefix(source);
        if prompt_len > 0 {
            let n = format!("{pre}.prompt");
            reg.insert(&n, rng::normal_tensor(rng, &[prompt_len, vars, d], TOKEN_INIT_STD))?;
        }
        let gen = format!("{pre}.gen");
        reg.insert(&gen, rng::normal_tensor(rng, &[1, vars, d], TOKEN_INIT_STD))?;
        let cls = format!("{pre}.cls");
        reg.insert(&cls, rng::normal_tensor(rng, &[1, vars, d], TOKEN_INIT_STD))?;
        Ok(Self::from_names(source, prompt_len, vars))
    }

    pub fn from_names(source: &str, prompt_len: usize, vars: usize) -> Self {
        let pre = Self::prefix(source);
        TokenSet {
            source: source.into(),
            prompt: (prompt_len > 0).then(|| format!("{pre}.prompt")),
            gen: format!("{pre}.gen"),
            cls: format!("{pre}.cls"),
            prompt_len,
            vars,
        }
    }

    /// `[n, v, d]` token parameter tiled to `[B, n, v, d]`.
    fn batched(s: &mut Session, name: &str, batch: usize) -> Result<Var> {
        let p = s.param(name)?;
        let mut shape = vec![1];
        shape.extend_from_slice(s.tape.shape(p));
        let p = s.tape.reshape(p, &shape)?;
        s.tape.repeat(p, 0, batch)
    }

    pub fn prompt_tokens(&self, s: &mut Session, batch: usize) -> Result<Option<Var>> {
        self.prompt.as_deref().map(|n| Self::batched(s, n, batch)).transpose()
    }

    pub fn gen_token(&self, s: &mut Session, batch: usize) -> Result<Var> {
        Self::batched(s, &self.gen, batch)
    }

    pub fn cls_token(&self, s: &mut Session, batch: usize) -> Result<Var> {
        Self::batched(s, &self.cls, batch)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Spans {
    pub prompt: usize,
    pub sample: usize,
    pub gen: usize,
    pub cls: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Sample,
    Gen,
    Cls,
}

impl Spans {
    pub fn len(&self) -> usize {
        self.prompt + self.sample + self.gen + self.cls
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (start, length) of a segment within the sequence.
    pub fn range(&self, seg: Segment) -> (usize, usize) {
        match seg {
            Segment::Prompt => (0, self.prompt),
            Segment::Sample => (self.prompt, self.sample),
            Segment::Gen => (self.prompt + self.sample, self.gen),
            Segment::Cls => (self.prompt + self.sample + self.gen, self.cls),
        }
    }
}

/// Token tensor `[B, L, v, d]` with its segment layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentedTokens {
    pub data: Var,
    pub spans: Spans,
}

impl SegmentedTokens {
    pub fn segment(&self, s: &mut Session, seg: Segment) -> Result<Var> {
        let (start, len) = self.spans.range(seg);
        if len == 0 {
            return Err(Error::Contract(format!("{seg:?} segment is empty")));
        }
        s.tape.slice(self.data, 1, start, len)
    }

    /// The sequence without its CLS row.
    pub fn without_cls(&self, s: &mut Session) -> Result<SegmentedTokens> {
        if self.spans.cls == 0 {
            return Ok(*self);
        }
        let l = self.spans.len() - self.spans.cls;
        Ok(SegmentedTokens {
            data: s.tape.slice(self.data, 1, 0, l)?,
            spans: Spans { cls: 0, ..self.spans },
        })
    }
}

fn check_vars(s: &Session, z_x: Var, ts: &TokenSet) -> Result<(usize, usize)> {
    let shape = s.tape.shape(z_x);
    if shape.len() != 4 || shape[2] != ts.vars {
        return Err(Error::dim("assemble", shape, &[ts.vars]));
    }
    Ok((shape[0], shape[1]))
}

fn assemble(s: &mut Session, ts: &TokenSet, batch: usize, sample: Var, tail: Option<Var>, spans: Spans) -> Result<SegmentedTokens> {
    let mut parts = Vec::with_capacity(3);
    if let Some(p) = ts.prompt_tokens(s, batch)? {
        parts.push(p);
    }
    parts.push(sample);
    parts.extend(tail);
    Ok(SegmentedTokens {
        data: s.tape.concat(&parts, 1)?,
        spans,
    })
}

/// `[z_p | z_x | f × z_m]`
pub fn assemble_forecast(s: &mut Session, z_x: Var, ts: &TokenSet, f: usize) -> Result<SegmentedTokens> {
    if f == 0 {
        return Err(Error::Contract("forecast needs at least one GEN token".into()));
    }
    let (b, n) = check_vars(s, z_x, ts)?;
    let m = ts.gen_token(s, b)?;
    let m = s.tape.repeat(m, 1, f)?;
    let spans = Spans {
        prompt: ts.prompt_len,
        sample: n,
        gen: f,
        cls: 0,
    };
    assemble(s, ts, b, z_x, Some(m), spans)
}

/// `[z_p | z_x | z_c]`
pub fn assemble_classify(s: &mut Session, z_x: Var, ts: &TokenSet) -> Result<SegmentedTokens> {
    let (b, n) = check_vars(s, z_x, ts)?;
    let c = ts.cls_token(s, b)?;
    let spans = Spans {
        prompt: ts.prompt_len,
        sample: n,
        gen: 0,
        cls: 1,
    };
    assemble(s, ts, b, z_x, Some(c), spans)
}

/// `[z_p | ẑ_x]` where the GEN token replaces the listed sample tokens of
/// each batch element.
pub fn assemble_impute(
    s: &mut Session,
    z_x: Var,
    ts: &TokenSet,
    missing: &[Vec<usize>],
) -> Result<SegmentedTokens> {
    let (b, n) = check_vars(s, z_x, ts)?;
    let replaced = substitute_gen(s, z_x, ts, missing, b, n)?;
    let spans = Spans {
        prompt: ts.prompt_len,
        sample: n,
        gen: 0,
        cls: 0,
    };
    assemble(s, ts, b, replaced, None, spans)
}

/// `[z_p | z_x]`
pub fn assemble_anomaly(s: &mut Session, z_x: Var, ts: &TokenSet) -> Result<SegmentedTokens> {
    let (b, n) = check_vars(s, z_x, ts)?;
    let spans = Spans {
        prompt: ts.prompt_len,
        sample: n,
        gen: 0,
        cls: 0,
    };
    assemble(s, ts, b, z_x, None, spans)
}

/// Replaces sample tokens by the GEN token at per-element token indices.
pub fn substitute_gen(
    s: &mut Session,
    z_x: Var,
    ts: &TokenSet,
    missing: &[Vec<usize>],
    b: usize,
    n: usize,
) -> Result<Var> {
    if missing.len() != b {
        return Err(Error::Contract(format!(
            "{} missing-index lists for a batch of {b}",
            missing.len()
        )));
    }
    if missing.iter().all(Vec::is_empty) {
        return Ok(z_x);
    }
    let shape = s.tape.shape(z_x).to_vec();
    let row = shape[2] * shape[3];
    let mut mask = vec![false; b * n * row];
    for (bi, idx) in missing.iter().enumerate() {
        for &i in idx {
            if i >= n {
                return Err(Error::Contract(format!("missing token {i} outside sample segment of {n}")));
            }
            let start = (bi * n + i) * row;
            mask[start..start + row].iter_mut().for_each(|m| *m = true);
        }
    }
    let m = ts.gen_token(s, b)?;
    let m = s.tape.repeat(m, 1, n)?;
    s.tape.select(&mask, z_x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskScheme {
    Random,
    Right,
}

pub const MASK_RATIO_RANGE: (Scalar, Scalar) = (0.70, 0.80);
pub const TRUNCATION_RANGE: (Scalar, Scalar) = (0.5, 1.0);

/// Which sample tokens a pretraining step hides behind the GEN token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub scheme: MaskScheme,
    pub ratio: Scalar,
    /// Sorted token indices within the sample segment.
    pub masked: Vec<usize>,
    /// Fraction of the original length kept before masking.
    pub truncation: Scalar,
}

impl MaskPlan {
    pub fn realized_ratio(&self, s: usize) -> Scalar {
        self.masked.len() as Scalar / s as Scalar
    }

    pub fn is_contiguous_suffix(&self, s: usize) -> bool {
        let k = self.masked.len();
        self.masked.iter().copied().eq(s - k..s)
    }
}

/// Integer mask counts whose realized ratio stays inside the pretraining
/// range, if any exist for `s` tokens.
pub fn admissible_counts(s: usize) -> Option<(usize, usize)> {
    let n = s as Scalar;
    let lo = (MASK_RATIO_RANGE.0 * n - 1e-9).ceil() as usize;
    let hi = (MASK_RATIO_RANGE.1 * n + 1e-9).floor() as usize;
    (lo <= hi).then_some((lo, hi))
}

/// Draws a mask ratio in the pretraining range and plans `s` tokens. The
/// rounded count is pulled back into the range when `s` allows it.
pub fn plan_mask(s: usize, scheme: MaskScheme, rng: &mut Rng) -> Result<MaskPlan> {
    let ratio = rng::uniform(rng, MASK_RATIO_RANGE.0, MASK_RATIO_RANGE.1);
    let count = round_count(s, ratio);
    let count = admissible_counts(s).map_or(count, |(lo, hi)| count.clamp(lo, hi));
    plan_count(s, scheme, ratio, count, rng)
}

fn round_count(s: usize, ratio: Scalar) -> usize {
    ((ratio * s as Scalar).round() as usize).min(s)
}

/// Plans `round(ratio · s)` masked tokens; the ratio is taken as given.
pub fn plan_mask_with_ratio(s: usize, scheme: MaskScheme, ratio: Scalar, rng: &mut Rng) -> Result<MaskPlan> {
    plan_count(s, scheme, ratio, round_count(s, ratio), rng)
}

fn plan_count(s: usize, scheme: MaskScheme, ratio: Scalar, count: usize, rng: &mut Rng) -> Result<MaskPlan> {
    if s < 2 {
        return Err(Error::Contract(format!("mask planning needs at least 2 tokens, got {s}")));
    }
    let masked = match scheme {
        MaskScheme::Right => (s - count..s).collect(),
        MaskScheme::Random => {
            let mut idx = rand::seq::index::sample(rng, s, count).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    Ok(MaskPlan {
        scheme,
        ratio,
        masked,
        truncation: 1.0,
    })
}

/// Scheme chosen with equal probability, then planned.
pub fn draw_mask_plan(s: usize, rng: &mut Rng) -> Result<MaskPlan> {
    let scheme = if rng::coin(rng) {
        MaskScheme::Random
    } else {
        MaskScheme::Right
    };
    plan_mask(s, scheme, rng)
}

/// Token count kept after a truncation draw, never below two tokens.
pub fn truncated_tokens(s: usize, fraction: Scalar) -> usize {
    ((fraction * s as Scalar).ceil() as usize).clamp(2.min(s), s)
}

pub fn draw_truncation(rng: &mut Rng) -> Scalar {
    rng::uniform(rng, TRUNCATION_RANGE.0, TRUNCATION_RANGE.1)
}

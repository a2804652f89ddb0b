//! Shared output heads: the GEN tower decoding tokens into series values and
//! the CLS tower producing a class token matched against class embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::Attention;
use crate::error::{Error, Result};
use crate::nn::{DyLinearOp, Mlp, Session};
use crate::registry::ParameterRegistry;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor, Var};
use crate::tokenizer::{PatchEmbedding, Segment, SegmentedTokens, TOKEN_INIT_STD};

/// `x̂ = unpatch(h + MLP(h))` with `h = z + DyLinear(z)`, read from one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct GenTower {
    pub dylinear: DyLinearOp,
    pub mlp: Mlp,
}

impl GenTower {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, d: usize, base: usize) -> Result<Self> {
        Ok(GenTower {
            dylinear: DyLinearOp::register(reg, rng, &format!("{prefix}.dylinear"), base, base)?,
            mlp: Mlp::register(reg, rng, &format!("{prefix}.mlp"), d, 2 * d)?,
        })
    }

    /// Refined tokens for the whole sequence, before unpatching.
    pub fn features(&self, s: &mut Session, z: Var) -> Result<Var> {
        let l = s.tape.shape(z)[1];
        let mixed = self.dylinear.forward(s, z, l)?;
        let h = s.tape.add(z, mixed)?;
        let m = self.mlp.forward(s, h)?;
        s.tape.add(h, m)
    }

    /// Decodes the rows of `target` into `[B, rows·k, v]`, trimmed to `horizon`.
    pub fn forward(
        &self,
        s: &mut Session,
        z: &SegmentedTokens,
        target: Segment,
        embed: &PatchEmbedding,
        horizon: Option<usize>,
    ) -> Result<Var> {
        let (start, len) = z.spans.range(target);
        if len == 0 {
            return Err(Error::Contract(format!("GEN tower target {target:?} is empty")));
        }
        let h = self.features(s, z.data)?;
        let rows = s.tape.slice(h, 1, start, len)?;
        embed.unpatchify(s, rows, horizon)
    }
}

/// `z_c'' = z_c' + CrossAtt(z_c', z)` then `z_c = z_c'' + MLP(z_c'')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsTower {
    pub attn: Attention,
    pub mlp: Mlp,
}

impl ClsTower {
    pub fn register(reg: &mut ParameterRegistry, rng: &mut Rng, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(ClsTower {
            attn: Attention::register(reg, rng, &format!("{prefix}.attn"), d, heads)?,
            mlp: Mlp::register(reg, rng, &format!("{prefix}.mlp"), d, 2 * d)?,
        })
    }

    /// Final CLS token `[B, 1, v, d]`.
    pub fn forward(&self, s: &mut Session, z: &SegmentedTokens) -> Result<Var> {
        if z.spans.cls == 0 {
            return Err(Error::Contract("CLS tower needs a cls segment".into()));
        }
        let query = z.segment(s, Segment::Cls)?;
        let a = self.attn.cross_time(s, query, z.data)?;
        let zc = s.tape.add(query, a)?;
        let m = self.mlp.forward(s, zc)?;
        s.tape.add(zc, m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmbeddingMode {
    #[default]
    Trained,
    Averaged,
}

/// Per-task class embeddings `z_e: [n_classes, v, d]` stored in the registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    pub name: String,
    pub n_classes: usize,
    pub vars: usize,
    pub mode: EmbeddingMode,
}

impl ClassEmbeddings {
    pub fn path(task: &str) -> String {
        format!("class_embeddings.{task}")
    }

    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        task: &str,
        n_classes: usize,
        vars: usize,
        d: usize,
        mode: EmbeddingMode,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("task `{task}` needs at least 2 classes, got {n_classes}")));
        }
        let name = Self::path(task);
        reg.insert(&name, rng::normal_tensor(rng, &[n_classes, vars, d], TOKEN_INIT_STD))?;
        Ok(ClassEmbeddings {
            name,
            n_classes,
            vars,
            mode,
        })
    }

    /// Logits `−‖z_c − z_e,i‖²` for `cls: [B, 1, v, d]`, shape `[B, n_classes]`.
    pub fn logits(&self, s: &mut Session, cls: Var) -> Result<Var> {
        let shape = s.tape.shape(cls).to_vec();
        let e = s.param(&self.name)?;
        let es = s.tape.shape(e).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != es[1] || shape[3] != es[2] {
            return Err(Error::dim("class_logits", &shape, &es));
        }
        let flat = s.tape.reshape(cls, &[shape[0], es[1] * es[2]])?;
        let e = s.tape.reshape(e, &[es[0], es[1] * es[2]])?;
        let dist = s.tape.sq_dist(flat, e)?;
        Ok(s.tape.scale(dist, -1.0))
    }
}

/// Squared Euclidean distance from `z_c` to every class embedding (summed
/// over `v` and `d`).
pub fn class_distances(z_c: &Tensor, emb: &Tensor) -> Result<Vec<Scalar>> {
    let n = emb.shape()[0];
    let width = emb.numel() / n;
    if z_c.numel() != width {
        return Err(Error::dim("match_class", z_c.shape(), emb.shape()));
    }
    Ok(emb
        .data()
        .chunks(width)
        .map(|row| row.iter().zip(z_c.data()).map(|(e, c)| (c - e) * (c - e)).sum())
        .collect())
}

/// Nearest class by squared distance; ties go to the lowest index.
pub fn match_class(z_c: &Tensor, emb: &Tensor) -> Result<(usize, Vec<Scalar>)> {
    let dist = class_distances(z_c, emb)?;
    let mut best = 0;
    for (i, d) in dist.iter().enumerate() {
        if *d < dist[best] {
            best = i;
        }
    }
    Ok((best, dist))
}

/// Per-class mean of output CLS tokens, shaped `[n_classes, v, d]`.
pub fn average_class_embeddings(tokens: &[Tensor], labels: &[usize], n_classes: usize) -> Result<Tensor> {
    if tokens.len() != labels.len() {
        return Err(Error::Data(format!("{} tokens but {} labels", tokens.len(), labels.len())));
    }
    let first = tokens
        .first()
        .ok_or_else(|| Error::Data("no CLS tokens to average".into()))?;
    let width = first.numel();
    let mut sums = alloc::vec![0.0; n_classes * width];
    let mut counts = alloc::vec![0usize; n_classes];
    for (t, &y) in tokens.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::Data(format!("label {y} outside {n_classes} classes")));
        }
        if t.numel() != width {
            return Err(Error::dim("average_class_embeddings", first.shape(), t.shape()));
        }
        counts[y] += 1;
        for (acc, v) in sums[y * width..(y + 1) * width].iter_mut().zip(t.data()) {
            *acc += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    for (row, &c) in sums.chunks_mut(width).zip(&counts) {
        row.iter_mut().for_each(|v| *v /= c as Scalar);
    }
    let vd = &first.shape()[first.rank().saturating_sub(2)..];
    let mut shape = alloc::vec![n_classes];
    shape.extend_from_slice(vd);
    Tensor::new(&shape, sums)
}

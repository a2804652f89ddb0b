//! The assembled network: patch embedding, backbone, the two shared towers,
//! per-source token sets and per-task class embeddings, all living in one
//! parameter registry.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::{Backbone, BlockConfig};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::registry::ParameterRegistry;
use crate::rng::{self, Rng};
use crate::tensor::Var;
use crate::tokenizer::{
    assemble_anomaly, assemble_classify, assemble_forecast, assemble_impute, substitute_gen, PatchEmbedding,
    Segment, SegmentedTokens, TokenSet,
};
use crate::towers::{ClassEmbeddings, ClsTower, EmbeddingMode, GenTower};

pub const EMBED_PREFIX: &str = "embed";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const GEN_TOWER_PREFIX: &str = "gen_tower";
pub const CLS_TOWER_PREFIX: &str = "cls_tower";
/// The pretraining-only twin of the GEN tower.
pub const PRETRAIN_HEAD_PREFIX: &str = "pretrain_gen_tower";
pub const TOKENS_PREFIX: &str = "tokens";
pub const CLASS_PREFIX: &str = "class_embeddings";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub blocks: usize,
    pub d: usize,
    pub patch: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub dylinear_base: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 3,
            d: 64,
            patch: 16,
            heads: 4,
            prompt_len: 10,
            dylinear_base: 32,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d: self.d,
            heads: self.heads,
            dylinear_base: self.dylinear_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        if self.blocks == 0 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.max_positions < self.prompt_len + 2 {
            return Err(Error::Config(format!(
                "max_positions {} cannot hold {} prompt tokens plus a sample",
                self.max_positions, self.prompt_len
            )));
        }
        Ok(())
    }

    /// Sequence length for `t` timesteps plus `extra` GEN/CLS rows.
    pub fn sequence_len(&self, t: usize, extra: usize) -> usize {
        self.prompt_len + crate::tokenizer::token_count(t, self.patch) + extra
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub registry: ParameterRegistry,
    pub embed: PatchEmbedding,
    pub backbone: Backbone,
    pub gen_tower: GenTower,
    pub cls_tower: ClsTower,
    pub pretrain_head: Option<GenTower>,
    sources: BTreeMap<String, TokenSet>,
    classifiers: BTreeMap<String, ClassEmbeddings>,
}

/// Per-name RNG so token initialisation does not depend on the order in
/// which sources and tasks are added.
fn named_rng(seed: u64, kind: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    rng::stream(seed ^ h, kind)
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.contains('.') || name.contains(char::is_whitespace) {
        return Err(Error::Config(format!("invalid {kind} name `{name}`")));
    }
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParameterRegistry::new();
        let mut r = rng::stream(seed, 0);
        let embed = PatchEmbedding::register(&mut reg, &mut r, EMBED_PREFIX, config.patch, config.d, config.max_positions)?;
        let backbone = Backbone::register(&mut reg, &mut r, BACKBONE_PREFIX, config.blocks, config.block_config())?;
        let gen_tower = GenTower::register(&mut reg, &mut r, GEN_TOWER_PREFIX, config.d, config.dylinear_base)?;
        let cls_tower = ClsTower::register(&mut reg, &mut r, CLS_TOWER_PREFIX, config.d, config.heads)?;
        Ok(Model {
            config,
            seed,
            registry: reg,
            embed,
            backbone,
            gen_tower,
            cls_tower,
            pretrain_head: None,
            sources: BTreeMap::new(),
            classifiers: BTreeMap::new(),
        })
    }

    /// Rebuilds the structure around a loaded registry, rejecting any entry
    /// whose name or shape this config would not produce.
    pub fn from_registry(config: ModelConfig, seed: u64, registry: ParameterRegistry) -> Result<Self> {
        let mut model = Model::new(config, seed)?;
        let d = config.d;
        for name in registry.names() {
            let shape = registry.value(name)?.shape();
            let mut parts = name.splitn(3, '.');
            let (head, key) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            match head {
                TOKENS_PREFIX if name.ends_with(".gen") => {
                    if shape.len() != 3 || shape[0] != 1 || shape[2] != d {
                        return Err(Error::Registry(format!("`{name}` has shape {shape:?}")));
                    }
                    let prompt = registry.get(&format!("{TOKENS_PREFIX}.{key}.prompt")).ok();
                    let p = prompt.map_or(0, |p| p.value.shape()[0]);
                    model.sources.insert(key.into(), TokenSet::from_names(key, p, shape[1]));
                }
                CLASS_PREFIX => {
                    if shape.len() != 3 || shape[2] != d {
                        return Err(Error::Registry(format!("`{name}` has shape {shape:?}")));
                    }
                    model.classifiers.insert(
                        key.into(),
                        ClassEmbeddings {
                            name: name.into(),
                            n_classes: shape[0],
                            vars: shape[1],
                            mode: EmbeddingMode::Trained,
                        },
                    );
                }
                PRETRAIN_HEAD_PREFIX if model.pretrain_head.is_none() => {
                    model.enable_pretrain_head()?;
                }
                _ => {}
            }
        }
        for ts in model.sources.values() {
            let expected = [
                ts.prompt.clone().map(|n| (n, alloc::vec![ts.prompt_len, ts.vars, d])),
                Some((ts.gen.clone(), alloc::vec![1, ts.vars, d])),
                Some((ts.cls.clone(), alloc::vec![1, ts.vars, d])),
            ];
            for (n, shape) in expected.into_iter().flatten() {
                model.registry.insert(&n, crate::tensor::Tensor::zeros(&shape))?;
            }
        }
        for ce in model.classifiers.values() {
            model
                .registry
                .insert(&ce.name, crate::tensor::Tensor::zeros(&[ce.n_classes, ce.vars, d]))?;
        }
        let expected: Vec<String> = model.registry.names().map(String::from).collect();
        let loaded: Vec<String> = registry.names().map(String::from).collect();
        if expected != loaded {
            let stray = loaded
                .iter()
                .find(|n| !model.registry.contains(n))
                .or_else(|| expected.iter().find(|n| !registry.contains(n)));
            return Err(Error::Registry(format!(
                "checkpoint does not match model config (first differing entry: {})",
                stray.map_or("?", |s| s.as_str())
            )));
        }
        for name in &expected {
            let want = model.registry.value(name)?.shape();
            let got = registry.value(name)?.shape();
            if want != got {
                return Err(Error::Registry(format!("`{name}` has shape {got:?}, config implies {want:?}")));
            }
        }
        model.registry = registry;
        Ok(model)
    }

    /// Registers a token set for `source`; re-adding an identical source is a no-op.
    pub fn add_source(&mut self, source: &str, vars: usize) -> Result<&TokenSet> {
        check_name("source", source)?;
        if let Some(ts) = self.sources.get(source) {
            if ts.vars != vars {
                return Err(Error::Config(format!(
                    "source `{source}` already has {} variables, not {vars}",
                    ts.vars
                )));
            }
        } else {
            let mut r = named_rng(self.seed, 1, source);
            let ts = TokenSet::register(&mut self.registry, &mut r, source, self.config.prompt_len, vars, self.config.d)?;
            self.sources.insert(source.into(), ts);
        }
        Ok(&self.sources[source])
    }

    pub fn add_classifier(&mut self, task: &str, n_classes: usize, vars: usize, mode: EmbeddingMode) -> Result<&ClassEmbeddings> {
        check_name("task", task)?;
        if let Some(ce) = self.classifiers.get_mut(task) {
            if ce.n_classes != n_classes || ce.vars != vars {
                return Err(Error::Config(format!(
                    "task `{task}` already has {} classes over {} variables",
                    ce.n_classes, ce.vars
                )));
            }
            ce.mode = mode;
        } else {
            let mut r = named_rng(self.seed, 2, task);
            let ce = ClassEmbeddings::register(&mut self.registry, &mut r, task, n_classes, vars, self.config.d, mode)?;
            self.classifiers.insert(task.into(), ce);
        }
        Ok(&self.classifiers[task])
    }

    /// Adds the pretraining GEN twin with independent weights.
    pub fn enable_pretrain_head(&mut self) -> Result<()> {
        if self.pretrain_head.is_none() {
            let mut r = rng::stream(self.seed, 3);
            self.pretrain_head = Some(GenTower::register(
                &mut self.registry,
                &mut r,
                PRETRAIN_HEAD_PREFIX,
                self.config.d,
                self.config.dylinear_base,
            )?);
        }
        Ok(())
    }

    /// Drops the pretraining twin; returns how many tensors were removed.
    pub fn finish_pretraining(&mut self) -> usize {
        self.pretrain_head = None;
        self.registry.remove_prefix(PRETRAIN_HEAD_PREFIX)
    }

    pub fn source(&self, name: &str) -> Result<&TokenSet> {
        self.sources
            .get(name)
            .ok_or_else(|| Error::Registry(format!("unknown source `{name}`")))
    }

    pub fn classifier(&self, task: &str) -> Result<&ClassEmbeddings> {
        self.classifiers
            .get(task)
            .ok_or_else(|| Error::Registry(format!("unknown classification task `{task}`")))
    }

    pub fn classifier_mut(&mut self, task: &str) -> Result<&mut ClassEmbeddings> {
        self.classifiers
            .get_mut(task)
            .ok_or_else(|| Error::Registry(format!("unknown classification task `{task}`")))
    }

    pub fn sources(&self) -> impl Iterator<Item = &TokenSet> {
        self.sources.values()
    }

    pub fn classifiers(&self) -> impl Iterator<Item = &ClassEmbeddings> {
        self.classifiers.values()
    }

    // ---- tape pipelines over batches `x: [B, t, v]` ------------------------

    fn check_input(&self, s: &Session, x: Var, ts: &TokenSet) -> Result<(usize, usize)> {
        let shape = s.tape.shape(x);
        if shape.len() != 3 || shape[2] != ts.vars {
            return Err(Error::Data(format!(
                "source `{}` expects {} variables, input has shape {shape:?}",
                ts.source, ts.vars
            )));
        }
        Ok((shape[0], shape[1]))
    }

    /// Positions plus backbone over an assembled sequence.
    pub fn encode(&self, s: &mut Session, seq: SegmentedTokens) -> Result<SegmentedTokens> {
        let data = self.embed.add_positions(s, seq.data)?;
        self.backbone.forward(s, SegmentedTokens { data, spans: seq.spans })
    }

    /// Forecast `[B, horizon, v]` from `f` GEN tokens in one pass; the
    /// horizon defaults to `f·k`.
    pub fn forecast_forward(&self, s: &mut Session, source: &str, x: Var, f: usize, horizon: Option<usize>) -> Result<Var> {
        let ts = self.source(source)?;
        self.check_input(s, x, ts)?;
        let z = self.embed.embed_patches(s, x)?;
        let seq = assemble_forecast(s, z, ts, f)?;
        let out = self.encode(s, seq)?;
        self.gen_tower.forward(s, &out, Segment::Gen, &self.embed, horizon)
    }

    /// Final CLS token `[B, 1, v, d]` and logits `[B, n_classes]`.
    pub fn classify_forward(&self, s: &mut Session, source: &str, task: &str, x: Var) -> Result<(Var, Var)> {
        let ts = self.source(source)?;
        let ce = self.classifier(task)?;
        self.check_input(s, x, ts)?;
        if ce.vars != ts.vars {
            return Err(Error::Config(format!(
                "task `{task}` embeds {} variables but source `{source}` has {}",
                ce.vars, ts.vars
            )));
        }
        let z = self.embed.embed_patches(s, x)?;
        let seq = assemble_classify(s, z, ts)?;
        let out = self.encode(s, seq)?;
        let cls = self.cls_tower.forward(s, &out)?;
        let logits = ce.logits(s, cls)?;
        Ok((cls, logits))
    }

    /// Reconstruction `[B, t, v]` of the sample segment, with the GEN token
    /// standing in at each element's `missing` token indices.
    pub fn reconstruct_forward(&self, s: &mut Session, source: &str, x: Var, missing: &[Vec<usize>]) -> Result<Var> {
        let ts = self.source(source)?;
        let (_, t) = self.check_input(s, x, ts)?;
        let z = self.embed.embed_patches(s, x)?;
        let seq = if missing.iter().all(Vec::is_empty) {
            assemble_anomaly(s, z, ts)?
        } else {
            assemble_impute(s, z, ts, missing)?
        };
        let out = self.encode(s, seq)?;
        self.gen_tower.forward(s, &out, Segment::Sample, &self.embed, Some(t))
    }

    /// Both reconstructions of the unified pretraining loss, each `[B, t, v]`:
    /// the GEN tower over `[z_p | masked z_x]` and the pretraining twin over
    /// the CLS-tower token fused with the masked sample tokens.
    pub fn pretrain_forward(&self, s: &mut Session, source: &str, x: Var, masked: &[Vec<usize>]) -> Result<(Var, Var)> {
        let head = self
            .pretrain_head
            .as_ref()
            .ok_or_else(|| Error::State("pretraining head is not enabled".into()))?;
        let ts = self.source(source)?;
        let (b, t) = self.check_input(s, x, ts)?;
        let z = self.embed.embed_patches(s, x)?;
        let n = s.tape.shape(z)[1];
        let z = substitute_gen(s, z, ts, masked, b, n)?;
        let seq = assemble_classify(s, z, ts)?;
        let out = self.encode(s, seq)?;

        let gen_in = out.without_cls(s)?;
        let rec = self.gen_tower.forward(s, &gen_in, Segment::Sample, &self.embed, Some(t))?;

        let cls = self.cls_tower.forward(s, &out)?;
        let sample = out.segment(s, Segment::Sample)?;
        let fused = s.tape.concat(&[cls, sample], 1)?;
        let h = head.features(s, fused)?;
        let rows = s.tape.slice(h, 1, 1, n)?;
        let rec_cls = self.embed.unpatchify(s, rows, Some(t))?;
        Ok((rec, rec_cls))
    }
}

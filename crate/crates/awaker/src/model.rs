//! Frozen decoder-only base transformer plus the adapter placement map.
//!
//! The base has Qwen2-shaped projections (attention q/k/v/o, SwiGLU MLP
//! gate/up/down, RMS pre-norms, rotary positions) and is pretrained once on
//! a task-agnostic mix of the synthetic vocabulary, then frozen for good.
//! Adapters attach per projection: a single LoRA on q/k/v, a gated MoE on
//! o_proj and mlp_gate, and simplified MoE layers on mlp_up/mlp_down that
//! reuse the mlp_gate routing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    bind_simplified, gate_forward, moe_forward, resolve_gate, GateLayer, GateOnTape, LoraExpert,
    LoraIds, MoeAdapterLayer, MoeIds,
};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, Optimizer};
use crate::rng::Rng;
use crate::routing::{Pooling, RoutingContext, RoutingMode};
use crate::tape::{BufId, Tape};
use crate::taskgen::{TaskInstance, DIGITS, INSTR_BASE, SEP};
use crate::tensor::Tensor;
use crate::training::cosine_lr;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Instruction-token pool exercised during base pretraining.
    pub pretrain_instruction_pool: usize,
    /// Fixed foundation seed: when set, the frozen base is pretrained from
    /// this seed regardless of the run seed, mirroring a single shared
    /// foundation model across experiments.
    pub base_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // toy profile: minutes-scale CPU training with two blocks
        ModelConfig {
            vocab: 32,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            max_seq: 32,
            rope_base: 10_000.0,
            pretrain_steps: 300,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            pretrain_instruction_pool: 4,
            base_seed: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary positions",
                self.dim / self.heads
            )));
        }
        if self.vocab < INSTR_BASE + self.pretrain_instruction_pool {
            return Err(Error::Config(format!(
                "vocab {} too small for instruction tokens up to {}",
                self.vocab,
                INSTR_BASE + self.pretrain_instruction_pool
            )));
        }
        if self.max_seq < 4 {
            return Err(Error::Config("max_seq must be at least 4".into()));
        }
        Ok(())
    }
}

/// Adapter hyperparameters for MoE sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub noise_sigma: f64,
    pub top_k: usize,
    /// Coefficient of the optional load-balance loss; 0 disables it.
    pub balance_coeff: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        // toy profile keeps the published alpha/rank ratio at desk scale
        AdapterConfig {
            n_experts: 4,
            rank: 8,
            alpha: 16.0,
            temperature: 1.0,
            noise_sigma: 0.01,
            top_k: 1,
            balance_coeff: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.alpha <= 0.0 || self.temperature <= 0.0 {
            return Err(Error::Config(
                "alpha and temperature must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.balance_coeff < 0.0 {
            return Err(Error::Config(
                "noise_sigma and balance_coeff must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    pub pooling: Pooling,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            mode: RoutingMode::SharedEmbedding,
            pooling: Pooling::Mean,
        }
    }
}

/// The seven adapted projection sites of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjSite {
    Q,
    K,
    V,
    O,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl ProjSite {
    pub const ALL: [ProjSite; 7] = [
        ProjSite::Q,
        ProjSite::K,
        ProjSite::V,
        ProjSite::O,
        ProjSite::MlpGate,
        ProjSite::MlpUp,
        ProjSite::MlpDown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjSite::Q => "q",
            ProjSite::K => "k",
            ProjSite::V => "v",
            ProjSite::O => "o",
            ProjSite::MlpGate => "mlp_gate",
            ProjSite::MlpUp => "mlp_up",
            ProjSite::MlpDown => "mlp_down",
        }
    }

    /// (d_in, d_out) of the underlying projection.
    fn dims(&self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            ProjSite::Q | ProjSite::K | ProjSite::V | ProjSite::O => (cfg.dim, cfg.dim),
            ProjSite::MlpGate | ProjSite::MlpUp => (cfg.dim, cfg.mlp_hidden),
            ProjSite::MlpDown => (cfg.mlp_hidden, cfg.dim),
        }
    }
}

impl fmt::Display for ProjSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    SingleLora,
    GatedMoe,
    SimplifiedMoe { donor: ProjSite },
}

/// Per-projection adapter kinds, identical across blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMap {
    pub entries: BTreeMap<ProjSite, AdapterKind>,
}

impl PlacementMap {
    /// q/k/v single LoRA; o and mlp_gate gated MoE; mlp_up and mlp_down
    /// simplified MoE consuming the mlp_gate routing.
    pub fn moe_default() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(ProjSite::Q, AdapterKind::SingleLora);
        entries.insert(ProjSite::K, AdapterKind::SingleLora);
        entries.insert(ProjSite::V, AdapterKind::SingleLora);
        entries.insert(ProjSite::O, AdapterKind::GatedMoe);
        entries.insert(ProjSite::MlpGate, AdapterKind::GatedMoe);
        entries.insert(
            ProjSite::MlpUp,
            AdapterKind::SimplifiedMoe {
                donor: ProjSite::MlpGate,
            },
        );
        entries.insert(
            ProjSite::MlpDown,
            AdapterKind::SimplifiedMoe {
                donor: ProjSite::MlpGate,
            },
        );
        PlacementMap { entries }
    }

    /// Stage-I map: one LoRA at every site, no gates anywhere.
    pub fn single_everywhere() -> Self {
        let entries = ProjSite::ALL
            .into_iter()
            .map(|s| (s, AdapterKind::SingleLora))
            .collect();
        PlacementMap { entries }
    }

    pub fn validate(&self) -> Result<()> {
        for site in ProjSite::ALL {
            let Some(kind) = self.entries.get(&site) else {
                return Err(Error::Config(format!("placement map misses site {site}")));
            };
            if let AdapterKind::SimplifiedMoe { donor } = kind {
                match self.entries.get(donor) {
                    Some(AdapterKind::GatedMoe) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "simplified site {site} names donor {donor} which is not a gated MoE"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_moe(&self) -> bool {
        self.entries
            .values()
            .any(|k| !matches!(k, AdapterKind::SingleLora))
    }
}

// ── Base model ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct BlockWeights {
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

/// Frozen base transformer. No base parameter is ever trainable once
/// pretraining finishes.
#[derive(Debug, Clone)]
pub struct BaseModel {
    cfg: ModelConfig,
    embed: Tensor,
    blocks: Vec<BlockWeights>,
    final_norm: Tensor,
    head: Tensor,
}

pub struct BlockBaseIds {
    pub attn_norm: BufId,
    pub wq: BufId,
    pub wk: BufId,
    pub wv: BufId,
    pub wo: BufId,
    pub mlp_norm: BufId,
    pub w_gate: BufId,
    pub w_up: BufId,
    pub w_down: BufId,
}

pub struct BaseIds {
    pub embed: BufId,
    pub final_norm: BufId,
    pub head: BufId,
    pub blocks: Vec<BlockBaseIds>,
}

impl BaseModel {
    /// Random, untrained base (all weights frozen). Projections use
    /// fan-in-scaled init so the RMS-normalized stream keeps O(1) span;
    /// with the head frozen after pretraining the logits must be able to
    /// reach useful margins.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<BaseModel> {
        cfg.validate()?;
        let d_std = 1.0 / (cfg.dim as f64).sqrt();
        let h_std = 1.0 / (cfg.mlp_hidden as f64).sqrt();
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).unwrap();
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                attn_norm: ones(cfg.dim),
                wq: Tensor::randn(vec![cfg.dim, cfg.dim], d_std, rng),
                wk: Tensor::randn(vec![cfg.dim, cfg.dim], d_std, rng),
                wv: Tensor::randn(vec![cfg.dim, cfg.dim], d_std, rng),
                wo: Tensor::randn(vec![cfg.dim, cfg.dim], d_std, rng),
                mlp_norm: ones(cfg.dim),
                w_gate: Tensor::randn(vec![cfg.mlp_hidden, cfg.dim], d_std, rng),
                w_up: Tensor::randn(vec![cfg.mlp_hidden, cfg.dim], d_std, rng),
                w_down: Tensor::randn(vec![cfg.dim, cfg.mlp_hidden], h_std, rng),
            })
            .collect();
        Ok(BaseModel {
            embed: Tensor::randn(vec![cfg.vocab, cfg.dim], d_std, rng),
            blocks,
            final_norm: ones(cfg.dim),
            head: Tensor::randn(vec![cfg.vocab, cfg.dim], d_std, rng),
            cfg: cfg.clone(),
        })
    }

    /// Deterministically pretrain a base on a task-agnostic language-model
    /// mix of the synthetic vocabulary (random instruction slot, random
    /// digits, random same-length response), then freeze it.
    pub fn pretrained(cfg: &ModelConfig, seed: u64) -> Result<BaseModel> {
        let root = Rng::new(seed);
        let mut base = BaseModel::init(cfg, &mut root.split("base-init"))?;
        base.set_trainable(true);
        let mut data_rng = root.split("base-data");
        let mut opt = Optimizer::new(AdamConfig::default());
        let warmup = cfg.pretrain_steps / 10;

        for step in 0..cfg.pretrain_steps {
            let lr = cosine_lr(step, cfg.pretrain_steps, cfg.pretrain_lr, warmup)?;
            let mut tape = Tape::new();
            let (ids, names) = base.register(&mut tape);
            let mut losses = Vec::with_capacity(cfg.pretrain_batch);
            for _ in 0..cfg.pretrain_batch {
                let tokens = sample_pretrain_sequence(cfg, &mut data_rng);
                let logits = transformer_forward(&mut tape, &cfg.clone(), &ids, &tokens, None)?;
                let (targets, mask) = next_token_targets(&tokens);
                losses.push(tape.cross_entropy_masked(logits, &targets, &mask)?);
            }
            let loss = mean_scalars(&mut tape, &losses)?;
            tape.backward(loss)?;
            let lr = opt.begin_step(lr)?;
            base.visit_params_mut(&mut |name, t| {
                if t.requires_grad() {
                    if let Some(&id) = names.get(name) {
                        let g = tape
                            .take_grad(id)
                            .unwrap_or_else(|| vec![0.0; t.numel()]);
                        t.set_grad(g);
                        opt.update(name, t, lr);
                        t.clear_grad();
                    }
                }
            });
        }
        base.set_trainable(false);
        Ok(base)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embed(&self) -> &Tensor {
        &self.embed
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(&mut |_, t| t.set_requires_grad(trainable));
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("base.embed", &self.embed);
        for (b, blk) in self.blocks.iter().enumerate() {
            f(&format!("base.block{b}.attn_norm"), &blk.attn_norm);
            f(&format!("base.block{b}.wq"), &blk.wq);
            f(&format!("base.block{b}.wk"), &blk.wk);
            f(&format!("base.block{b}.wv"), &blk.wv);
            f(&format!("base.block{b}.wo"), &blk.wo);
            f(&format!("base.block{b}.mlp_norm"), &blk.mlp_norm);
            f(&format!("base.block{b}.w_gate"), &blk.w_gate);
            f(&format!("base.block{b}.w_up"), &blk.w_up);
            f(&format!("base.block{b}.w_down"), &blk.w_down);
        }
        f("base.final_norm", &self.final_norm);
        f("base.head", &self.head);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("base.embed", &mut self.embed);
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            f(&format!("base.block{b}.attn_norm"), &mut blk.attn_norm);
            f(&format!("base.block{b}.wq"), &mut blk.wq);
            f(&format!("base.block{b}.wk"), &mut blk.wk);
            f(&format!("base.block{b}.wv"), &mut blk.wv);
            f(&format!("base.block{b}.wo"), &mut blk.wo);
            f(&format!("base.block{b}.mlp_norm"), &mut blk.mlp_norm);
            f(&format!("base.block{b}.w_gate"), &mut blk.w_gate);
            f(&format!("base.block{b}.w_up"), &mut blk.w_up);
            f(&format!("base.block{b}.w_down"), &mut blk.w_down);
        }
        f("base.final_norm", &mut self.final_norm);
        f("base.head", &mut self.head);
    }

    pub fn register(&self, tape: &mut Tape) -> (BaseIds, HashMap<String, BufId>) {
        let mut names = HashMap::new();
        let embed = tape.param(&self.embed);
        names.insert("base.embed".to_string(), embed);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let mut reg = |suffix: &str, t: &Tensor, tape: &mut Tape| {
                    let id = tape.param(t);
                    names.insert(format!("base.block{b}.{suffix}"), id);
                    id
                };
                BlockBaseIds {
                    attn_norm: reg("attn_norm", &blk.attn_norm, tape),
                    wq: reg("wq", &blk.wq, tape),
                    wk: reg("wk", &blk.wk, tape),
                    wv: reg("wv", &blk.wv, tape),
                    wo: reg("wo", &blk.wo, tape),
                    mlp_norm: reg("mlp_norm", &blk.mlp_norm, tape),
                    w_gate: reg("w_gate", &blk.w_gate, tape),
                    w_up: reg("w_up", &blk.w_up, tape),
                    w_down: reg("w_down", &blk.w_down, tape),
                }
            })
            .collect();
        let final_norm = tape.param(&self.final_norm);
        names.insert("base.final_norm".to_string(), final_norm);
        let head = tape.param(&self.head);
        names.insert("base.head".to_string(), head);
        (
            BaseIds {
                embed,
                final_norm,
                head,
                blocks,
            },
            names,
        )
    }

    /// Causal LM logits of the pure base, with no adapters involved.
    pub fn forward_logits(&self, tape: &mut Tape, tokens: &[usize]) -> Result<BufId> {
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        let (ids, _) = self.register(tape);
        transformer_forward(tape, &self.cfg, &ids, tokens, None)
    }

    pub fn checksums(&self) -> BTreeMap<String, u32> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name.to_string(), t.crc32());
        });
        out
    }
}

/// One pretraining sequence in the instance format. The response slot is
/// drawn from a mix: an independently random digit string, a uniformly
/// random permutation of the input, or a cyclic rotation of the input read
/// in a uniformly random direction from a uniformly random offset. The
/// echoes teach the base to attend into the input span and to follow
/// positional chains both forward and backward; because offset, direction,
/// and permutation are resampled per sequence, no deterministic
/// input→output rule is learnable from the mix.
fn sample_pretrain_sequence(cfg: &ModelConfig, rng: &mut Rng) -> Vec<usize> {
    let hi = ((cfg.max_seq.saturating_sub(4)) / 2).min(6).max(1);
    let lo = 3.min(hi);
    let len = lo + rng.below(hi - lo + 1);
    let instr = INSTR_BASE + rng.below(cfg.pretrain_instruction_pool);
    let mut tokens = vec![instr, instr, SEP];
    let input: Vec<usize> = (0..len).map(|_| rng.below(DIGITS)).collect();
    tokens.extend_from_slice(&input);
    tokens.push(SEP);
    match rng.below(3) {
        0 => {
            for _ in 0..len {
                tokens.push(rng.below(DIGITS));
            }
        }
        1 => {
            let mut echoed = input;
            rng.shuffle(&mut echoed);
            tokens.extend_from_slice(&echoed);
        }
        _ => {
            let offset = rng.below(len);
            let forward = rng.below(2) == 0;
            for i in 0..len {
                let pos = if forward {
                    (offset + i) % len
                } else {
                    (offset + len - (i % len)) % len
                };
                tokens.push(input[pos]);
            }
        }
    }
    tokens
}

/// Next-token targets over the whole sequence (plain language modeling).
fn next_token_targets(tokens: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let len = tokens.len();
    let mut targets = vec![0usize; len];
    let mut mask = vec![false; len];
    for t in 0..len - 1 {
        targets[t] = tokens[t + 1];
        mask[t] = true;
    }
    (targets, mask)
}

pub(crate) fn mean_scalars(tape: &mut Tape, losses: &[BufId]) -> Result<BufId> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / losses.len() as f64))
}

// ── Adapted model ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum SiteAdapter {
    Single(LoraExpert),
    Moe(MoeAdapterLayer),
}

pub enum SiteIds {
    Single(LoraIds),
    Moe(MoeIds),
}

/// Base model plus attached adapters. Trainable parameters all live in the
/// adapters; the base contributes zero.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: BaseModel,
    map: PlacementMap,
    blocks: Vec<BTreeMap<ProjSite, SiteAdapter>>,
    adapter_cfg: AdapterConfig,
    routing_cfg: RoutingConfig,
}

pub struct AdaptedIds {
    pub base: BaseIds,
    pub blocks: Vec<BTreeMap<ProjSite, SiteIds>>,
    pub names: HashMap<String, BufId>,
}

impl AdaptedModel {
    /// Attach fresh adapters per the placement map. Consumes the base, so a
    /// base can be adapted at most once.
    pub fn attach(
        base: BaseModel,
        map: PlacementMap,
        adapter_cfg: AdapterConfig,
        routing_cfg: RoutingConfig,
        rng: &mut Rng,
    ) -> Result<AdaptedModel> {
        map.validate()?;
        adapter_cfg.validate()?;
        let cfg = base.cfg.clone();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for b in 0..cfg.layers {
            let mut sites: BTreeMap<ProjSite, SiteAdapter> = BTreeMap::new();
            for site in ProjSite::ALL {
                let (d_in, d_out) = site.dims(&cfg);
                let adapter = match map.entries[&site] {
                    AdapterKind::SingleLora => SiteAdapter::Single(LoraExpert::init(
                        d_in,
                        d_out,
                        adapter_cfg.rank,
                        adapter_cfg.alpha,
                        rng,
                    )?),
                    AdapterKind::GatedMoe => {
                        let gate = GateLayer::zeros(
                            adapter_cfg.n_experts,
                            cfg.dim,
                            adapter_cfg.temperature,
                            adapter_cfg.noise_sigma,
                            adapter_cfg.top_k,
                        )?;
                        SiteAdapter::Moe(MoeAdapterLayer::init(
                            layer_key(b, site),
                            adapter_cfg.n_experts,
                            d_in,
                            d_out,
                            adapter_cfg.rank,
                            adapter_cfg.alpha,
                            Some(gate),
                            rng,
                        )?)
                    }
                    AdapterKind::SimplifiedMoe { .. } => SiteAdapter::Moe(MoeAdapterLayer::init(
                        layer_key(b, site),
                        adapter_cfg.n_experts,
                        d_in,
                        d_out,
                        adapter_cfg.rank,
                        adapter_cfg.alpha,
                        None,
                        rng,
                    )?),
                };
                sites.insert(site, adapter);
            }
            bind_block_donors(&map, &mut sites)?;
            blocks.push(sites);
        }
        Ok(AdaptedModel {
            base,
            map,
            blocks,
            adapter_cfg,
            routing_cfg,
        })
    }

    /// Rebuild this (all-single-LoRA) model as a MoE model: at every MoE
    /// site all n experts and the global expert are deep copies of the
    /// stage-1 LoRA, gates start at zero, and q/k/v LoRAs carry over.
    pub fn into_moe(
        &self,
        map: PlacementMap,
        adapter_cfg: AdapterConfig,
    ) -> Result<AdaptedModel> {
        map.validate()?;
        adapter_cfg.validate()?;
        let cfg = self.base.cfg.clone();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for (b, old_sites) in self.blocks.iter().enumerate() {
            let mut sites: BTreeMap<ProjSite, SiteAdapter> = BTreeMap::new();
            for site in ProjSite::ALL {
                let SiteAdapter::Single(lora) = &old_sites[&site] else {
                    return Err(Error::Config(format!(
                        "site {site} of block {b} is not a single LoRA; expected a stage-1 model"
                    )));
                };
                let adapter = match map.entries[&site] {
                    AdapterKind::SingleLora => SiteAdapter::Single(lora.clone()),
                    AdapterKind::GatedMoe | AdapterKind::SimplifiedMoe { .. } => {
                        let gate = match map.entries[&site] {
                            AdapterKind::GatedMoe => Some(GateLayer::zeros(
                                adapter_cfg.n_experts,
                                cfg.dim,
                                adapter_cfg.temperature,
                                adapter_cfg.noise_sigma,
                                adapter_cfg.top_k,
                            )?),
                            _ => None,
                        };
                        SiteAdapter::Moe(MoeAdapterLayer {
                            id: layer_key(b, site),
                            experts: vec![lora.clone(); adapter_cfg.n_experts],
                            global: lora.clone(),
                            gate,
                            donor: None,
                        })
                    }
                };
                sites.insert(site, adapter);
            }
            bind_block_donors(&map, &mut sites)?;
            blocks.push(sites);
        }
        Ok(AdaptedModel {
            base: self.base.clone(),
            map,
            blocks,
            adapter_cfg,
            routing_cfg: self.routing_cfg,
        })
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.base.cfg
    }

    pub fn map(&self) -> &PlacementMap {
        &self.map
    }

    pub fn adapter_cfg(&self) -> &AdapterConfig {
        &self.adapter_cfg
    }

    pub fn routing(&self) -> &RoutingConfig {
        &self.routing_cfg
    }

    pub fn set_routing(&mut self, routing: RoutingConfig) {
        self.routing_cfg = routing;
    }

    pub fn site(&self, block: usize, site: ProjSite) -> &SiteAdapter {
        &self.blocks[block][&site]
    }

    pub fn site_mut(&mut self, block: usize, site: ProjSite) -> &mut SiteAdapter {
        self.blocks[block].get_mut(&site).unwrap()
    }

    /// Apply a new noise sigma to every gate (stages differ in σ).
    pub fn set_noise_sigma(&mut self, sigma: f64) {
        for sites in &mut self.blocks {
            for adapter in sites.values_mut() {
                if let SiteAdapter::Moe(layer) = adapter {
                    if let Some(gate) = &mut layer.gate {
                        gate.noise_sigma = sigma;
                    }
                }
            }
        }
    }

    pub fn set_single_loras_trainable(&mut self, trainable: bool) {
        for sites in &mut self.blocks {
            for adapter in sites.values_mut() {
                if let SiteAdapter::Single(lora) = adapter {
                    lora.set_trainable(trainable);
                }
            }
        }
    }

    pub fn set_experts_trainable(&mut self, trainable: bool) {
        for sites in &mut self.blocks {
            for adapter in sites.values_mut() {
                if let SiteAdapter::Moe(layer) = adapter {
                    layer.set_experts_trainable(trainable);
                }
            }
        }
    }

    pub fn set_gates_trainable(&mut self, trainable: bool) {
        for sites in &mut self.blocks {
            for adapter in sites.values_mut() {
                if let SiteAdapter::Moe(layer) = adapter {
                    layer.set_gate_trainable(trainable);
                }
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.base.visit_params(f);
        for (b, sites) in self.blocks.iter().enumerate() {
            for (site, adapter) in sites {
                let prefix = format!("adapter.block{b}.{site}");
                match adapter {
                    SiteAdapter::Single(lora) => {
                        f(&format!("{prefix}.single.a"), &lora.a);
                        f(&format!("{prefix}.single.b"), &lora.b);
                    }
                    SiteAdapter::Moe(layer) => {
                        for (m, e) in layer.experts.iter().enumerate() {
                            f(&format!("{prefix}.expert{m}.a"), &e.a);
                            f(&format!("{prefix}.expert{m}.b"), &e.b);
                        }
                        f(&format!("{prefix}.global.a"), &layer.global.a);
                        f(&format!("{prefix}.global.b"), &layer.global.b);
                        if let Some(gate) = &layer.gate {
                            f(&format!("{prefix}.gate"), &gate.w);
                        }
                    }
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.base.visit_params_mut(f);
        for (b, sites) in self.blocks.iter_mut().enumerate() {
            for (site, adapter) in sites.iter_mut() {
                let prefix = format!("adapter.block{b}.{site}");
                match adapter {
                    SiteAdapter::Single(lora) => {
                        f(&format!("{prefix}.single.a"), &mut lora.a);
                        f(&format!("{prefix}.single.b"), &mut lora.b);
                    }
                    SiteAdapter::Moe(layer) => {
                        for (m, e) in layer.experts.iter_mut().enumerate() {
                            f(&format!("{prefix}.expert{m}.a"), &mut e.a);
                            f(&format!("{prefix}.expert{m}.b"), &mut e.b);
                        }
                        f(&format!("{prefix}.global.a"), &mut layer.global.a);
                        f(&format!("{prefix}.global.b"), &mut layer.global.b);
                        if let Some(gate) = &mut layer.gate {
                            f(&format!("{prefix}.gate"), &mut gate.w);
                        }
                    }
                }
            }
        }
    }

    /// Exact count of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| {
            if t.requires_grad() {
                total += t.numel();
            }
        });
        total
    }

    /// Parameters active for one instance: q/k/v (and other single) LoRAs
    /// plus, per MoE site, the selected expert and the global expert.
    /// Gate weights are not counted.
    pub fn active_param_count(&self) -> usize {
        let mut total = 0;
        for sites in &self.blocks {
            for adapter in sites.values() {
                match adapter {
                    SiteAdapter::Single(lora) => total += lora.param_count(),
                    SiteAdapter::Moe(layer) => {
                        total += layer.experts[0].param_count() + layer.global.param_count();
                    }
                }
            }
        }
        total
    }

    pub fn checksums(&self) -> BTreeMap<String, u32> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name.to_string(), t.crc32());
        });
        out
    }

    pub fn register(&self, tape: &mut Tape) -> AdaptedIds {
        let (base, mut names) = self.base.register(tape);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, sites) in self.blocks.iter().enumerate() {
            let mut out: BTreeMap<ProjSite, SiteIds> = BTreeMap::new();
            for (site, adapter) in sites {
                let prefix = format!("adapter.block{b}.{site}");
                let ids = match adapter {
                    SiteAdapter::Single(lora) => {
                        let ids = lora.register(tape);
                        names.insert(format!("{prefix}.single.a"), ids.a);
                        names.insert(format!("{prefix}.single.b"), ids.b);
                        SiteIds::Single(ids)
                    }
                    SiteAdapter::Moe(layer) => {
                        let ids = layer.register(tape);
                        for (m, e) in ids.experts.iter().enumerate() {
                            names.insert(format!("{prefix}.expert{m}.a"), e.a);
                            names.insert(format!("{prefix}.expert{m}.b"), e.b);
                        }
                        names.insert(format!("{prefix}.global.a"), ids.global.a);
                        names.insert(format!("{prefix}.global.b"), ids.global.b);
                        if let Some(gw) = ids.gate_w {
                            names.insert(format!("{prefix}.gate"), gw);
                        }
                        SiteIds::Moe(ids)
                    }
                };
                out.insert(*site, ids);
            }
            blocks.push(out);
        }
        AdaptedIds {
            base,
            blocks,
            names,
        }
    }
}

fn layer_key(block: usize, site: ProjSite) -> String {
    format!("block{block}.{site}")
}

fn bind_block_donors(
    map: &PlacementMap,
    sites: &mut BTreeMap<ProjSite, SiteAdapter>,
) -> Result<()> {
    for site in ProjSite::ALL {
        if let AdapterKind::SimplifiedMoe { donor } = map.entries[&site] {
            let donor_layer = match &sites[&donor] {
                SiteAdapter::Moe(l) => l.clone(),
                SiteAdapter::Single(_) => {
                    return Err(Error::Config(format!(
                        "donor {donor} for {site} is a single LoRA"
                    )));
                }
            };
            match sites.get_mut(&site) {
                Some(SiteAdapter::Moe(consumer)) => bind_simplified(consumer, &donor_layer)?,
                _ => unreachable!("simplified sites are built as MoE layers"),
            }
        }
    }
    Ok(())
}

// ── Forward pass ─────────────────────────────────────────────────────

/// One registered forward/backward session over a model. Parameters are
/// copied onto the tape once; several instances may run in the same session
/// (their gradients accumulate through a shared loss).
pub struct ForwardPass<'m> {
    model: &'m AdaptedModel,
    tape: Tape,
    ids: AdaptedIds,
    balance_terms: Vec<(String, BufId)>,
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m AdaptedModel) -> Self {
        let mut tape = Tape::new();
        let ids = model.register(&mut tape);
        ForwardPass {
            model,
            tape,
            ids,
            balance_terms: Vec::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn tape_ref(&self) -> &Tape {
        &self.tape
    }

    /// Causal LM logits [T×V] for one instance, filling the routing log.
    pub fn run(
        &mut self,
        inst: &TaskInstance,
        ctx: &mut RoutingContext,
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<BufId> {
        inst.validate()?;
        self.run_seq(&inst.tokens, inst.resp_start, ctx, train_mode, rng)
    }

    /// Logits for a bare token sequence whose first `prompt_len` tokens form
    /// the prompt (per-layer routing pools hidden states over that span).
    pub fn run_seq(
        &mut self,
        tokens: &[usize],
        prompt_len: usize,
        ctx: &mut RoutingContext,
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<BufId> {
        if prompt_len == 0 || prompt_len > tokens.len() {
            return Err(Error::Input(format!(
                "prompt length {prompt_len} out of range for {} tokens",
                tokens.len()
            )));
        }
        let cfg = self.model.base.cfg.clone();
        if tokens.len() > cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        ctx.decisions.clear();
        let shared_gi = match ctx.mode {
            RoutingMode::SharedEmbedding => {
                if ctx.gate_input.len() != cfg.dim {
                    return Err(Error::Routing(format!(
                        "routing context carries a gate input of dim {}, model dim is {}",
                        ctx.gate_input.len(),
                        cfg.dim
                    )));
                }
                Some(self.tape.input(ctx.gate_input.clone(), vec![1, cfg.dim]))
            }
            RoutingMode::PerLayer => None,
        };
        let mut hooks = MoeHooks {
            model: self.model,
            ids: &self.ids,
            ctx,
            train_mode,
            rng,
            prompt_len,
            shared_gi,
            shares: BTreeMap::new(),
            balance_terms: &mut self.balance_terms,
        };
        transformer_forward(
            &mut self.tape,
            &cfg,
            &self.ids.base,
            tokens,
            Some(&mut hooks),
        )
    }

    /// Optional load-balance penalty over the gate evaluations recorded so
    /// far in this session: coeff · mean over gated sites of
    /// n · Σ_e mean_batch(p_e)². None when the coefficient is zero or no
    /// gate ran.
    pub fn take_balance_loss(&mut self) -> Result<Option<BufId>> {
        let coeff = self.model.adapter_cfg.balance_coeff;
        let terms = std::mem::take(&mut self.balance_terms);
        if coeff <= 0.0 || terms.is_empty() {
            return Ok(None);
        }
        let mut by_site: BTreeMap<String, Vec<BufId>> = BTreeMap::new();
        for (key, id) in terms {
            by_site.entry(key).or_default().push(id);
        }
        let n_sites = by_site.len();
        let mut site_losses = Vec::with_capacity(n_sites);
        for (_, probs) in by_site {
            let n_experts = self.tape.shape(probs[0])[1];
            let mean = mean_scalars(&mut self.tape, &probs)?;
            let sq = self.tape.mul(mean, mean)?;
            let total = self.tape.sum(sq);
            site_losses.push(self.tape.scale(total, n_experts as f64));
        }
        let avg = mean_scalars(&mut self.tape, &site_losses)?;
        Ok(Some(self.tape.scale(avg, coeff)))
    }

    /// Backward from a scalar loss; returns gradients keyed by parameter
    /// name for every registered buffer that received one.
    pub fn finish(mut self, loss: BufId) -> Result<HashMap<String, Vec<f64>>> {
        self.tape.backward(loss)?;
        let mut grads = HashMap::new();
        for (name, &id) in &self.ids.names {
            if let Some(g) = self.tape.take_grad(id) {
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

struct MoeHooks<'a, 'm> {
    model: &'m AdaptedModel,
    ids: &'a AdaptedIds,
    ctx: &'a mut RoutingContext,
    train_mode: bool,
    rng: &'a mut Rng,
    prompt_len: usize,
    shared_gi: Option<BufId>,
    /// Gate results shared within this instance, keyed by donor layer id.
    shares: BTreeMap<String, GateOnTape>,
    balance_terms: &'a mut Vec<(String, BufId)>,
}

/// Shared transformer trunk. With `hooks` present, each projection applies
/// its attached adapter; without, this is the pure frozen base.
fn transformer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    base: &BaseIds,
    tokens: &[usize],
    mut hooks: Option<&mut MoeHooks>,
) -> Result<BufId> {
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    let mut h = tape.embedding(base.embed, tokens)?;
    for b in 0..cfg.layers {
        let blk = &base.blocks[b];
        // Per-layer routing consumes the mean prompt hidden state entering
        // the block, detached from the graph.
        let block_gi = match &mut hooks {
            Some(hk) => Some(block_gate_input(tape, hk, h, cfg.dim)?),
            None => None,
        };

        let a_in = tape.rms_norm(h, blk.attn_norm, RMS_EPS)?;
        let q = projected(tape, &mut hooks, b, ProjSite::Q, a_in, blk.wq, block_gi)?;
        let k = projected(tape, &mut hooks, b, ProjSite::K, a_in, blk.wk, block_gi)?;
        let v = projected(tape, &mut hooks, b, ProjSite::V, a_in, blk.wv, block_gi)?;
        let attn = multi_head_attention(tape, cfg, q, k, v)?;
        let o = projected(tape, &mut hooks, b, ProjSite::O, attn, blk.wo, block_gi)?;
        h = tape.add(h, o)?;

        let m_in = tape.rms_norm(h, blk.mlp_norm, RMS_EPS)?;
        let g = projected(tape, &mut hooks, b, ProjSite::MlpGate, m_in, blk.w_gate, block_gi)?;
        let u = projected(tape, &mut hooks, b, ProjSite::MlpUp, m_in, blk.w_up, block_gi)?;
        let act = tape.silu(g);
        let gated = tape.mul(act, u)?;
        let down = projected(tape, &mut hooks, b, ProjSite::MlpDown, gated, blk.w_down, block_gi)?;
        h = tape.add(h, down)?;
    }
    let hn = tape.rms_norm(h, base.final_norm, RMS_EPS)?;
    tape.matmul_nt(hn, base.head)
}

fn block_gate_input(
    tape: &mut Tape,
    hooks: &mut MoeHooks,
    h: BufId,
    dim: usize,
) -> Result<BufId> {
    if let Some(gi) = hooks.shared_gi {
        return Ok(gi);
    }
    let rows = hooks.prompt_len;
    let data = tape.value(h);
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for c in 0..dim {
            mean[c] += data[r * dim + c];
        }
    }
    let inv = 1.0 / rows as f64;
    for v in &mut mean {
        *v *= inv;
    }
    Ok(tape.input(mean, vec![1, dim]))
}

fn projected(
    tape: &mut Tape,
    hooks: &mut Option<&mut MoeHooks>,
    block: usize,
    site: ProjSite,
    x: BufId,
    w: BufId,
    block_gi: Option<BufId>,
) -> Result<BufId> {
    let base_out = tape.matmul_nt(x, w)?;
    let Some(hooks) = hooks.as_deref_mut() else {
        return Ok(base_out);
    };
    let adapter = &hooks.model.blocks[block][&site];
    let ids = &hooks.ids.blocks[block][&site];
    match (adapter, ids) {
        (SiteAdapter::Single(lora), SiteIds::Single(lids)) => {
            let delta = lora.delta(tape, *lids, x)?;
            tape.add(base_out, delta)
        }
        (SiteAdapter::Moe(layer), SiteIds::Moe(mids)) => {
            let gi = block_gi.expect("gate input exists when hooks are armed");
            let gate_res = if let Some(gate) = &layer.gate {
                let g = gate_forward(
                    gate,
                    tape,
                    mids.gate_w.expect("gated layer registered its gate"),
                    gi,
                    hooks.train_mode,
                    hooks.rng,
                )?;
                if hooks.model.adapter_cfg.balance_coeff > 0.0 {
                    hooks.balance_terms.push((layer.id.clone(), g.probs));
                }
                hooks.ctx.decisions.push(crate::routing::DecisionRecord {
                    block,
                    site,
                    output: g.output.clone(),
                    reused: false,
                    gate_input: tape.value(gi).to_vec(),
                });
                hooks.shares.insert(layer.id.clone(), g.clone());
                g
            } else {
                let g = resolve_gate(layer, &hooks.shares)?.clone();
                hooks.ctx.decisions.push(crate::routing::DecisionRecord {
                    block,
                    site,
                    output: g.output.clone(),
                    reused: true,
                    gate_input: tape.value(gi).to_vec(),
                });
                g
            };
            moe_forward(layer, tape, mids, x, &gate_res, base_out)
        }
        _ => unreachable!("adapter and id variants are built together"),
    }
}

fn multi_head_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q: BufId,
    k: BufId,
    v: BufId,
) -> Result<BufId> {
    let head_dim = cfg.dim / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut parts = Vec::with_capacity(cfg.heads);
    for hix in 0..cfg.heads {
        let start = hix * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let qh = tape.rope(qh, cfg.rope_base)?;
        let kh = tape.rope(kh, cfg.rope_base)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let probs = tape.causal_row_softmax(scaled)?;
        parts.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&parts)
}

//! Three-stage training pipeline with freeze masks.
//!
//! Stage 1 trains a single LoRA at every mapped projection over the frozen
//! base. Stage 2 rebuilds each MoE site from the stage-1 LoRA (every expert
//! and the global expert start as deep copies, gates start at zero) and
//! trains experts, globals, gates, and the carried-over q/k/v LoRAs. Stage 3
//! freezes the gates and fine-tunes the experts. The complement of each
//! stage's trainable set stays byte-identical across the stage.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{mean_scalars, AdaptedModel, BaseModel, ForwardPass, PlacementMap};
use crate::optim::{AdamConfig, Optimizer};
use crate::rng::Rng;
use crate::routing::RoutingContext;
use crate::taskgen::TaskInstance;

/// Linear warmup to `base_lr`, then cosine decay to zero.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warmup: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule needs a positive total step count".into()));
    }
    if warmup > total {
        return Err(Error::Config(format!(
            "warmup {warmup} exceeds total steps {total}"
        )));
    }
    if step > total {
        return Err(Error::Config(format!(
            "step {step} beyond schedule end {total}"
        )));
    }
    if step < warmup {
        // ramp hits base_lr at the end of warmup and never emits zero
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let span = (total - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Which parameters a stage trains. The base model is frozen in every
/// stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableSet {
    /// Stage 1: the single LoRA modules only.
    SingleLora,
    /// Stage 2: experts, global experts, gates, and the q/k/v LoRAs.
    MoeAll,
    /// Stage 3: experts, global experts, and the q/k/v LoRAs; gates frozen.
    MoeExpertsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub trainable: TrainableSet,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1..=3, got {}", self.stage)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "stage {} learning rate must be positive",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let expected = match self.stage {
            1 => TrainableSet::SingleLora,
            2 => TrainableSet::MoeAll,
            _ => TrainableSet::MoeExpertsOnly,
        };
        if self.trainable != expected {
            return Err(Error::Config(format!(
                "stage {} cannot train {:?}; its trainable set is {:?}",
                self.stage, self.trainable, expected
            )));
        }
        Ok(())
    }
}

/// Config presets. The paper profile records the published hyperparameters;
/// the toy profile scales them to desk size (same alpha/rank ratio, higher
/// learning rates so the toy model fits within small step budgets).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

impl Profile {
    pub fn stage_defaults(&self) -> Vec<StageConfig> {
        let (lrs, steps): ([f64; 3], [usize; 3]) = match self {
            Profile::Toy => ([1e-3, 1e-3, 5e-4], [300, 600, 300]),
            Profile::Paper => ([1e-5, 1e-5, 5e-6], [300, 600, 300]),
        };
        vec![
            StageConfig {
                stage: 1,
                lr: lrs[0],
                steps: steps[0],
                warmup: steps[0] / 10,
                batch_size: 4,
                noise_sigma: 0.0,
                trainable: TrainableSet::SingleLora,
            },
            StageConfig {
                stage: 2,
                lr: lrs[1],
                steps: steps[1],
                warmup: steps[1] / 10,
                batch_size: 4,
                noise_sigma: 0.01,
                trainable: TrainableSet::MoeAll,
            },
            StageConfig {
                stage: 3,
                lr: lrs[2],
                steps: steps[2],
                warmup: steps[2] / 10,
                batch_size: 4,
                noise_sigma: 0.0,
                trainable: TrainableSet::MoeExpertsOnly,
            },
        ]
    }

    /// (rank, alpha) per profile; the ratio alpha/rank is 2 in both.
    pub fn lora_shape(&self) -> (usize, f64) {
        match self {
            Profile::Toy => (8, 16.0),
            Profile::Paper => (256, 512.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Data-stream RNG state at the end of the stage, recorded in
    /// checkpoints.
    pub rng_state: u64,
}

pub struct StageOutcome {
    pub model: AdaptedModel,
    pub summary: TrainSummary,
    pub optimizer: Optimizer,
}

fn apply_trainable_set(model: &mut AdaptedModel, set: TrainableSet) {
    match set {
        TrainableSet::SingleLora => {
            model.set_single_loras_trainable(true);
            model.set_experts_trainable(false);
            model.set_gates_trainable(false);
        }
        TrainableSet::MoeAll => {
            model.set_single_loras_trainable(true);
            model.set_experts_trainable(true);
            model.set_gates_trainable(true);
        }
        TrainableSet::MoeExpertsOnly => {
            model.set_single_loras_trainable(true);
            model.set_experts_trainable(true);
            model.set_gates_trainable(false);
        }
    }
}

/// Core loop: sample batches, forward each instance with its own routing
/// context, take the batch-mean loss, and step AdamW under the cosine
/// schedule. Deterministic given (model, corpus, stage, seed).
pub fn train_stage(
    model: &mut AdaptedModel,
    corpus: &[TaskInstance],
    stage: &StageConfig,
    seed: u64,
) -> Result<(TrainSummary, Optimizer)> {
    stage.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let label = format!("stage{}", stage.stage);
    let root = Rng::new(seed).split(&label);
    let mut data_rng = root.split("data");
    let mut noise_rng = root.split("noise");
    let mode = model.routing().mode;
    model.set_noise_sigma(stage.noise_sigma);

    let mut opt = Optimizer::new(AdamConfig::default());
    let mut first_loss = None;
    let mut final_loss = None;

    for step in 0..stage.steps {
        let lr = cosine_lr(step, stage.steps, stage.lr, stage.warmup)?;
        let mut pass = ForwardPass::new(model);
        let mut losses = Vec::with_capacity(stage.batch_size);
        for _ in 0..stage.batch_size {
            let inst = &corpus[data_rng.below(corpus.len())];
            let mut ctx = RoutingContext::prepare(model, inst, mode)?;
            let logits = pass.run(inst, &mut ctx, true, &mut noise_rng)?;
            let (targets, mask) = inst.targets_and_mask();
            losses.push(pass.tape().cross_entropy_masked(logits, &targets, &mask)?);
        }
        let mut loss = mean_scalars(pass.tape(), &losses)?;
        if let Some(balance) = pass.take_balance_loss()? {
            loss = pass.tape().add(loss, balance)?;
        }
        let loss_value = pass.tape_ref().value(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "{label} loss became non-finite at step {step}"
            )));
        }
        first_loss.get_or_insert(loss_value);
        final_loss = Some(loss_value);

        let mut grads = pass.finish(loss)?;
        let lr = opt.begin_step(lr)?;
        model.visit_params_mut(&mut |name, t| {
            if t.requires_grad() {
                let g = grads
                    .remove(name)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                t.set_grad(g);
                opt.update(name, t, lr);
                t.clear_grad();
            }
        });
    }

    Ok((
        TrainSummary {
            steps: stage.steps,
            first_loss,
            final_loss,
            rng_state: data_rng.state(),
        },
        opt,
    ))
}

/// Stage 1: attach one LoRA per mapped projection and train it over the
/// frozen base.
pub fn run_stage1(
    base: BaseModel,
    corpus: &[TaskInstance],
    cfg: &RunConfig,
) -> Result<StageOutcome> {
    let stage = cfg.stage(1)?;
    let mut init_rng = Rng::new(cfg.seed).split("stage1-init");
    let mut model = AdaptedModel::attach(
        base,
        PlacementMap::single_everywhere(),
        cfg.adapters,
        cfg.routing,
        &mut init_rng,
    )?;
    apply_trainable_set(&mut model, stage.trainable);
    let (summary, optimizer) = train_stage(&mut model, corpus, &stage, cfg.seed)?;
    Ok(StageOutcome {
        model,
        summary,
        optimizer,
    })
}

/// Stage-2 initialization: every MoE site's experts and global expert are
/// deep copies of the stage-1 LoRA at that site; gates start at zero;
/// q/k/v LoRAs carry over unchanged.
pub fn init_stage2_from_stage1(stage1: &AdaptedModel, cfg: &RunConfig) -> Result<AdaptedModel> {
    let mut model = stage1.into_moe(PlacementMap::moe_default(), cfg.adapters)?;
    apply_trainable_set(&mut model, TrainableSet::MoeAll);
    Ok(model)
}

/// Stage 2: train experts, global experts, gates, and q/k/v LoRAs.
pub fn run_stage2(
    model: &mut AdaptedModel,
    corpus: &[TaskInstance],
    cfg: &RunConfig,
) -> Result<(TrainSummary, Optimizer)> {
    let stage = cfg.stage(2)?;
    if !model.map().has_moe() {
        return Err(Error::Config(
            "stage 2 requires a MoE model (run stage-2 initialization first)".into(),
        ));
    }
    apply_trainable_set(model, stage.trainable);
    train_stage(model, corpus, &stage, cfg.seed)
}

/// Stage 3: freeze the gates and fine-tune the experts.
pub fn run_stage3(
    model: &mut AdaptedModel,
    corpus: &[TaskInstance],
    cfg: &RunConfig,
) -> Result<(TrainSummary, Optimizer)> {
    let stage = cfg.stage(3)?;
    if !model.map().has_moe() {
        return Err(Error::Config("stage 3 requires a MoE model".into()));
    }
    if stage.trainable == TrainableSet::MoeAll {
        return Err(Error::Config(
            "stage 3 must run with gates frozen".into(),
        ));
    }
    apply_trainable_set(model, stage.trainable);
    train_stage(model, corpus, &stage, cfg.seed)
}

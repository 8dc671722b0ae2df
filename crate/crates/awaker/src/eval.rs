//! Greedy-decoding evaluation and the multi-task conflict benchmark.
//!
//! The benchmark trains two parameter-matched arms on the identical mixed
//! corpus with identical budgets and seeds: a single LoRA whose rank is
//! chosen to match the MoE arm's ACTIVE per-instance parameter count within
//! tolerance, and the full staged MoE pipeline. Accuracies, routing
//! statistics, and both parameter counts land in the report.

use serde::{Deserialize, Serialize};

use crate::checkpoint::effective_base_seed;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, AdapterConfig, BaseModel, ForwardPass, PlacementMap, ProjSite};
use crate::rng::Rng;
use crate::routing::{routing_stats, RoutingContext, RoutingStats};
use crate::taskgen::{gen_corpus, Corpus, TaskInstance};
use crate::training::{
    init_stage2_from_stage1, run_stage1, run_stage2, run_stage3, train_stage, StageConfig,
    TrainableSet,
};

/// Greedily decode exactly `len(response)` tokens from the instance prompt
/// and return them. Evaluation runs the gates noise-free, so decoding is
/// deterministic.
pub fn greedy_response(model: &AdaptedModel, inst: &TaskInstance) -> Result<Vec<usize>> {
    inst.validate()?;
    let prompt = inst.prompt();
    let resp_len = inst.response().len();
    let vocab = model.cfg().vocab;
    let mut ctx = RoutingContext::prepare_prompt(model, prompt, model.routing().mode)?;
    let mut rng = Rng::new(0);
    let mut tokens = prompt.to_vec();
    for _ in 0..resp_len {
        let mut pass = ForwardPass::new(model);
        let logits = pass.run_seq(&tokens, prompt.len(), &mut ctx, false, &mut rng)?;
        let values = pass.tape_ref().value(logits);
        let last = &values[(tokens.len() - 1) * vocab..tokens.len() * vocab];
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best);
    }
    Ok(tokens[prompt.len()..].to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

pub struct EvalOutcome {
    pub per_task: Vec<TaskAccuracy>,
    pub mean_accuracy: f64,
    /// Final routing log per instance, in split order.
    pub logs: Vec<RoutingContext>,
    pub labels: Vec<usize>,
}

/// Exact-match accuracy over the response span, aggregated per task.
pub fn eval_accuracy(model: &AdaptedModel, split: &[TaskInstance]) -> Result<EvalOutcome> {
    if split.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let n_tasks = split.iter().map(|i| i.task).max().unwrap() + 1;
    let mut correct = vec![0usize; n_tasks];
    let mut total = vec![0usize; n_tasks];
    let mut logs = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    let mut rng = Rng::new(0);
    for inst in split {
        let decoded = greedy_response(model, inst)?;
        total[inst.task] += 1;
        if decoded == inst.response() {
            correct[inst.task] += 1;
        }
        // one clean routed pass per instance for the log
        let ctx = crate::routing::route_instance(
            model,
            inst,
            model.routing().mode,
            false,
            &mut rng,
        )?;
        logs.push(ctx);
        labels.push(inst.task);
    }
    let per_task: Vec<TaskAccuracy> = (0..n_tasks)
        .filter(|&t| total[t] > 0)
        .map(|t| TaskAccuracy {
            task: t,
            correct: correct[t],
            total: total[t],
            accuracy: correct[t] as f64 / total[t] as f64,
        })
        .collect();
    let mean_accuracy =
        per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(EvalOutcome {
        per_task,
        mean_accuracy,
        logs,
        labels,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub lora_rank: usize,
    pub trainable_params: u64,
    pub active_params: u64,
    pub total_steps: usize,
    pub final_train_loss: Option<f64>,
    pub per_task_accuracy: Vec<TaskAccuracy>,
    pub mean_accuracy: f64,
}

/// Benchmark (or single-model) evaluation report; `compare` writes this to
/// report.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub arms: Vec<ArmReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingStats>,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for arm in &self.arms {
            for t in &arm.per_task_accuracy {
                if !(0.0..=1.0).contains(&t.accuracy) {
                    return Err(Error::Numeric(format!(
                        "accuracy {} out of [0,1]",
                        t.accuracy
                    )));
                }
            }
            if !(0.0..=1.0).contains(&arm.mean_accuracy) {
                return Err(Error::Numeric(format!(
                    "mean accuracy {} out of [0,1]",
                    arm.mean_accuracy
                )));
            }
        }
        if let Some(r) = &self.routing {
            let ceiling = (self.config.tasks.kinds.len() as f64)
                .log2()
                .min((self.config.adapters.n_experts as f64).log2());
            if r.task_expert_mi_bits < -1e-9 || r.task_expert_mi_bits > ceiling + 1e-9 {
                return Err(Error::Numeric(format!(
                    "mutual information {} outside [0, {ceiling}]",
                    r.task_expert_mi_bits
                )));
            }
        }
        if self.arms.len() == 2 {
            let a = self.arms[0].active_params as f64;
            let b = self.arms[1].active_params as f64;
            let gap = (a - b).abs() / a.max(b);
            if gap > self.config.benchmark.match_tolerance {
                return Err(Error::Config(format!(
                    "active parameter counts diverge: {a} vs {b} ({:.1}% > {:.1}%)",
                    gap * 100.0,
                    self.config.benchmark.match_tolerance * 100.0
                )));
            }
        }
        Ok(())
    }
}

/// Per-block trainable scalars of a rank-r LoRA at every projection site.
fn single_lora_params_per_block(cfg: &crate::model::ModelConfig, rank: usize) -> usize {
    let (d, h) = (cfg.dim, cfg.mlp_hidden);
    // q,k,v,o: d→d; gate,up: d→h; down: h→d
    4 * rank * (d + d) + 2 * rank * (d + h) + rank * (h + d)
}

/// Rank for the single-LoRA arm whose total trainable count best matches
/// the MoE arm's active per-instance count. Errors (naming both counts) if
/// no rank lands within the tolerance.
pub fn matched_single_rank(
    cfg: &crate::model::ModelConfig,
    active_target: usize,
    tolerance: f64,
) -> Result<usize> {
    let per_rank = cfg.layers * single_lora_params_per_block(cfg, 1);
    let ideal = active_target as f64 / per_rank as f64;
    let mut best = ideal.round().max(1.0) as usize;
    // prefer the round candidate; probe neighbors for a tighter match
    for cand in [ideal.floor() as usize, ideal.ceil() as usize] {
        if cand >= 1 {
            let gap = |r: usize| {
                ((r * per_rank) as f64 - active_target as f64).abs()
            };
            if gap(cand) < gap(best) {
                best = cand;
            }
        }
    }
    let total = best * per_rank;
    let gap = (total as f64 - active_target as f64).abs() / (active_target as f64);
    if gap > tolerance {
        return Err(Error::Config(format!(
            "cannot parameter-match the arms: single-LoRA rank {best} gives {total} \
             trainable scalars vs {active_target} active ({:.2}% > {:.2}%)",
            gap * 100.0,
            tolerance * 100.0
        )));
    }
    Ok(best)
}

fn arm_report(
    name: &str,
    rank: usize,
    model: &AdaptedModel,
    total_steps: usize,
    final_train_loss: Option<f64>,
    eval: &EvalOutcome,
) -> ArmReport {
    ArmReport {
        name: name.to_string(),
        lora_rank: rank,
        trainable_params: model.count_trainable() as u64,
        active_params: model.active_param_count() as u64,
        total_steps,
        final_train_loss,
        per_task_accuracy: eval.per_task.clone(),
        mean_accuracy: eval.mean_accuracy,
    }
}

/// Full three-stage MoE pipeline on a prepared corpus: stage 1, stage-2
/// initialization from it, stage 2, stage 3. Returns the final model and
/// the last stage-3 training loss.
pub fn run_moe_pipeline(
    base: BaseModel,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(AdaptedModel, Option<f64>)> {
    let stage1 = run_stage1(base, &corpus.train, cfg)?;
    let mut model = init_stage2_from_stage1(&stage1.model, cfg)?;
    run_stage2(&mut model, &corpus.train, cfg)?;
    let (s3, _) = run_stage3(&mut model, &corpus.train, cfg)?;
    Ok((model, s3.final_loss))
}

/// The conflict benchmark for one seed. Both arms share the corpus, the
/// pretrained base, the step budget, and the data/noise seeds.
pub fn run_conflict_benchmark(cfg: &RunConfig) -> Result<EvalReport> {
    let seed = cfg.seed;
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), seed)?;
    let base = BaseModel::pretrained(&cfg.model, effective_base_seed(&cfg.model, seed))?;
    let total_steps = cfg.total_stage_steps();

    // Arm B: staged MoE pipeline.
    let (moe_model, moe_loss) = run_moe_pipeline(base.clone(), &corpus, cfg)?;
    let moe_eval = eval_accuracy(&moe_model, &corpus.test)?;
    let routing = routing_stats(
        &moe_eval.logs,
        &moe_eval.labels,
        cfg.adapters.n_experts,
        cfg.tasks.kinds.len(),
    )?;

    // Arm A: parameter-matched single LoRA, identical budget and seeds.
    let rank_a = matched_single_rank(
        &cfg.model,
        moe_model.active_param_count(),
        cfg.benchmark.match_tolerance,
    )?;
    let stage1 = cfg.stage(1)?;
    let arm_a_stage = StageConfig {
        stage: 1,
        lr: cfg.benchmark.baseline_lr.unwrap_or(stage1.lr),
        steps: total_steps,
        warmup: total_steps / 10,
        batch_size: stage1.batch_size,
        noise_sigma: 0.0,
        trainable: TrainableSet::SingleLora,
    };
    let mut single_model = AdaptedModel::attach(
        base,
        PlacementMap::single_everywhere(),
        AdapterConfig {
            rank: rank_a,
            alpha: cfg.adapters.alpha / cfg.adapters.rank as f64 * rank_a as f64,
            ..cfg.adapters
        },
        cfg.routing,
        &mut Rng::new(seed).split("arm-a-init"),
    )?;
    single_model.set_single_loras_trainable(true);
    let (arm_a_summary, _) = train_stage(&mut single_model, &corpus.train, &arm_a_stage, seed)?;
    let single_eval = eval_accuracy(&single_model, &corpus.test)?;

    let report = EvalReport {
        seed,
        arms: vec![
            arm_report(
                "single-lora",
                rank_a,
                &single_model,
                total_steps,
                arm_a_summary.final_loss,
                &single_eval,
            ),
            arm_report(
                "moe",
                cfg.adapters.rank,
                &moe_model,
                total_steps,
                moe_loss,
                &moe_eval,
            ),
        ],
        routing: Some(routing),
        config: cfg.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate one model (used by the `eval` subcommand).
pub fn eval_report(model: &AdaptedModel, split: &[TaskInstance], cfg: &RunConfig) -> Result<EvalReport> {
    let outcome = eval_accuracy(model, split)?;
    let routing = if model.map().has_moe() {
        Some(routing_stats(
            &outcome.logs,
            &outcome.labels,
            cfg.adapters.n_experts,
            cfg.tasks.kinds.len(),
        )?)
    } else {
        None
    };
    let rank = model.adapter_cfg().rank;
    let arm_name = if model.map().has_moe() { "moe" } else { "single-lora" };
    let report = EvalReport {
        seed: cfg.seed,
        arms: vec![arm_report(
            arm_name,
            rank,
            model,
            0,
            None,
            &outcome,
        )],
        routing,
        config: cfg.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Reference expert for specialization checks: the one selected at
/// block 0 mlp_gate.
pub fn reference_expert(ctx: &RoutingContext) -> Option<usize> {
    ctx.decisions
        .iter()
        .find(|d| d.block == 0 && d.site == ProjSite::MlpGate && !d.reused)
        .map(|d| d.output.selected[0])
}

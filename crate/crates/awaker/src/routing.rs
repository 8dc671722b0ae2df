//! Instance-level, stability-oriented routing.
//!
//! One gate-input vector is built per instance from the frozen embeddings of
//! its prompt (instruction + input; the response never participates) and
//! handed to every gate of the model, so all tokens of an instance share
//! each layer's routing decision. A per-layer comparison mode feeds each
//! block's gates the mean prompt hidden state from the previous layer
//! instead, to make routing instability measurable.

use serde::{Deserialize, Serialize};

use crate::adapters::GateOutput;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, ProjSite};
use crate::rng::Rng;
use crate::taskgen::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    SharedEmbedding,
    PerLayer,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-embedding" => Ok(RoutingMode::SharedEmbedding),
            "per-layer" => Ok(RoutingMode::PerLayer),
            other => Err(Error::Config(format!("unknown routing mode '{other}'"))),
        }
    }
}

/// How the prompt embedding sequence is pooled into one gate-input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    LastToken,
}

/// Instruction/response split of an instance, as token index ranges.
/// The spans are disjoint, contiguous, and cover the instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSegments {
    pub instruction: (usize, usize),
    pub response: (usize, usize),
}

impl InstanceSegments {
    pub fn of(inst: &TaskInstance) -> Result<Self> {
        inst.validate()?;
        Ok(InstanceSegments {
            instruction: (0, inst.resp_start),
            response: (inst.resp_start, inst.tokens.len()),
        })
    }
}

/// One gate decision as it happened during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub block: usize,
    pub site: ProjSite,
    pub output: GateOutput,
    /// True when the site consumed a donor's gate result (simplified MoE).
    pub reused: bool,
    /// The gate-input vector this decision saw.
    pub gate_input: Vec<f64>,
}

/// Per-instance routing context: the gate input plus the decision log the
/// forward pass fills in.
#[derive(Debug, Clone)]
pub struct RoutingContext {
    pub mode: RoutingMode,
    /// Shared gate input; empty in per-layer mode.
    pub gate_input: Vec<f64>,
    pub decisions: Vec<DecisionRecord>,
}

impl RoutingContext {
    /// Build the context for one instance. In shared-embedding mode this
    /// computes the pooled prompt embedding once; the forward pass then
    /// feeds the same vector to every gate.
    pub fn prepare(model: &AdaptedModel, inst: &TaskInstance, mode: RoutingMode) -> Result<Self> {
        inst.validate()?;
        Self::prepare_prompt(model, inst.prompt(), mode)
    }

    /// Same, from a bare prompt (used while decoding, before any response
    /// token exists).
    pub fn prepare_prompt(
        model: &AdaptedModel,
        prompt: &[usize],
        mode: RoutingMode,
    ) -> Result<Self> {
        let gate_input = match mode {
            RoutingMode::SharedEmbedding => pool_prompt(model, prompt)?,
            RoutingMode::PerLayer => Vec::new(),
        };
        Ok(RoutingContext {
            mode,
            gate_input,
            decisions: Vec::new(),
        })
    }

    /// Fresh (non-reused) decisions, the unit routing statistics count.
    pub fn fresh_decisions(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.decisions.iter().filter(|d| !d.reused)
    }
}

/// Pool the frozen token embeddings over the prompt span only. Response
/// tokens are excluded by construction.
pub fn build_gate_input(model: &AdaptedModel, inst: &TaskInstance) -> Result<Vec<f64>> {
    let segments = InstanceSegments::of(inst)?;
    let (start, end) = segments.instruction;
    pool_prompt(model, &inst.tokens[start..end])
}

/// Pooled frozen embedding of an instruction/prompt token span.
pub fn pool_prompt(model: &AdaptedModel, prompt: &[usize]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::Input("instruction span is empty".into()));
    }
    let embed = model.base().embed();
    let dim = embed.shape()[1];
    let vocab = embed.shape()[0];
    if let Some(&bad) = prompt.iter().find(|&&tok| tok >= vocab) {
        return Err(Error::Input(format!(
            "token id {bad} out of range (vocab {vocab})"
        )));
    }
    match model.routing().pooling {
        Pooling::Mean => {
            let mut acc = vec![0.0; dim];
            for &tok in prompt {
                let row = &embed.data()[tok * dim..(tok + 1) * dim];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = 1.0 / prompt.len() as f64;
            for a in &mut acc {
                *a *= inv;
            }
            Ok(acc)
        }
        Pooling::LastToken => {
            let tok = prompt[prompt.len() - 1];
            Ok(embed.data()[tok * dim..(tok + 1) * dim].to_vec())
        }
    }
}

/// Run one instance through the model in the given routing mode and return
/// the filled decision log.
pub fn route_instance(
    model: &AdaptedModel,
    inst: &TaskInstance,
    mode: RoutingMode,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<RoutingContext> {
    let mut ctx = RoutingContext::prepare(model, inst, mode)?;
    let mut pass = crate::model::ForwardPass::new(model);
    pass.run(inst, &mut ctx, train_mode, rng)?;
    Ok(ctx)
}

/// Aggregated routing behavior over a set of logged instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Routed (instance, gated-layer) events per expert, over fresh
    /// decisions; sums to the total event count.
    pub utilization: Vec<u64>,
    pub events: u64,
    /// Shannon entropy of the utilization distribution, in bits.
    pub entropy_bits: f64,
    /// Plug-in mutual information between task id and the expert selected
    /// at the reference layer (block 0 mlp_gate), in bits.
    pub task_expert_mi_bits: f64,
    /// Fraction of events whose selection differs between two logs; present
    /// only when two logs were compared.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_rate: Option<f64>,
}

/// Reference layer for specialization metrics.
pub const REFERENCE_BLOCK: usize = 0;
pub const REFERENCE_SITE: ProjSite = ProjSite::MlpGate;

fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Plug-in mutual information of an empirical joint count table, in bits.
pub fn mutual_information_bits(joint: &[Vec<u64>]) -> f64 {
    let total: u64 = joint.iter().flat_map(|r| r.iter()).sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let rows = joint.len();
    let cols = joint.first().map_or(0, Vec::len);
    let row_sums: Vec<u64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..cols)
        .map(|c| joint.iter().map(|r| r[c]).sum())
        .collect();
    let mut mi = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let j = joint[r][c];
            if j == 0 {
                continue;
            }
            let p_joint = j as f64 / n;
            let p_r = row_sums[r] as f64 / n;
            let p_c = col_sums[c] as f64 / n;
            mi += p_joint * (p_joint / (p_r * p_c)).log2();
        }
    }
    mi
}

/// Compute utilization, entropy, and task↔expert mutual information from
/// per-instance decision logs and their task labels.
pub fn routing_stats(
    logs: &[RoutingContext],
    task_labels: &[usize],
    n_experts: usize,
    n_tasks: usize,
) -> Result<RoutingStats> {
    if logs.is_empty() {
        return Err(Error::Input("routing_stats: no logged instances".into()));
    }
    if logs.len() != task_labels.len() {
        return Err(Error::Input(format!(
            "routing_stats: {} logs vs {} task labels",
            logs.len(),
            task_labels.len()
        )));
    }
    let mut utilization = vec![0u64; n_experts];
    let mut events = 0u64;
    let mut joint = vec![vec![0u64; n_experts]; n_tasks];
    for (ctx, &task) in logs.iter().zip(task_labels) {
        if task >= n_tasks {
            return Err(Error::Input(format!(
                "routing_stats: task label {task} out of range {n_tasks}"
            )));
        }
        for dec in ctx.fresh_decisions() {
            let sel = dec.output.selected[0];
            if sel >= n_experts {
                return Err(Error::Input(format!(
                    "routing_stats: expert index {sel} out of range {n_experts}"
                )));
            }
            utilization[sel] += 1;
            events += 1;
            if dec.block == REFERENCE_BLOCK && dec.site == REFERENCE_SITE {
                joint[task][sel] += 1;
            }
        }
    }
    Ok(RoutingStats {
        entropy_bits: entropy_bits(&utilization),
        task_expert_mi_bits: mutual_information_bits(&joint),
        utilization,
        events,
        flip_rate: None,
    })
}

/// Fraction of (instance, gated-layer) events whose selected expert differs
/// between two logs covering the same instances and layers.
pub fn flip_rate(a: &[RoutingContext], b: &[RoutingContext]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "flip_rate: {} vs {} instances",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0u64;
    let mut flips = 0u64;
    for (ca, cb) in a.iter().zip(b) {
        let da: Vec<&DecisionRecord> = ca.fresh_decisions().collect();
        let db: Vec<&DecisionRecord> = cb.fresh_decisions().collect();
        if da.len() != db.len() {
            return Err(Error::Input(format!(
                "flip_rate: event count mismatch ({} vs {})",
                da.len(),
                db.len()
            )));
        }
        for (x, y) in da.iter().zip(&db) {
            if (x.block, x.site) != (y.block, y.site) {
                return Err(Error::Input(format!(
                    "flip_rate: layer mismatch at block {} site {}",
                    x.block, x.site
                )));
            }
            total += 1;
            if x.output.selected[0] != y.output.selected[0] {
                flips += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("flip_rate: no events to compare".into()));
    }
    Ok(flips as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_ctx(selections: &[(usize, ProjSite, usize)]) -> RoutingContext {
        RoutingContext {
            mode: RoutingMode::SharedEmbedding,
            gate_input: vec![],
            decisions: selections
                .iter()
                .map(|&(block, site, sel)| DecisionRecord {
                    block,
                    site,
                    output: GateOutput {
                        selected: vec![sel],
                        g_experts: {
                            let mut g = vec![0.0; 4];
                            g[sel] = 0.5;
                            g
                        },
                        g_max: 0.5,
                        g_global: 0.5,
                    },
                    reused: false,
                    gate_input: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_specialization_hits_two_bits() {
        // 4 tasks, each always routed to its own expert at the reference layer
        let logs: Vec<RoutingContext> = (0..40)
            .map(|i| fake_ctx(&[(0, ProjSite::MlpGate, i % 4)]))
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let stats = routing_stats(&logs, &labels, 4, 4).unwrap();
        assert!((stats.task_expert_mi_bits - 2.0).abs() < 1e-12);
        assert_eq!(stats.events, 40);
        assert_eq!(stats.utilization.iter().sum::<u64>(), 40);
    }

    #[test]
    fn task_independent_routing_has_zero_mi() {
        // expert uniform and independent of task
        let mut logs = Vec::new();
        let mut labels = Vec::new();
        for task in 0..4 {
            for expert in 0..4 {
                logs.push(fake_ctx(&[(0, ProjSite::MlpGate, expert)]));
                labels.push(task);
            }
        }
        let stats = routing_stats(&logs, &labels, 4, 4).unwrap();
        assert!(stats.task_expert_mi_bits.abs() < 1e-12);
    }

    #[test]
    fn mi_matches_direct_summation_oracle() {
        // joint counts [[30,10],[10,30]] over 2 tasks × 2 experts.
        // Direct four-term plug-in sum, written out independently:
        let n = 80.0_f64;
        let cells = [(30.0_f64, 0usize, 0usize), (10.0, 0, 1), (10.0, 1, 0), (30.0, 1, 1)];
        let row = [40.0_f64, 40.0];
        let col = [40.0_f64, 40.0];
        let mut expected = 0.0;
        for (c, r, k) in cells {
            let pj = c / n;
            expected += pj * (pj / ((row[r] / n) * (col[k] / n))).log2();
        }

        let got = mutual_information_bits(&[vec![30, 10], vec![10, 30]]);
        assert!((got - expected).abs() < 1e-12);
        // closed form: 0.75·log2(1.5) − 0.25
        assert!((got - (0.75 * 1.5_f64.log2() - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn mi_stays_within_bounds_on_random_joints() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let tasks = 2 + rng.below(4);
            let experts = 2 + rng.below(4);
            let joint: Vec<Vec<u64>> = (0..tasks)
                .map(|_| (0..experts).map(|_| rng.below(50) as u64).collect())
                .collect();
            let mi = mutual_information_bits(&joint);
            let bound = (tasks as f64).log2().min((experts as f64).log2());
            assert!(mi >= -1e-12, "mi {mi} negative");
            assert!(mi <= bound + 1e-12, "mi {mi} above bound {bound}");
        }
    }

    #[test]
    fn flip_rate_counts_differing_events() {
        let a: Vec<RoutingContext> = (0..4)
            .map(|_| fake_ctx(&[(0, ProjSite::O, 1), (0, ProjSite::MlpGate, 2)]))
            .collect();
        assert_eq!(flip_rate(&a, &a).unwrap(), 0.0);

        let b: Vec<RoutingContext> = (0..4)
            .map(|_| fake_ctx(&[(0, ProjSite::O, 3), (0, ProjSite::MlpGate, 0)]))
            .collect();
        assert_eq!(flip_rate(&a, &b).unwrap(), 1.0);

        // one differing event out of 8
        let mut c = a.clone();
        c[2].decisions[1].output.selected = vec![0];
        assert!((flip_rate(&a, &c).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn flip_rate_rejects_mismatched_coverage() {
        let a = vec![fake_ctx(&[(0, ProjSite::O, 1)])];
        let b = vec![fake_ctx(&[(0, ProjSite::O, 1), (0, ProjSite::MlpGate, 1)])];
        assert!(matches!(flip_rate(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn empty_logs_are_input_errors() {
        assert!(matches!(
            routing_stats(&[], &[], 4, 4),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        assert!((entropy_bits(&[10, 10, 10, 10]) - 2.0).abs() < 1e-12);
        assert_eq!(entropy_bits(&[40, 0, 0, 0]), 0.0);
    }
}

//! LoRA experts and the two MoE layer variants.
//!
//! A gated layer owns n experts, one always-active global expert, and a
//! linear gate. Routing keeps the top-k softmax entries (k = 1 by default)
//! without renormalizing: the surviving maximum weights the activated
//! expert, and the global expert takes exactly `1 − G_max`. A simplified
//! layer has no gate of its own and reuses the gate result of a donor layer
//! in the same block.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Low-rank adapter: delta(x) = (alpha/rank) · (x·Aᵀ)·Bᵀ.
///
/// `a` is rank×d_in, `b` is d_out×rank. Fresh experts start with B = 0 so
/// the delta is identically zero until trained.
#[derive(Debug, Clone)]
pub struct LoraExpert {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

/// Tape handles for one expert's A/B matrices.
#[derive(Debug, Clone, Copy)]
pub struct LoraIds {
    pub a: BufId,
    pub b: BufId,
}

impl LoraExpert {
    /// A ~ N(0, 1/d_in), B = 0.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "lora dimensions must be positive (d_in={d_in}, d_out={d_out}, rank={rank})"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::Config(format!("lora alpha must be positive, got {alpha}")));
        }
        let std = (1.0 / d_in as f64).sqrt();
        Ok(LoraExpert {
            a: Tensor::randn(vec![rank, d_in], std, rng),
            b: Tensor::zeros(vec![d_out, rank]),
            rank,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.a.set_requires_grad(trainable);
        self.b.set_requires_grad(trainable);
    }

    pub fn register(&self, tape: &mut Tape) -> LoraIds {
        LoraIds {
            a: tape.param(&self.a),
            b: tape.param(&self.b),
        }
    }

    /// delta(x) applied per row of x: (alpha/rank)·(x·Aᵀ)·Bᵀ.
    pub fn delta(&self, tape: &mut Tape, ids: LoraIds, x: BufId) -> Result<BufId> {
        let xa = tape.matmul_nt(x, ids.a)?;
        let xab = tape.matmul_nt(xa, ids.b)?;
        Ok(tape.scale(xab, self.alpha / self.rank as f64))
    }
}

/// Linear gate producing routing logits over n experts.
#[derive(Debug, Clone)]
pub struct GateLayer {
    /// Gate weights, n × d_gate.
    pub w: Tensor,
    pub temperature: f64,
    pub noise_sigma: f64,
    pub top_k: usize,
}

impl GateLayer {
    pub fn zeros(n: usize, d_gate: usize, temperature: f64, noise_sigma: f64, top_k: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("gate needs at least one expert".into()));
        }
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k must be in 1..={n}, got {top_k}")));
        }
        if temperature <= 0.0 {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {temperature}"
            )));
        }
        if noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "gate noise sigma must be non-negative, got {noise_sigma}"
            )));
        }
        Ok(GateLayer {
            w: Tensor::zeros(vec![n, d_gate]),
            temperature,
            noise_sigma,
            top_k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_gate(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Routing result of one gate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Selected expert indices, highest weight first; ties broken by lowest
    /// index.
    pub selected: Vec<usize>,
    /// Length-n weights, zero outside the selected set (no renormalization).
    pub g_experts: Vec<f64>,
    /// Largest kept softmax entry.
    pub g_max: f64,
    /// Global-expert weight, exactly 1 − g_max.
    pub g_global: f64,
}

/// A gate evaluation recorded on a tape: the plain-value `GateOutput` for
/// logging plus scalar buffers so gradients flow into W_G through the
/// weights that multiply each expert's delta.
#[derive(Debug, Clone)]
pub struct GateOnTape {
    pub output: GateOutput,
    /// Full softmax row [1×n], used by the optional balance loss.
    pub probs: BufId,
    /// (expert index, scalar weight buffer) for each selected expert.
    pub expert_weights: Vec<(usize, BufId)>,
    /// Scalar buffer holding 1 − g_max.
    pub global_weight: BufId,
}

/// Evaluate a gate: logits = (W_G·x)/τ, plus N(0, σ²) noise per logit in
/// training mode, softmax, then keep the top-k entries unrenormalized.
pub fn gate_forward(
    gate: &GateLayer,
    tape: &mut Tape,
    w_id: BufId,
    gate_input: BufId,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<GateOnTape> {
    let n = gate.n_experts();
    if n == 0 {
        return Err(Error::Config("gate has no experts".into()));
    }
    // gate_input is [1×d_gate]; logits come out [1×n].
    let logits = tape.matmul_nt(gate_input, w_id)?;
    let scaled = tape.scale(logits, 1.0 / gate.temperature);
    let final_logits = if train_mode && gate.noise_sigma > 0.0 {
        let eps: Vec<f64> = (0..n)
            .map(|_| rng.normal_scaled(0.0, gate.noise_sigma))
            .collect();
        let eps_id = tape.input(eps, vec![1, n]);
        tape.add(scaled, eps_id)?
    } else {
        scaled
    };
    let probs = tape.row_softmax(final_logits)?;
    let p = tape.value(probs).to_vec();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| p[j].partial_cmp(&p[i]).unwrap().then(i.cmp(&j)));
    let selected: Vec<usize> = order[..gate.top_k].to_vec();

    let mut g_experts = vec![0.0; n];
    for &i in &selected {
        g_experts[i] = p[i];
    }
    let g_max = p[selected[0]];
    let g_global = 1.0 - g_max;

    let mut expert_weights = Vec::with_capacity(selected.len());
    for &i in &selected {
        expert_weights.push((i, tape.gather_scalar(probs, i)?));
    }
    let top = expert_weights[0].1;
    let global_weight = tape.affine(top, -1.0, 1.0);

    Ok(GateOnTape {
        output: GateOutput {
            selected,
            g_experts,
            g_max,
            g_global,
        },
        probs,
        expert_weights,
        global_weight,
    })
}

/// One adapter site: n experts + a global expert, with either its own gate
/// (standard layer) or a donor binding (simplified layer).
#[derive(Debug, Clone)]
pub struct MoeAdapterLayer {
    pub id: String,
    pub experts: Vec<LoraExpert>,
    pub global: LoraExpert,
    pub gate: Option<GateLayer>,
    pub donor: Option<String>,
}

/// Tape handles for a registered MoE layer.
pub struct MoeIds {
    pub experts: Vec<LoraIds>,
    pub global: LoraIds,
    pub gate_w: Option<BufId>,
}

impl MoeAdapterLayer {
    pub fn init(
        id: impl Into<String>,
        n: usize,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        gate: Option<GateLayer>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("MoE layer needs at least one expert".into()));
        }
        let experts = (0..n)
            .map(|_| LoraExpert::init(d_in, d_out, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        let global = LoraExpert::init(d_in, d_out, rank, alpha, rng)?;
        Ok(MoeAdapterLayer {
            id: id.into(),
            experts,
            global,
            gate,
            donor: None,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn is_simplified(&self) -> bool {
        self.gate.is_none()
    }

    pub fn register(&self, tape: &mut Tape) -> MoeIds {
        MoeIds {
            experts: self.experts.iter().map(|e| e.register(tape)).collect(),
            global: self.global.register(tape),
            gate_w: self.gate.as_ref().map(|g| tape.param(&g.w)),
        }
    }

    pub fn set_experts_trainable(&mut self, trainable: bool) {
        for e in &mut self.experts {
            e.set_trainable(trainable);
        }
        self.global.set_trainable(trainable);
    }

    pub fn set_gate_trainable(&mut self, trainable: bool) {
        if let Some(g) = &mut self.gate {
            g.w.set_requires_grad(trainable);
        }
    }
}

/// Bind a simplified (gateless) layer to a donor gated layer in the same
/// block; during a forward pass the consumer reuses the donor's gate result
/// for the same instance verbatim.
pub fn bind_simplified(consumer: &mut MoeAdapterLayer, donor: &MoeAdapterLayer) -> Result<()> {
    if donor.gate.is_none() {
        return Err(Error::Config(format!(
            "donor layer '{}' has no gate to share",
            donor.id
        )));
    }
    if consumer.gate.is_some() {
        return Err(Error::Config(format!(
            "layer '{}' has its own gate and cannot be bound to a donor",
            consumer.id
        )));
    }
    if consumer.n_experts() != donor.n_experts() {
        return Err(Error::Config(format!(
            "expert count mismatch: consumer '{}' has {}, donor '{}' has {}",
            consumer.id,
            consumer.n_experts(),
            donor.id,
            donor.n_experts()
        )));
    }
    consumer.donor = Some(donor.id.clone());
    Ok(())
}

/// Look up the gate result a layer should consume: its own when gated,
/// otherwise the bound donor's entry in `shares`.
pub fn resolve_gate<'a>(
    layer: &MoeAdapterLayer,
    shares: &'a BTreeMap<String, GateOnTape>,
) -> Result<&'a GateOnTape> {
    let key = if layer.gate.is_some() {
        &layer.id
    } else {
        layer.donor.as_ref().ok_or_else(|| {
            Error::Routing(format!(
                "simplified MoE layer '{}' is not bound to a donor gate",
                layer.id
            ))
        })?
    };
    shares.get(key).ok_or_else(|| {
        Error::Routing(format!(
            "no gate output available for layer '{}' (expected from '{key}')",
            layer.id
        ))
    })
}

/// Combine the frozen base output with the routed expert deltas:
/// y = base_out + Σ_m G_experts[m]·delta_m(x) + G_global·delta_global(x).
/// Only selected experts are evaluated.
pub fn moe_forward(
    layer: &MoeAdapterLayer,
    tape: &mut Tape,
    ids: &MoeIds,
    x: BufId,
    gate: &GateOnTape,
    base_out: BufId,
) -> Result<BufId> {
    if gate.output.g_experts.len() != layer.n_experts() {
        return Err(Error::Routing(format!(
            "gate output covers {} experts but layer '{}' has {}",
            gate.output.g_experts.len(),
            layer.id,
            layer.n_experts()
        )));
    }
    let mut y = base_out;
    for &(idx, weight) in &gate.expert_weights {
        let delta = layer.experts[idx].delta(tape, ids.experts[idx], x)?;
        let scaled = tape.scale_by(delta, weight)?;
        y = tape.add(y, scaled)?;
    }
    let gdelta = layer.global.delta(tape, ids.global, x)?;
    let gscaled = tape.scale_by(gdelta, gate.global_weight)?;
    tape.add(y, gscaled)
}

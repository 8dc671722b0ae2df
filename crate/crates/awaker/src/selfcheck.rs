//! Fast invariant battery behind the `selfcheck` subcommand.
//!
//! Each check is independent and prints one PASS/FAIL line; any failure
//! makes the whole run fail with a numeric-error exit.

use crate::adapters::{gate_forward, moe_forward, GateLayer, GateOnTape, GateOutput, LoraExpert, MoeAdapterLayer};
use crate::checkpoint::{base_seed, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, BaseModel, ForwardPass, ModelConfig, PlacementMap};
use crate::rng::Rng;
use crate::routing::{mutual_information_bits, RoutingContext};
use crate::taskgen::{gen_corpus, TaskSpec};
use crate::tape::Tape;
use crate::tensor::{softmax_row, Tensor};
use crate::training::{cosine_lr, init_stage2_from_stage1, run_stage1};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        vocab: 20,
        dim: 16,
        layers: 2,
        heads: 2,
        mlp_hidden: 24,
        max_seq: 16,
        pretrain_steps: 0,
        ..ModelConfig::default()
    };
    cfg.adapters.rank = 2;
    cfg.adapters.alpha = 4.0;
    cfg.tasks.train_per_task = 6;
    cfg.tasks.val_per_task = 1;
    cfg.tasks.test_per_task = 2;
    cfg.tasks.input_len = (2, 4);
    for stage in &mut cfg.stages {
        stage.steps = 5;
        stage.warmup = 1;
        stage.batch_size = 2;
    }
    cfg
}

fn tiny_moe_model(cfg: &RunConfig, seed: u64) -> Result<AdaptedModel> {
    let base = BaseModel::pretrained(&cfg.model, base_seed(seed))?;
    AdaptedModel::attach(
        base,
        PlacementMap::moe_default(),
        cfg.adapters,
        cfg.routing,
        &mut Rng::new(seed),
    )
}

fn ensure(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Numeric(format!("invariant violated: {what}")))
    }
}

fn check_gate_algebra() -> Result<()> {
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let n = 2 + rng.below(6);
        let d = 4;
        let gate = GateLayer {
            w: Tensor::randn(vec![n, d], 1.0, &mut rng),
            temperature: rng.range_f64(0.1, 10.0),
            noise_sigma: 0.0,
            top_k: 1,
        };
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let run = |scale: f64| -> Result<GateOutput> {
            let mut tape = Tape::new();
            let w = tape.param(&gate.w);
            let xi = tape.input(x.iter().map(|v| v * scale).collect(), vec![1, d]);
            let mut r = Rng::new(0);
            Ok(gate_forward(&gate, &mut tape, w, xi, false, &mut r)?.output)
        };
        let out = run(1.0)?;
        ensure(out.g_global == 1.0 - out.g_max, "G_global = 1 - G_max")?;
        ensure(
            (out.g_max + out.g_global - 1.0).abs() <= 1e-12,
            "selected weight + G_global = 1",
        )?;
        ensure(out.g_max > 0.0 && out.g_max <= 1.0, "0 < G_max <= 1")?;
        let scaled = run(rng.range_f64(1e-3, 1e3))?;
        ensure(scaled.selected == out.selected, "argmax scale invariance")?;
    }
    Ok(())
}

fn check_softmax() -> Result<()> {
    let mut rng = Rng::new(2);
    for _ in 0..100 {
        let n = 1 + rng.below(12);
        let v: Vec<f64> = (0..n).map(|_| rng.range_f64(-30.0, 30.0)).collect();
        let p = softmax_row(&v)?;
        ensure((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "softmax sums to 1")?;
        let c = rng.range_f64(-50.0, 50.0);
        let q = softmax_row(&v.iter().map(|x| x + c).collect::<Vec<_>>())?;
        for (a, b) in p.iter().zip(&q) {
            ensure((a - b).abs() <= 1e-12, "softmax shift invariance")?;
        }
    }
    let p = softmax_row(&[1000.0, 0.0])?;
    ensure(p[0].is_finite() && p[0] > 1.0 - 1e-12, "softmax large-logit stability")?;
    Ok(())
}

fn check_zero_init_noop() -> Result<()> {
    let cfg = tiny_config();
    let model = tiny_moe_model(&cfg, 3)?;
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), 3)?;
    for inst in corpus.test.iter().take(4) {
        let mut ctx = RoutingContext::prepare(&model, inst, cfg.routing.mode)?;
        let mut pass = ForwardPass::new(&model);
        let mut rng = Rng::new(0);
        let adapted = pass.run(inst, &mut ctx, false, &mut rng)?;
        let adapted = pass.tape_ref().value(adapted).to_vec();
        let mut tape = Tape::new();
        let base = model.base().forward_logits(&mut tape, &inst.tokens)?;
        for (a, b) in adapted.iter().zip(tape.value(base)) {
            ensure((a - b).abs() <= 1e-12, "zero-init adapters are a no-op")?;
        }
    }
    Ok(())
}

fn check_equal_experts_identity() -> Result<()> {
    let mut rng = Rng::new(4);
    let gate = GateLayer::zeros(3, 4, 1.0, 0.0, 1)?;
    let mut layer = MoeAdapterLayer::init("selfcheck.site", 3, 4, 4, 2, 4.0, Some(gate), &mut rng)?;
    let shared = LoraExpert {
        a: Tensor::randn(vec![2, 4], 0.5, &mut rng),
        b: Tensor::randn(vec![4, 2], 0.5, &mut rng),
        rank: 2,
        alpha: 4.0,
    };
    for e in layer.experts.iter_mut() {
        *e = shared.clone();
    }
    layer.global = shared.clone();
    let x_data: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let mut outputs = Vec::new();
    for forced in 0..3 {
        let mut tape = Tape::new();
        let ids = layer.register(&mut tape);
        let p = 0.4;
        let w = tape.input(vec![p], vec![1]);
        let g = tape.input(vec![1.0 - p], vec![1]);
        let mut g_experts = vec![0.0; 3];
        g_experts[forced] = p;
        let gate = GateOnTape {
            output: GateOutput {
                selected: vec![forced],
                g_experts,
                g_max: p,
                g_global: 1.0 - p,
            },
            probs: w,
            expert_weights: vec![(forced, w)],
            global_weight: g,
        };
        let x = tape.input(x_data.clone(), vec![2, 4]);
        let b = tape.input(vec![0.0; 8], vec![2, 4]);
        let y = moe_forward(&layer, &mut tape, &ids, x, &gate, b)?;
        outputs.push(tape.value(y).to_vec());
    }
    for other in &outputs[1..] {
        for (a, b) in outputs[0].iter().zip(other) {
            ensure((a - b).abs() <= 1e-10, "equal-experts routing independence")?;
        }
    }
    Ok(())
}

fn check_stage2_init_equivalence() -> Result<()> {
    let cfg = tiny_config();
    let base = BaseModel::pretrained(&cfg.model, base_seed(5))?;
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), 5)?;
    let mut cfg5 = cfg.clone();
    cfg5.seed = 5;
    let stage1 = run_stage1(base, &corpus.train, &cfg5)?;
    let stage2 = init_stage2_from_stage1(&stage1.model, &cfg5)?;
    let mut rng = Rng::new(0);
    for inst in corpus.test.iter().take(4) {
        let mut ctx1 = RoutingContext::prepare(&stage1.model, inst, cfg.routing.mode)?;
        let mut p1 = ForwardPass::new(&stage1.model);
        let l1 = p1.run(inst, &mut ctx1, false, &mut rng)?;
        let l1 = p1.tape_ref().value(l1).to_vec();

        let mut ctx2 = RoutingContext::prepare(&stage2, inst, cfg.routing.mode)?;
        let mut p2 = ForwardPass::new(&stage2);
        let l2 = p2.run(inst, &mut ctx2, false, &mut rng)?;
        for (a, b) in l1.iter().zip(p2.tape_ref().value(l2)) {
            ensure((a - b).abs() <= 1e-10, "stage-2 init preserves stage-1 logits")?;
        }
    }
    Ok(())
}

fn check_cosine_schedule() -> Result<()> {
    ensure(
        (cosine_lr(10, 110, 2e-3, 10)? - 2e-3).abs() < 1e-18,
        "peak at warmup end",
    )?;
    ensure(cosine_lr(110, 110, 2e-3, 10)?.abs() < 1e-18, "zero at schedule end")?;
    ensure(
        (cosine_lr(60, 110, 2e-3, 10)? - 1e-3).abs() < 1e-12,
        "half rate at decay midpoint",
    )?;
    ensure(cosine_lr(0, 10, 1.0, 0).is_ok(), "warmup-free schedule")?;
    ensure(cosine_lr(0, 0, 1.0, 0).is_err(), "zero total steps rejected")?;
    Ok(())
}

fn check_checkpoint_round_trip() -> Result<()> {
    let cfg = tiny_config();
    let model = tiny_moe_model(&cfg, 6)?;
    let ck = Checkpoint::from_model(&model, 2, 1, 6, 0, None);
    let bytes = ck.encode()?;
    let back = Checkpoint::decode(&bytes)?;
    ensure(back.encode()? == bytes, "checkpoint round-trip bytes")?;
    let mut corrupted = bytes.clone();
    let last = corrupted.len() - 1;
    corrupted[last] ^= 0x01;
    ensure(
        matches!(Checkpoint::decode(&corrupted), Err(Error::Checksum { .. })),
        "payload corruption detected by crc32",
    )?;
    Ok(())
}

fn check_mutual_information_oracle() -> Result<()> {
    let eps = 1e-12;
    ensure(
        (mutual_information_bits(&[vec![10, 0], vec![0, 10]]) - 1.0).abs() < eps,
        "diagonal joint is 1 bit",
    )?;
    ensure(
        mutual_information_bits(&[vec![5, 5], vec![5, 5]]).abs() < eps,
        "independent joint is 0 bits",
    )?;
    let expected = 0.75 * 1.5_f64.log2() - 0.25;
    ensure(
        (mutual_information_bits(&[vec![30, 10], vec![10, 30]]) - expected).abs() < eps,
        "plug-in estimator matches direct summation",
    )?;
    Ok(())
}

fn check_instruction_only_routing() -> Result<()> {
    let cfg = tiny_config();
    let model = tiny_moe_model(&cfg, 7)?;
    let spec = TaskSpec {
        id: 0,
        instruction: vec![12, 12],
        transform: crate::taskgen::Transform::Reverse,
        input_len: (2, 4),
        distinct_digits: false,
    };
    let mut rng = Rng::new(9);
    for _ in 0..20 {
        let input: Vec<usize> = (0..3).map(|_| rng.below(10)).collect();
        let inst_a = crate::taskgen::TaskInstance::build(&spec, &input)?;
        let mut inst_b = inst_a.clone();
        let rs = inst_b.resp_start;
        for tok in &mut inst_b.tokens[rs..] {
            *tok = (*tok + 3) % 10;
        }
        let mut r0 = Rng::new(0);
        let ctx_a =
            crate::routing::route_instance(&model, &inst_a, cfg.routing.mode, false, &mut r0)?;
        let ctx_b =
            crate::routing::route_instance(&model, &inst_b, cfg.routing.mode, false, &mut r0)?;
        for (da, db) in ctx_a.decisions.iter().zip(&ctx_b.decisions) {
            ensure(da.output == db.output, "response tokens never change routing")?;
        }
    }
    Ok(())
}

/// Run every check, printing one line each. Returns an error if any failed.
pub fn run(out: &mut dyn std::io::Write) -> Result<()> {
    let checks: Vec<(&str, fn() -> Result<()>)> = vec![
        ("gate-algebra", check_gate_algebra),
        ("softmax", check_softmax),
        ("zero-init-noop", check_zero_init_noop),
        ("equal-experts-identity", check_equal_experts_identity),
        ("stage2-init-equivalence", check_stage2_init_equivalence),
        ("cosine-schedule", check_cosine_schedule),
        ("checkpoint-round-trip", check_checkpoint_round_trip),
        ("mutual-information", check_mutual_information_oracle),
        ("instruction-only-routing", check_instruction_only_routing),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => {
                let _ = writeln!(out, "[ PASS ] {name}");
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(out, "[ FAIL ] {name}: {e}");
            }
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} selfcheck(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    #[test]
    fn selfcheck_passes_on_a_fresh_build() {
        let mut out = Vec::new();
        super::run(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().count() >= 9);
        assert!(!text.contains("FAIL"));
    }
}

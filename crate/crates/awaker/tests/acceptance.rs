//! Acceptance suite: one test per criterion, each printing a pass line with
//! its measured numbers and asserting both the tolerance and the stated
//! runtime bound.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use awaker::adapters::{gate_forward, GateLayer, GateOutput};
use awaker::checkpoint::{base_seed, Checkpoint};
use awaker::config::RunConfig;
use awaker::error::Error;
use awaker::eval::run_conflict_benchmark;
use awaker::model::{
    AdaptedModel, AdapterConfig, BaseModel, ForwardPass, ModelConfig, PlacementMap, ProjSite,
    RoutingConfig,
};
use awaker::rng::Rng;
use awaker::routing::{route_instance, RoutingContext};
use awaker::taskgen::{gen_corpus, TaskInstance, TaskSpec, Transform};
use awaker::tape::Tape;
use awaker::training::{init_stage2_from_stage1, run_stage1, run_stage2, run_stage3};

fn pass(criterion: &str, elapsed: Duration, detail: &str) {
    println!("[PASS] {criterion}: {detail} ({:.2}s)", elapsed.as_secs_f64());
}

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        pretrain_steps: 0,
        ..ModelConfig::default()
    }
}

fn toy_model(seed: u64, adapters: AdapterConfig) -> AdaptedModel {
    let base = BaseModel::pretrained(&toy_cfg(), base_seed(seed)).unwrap();
    AdaptedModel::attach(
        base,
        PlacementMap::moe_default(),
        adapters,
        RoutingConfig::default(),
        &mut Rng::new(seed).split("attach"),
    )
    .unwrap()
}

fn random_instance(rng: &mut Rng, task: usize) -> TaskInstance {
    let spec = TaskSpec {
        id: task,
        instruction: vec![12 + task, 12 + task],
        transform: match task {
            0 => Transform::Copy,
            1 => Transform::Reverse,
            2 => Transform::IncrementMod10,
            _ => Transform::SortAscending,
        },
        input_len: (3, 6),
        distinct_digits: false,
    };
    let len = 3 + rng.below(4);
    let input: Vec<usize> = (0..len).map(|_| rng.below(10)).collect();
    TaskInstance::build(&spec, &input).unwrap()
}

fn logits_of(model: &AdaptedModel, inst: &TaskInstance) -> Vec<f64> {
    let mut ctx = RoutingContext::prepare(model, inst, model.routing().mode).unwrap();
    let mut pass = ForwardPass::new(model);
    let mut rng = Rng::new(0);
    let id = pass.run(inst, &mut ctx, false, &mut rng).unwrap();
    pass.tape_ref().value(id).to_vec()
}

/// Criterion 1 — gate algebra over 1,000 random draws.
#[test]
fn criterion_01_gate_algebra() {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    for _ in 0..1000 {
        let n = 2 + rng.below(7);
        let d = 6;
        let tau = rng.range_f64(0.1, 10.0);
        let gate = GateLayer {
            w: awaker::tensor::Tensor::randn(vec![n, d], 1.0, &mut rng),
            temperature: tau,
            noise_sigma: 0.0,
            top_k: 1,
        };
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let run = |scale: f64| -> GateOutput {
            let mut tape = Tape::new();
            let w = tape.param(&gate.w);
            let xi = tape.input(x.iter().map(|v| v * scale).collect(), vec![1, d]);
            let mut r = Rng::new(0);
            gate_forward(&gate, &mut tape, w, xi, false, &mut r)
                .unwrap()
                .output
        };
        let out = run(1.0);
        // Eq. (2) exactly, as floating-point identity
        assert!(out.g_global == 1.0 - out.g_max);
        assert!((out.g_max + out.g_global - 1.0).abs() <= 1e-12);
        assert!(out.g_max > 0.0 && out.g_max <= 1.0);
        let scaled = run(rng.range_f64(1e-3, 1e3));
        assert_eq!(scaled.selected, out.selected, "argmax not scale-invariant");
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    pass(
        "criterion 1 (gate algebra)",
        elapsed,
        "1000 draws: G_global = 1 - G_max exact, sums within 1e-12, argmax scale-invariant",
    );
}

/// Criterion 2 — zero-initialized adapters leave the frozen base exact.
#[test]
fn criterion_02_zero_init_noop() {
    let start = Instant::now();
    let model = toy_model(202, AdapterConfig::default());
    let mut rng = Rng::new(202);
    let mut max_diff = 0.0f64;
    for i in 0..50 {
        let inst = random_instance(&mut rng, i % 4);
        let adapted = logits_of(&model, &inst);
        let mut tape = Tape::new();
        let base_id = model.base().forward_logits(&mut tape, &inst.tokens).unwrap();
        for (a, b) in adapted.iter().zip(tape.value(base_id)) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff <= 1e-12, "max |diff| = {max_diff:e}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    pass(
        "criterion 2 (zero-init no-op)",
        elapsed,
        &format!("50 instances, max |adapted - base| = {max_diff:e} <= 1e-12"),
    );
}

/// Criterion 3 — stage-2 initialization preserves stage-1 logits.
#[test]
fn criterion_03_stage2_init_equivalence() {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.seed = 303;
    cfg.model.pretrain_steps = 50;
    cfg.tasks.train_per_task = 100;
    cfg.tasks.val_per_task = 4;
    cfg.tasks.test_per_task = 16;
    cfg.stages[0].steps = 80;
    cfg.stages[0].warmup = 8;
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), cfg.seed).unwrap();
    let base = BaseModel::pretrained(&cfg.model, base_seed(cfg.seed)).unwrap();
    let stage1 = run_stage1(base, &corpus.train, &cfg).unwrap();
    let stage2 = init_stage2_from_stage1(&stage1.model, &cfg).unwrap();

    let mut rng = Rng::new(303);
    let mut max_diff = 0.0f64;
    for i in 0..50 {
        let inst = random_instance(&mut rng, i % 4);
        let l1 = logits_of(&stage1.model, &inst);
        let l2 = logits_of(&stage2, &inst);
        for (a, b) in l1.iter().zip(&l2) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff <= 1e-10, "max |diff| = {max_diff:e}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    pass(
        "criterion 3 (stage-2 init equivalence)",
        elapsed,
        &format!("50 instances, max |stage2 - stage1| = {max_diff:e} <= 1e-10"),
    );
}

/// Criterion 4 — analytic gradients vs central finite differences for every
/// adapter parameter type and the gate weights, on a 1-block model.
#[test]
fn criterion_04_gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab: 20,
        dim: 16,
        layers: 1,
        heads: 2,
        mlp_hidden: 24,
        max_seq: 16,
        pretrain_steps: 0,
        ..ModelConfig::default()
    };
    let adapters = AdapterConfig {
        n_experts: 2,
        rank: 2,
        alpha: 4.0,
        noise_sigma: 0.0,
        ..AdapterConfig::default()
    };

    let mut worst: f64 = 0.0;
    let mut classes_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut classes_nonzero: std::collections::BTreeSet<String> = Default::default();
    for seed in 0..20u64 {
        let base = BaseModel::pretrained(&cfg, base_seed(seed)).unwrap();
        let mut model = AdaptedModel::attach(
            base,
            PlacementMap::moe_default(),
            adapters,
            RoutingConfig::default(),
            &mut Rng::new(seed).split("attach"),
        )
        .unwrap();
        // give every adapter parameter (incl. B matrices and gates) a
        // nonzero value so each gradient path is active
        let mut prng = Rng::new(seed).split("randomize");
        model.visit_params_mut(&mut |name, t| {
            if name.starts_with("adapter.") {
                for v in t.data_mut() {
                    *v = prng.normal() * 0.4;
                }
                t.set_requires_grad(true);
            }
        });
        let mut irng = Rng::new(seed).split("inst");
        let inst = random_instance(&mut irng, (seed % 4) as usize);
        let (targets, mask) = inst.targets_and_mask();

        let loss_of = |m: &AdaptedModel| -> f64 {
            let mut ctx = RoutingContext::prepare(m, &inst, m.routing().mode).unwrap();
            let mut pass = ForwardPass::new(m);
            let mut r = Rng::new(0);
            let logits = pass.run(&inst, &mut ctx, false, &mut r).unwrap();
            let l = pass
                .tape()
                .cross_entropy_masked(logits, &targets, &mask)
                .unwrap();
            pass.tape_ref().value(l)[0]
        };

        // analytic gradients
        let mut ctx = RoutingContext::prepare(&model, &inst, model.routing().mode).unwrap();
        let mut fwd = ForwardPass::new(&model);
        let mut r = Rng::new(0);
        let logits = fwd.run(&inst, &mut ctx, false, &mut r).unwrap();
        let loss = fwd
            .tape()
            .cross_entropy_masked(logits, &targets, &mask)
            .unwrap();
        let grads = fwd.finish(loss).unwrap();

        // parameter names and shapes, gathered without holding borrows
        let mut params: Vec<(String, usize)> = Vec::new();
        model.visit_params(&mut |name, t| {
            if name.starts_with("adapter.") {
                params.push((name.to_string(), t.numel()));
            }
        });

        let h = 1e-5;
        for (name, numel) in params {
            let class = name
                .rsplit('.')
                .next()
                .map(|leaf| {
                    let kind = if name.contains(".single.") {
                        "single"
                    } else if name.contains(".expert") {
                        "expert"
                    } else if name.contains(".global.") {
                        "global"
                    } else {
                        "gate"
                    };
                    format!("{kind}.{leaf}")
                })
                .unwrap();
            *classes_seen.entry(class.clone()).or_insert(0) += 1;
            // with k=1, experts outside the selected set receive no
            // gradient at all; their analytic gradient is exactly zero
            let zeros = vec![0.0; numel];
            let g = grads.get(&name).map_or(zeros.as_slice(), Vec::as_slice);
            if g.iter().any(|&v| v != 0.0) {
                classes_nonzero.insert(class);
            }
            // a handful of coordinates per tensor
            let probes = numel.min(4);
            for p in 0..probes {
                let idx = (p * 97) % numel;
                let mut bump = |delta: f64| -> f64 {
                    let mut m2 = model.clone();
                    m2.visit_params_mut(&mut |n, t| {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    });
                    loss_of(&m2)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = g[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                worst = worst.max(rel);
                assert!(
                    rel <= 1e-4,
                    "seed {seed} {name}[{idx}]: analytic {a} vs fd {fd} (rel {rel:e})"
                );
            }
        }
    }
    // every adapter parameter type took part, with live gradient flow
    for class in [
        "single.a", "single.b", "expert.a", "expert.b", "global.a", "global.b", "gate.gate",
    ] {
        assert!(classes_seen.contains_key(class), "missing class {class}");
        assert!(
            classes_nonzero.contains(class),
            "class {class} never received a nonzero gradient"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(
        "criterion 4 (gradient correctness)",
        elapsed,
        &format!("20 seeds, all adapter classes, max relative error {worst:e} <= 1e-4"),
    );
}

/// Criterion 5 — instance-level, instruction-only routing.
#[test]
fn criterion_05_instance_level_instruction_only_routing() {
    let start = Instant::now();
    let model = toy_model(505, AdapterConfig::default());
    let mut rng = Rng::new(505);
    let mut checked = 0;
    for i in 0..200 {
        let inst_a = random_instance(&mut rng, i % 4);
        let mut inst_b = inst_a.clone();
        let rs = inst_b.resp_start;
        for tok in &mut inst_b.tokens[rs..] {
            *tok = (*tok + 1 + rng.below(9)) % 10;
        }
        let mut r0 = Rng::new(0);
        let ctx_a = route_instance(&model, &inst_a, model.routing().mode, false, &mut r0).unwrap();
        let ctx_b = route_instance(&model, &inst_b, model.routing().mode, false, &mut r0).unwrap();

        // identical logs despite different response tokens
        assert_eq!(ctx_a.decisions.len(), ctx_b.decisions.len());
        for (da, db) in ctx_a.decisions.iter().zip(&ctx_b.decisions) {
            assert_eq!(da.output, db.output);
            assert_eq!((da.block, da.site, da.reused), (db.block, db.site, db.reused));
        }

        // structural: exactly one fresh GateOutput per (instance, gated layer)
        let fresh: Vec<_> = ctx_a.fresh_decisions().collect();
        assert_eq!(fresh.len(), 2 * model.cfg().layers);
        let mut seen = std::collections::BTreeSet::new();
        for d in &fresh {
            assert!(seen.insert((d.block, d.site)), "duplicate decision");
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    pass(
        "criterion 5 (instance-level routing)",
        elapsed,
        &format!("{checked}/200 response-permuted pairs routed identically"),
    );
}

/// Criterion 6 — mlp_up and mlp_down consume mlp_gate's decision verbatim.
#[test]
fn criterion_06_shared_gate_contract() {
    let start = Instant::now();
    let model = toy_model(606, AdapterConfig::default());
    let mut rng = Rng::new(606);
    let mut events = 0;
    for i in 0..100 {
        let inst = random_instance(&mut rng, i % 4);
        let mut r0 = Rng::new(0);
        let ctx = route_instance(&model, &inst, model.routing().mode, false, &mut r0).unwrap();
        for b in 0..model.cfg().layers {
            let find = |site: ProjSite| {
                ctx.decisions
                    .iter()
                    .find(|d| d.block == b && d.site == site)
                    .unwrap()
            };
            let donor = find(ProjSite::MlpGate);
            assert!(!donor.reused);
            for site in [ProjSite::MlpUp, ProjSite::MlpDown] {
                let consumer = find(site);
                assert!(consumer.reused);
                assert_eq!(consumer.output, donor.output);
                events += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    pass(
        "criterion 6 (shared-gate contract)",
        elapsed,
        &format!("{events}/{events} up/down events identical to mlp_gate"),
    );
}

/// Criterion 7 — per-stage freeze discipline, verified by checksums.
#[test]
fn criterion_07_freeze_discipline() {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.seed = 707;
    cfg.model.pretrain_steps = 30;
    cfg.tasks.train_per_task = 60;
    cfg.tasks.val_per_task = 2;
    cfg.tasks.test_per_task = 8;
    for (stage, steps) in cfg.stages.iter_mut().zip([20usize, 30, 20]) {
        stage.steps = steps;
        stage.warmup = steps / 10;
    }
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), cfg.seed).unwrap();
    let base = BaseModel::pretrained(&cfg.model, base_seed(cfg.seed)).unwrap();
    let base_sums = base.checksums();

    let changed = |before: &BTreeMap<String, u32>, after: &BTreeMap<String, u32>| -> Vec<String> {
        before
            .iter()
            .filter(|(k, v)| after.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    };

    // Stage 1
    let outcome = run_stage1(base, &corpus.train, &cfg).unwrap();
    let sums1 = outcome.model.checksums();
    for (name, crc) in &base_sums {
        assert_eq!(sums1[name], *crc, "stage 1 touched {name}");
    }

    // Stage 2
    let mut model = init_stage2_from_stage1(&outcome.model, &cfg).unwrap();
    let before2 = model.checksums();
    run_stage2(&mut model, &corpus.train, &cfg).unwrap();
    let after2 = model.checksums();
    let delta2 = changed(&before2, &after2);
    assert!(delta2.iter().all(|n| n.starts_with("adapter.")));
    for (name, crc) in &base_sums {
        assert_eq!(after2[name], *crc, "stage 2 touched {name}");
    }

    // Stage 3: gates byte-identical before and after
    let before3 = model.checksums();
    run_stage3(&mut model, &corpus.train, &cfg).unwrap();
    let after3 = model.checksums();
    let delta3 = changed(&before3, &after3);
    assert!(delta3.iter().all(|n| n.starts_with("adapter.") && !n.ends_with(".gate")));
    for (name, crc) in &before3 {
        if name.ends_with(".gate") {
            assert_eq!(after3[name], *crc, "stage 3 touched gate {name}");
        }
    }
    for (name, crc) in &base_sums {
        assert_eq!(after3[name], *crc, "stage 3 touched {name}");
    }

    let elapsed = start.elapsed();
    pass(
        "criterion 7 (freeze discipline)",
        elapsed,
        &format!(
            "base identical across 3 stages; stage-2 changed {} adapter tensors; stage-3 gates untouched",
            delta2.len()
        ),
    );
}

/// Criterion 8 — checkpoint round trip and corruption detection.
#[test]
fn criterion_08_checkpoint_round_trip() {
    let start = Instant::now();
    let mut model = toy_model(808, AdapterConfig::default());
    let mut prng = Rng::new(808);
    model.visit_params_mut(&mut |name, t| {
        if name.starts_with("adapter.") {
            for v in t.data_mut() {
                *v = prng.normal();
            }
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::from_model(&model, 2, 9, 808, 77, None);
    let p1 = dir.path().join("a.awck");
    let p2 = dir.path().join("b.awck");
    ck.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let bytes1 = std::fs::read(&p1).unwrap();
    let bytes2 = std::fs::read(&p2).unwrap();
    assert_eq!(bytes1, bytes2, "save -> load -> save must be byte-identical");

    // corrupt one payload byte; the crc must name the damaged parameter
    let mut corrupted = bytes1.clone();
    let n = corrupted.len();
    corrupted[n - 5] ^= 0x10;
    match Checkpoint::decode(&corrupted) {
        Err(Error::Checksum { name, .. }) => {
            assert!(name.starts_with("adapter."));
        }
        other => panic!("expected a checksum error, got {other:?}"),
    }

    let elapsed = start.elapsed();
    pass(
        "criterion 8 (checkpoint round-trip)",
        elapsed,
        &format!(
            "{} bytes byte-identical across save/load/save; corrupted byte detected via crc32",
            bytes1.len()
        ),
    );
}

/// Criterion 9 — the conflict benchmark: on each of 3 seeds the MoE arm
/// beats the parameter-matched single-LoRA arm, with task↔expert mutual
/// information of at least 1 bit at the reference layer.
#[test]
fn criterion_09_conflict_benchmark() {
    let start = Instant::now();
    let cfg = RunConfig::benchmark_profile();
    let mut lines = Vec::new();
    for &seed in &cfg.benchmark.seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let report = run_conflict_benchmark(&run_cfg).unwrap();
        let single = &report.arms[0];
        let moe = &report.arms[1];
        let mi = report.routing.as_ref().unwrap().task_expert_mi_bits;
        let margin = moe.mean_accuracy - single.mean_accuracy;
        lines.push(format!(
            "seed {seed}: moe {:.4} vs single-lora {:.4} (margin {margin:+.4}), MI {mi:.3} bits, \
             params {} active vs {}",
            moe.mean_accuracy, single.mean_accuracy, moe.active_params, single.active_params
        ));
        assert!(
            moe.mean_accuracy > single.mean_accuracy,
            "seed {seed}: MoE {:.4} did not beat single-LoRA {:.4}",
            moe.mean_accuracy,
            single.mean_accuracy
        );
        assert!(mi >= 1.0, "seed {seed}: MI {mi:.3} < 1.0 bit");
        let gap = (moe.active_params as f64 - single.active_params as f64).abs()
            / moe.active_params as f64;
        assert!(gap <= 0.05, "arms not parameter-matched: {gap:.3}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(900), "took {elapsed:?}");
    pass(
        "criterion 9 (conflict benchmark)",
        elapsed,
        &lines.join("; "),
    );
}

/// Criterion 10 — the full CLI pipeline is byte-deterministic under a fixed
/// seed.
#[test]
fn criterion_10_pipeline_determinism() {
    let start = Instant::now();
    let cfg_json = r#"{
        "seed": 1010,
        "model": {"pretrain_steps": 40, "pretrain_batch": 4},
        "adapters": {"noise_sigma": 0.05},
        "tasks": {"train_per_task": 60, "val_per_task": 4, "test_per_task": 12, "input_len": [2, 4]},
        "stages": [
            {"stage": 1, "lr": 1e-3, "steps": 30, "warmup": 3, "batch_size": 4,
             "noise_sigma": 0.0, "trainable": "single-lora"},
            {"stage": 2, "lr": 1e-3, "steps": 40, "warmup": 4, "batch_size": 4,
             "noise_sigma": 0.05, "trainable": "moe-all"},
            {"stage": 3, "lr": 5e-4, "steps": 30, "warmup": 3, "batch_size": 4,
             "noise_sigma": 0.0, "trainable": "moe-experts-only"}
        ]
    }"#;
    let run_pipeline = |dir: &std::path::Path| -> Vec<u8> {
        let cfg_path = dir.join("cfg.json");
        std::fs::write(&cfg_path, cfg_json).unwrap();
        let out = dir.join("out");
        let common = vec![
            "--config".to_string(),
            cfg_path.to_str().unwrap().to_string(),
            "--out".to_string(),
            out.to_str().unwrap().to_string(),
        ];
        for head in [
            vec!["gen-data"],
            vec!["train", "--stage", "1"],
            vec!["train", "--stage", "2"],
            vec!["train", "--stage", "3"],
            vec!["eval"],
        ] {
            let mut args: Vec<String> = head.iter().map(|s| s.to_string()).collect();
            args.extend(common.iter().cloned());
            assert_eq!(awaker::cli::run(&args), 0, "command failed: {head:?}");
        }
        std::fs::read(out.join("report.json")).unwrap()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_pipeline(dir_a.path());
    let b = run_pipeline(dir_b.path());
    assert_eq!(a, b, "two pipeline runs under one seed must emit identical report.json");

    let elapsed = start.elapsed();
    pass(
        "criterion 10 (pipeline determinism)",
        elapsed,
        &format!("two gen-data→train×3→eval runs produced identical {}-byte reports", a.len()),
    );
}

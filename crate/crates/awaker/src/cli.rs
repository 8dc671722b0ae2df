//! Command-line interface.
//!
//! Subcommands: `gen-data`, `train --stage {1|2|3}`, `eval`,
//! `inspect-routing`, `compare`, `selfcheck`. Exit codes: 0 on success,
//! 2 on configuration errors (including unknown flags), 3 on numeric or
//! invariant failures.

use std::path::{Path, PathBuf};

use crate::checkpoint::{effective_base_seed, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_report, run_conflict_benchmark};
use crate::model::BaseModel;
use crate::taskgen::{gen_corpus, read_jsonl, write_corpus, Split};
use crate::training::{init_stage2_from_stage1, run_stage1, run_stage2, run_stage3, Profile};

const USAGE: &str = "\
awaker — mixture of LoRA experts over a frozen transformer

USAGE:
    awaker <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
    gen-data           generate the synthetic multi-task corpus (JSONL)
    train --stage N    run training stage 1, 2, or 3 (see pipeline order)
    eval               evaluate a checkpoint on the test split
    inspect-routing    emit routing statistics for a MoE checkpoint
    compare            run the two-arm conflict benchmark, write report.json
    selfcheck          run the invariant suite

FLAGS:
    --config <path>        JSON config (merged over the profile defaults)
    --seed <u64>           seed override (beats AWAKER_SEED and the config)
    --profile <toy|paper>  config preset when no explicit value is given
    --out <dir>            working directory (default: awaker_out)
    --stage <1|2|3>        training stage, for `train`
    --checkpoint <path>    checkpoint override for eval / inspect-routing
    --split <train|val|test>  evaluation split (default: test)
    -h, --help             print this help
";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    profile: Option<Profile>,
    out: PathBuf,
    stage: Option<u8>,
    checkpoint: Option<PathBuf>,
    split: Split,
}

fn parse_args(args: &[String]) -> Result<Cli> {
    let mut cli = Cli {
        command: String::new(),
        config: None,
        seed: None,
        profile: None,
        out: PathBuf::from("awaker_out"),
        stage: None,
        checkpoint: None,
        split: Split::Test,
    };
    let mut it = args.iter().peekable();
    let Some(first) = it.next() else {
        return Err(Error::Config("missing subcommand".into()));
    };
    if first == "-h" || first == "--help" {
        cli.command = "help".into();
        return Ok(cli);
    }
    cli.command = first.clone();
    while let Some(arg) = it.next() {
        let mut value_of = |flag: &str| -> Result<String> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))
        };
        match arg.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value_of("--config")?)),
            "--seed" => {
                let v = value_of("--seed")?;
                cli.seed = Some(v.parse().map_err(|_| {
                    Error::Config(format!("--seed expects an unsigned integer, got '{v}'"))
                })?);
            }
            "--profile" => {
                cli.profile = Some(match value_of("--profile")?.as_str() {
                    "toy" => Profile::Toy,
                    "paper" => Profile::Paper,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown profile '{other}' (expected toy|paper)"
                        )))
                    }
                });
            }
            "--out" => cli.out = PathBuf::from(value_of("--out")?),
            "--stage" => {
                let v = value_of("--stage")?;
                cli.stage = Some(v.parse().map_err(|_| {
                    Error::Config(format!("--stage expects 1, 2, or 3, got '{v}'"))
                })?);
            }
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value_of("--checkpoint")?)),
            "--split" => {
                cli.split = match value_of("--split")?.as_str() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown split '{other}' (expected train|val|test)"
                        )))
                    }
                };
            }
            "-h" | "--help" => {
                cli.command = "help".into();
                return Ok(cli);
            }
            other => return Err(Error::Config(format!("unknown flag '{other}'"))),
        }
    }
    Ok(cli)
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            if let Some(profile) = cli.profile {
                // an explicit --profile flag overrides the file's profile
                value["profile"] = serde_json::to_value(profile)?;
            }
            RunConfig::from_json_value(value)?
        }
        None => RunConfig::for_profile(cli.profile.unwrap_or(Profile::Toy)),
    };
    cfg.resolve_seed(cli.seed)?;
    Ok(cfg)
}

fn corpus_path(out: &Path, split: Split) -> PathBuf {
    out.join(split.file_name())
}

fn stage_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.awck"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_split(out: &Path, split: Split) -> Result<Vec<crate::taskgen::TaskInstance>> {
    let path = corpus_path(out, split);
    if !path.exists() {
        return Err(Error::Config(format!(
            "corpus file {} not found; run `awaker gen-data` first",
            path.display()
        )));
    }
    read_jsonl(&path)
}

fn cmd_gen_data(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = gen_corpus(&cfg.tasks.specs(), cfg.tasks.split_sizes(), cfg.seed)?;
    write_corpus(&cli.out, &corpus)?;
    write_json(&cli.out.join("config.json"), cfg)?;
    println!(
        "wrote {} train / {} val / {} test instances to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let stage = cli
        .stage
        .ok_or_else(|| Error::Config("train needs --stage {1|2|3}".into()))?;
    std::fs::create_dir_all(&cli.out)?;
    let train = load_split(&cli.out, Split::Train)?;
    match stage {
        1 => {
            let base = BaseModel::pretrained(&cfg.model, effective_base_seed(&cfg.model, cfg.seed))?;
            let outcome = run_stage1(base, &train, cfg)?;
            let ck = Checkpoint::from_model(
                &outcome.model,
                1,
                outcome.summary.steps as u64,
                cfg.seed,
                outcome.summary.rng_state,
                Some(&outcome.optimizer),
            );
            ck.save(&stage_path(&cli.out, 1))?;
            report_stage(1, &outcome.summary, &stage_path(&cli.out, 1));
        }
        2 => {
            let ck1_path = stage_path(&cli.out, 1);
            if !ck1_path.exists() {
                return Err(Error::Config(format!(
                    "stage-1 checkpoint {} not found; run `awaker train --stage 1` first",
                    ck1_path.display()
                )));
            }
            let ck1 = Checkpoint::load(&ck1_path)?;
            if ck1.manifest.stage != 1 {
                return Err(Error::Config(format!(
                    "{} holds a stage-{} checkpoint, expected stage 1",
                    ck1_path.display(),
                    ck1.manifest.stage
                )));
            }
            ck1.check_config(cfg)?;
            let stage1_model = ck1.restore_model()?;
            let mut model = init_stage2_from_stage1(&stage1_model, cfg)?;
            let (summary, optimizer) = run_stage2(&mut model, &train, cfg)?;
            let ck = Checkpoint::from_model(
                &model,
                2,
                summary.steps as u64,
                cfg.seed,
                summary.rng_state,
                Some(&optimizer),
            );
            ck.save(&stage_path(&cli.out, 2))?;
            report_stage(2, &summary, &stage_path(&cli.out, 2));
        }
        3 => {
            let ck2_path = stage_path(&cli.out, 2);
            if !ck2_path.exists() {
                return Err(Error::Config(format!(
                    "stage-2 checkpoint {} not found; run `awaker train --stage 2` first",
                    ck2_path.display()
                )));
            }
            let ck2 = Checkpoint::load(&ck2_path)?;
            if ck2.manifest.stage != 2 {
                return Err(Error::Config(format!(
                    "{} holds a stage-{} checkpoint, expected stage 2",
                    ck2_path.display(),
                    ck2.manifest.stage
                )));
            }
            ck2.check_config(cfg)?;
            let mut model = ck2.restore_model()?;
            let (summary, optimizer) = run_stage3(&mut model, &train, cfg)?;
            let ck = Checkpoint::from_model(
                &model,
                3,
                summary.steps as u64,
                cfg.seed,
                summary.rng_state,
                Some(&optimizer),
            );
            ck.save(&stage_path(&cli.out, 3))?;
            report_stage(3, &summary, &stage_path(&cli.out, 3));
        }
        other => {
            return Err(Error::Config(format!(
                "--stage expects 1, 2, or 3, got {other}"
            )))
        }
    }
    Ok(())
}

fn report_stage(stage: u8, summary: &crate::training::TrainSummary, path: &Path) {
    println!(
        "stage {stage}: {} steps, loss {} -> {}, checkpoint {}",
        summary.steps,
        summary
            .first_loss
            .map_or("-".to_string(), |l| format!("{l:.4}")),
        summary
            .final_loss
            .map_or("-".to_string(), |l| format!("{l:.4}")),
        path.display()
    );
}

fn resolve_checkpoint(cli: &Cli) -> Result<PathBuf> {
    if let Some(p) = &cli.checkpoint {
        return Ok(p.clone());
    }
    for stage in [3u8, 2, 1] {
        let p = stage_path(&cli.out, stage);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no checkpoint found under {}; train first or pass --checkpoint",
        cli.out.display()
    )))
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint::load(&resolve_checkpoint(cli)?)?;
    let model = ck.restore_model()?;
    let split = load_split(&cli.out, cli.split)?;
    let report = eval_report(&model, &split, cfg)?;
    write_json(&cli.out.join("report.json"), &report)?;
    for arm in &report.arms {
        println!("{}: mean exact-match {:.4}", arm.name, arm.mean_accuracy);
        for t in &arm.per_task_accuracy {
            println!("  task {}: {:.4} ({}/{})", t.task, t.accuracy, t.correct, t.total);
        }
    }
    if let Some(r) = &report.routing {
        println!(
            "routing: entropy {:.3} bits, task-expert MI {:.3} bits",
            r.entropy_bits, r.task_expert_mi_bits
        );
    }
    println!("report written to {}", cli.out.join("report.json").display());
    Ok(())
}

fn cmd_inspect_routing(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint::load(&resolve_checkpoint(cli)?)?;
    let model = ck.restore_model()?;
    if !model.map().has_moe() {
        return Err(Error::Config(
            "checkpoint holds a single-LoRA model; no gates to inspect".into(),
        ));
    }
    let split = load_split(&cli.out, cli.split)?;
    let mut rng = crate::rng::Rng::new(0);
    let mut logs = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for inst in &split {
        logs.push(crate::routing::route_instance(
            &model,
            inst,
            model.routing().mode,
            false,
            &mut rng,
        )?);
        labels.push(inst.task);
    }
    let stats = crate::routing::routing_stats(
        &logs,
        &labels,
        cfg.adapters.n_experts,
        cfg.tasks.kinds.len(),
    )?;
    write_json(&cli.out.join("routing_stats.json"), &stats)?;
    println!(
        "utilization {:?} over {} events; entropy {:.3} bits; task-expert MI {:.3} bits",
        stats.utilization, stats.events, stats.entropy_bits, stats.task_expert_mi_bits
    );
    println!(
        "stats written to {}",
        cli.out.join("routing_stats.json").display()
    );
    Ok(())
}

fn cmd_compare(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let report = run_conflict_benchmark(cfg)?;
    write_json(&cli.out.join("report.json"), &report)?;
    for arm in &report.arms {
        println!(
            "{} (rank {}, {} trainable / {} active): mean exact-match {:.4}",
            arm.name, arm.lora_rank, arm.trainable_params, arm.active_params, arm.mean_accuracy
        );
    }
    if let Some(r) = &report.routing {
        println!(
            "moe routing: utilization {:?}, task-expert MI {:.3} bits",
            r.utilization, r.task_expert_mi_bits
        );
    }
    println!("report written to {}", cli.out.join("report.json").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.command == "help" {
        print!("{USAGE}");
        return Ok(());
    }
    if cli.command == "selfcheck" {
        let mut stdout = std::io::stdout();
        return crate::selfcheck::run(&mut stdout);
    }
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command.as_str() {
        "gen-data" => cmd_gen_data(cli, &cfg),
        "train" => cmd_train(cli, &cfg),
        "eval" => cmd_eval(cli, &cfg),
        "inspect-routing" => cmd_inspect_routing(cli, &cfg),
        "compare" => cmd_compare(cli, &cfg),
        other => Err(Error::Config(format!("unknown subcommand '{other}'"))),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(e) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_and_subcommand_exit_2() {
        assert_eq!(run(&["train".into(), "--bogus".into()]), 2);
        assert_eq!(run(&["frobnicate".into()]), 2);
        assert_eq!(run(&[]), 2);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(&["--help".into()]), 0);
    }

    #[test]
    fn stage2_without_stage1_checkpoint_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap().to_string();
        // corpus present, checkpoint absent
        let cfg_text = r#"{"tasks": {"train_per_task": 4, "val_per_task": 1, "test_per_task": 2},
                           "model": {"pretrain_steps": 0}}"#;
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, cfg_text).unwrap();
        let cfg_flag = cfg_path.to_str().unwrap().to_string();
        assert_eq!(
            run(&[
                "gen-data".into(),
                "--config".into(),
                cfg_flag.clone(),
                "--out".into(),
                out.clone()
            ]),
            0
        );
        assert_eq!(
            run(&[
                "train".into(),
                "--stage".into(),
                "2".into(),
                "--config".into(),
                cfg_flag,
                "--out".into(),
                out
            ]),
            2
        );
    }

    #[test]
    fn train_without_stage_flag_exits_2() {
        assert_eq!(run(&["train".into()]), 2);
    }
}

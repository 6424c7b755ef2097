use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use slotforge::budget;
use slotforge::config::{ConfigError, RunConfig};
use slotforge::eval::{action_accuracy, eval_seeds, evaluate_stage1, evaluate_tasks, mean_success, success_csv, Policy};
use slotforge::inspect::inspect;
use slotforge::manifest::Manifest;
use slotforge::model::Model;
use slotforge::train::{
    build_stage2_cache, generate_corpus, stage1_csv_header, stage2_csv_header, write_stage1_row, write_stage2_row,
    Trainer,
};
use slotforge_world::io::{load_dir, load_episode, save_episode};
use slotforge_world::stats::{corpus_stats, render_table};
use slotforge_world::validate::{validate_dir, ValidatorConfig};
use slotforge_world::Episode;

#[derive(Parser)]
#[command(name = "slotforge", about = "Object-centric slot policy: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Flat `key = value` run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic demonstration corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 1: object-centric encoder.
    Train1 {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: relation encoder and decoder on a frozen stage-1 checkpoint.
    Train2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Held-out metrics and closed-loop rollouts.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
    },
    /// Per-frame report for one episode.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
    /// Visual token counts and reduction ratios.
    Budget {
        #[command(flatten)]
        common: Common,
    },
    /// Check every episode file in a directory.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Corpus statistics table.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

enum Failure {
    Config(String),
    Validation(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Config(c.to_string()),
            Err(e) => Failure::Other(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    base.with_overrides(&c.overrides).map_err(|e| Failure::Config(e.to_string()))
}

fn corpus(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<(Vec<Episode>, Vec<Episode>)> {
    match data {
        Some(d) => {
            let mut all = load_dir(d)?;
            anyhow::ensure!(all.len() > cfg.holdout, "{} has {} episodes, need more than holdout = {}", d.display(), all.len(), cfg.holdout);
            let held = all.split_off(all.len() - cfg.holdout);
            Ok((all, held))
        }
        None => Ok((generate_corpus(cfg, cfg.episodes, false)?, generate_corpus(cfg, cfg.holdout, true)?)),
    }
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> anyhow::Result<Model> {
    Ok(Trainer::load(Model::new(cfg)?, ckpt)?.model)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Gen {
            common,
            subset,
            episodes,
            seed,
        } => {
            let mut ov = common.overrides.clone();
            if let Some(s) = subset {
                ov.push(format!("subset={s}"));
            }
            if let Some(n) = episodes {
                ov.push(format!("episodes={n}"));
            }
            if let Some(s) = seed {
                ov.push(format!("seed={s}"));
            }
            let cfg = load_config(&Common { overrides: ov, ..common.clone() })?;
            std::fs::create_dir_all(&common.out)?;
            let eps = generate_corpus(&cfg, cfg.episodes, false)?;
            for ep in &eps {
                save_episode(&common.out, ep).map_err(anyhow::Error::from)?;
            }
            Manifest::new("gen", &cfg).write(&common.out)?;
            println!("wrote {} episodes to {}", eps.len(), common.out.display());
            print!("{}", render_table(&corpus_stats(&eps)));
        }
        Cmd::Train1 { common, data, resume } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            Manifest::new("train1", &cfg).write(&common.out)?;
            let (train, held) = corpus(&cfg, data.as_deref())?;
            let model = Model::new(&cfg)?;
            let mut tr = match resume {
                Some(p) => Trainer::load(model, &p)?,
                None => Trainer::new(model),
            };
            let mut log = BufWriter::new(File::create(common.out.join("stage1_loss.csv"))?);
            writeln!(log, "{}", stage1_csv_header())?;
            let started = Instant::now();
            tr.train_stage1(&cfg, &train, |row| {
                let _ = write_stage1_row(&mut log, row);
                if row.step % cfg.log_every.max(1) == 0 {
                    eprintln!("stage1 step {:>5} total {:.4} ({:.0}s)", row.step, row.terms.total, started.elapsed().as_secs_f64());
                }
            })?;
            log.flush()?;
            tr.save(&common.out.join("stage1.ckpt"))?;
            let m = evaluate_stage1(&tr.model, &held)?;
            let report = format!(
                "mean_iou,{:.4}\nrelevance_auc,{}\nflip_rate,{:.4}\npairs,{}\n",
                m.mean_iou,
                m.auc.map_or("nan".into(), |a| format!("{a:.4}")),
                m.flip_rate,
                m.pairs
            );
            std::fs::write(common.out.join("stage1_eval.csv"), &report)?;
            print!("{report}");
        }
        Cmd::Train2 { common, stage1, data } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            Manifest::new("train2", &cfg).write(&common.out)?;
            let (train, held) = corpus(&cfg, data.as_deref())?;
            let model = load_model(&cfg, &stage1).context("stage 2 requires a stage-1 checkpoint")?;
            let mut tr = Trainer::restart(model);
            let cache = build_stage2_cache(&tr.model, &train)?;
            let mut log = BufWriter::new(File::create(common.out.join("stage2_loss.csv"))?);
            writeln!(log, "{}", stage2_csv_header())?;
            tr.train_stage2(&cfg, &cache, |row| {
                let _ = write_stage2_row(&mut log, row);
                if row.step % cfg.log_every.max(1) == 0 {
                    eprintln!("stage2 step {:>5} ce {:.4} acc {:.3}", row.step, row.ce, row.bin_accuracy);
                }
            })?;
            log.flush()?;
            tr.save(&common.out.join("stage2.ckpt"))?;
            let acc = action_accuracy(&tr.model, &build_stage2_cache(&tr.model, &held)?)?;
            let report: String = acc.iter().enumerate().map(|(d, a)| format!("dim{d},{a:.4}\n")).collect();
            std::fs::write(common.out.join("stage2_eval.csv"), &report)?;
            print!("{report}");
        }
        Cmd::Eval { common, ckpt, expert } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            Manifest::new("eval", &cfg).write(&common.out)?;
            let seeds = eval_seeds(&cfg);
            let model;
            let (label, policy) = match (expert, ckpt) {
                (true, _) => ("expert", Policy::Expert),
                (false, Some(p)) => {
                    model = load_model(&cfg, &p)?;
                    (if cfg.relations_on { "ORC" } else { "OC" }, Policy::Learned(&model))
                }
                (false, None) => return Err(Failure::Config("eval needs --ckpt or --expert".into())),
            };
            let res = evaluate_tasks(policy, &cfg.scenario(), &seeds, cfg.rollouts, cfg.max_rollout_steps)?;
            let csv = success_csv(label, &res);
            std::fs::write(common.out.join("success.csv"), &csv)?;
            print!("{csv}");
            println!("mean success {:.3}", mean_success(&res));
        }
        Cmd::Inspect {
            common,
            ckpt,
            episode,
            frame,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &ckpt)?;
            let ep = load_episode(&episode).map_err(anyhow::Error::from)?;
            let r = inspect(&model, &ep, frame, &common.out)?;
            println!("selected slots: {:?}", r.selected);
            for i in &r.instances {
                println!("{:<10} relevant={:<5} slot={:>2} mask_iou={:.3}", i.id, i.relevant, i.best_slot, i.mask_iou);
            }
        }
        Cmd::Budget { common } => {
            let cfg = load_config(&common)?;
            let rows = budget::token_budget(&cfg);
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("budget.csv"), budget::to_csv(&rows))?;
            print!("{}", budget::render(&rows));
        }
        Cmd::Validate { common, data } => {
            let cfg = load_config(&common)?;
            let report = validate_dir(
                &data,
                &ValidatorConfig {
                    noop_eps: cfg.noop_eps,
                    ..ValidatorConfig::default()
                },
            )
            .map_err(anyhow::Error::from)?;
            for (p, msg) in &report.failures {
                eprintln!("{}: {msg}", p.display());
            }
            if !report.ok() {
                return Err(Failure::Validation(format!(
                    "{} problems in {} episodes",
                    report.failures.len(),
                    report.episodes
                )));
            }
            println!("{} episodes valid", report.episodes);
        }
        Cmd::Stats { common: _, data } => {
            let eps = load_dir(&data).map_err(anyhow::Error::from)?;
            print!("{}", render_table(&corpus_stats(&eps)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("validation failed: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

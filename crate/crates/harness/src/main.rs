use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use r2a_harness::checkpoint::Checkpoint;
use r2a_harness::config::{parse_tasks, ExperimentConfig};
use r2a_harness::dataset::{Dataset, GeneratorInfo};
use r2a_harness::eval::{aggregate, evaluate, EvalSettings, TaskEval};
use r2a_harness::train::{write_file, Trainer};
use r2a_harness::{ablate, generate, plot, HarnessError, HarnessResult};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "r2a", version, about = "Retrieval-augmented DQN experiments on gridroboman")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as key=value, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> HarnessResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset.
    GenData {
        /// 3, 10, 20, 30 or comma-separated task names.
        #[arg(long, default_value = "10")]
        tasks: String,
        /// Episodes per task.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// scripted, random or online_dqn.
        #[arg(long, default_value = "scripted")]
        generator: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Random-action probability of the scripted expert.
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Hidden width of the online DQN generator.
        #[arg(long, default_value_t = 64)]
        dqn_hidden: usize,
        #[arg(long, default_value_t = 32)]
        dqn_batch: usize,
        /// Gradient updates after each generated episode.
        #[arg(long, default_value_t = 10)]
        dqn_updates: usize,
        #[arg(long, default_value_t = 500)]
        dqn_target_period: u64,
    },
    /// Train one agent and write metrics, config and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint online and dump retrieval diagnostics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Retrieval dataset; defaults to the one in the checkpoint config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Tasks to evaluate; defaults to the training tasks.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation suite and write a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot return curves from metrics files.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_step: u64,
    run: String,
    aggregate_mean_return: f64,
    tasks: Vec<TaskEval>,
}

fn run(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::GenData {
            tasks,
            episodes,
            generator,
            seed,
            out,
            epsilon,
            dqn_hidden,
            dqn_batch,
            dqn_updates,
            dqn_target_period,
        } => {
            let tasks = parse_tasks(&tasks)?;
            let info = match generator.as_str() {
                "scripted" => GeneratorInfo::Scripted { epsilon },
                "random" => GeneratorInfo::Random,
                "online_dqn" => GeneratorInfo::OnlineDqn {
                    epsilon_start: 1.0,
                    epsilon_end: 0.05,
                    decay_fraction: 0.5,
                    hidden: dqn_hidden,
                    batch_size: dqn_batch,
                    updates_per_episode: dqn_updates,
                    target_period: dqn_target_period,
                },
                other => return Err(HarnessError::Config(format!("unknown generator `{other}`"))),
            };
            let ds = generate::generate_dataset(&tasks, episodes, &info, seed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
            }
            ds.save(&out)?;
            log::info!("wrote {} episodes to {}", ds.episodes.len(), out.display());
        }
        Command::Train { cfg, out, resume } => {
            let (ckpt, config) = match resume {
                Some(p) => {
                    let c = Checkpoint::load(&p)?;
                    let cfg = c.config.clone();
                    (Some(c), cfg)
                }
                None => (None, cfg.resolve()?),
            };
            let ds = Dataset::load(&config.dataset)?;
            let mut trainer = match &ckpt {
                Some(c) => Trainer::resume(c, &ds)?,
                None => Trainer::new(&config, &ds)?,
            };
            trainer.run(Some(&out))?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            tasks,
            episodes,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(t) = tasks {
                cfg.set("tasks", &t)?;
            }
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            if let Some(s) = seed {
                cfg.eval_seed = s;
            }
            cfg.validate()?;
            let (learner, _) = ckpt.restore()?;
            let ds = Dataset::load(&cfg.dataset)?;
            fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            write_file(&out.join("config.txt"), cfg.render().as_bytes())?;
            let diag_path = out.join("diagnostics.jsonl");
            let f = fs::File::create(&diag_path).map_err(|e| HarnessError::io(&diag_path, e))?;
            let mut w = BufWriter::new(f);
            let evals = evaluate(
                &learner.model,
                &learner.online,
                &cfg.task_list()?,
                Some(&ds),
                &EvalSettings::from_config(&cfg),
                learner.step,
                Some(&mut w),
            )?;
            std::io::Write::flush(&mut w).map_err(|e| HarnessError::io(&diag_path, e))?;
            let report = EvalReport {
                checkpoint_step: learner.step,
                run: cfg.run_label(),
                aggregate_mean_return: aggregate(&evals),
                tasks: evals,
            };
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            write_file(&out.join("eval.json"), json.as_bytes())?;
            println!("{json}");
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let ds = Dataset::load(&cfg.dataset)?;
            let rows = ablate::run_ablation_suite(&cfg, &ds, &out)?;
            print!("{}", ablate::render_table(&rows));
        }
        Command::Plot { metrics, out } => plot::plot_files(&metrics, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

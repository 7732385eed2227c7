//! `rmoe`: pretrain, grow, finetune, compare and analyze.
//!
//! Any config leaf can be set with a flag of its dotted name, for example
//! `--schedule.upstream_epochs 3` or `--moe.k=2`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use rmoe_core::analysis;
use rmoe_core::checkpoint::Checkpoint;
use rmoe_core::pipeline::compare::{compare_pipelines, CompareMode};
use rmoe_core::pipeline::config::{config_keys, PipelineConfig, PipelineKind};
use rmoe_core::pipeline::data::SyntheticTask;
use rmoe_core::pipeline::run::{self, GrowStage};
use rmoe_core::pipeline::runlog::RunLog;
use rmoe_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rmoe", version, about = "Residual mixture-of-experts growth for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Downstream balance-loss weight (moe.w_balance_downstream).
    #[arg(long = "balance-weight", global = true)]
    balance_weight: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model on the upstream task.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score layers and grow a dense checkpoint into an MoE checkpoint.
    Grow {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scoring tasks, comma separated (upstream, downstream).
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long = "max-layers")]
        max_layers: Option<usize>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the remaining stages of a pipeline from a checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate metric, size and training cost across pipelines.
    Compare {
        /// Config files or pipeline names, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Report closed-form costs without training.
        #[arg(long = "cost-only")]
        cost_only: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Export PCA, specialization, routing-map or balance-curve data.
    Analyze {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Checkpoints in epoch order (pca) or a single checkpoint.
        #[arg(long, value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
        /// Run logs (balance).
        #[arg(long, value_delimiter = ',')]
        runlogs: Vec<PathBuf>,
        /// Labels for the run logs; defaults to the file stems.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// MoE block index; defaults to the first MoE block.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long = "top-m", default_value_t = 4)]
        top_m: usize,
        /// Validation images used (routing: default 4; specialization: all).
        #[arg(long)]
        images: Option<usize>,
        /// Restrict balance curves to one stage.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Intermediate,
    Downstream,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pca,
    Specialization,
    Routing,
    Balance,
}

/// Splits `--dotted.key value` and `--dotted.key=value` out of argv.
fn extract_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("flag --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn help_keys() -> String {
    let mut s = String::from("Config keys (pass as --<key> <value>; defaults shown):\n");
    for (k, v) in config_keys() {
        s.push_str(&format!("  --{k:<32} {v}\n"));
    }
    s.push_str("  --balance-weight                  sets moe.w_balance_downstream\n");
    s.push_str("\nExit codes: 0 success, 2 config or usage, 3 IO, 4 state.\n");
    s
}

fn build_config(common: &Common, dotted: &[(String, String)], extra: Vec<(String, String)>) -> Result<PipelineConfig> {
    let mut ov: Vec<(String, String)> = dotted.to_vec();
    ov.extend(extra);
    if let Some(s) = common.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Some(w) = common.balance_weight {
        ov.push(("moe.w_balance_downstream".into(), format!("{w:?}")));
    }
    match &common.config {
        Some(p) => PipelineConfig::load(p, &ov),
        None => PipelineConfig::from_parts(None, &ov),
    }
}

/// Uses the checkpoint's model spec (and its seed unless one was given).
fn adopt_checkpoint(mut cfg: PipelineConfig, ck: &Checkpoint, common: &Common, dotted: &[(String, String)]) -> Result<PipelineConfig> {
    cfg.model = ck.model.spec.clone();
    let seed_given = common.seed.is_some() || dotted.iter().any(|(k, _)| k == "seed") || config_sets_seed(common)?;
    if !seed_given {
        cfg.seed = ck.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_sets_seed(common: &Common) -> Result<bool> {
    let Some(p) = &common.config else {
        return Ok(false);
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    Ok(v.get("seed").is_some())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_stage(out: &Path, cfg: &PipelineConfig, ck: &Checkpoint, log: &RunLog) -> Result<()> {
    ck.save(out)?;
    log.save(&out.join("runlog.jsonl"))?;
    write(&out.join("config.json"), cfg.to_json() + "\n")
}

fn first_moe_layer(ck: &Checkpoint, layer: Option<usize>) -> Result<usize> {
    match layer {
        Some(l) => Ok(l),
        None => ck
            .model
            .moe_layers()
            .first()
            .copied()
            .ok_or_else(|| Error::Config("checkpoint has no MoE layer".into())),
    }
}

fn execute(cmd: Command, dotted: &[(String, String)]) -> Result<()> {
    match cmd {
        Command::Pretrain { out, common } => {
            let cfg = build_config(&common, dotted, vec![])?;
            let r = run::run_pretrain(&cfg, &mut 0)?;
            save_stage(&out, &cfg, &r.checkpoint, &r.log)?;
            println!("pretrain: wrote {} ({} training FLOPs)", out.display(), r.flops);
        }
        Command::Grow {
            checkpoint,
            tasks,
            max_layers,
            experts,
            topk,
            stage,
            strategy,
            out,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(t) = tasks {
                extra.push(("firefly.tasks".into(), serde_json::to_string(&t)?));
            }
            if let Some(n) = max_layers {
                extra.push(("moe.max_layers".into(), n.to_string()));
            }
            if let Some(n) = experts {
                extra.push(("moe.n".into(), n.to_string()));
            }
            if let Some(k) = topk {
                extra.push(("moe.k".into(), k.to_string()));
            }
            if let Some(s) = strategy {
                extra.push(("moe.strategy".into(), serde_json::to_string(&s)?));
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = adopt_checkpoint(build_config(&common, dotted, extra)?, &ck, &common, dotted)?;
            let stage = match stage {
                StageArg::Intermediate => GrowStage::Intermediate,
                StageArg::Downstream => GrowStage::Downstream,
            };
            let r = run::run_grow(&ck, &cfg, stage, &mut 0)?;
            save_stage(&out, &cfg, &r.checkpoint, &r.log)?;
            let plan = r.checkpoint.grow_plan.as_ref().expect("growth records its plan");
            write(&out.join("growplan.json"), serde_json::to_string_pretty(plan)? + "\n")?;
            println!("grow: selected layers {:?}, wrote {}", plan.selected_layers, out.display());
        }
        Command::Finetune {
            checkpoint,
            pipeline,
            out,
            common,
        } => {
            let kind: PipelineKind = pipeline.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = build_config(&common, dotted, vec![("pipeline".into(), kind.name().into())])?;
            let cfg = adopt_checkpoint(cfg, &ck, &common, dotted)?;
            let (r, _) = run::finetune_from(&ck, &cfg, &mut 0)?;
            save_stage(&out, &cfg, &r.checkpoint, &r.log)?;
            println!("finetune: stage {}, wrote {}", r.checkpoint.stage, out.display());
        }
        Command::Compare {
            configs,
            seeds,
            out,
            cost_only,
            common,
        } => {
            let mut cfgs = Vec::new();
            for c in &configs {
                let path = Path::new(c);
                let mut local = common.clone();
                let mut extra = Vec::new();
                if path.exists() || c.ends_with(".json") {
                    local.config = Some(path.to_path_buf());
                } else {
                    let kind: PipelineKind = c.parse()?;
                    extra.push(("pipeline".to_string(), kind.name().to_string()));
                }
                cfgs.push(build_config(&local, dotted, extra)?);
            }
            let mode = if cost_only { CompareMode::CostOnly } else { CompareMode::Run };
            let table = compare_pipelines(&cfgs, &seeds, mode)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write(&out, table.to_csv())?;
            print!("{}", table.to_text());
        }
        Command::Analyze {
            kind,
            checkpoint,
            runlogs,
            labels,
            layer,
            top_m,
            images,
            stage,
            out,
            common,
        } => {
            let needs_ck = !matches!(kind, Kind::Balance);
            if needs_ck && checkpoint.is_empty() {
                return Err(Error::Config("--checkpoint is required for this analysis".into()));
            }
            match kind {
                Kind::Pca => {
                    let mut snaps = Vec::new();
                    let mut l = layer;
                    for (epoch, dir) in checkpoint.iter().enumerate() {
                        let ck = Checkpoint::load(dir)?;
                        let li = first_moe_layer(&ck, l)?;
                        l = Some(li);
                        snaps.push(analysis::snapshot(&ck.model, li, epoch)?);
                    }
                    let p = analysis::pca_trajectory(&snaps)?;
                    create_dir(&out)?;
                    write(&out.join("pca.csv"), p.to_csv())?;
                    write(&out.join("pca.json"), p.sidecar_json())?;
                }
                Kind::Specialization | Kind::Routing => {
                    if checkpoint.len() != 1 {
                        return Err(Error::Config("this analysis takes exactly one checkpoint".into()));
                    }
                    let ck = Checkpoint::load(&checkpoint[0])?;
                    let cfg = adopt_checkpoint(build_config(&common, dotted, vec![])?, &ck, &common, dotted)?;
                    let li = first_moe_layer(&ck, layer)?;
                    let task = SyntheticTask::upstream(&cfg);
                    let first = cfg.data.train_images;
                    create_dir(&out)?;
                    if let Kind::Specialization = kind {
                        let count = images.unwrap_or(cfg.data.val_images).min(cfg.data.val_images);
                        if count == 0 {
                            return Err(Error::Config("--images must be at least 1".into()));
                        }
                        let idx: Vec<usize> = (first..first + count).collect();
                        let batches = idx
                            .chunks(cfg.schedule.eval_batch_size)
                            .map(|c| task.generate_batch(c))
                            .collect::<Result<Vec<_>>>()?;
                        let m = analysis::specialization_matrix(&ck.model, &batches, li)?;
                        write(&out.join("specialization.csv"), m.to_csv())?;
                        write(&out.join("specialization.json"), m.sidecar_json())?;
                    } else {
                        let count = images.unwrap_or(4);
                        if count == 0 {
                            return Err(Error::Config("--images must be at least 1".into()));
                        }
                        let idx: Vec<usize> = (first..first + count).collect();
                        let b = task.generate_batch(&idx)?;
                        let maps = analysis::routing_map_export(&ck.model, &b.patches, li, top_m, None)?;
                        for (name, text) in maps.files() {
                            write(&out.join(name), text)?;
                        }
                        write(&out.join("routing.json"), maps.sidecar_json())?;
                    }
                }
                Kind::Balance => {
                    if runlogs.is_empty() {
                        return Err(Error::Config("--runlogs is required for balance curves".into()));
                    }
                    if !labels.is_empty() && labels.len() != runlogs.len() {
                        return Err(Error::Config("--labels must match --runlogs one to one".into()));
                    }
                    let mut runs = Vec::new();
                    for (i, p) in runlogs.iter().enumerate() {
                        let label = labels.get(i).cloned().unwrap_or_else(|| {
                            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                            if stem == "runlog" {
                                p.parent()
                                    .and_then(|d| d.file_name())
                                    .map(|s| s.to_string_lossy().into_owned())
                                    .unwrap_or(stem)
                            } else {
                                stem
                            }
                        });
                        runs.push((label, RunLog::load(p)?));
                    }
                    let li = layer.ok_or_else(|| Error::Config("--layer is required for balance curves".into()))?;
                    let pts = analysis::balance_curve(&runs, li, stage.as_deref())?;
                    create_dir(&out)?;
                    write(&out.join("balance.csv"), analysis::balance_csv(&pts))?;
                }
            }
            println!("analyze: wrote {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::State(_) | Error::NonFinite(_) | Error::DegenerateRouting | Error::Contract(_) | Error::Diagnostic(_) => 4,
        Error::Config(_) | Error::Input(_) | Error::Dimension(_) | Error::Data(_) | Error::Json(_) | Error::Degenerate(_) => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (args, dotted) = match extract_overrides(argv) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let command = Cli::command().after_long_help(help_keys()).after_help(help_keys());
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match execute(cli.command, &dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

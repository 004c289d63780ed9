//! Operator surface: data generation, training, evaluation, the ablation
//! suite, the alpha/delta sweep, gradient checking, and embedding export.
//! Every run writes its artifacts plus a manifest (config echo, version,
//! seed, artifact checksums) under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cromekit_core::config::{config_reference, RunConfig};
use cromekit_core::data::{generate, load, save};
use cromekit_core::detector::ablation_manifest;
use cromekit_core::error::{CromeError, Result};
use cromekit_core::training::{
    ablate_suite, evaluate_model, export_embeddings, load_checkpoint, sweep, train,
    write_embeddings_csv, ExportStage,
};

const GRADCHECK_THRESHOLD: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "cromekit", version, about = "Desk-scale multimodal fake-news detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply for every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, e.g. --set metric.alpha=8.0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; falls back to $CROMEKIT_OUT/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [gen] config section.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset file; writes logs, checkpoint, metrics, manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the eight-variant ablation suite over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run all eight variants (full model plus seven ablations).
        #[arg(long, default_value_t = true)]
        all: bool,
        /// Run a single named variant instead of all eight.
        #[arg(long, conflicts_with = "all")]
        variant: Option<String>,
        /// Number of seeds (seed, seed+1, ...).
        #[arg(long, default_value_t = 5)]
        runs: u64,
    },
    /// Full-factorial alpha/delta sweep from the [sweep] config section.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of sampled parameter entries.
        #[arg(long, default_value_t = 40)]
        samples: usize,
        /// Central-difference step. The default suits the default-size
        /// model (loss near 2, where 1e-5 sits at the f64 roundoff optimum);
        /// tiny probe models check fine at 1e-6.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Export per-sample features for external projection tools.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// pre-classifier (unified features) or per-modality (pooled z_*).
        #[arg(long, default_value = "pre-classifier")]
        stage: String,
    },
    /// Print the generated configuration reference.
    ConfigReference,
}

fn main() -> ExitCode {
    // Argv problems (unknown flags, missing values) are validation errors:
    // exit 1. --help and --version still exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for validation errors, 2 for runtime failures.
fn exit_code_for(e: &CromeError) -> u8 {
    match e {
        CromeError::Config(_)
        | CromeError::Schema(_)
        | CromeError::Parse { .. }
        | CromeError::Data(_)
        | CromeError::Shape { .. }
        | CromeError::DegenerateBatch(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.gen.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(dir) => dir.clone(),
        None => match std::env::var_os("CROMEKIT_OUT") {
            Some(root) => PathBuf::from(root).join(command),
            None => {
                return Err(CromeError::Config(
                    "no output directory: pass --out or set CROMEKIT_OUT".into(),
                ))
            }
        },
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Manifest: config echo, tool version, seed, and a sha256 per artifact.
#[derive(serde::Serialize)]
struct Manifest {
    tool: String,
    version: String,
    command: String,
    seed: u64,
    config: RunConfig,
    artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Hash every file under `dir` (except the manifest itself) and write
/// manifest.json.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().map(|n| n != "manifest.json").unwrap_or(true) {
                let rel = path
                    .strip_prefix(dir)
                    .map_err(|_| CromeError::Config("artifact outside out dir".into()))?
                    .to_string_lossy()
                    .replace('\\', "/");
                artifacts.insert(rel, sha256_file(&path)?);
            }
        }
    }
    let manifest = Manifest {
        tool: "cromekit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "gen-data")?;
            let dataset = generate(&cfg.gen)?;
            save(&dataset, &dir.join("dataset.jsonl"))?;
            write_manifest(&dir, "gen-data", &cfg)?;
            println!(
                "wrote {} samples ({} fake) to {}",
                dataset.len(),
                dataset.samples.iter().filter(|s| s.label == 1).count(),
                dir.join("dataset.jsonl").display()
            );
            Ok(())
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "train")?;
            let dataset = load(&data)?;
            let out = train(&cfg, &dataset, Some(&dir), |log| {
                println!(
                    "epoch {:>3}  active {:<5}  ce {:.4}  metric {:.4}  total {:.4}  test-acc {:.4}",
                    log.epoch,
                    log.active_modality.as_deref().unwrap_or("-"),
                    log.mean_ce,
                    log.mean_metric,
                    log.mean_total,
                    log.eval.accuracy
                );
            })?;
            write_manifest(&dir, "train", &cfg)?;
            println!(
                "final: accuracy {:.4}  f1-fake {:.4}  f1-real {:.4}",
                out.final_report.accuracy, out.final_report.f1_fake, out.final_report.f1_real
            );
            Ok(())
        }
        Command::Eval { common, checkpoint, data } => {
            let mut trainer = load_checkpoint(&checkpoint)?;
            // --seed/--set do not apply to a frozen checkpoint; reject
            // attempts so results are never silently misattributed.
            if common.seed.is_some() || !common.set.is_empty() {
                return Err(CromeError::Config(
                    "eval uses the checkpoint's embedded config; --seed/--set are not applicable".into(),
                ));
            }
            let dir = out_dir(&common, "eval")?;
            let dataset = load(&data)?;
            let (report, rows) = evaluate_model(&mut trainer.model, &mut trainer.state, &dataset)?;
            std::fs::write(
                dir.join("eval_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let mut csv = String::from("id,label,predicted,p_fake\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.id, r.label, r.predicted, r.p_fake));
            }
            std::fs::write(dir.join("predictions.csv"), csv)?;
            write_manifest(&dir, "eval", &trainer.model.config)?;
            println!(
                "accuracy {:.4}  f1-fake {:.4}  f1-real {:.4}  (n = {})",
                report.accuracy,
                report.f1_fake,
                report.f1_real,
                dataset.len()
            );
            Ok(())
        }
        Command::Ablate { common, data, all, variant, runs } => {
            let cfg = load_config(&common)?;
            if runs == 0 {
                return Err(CromeError::Config("ablate needs --runs >= 1".into()));
            }
            let dir = out_dir(&common, "ablate")?;
            let dataset = load(&data)?;
            let seeds: Vec<u64> = (0..runs).map(|i| cfg.seed + i).collect();
            let report = if let Some(name) = variant {
                let manifest = ablation_manifest();
                let (_, flags) = manifest
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| {
                        CromeError::Config(format!(
                            "unknown variant {name:?}; known: {}",
                            manifest
                                .iter()
                                .map(|(n, _)| n.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        ))
                    })?;
                let mut base = cfg.clone();
                base.ablate = *flags;
                ablate_suite_single(&base, &dataset, &seeds, &dir, &name)?
            } else {
                debug_assert!(all);
                ablate_suite(&cfg, &dataset, &seeds, Some(&dir))?
            };
            std::fs::write(dir.join("ablate_report.csv"), report.to_csv())?;
            std::fs::write(
                dir.join("ablate_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            write_manifest(&dir, "ablate", &cfg)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Sweep { common, data } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, "sweep")?;
            let dataset = load(&data)?;
            let grid = sweep(&cfg, &dataset)?;
            std::fs::write(dir.join("sweep.csv"), grid.to_csv())?;
            write_manifest(&dir, "sweep", &cfg)?;
            print!("{}", grid.to_csv());
            Ok(())
        }
        Command::Gradcheck { common, samples, step } => {
            let cfg = load_config(&common)?;
            let report = cromekit_core::model_gradcheck(&cfg, samples, step)?;
            println!(
                "gradcheck: {} samples, max relative error {:.3e} (loss {:.6})",
                report.samples, report.max_rel_err, report.loss
            );
            if report.max_rel_err <= GRADCHECK_THRESHOLD {
                println!("PASS (threshold {GRADCHECK_THRESHOLD:.0e})");
                Ok(())
            } else {
                Err(CromeError::Config(format!(
                    "gradient check failed: max relative error {:.3e} exceeds {GRADCHECK_THRESHOLD:.0e} ({:?})",
                    report.max_rel_err, report.worst
                )))
            }
        }
        Command::ExportEmbeddings { common, checkpoint, data, stage } => {
            let mut trainer = load_checkpoint(&checkpoint)?;
            if common.seed.is_some() || !common.set.is_empty() {
                return Err(CromeError::Config(
                    "export-embeddings uses the checkpoint's embedded config; --seed/--set are not applicable".into(),
                ));
            }
            let dir = out_dir(&common, "export-embeddings")?;
            let dataset = load(&data)?;
            let stage = ExportStage::parse(&stage)?;
            let rows = export_embeddings(&mut trainer.model, &mut trainer.state, &dataset, stage)?;
            write_embeddings_csv(&rows, &dir.join("embeddings.csv"))?;
            write_manifest(&dir, "export-embeddings", &trainer.model.config)?;
            println!(
                "exported {} rows of width {} to {}",
                rows.len(),
                rows.first().map(|r| r.2.len()).unwrap_or(0),
                dir.join("embeddings.csv").display()
            );
            Ok(())
        }
        Command::ConfigReference => {
            print!("{}", config_reference());
            Ok(())
        }
    }
}

/// One named variant over several seeds, reusing the suite plumbing.
fn ablate_suite_single(
    cfg: &RunConfig,
    dataset: &cromekit_core::data::Dataset,
    seeds: &[u64],
    dir: &Path,
    name: &str,
) -> Result<cromekit_core::training::AblateReport> {
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let run_dir = dir.join(name).join(format!("seed-{seed}"));
        let result = train(&run_cfg, dataset, Some(&run_dir), |_| {});
        per_seed.push(result.ok().map(|out| {
            (
                out.final_report.accuracy,
                out.final_report.f1_fake,
                out.final_report.f1_real,
            )
        }));
    }
    let mean = |pick: fn(&(f64, f64, f64)) -> f64| {
        let ok: Vec<f64> = per_seed.iter().flatten().map(pick).collect();
        if ok.is_empty() {
            None
        } else {
            Some(ok.iter().sum::<f64>() / ok.len() as f64)
        }
    };
    Ok(cromekit_core::training::AblateReport {
        rows: vec![cromekit_core::training::VariantResult {
            variant: name.to_string(),
            baseline: name == "full",
            seeds: seeds.to_vec(),
            mean_accuracy: mean(|t| t.0),
            mean_f1_fake: mean(|t| t.1),
            mean_f1_real: mean(|t| t.2),
            per_seed,
        }],
    })
}

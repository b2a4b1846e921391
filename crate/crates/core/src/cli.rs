//! Command-line front end. `run` never panics on bad input and never prints;
//! the binary decides where the summary goes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::corpus::image::save_png;
use crate::corpus::{generate_synthetic_corpus, load_studies, parse_manifest, LoadedStudy};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, load_classifier, save_classifier, train_finding_classifier, ClassifierConfig, EvalOptions,
    FeatureExtractor, LinearExtractor,
};
use crate::trainer::{
    load_checkpoint, resume, stage_checkpoint_name, train_full, train_stage_vcn, vcn_checkpoint_name, RunOptions,
    TrainConfig, TrainData, LOSS_LOG, VALIDATION_LOG,
};
use crate::vcn::{accuracy, load_vcn, sample_pairs, save_vcn};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "xraygan",
    version,
    about = "Generate paired chest X-ray views from radiology reports"
)]
struct Cli {
    /// Print a JSON summary on stdout (human text goes to stderr)
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: manifest.jsonl plus two PNGs per study
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the view consistency networks, one per stage
    TrainVcn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this stage (default: every stage)
        #[arg(long)]
        stage: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train encoder and generators stage by stage
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for checkpoints and logs; VCNs found here are reused
        #[arg(long)]
        out: PathBuf,
        /// Continue from a stage checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after_stage: Option<usize>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate frontal.png and lateral.png for one report
    Generate {
        /// Report text, or a path to a file containing it
        #[arg(long)]
        report: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest: IS, FID, SSIM and VC
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// VCN checkpoint used only for scoring
        #[arg(long)]
        eval_vcn: PathBuf,
        /// Linear extractor JSON or finding-classifier checkpoint; trained on the manifest when absent
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        is_splits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the bundled finding-classifier extractor
    TrainExtractor {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a TOML config and print it with defaults filled in
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML overrides applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: `default` (full scale) or `desk` (CPU scale)
    #[arg(long, default_value = "default")]
    preset: String,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = TrainConfig::preset(&self.preset)?;
        let mut config = match &self.config {
            Some(path) => TrainConfig::load(path, &base)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable outcome, or the error message.
    pub summary: String,
    /// Structured summary; `null` on failure.
    pub details: Value,
    pub json: bool,
}

impl CommandResult {
    fn failure(code: i32, message: String, json: bool) -> Self {
        Self {
            exit_code: code,
            artifacts: Vec::new(),
            summary: message,
            details: Value::Null,
            json,
        }
    }

    pub fn success(&self) -> bool {
        self.exit_code == EXIT_OK
    }

    /// JSON form printed under `--json`.
    pub fn to_json(&self) -> Value {
        json!({
            "exit_code": self.exit_code,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "details": self.details,
        })
    }
}

struct Outcome {
    artifacts: Vec<PathBuf>,
    summary: String,
    details: Value,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json = argv.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            return CommandResult::failure(code, e.render().to_string(), json);
        }
    };
    match dispatch(cli.command) {
        Ok(o) => match check_artifacts(&o.artifacts) {
            Ok(()) => CommandResult {
                exit_code: EXIT_OK,
                artifacts: o.artifacts,
                summary: o.summary,
                details: o.details,
                json: cli.json,
            },
            Err(e) => CommandResult::failure(EXIT_INTERNAL, format!("error: {e}"), cli.json),
        },
        Err(e) => {
            let code = if e.is_user_error() { EXIT_USER } else { EXIT_INTERNAL };
            CommandResult::failure(code, format!("error: {e}"), cli.json)
        }
    }
}

fn check_artifacts(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        let meta = std::fs::metadata(p).map_err(|e| Error::Internal(format!("artifact {}: {e}", p.display())))?;
        if meta.len() == 0 {
            return Err(Error::Internal(format!("artifact {} is empty", p.display())));
        }
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::SynthData { n, size, seed, out } => synth_data(n, size, seed, &out),
        Command::TrainVcn {
            manifest,
            out,
            stage,
            config,
        } => train_vcn_cmd(&manifest, &out, stage, &config.resolve()?),
        Command::Train {
            manifest,
            out,
            resume,
            stop_after_stage,
            quiet,
            config,
        } => train_cmd(&manifest, &out, resume.as_deref(), stop_after_stage, !quiet, &config),
        Command::Generate {
            report,
            checkpoint,
            out,
        } => generate_cmd(&report, &checkpoint, &out),
        Command::Evaluate {
            manifest,
            checkpoint,
            eval_vcn,
            extractor,
            is_splits,
            seed,
            out,
        } => evaluate_cmd(
            &manifest,
            &checkpoint,
            &eval_vcn,
            extractor.as_deref(),
            EvalOptions { is_splits },
            seed,
            out.as_deref(),
        ),
        Command::TrainExtractor {
            manifest,
            out,
            resolution,
            epochs,
            seed,
        } => {
            let config = ClassifierConfig {
                resolution,
                epochs,
                ..ClassifierConfig::default()
            };
            let studies = load_studies(&parse_manifest(&manifest)?)?;
            let refs: Vec<&LoadedStudy> = studies.iter().collect();
            let model = train_finding_classifier(&refs, &config, seed)?;
            save_classifier(&model, &out)?;
            Ok(Outcome {
                summary: format!(
                    "trained extractor {} on {} studies, final loss {:.4}\nwrote {}",
                    model.id(),
                    refs.len(),
                    model.losses.last().copied().unwrap_or(f64::NAN),
                    out.display()
                ),
                details: json!({ "id": model.id(), "losses": model.losses }),
                artifacts: vec![out],
            })
        }
        Command::ValidateConfig { config } => {
            let c = config.resolve()?;
            Ok(Outcome {
                artifacts: Vec::new(),
                summary: c.to_toml(),
                details: serde_json::to_value(&c).map_err(|e| Error::Internal(e.to_string()))?,
            })
        }
    }
}

fn synth_data(n: usize, size: usize, seed: u64, out: &Path) -> Result<Outcome> {
    let manifest = generate_synthetic_corpus(n, size, seed, out)?;
    let records = parse_manifest(&manifest)?;
    let mut artifacts = vec![manifest.clone()];
    for r in &records {
        artifacts.push(r.frontal_path.clone());
        artifacts.push(r.lateral_path.clone());
    }
    Ok(Outcome {
        summary: format!(
            "wrote {} studies ({} images, {size}x{size}) to {}",
            records.len(),
            2 * records.len(),
            manifest.display()
        ),
        details: json!({ "manifest": manifest, "studies": records.len(), "size": size }),
        artifacts,
    })
}

fn train_vcn_cmd(manifest: &Path, out: &Path, stage: Option<usize>, config: &TrainConfig) -> Result<Outcome> {
    let stages: Vec<usize> = match stage {
        Some(s) if s == 0 || s > config.n_stages => {
            return Err(Error::invalid(format!("--stage must be in 1..={}", config.n_stages)))
        }
        Some(s) => vec![s],
        None => (1..=config.n_stages).collect(),
    };
    let data = TrainData::from_manifest(manifest, config)?;
    let val = data.val()?;
    let mut artifacts = Vec::new();
    let mut lines = Vec::new();
    let mut details = Vec::new();
    for s in stages {
        let v = train_stage_vcn(&data, config, s)?;
        let path = out.join(vcn_checkpoint_name(s));
        save_vcn(&v, &path)?;
        let acc = if val.is_empty() {
            None
        } else {
            let pairs = sample_pairs(
                &val,
                s,
                v.resolution,
                config.vcn.neg_per_pos,
                config.seed.wrapping_add(200),
            )?;
            Some(accuracy(&v, &pairs)?)
        };
        let loss = v.losses.last().copied().unwrap_or(f64::NAN);
        lines.push(match acc {
            Some(a) => format!(
                "stage {s} ({}px): loss {loss:.4}, val accuracy {a:.3} -> {}",
                v.resolution,
                path.display()
            ),
            None => format!("stage {s} ({}px): loss {loss:.4} -> {}", v.resolution, path.display()),
        });
        details
            .push(json!({ "stage": s, "resolution": v.resolution, "loss": loss, "val_accuracy": acc, "path": path }));
        artifacts.push(path);
    }
    Ok(Outcome {
        artifacts,
        summary: lines.join("\n"),
        details: Value::Array(details),
    })
}

fn train_cmd(
    manifest: &Path,
    out: &Path,
    resume_from: Option<&Path>,
    stop_after_stage: Option<usize>,
    verbose: bool,
    config_args: &ConfigArgs,
) -> Result<Outcome> {
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        stop_after_stage,
        verbose,
    };
    let state = match resume_from {
        Some(ckpt) => {
            // an explicit config must be the one the run started with
            let expected = config_args
                .config
                .is_some()
                .then(|| config_args.resolve())
                .transpose()?;
            let state = load_checkpoint(ckpt, expected.as_ref())?;
            if state.is_complete() {
                return Err(Error::invalid(format!("{} is already a finished run", ckpt.display())));
            }
            let studies = load_studies(&parse_manifest(manifest)?)?;
            let data = TrainData::with_vocab(studies, state.vocab.clone(), state.split.clone(), &state.config)?;
            resume(state, &data, &opts)?
        }
        None => {
            let config = config_args.resolve()?;
            let data = TrainData::from_manifest(manifest, &config)?;
            train_full(&data, &config, &opts)?
        }
    };
    let done = state.completed_stages();
    let mut artifacts: Vec<PathBuf> = (1..=done)
        .map(|s| out.join(stage_checkpoint_name(s)))
        .filter(|p| p.exists())
        .collect();
    artifacts.extend(
        (1..=done)
            .map(|s| out.join(vcn_checkpoint_name(s)))
            .filter(|p| p.exists()),
    );
    artifacts.push(out.join(LOSS_LOG));
    let val_log = out.join(VALIDATION_LOG);
    if std::fs::metadata(&val_log).is_ok_and(|m| m.len() > 0) {
        artifacts.push(val_log);
    }
    Ok(Outcome {
        summary: format!(
            "completed {done}/{} stages, {} generator steps; checkpoints in {}",
            state.config.n_stages,
            state.step,
            out.display()
        ),
        details: json!({ "completed_stages": done, "n_stages": state.config.n_stages, "steps": state.step }),
        artifacts,
    })
}

fn report_text(arg: &str) -> Result<String> {
    let p = Path::new(arg);
    if p.is_file() {
        std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
    } else {
        Ok(arg.to_string())
    }
}

fn generate_cmd(report: &str, checkpoint: &Path, out: &Path) -> Result<Outcome> {
    let text = report_text(report)?;
    let state = load_checkpoint(checkpoint, None)?;
    let (f, l) = crate::trainer::generate_pair(&text, &state)?;
    let (fp, lp) = (out.join("frontal.png"), out.join("lateral.png"));
    save_png(&f.pixels, &fp)?;
    save_png(&l.pixels, &lp)?;
    let side = f.side();
    let mut summary = format!("wrote {} and {} ({side}x{side})", fp.display(), lp.display());
    if !state.is_complete() {
        summary.push_str(&format!(
            "\nnote: checkpoint has finished {} of {} stages",
            state.completed_stages(),
            state.config.n_stages
        ));
    }
    Ok(Outcome {
        summary,
        details: json!({ "frontal": fp, "lateral": lp, "resolution": side }),
        artifacts: vec![fp, lp],
    })
}

fn load_extractor(path: &Path) -> Result<Box<dyn FeatureExtractor>> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(Box::new(LinearExtractor::load(path)?))
    } else {
        Ok(Box::new(load_classifier(path)?))
    }
}

fn evaluate_cmd(
    manifest: &Path,
    checkpoint: &Path,
    eval_vcn: &Path,
    extractor: Option<&Path>,
    options: EvalOptions,
    seed: u64,
    out: Option<&Path>,
) -> Result<Outcome> {
    let state = load_checkpoint(checkpoint, None)?;
    let vcn = load_vcn(eval_vcn)?;
    let studies = load_studies(&parse_manifest(manifest)?)?;
    let data = TrainData::with_vocab(studies, state.vocab.clone(), state.split.clone(), &state.config)?;
    let refs: Vec<&LoadedStudy> = data.studies.iter().collect();
    let extractor: Box<dyn FeatureExtractor> = match extractor {
        Some(p) => load_extractor(p)?,
        None => {
            let config = ClassifierConfig {
                resolution: state.config.gan().final_resolution(),
                ..ClassifierConfig::default()
            };
            Box::new(train_finding_classifier(&refs, &config, seed)?)
        }
    };
    let report = evaluate(&state, &data, &refs, extractor.as_ref(), &vcn, options)?;
    let mut artifacts = Vec::new();
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
        crate::checkpoint::write_atomic(p, text.as_bytes())?;
        artifacts.push(p.to_path_buf());
    }
    Ok(Outcome {
        summary: report.to_table(),
        details: serde_json::to_value(&report).map_err(|e| Error::Internal(e.to_string()))?,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_user_error() {
        let r = run(["xraygan", "synth-data", "--n", "2", "--bogus"]);
        assert_eq!(r.exit_code, EXIT_USER);
        assert!(r.summary.contains("--bogus"));
    }

    #[test]
    fn help_lists_flags_and_exits_zero() {
        let r = run(["xraygan", "train", "--help"]);
        assert_eq!(r.exit_code, EXIT_OK);
        for flag in [
            "--manifest",
            "--out",
            "--resume",
            "--stop-after-stage",
            "--preset",
            "--config",
            "--seed",
        ] {
            assert!(r.summary.contains(flag), "{flag} missing from help");
        }
    }

    #[test]
    fn validate_config_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "").unwrap();
        let r = run(["xraygan", "validate-config", "--config", p.to_str().unwrap()]);
        assert!(r.success(), "{}", r.summary);
        assert_eq!(r.details["n_stages"], 4);
        assert_eq!(r.details["batch_sizes"], json!([96, 56, 24, 12]));
        std::fs::write(&p, "learning_rates = [3e-4, -1.0, 2e-4, 1e-4]").unwrap();
        let r = run(["xraygan", "validate-config", "--config", p.to_str().unwrap()]);
        assert_eq!(r.exit_code, EXIT_USER);
        assert!(r.summary.contains("learning_rates[1]"), "{}", r.summary);
    }
}

//! Offline VCN training followed by stage-by-stage GAN training, plus the
//! inference path and on-disk artifacts.

mod config;
mod state;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{EncoderDims, TrainConfig};
pub use state::{encode_checkpoint, load_checkpoint, save_checkpoint, Progress, TrainData, TrainState};

use crate::autograd::{backward, no_grad, Tensor, Var};
use crate::corpus::{tokenize_report, LoadedStudy, Report, View};
use crate::encoder::{encode_batch, encode_report};
use crate::error::{Error, Result};
use crate::gan::StageImage;
use crate::nn::frozen;
use crate::objective::{
    critic_loss, generator_adversarial_loss, reconstruction_loss, sample_epsilon, total_generator_loss,
    view_consistency_reward, LossReport, ViewLosses,
};
use crate::vcn::{load_vcn, sample_pairs, save_vcn, train_vcn, VcnParams};

pub const LOSS_LOG: &str = "losses.jsonl";
pub const VALIDATION_LOG: &str = "validation.jsonl";

pub fn stage_checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ckpt")
}

pub fn vcn_checkpoint_name(stage: usize) -> String {
    format!("vcn_stage{stage}.bin")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub stage: usize,
    pub epoch: usize,
    /// Mean over validation studies of the summed per-view reconstruction loss.
    pub recon: f64,
    pub vc_reward: f64,
}

pub enum Event<'a> {
    Step(&'a LossReport),
    Validation(&'a ValidationRecord),
}

/// Both views at one resolution, as `[N, 1, s, s]` constants.
fn stack_views(studies: &[&LoadedStudy], side: usize) -> Result<(Var, Var)> {
    let mut out = Vec::with_capacity(2);
    for view in View::BOTH {
        let imgs = studies.iter().map(|s| s.at(view, side)).collect::<Result<Vec<_>>>()?;
        out.push(Var::constant(Tensor::stack(&imgs).reshape(&[
            studies.len(),
            1,
            side,
            side,
        ])));
    }
    let l = out.pop().expect("two views");
    let f = out.pop().expect("two views");
    Ok((f, l))
}

fn reports_of<'a>(data: &'a TrainData, studies: &[&LoadedStudy]) -> Result<Vec<&'a Report>> {
    studies
        .iter()
        .map(|s| {
            data.reports
                .get(&s.record.study_id)
                .ok_or_else(|| Error::Dataset(format!("study {} has no tokenized report", s.record.study_id)))
        })
        .collect()
}

fn noise(state: &mut TrainState, n: usize) -> Option<Var> {
    let d = state.config.gan.noise_dim;
    (d > 0).then(|| {
        let v = (0..n * d).map(|_| state.rng.gen_range(-1.0..1.0)).collect();
        Var::constant(Tensor::new(&[n, d], v))
    })
}

/// Both generated views at `stage`.
fn generate_views(state: &TrainState, c: &Var, stage: usize, z: Option<&Var>) -> Result<(Var, Var)> {
    let g = &state.generators;
    let f = g
        .generate_pyramid(c, View::Frontal, stage, z)?
        .pop()
        .expect("non-empty");
    let l = g
        .generate_pyramid(c, View::Lateral, stage, z)?
        .pop()
        .expect("non-empty");
    Ok((f, l))
}

/// Trains `stage` from `state.progress.epoch` to the configured epoch count.
/// Optimizer moments are reset when a stage starts from epoch 0.
pub fn train_stage(
    state: &mut TrainState,
    stage: usize,
    data: &TrainData,
    vcn: &VcnParams,
    sink: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<()> {
    let cfg = state.config.clone();
    if stage == 0 || stage > cfg.n_stages {
        return Err(Error::invalid(format!("stage {stage} outside 1..={}", cfg.n_stages)));
    }
    if state.progress.stage != stage {
        return Err(Error::invalid(format!(
            "state is at stage {}, cannot train stage {stage}",
            state.progress.stage
        )));
    }
    let side = cfg.gan().resolution(stage);
    if vcn.stage != stage || vcn.resolution != side {
        return Err(Error::invalid(format!(
            "stage {stage} needs a {side}px stage-{stage} VCN, got stage {} at {}px",
            vcn.stage, vcn.resolution
        )));
    }
    let train = data.train()?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let vcn = vcn.frozen();
    let val = data.val()?;
    if state.progress.epoch == 0 {
        state.gen_opt = crate::nn::Adam::new(cfg.adam);
        state.disc_opt = crate::nn::Adam::new(cfg.adam);
    }
    let bs = cfg.batch_sizes[stage - 1];
    let weights = cfg.weights;
    let mut order: Vec<usize> = (0..train.len()).collect();

    while state.progress.epoch < cfg.epochs[stage - 1] {
        let epoch = state.progress.epoch;
        let lr = cfg.learning_rate(stage, epoch);
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<&LoadedStudy> = chunk.iter().map(|&i| train[i]).collect();
            let n = batch.len();
            let (real_f, real_l) = stack_views(&batch, side)?;
            let reports = reports_of(data, &batch)?;
            let c = encode_batch(&reports, &state.encoder)?;
            let c_fixed = c.detach();

            let mut critic = [None, None];
            for _ in 0..cfg.critic_steps {
                let z = noise(state, n);
                let (fake_f, fake_l) = no_grad(|| generate_views(state, &c_fixed, stage, z.as_ref()))?;
                let mut parts = Vec::with_capacity(2);
                for (k, (view, real, fake)) in [(View::Frontal, &real_f, &fake_f), (View::Lateral, &real_l, &fake_l)]
                    .into_iter()
                    .enumerate()
                {
                    let eps = sample_epsilon(&mut state.rng, n);
                    let d = state.discriminators.get(stage, view);
                    let (loss, gp) = critic_loss(d, real, fake, &c_fixed, &eps, weights.gp_coefficient)?;
                    critic[k] = Some((loss.item(), gp.item()));
                    parts.push(loss);
                }
                let loss_d = parts[0].add(&parts[1]);
                if !loss_d.item().is_finite() {
                    return Err(Error::NonFinite(format!(
                        "critic loss at stage {stage}, step {}",
                        state.step
                    )));
                }
                let grads = backward(&loss_d);
                state.disc_opt.begin_step();
                state
                    .disc_opt
                    .update("discriminators", &mut state.discriminators, &grads, lr);
            }

            let z = noise(state, n);
            let (fake_f, fake_l) = generate_views(state, &c, stage, z.as_ref())?;
            let d_f = frozen(state.discriminators.get(stage, View::Frontal));
            let d_l = frozen(state.discriminators.get(stage, View::Lateral));
            let adv_f = generator_adversarial_loss(&d_f, &fake_f, &c)?;
            let adv_l = generator_adversarial_loss(&d_l, &fake_l, &c)?;
            let rec_f = reconstruction_loss(&fake_f, &real_f)?;
            let rec_l = reconstruction_loss(&fake_l, &real_l)?;
            let vc = view_consistency_reward(&fake_f, &fake_l, stage, &vcn)?;
            let adv = adv_f.add(&adv_l);
            let recon = rec_f.add(&rec_l);
            let total = total_generator_loss(&adv, &recon, &vc, &weights)?;
            let grads = backward(&total);
            state.gen_opt.begin_step();
            state.gen_opt.update("generators", &mut state.generators, &grads, lr);
            state.gen_opt.update("encoder", &mut state.encoder, &grads, lr);
            state.step += 1;

            let [(d_f_loss, gp_f), (d_l_loss, gp_l)] = critic.map(|x| x.expect("critic ran"));
            let report = LossReport {
                stage,
                epoch,
                step: state.step,
                lr,
                frontal: ViewLosses {
                    adv_g: adv_f.item(),
                    adv_d: d_f_loss,
                    gp: gp_f,
                    recon: rec_f.item(),
                },
                lateral: ViewLosses {
                    adv_g: adv_l.item(),
                    adv_d: d_l_loss,
                    gp: gp_l,
                    recon: rec_l.item(),
                },
                adv_g: adv.item(),
                adv_d: d_f_loss + d_l_loss,
                gp: gp_f + gp_l,
                recon: recon.item(),
                vc_reward: vc.item(),
                total_g: total.item(),
            };
            sink(Event::Step(&report))?;
        }
        state.progress.epoch += 1;
        if !val.is_empty() {
            let (recon, vc_reward) = evaluate_stage(state, data, &val, stage, &vcn)?;
            sink(Event::Validation(&ValidationRecord {
                stage,
                epoch,
                recon,
                vc_reward,
            }))?;
        }
    }
    state.progress = Progress {
        stage: stage + 1,
        epoch: 0,
    };
    Ok(())
}

/// Mean summed reconstruction loss and mean VC reward over `studies`.
pub fn evaluate_stage(
    state: &TrainState,
    data: &TrainData,
    studies: &[&LoadedStudy],
    stage: usize,
    vcn: &VcnParams,
) -> Result<(f64, f64)> {
    let side = state.config.gan().resolution(stage);
    let (mut recon, mut vc) = (0.0, 0.0);
    for chunk in studies.chunks(32) {
        let (real_f, real_l) = stack_views(chunk, side)?;
        let reports = reports_of(data, chunk)?;
        let (r, v) = no_grad(|| -> Result<(f64, f64)> {
            let c = encode_batch(&reports, &state.encoder)?;
            let (f, l) = generate_views(state, &c, stage, None)?;
            let per = |fake: &Var, real: &Var| -> f64 {
                let d = fake.value().zip_map(real.value(), |a, b| (a - b) * (a - b));
                let px = d.numel() / chunk.len();
                d.data().chunks(px).map(|s| s.iter().sum::<f64>() / px as f64).sum()
            };
            let scores = vcn.score_batch(&f, &l)?;
            Ok((per(&f, &real_f) + per(&l, &real_l), scores.value().sum()))
        })?;
        recon += r;
        vc += v;
    }
    let n = studies.len() as f64;
    Ok((recon / n, vc / n))
}

/// Trains the stage VCN on training-split pairs.
pub fn train_stage_vcn(data: &TrainData, config: &TrainConfig, stage: usize) -> Result<VcnParams> {
    let side = config.gan().resolution(stage);
    let train = data.train()?;
    let seed = config.seed.wrapping_add(100 + stage as u64);
    let pairs = sample_pairs(&train, stage, side, config.vcn.neg_per_pos, seed)?;
    train_vcn(&pairs, stage, &config.vcn, seed)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stop after this stage instead of running all of them.
    pub stop_after_stage: Option<usize>,
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            stop_after_stage: None,
            verbose: false,
        }
    }
}

struct Logs {
    losses: BufWriter<File>,
    validation: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path, truncate: bool) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!truncate)
                .truncate(truncate)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            losses: open(LOSS_LOG)?,
            validation: open(VALIDATION_LOG)?,
        })
    }

    fn write(&mut self, event: Event, dir: &Path) -> Result<()> {
        let (w, line, name) = match event {
            Event::Step(r) => (&mut self.losses, serde_json::to_string(r), LOSS_LOG),
            Event::Validation(v) => (&mut self.validation, serde_json::to_string(v), VALIDATION_LOG),
        };
        let line = line.map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(dir.join(name), e))
    }

    fn flush(&mut self, dir: &Path) -> Result<()> {
        self.losses.flush().map_err(|e| Error::io(dir.join(LOSS_LOG), e))?;
        self.validation
            .flush()
            .map_err(|e| Error::io(dir.join(VALIDATION_LOG), e))
    }
}

/// Loads the stage VCN from `dir` when a compatible one exists, else trains and saves it.
pub fn stage_vcn(data: &TrainData, config: &TrainConfig, stage: usize, dir: &Path) -> Result<VcnParams> {
    let path = dir.join(vcn_checkpoint_name(stage));
    let side = config.gan().resolution(stage);
    if path.exists() {
        let v = load_vcn(&path)?;
        if v.stage == stage && v.resolution == side && v.config == config.vcn {
            return Ok(v);
        }
    }
    let v = train_stage_vcn(data, config, stage)?;
    save_vcn(&v, &path)?;
    Ok(v)
}

fn run(mut state: TrainState, data: &TrainData, opts: &RunOptions, fresh: bool) -> Result<TrainState> {
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut logs = Logs::open(dir, fresh)?;
    let last = opts
        .stop_after_stage
        .unwrap_or(state.config.n_stages)
        .min(state.config.n_stages);
    while state.progress.stage <= last {
        let stage = state.progress.stage;
        let vcn = stage_vcn(data, &state.config, stage, dir)?;
        if opts.verbose {
            eprintln!(
                "stage {stage}: VCN ready ({} epochs), training {} epochs at {}px",
                vcn.losses.len(),
                state.config.epochs[stage - 1],
                state.config.gan().resolution(stage)
            );
        }
        let verbose = opts.verbose;
        train_stage(&mut state, stage, data, &vcn, &mut |e| {
            if let (true, Event::Validation(v)) = (verbose, &e) {
                eprintln!(
                    "  stage {} epoch {}: val recon {:.4}, val vc {:.4}",
                    v.stage, v.epoch, v.recon, v.vc_reward
                );
            }
            logs.write(e, dir)
        })?;
        logs.flush(dir)?;
        save_checkpoint(&state, &dir.join(stage_checkpoint_name(stage)))?;
    }
    Ok(state)
}

/// Trains every stage from scratch, writing VCN and stage checkpoints and logs to `opts.out_dir`.
pub fn train_full(data: &TrainData, config: &TrainConfig, opts: &RunOptions) -> Result<TrainState> {
    config.validate()?;
    if data.train()?.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let state = TrainState::new(config, data.vocab.clone(), data.split.clone())?;
    run(state, data, opts, true)
}

/// Continues a checkpointed run; logs are appended.
pub fn resume(state: TrainState, data: &TrainData, opts: &RunOptions) -> Result<TrainState> {
    if state.vocab != data.vocab || state.split != data.split {
        return Err(Error::Dataset(
            "dataset does not match the checkpoint's vocabulary and split".into(),
        ));
    }
    run(state, data, opts, false)
}

/// Final-resolution frontal and lateral images for a report.
pub fn generate_pair(report_text: &str, state: &TrainState) -> Result<(StageImage, StageImage)> {
    let report = tokenize_report(report_text, &state.vocab, &state.config.tokenizer)?;
    let n = state.config.n_stages;
    no_grad(|| {
        let c = encode_report(&report, &state.encoder)?.c;
        let (f, l) = generate_views(state, &c, n, None)?;
        Ok((
            StageImage::from_batch(f.value(), n, View::Frontal).remove(0),
            StageImage::from_batch(l.value(), n, View::Lateral).remove(0),
        ))
    })
}

/// Generated pairs at `stage` for many tokenized reports.
pub fn generate_batch(state: &TrainState, reports: &[&Report], stage: usize) -> Result<Vec<(StageImage, StageImage)>> {
    let mut out = Vec::with_capacity(reports.len());
    for chunk in reports.chunks(32) {
        let (f, l) = no_grad(|| -> Result<(Var, Var)> {
            let c = encode_batch(chunk, &state.encoder)?;
            generate_views(state, &c, stage, None)
        })?;
        let fs = StageImage::from_batch(f.value(), stage, View::Frontal);
        let ls = StageImage::from_batch(l.value(), stage, View::Lateral);
        out.extend(fs.into_iter().zip(ls));
    }
    Ok(out)
}

/// Parses a loss log written by training.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::render_studies;
    use crate::nn::named_tensors;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.gan.base_resolution = 8;
        c.gan.patch_downsamples = 2;
        c.gan.base_blocks = 1;
        c.gan.refine_blocks = 1;
        c.gan.gen_channels = vec![4, 4];
        c.gan.disc_channels = vec![4, 4];
        c.gan.cond_channels = 2;
        c.encoder = EncoderDims {
            embed_dim: 4,
            hidden_dim: 4,
            attention_dim: 4,
        };
        c.vcn.widths = vec![2];
        c.vcn.embed_dim = 4;
        c.vcn.epochs = 1;
        c.epochs = vec![1, 1];
        c.batch_sizes = vec![4, 4];
        c
    }

    fn data(config: &TrainConfig) -> TrainData {
        TrainData::from_studies(render_studies(10, 16, 3), config).unwrap()
    }

    #[test]
    fn zero_epochs_only_advances_the_schedule() {
        let mut cfg = tiny_config();
        cfg.epochs = vec![0, 0];
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg, d.vocab.clone(), d.split.clone()).unwrap();
        let before = named_tensors(&state.generators);
        let vcn = train_stage_vcn(&d, &cfg, 1).unwrap();
        train_stage(&mut state, 1, &d, &vcn, &mut |_| Ok(())).unwrap();
        assert_eq!(named_tensors(&state.generators), before);
        assert_eq!((state.progress, state.step), (Progress { stage: 2, epoch: 0 }, 0));
    }

    #[test]
    fn stage_order_and_vcn_are_checked() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg, d.vocab.clone(), d.split.clone()).unwrap();
        let vcn1 = train_stage_vcn(&d, &cfg, 1).unwrap();
        assert!(train_stage(&mut state, 2, &d, &vcn1, &mut |_| Ok(())).is_err());
        let vcn2 = train_stage_vcn(&d, &cfg, 2).unwrap();
        assert!(train_stage(&mut state, 1, &d, &vcn2, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn stage_two_leaves_stage_one_critics_alone() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg, d.vocab.clone(), d.split.clone()).unwrap();
        let v1 = train_stage_vcn(&d, &cfg, 1).unwrap();
        let mut steps = Vec::new();
        train_stage(&mut state, 1, &d, &v1, &mut |e| {
            if let Event::Step(r) = e {
                steps.push(r.clone());
            }
            Ok(())
        })
        .unwrap();
        let d1 = named_tensors(&state.discriminators.frontal[0]);
        let g1 = named_tensors(&state.generators.frontal.base);
        let v2 = train_stage_vcn(&d, &cfg, 2).unwrap();
        train_stage(&mut state, 2, &d, &v2, &mut |_| Ok(())).unwrap();
        assert_eq!(named_tensors(&state.discriminators.frontal[0]), d1);
        assert_ne!(named_tensors(&state.generators.frontal.base), g1);
        let w = cfg.weights;
        for r in &steps {
            assert_eq!(r.total_g, r.adv_g * w.adv + r.recon * w.recon + r.vc_reward * w.vc);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg, d.vocab.clone(), d.split.clone()).unwrap();
        let v1 = train_stage_vcn(&d, &cfg, 1).unwrap();
        train_stage(&mut state, 1, &d, &v1, &mut |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        save_checkpoint(&state, &p).unwrap();
        let back = load_checkpoint(&p, Some(&cfg)).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), fs::read(&p).unwrap());
        let text = d.studies[0].record.report_text.clone();
        assert_eq!(
            generate_pair(&text, &state).unwrap(),
            generate_pair(&text, &back).unwrap()
        );
        let mut other = cfg.clone();
        other.seed = 42;
        let e = load_checkpoint(&p, Some(&other)).unwrap_err().to_string();
        assert!(e.contains("config hash mismatch"), "{e}");
        assert!(matches!(generate_pair("  ", &state), Err(Error::EmptyReport)));
    }
}

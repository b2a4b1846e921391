//! View consistency network: a siamese scorer of frontal/lateral pairs.
//!
//! `score(a, b) = sigmoid(sum_j w_j |f_j(a) - f_j(b)|)` with a residual CNN
//! embedder `f`. There is no bias, so identical inputs always score 0.5.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, no_grad, Tensor, Var};
use crate::checkpoint;
use crate::corpus::{LoadedStudy, View};
use crate::error::{Error, Result};
use crate::gan::StageImage;
use crate::nn::{join, load_named, named_tensors, Adam, AdamConfig, Conv2d, Linear, Parameterized};

const KIND: &[u8; 8] = b"VCN\0\0\0\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcnConfig {
    /// Channel width of each residual stage; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub neg_per_pos: usize,
}

impl Default for VcnConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            embed_dim: 128,
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            neg_per_pos: 1,
        }
    }
}

impl VcnConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.widths.is_empty() || self.widths.contains(&0) {
            p.push("vcn.widths: need at least one positive width".to_string());
        }
        if self.blocks_per_stage == 0 {
            p.push("vcn.blocks_per_stage: must be >= 1".into());
        }
        if self.embed_dim == 0 {
            p.push("vcn.embed_dim: must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            p.push("vcn.lr: must be positive".into());
        }
        if self.batch_size == 0 {
            p.push("vcn.batch_size: must be >= 1".into());
        }
        if self.neg_per_pos == 0 {
            p.push("vcn.neg_per_pos: must be >= 1".into());
        }
        p
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new(rng: &mut impl Rng, input: usize, output: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || input != output).then(|| Conv2d::new(rng, input, output, 1, stride, 0, 1.0));
        Self {
            conv1: Conv2d::new(rng, input, output, 3, stride, 1, 1.0),
            conv2: Conv2d::new(rng, output, output, 3, 1, 1, 0.5),
            shortcut,
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let r = self.conv2.forward(&self.conv1.forward(x).relu());
        let s = match &self.shortcut {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        r.add(&s).relu()
    }
}

impl Parameterized for BasicBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// One stage's scorer: embedder plus combination weights.
#[derive(Clone, Debug)]
pub struct VcnParams {
    pub config: VcnConfig,
    pub stage: usize,
    pub resolution: usize,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
    /// `[embed_dim, 1]`
    pub weights: Var,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

pub fn init_vcn(config: &VcnConfig, stage: usize, resolution: usize, seed: u64) -> Result<VcnParams> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let downs = config.widths.len() - 1;
    if resolution >> downs == 0 {
        return Err(Error::invalid(format!(
            "resolution {resolution} too small for {} embedder stages",
            config.widths.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Conv2d::new(&mut rng, 1, config.widths[0], 3, 1, 1, 1.0);
    let mut blocks = Vec::new();
    let mut prev = config.widths[0];
    for (i, &w) in config.widths.iter().enumerate() {
        for b in 0..config.blocks_per_stage {
            let stride = if i > 0 && b == 0 { 2 } else { 1 };
            blocks.push(BasicBlock::new(&mut rng, prev, w, stride));
            prev = w;
        }
    }
    Ok(VcnParams {
        config: config.clone(),
        stage,
        resolution,
        stem,
        blocks,
        head: Linear::new(&mut rng, prev, config.embed_dim),
        weights: Var::param(Tensor::zeros(&[config.embed_dim, 1])),
        losses: Vec::new(),
    })
}

impl Parameterized for VcnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        f(&join(prefix, "weights"), &self.weights);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        f(&join(prefix, "weights"), &mut self.weights);
    }
}

impl VcnParams {
    fn check_batch(&self, x: &Var) -> Result<()> {
        let r = self.resolution;
        match x.shape() {
            [_, 1, h, w] if *h == r && *w == r => Ok(()),
            s => Err(Error::shape(format!(
                "stage-{} VCN expects [N, 1, {r}, {r}], got {s:?}",
                self.stage
            ))),
        }
    }

    /// Embeddings `[N, embed_dim]` of an image batch `[N, 1, r, r]`.
    pub fn embed(&self, x: &Var) -> Result<Var> {
        self.check_batch(x)?;
        let mut h = self.stem.forward(x).relu();
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let (n, c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        let pooled = h
            .reshape(&[n, c, hh * ww])
            .sum_to(&[n, c, 1])
            .reshape(&[n, c])
            .scale(1.0 / (hh * ww) as f64);
        Ok(self.head.forward(&pooled))
    }

    /// Pre-sigmoid scores `[N, 1]`.
    pub fn logits(&self, frontal: &Var, lateral: &Var) -> Result<Var> {
        if frontal.shape() != lateral.shape() {
            return Err(Error::shape(format!(
                "pair batches differ: {:?} vs {:?}",
                frontal.shape(),
                lateral.shape()
            )));
        }
        self.check_batch(frontal)?;
        let n = frontal.shape()[0];
        // one embedder pass over both views
        let f = self.embed(&Var::concat(&[frontal.clone(), lateral.clone()], 0))?;
        let d = f.narrow(0, 0, n).sub(&f.narrow(0, n, n)).abs();
        Ok(d.matmul(&self.weights))
    }

    /// Consistency probabilities `[N, 1]`.
    pub fn score_batch(&self, frontal: &Var, lateral: &Var) -> Result<Var> {
        Ok(self.logits(frontal, lateral)?.sigmoid())
    }

    pub fn weight_values(&self) -> &[f64] {
        self.weights.value().data()
    }

    pub fn frozen(&self) -> Self {
        crate::nn::frozen(self)
    }

    fn check_stage(&self, x: &StageImage) -> Result<()> {
        if x.side() != self.resolution {
            return Err(Error::shape(format!(
                "stage-{} VCN expects {r}x{r} images, got {s}x{s}",
                self.stage,
                r = self.resolution,
                s = x.side()
            )));
        }
        Ok(())
    }
}

/// Feature vector of one image.
pub fn embed_image(x: &StageImage, params: &VcnParams) -> Result<Vec<f64>> {
    params.check_stage(x)?;
    let e = no_grad(|| params.embed(&x.to_batch()))?;
    let v = e.value().data().to_vec();
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("VCN embedding".into()));
    }
    Ok(v)
}

/// `sigmoid(sum_j w_j |a_j - b_j|)` on precomputed embeddings.
pub fn score_from_embeddings(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y).abs()).sum();
    1.0 / (1.0 + (-s).exp())
}

pub fn consistency_score(frontal: &StageImage, lateral: &StageImage, params: &VcnParams) -> Result<f64> {
    params.check_stage(frontal)?;
    params.check_stage(lateral)?;
    let p = no_grad(|| params.score_batch(&frontal.to_batch(), &lateral.to_batch()))?;
    Ok(p.item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub frontal: StageImage,
    pub lateral: StageImage,
    pub consistent: bool,
}

/// One positive per study plus `neg_per_pos` negatives pairing its frontal
/// view with the lateral view of a uniformly chosen other patient.
pub fn sample_pairs(
    studies: &[&LoadedStudy],
    stage: usize,
    resolution: usize,
    neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let mut patients: Vec<&str> = studies.iter().map(|s| s.record.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    if patients.len() < 2 {
        return Err(Error::Dataset("pair sampling needs at least 2 patients".into()));
    }
    let frontal: Vec<StageImage> = studies
        .iter()
        .map(|s| Ok(StageImage::new(s.at(View::Frontal, resolution)?, stage, View::Frontal)))
        .collect::<Result<_>>()?;
    let lateral: Vec<StageImage> = studies
        .iter()
        .map(|s| Ok(StageImage::new(s.at(View::Lateral, resolution)?, stage, View::Lateral)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(studies.len() * (1 + neg_per_pos));
    for (i, s) in studies.iter().enumerate() {
        pairs.push(PairExample {
            frontal: frontal[i].clone(),
            lateral: lateral[i].clone(),
            consistent: true,
        });
        let others: Vec<usize> = (0..studies.len())
            .filter(|&j| studies[j].record.patient_id != s.record.patient_id)
            .collect();
        for _ in 0..neg_per_pos {
            let j = others[rng.gen_range(0..others.len())];
            pairs.push(PairExample {
                frontal: frontal[i].clone(),
                lateral: lateral[j].clone(),
                consistent: false,
            });
        }
    }
    Ok(pairs)
}

fn stack(images: &[&StageImage]) -> Var {
    let s = images[0].side();
    let t = Tensor::stack(&images.iter().map(|x| x.pixels.clone()).collect::<Vec<_>>());
    Var::constant(t.reshape(&[images.len(), 1, s, s]))
}

/// Stable `BCE(sigmoid(s), y)` averaged over the batch: `softplus(s) - y s`.
pub fn bce_with_logits(logits: &Var, labels: &Tensor) -> Var {
    let softplus = logits.relu().add(&logits.abs().neg().exp().add_scalar(1.0).ln());
    softplus.sub(&logits.mul(&Var::constant(labels.clone()))).mean()
}

/// Trains a fresh stage VCN on `pairs` with BCE and Adam.
pub fn train_vcn(pairs: &[PairExample], stage: usize, config: &VcnConfig, seed: u64) -> Result<VcnParams> {
    let Some(first) = pairs.first() else {
        return Err(Error::Dataset("no training pairs".into()));
    };
    let resolution = first.frontal.side();
    if pairs
        .iter()
        .any(|p| p.frontal.side() != resolution || p.lateral.side() != resolution)
    {
        return Err(Error::Dataset("pairs must share one resolution".into()));
    }
    let positives = pairs.iter().filter(|p| p.consistent).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::Dataset("pairs must contain both labels".into()));
    }
    let mut params = init_vcn(config, stage, resolution, seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7663_6e5f_7368_7566);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let f: Vec<&StageImage> = chunk.iter().map(|&i| &pairs[i].frontal).collect();
            let l: Vec<&StageImage> = chunk.iter().map(|&i| &pairs[i].lateral).collect();
            let y = Tensor::new(
                &[chunk.len(), 1],
                chunk
                    .iter()
                    .map(|&i| f64::from(u8::from(pairs[i].consistent)))
                    .collect(),
            );
            let loss = bce_with_logits(&params.logits(&stack(&f), &stack(&l))?, &y);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite("VCN training loss".into()));
            }
            total += loss.item() * chunk.len() as f64;
            let grads = backward(&loss);
            adam.begin_step();
            adam.update("", &mut params, &grads, config.lr);
        }
        params.losses.push(total / pairs.len() as f64);
    }
    Ok(params)
}

/// Scores of every pair, in order.
pub fn score_pairs(params: &VcnParams, pairs: &[PairExample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let f: Vec<&StageImage> = chunk.iter().map(|p| &p.frontal).collect();
        let l: Vec<&StageImage> = chunk.iter().map(|p| &p.lateral).collect();
        let p = no_grad(|| params.score_batch(&stack(&f), &stack(&l)))?;
        out.extend_from_slice(p.value().data());
    }
    Ok(out)
}

/// Fraction of pairs classified correctly at threshold 0.5.
pub fn accuracy(params: &VcnParams, pairs: &[PairExample]) -> Result<f64> {
    let scores = score_pairs(params, pairs)?;
    let correct = scores
        .iter()
        .zip(pairs)
        .filter(|(s, p)| (**s > 0.5) == p.consistent)
        .count();
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

#[derive(Serialize, Deserialize)]
struct VcnFile {
    stage: usize,
    resolution: usize,
    config: VcnConfig,
    tensors: BTreeMap<String, Tensor>,
    losses: Vec<f64>,
}

pub fn save_vcn(params: &VcnParams, path: &Path) -> Result<()> {
    let file = VcnFile {
        stage: params.stage,
        resolution: params.resolution,
        config: params.config.clone(),
        tensors: named_tensors(params),
        losses: params.losses.clone(),
    };
    checkpoint::save(KIND, &file, path)
}

pub fn load_vcn(path: &Path) -> Result<VcnParams> {
    let file: VcnFile = checkpoint::load(KIND, path)?;
    let mut params = init_vcn(&file.config, file.stage, file.resolution, 0)?;
    load_named(&mut params, &file.tensors).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    params.losses = file.losses;
    Ok(params)
}

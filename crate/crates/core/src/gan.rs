//! Multi-scale conditional generators and patch discriminators.
//!
//! Stage 1 maps the report embedding straight to a low-resolution image.
//! Every later stage doubles the resolution:
//! `x_n = alpha * G_n(U(x_{n-1}), c) + (1 - alpha) * U(x_{n-1})`
//! with `U` bilinear 2x upsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::corpus::View;
use crate::error::{Error, Result};
use crate::nn::{join, tile_spatial, Conv2d, Linear, Parameterized};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Set from the enclosing training config rather than read from files.
    #[serde(skip)]
    pub n_stages: usize,
    pub base_resolution: usize,
    pub alpha: f64,
    /// Generator width per stage.
    pub gen_channels: Vec<usize>,
    /// Discriminator width per stage.
    pub disc_channels: Vec<usize>,
    /// Channels of the tiled report projection fed to refiners and critics.
    pub cond_channels: usize,
    pub base_blocks: usize,
    pub refine_blocks: usize,
    /// Stride-2 layers in each critic; patch grid side is `resolution / 2^n`.
    pub patch_downsamples: usize,
    /// Width of a Gaussian noise input to the base generator; 0 disables it.
    pub noise_dim: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            n_stages: 4,
            base_resolution: 32,
            alpha: 0.5,
            gen_channels: vec![64, 32, 16, 8],
            disc_channels: vec![32, 32, 16, 16],
            cond_channels: 16,
            base_blocks: 8,
            refine_blocks: 4,
            patch_downsamples: 3,
            noise_dim: 0,
        }
    }
}

impl GanConfig {
    pub fn resolution(&self, stage: usize) -> usize {
        self.base_resolution << (stage - 1)
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution(self.n_stages)
    }

    pub fn patch_grid(&self, stage: usize) -> usize {
        self.resolution(stage) >> self.patch_downsamples
    }

    pub fn upsample_blocks(&self) -> usize {
        (self.base_resolution / 4).trailing_zeros() as usize
    }

    /// Problems with the configuration, each naming the offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_stages == 0 {
            p.push("gan.n_stages: must be >= 1".to_string());
        }
        if self.base_resolution < 4 || !self.base_resolution.is_power_of_two() {
            p.push("gan.base_resolution: must be a power of two >= 4".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push("gan.alpha: must lie in [0, 1]".into());
        }
        for (key, list) in [
            ("gan.gen_channels", &self.gen_channels),
            ("gan.disc_channels", &self.disc_channels),
        ] {
            if list.len() != self.n_stages {
                p.push(format!("{key}: length {} != n_stages {}", list.len(), self.n_stages));
            }
            if list.contains(&0) {
                p.push(format!("{key}: widths must be >= 1"));
            }
        }
        if self.cond_channels == 0 {
            p.push("gan.cond_channels: must be >= 1".into());
        }
        if self.base_resolution.is_power_of_two()
            && self.base_resolution >= 4
            && self.base_blocks < self.upsample_blocks()
        {
            p.push(format!(
                "gan.base_blocks: {} blocks cannot reach {} from 4x4",
                self.base_blocks, self.base_resolution
            ));
        }
        if self.base_resolution.is_power_of_two() && (self.base_resolution >> self.patch_downsamples) == 0 {
            p.push("gan.patch_downsamples: patch grid would be empty".into());
        }
        p
    }
}

/// Image tagged with its pyramid stage and view.
#[derive(Clone, Debug, PartialEq)]
pub struct StageImage {
    /// `[side, side]`, values in `[-1, 1]`
    pub pixels: Tensor,
    pub stage: usize,
    pub view: View,
}

impl StageImage {
    pub fn new(pixels: Tensor, stage: usize, view: View) -> Self {
        Self { pixels, stage, view }
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Single-image NCHW batch.
    pub fn to_batch(&self) -> Var {
        let s = self.side();
        Var::constant(self.pixels.clone().reshape(&[1, 1, s, s]))
    }

    /// Splits an `[N, 1, s, s]` batch.
    pub fn from_batch(x: &Tensor, stage: usize, view: View) -> Vec<StageImage> {
        let (n, s) = (x.shape()[0], x.shape()[2]);
        (0..n)
            .map(|i| {
                let px = x.index0(i).reshape(&[s, s]).map(|v| v.clamp(-1.0, 1.0));
                StageImage::new(px, stage, view)
            })
            .collect()
    }
}

/// 3x3 residual block, optionally preceded by 2x upsampling of the trunk.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub upsample: bool,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new(rng: &mut impl Rng, ch: usize, upsample: bool) -> Self {
        Self {
            upsample,
            conv1: Conv2d::new(rng, ch, ch, 3, 1, 1, 1.0),
            conv2: Conv2d::new(rng, ch, ch, 3, 1, 1, 0.5),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let h = if self.upsample { x.upsample2x() } else { x.clone() };
        let r = self.conv1.forward(&h.leaky_relu(SLOPE));
        let r = self.conv2.forward(&r.leaky_relu(SLOPE));
        h.add(&r)
    }
}

impl Parameterized for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Stage-1 generator: project `c` to a 4x4 map, residual upsampling blocks, tanh.
#[derive(Clone, Debug)]
pub struct BaseGenerator {
    pub channels: usize,
    pub project: Linear,
    pub blocks: Vec<ResBlock>,
    pub out: Conv2d,
}

impl BaseGenerator {
    fn new(rng: &mut impl Rng, config: &GanConfig, input_dim: usize) -> Self {
        let ch = config.gen_channels[0];
        let n_up = config.upsample_blocks();
        let nb = config.base_blocks;
        let blocks = (0..nb)
            .map(|i| {
                let up = (i + 1) * n_up / nb > i * n_up / nb;
                ResBlock::new(rng, ch, up)
            })
            .collect();
        Self {
            channels: ch,
            project: Linear::new(rng, input_dim, ch * 16),
            blocks,
            out: Conv2d::new(rng, ch, 1, 3, 1, 1, 1.0),
        }
    }

    pub fn forward(&self, input: &Var) -> Var {
        let n = input.shape()[0];
        let mut h = self.project.forward(input).reshape(&[n, self.channels, 4, 4]);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        self.out.forward(&h.leaky_relu(SLOPE)).tanh()
    }
}

impl Parameterized for BaseGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.project.visit(&join(prefix, "project"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.project.visit_mut(&join(prefix, "project"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The `G_n` term of the blend: anything mapping an upsampled image and `c`
/// to an image of the same size.
pub trait StageRefiner {
    fn refine(&self, upsampled: &Var, c: &Var) -> Var;
}

/// Progressive generator: upsampled image concatenated with the tiled report
/// projection, residual refinement, tanh.
#[derive(Clone, Debug)]
pub struct ProgressiveGenerator {
    pub cond: Linear,
    pub input: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub out: Conv2d,
}

impl ProgressiveGenerator {
    fn new(rng: &mut impl Rng, config: &GanConfig, stage: usize, c_dim: usize) -> Self {
        let ch = config.gen_channels[stage - 1];
        Self {
            cond: Linear::new(rng, c_dim, config.cond_channels),
            input: Conv2d::new(rng, 1 + config.cond_channels, ch, 3, 1, 1, 1.0),
            blocks: (0..config.refine_blocks)
                .map(|_| ResBlock::new(rng, ch, false))
                .collect(),
            out: Conv2d::new(rng, ch, 1, 3, 1, 1, 1.0),
        }
    }
}

impl StageRefiner for ProgressiveGenerator {
    fn refine(&self, upsampled: &Var, c: &Var) -> Var {
        let (h, w) = (upsampled.shape()[2], upsampled.shape()[3]);
        let cond = tile_spatial(&self.cond.forward(c), h, w);
        let mut x = self.input.forward(&Var::concat(&[upsampled.clone(), cond], 1));
        for b in &self.blocks {
            x = b.forward(&x);
        }
        self.out.forward(&x.leaky_relu(SLOPE)).tanh()
    }
}

impl Parameterized for ProgressiveGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.cond.visit(&join(prefix, "cond"), f);
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.cond.visit_mut(&join(prefix, "cond"), f);
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The generator cascade of one view.
#[derive(Clone, Debug)]
pub struct ViewGenerators {
    pub base: BaseGenerator,
    /// Index `k` holds the generator of stage `k + 2`.
    pub progressive: Vec<ProgressiveGenerator>,
}

impl Parameterized for ViewGenerators {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.base.visit(&join(prefix, "stage1"), f);
        for (k, g) in self.progressive.iter().enumerate() {
            g.visit(&join(prefix, &format!("stage{}", k + 2)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.base.visit_mut(&join(prefix, "stage1"), f);
        for (k, g) in self.progressive.iter_mut().enumerate() {
            g.visit_mut(&join(prefix, &format!("stage{}", k + 2)), f);
        }
    }
}

/// Generators for both views.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub config: GanConfig,
    pub c_dim: usize,
    pub frontal: ViewGenerators,
    pub lateral: ViewGenerators,
}

impl GeneratorParams {
    pub fn new(config: &GanConfig, c_dim: usize, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = |rng: &mut ChaCha8Rng| ViewGenerators {
            base: BaseGenerator::new(rng, config, c_dim + config.noise_dim),
            progressive: (2..=config.n_stages)
                .map(|s| ProgressiveGenerator::new(rng, config, s, c_dim))
                .collect(),
        };
        let frontal = view(&mut rng);
        let lateral = view(&mut rng);
        Ok(Self {
            config: config.clone(),
            c_dim,
            frontal,
            lateral,
        })
    }

    pub fn view(&self, view: View) -> &ViewGenerators {
        match view {
            View::Frontal => &self.frontal,
            View::Lateral => &self.lateral,
        }
    }

    pub fn view_mut(&mut self, view: View) -> &mut ViewGenerators {
        match view {
            View::Frontal => &mut self.frontal,
            View::Lateral => &mut self.lateral,
        }
    }

    /// Stage-1 images `[N, 1, r, r]` for a batch of embeddings `[N, D]`.
    pub fn generate_base(&self, c: &Var, view: View, noise: Option<&Var>) -> Result<Var> {
        check_embedding(c, self.c_dim)?;
        let input = if self.config.noise_dim > 0 {
            let n = c.shape()[0];
            let z = match noise {
                Some(z) => {
                    if z.shape() != [n, self.config.noise_dim] {
                        return Err(Error::shape(format!("noise must be [{n}, {}]", self.config.noise_dim)));
                    }
                    z.clone()
                }
                None => Var::constant(Tensor::zeros(&[n, self.config.noise_dim])),
            };
            Var::concat(&[c.clone(), z], 1)
        } else {
            c.clone()
        };
        Ok(self.view(view).base.forward(&input))
    }

    /// One blended upsampling step from stage `stage - 1` to `stage`.
    pub fn generate_progressive(&self, x_prev: &Var, c: &Var, stage: usize, view: View) -> Result<Var> {
        if stage < 2 || stage > self.config.n_stages {
            return Err(Error::invalid(format!(
                "progressive stage {stage} outside 2..={}",
                self.config.n_stages
            )));
        }
        let expect = self.config.resolution(stage - 1);
        if x_prev.shape().len() != 4 || x_prev.shape()[2] != expect || x_prev.shape()[3] != expect {
            return Err(Error::shape(format!(
                "stage {stage} expects a {expect}x{expect} input, got {:?}",
                x_prev.shape()
            )));
        }
        check_embedding(c, self.c_dim)?;
        Ok(progressive_step(
            &self.view(view).progressive[stage - 2],
            x_prev,
            c,
            self.config.alpha,
        ))
    }

    /// Runs the cascade up to `stage`, returning every intermediate image.
    pub fn generate_pyramid(&self, c: &Var, view: View, stage: usize, noise: Option<&Var>) -> Result<Vec<Var>> {
        let mut images = vec![self.generate_base(c, view, noise)?];
        for s in 2..=stage {
            let next = self.generate_progressive(images.last().expect("non-empty"), c, s, view)?;
            images.push(next);
        }
        Ok(images)
    }

    /// [`GeneratorParams::generate_base`] for a single embedding.
    pub fn generate_base_image(&self, c: &Var, view: View) -> Result<StageImage> {
        let x = self.generate_base(c, view, None)?;
        Ok(StageImage::from_batch(x.value(), 1, view).remove(0))
    }

    /// [`GeneratorParams::generate_progressive`] on a single image.
    pub fn generate_progressive_image(&self, x_prev: &StageImage, c: &Var, stage: usize) -> Result<StageImage> {
        if x_prev.stage + 1 != stage {
            return Err(Error::invalid(format!(
                "input is from stage {}, expected stage {}",
                x_prev.stage,
                stage - 1
            )));
        }
        let x = self.generate_progressive(&x_prev.to_batch(), c, stage, x_prev.view)?;
        Ok(StageImage::from_batch(x.value(), stage, x_prev.view).remove(0))
    }
}

impl Parameterized for GeneratorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.frontal.visit(&join(prefix, "frontal"), f);
        self.lateral.visit(&join(prefix, "lateral"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.frontal.visit_mut(&join(prefix, "frontal"), f);
        self.lateral.visit_mut(&join(prefix, "lateral"), f);
    }
}

fn check_embedding(c: &Var, dim: usize) -> Result<()> {
    if c.shape().len() != 2 || c.shape()[1] != dim {
        return Err(Error::shape(format!(
            "embedding must be [N, {dim}], got {:?}",
            c.shape()
        )));
    }
    if !c.value().all_finite() {
        return Err(Error::NonFinite("report embedding".into()));
    }
    Ok(())
}

/// `U`: bilinear 2x resize.
pub fn upsample(x: &Var) -> Var {
    x.upsample2x()
}

/// `alpha * g + (1 - alpha) * u`.
pub fn blend(g: &Var, u: &Var, alpha: f64) -> Var {
    g.scale(alpha).add(&u.scale(1.0 - alpha))
}

pub fn progressive_step(refiner: &dyn StageRefiner, x_prev: &Var, c: &Var, alpha: f64) -> Var {
    let u = upsample(x_prev);
    let g = refiner.refine(&u, c);
    blend(&g, &u, alpha)
}

/// Conditional patch critic; scores are unbounded (no sigmoid).
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub resolution: usize,
    pub stem: Conv2d,
    pub downs: Vec<Conv2d>,
    pub cond: Linear,
    pub joint: Conv2d,
    pub out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(rng: &mut impl Rng, config: &GanConfig, stage: usize, c_dim: usize) -> Self {
        let ch = config.disc_channels[stage - 1];
        Self {
            resolution: config.resolution(stage),
            stem: Conv2d::new(rng, 1, ch, 3, 1, 1, 1.0),
            downs: (0..config.patch_downsamples)
                .map(|_| Conv2d::new(rng, ch, ch, 4, 2, 1, 1.0))
                .collect(),
            cond: Linear::new(rng, c_dim, config.cond_channels),
            joint: Conv2d::new(rng, ch + config.cond_channels, ch, 1, 1, 0, 1.0),
            out: Conv2d::new(rng, ch, 1, 1, 1, 0, 1.0),
        }
    }

    /// Patch score map `[N, 1, g, g]`.
    pub fn scores(&self, x: &Var, c: &Var) -> Result<Var> {
        let r = self.resolution;
        if x.shape().len() != 4 || x.shape()[1] != 1 || x.shape()[2] != r || x.shape()[3] != r {
            return Err(Error::shape(format!(
                "critic expects [N, 1, {r}, {r}], got {:?}",
                x.shape()
            )));
        }
        Ok(self.forward(x, c))
    }

    pub fn forward(&self, x: &Var, c: &Var) -> Var {
        let mut h = self.stem.forward(x).leaky_relu(SLOPE);
        for d in &self.downs {
            h = d.forward(&h).leaky_relu(SLOPE);
        }
        let (gh, gw) = (h.shape()[2], h.shape()[3]);
        let cond = tile_spatial(&self.cond.forward(c), gh, gw);
        let h = self.joint.forward(&Var::concat(&[h, cond], 1)).leaky_relu(SLOPE);
        self.out.forward(&h)
    }
}

impl Parameterized for PatchDiscriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("downs.{i}")), f);
        }
        self.cond.visit(&join(prefix, "cond"), f);
        self.joint.visit(&join(prefix, "joint"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("downs.{i}")), f);
        }
        self.cond.visit_mut(&join(prefix, "cond"), f);
        self.joint.visit_mut(&join(prefix, "joint"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// One critic per stage and view.
#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    /// Index `k` holds stage `k + 1`.
    pub frontal: Vec<PatchDiscriminator>,
    pub lateral: Vec<PatchDiscriminator>,
}

impl DiscriminatorParams {
    pub fn new(config: &GanConfig, c_dim: usize, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frontal = (1..=config.n_stages)
            .map(|s| PatchDiscriminator::new(&mut rng, config, s, c_dim))
            .collect();
        let lateral = (1..=config.n_stages)
            .map(|s| PatchDiscriminator::new(&mut rng, config, s, c_dim))
            .collect();
        Ok(Self { frontal, lateral })
    }

    pub fn get(&self, stage: usize, view: View) -> &PatchDiscriminator {
        match view {
            View::Frontal => &self.frontal[stage - 1],
            View::Lateral => &self.lateral[stage - 1],
        }
    }

    pub fn get_mut(&mut self, stage: usize, view: View) -> &mut PatchDiscriminator {
        match view {
            View::Frontal => &mut self.frontal[stage - 1],
            View::Lateral => &mut self.lateral[stage - 1],
        }
    }

    pub fn stage_prefix(stage: usize, view: View) -> String {
        format!("{}.stage{stage}", view.name())
    }
}

impl Parameterized for DiscriminatorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        for view in View::BOTH {
            let list = match view {
                View::Frontal => &self.frontal,
                View::Lateral => &self.lateral,
            };
            for (k, d) in list.iter().enumerate() {
                d.visit(&join(prefix, &Self::stage_prefix(k + 1, view)), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        for view in View::BOTH {
            let list = match view {
                View::Frontal => &mut self.frontal,
                View::Lateral => &mut self.lateral,
            };
            for (k, d) in list.iter_mut().enumerate() {
                d.visit_mut(&join(prefix, &Self::stage_prefix(k + 1, view)), f);
            }
        }
    }
}

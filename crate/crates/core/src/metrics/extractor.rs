use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, no_grad, Tensor, Var};
use crate::checkpoint::{self, sha256_hex};
use crate::corpus::image::resize_square;
use crate::corpus::synthetic::{findings_from_report, Findings};
use crate::corpus::{LoadedStudy, View};
use crate::error::{Error, Result};
use crate::nn::{join, load_named, named_tensors, Adam, AdamConfig, Conv2d, Linear, Parameterized};

const KIND: &[u8; 8] = b"FINDCLS\0";

/// Image to feature vector and class probabilities, as used by IS and FID.
pub trait FeatureExtractor {
    /// Stable identifier recorded in metric reports.
    fn id(&self) -> String;
    fn features(&self, image: &Tensor) -> Result<Vec<f64>>;
    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>>;
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub resolution: usize,
    /// Channels of the stem and of each stride-2 layer after it
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            widths: vec![8, 16, 32],
            epochs: 15,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

/// Small CNN trained to predict the synthetic finding class of a frontal image.
/// Features are the pooled activations before the class head.
#[derive(Clone, Debug)]
pub struct FindingClassifier {
    pub config: ClassifierConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    head: Linear,
    pub losses: Vec<f64>,
}

impl Parameterized for FindingClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("downs.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("downs.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl FindingClassifier {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.batch_size == 0 {
            return Err(Error::invalid("classifier needs positive widths and batch size"));
        }
        if config.resolution >> (config.widths.len() - 1) == 0 {
            return Err(Error::invalid(format!(
                "classifier resolution {} too small for {} layers",
                config.resolution,
                config.widths.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut rng, 1, config.widths[0], 3, 1, 1, 1.0);
        let downs = config
            .widths
            .windows(2)
            .map(|w| Conv2d::new(&mut rng, w[0], w[1], 4, 2, 1, 1.0))
            .collect();
        let last = *config.widths.last().unwrap();
        Ok(Self {
            config: config.clone(),
            stem,
            downs,
            head: Linear::new(&mut rng, last, Findings::N_CLASSES),
            losses: Vec::new(),
        })
    }

    fn pooled(&self, x: &Var) -> Var {
        let mut h = self.stem.forward(x).relu();
        for d in &self.downs {
            h = d.forward(&h).relu();
        }
        let (n, c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        h.reshape(&[n, c, hh * ww])
            .sum_to(&[n, c, 1])
            .reshape(&[n, c])
            .scale(1.0 / (hh * ww) as f64)
    }

    fn batch(&self, images: &[&Tensor]) -> Result<Var> {
        let r = self.config.resolution;
        let items = images
            .iter()
            .map(|t| Ok(resize_square(t, r)?.reshape(&[1, r, r])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::constant(Tensor::stack(&items)))
    }

    pub fn logits(&self, images: &[&Tensor]) -> Result<Var> {
        Ok(self.head.forward(&self.pooled(&self.batch(images)?)))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let p = self.probabilities(image)?;
        Ok((0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0))
    }
}

impl FeatureExtractor for FindingClassifier {
    fn id(&self) -> String {
        let mut bytes = Vec::new();
        for t in named_tensors(self).values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        format!("finding-cnn-{}@{}", self.config.resolution, &sha256_hex(&bytes)[..12])
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| Ok(self.pooled(&self.batch(&[image])?).value().data().to_vec()))
    }

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        let l = no_grad(|| self.logits(&[image]))?;
        Ok(softmax(l.value().data()))
    }
}

/// Mean softmax cross-entropy of `[N, K]` logits.
fn cross_entropy(logits: &Var, labels: &[usize]) -> Var {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let d = logits.value().data();
    let maxes: Vec<f64> = (0..n)
        .map(|i| d[i * k..(i + 1) * k].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    let m = Var::constant(Tensor::new(&[n, 1], maxes));
    let lse = logits.sub(&m.expand(&[n, k])).exp().sum_to(&[n, 1]).ln().add(&m);
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let picked = logits.mul(&Var::constant(Tensor::new(&[n, k], onehot))).sum();
    lse.sum().sub(&picked).scale(1.0 / n as f64)
}

/// Trains the bundled extractor on the frontal views of `studies`, labelled
/// by the findings their reports describe.
pub fn train_finding_classifier(
    studies: &[&LoadedStudy],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<FindingClassifier> {
    if studies.is_empty() {
        return Err(Error::Dataset("no studies to train the classifier on".into()));
    }
    let mut model = FindingClassifier::new(config, seed)?;
    let images: Vec<Tensor> = studies
        .iter()
        .map(|s| s.at(View::Frontal, config.resolution))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = studies
        .iter()
        .map(|s| findings_from_report(&s.record.report_text).class_index())
        .collect();
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173_7369_6679);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&model.logits(&batch)?, &y);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite("classifier training loss".into()));
            }
            total += loss.item() * chunk.len() as f64;
            let grads = backward(&loss);
            adam.begin_step();
            adam.update("", &mut model, &grads, config.lr);
        }
        model.losses.push(total / images.len() as f64);
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    config: ClassifierConfig,
    tensors: BTreeMap<String, Tensor>,
    losses: Vec<f64>,
}

pub fn save_classifier(model: &FindingClassifier, path: &Path) -> Result<()> {
    let file = ClassifierFile {
        config: model.config.clone(),
        tensors: named_tensors(model),
        losses: model.losses.clone(),
    };
    checkpoint::save(KIND, &file, path)
}

pub fn load_classifier(path: &Path) -> Result<FindingClassifier> {
    let file: ClassifierFile = checkpoint::load(KIND, path)?;
    let mut model = FindingClassifier::new(&file.config, 0)?;
    load_named(&mut model, &file.tensors).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    model.losses = file.losses;
    Ok(model)
}

/// Externally supplied linear extractor read from JSON:
/// `features = W x + b` on the flattened `[-1, 1]` image resized to `input_size`,
/// `probabilities = softmax(C features + c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearExtractor {
    pub id: String,
    pub input_size: usize,
    pub feature_weights: Vec<Vec<f64>>,
    pub feature_bias: Vec<f64>,
    pub class_weights: Vec<Vec<f64>>,
    pub class_bias: Vec<f64>,
}

impl LinearExtractor {
    pub fn from_json(text: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("extractor JSON: {e}")))?;
        e.check()?;
        Ok(e)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<()> {
        let p = self.input_size * self.input_size;
        let f = self.feature_bias.len();
        let bad = |m: String| Err(Error::invalid(format!("extractor {}: {m}", self.id)));
        if p == 0 || f == 0 || self.class_bias.is_empty() {
            return bad("empty dimensions".into());
        }
        if self.feature_weights.len() != f || self.feature_weights.iter().any(|r| r.len() != p) {
            return bad(format!("feature_weights must be {f} rows of {p}"));
        }
        if self.class_weights.len() != self.class_bias.len() || self.class_weights.iter().any(|r| r.len() != f) {
            return bad(format!("class_weights must be {} rows of {f}", self.class_bias.len()));
        }
        let all = self
            .feature_weights
            .iter()
            .chain(&self.class_weights)
            .flatten()
            .chain(&self.feature_bias)
            .chain(&self.class_bias);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("non-finite weight".into());
        }
        Ok(())
    }
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect()
}

impl FeatureExtractor for LinearExtractor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let x = resize_square(image, self.input_size)?;
        Ok(affine(&self.feature_weights, &self.feature_bias, x.data()))
    }

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        let f = self.features(image)?;
        Ok(softmax(&affine(&self.class_weights, &self.class_bias, &f)))
    }
}

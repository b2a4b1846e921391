//! Synthetic chest-film corpus.
//!
//! Each study samples a few discrete findings, writes a templated report
//! describing them, and renders a frontal and a lateral film from one shared
//! latent: anatomy scale, body brightness, heart width and (optionally) an
//! opacity whose height, density and size are the same in both views.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::save_png;
use super::manifest::{write_manifest, StudyRecord};
use super::LoadedStudy;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Frontal,
    Lateral,
}

impl View {
    pub const BOTH: [View; 2] = [View::Frontal, View::Lateral];

    pub fn name(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opacity {
    pub side: Side,
    pub zone: Zone,
    pub dense: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Findings {
    pub opacity: Option<Opacity>,
    pub cardiomegaly: bool,
}

impl Findings {
    pub const N_CLASSES: usize = 6;

    /// Class label used by the bundled feature extractor: opacity side
    /// (none/left/right) crossed with heart size.
    pub fn class_index(&self) -> usize {
        let side = match self.opacity {
            None => 0,
            Some(Opacity { side: Side::Left, .. }) => 1,
            Some(Opacity { side: Side::Right, .. }) => 2,
        };
        side * 2 + usize::from(self.cardiomegaly)
    }
}

/// Per-study rendering parameters shared by both views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub findings: Findings,
    pub thorax_scale: f64,
    pub brightness: f64,
    pub heart_width: f64,
    pub blob_dx: f64,
    pub blob_dy: f64,
    pub blob_radius: f64,
}

impl Latent {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let opacity = match rng.gen_range(0..3) {
            0 => None,
            s => Some(Opacity {
                side: if s == 1 { Side::Left } else { Side::Right },
                zone: if rng.gen_bool(0.5) { Zone::Upper } else { Zone::Lower },
                dense: rng.gen_bool(0.5),
            }),
        };
        let cardiomegaly = rng.gen_bool(0.4);
        let heart_width = if cardiomegaly {
            rng.gen_range(0.42..0.50)
        } else {
            rng.gen_range(0.26..0.34)
        };
        Self {
            findings: Findings { opacity, cardiomegaly },
            thorax_scale: rng.gen_range(0.92..1.05),
            brightness: rng.gen_range(-0.25..0.25),
            heart_width,
            blob_dx: rng.gen_range(-0.03..0.03),
            blob_dy: rng.gen_range(-0.03..0.03),
            blob_radius: rng.gen_range(0.06..0.09),
        }
    }

    pub fn with_findings(mut self, findings: Findings) -> Self {
        self.findings = findings;
        self
    }

    fn blob_centre(&self, view: View, op: &Opacity) -> (f64, f64) {
        let y = match op.zone {
            Zone::Upper => 0.40,
            Zone::Lower => 0.60,
        } + self.blob_dy;
        let x = match (view, op.side) {
            (View::Frontal, Side::Left) => 0.32,
            (View::Frontal, Side::Right) => 0.68,
            (View::Lateral, _) => 0.56,
        } + self.blob_dx;
        (x, y)
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft ellipse coverage in `[0, 1]`.
fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, edge: f64) -> f64 {
    let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    1.0 - smoothstep(1.0 - edge, 1.0 + edge, d)
}

fn paint(v: &mut f64, coverage: f64, value: f64) {
    *v = *v * (1.0 - coverage) + value * coverage;
}

fn blob_value(latent: &Latent, view: View, u: f64, v: f64) -> f64 {
    let Some(op) = &latent.findings.opacity else {
        return 0.0;
    };
    let (cx, cy) = latent.blob_centre(view, op);
    let amp = if op.dense { 0.9 } else { 0.5 };
    let r2 = (u - cx).powi(2) + (v - cy).powi(2);
    amp * (-r2 / (2.0 * latent.blob_radius.powi(2))).exp()
}

fn pixel(latent: &Latent, view: View, u: f64, v: f64, findings_only: bool) -> f64 {
    let s = latent.thorax_scale;
    let tissue = -0.1 + latent.brightness;
    let lung = -0.75 + 0.5 * latent.brightness;
    let heart_value = 0.25 + latent.brightness;
    let edge = 0.08;
    let (heart_cx, heart_rx) = match view {
        View::Frontal => (0.5, latent.heart_width / 2.0),
        View::Lateral => (0.36, latent.heart_width * 0.45),
    };
    if findings_only {
        // The part of the film attributable to the findings: the opacity plus
        // heart coverage beyond the normal-size silhouette.
        let normal_rx = match view {
            View::Frontal => 0.15,
            View::Lateral => 0.135,
        };
        let excess = (ellipse(u, v, heart_cx, 0.63, heart_rx, 0.15, edge)
            - ellipse(u, v, heart_cx, 0.63, normal_rx, 0.15, edge))
        .max(0.0);
        return blob_value(latent, view, u, v) + excess;
    }
    let mut px = -1.0;
    match view {
        View::Frontal => {
            paint(&mut px, ellipse(u, v, 0.5, 0.55, 0.42 * s, 0.42 * s, edge), tissue);
            paint(&mut px, ellipse(u, v, 0.32, 0.5, 0.14 * s, 0.3 * s, edge), lung);
            paint(&mut px, ellipse(u, v, 0.68, 0.5, 0.14 * s, 0.3 * s, edge), lung);
            paint(
                &mut px,
                ellipse(u, v, heart_cx, 0.63, heart_rx, 0.15, edge),
                heart_value,
            );
            let spine = 1.0 - smoothstep(0.025, 0.045, (u - 0.5).abs());
            paint(&mut px, spine * ellipse(u, v, 0.5, 0.55, 0.42 * s, 0.42 * s, edge), 0.4);
        }
        View::Lateral => {
            paint(&mut px, ellipse(u, v, 0.5, 0.55, 0.36 * s, 0.42 * s, edge), tissue);
            paint(&mut px, ellipse(u, v, 0.54, 0.5, 0.22 * s, 0.3 * s, edge), lung);
            paint(
                &mut px,
                ellipse(u, v, heart_cx, 0.63, heart_rx, 0.15, edge),
                heart_value,
            );
            let spine = 1.0 - smoothstep(0.02, 0.04, (u - 0.8).abs());
            paint(&mut px, spine * ellipse(u, v, 0.5, 0.55, 0.36 * s, 0.42 * s, edge), 0.4);
        }
    }
    (px + blob_value(latent, view, u, v)).clamp(-1.0, 1.0)
}

fn raster(size: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            data.push(f(u, v));
        }
    }
    Tensor::new(&[size, size], data)
}

/// Renders one view as a `[size, size]` image in `[-1, 1]`.
pub fn render(latent: &Latent, view: View, size: usize) -> Tensor {
    raster(size, |u, v| pixel(latent, view, u, v, false))
}

/// Intensity attributable to the findings alone (opacity and heart enlargement).
pub fn finding_mask(latent: &Latent, view: View, size: usize) -> Tensor {
    raster(size, |u, v| pixel(latent, view, u, v, true))
}

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().unwrap_or("")
}

/// Templated report text describing `findings`.
pub fn report_text(findings: &Findings, rng: &mut impl Rng) -> String {
    let heart = if findings.cardiomegaly {
        pick(
            rng,
            &[
                "The heart is enlarged.",
                "Cardiomegaly is present.",
                "There is moderate cardiomegaly.",
            ],
        )
    } else {
        pick(
            rng,
            &[
                "Heart size is normal.",
                "The cardiac silhouette is normal.",
                "Normal heart size.",
            ],
        )
    };
    let lungs = match &findings.opacity {
        None => pick(
            rng,
            &["No focal opacity.", "The lungs are clear.", "No focal consolidation."],
        )
        .to_string(),
        Some(op) => {
            let density = if op.dense { "dense" } else { "mild" };
            let side = match op.side {
                Side::Left => "left",
                Side::Right => "right",
            };
            let zone = match op.zone {
                Zone::Upper => "upper",
                Zone::Lower => "lower",
            };
            if rng.gen_bool(0.5) {
                format!("There is a {density} opacity in the {side} {zone} lung.")
            } else {
                format!("A {density} airspace opacity is seen in the {zone} {side} lung zone.")
            }
        }
    };
    let fillers = [
        "No pleural effusion.",
        "No pneumothorax.",
        "Osseous structures are intact.",
        "Mediastinal contours are unremarkable.",
    ];
    let mut sentences = vec![heart.to_string(), lungs];
    if rng.gen_bool(0.5) {
        sentences.swap(0, 1);
    }
    let n_fill = rng.gen_range(0..=2);
    for f in fillers.choose_multiple(rng, n_fill) {
        sentences.push(f.to_string());
    }
    sentences.join(" ")
}

/// Recovers the findings from a report produced by [`report_text`].
pub fn findings_from_report(text: &str) -> Findings {
    let lower = text.to_lowercase();
    let cardiomegaly = lower.contains("enlarged") || lower.contains("cardiomegaly");
    let opacity = lower
        .split(['.', '!', '?'])
        .find(|s| s.contains("opacity") && !s.split_whitespace().any(|w| w == "no"))
        .and_then(|s| {
            let words: Vec<&str> = s.split_whitespace().collect();
            let side = if words.contains(&"left") {
                Side::Left
            } else if words.contains(&"right") {
                Side::Right
            } else {
                return None;
            };
            let zone = if words.contains(&"upper") {
                Zone::Upper
            } else {
                Zone::Lower
            };
            Some(Opacity {
                side,
                zone,
                dense: words.contains(&"dense"),
            })
        });
    Findings { opacity, cardiomegaly }
}

pub struct SyntheticStudy {
    pub record: StudyRecord,
    pub latent: Latent,
}

/// Samples `n` studies (latent, report, ids) without touching the filesystem.
pub fn sample_studies(n: usize, seed: u64) -> Vec<SyntheticStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let latent = Latent::sample(&mut rng);
            let report_text = report_text(&latent.findings, &mut rng);
            let study_id = format!("study-{i:05}");
            SyntheticStudy {
                record: StudyRecord {
                    patient_id: format!("patient-{i:05}"),
                    report_text,
                    frontal_path: PathBuf::from(format!("images/{study_id}_frontal.png")),
                    lateral_path: PathBuf::from(format!("images/{study_id}_lateral.png")),
                    study_id,
                },
                latent,
            }
        })
        .collect()
}

/// In-memory equivalent of [`generate_synthetic_corpus`] (without 8-bit quantization).
pub fn render_studies(n: usize, image_size: usize, seed: u64) -> Vec<LoadedStudy> {
    sample_studies(n, seed)
        .into_iter()
        .map(|s| LoadedStudy {
            frontal: render(&s.latent, View::Frontal, image_size),
            lateral: render(&s.latent, View::Lateral, image_size),
            record: s.record,
        })
        .collect()
}

/// Writes `n` synthetic studies under `out_dir` and returns the manifest path.
pub fn generate_synthetic_corpus(n: usize, image_size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::invalid("synthetic corpus needs n >= 1"));
    }
    if image_size < 16 || !image_size.is_power_of_two() {
        return Err(Error::invalid(format!(
            "image size must be a power of two >= 16, got {image_size}"
        )));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let studies = sample_studies(n, seed);
    for s in &studies {
        for view in View::BOTH {
            let path = match view {
                View::Frontal => &s.record.frontal_path,
                View::Lateral => &s.record.lateral_path,
            };
            save_png(&render(&s.latent, view, image_size), &out_dir.join(path))?;
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    let records: Vec<StudyRecord> = studies.into_iter().map(|s| s.record).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

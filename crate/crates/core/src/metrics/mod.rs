//! Inception Score, Fréchet distance, SSIM and view consistency.

mod extractor;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use extractor::{
    load_classifier, save_classifier, train_finding_classifier, ClassifierConfig, FeatureExtractor, FindingClassifier,
    LinearExtractor,
};

use crate::autograd::Tensor;
use crate::corpus::image::resize_square;
use crate::corpus::{LoadedStudy, View};
use crate::error::{Error, Result};
use crate::gan::StageImage;
use crate::trainer::{generate_batch, TrainData, TrainState};
use crate::vcn::{score_pairs, PairExample, VcnParams};

/// `exp(E_x KL(p(y|x) || p(y)))` per split; mean and population std over splits.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::invalid("inception score of an empty set"));
    }
    if n_splits == 0 || probs.len() < n_splits {
        return Err(Error::invalid(format!(
            "need at least {n_splits} images for {n_splits} splits, got {}",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for p in probs {
        if p.len() != k || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid("class probabilities must be non-negative and sum to 1"));
        }
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let kl: f64 = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, m)| v * (v / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

fn moments(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = DVector::zeros(d);
    for row in x {
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in x {
        let c = DVector::from_column_slice(row) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues clamp to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the product root taken as `Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2)`.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("FID needs at least 2 samples per set"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::shape("FID feature dimensions differ"));
    }
    let (mu_a, s_a) = moments(a);
    let (mu_b, s_b) = moments(b);
    let root_a = sqrt_psd(&s_a);
    let inner = &root_a * &s_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    Ok((mean_term + s_a.trace() + s_b.trace() - 2.0 * tr_root).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    /// `[-1, 1]`, the in-memory convention of this crate
    Signed,
    /// `[0, 1]`
    Unit,
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows, computed on
/// `[0, 1]` pixels. Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor, range: PixelRange) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(format!(
            "SSIM needs equal 2-D images, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut win = 11.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(Error::shape("SSIM of an empty image"));
    }
    let unit = |t: &Tensor| -> Vec<f64> {
        match range {
            PixelRange::Signed => t.data().iter().map(|v| (v + 1.0) * 0.5).collect(),
            PixelRange::Unit => t.data().to_vec(),
        }
    };
    let (x, y) = (unit(a), unit(b));
    let g = gaussian_window(win, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wt = g[u] * g[v];
                    let (p, q) = (x[(i + u) * w + j + v], y[(i + u) * w + j + v]);
                    mx += wt * p;
                    my += wt * q;
                    xx += wt * p * p;
                    yy += wt * q * q;
                    xy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean eval-VCN score over generated pairs at the VCN's resolution.
pub fn vc_metric(pairs: &[(StageImage, StageImage)], eval_vcn: &VcnParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("VC metric of an empty set"));
    }
    let examples: Vec<PairExample> = pairs
        .iter()
        .map(|(f, l)| {
            if f.side() != eval_vcn.resolution || l.side() != eval_vcn.resolution {
                return Err(Error::shape(format!(
                    "eval VCN works at {r}x{r}, pair is {}x{} / {}x{}",
                    f.side(),
                    f.side(),
                    l.side(),
                    l.side(),
                    r = eval_vcn.resolution
                )));
            }
            Ok(PairExample {
                frontal: f.clone(),
                lateral: l.clone(),
                consistent: true,
            })
        })
        .collect::<Result<_>>()?;
    let scores = score_pairs(eval_vcn, &examples)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub ssim_mean: f64,
    pub vc_mean: f64,
    pub n_samples: usize,
    pub extractor: String,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 4] = ["IS", "FID", "SSIM", "VC"];

    /// Plain-text table with the columns IS, FID, SSIM, VC.
    pub fn to_table(&self) -> String {
        let cells = [
            format!("{:.4} ± {:.4}", self.is_mean, self.is_std),
            format!("{:.4}", self.fid),
            format!("{:.4}", self.ssim_mean),
            format!("{:.4}", self.vc_mean),
        ];
        let widths: Vec<usize> = Self::COLUMNS
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.chars().count().max(c.chars().count()))
            .collect();
        let row = |items: Vec<String>| {
            let padded: Vec<String> = items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            format!("| {} |", padded.join(" | "))
        };
        let rule = format!(
            "|{}|",
            widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
        );
        format!(
            "{}\n{rule}\n{}\n\n{} samples, extractor {}\n",
            row(Self::COLUMNS.iter().map(|s| s.to_string()).collect()),
            row(cells.to_vec()),
            self.n_samples,
            self.extractor
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub is_splits: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { is_splits: 1 }
    }
}

/// Generates a pair for every study and scores it against the real images.
/// IS and FID use the frontal view; SSIM averages both views.
pub fn evaluate(
    state: &TrainState,
    data: &TrainData,
    studies: &[&LoadedStudy],
    extractor: &dyn FeatureExtractor,
    eval_vcn: &VcnParams,
    options: EvalOptions,
) -> Result<MetricReport> {
    if studies.len() < 2 {
        return Err(Error::Dataset("evaluation needs at least 2 studies".into()));
    }
    let n = state.config.n_stages;
    let side = state.config.gan().final_resolution();
    let reports = studies
        .iter()
        .map(|s| {
            data.reports
                .get(&s.record.study_id)
                .ok_or_else(|| Error::Dataset(format!("study {} has no tokenized report", s.record.study_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let generated = generate_batch(state, &reports, n)?;

    let mut probs = Vec::new();
    let mut fake_feats = Vec::new();
    let mut real_feats = Vec::new();
    let mut ssim_sum = 0.0;
    let mut vc_pairs = Vec::new();
    for (study, (f, l)) in studies.iter().zip(&generated) {
        probs.push(extractor.probabilities(&f.pixels)?);
        fake_feats.push(extractor.features(&f.pixels)?);
        let real_f = study.at(View::Frontal, side)?;
        real_feats.push(extractor.features(&real_f)?);
        ssim_sum += ssim(&f.pixels, &real_f, PixelRange::Signed)?;
        ssim_sum += ssim(&l.pixels, &study.at(View::Lateral, side)?, PixelRange::Signed)?;
        let r = eval_vcn.resolution;
        vc_pairs.push((
            StageImage::new(resize_square(&f.pixels, r)?, n, View::Frontal),
            StageImage::new(resize_square(&l.pixels, r)?, n, View::Lateral),
        ));
    }
    let (is_mean, is_std) = inception_score(&probs, options.is_splits)?;
    Ok(MetricReport {
        is_mean,
        is_std,
        fid: fid(&real_feats, &fake_feats)?,
        ssim_mean: ssim_sum / (2 * studies.len()) as f64,
        vc_mean: vc_metric(&vc_pairs, eval_vcn)?,
        n_samples: studies.len(),
        extractor: extractor.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        let normal = |rng: &mut ChaCha8Rng| {
            let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        };
        (0..n).map(|_| (0..d).map(|_| normal(rng)).collect()).collect()
    }

    #[test]
    fn is_closed_forms() {
        let uniform = vec![vec![0.25; 4]; 10];
        assert!((inception_score(&uniform, 1).unwrap().0 - 1.0).abs() < 1e-12);
        let k = 5;
        let onehot: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        assert!((inception_score(&onehot, 1).unwrap().0 - k as f64).abs() < 1e-9);
        let doubled: Vec<Vec<f64>> = onehot.iter().chain(&onehot).cloned().collect();
        assert!((inception_score(&doubled, 1).unwrap().0 - k as f64).abs() < 1e-9);
        assert!(inception_score(&[], 1).is_err());
        assert!(inception_score(&onehot, 6).is_err());
        assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
    }

    #[test]
    fn fid_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(&mut rng, 50, 4);
        assert!(fid(&a, &a).unwrap() < 1e-9);
        let d = [0.5, -1.0, 2.0, 0.0];
        let shifted: Vec<Vec<f64>> = a
            .iter()
            .map(|r| r.iter().zip(&d).map(|(x, s)| x + s).collect())
            .collect();
        assert!((fid(&a, &shifted).unwrap() - 5.25).abs() < 1e-9);
        let b = gaussian(&mut rng, 40, 4);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(fid(&a[..1], &b).is_err());
        assert!(fid(&a, &[vec![0.0; 3], vec![1.0; 3]]).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(&[16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!((ssim(&x, &x, PixelRange::Signed).unwrap() - 1.0).abs() < 1e-12);
        let (m1, m2) = (0.2, 0.7);
        let (c1, c2) = (1e-4, 9e-4);
        let expect = (2.0 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
        let got = ssim(
            &Tensor::full(&[12, 12], m1),
            &Tensor::full(&[12, 12], m2),
            PixelRange::Unit,
        )
        .unwrap();
        assert!((got - expect).abs() < 1e-12);
        let bin = Tensor::new(
            &[16, 16],
            (0..256)
                .map(|i| f64::from(u8::from((i * 7 + i / 16) % 3 == 0)))
                .collect(),
        );
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv, PixelRange::Unit).unwrap() < 1.0);
        let y = x.map(|v| (v * 0.5).tanh());
        assert!((ssim(&x, &y, PixelRange::Signed).unwrap() - ssim(&y, &x, PixelRange::Signed).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &Tensor::zeros(&[8, 8]), PixelRange::Signed).is_err());
        let small = Tensor::full(&[4, 4], 0.3);
        assert!((ssim(&small, &small, PixelRange::Signed).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vc_of_identical_views_is_half() {
        let cfg = crate::vcn::VcnConfig {
            widths: vec![2],
            embed_dim: 3,
            ..Default::default()
        };
        let mut v = crate::vcn::init_vcn(&cfg, 1, 8, 0).unwrap();
        v.weights = crate::autograd::Var::param(Tensor::new(&[3, 1], vec![1.0, -3.0, 0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..4)
            .map(|_| {
                let t = Tensor::new(&[8, 8], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
                (
                    StageImage::new(t.clone(), 1, View::Frontal),
                    StageImage::new(t, 1, View::Lateral),
                )
            })
            .collect();
        assert_eq!(vc_metric(&pairs, &v).unwrap(), 0.5);
        let wrong = vec![(
            StageImage::new(Tensor::zeros(&[16, 16]), 1, View::Frontal),
            StageImage::new(Tensor::zeros(&[16, 16]), 1, View::Lateral),
        )];
        assert!(vc_metric(&wrong, &v).is_err());
    }

    #[test]
    fn table_has_four_columns() {
        let r = MetricReport {
            is_mean: 1.5,
            is_std: 0.1,
            fid: 12.0,
            ssim_mean: 0.4,
            vc_mean: 0.6,
            n_samples: 3,
            extractor: "x".into(),
        };
        let t = r.to_table();
        let header: Vec<&str> = t
            .lines()
            .next()
            .unwrap()
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        assert_eq!(header, MetricReport::COLUMNS);
        assert!(t.contains("1.5000 ± 0.1000"));
    }
}

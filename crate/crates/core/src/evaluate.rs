//! Prediction quality metrics, threshold classification and the comparative
//! evaluation of the diffusion ensemble against the deterministic baseline.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, DatasetKind, FireFrame};
use crate::diffusion::{ensemble_predict, DiffusionConfig, EnsemblePrediction};
use crate::error::{Error, Result};
use crate::unet::ModelKind;

/// Clamp applied to both distributions by [`kl_divergence`].
pub const KL_DELTA: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &FireFrame, b: &FireFrame) -> Result<()> {
    a.same_dims(b)
}

pub fn mse(pred: &FireFrame, target: &FireFrame) -> Result<f64> {
    check_dims(pred, target)?;
    let s: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Peak signal-to-noise ratio for a unit dynamic range. Identical frames
/// give `f64::INFINITY`.
pub fn psnr(pred: &FireFrame, target: &FireFrame) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11x11 Gaussian window, averaged over every
/// window that fits entirely inside the frame.
pub fn ssim(pred: &FireFrame, target: &FireFrame) -> Result<f64> {
    check_dims(pred, target)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::FrameTooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let x: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.values.iter().map(|&v| v as f64).collect();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (a, ga) in g.iter().enumerate() {
                let row = (i + a) * w + j;
                for (b, gb) in g.iter().enumerate() {
                    let k = ga * gb;
                    let (p, q) = (x[row + b], y[row + b]);
                    mx += k * p;
                    my += k * q;
                    xx += k * p * p;
                    yy += k * q * q;
                    xy += k * p * q;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Fraction of pixels with a positive target that are predicted within
/// `epsilon` (strictly).
pub fn hit_rate(pred: &FireFrame, target: &FireFrame, epsilon: f64) -> Result<f64> {
    check_dims(pred, target)?;
    let (mut hits, mut valid) = (0usize, 0usize);
    for (&p, &t) in pred.values.iter().zip(&target.values) {
        if t > 0.0 {
            valid += 1;
            if ((p as f64) - (t as f64)).abs() < epsilon {
                hits += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(hits as f64 / valid as f64)
}

/// Per-pixel Bernoulli KL divergence `KL(target || pred)` summed over the
/// frame, with both probabilities clamped to `[KL_DELTA, 1 - KL_DELTA]`.
pub fn kl_divergence(pred: &FireFrame, target: &FireFrame) -> Result<f64> {
    check_dims(pred, target)?;
    let c = |v: f32| (v as f64).clamp(KL_DELTA, 1.0 - KL_DELTA);
    Ok(pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &q)| {
            let (p, q) = (c(p), c(q));
            q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
        })
        .sum())
}

/// Maps a frame to a fixed-length feature vector.
pub trait Embedding {
    fn dim(&self) -> usize;
    fn embed(&self, frame: &FireFrame) -> Vec<f64>;
}

/// Handcrafted features: 4x4 average pool, burned-area fraction, perimeter
/// estimate and an 8-bin intensity histogram (26 values).
///
/// This is a deterministic stand-in for a learned feature extractor, so
/// distances computed with it are only comparable with each other.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandcraftedEmbedding;

impl Embedding for HandcraftedEmbedding {
    fn dim(&self) -> usize {
        26
    }

    fn embed(&self, f: &FireFrame) -> Vec<f64> {
        let (h, w) = f.dims();
        let v = |r: usize, c: usize| f.values[r * w + c] as f64;
        let mut out = Vec::with_capacity(26);
        for bi in 0..4 {
            for bj in 0..4 {
                let (r0, r1) = (bi * h / 4, ((bi + 1) * h / 4).max(bi * h / 4 + 1).min(h));
                let (c0, c1) = (bj * w / 4, ((bj + 1) * w / 4).max(bj * w / 4 + 1).min(w));
                let mut s = 0.0;
                let mut n = 0usize;
                for r in r0.min(h - 1)..r1 {
                    for c in c0.min(w - 1)..c1 {
                        s += v(r, c);
                        n += 1;
                    }
                }
                out.push(if n > 0 { s / n as f64 } else { 0.0 });
            }
        }
        let cells = (h * w) as f64;
        out.push(f.values.iter().map(|&x| x as f64).sum::<f64>() / cells);
        let mut edge = 0.0;
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    edge += (v(r, c) - v(r, c + 1)).abs();
                }
                if r + 1 < h {
                    edge += (v(r, c) - v(r + 1, c)).abs();
                }
            }
        }
        out.push(edge / cells);
        let mut hist = [0.0f64; 8];
        for &x in &f.values {
            hist[((x as f64 * 8.0) as usize).min(7)] += 1.0;
        }
        out.extend(hist.iter().map(|c| c / cells));
        out
    }
}

fn mean_cov(features: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Principal square root of a symmetric positive semi-definite matrix. Small
/// negative eigenvalues from round-off are clipped to zero; clearly negative
/// ones trigger a `1e-6 I` regularisation.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let mut eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        log::warn!("covariance product is not positive semi-definite; adding 1e-6 I");
        let n = sym.nrows();
        eig = SymmetricEigen::new(sym + DMatrix::identity(n, n) * 1e-6);
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the embedded sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_feature_distance(
    set_a: &[FireFrame],
    set_b: &[FireFrame],
    embed: &dyn Embedding,
) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "Fréchet distance needs at least 2 frames per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let d = embed.dim();
    let fa: Vec<Vec<f64>> = set_a.iter().map(|f| embed.embed(f)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|f| embed.embed(f)).collect();
    let (mu_a, cov_a) = mean_cov(&fa, d);
    let (mu_b, cov_b) = mean_cov(&fb, d);
    // tr((A B)^(1/2)) = tr((A^(1/2) B A^(1/2))^(1/2)), which is symmetric
    let ra = sqrtm_psd(&cov_a);
    let inner = sqrtm_psd(&(&ra * &cov_b * &ra));
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * inner.trace()).max(0.0))
}

/// Per-pixel confusion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

impl Label {
    /// TP green, FP red, FN blue, TN black.
    pub fn color(self) -> [u8; 3] {
        match self {
            Label::TruePositive => [0, 255, 0],
            Label::FalsePositive => [255, 0, 0],
            Label::FalseNegative => [0, 0, 255],
            Label::TrueNegative => [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub mcc: f64,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl ThresholdResult {
    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }

    pub fn mismatch_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.labels[y as usize * self.width + x as usize].color())
        })
    }

    pub fn export_png(&self, path: &Path) -> Result<()> {
        self.mismatch_image().save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub results: Vec<ThresholdResult>,
}

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Binarizes prediction and target at each threshold (`value > threshold`
/// is positive) and scores the agreement. Undefined ratios are reported
/// as 0.
pub fn threshold_sweep(pred: &FireFrame, target: &FireFrame, thresholds: &[f64]) -> Result<ThresholdSweep> {
    check_dims(pred, target)?;
    let results = thresholds
        .iter()
        .map(|&th| {
            let labels: Vec<Label> = pred
                .values
                .iter()
                .zip(&target.values)
                .map(|(&p, &t)| match ((p as f64) > th, (t as f64) > th) {
                    (true, true) => Label::TruePositive,
                    (true, false) => Label::FalsePositive,
                    (false, true) => Label::FalseNegative,
                    (false, false) => Label::TrueNegative,
                })
                .collect();
            let count = |l: Label| labels.iter().filter(|&&x| x == l).count();
            let (tp, fp, fn_, tn) = (
                count(Label::TruePositive),
                count(Label::FalsePositive),
                count(Label::FalseNegative),
                count(Label::TrueNegative),
            );
            let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
            let precision = ratio(tpf, tpf + fpf);
            let recall = ratio(tpf, tpf + fnf);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            let f2 = ratio(5.0 * precision * recall, 4.0 * precision + recall);
            let den = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
            let mcc = ratio(tpf * tnf - fpf * fnf, den);
            ThresholdResult {
                threshold: th,
                tp,
                fp,
                fn_,
                tn,
                precision,
                recall,
                f1,
                f2,
                mcc,
                width: pred.width,
                height: pred.height,
                labels,
            }
        })
        .collect();
    Ok(ThresholdSweep { results })
}

/// Metrics of one prediction. `kl` is only computed for the ensemble model;
/// `hit_rate` is `None` when the target has no positive pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub hit_rate: Option<f64>,
    pub kl: Option<f64>,
}

pub fn metric_report(pred: &FireFrame, target: &FireFrame, epsilon: f64, with_kl: bool) -> Result<MetricReport> {
    let m = mse(pred, target)?;
    Ok(MetricReport {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(pred, target)?,
        hit_rate: match hit_rate(pred, target, epsilon) {
            Ok(v) => Some(v),
            Err(Error::NoValidPixels) => None,
            Err(e) => return Err(e),
        },
        kl: if with_kl { Some(kl_divergence(pred, target)?) } else { None },
    })
}

/// One-sided exact sign test of "`a` tends to be smaller than `b`". Ties
/// are dropped. Returns `(wins, losses, p)` with
/// `p = P(X >= wins)`, `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    if n == 0 {
        return (0, 0, 1.0);
    }
    // log-space binomial tail
    let ln_choose = |k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    };
    let p: f64 = (wins..=n)
        .map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum();
    (wins, losses, p.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ensemble members per prediction.
    pub ensemble_size: usize,
    /// Members sampled together in one network batch.
    pub batch_size: usize,
    pub hit_epsilon: f64,
    pub thresholds: Vec<f64>,
    /// Threshold whose mismatch maps are exported as PNGs.
    pub mismatch_threshold: f64,
    /// Number of pairs (from the start) whose mismatch maps are exported.
    pub mismatch_pngs: usize,
    /// Sampling steps used at evaluation; 0 keeps the diffusion config value.
    pub sampling_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 20,
            batch_size: 4,
            hit_epsilon: 0.2,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            mismatch_threshold: 0.5,
            mismatch_pngs: 4,
            sampling_steps: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 1 {
            return Err(Error::InvalidEnsembleSize(self.ensemble_size));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("eval batch_size must be >= 1".into()));
        }
        if !(self.hit_epsilon > 0.0) {
            return Err(Error::InvalidConfig("hit_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub index: usize,
    pub diffusion: MetricReport,
    pub baseline: MetricReport,
    /// MSE of the first ensemble member alone (an ensemble of one).
    pub diffusion_single_mse: f64,
    pub diffusion_sweep: ThresholdSweep,
    pub baseline_sweep: ThresholdSweep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mse: f64,
    /// Mean over finite values only.
    pub psnr: f64,
    pub psnr_infinite: usize,
    pub ssim: f64,
    pub hit_rate: Option<f64>,
    pub hit_rate_pairs: usize,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ensemble_size: usize,
    pub sampling_steps: usize,
    pub pairs: Vec<PairResult>,
    pub diffusion: Aggregate,
    pub baseline: Aggregate,
    pub diffusion_single_mse: f64,
    /// Sign test of ensemble MSE against single-member MSE.
    pub ensemble_sign_test: (usize, usize, f64),
    pub diffusion_frechet: Option<f64>,
    pub baseline_frechet: Option<f64>,
    /// `(threshold, mean F1, mean MCC)` per model.
    pub diffusion_thresholds: Vec<(f64, f64, f64)>,
    pub baseline_thresholds: Vec<(f64, f64, f64)>,
}

fn aggregate(reports: &[MetricReport]) -> Aggregate {
    let n = reports.len() as f64;
    let finite: Vec<f64> = reports.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
    let hits: Vec<f64> = reports.iter().filter_map(|r| r.hit_rate).collect();
    let kls: Vec<f64> = reports.iter().filter_map(|r| r.kl).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Aggregate {
        mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
        psnr: if finite.is_empty() { f64::INFINITY } else { mean(&finite) },
        psnr_infinite: reports.len() - finite.len(),
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        hit_rate: (!hits.is_empty()).then(|| mean(&hits)),
        hit_rate_pairs: hits.len(),
        kl: (!kls.is_empty()).then(|| mean(&kls)),
    }
}

fn sweep_means(sweeps: &[&ThresholdSweep]) -> Vec<(f64, f64, f64)> {
    let n = sweeps.len() as f64;
    (0..sweeps[0].results.len())
        .map(|i| {
            let th = sweeps[0].results[i].threshold;
            let f1 = sweeps.iter().map(|s| s.results[i].f1).sum::<f64>() / n;
            let mcc = sweeps.iter().map(|s| s.results[i].mcc).sum::<f64>() / n;
            (th, f1, mcc)
        })
        .collect()
}

/// Deterministic prediction of the baseline, clamped to `[0, 1]`.
pub fn baseline_predict(model: &crate::diffusion::Denoiser, input: &FireFrame) -> Result<FireFrame> {
    let (h, w) = input.dims();
    let out = model.forward(input.values.clone(), 1, h, w, &[0.0])?;
    Ok(FireFrame {
        width: w,
        height: h,
        values: out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    })
}

/// Compares the diffusion ensemble with the baseline on every pair of an
/// ensemble dataset. Sampling of pair `i` uses seed `derive_seed(seed, i)`.
/// `on_pair` is called after each pair with its index, for progress output.
pub fn evaluate_models(
    diffusion: &Checkpoint,
    baseline: &Checkpoint,
    data: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
    mut on_pair: impl FnMut(usize),
) -> Result<(EvalReport, Vec<EnsemblePrediction>, Vec<FireFrame>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples("evaluation dataset is empty".into()));
    }
    if data.kind != DatasetKind::Ensemble {
        log::warn!("evaluating on a {} dataset; targets are single realisations", data.kind.as_str());
    }
    for (ck, kind, ch) in [(diffusion, ModelKind::Diffusion, 2), (baseline, ModelKind::Deterministic, 1)] {
        if ck.kind != kind || ck.net.in_channels != ch {
            return Err(Error::CheckpointMismatch(format!(
                "expected a {} checkpoint with {ch} input channels",
                kind.as_str()
            )));
        }
        if ck.net.image_size != data.width || ck.net.image_size != data.height {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is for {0}x{0} frames, dataset is {1}x{2}",
                ck.net.image_size, data.height, data.width
            )));
        }
    }
    let dcfg = DiffusionConfig {
        sampling_steps: if cfg.sampling_steps > 0 {
            cfg.sampling_steps
        } else {
            diffusion.diffusion.sampling_steps
        },
        ..diffusion.diffusion
    };
    let schedule = dcfg.schedule()?;
    let dmodel = diffusion.denoiser()?;
    let bmodel = baseline.denoiser()?;
    let mut pairs = Vec::with_capacity(data.len());
    let mut ensembles = Vec::with_capacity(data.len());
    let mut base_preds = Vec::with_capacity(data.len());
    for (i, p) in data.pairs.iter().enumerate() {
        let ens = ensemble_predict(
            &dmodel,
            &p.input,
            cfg.ensemble_size,
            &dcfg,
            &schedule,
            crate::rng::derive_seed(seed, i as u64),
            cfg.batch_size,
        )?;
        let base = baseline_predict(&bmodel, &p.input)?;
        pairs.push(PairResult {
            index: i,
            diffusion: metric_report(&ens.mean, &p.target, cfg.hit_epsilon, true)?,
            baseline: metric_report(&base, &p.target, cfg.hit_epsilon, false)?,
            diffusion_single_mse: mse(&ens.members[0], &p.target)?,
            diffusion_sweep: threshold_sweep(&ens.mean, &p.target, &cfg.thresholds)?,
            baseline_sweep: threshold_sweep(&base, &p.target, &cfg.thresholds)?,
        });
        ensembles.push(ens);
        base_preds.push(base);
        on_pair(i);
    }
    let dm: Vec<MetricReport> = pairs.iter().map(|p| p.diffusion).collect();
    let bm: Vec<MetricReport> = pairs.iter().map(|p| p.baseline).collect();
    let ens_mse: Vec<f64> = dm.iter().map(|r| r.mse).collect();
    let single: Vec<f64> = pairs.iter().map(|p| p.diffusion_single_mse).collect();
    let targets: Vec<FireFrame> = data.pairs.iter().map(|p| p.target.clone()).collect();
    let means: Vec<FireFrame> = ensembles.iter().map(|e| e.mean.clone()).collect();
    let fd = |set: &[FireFrame]| frechet_feature_distance(set, &targets, &HandcraftedEmbedding).ok();
    let ds: Vec<&ThresholdSweep> = pairs.iter().map(|p| &p.diffusion_sweep).collect();
    let bs: Vec<&ThresholdSweep> = pairs.iter().map(|p| &p.baseline_sweep).collect();
    let report = EvalReport {
        ensemble_size: cfg.ensemble_size,
        sampling_steps: dcfg.sampling_steps,
        diffusion: aggregate(&dm),
        baseline: aggregate(&bm),
        diffusion_single_mse: single.iter().sum::<f64>() / single.len() as f64,
        ensemble_sign_test: sign_test(&ens_mse, &single),
        diffusion_frechet: fd(&means),
        baseline_frechet: fd(&base_preds),
        diffusion_thresholds: sweep_means(&ds),
        baseline_thresholds: sweep_means(&bs),
        pairs,
    };
    Ok((report, ensembles, base_preds))
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_metric).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Human-readable report: a header, one block per pair and the
    /// aggregate block.
    pub fn to_text(&self, header: &[(String, String)]) -> String {
        let mut s = String::new();
        s.push_str("# pyrocast evaluation report\n");
        for (k, v) in header {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s, "ensemble_size: {}", self.ensemble_size);
        let _ = writeln!(s, "sampling_steps: {}", self.sampling_steps);
        let _ = writeln!(
            s,
            "kl_definition: sum over pixels of Bernoulli KL(target || prediction), probabilities clamped to [{KL_DELTA:e}, 1 - {KL_DELTA:e}], natural log"
        );
        let _ = writeln!(s, "frechet_embedding: handcrafted 26-dim (4x4 pool, area, perimeter, 8-bin histogram)");
        for p in &self.pairs {
            let _ = writeln!(s, "\n[pair {}]", p.index);
            for (name, r) in [("diffusion", &p.diffusion), ("baseline", &p.baseline)] {
                let _ = writeln!(
                    s,
                    "{name}: mse={} psnr={} ssim={} hit_rate={} kl={}",
                    fmt_metric(r.mse),
                    fmt_metric(r.psnr),
                    fmt_metric(r.ssim),
                    fmt_opt(r.hit_rate),
                    fmt_opt(r.kl)
                );
            }
            let _ = writeln!(s, "diffusion_single_member: mse={}", fmt_metric(p.diffusion_single_mse));
        }
        s.push_str("\n[aggregate]\n");
        for (name, a, fd, th) in [
            ("diffusion", &self.diffusion, self.diffusion_frechet, &self.diffusion_thresholds),
            ("baseline", &self.baseline, self.baseline_frechet, &self.baseline_thresholds),
        ] {
            let _ = writeln!(s, "{name}.mse: {}", fmt_metric(a.mse));
            let _ = writeln!(
                s,
                "{name}.psnr: {} (finite pairs: {}, perfect pairs excluded: {})",
                fmt_metric(a.psnr),
                self.pairs.len() - a.psnr_infinite,
                a.psnr_infinite
            );
            let _ = writeln!(s, "{name}.ssim: {}", fmt_metric(a.ssim));
            let _ = writeln!(s, "{name}.hit_rate: {} (pairs: {})", fmt_opt(a.hit_rate), a.hit_rate_pairs);
            let _ = writeln!(s, "{name}.kl: {}", fmt_opt(a.kl));
            let _ = writeln!(s, "{name}.frechet: {}", fmt_opt(fd));
            for (t, f1, mcc) in th {
                let _ = writeln!(s, "{name}.threshold.{t}: f1={} mcc={}", fmt_metric(*f1), fmt_metric(*mcc));
            }
        }
        let (w, l, p) = self.ensemble_sign_test;
        let _ = writeln!(s, "diffusion_single_member.mse: {}", fmt_metric(self.diffusion_single_mse));
        let _ = writeln!(s, "sign_test.ensemble_vs_single: wins={w} losses={l} p={p:.3e}");
        s
    }

    /// Machine-readable companion, one `metric\tmodel\tpair\tvalue` line per
    /// value; aggregates use the pair id `mean`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tmodel\tpair_id\tvalue\n");
        let mut line = |metric: &str, model: &str, pair: &str, v: Option<f64>| {
            let _ = writeln!(s, "{metric}\t{model}\t{pair}\t{}", fmt_opt(v));
        };
        for p in &self.pairs {
            let id = p.index.to_string();
            for (model, r) in [("diffusion", &p.diffusion), ("baseline", &p.baseline)] {
                line("mse", model, &id, Some(r.mse));
                line("psnr", model, &id, Some(r.psnr));
                line("ssim", model, &id, Some(r.ssim));
                line("hit_rate", model, &id, r.hit_rate);
                line("kl", model, &id, r.kl);
            }
            line("mse", "diffusion_single", &id, Some(p.diffusion_single_mse));
        }
        for (model, a, fd) in [
            ("diffusion", &self.diffusion, self.diffusion_frechet),
            ("baseline", &self.baseline, self.baseline_frechet),
        ] {
            line("mse", model, "mean", Some(a.mse));
            line("psnr", model, "mean", Some(a.psnr));
            line("ssim", model, "mean", Some(a.ssim));
            line("hit_rate", model, "mean", a.hit_rate);
            line("kl", model, "mean", a.kl);
            line("frechet", model, "mean", fd);
        }
        line("mse", "diffusion_single", "mean", Some(self.diffusion_single_mse));
        line("sign_test_p", "diffusion", "mean", Some(self.ensemble_sign_test.2));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, v: &[f32]) -> FireFrame {
        FireFrame::new(w, h, v.to_vec()).unwrap()
    }

    fn checker(n: usize) -> FireFrame {
        let v: Vec<f32> = (0..n * n).map(|i| ((i / n + i % n) % 2) as f32).collect();
        frame(n, n, &v)
    }

    #[test]
    fn psnr_examples() {
        let a = FireFrame::zeros(4, 4);
        let b = FireFrame::filled(4, 4, 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let c = checker(16);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let inv = frame(16, 16, &c.values.iter().map(|v| 1.0 - v).collect::<Vec<_>>());
        assert!(ssim(&inv, &c).unwrap() < 0.0);
        let z = FireFrame::zeros(11, 11);
        assert!((ssim(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&FireFrame::zeros(10, 12), &FireFrame::zeros(10, 12)), Err(Error::FrameTooSmall { .. })));
    }

    #[test]
    fn hit_rate_is_strict() {
        let t = frame(2, 1, &[0.5, 0.0]);
        assert_eq!(hit_rate(&t, &t, 0.2).unwrap(), 1.0);
        assert_eq!(hit_rate(&frame(2, 1, &[0.69, 0.19]), &t, 0.2).unwrap(), 1.0);
        assert_eq!(hit_rate(&frame(2, 1, &[0.75, 0.0]), &t, 0.25).unwrap(), 0.0);
        assert!(matches!(hit_rate(&t, &FireFrame::zeros(2, 1), 0.2), Err(Error::NoValidPixels)));
    }

    #[test]
    fn kl_examples() {
        let q = frame(1, 1, &[1.0]);
        let p = frame(1, 1, &[0.0]);
        assert!((kl_divergence(&p, &q).unwrap() - 13.8155).abs() < 1e-4);
        assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
        let a = frame(2, 1, &[0.2, 0.7]);
        let b = frame(2, 1, &[0.5, 0.9]);
        let ab = kl_divergence(&a, &b).unwrap();
        let ba = kl_divergence(&b, &a).unwrap();
        // direct evaluation of both directions
        let kl = |q: f64, p: f64| q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
        assert!((ab - (kl(0.5, 0.2f32 as f64) + kl(0.9f32 as f64, 0.7f32 as f64))).abs() < 1e-9);
        assert!((ba - (kl(0.2f32 as f64, 0.5) + kl(0.7f32 as f64, 0.9f32 as f64))).abs() < 1e-9);
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn two_by_two_threshold_fixture() {
        let p = frame(2, 2, &[0.9, 0.1, 0.6, 0.4]);
        let t = frame(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let r = &threshold_sweep(&p, &t, &[0.5]).unwrap().results[0];
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 1, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1, r.mcc), (0.5, 0.5, 0.5, 0.0));
        let zero = threshold_sweep(&FireFrame::zeros(2, 2), &t, &[0.5]).unwrap();
        let z = &zero.results[0];
        assert_eq!((z.precision, z.recall, z.mcc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn identical_fractional_frames_score_one() {
        let f = frame(3, 2, &[0.1, 0.3, 0.45, 0.6, 0.7, 0.95]);
        for r in threshold_sweep(&f, &f, &DEFAULT_THRESHOLDS).unwrap().results {
            assert_eq!((r.precision, r.recall, r.f1, r.f2, r.mcc), (1.0, 1.0, 1.0, 1.0, 1.0), "{}", r.threshold);
        }
    }

    #[test]
    fn sign_test_values() {
        // 10 wins of 10: p = 2^-10
        let a = vec![0.0; 10];
        let b = vec![1.0; 10];
        let (w, l, p) = sign_test(&a, &b);
        assert_eq!((w, l), (10, 0));
        assert!((p - 1.0 / 1024.0).abs() < 1e-15);
        // 8 of 10: (45 + 10 + 1) / 1024
        let mut a2 = vec![0.0; 10];
        a2[0] = 2.0;
        a2[1] = 2.0;
        assert!((sign_test(&a2, &b).2 - 56.0 / 1024.0).abs() < 1e-14);
        assert_eq!(sign_test(&b, &b), (0, 0, 1.0));
    }

    /// Straight-line Fréchet distance over plain arrays, with a cyclic
    /// Jacobi eigensolver for the matrix square roots.
    fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let d = a[0].len();
        let stats = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let mut mu = vec![0.0; d];
            for v in s {
                for k in 0..d {
                    mu[k] += v[k] / n;
                }
            }
            let mut c = vec![vec![0.0; d]; d];
            for v in s {
                for i in 0..d {
                    for j in 0..d {
                        c[i][j] += (v[i] - mu[i]) * (v[j] - mu[j]) / (n - 1.0);
                    }
                }
            }
            (mu, c)
        };
        let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            let mut z = vec![vec![0.0; d]; d];
            for i in 0..d {
                for k in 0..d {
                    for j in 0..d {
                        z[i][j] += x[i][k] * y[k][j];
                    }
                }
            }
            z
        };
        // returns (eigenvalues, eigenvectors as columns)
        let jacobi = |m: &Vec<Vec<f64>>| {
            let mut a = m.clone();
            let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
            for _ in 0..100 {
                let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
                if off < 1e-30 {
                    break;
                }
                for p in 0..d {
                    for q in p + 1..d {
                        if a[p][q].abs() < 1e-300 {
                            continue;
                        }
                        let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let t = if theta == 0.0 { 1.0 } else { t };
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        for k in 0..d {
                            let (akp, akq) = (a[k][p], a[k][q]);
                            a[k][p] = c * akp - s * akq;
                            a[k][q] = s * akp + c * akq;
                        }
                        for k in 0..d {
                            let (apk, aqk) = (a[p][k], a[q][k]);
                            a[p][k] = c * apk - s * aqk;
                            a[q][k] = s * apk + c * aqk;
                        }
                        for k in 0..d {
                            let (vkp, vkq) = (v[k][p], v[k][q]);
                            v[k][p] = c * vkp - s * vkq;
                            v[k][q] = s * vkp + c * vkq;
                        }
                    }
                }
            }
            ((0..d).map(|i| a[i][i]).collect::<Vec<f64>>(), v)
        };
        let (ma, ca) = stats(a);
        let (mb, cb) = stats(b);
        let (la, va) = jacobi(&ca);
        let mut ra = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    ra[i][j] += va[i][k] * la[k].max(0.0).sqrt() * va[j][k];
                }
            }
        }
        let inner = mul(&mul(&ra, &cb), &ra);
        let (li, _) = jacobi(&inner);
        let mut out = 0.0;
        for k in 0..d {
            out += (ma[k] - mb[k]).powi(2) + ca[k][k] + cb[k][k] - 2.0 * li[k].max(0.0).sqrt();
        }
        out
    }

    /// Embedding onto a few well-conditioned coordinates, so the oracle's
    /// matrix inverses stay stable.
    struct Small;
    impl Embedding for Small {
        fn dim(&self) -> usize {
            3
        }
        fn embed(&self, f: &FireFrame) -> Vec<f64> {
            let e = HandcraftedEmbedding.embed(f);
            vec![e[0] + e[16], e[5] - e[17], e[10] + 2.0 * e[25]]
        }
    }

    fn textured(seed: u64, n: usize) -> FireFrame {
        use rand::Rng;
        let mut r = crate::rng::stream(seed);
        frame(8, 8, &(0..64).map(|i| if i < n { r.gen::<f32>() } else { r.gen::<f32>() * 0.5 }).collect::<Vec<_>>())
    }

    #[test]
    fn frechet_matches_oracle() {
        let a: Vec<FireFrame> = (0..12).map(|i| textured(i, 40)).collect();
        let b: Vec<FireFrame> = (100..115).map(|i| textured(i, 10)).collect();
        let ours = frechet_feature_distance(&a, &b, &Small).unwrap();
        let ea: Vec<Vec<f64>> = a.iter().map(|f| Small.embed(f)).collect();
        let eb: Vec<Vec<f64>> = b.iter().map(|f| Small.embed(f)).collect();
        let oracle = frechet_oracle(&ea, &eb);
        assert!((ours - oracle).abs() < 1e-9 * oracle.max(1.0), "{ours} vs {oracle}");
        assert!(frechet_feature_distance(&a, &a, &Small).unwrap() <= 1e-8);
        assert!(frechet_feature_distance(&a[..1], &b, &Small).is_err());
    }

    #[test]
    fn frechet_mean_shift_collapses_to_squared_distance() {
        struct Shift;
        impl Embedding for Shift {
            fn dim(&self) -> usize {
                2
            }
            fn embed(&self, f: &FireFrame) -> Vec<f64> {
                vec![f.values[0] as f64, f.values[1] as f64]
            }
        }
        let a = vec![frame(2, 1, &[0.1, 0.2]), frame(2, 1, &[0.3, 0.6])];
        let b: Vec<FireFrame> = a.iter().map(|f| frame(2, 1, &[f.values[0] + 0.25, f.values[1]])).collect();
        let d = frechet_feature_distance(&a, &b, &Shift).unwrap();
        assert!((d - 0.0625).abs() < 1e-6, "{d}");
    }

    #[test]
    fn checkerboard_vs_blank_default_embedding() {
        let a: Vec<FireFrame> = (0..4)
            .map(|k| {
                let v: Vec<f32> = (0..256).map(|i| (((i / 16 + i % 16 + k) % 2) as f32) * if k < 2 { 1.0 } else { 0.5 }).collect();
                frame(16, 16, &v)
            })
            .collect();
        let b: Vec<FireFrame> = (0..4).map(|k| FireFrame::filled(16, 16, 0.1 * k as f32)).collect();
        let ours = frechet_feature_distance(&a, &b, &HandcraftedEmbedding).unwrap();
        let ea: Vec<Vec<f64>> = a.iter().map(|f| HandcraftedEmbedding.embed(f)).collect();
        let eb: Vec<Vec<f64>> = b.iter().map(|f| HandcraftedEmbedding.embed(f)).collect();
        let oracle = frechet_oracle(&ea, &eb);
        // square roots of near-zero eigenvalues limit agreement to ~1e-9
        assert!((ours - oracle).abs() < 1e-8, "{ours} vs {oracle}");
        assert!((ours - FROZEN_CHECKER_FRECHET).abs() < 1e-8, "{ours}");
    }

    const FROZEN_CHECKER_FRECHET: f64 = 4.385080167577211;
}

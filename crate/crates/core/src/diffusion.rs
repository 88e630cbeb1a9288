//! Noise schedule, forward corruption, DDPM reverse mean and the DDIM
//! ensemble sampler.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FireFrame;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};
use crate::rng;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Number of pseudo-timesteps `T`.
    pub timesteps: usize,
    /// DDIM sampling steps `S`.
    pub sampling_steps: usize,
    pub eta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 600,
            sampling_steps: 50,
            eta: 0.0,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::InvalidConfig("timesteps must be >= 1".into()));
        }
        if self.sampling_steps < 1 || self.sampling_steps > self.timesteps {
            return Err(Error::InvalidConfig(format!(
                "sampling_steps {} must lie in [1, {}]",
                self.sampling_steps, self.timesteps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Per-step noise variances and cumulative retention factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Standard deviation of the DDPM posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        (self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_linear_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(Error::InvalidScheduleBounds("T must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidScheduleBounds(format!(
            "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
        )));
    }
    let beta: Vec<f64> = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Maps `{0, 1}` data to `{-1, 1}`.
#[inline]
pub fn scale_data(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Inverse of [`scale_data`], clamped to `[0, 1]`.
#[inline]
pub fn unscale_data(x: f32) -> f32 {
    ((x + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(x0: &[f32], t: usize, schedule: &NoiseSchedule, eps: &[f32]) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Mean of the learned reverse step given the predicted noise.
pub fn ddpm_reverse_mean(x_t: &[f32], eps_pred: &[f32], t: usize, schedule: &NoiseSchedule) -> Vec<f32> {
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    x_t.iter()
        .zip(eps_pred)
        .map(|(&x, &e)| (inv * (x as f64 - coef * e as f64)) as f32)
        .collect()
}

/// Ascending timesteps `round(i T / S)` for `i = 1..=S`, deduplicated.
pub fn select_timesteps(t: usize, s: usize) -> Result<Vec<usize>> {
    if s < 1 || s > t {
        return Err(Error::InvalidConfig(format!(
            "sampling steps {s} must lie in [1, {t}]"
        )));
    }
    let mut tau: Vec<usize> = (1..=s).map(|i| (2 * i * t + s) / (2 * s)).collect();
    tau.dedup();
    Ok(tau)
}

/// DDIM noise scale between `t` and the earlier step `t_prev`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// One DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &[f32],
    eps: &[f32],
    t: usize,
    t_prev: usize,
    sigma: f64,
    noise: Option<&[f32]>,
    schedule: &NoiseSchedule,
) -> Vec<f32> {
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, s1a, sap) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
    x_t.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&x, &e))| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - s1a * e) / sa;
            let z = noise.map_or(0.0, |n| n[i] as f64);
            (sap * x0 + dir * e + sigma * z) as f32
        })
        .collect()
}

/// A conditional noise predictor over batches of single-channel frames.
pub trait EpsModel: Sync {
    /// `x_t` and `cond` hold `n` frames of `h * w` values each; `t` holds
    /// one timestep per frame.
    fn predict_eps(&self, x_t: &[f32], cond: &[f32], t: &[usize], h: usize, w: usize) -> Result<Vec<f32>>;
}

/// A trained denoiser: structure plus weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: UNet,
    pub store: ParamStore<f32>,
}

impl Denoiser {
    /// Inference forward pass on `(n, in_channels, h, w)` input.
    pub fn forward(&self, input: Vec<f32>, n: usize, h: usize, w: usize, t: &[f64]) -> Result<Vec<f32>> {
        let c = self.net.config().in_channels;
        if input.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for ({n}, {c}, {h}, {w})",
                input.len()
            )));
        }
        let mut g = Graph::new(&self.store);
        let x = g.input([n, c, h, w], input);
        let y = self.net.forward(&mut g, x, t)?;
        Ok(g.value(y).to_vec())
    }
}

/// Stacks `[a_i, b_i]` channel pairs for every frame in the batch.
pub fn interleave_channels<T: Copy>(a: &[T], b: &[T], plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.chunks(plane).zip(b.chunks(plane)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    out
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, x_t: &[f32], cond: &[f32], t: &[usize], h: usize, w: usize) -> Result<Vec<f32>> {
        if self.net.config().in_channels != 2 {
            return Err(Error::CheckpointMismatch(
                "noise prediction needs a two-channel network".into(),
            ));
        }
        let n = t.len();
        let scaled: Vec<f32> = cond.iter().map(|&v| scale_data(v)).collect();
        let input = interleave_channels(x_t, &scaled, h * w);
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        self.forward(input, n, h, w, &tf)
    }
}

/// Gaussian draws for one member: the initial latent followed by the
/// per-step noise, all from one stream.
struct MemberNoise {
    rng: rand_chacha::ChaCha8Rng,
}

impl MemberNoise {
    fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed),
        }
    }

    fn draw(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.rng.sample::<f32, _>(StandardNormal)).collect()
    }
}

/// DDIM sampling for a batch of members sharing one condition. Each member
/// `i` draws its latent and noise from `member_seeds[i]`. Returns frames in
/// data space, clamped to `[0, 1]`.
pub fn ddim_sample_batch<M: EpsModel + ?Sized>(
    model: &M,
    condition: &FireFrame,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    member_seeds: &[u64],
) -> Result<Vec<FireFrame>> {
    let latents: Vec<Vec<f32>> = member_seeds
        .iter()
        .map(|&s| MemberNoise::new(s).draw(condition.len()))
        .collect();
    ddim_from_latents(model, condition, cfg, schedule, latents, member_seeds)
}

/// DDIM sampling from caller-supplied initial latents `x^T`.
pub fn ddim_from_latents<M: EpsModel + ?Sized>(
    model: &M,
    condition: &FireFrame,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    latents: Vec<Vec<f32>>,
    member_seeds: &[u64],
) -> Result<Vec<FireFrame>> {
    cfg.validate()?;
    if schedule.len() != cfg.timesteps {
        return Err(Error::InvalidConfig("schedule length differs from timesteps".into()));
    }
    let (h, w) = condition.dims();
    let plane = h * w;
    let n = latents.len();
    assert_eq!(member_seeds.len(), n);
    if latents.iter().any(|l| l.len() != plane) {
        return Err(Error::ShapeMismatch("latent size differs from condition".into()));
    }
    // the latent occupies the first draws of each stream; skip past them
    let mut noise: Vec<MemberNoise> = member_seeds
        .iter()
        .map(|&s| {
            let mut m = MemberNoise::new(s);
            m.draw(plane);
            m
        })
        .collect();
    let tau = select_timesteps(cfg.timesteps, cfg.sampling_steps)?;
    let cond: Vec<f32> = (0..n).flat_map(|_| condition.values.iter().copied()).collect();
    let mut x: Vec<f32> = latents.into_iter().flatten().collect();
    for i in (0..tau.len()).rev() {
        let t = tau[i];
        let t_prev = if i == 0 { 0 } else { tau[i - 1] };
        let eps = model.predict_eps(&x, &cond, &vec![t; n], h, w)?;
        let sigma = if i == 0 { 0.0 } else { ddim_sigma(schedule, t, t_prev, cfg.eta) };
        let mut next = Vec::with_capacity(x.len());
        for (j, nz) in noise.iter_mut().enumerate() {
            let xs = &x[j * plane..(j + 1) * plane];
            let es = &eps[j * plane..(j + 1) * plane];
            let z = (sigma > 0.0).then(|| nz.draw(plane));
            next.extend(ddim_step(xs, es, t, t_prev, sigma, z.as_deref(), schedule));
        }
        x = next;
    }
    Ok(x.chunks(plane)
        .map(|c| FireFrame {
            width: w,
            height: h,
            values: c.iter().map(|&v| unscale_data(v)).collect(),
        })
        .collect())
}

/// Single-member DDIM sample.
pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    condition: &FireFrame,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<FireFrame> {
    Ok(ddim_sample_batch(model, condition, cfg, schedule, &[seed])?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: FireFrame,
    pub members: Vec<FireFrame>,
}

/// Seed of ensemble member `m`.
pub fn member_seed(seed: u64, m: usize) -> u64 {
    rng::derive_seed(seed, m as u64)
}

/// Pixelwise mean of `members`, accumulated in `f64`.
pub fn mean_frame(members: &[FireFrame]) -> FireFrame {
    let first = &members[0];
    let mut acc = vec![0.0f64; first.len()];
    for m in members {
        acc.iter_mut().zip(&m.values).for_each(|(a, &v)| *a += v as f64);
    }
    let inv = 1.0 / members.len() as f64;
    FireFrame {
        width: first.width,
        height: first.height,
        values: acc.into_iter().map(|v| ((v * inv) as f32).clamp(0.0, 1.0)).collect(),
    }
}

/// Runs `m` DDIM members with independent seeds and averages them. Members
/// are evaluated `batch` at a time; chunks run in parallel.
pub fn ensemble_predict<M: EpsModel + ?Sized>(
    model: &M,
    condition: &FireFrame,
    m: usize,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    batch: usize,
) -> Result<EnsemblePrediction> {
    if m < 1 {
        return Err(Error::InvalidEnsembleSize(m));
    }
    let seeds: Vec<u64> = (0..m).map(|i| member_seed(seed, i)).collect();
    let chunks = seeds
        .par_chunks(batch.max(1))
        .map(|s| ddim_sample_batch(model, condition, cfg, schedule, s))
        .collect::<Result<Vec<_>>>()?;
    let members: Vec<FireFrame> = chunks.into_iter().flatten().collect();
    Ok(EnsemblePrediction {
        mean: mean_frame(&members),
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl EpsModel for Zero {
        fn predict_eps(&self, x: &[f32], _: &[f32], _: &[usize], _: usize, _: usize) -> Result<Vec<f32>> {
            Ok(vec![0.0; x.len()])
        }
    }

    #[test]
    fn two_step_schedule() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
        let one = make_linear_schedule(1, 0.1, 0.2).unwrap();
        assert_eq!(one.beta, vec![0.1]);
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
    }

    #[test]
    fn timestep_selection() {
        let tau = select_timesteps(600, 50).unwrap();
        assert_eq!(tau.len(), 50);
        assert!(tau.windows(2).all(|w| w[1] - w[0] == 12));
        assert_eq!(*tau.last().unwrap(), 600);
        assert_eq!(select_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(select_timesteps(7, 1).unwrap(), vec![7]);
        assert!(select_timesteps(5, 6).is_err());
        assert!(select_timesteps(5, 0).is_err());
        // 10 / 4 = 2.5 rounds half up to 3
        assert_eq!(select_timesteps(10, 4).unwrap(), vec![3, 5, 8, 10]);
    }

    #[test]
    fn forward_and_reverse_scalars() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        let x = forward_sample(&[1.0], 2, &s, &[1.0]);
        // sqrt(0.72) + sqrt(0.28)
        assert!((x[0] as f64 - 1.377_678_4).abs() < 1e-6);
        assert_eq!(forward_sample(&[1.0], 2, &s, &[0.0])[0], 0.72f64.sqrt() as f32);
        let scalar = NoiseSchedule {
            beta: vec![0.1],
            alpha: vec![0.9],
            alpha_bar: vec![0.72],
        };
        let mu = ddpm_reverse_mean(&[1.0], &[1.0], 1, &scalar);
        assert!((mu[0] as f64 - 0.854_887_8).abs() < 1e-6);
        let mu0 = ddpm_reverse_mean(&[1.0], &[0.0], 1, &scalar);
        assert!((mu0[0] as f64 - 1.0 / 0.9f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn zero_model_single_step_is_scaled_latent() {
        let cfg = DiffusionConfig {
            timesteps: 1,
            sampling_steps: 1,
            eta: 0.0,
            beta_start: 0.1,
            beta_end: 0.2,
        };
        let s = cfg.schedule().unwrap();
        let cond = FireFrame::zeros(2, 1);
        let out = ddim_from_latents(&Zero, &cond, &cfg, &s, vec![vec![0.3, -0.9]], &[0]).unwrap();
        // x0 = x_T / sqrt(alpha_bar_1), then unscaled
        let x0 = |v: f64| ((v / 0.9f64.sqrt() + 1.0) / 2.0).clamp(0.0, 1.0);
        assert!((out[0].values[0] as f64 - x0(0.3)).abs() < 1e-6);
        assert!((out[0].values[1] as f64 - x0(-0.9)).abs() < 1e-6);
    }

    #[test]
    fn ensemble_mean_and_sizes() {
        let cfg = DiffusionConfig {
            timesteps: 20,
            sampling_steps: 5,
            ..Default::default()
        };
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let cond = FireFrame::zeros(3, 3);
        let one = ensemble_predict(&Zero, &cond, 1, &cfg, &s, 4, 2).unwrap();
        assert_eq!(one.mean, one.members[0]);
        let many = ensemble_predict(&Zero, &cond, 5, &cfg, &s, 4, 2).unwrap();
        assert_eq!(many.members.len(), 5);
        for i in 0..9 {
            let avg = many.members.iter().map(|m| m.values[i] as f64).sum::<f64>() / 5.0;
            assert!((many.mean.values[i] as f64 - avg).abs() < 1e-6);
        }
        assert!(matches!(
            ensemble_predict(&Zero, &cond, 0, &cfg, &s, 4, 2),
            Err(Error::InvalidEnsembleSize(0))
        ));
        // batching does not change members
        let b1 = ensemble_predict(&Zero, &cond, 5, &cfg, &s, 4, 1).unwrap();
        assert_eq!(b1.members, many.members);
    }
}

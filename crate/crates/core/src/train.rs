//! Training objectives and the resumable training loop for both the
//! diffusion denoiser and the deterministic baseline.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Pair};
use crate::diffusion::{interleave_channels, scale_data, Denoiser, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{mse_loss, Adam, AdamConfig, Float, Graph, Grads, ParamStore};
use crate::rng;
use crate::unet::{ModelKind, NetConfig, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 2,
            optimizer: AdamConfig::default(),
            log_every: 100,
            checkpoint_every: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One noise-prediction minibatch: scaled targets, scaled conditions,
/// timesteps and the noise to recover.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

impl DiffusionBatch {
    /// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` for each pair.
    pub fn draw(pairs: &[&Pair], timesteps: usize, rng: &mut impl Rng) -> Self {
        let (h, w) = pairs[0].target.dims();
        let mut b = DiffusionBatch {
            n: pairs.len(),
            h,
            w,
            x0: Vec::with_capacity(pairs.len() * h * w),
            cond: Vec::with_capacity(pairs.len() * h * w),
            t: Vec::with_capacity(pairs.len()),
            eps: Vec::with_capacity(pairs.len() * h * w),
        };
        for p in pairs {
            b.x0.extend(p.target.values.iter().map(|&v| scale_data(v) as f64));
            b.cond.extend(p.input.values.iter().map(|&v| scale_data(v) as f64));
            b.t.push(rng.gen_range(1..=timesteps));
            b.eps
                .extend((0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal) as f64));
        }
        b
    }
}

/// Noise-prediction loss (mean squared error over all pixels) and its
/// parameter gradients. Passing a dropout stream enables training mode.
pub fn diffusion_loss<T: Float>(
    net: &UNet,
    store: &ParamStore<T>,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
    dropout: Option<rand_chacha::ChaCha8Rng>,
) -> Result<(f64, Grads<T>)> {
    let plane = batch.h * batch.w;
    let mut x_t = Vec::with_capacity(batch.x0.len());
    for (i, &t) in batch.t.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * plane..(i + 1) * plane {
            x_t.push(T::lit(a * batch.x0[j] + b * batch.eps[j]));
        }
    }
    let cond: Vec<T> = batch.cond.iter().map(|&v| T::lit(v)).collect();
    let input = interleave_channels(&x_t, &cond, plane);
    let tf: Vec<f64> = batch.t.iter().map(|&t| t as f64).collect();
    let target: Vec<T> = batch.eps.iter().map(|&v| T::lit(v)).collect();
    loss_and_grads(net, store, input, [batch.n, 2, batch.h, batch.w], &tf, &target, dropout)
}

/// Direct-regression loss of the baseline: input `x_n`, timestep 0, target
/// `x_{n+1}`.
pub fn baseline_loss<T: Float>(
    net: &UNet,
    store: &ParamStore<T>,
    pairs: &[&Pair],
    dropout: Option<rand_chacha::ChaCha8Rng>,
) -> Result<(f64, Grads<T>)> {
    let (h, w) = pairs[0].input.dims();
    let input: Vec<T> = pairs
        .iter()
        .flat_map(|p| p.input.values.iter().map(|&v| T::lit(v as f64)))
        .collect();
    let target: Vec<T> = pairs
        .iter()
        .flat_map(|p| p.target.values.iter().map(|&v| T::lit(v as f64)))
        .collect();
    let t = vec![0.0; pairs.len()];
    loss_and_grads(net, store, input, [pairs.len(), 1, h, w], &t, &target, dropout)
}

fn loss_and_grads<T: Float>(
    net: &UNet,
    store: &ParamStore<T>,
    input: Vec<T>,
    shape: [usize; 4],
    t: &[f64],
    target: &[T],
    dropout: Option<rand_chacha::ChaCha8Rng>,
) -> Result<(f64, Grads<T>)> {
    let mut g = match dropout {
        Some(r) => Graph::training(store, r),
        None => Graph::new(store),
    };
    let x = g.input(shape, input);
    let y = net.forward(&mut g, x, t)?;
    let (loss, dy) = mse_loss(g.value(y), target);
    let mut grads = Grads::zeros_like(store);
    g.backward(y, &dy, &mut grads);
    Ok((loss.to_f64().unwrap(), grads))
}

/// Owns a model, its optimizer state and the step counter.
pub struct Trainer {
    pub kind: ModelKind,
    pub model: Denoiser,
    pub optimizer: Adam<f32>,
    pub step: u64,
    pub diffusion: DiffusionConfig,
    pub seed: u64,
    schedule: NoiseSchedule,
    batch_size: usize,
}

impl Trainer {
    pub fn new(
        kind: ModelKind,
        net: &NetConfig,
        diffusion: DiffusionConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let expected = match kind {
            ModelKind::Diffusion => 2,
            ModelKind::Deterministic => 1,
        };
        if net.in_channels != expected {
            return Err(Error::InvalidConfig(format!(
                "{} model needs in_channels = {expected}",
                kind.as_str()
            )));
        }
        let (unet, store) = UNet::build::<f32>(net, rng::derive_seed(seed, 0xC0DE))?;
        let optimizer = Adam::new(train.optimizer, &store);
        Self::from_parts(kind, Denoiser { net: unet, store }, optimizer, 0, diffusion, train, seed)
    }

    pub fn from_parts(
        kind: ModelKind,
        model: Denoiser,
        optimizer: Adam<f32>,
        step: u64,
        diffusion: DiffusionConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        diffusion.validate()?;
        Ok(Self {
            kind,
            schedule: diffusion.schedule()?,
            model,
            optimizer,
            step,
            diffusion,
            seed,
            batch_size: train.batch_size,
        })
    }

    pub fn set_batch_size(&mut self, b: usize) {
        self.batch_size = b.max(1);
    }

    /// One optimizer step on a uniformly drawn minibatch. Randomness is
    /// derived from `(seed, step)`, so resumed runs continue the same
    /// sequence.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientSamples("training dataset is empty".into()));
        }
        let size = self.model.net.config().image_size;
        if data.width != size || data.height != size {
            return Err(Error::ShapeMismatch(format!(
                "dataset is {}x{}, network expects {size}x{size}",
                data.height, data.width
            )));
        }
        let mut r = rng::stream(rng::derive_path(self.seed, &[1, self.step]));
        let pairs: Vec<&Pair> = (0..self.batch_size)
            .map(|_| &data.pairs[r.gen_range(0..data.len())])
            .collect();
        let dropout = rng::stream(r.gen());
        let (loss, grads) = match self.kind {
            ModelKind::Diffusion => {
                let batch = DiffusionBatch::draw(&pairs, self.diffusion.timesteps, &mut r);
                diffusion_loss(&self.model.net, &self.model.store, &batch, &self.schedule, Some(dropout))?
            }
            ModelKind::Deterministic => baseline_loss(&self.model.net, &self.model.store, &pairs, Some(dropout))?,
        };
        if !loss.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss became non-finite at step {}",
                self.step
            )));
        }
        self.optimizer.update(&mut self.model.store, &grads);
        self.step += 1;
        Ok(loss)
    }

    /// Trains until the mean loss over a window of `plateau.window` steps
    /// improves on the previous window's mean by less than
    /// `plateau.rel_tol`, or until `plateau.max_steps` total steps.
    /// `on_step` runs after every step.
    pub fn train_until_plateau(
        &mut self,
        data: &Dataset,
        plateau: &Plateau,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<PlateauOutcome> {
        let window = plateau.window.max(1);
        let mut previous: Option<f64> = None;
        let mut sum = 0.0;
        let mut count = 0u64;
        while self.step < plateau.max_steps {
            let loss = self.train_step(data)?;
            on_step(self, loss)?;
            sum += loss;
            count += 1;
            if count == window {
                let mean = sum / window as f64;
                (sum, count) = (0.0, 0);
                if let Some(prev) = previous {
                    if self.step >= plateau.min_steps && mean > prev * (1.0 - plateau.rel_tol) {
                        return Ok(PlateauOutcome {
                            steps: self.step,
                            window_mean: mean,
                            plateaued: true,
                        });
                    }
                }
                previous = Some(mean);
            }
        }
        Ok(PlateauOutcome {
            steps: self.step,
            window_mean: previous.unwrap_or(f64::NAN),
            plateaued: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Plateau {
    pub window: u64,
    pub rel_tol: f64,
    pub min_steps: u64,
    pub max_steps: u64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            window: 500,
            rel_tol: 0.02,
            min_steps: 2_000,
            max_steps: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauOutcome {
    pub steps: u64,
    pub window_mean: f64,
    pub plateaued: bool,
}

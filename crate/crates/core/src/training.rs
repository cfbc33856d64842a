//! Three-term RGBA loss, Adam, the training loop and noise augmentation.

use std::io::Write;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use z2p_tensor::{Element, ParamSet, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::RgbaImage;
use crate::network::{Settings, Z2pModel};
use crate::projection::{PointCloud, Vec3, ZBufferImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse_rgb: f64,
    pub l1_magnitude: f64,
    pub l1_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse_rgb: 1.0,
            l1_magnitude: 1.0,
            l1_alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mse_rgb, self.l1_magnitude, self.l1_alpha];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights {w:?} must be nonnegative with at least one positive"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub mse_rgb: f64,
    pub l1_magnitude: f64,
    pub l1_alpha: f64,
}

impl LossComponents {
    fn is_finite(&self) -> bool {
        [self.total, self.mse_rgb, self.l1_magnitude, self.l1_alpha]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar nodes of the loss on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse_rgb: Var,
    pub l1_magnitude: Var,
    pub l1_alpha: Var,
}

impl LossVars {
    pub fn components<T: Element>(&self, tape: &Tape<T>) -> LossComponents {
        let get = |v: Var| tape.value(v).data()[0].to_f64();
        LossComponents {
            total: get(self.total),
            mse_rgb: get(self.mse_rgb),
            l1_magnitude: get(self.l1_magnitude),
            l1_alpha: get(self.l1_alpha),
        }
    }
}

/// Records the loss between `[N, 4, H, W]` prediction and target.
pub fn loss_tape<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    let (ps, ts) = (tape.value(pred).shape(), tape.value(target).shape());
    if ps != ts || ps.len() != 4 || ps[1] != 4 {
        return Err(Error::InvalidConfig(format!(
            "loss expects matching [N, 4, H, W] tensors, got {ps:?} and {ts:?}"
        )));
    }
    let rgb_p = tape.slice_channels(pred, 0, 3)?;
    let rgb_t = tape.slice_channels(target, 0, 3)?;
    let diff = tape.sub(rgb_p, rgb_t)?;
    let sq = tape.square(diff);
    let mse_rgb = tape.mean(sq);

    let mag_p = tape.pixel_norm(rgb_p)?;
    let mag_t = tape.pixel_norm(rgb_t)?;
    let mag_diff = tape.sub(mag_p, mag_t)?;
    let mag_abs = tape.abs(mag_diff);
    let l1_magnitude = tape.mean(mag_abs);

    let a_p = tape.slice_channels(pred, 3, 1)?;
    let a_t = tape.slice_channels(target, 3, 1)?;
    let a_diff = tape.sub(a_p, a_t)?;
    let a_abs = tape.abs(a_diff);
    let l1_alpha = tape.mean(a_abs);

    let t1 = tape.scale(mse_rgb, weights.mse_rgb);
    let t2 = tape.scale(l1_magnitude, weights.l1_magnitude);
    let t3 = tape.scale(l1_alpha, weights.l1_alpha);
    let partial = tape.add(t1, t2)?;
    let total = tape.add(partial, t3)?;
    Ok(LossVars {
        total,
        mse_rgb,
        l1_magnitude,
        l1_alpha,
    })
}

/// Loss between two images given as `[4, H, W]` or `[N, 4, H, W]`.
pub fn loss(pred: &Tensor<f32>, target: &Tensor<f32>, weights: &LossWeights) -> Result<LossComponents> {
    let batched = |t: &Tensor<f32>| match t.ndim() {
        3 => t.clone().reshape([1, t.shape()[0], t.shape()[1], t.shape()[2]]),
        _ => Ok(t.clone()),
    };
    let mut tape = Tape::new();
    let p = tape.constant(batched(pred)?);
    let t = tape.constant(batched(target)?);
    Ok(loss_tape(&mut tape, p, t, weights)?.components(&tape))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet<f32>) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (i, value) in p.value.data_mut().iter_mut().enumerate() {
                let g = f64::from(grad[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
                *value -= update as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.learning_rate >= 0.0) || !a.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {}", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adam betas ({}, {}) epsilon {}",
                a.beta1, a.beta2, a.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        self.weights.validate()
    }
}

/// One `(z, s, r)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub zbuffer: ZBufferImage,
    pub settings: Settings,
    pub target: RgbaImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossComponents,
}

/// Samples stacked into batch-ready tensors.
pub struct PackedDataset {
    len: usize,
    width: usize,
    height: usize,
    settings_len: usize,
    zbuffers: Vec<f32>,
    settings: Vec<f32>,
    targets: Vec<f32>,
}

impl PackedDataset {
    pub fn new(samples: &[TrainingSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dataset("training set is empty".into()))?;
        let (width, height) = (first.zbuffer.width, first.zbuffer.height);
        let settings_len = first.settings.len();
        let mut packed = Self {
            len: samples.len(),
            width,
            height,
            settings_len,
            zbuffers: Vec::with_capacity(samples.len() * width * height),
            settings: Vec::with_capacity(samples.len() * settings_len),
            targets: Vec::with_capacity(samples.len() * 4 * width * height),
        };
        for (i, s) in samples.iter().enumerate() {
            if (s.zbuffer.width, s.zbuffer.height) != (width, height)
                || (s.target.width(), s.target.height()) != (width, height)
            {
                return Err(Error::Dataset(format!(
                    "sample {i} is not {width}x{height}"
                )));
            }
            if s.settings.len() != settings_len {
                return Err(Error::Dataset(format!(
                    "sample {i} has {} settings values, expected {settings_len}",
                    s.settings.len()
                )));
            }
            packed.zbuffers.extend_from_slice(&s.zbuffer.intensities);
            packed.settings.extend(s.settings.to_vector());
            packed.targets.extend_from_slice(s.target.data());
        }
        Ok(packed)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn settings_len(&self) -> usize {
        self.settings_len
    }

    /// `(zbuffers [B,1,H,W], settings [B,S], targets [B,4,H,W])`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let plane = self.width * self.height;
        let (mut z, mut s, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            z.extend_from_slice(&self.zbuffers[i * plane..(i + 1) * plane]);
            s.extend_from_slice(&self.settings[i * self.settings_len..(i + 1) * self.settings_len]);
            t.extend_from_slice(&self.targets[i * 4 * plane..(i + 1) * 4 * plane]);
        }
        let b = indices.len();
        Ok((
            Tensor::new([b, 1, self.height, self.width], z)?,
            Tensor::new([b, self.settings_len], s)?,
            Tensor::new([b, 4, self.height, self.width], t)?,
        ))
    }
}

/// One forward/backward pass; gradients are accumulated into the model.
pub fn accumulate_gradients(
    model: &mut Z2pModel,
    zbuffers: &Tensor<f32>,
    settings: &Tensor<f32>,
    targets: &Tensor<f32>,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let pass = model.forward_tape(&mut tape, zbuffers, settings)?;
    let target = tape.constant(targets.clone());
    let vars = loss_tape(&mut tape, pass.output, target, weights)?;
    let components = vars.components(&tape);
    if components.is_finite() {
        tape.backward(vars.total)?.accumulate_into(model.params_mut())?;
    }
    Ok(components)
}

/// Mean loss over the whole dataset, in chunks of `batch_size`.
pub fn evaluate(
    model: &Z2pModel,
    data: &PackedDataset,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossComponents> {
    let mut sum = LossComponents::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (z, s, t) = data.batch(chunk)?;
        let pred = model.forward_batch(&z, &s)?;
        let c = loss(&pred, &t, weights)?;
        let k = chunk.len() as f64;
        sum.total += c.total * k;
        sum.mse_rgb += c.mse_rgb * k;
        sum.l1_magnitude += c.l1_magnitude * k;
        sum.l1_alpha += c.l1_alpha * k;
    }
    let n = data.len() as f64;
    Ok(LossComponents {
        total: sum.total / n,
        mse_rgb: sum.mse_rgb / n,
        l1_magnitude: sum.l1_magnitude / n,
        l1_alpha: sum.l1_alpha / n,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss.total)
    }
}

/// Runs `config.steps` Adam updates on minibatches drawn with replacement.
///
/// `on_step` sees each record after its update and may write checkpoints.
/// Returns an error at the first non-finite loss, before any update from it.
pub fn train<F>(
    model: &mut Z2pModel,
    data: &PackedDataset,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<TrainReport>
where
    F: FnMut(&StepRecord, &Z2pModel) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (w, h) = data.resolution();
    model.config().check_resolution(w, h)?;
    if data.settings_len() != model.config().settings_length {
        return Err(Error::Dataset(format!(
            "dataset has {} settings values, model expects {}",
            data.settings_len(),
            model.config().settings_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, model.params());
    let mut history = Vec::with_capacity(config.steps);
    let mut indices = vec![0; config.batch_size];
    for step in 0..config.steps {
        for i in indices.iter_mut() {
            *i = rng.random_range(0..data.len());
        }
        let (z, s, t) = data.batch(&indices)?;
        model.params_mut().zero_grad();
        let loss = accumulate_gradients(model, &z, &s, &t, &config.weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                total: loss.total,
                mse: loss.mse_rgb,
                magnitude: loss.l1_magnitude,
                alpha: loss.l1_alpha,
            });
        }
        adam.step(model.params_mut());
        let record = StepRecord { step, loss };
        log::debug!("step {step} loss {:.6}", loss.total);
        on_step(&record, model)?;
        history.push(record);
    }
    model.params_mut().zero_grad();
    Ok(TrainReport { history })
}

pub const LOSS_CSV_HEADER: &str = "step,total,mse_rgb,l1_mag,l1_alpha";

pub fn write_loss_csv<W: Write>(history: &[StepRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.loss.total, r.loss.mse_rgb, r.loss.l1_magnitude, r.loss.l1_alpha
        )?;
    }
    Ok(())
}

/// Number of points added for noise fraction `rho`. The small slack keeps
/// products like `0.1 * 100` from rounding up past the exact count.
pub fn noise_count(rho: f64, n: usize) -> usize {
    (rho * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Appends `ceil(rho * N)` points drawn uniformly from the bounding box.
pub fn add_uniform_noise<R: Rng + ?Sized>(cloud: &PointCloud, rho: f64, rng: &mut R) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("noise fraction {rho} outside [0, 1)")));
    }
    let (lo, hi) = cloud.bounding_box();
    let extra = noise_count(rho, cloud.len());
    let mut out = cloud.clone();
    out.extend((0..extra).map(|_| {
        Vec3::new(
            lo.x + (hi.x - lo.x) * rng.random::<f64>(),
            lo.y + (hi.y - lo.y) * rng.random::<f64>(),
            lo.z + (hi.z - lo.z) * rng.random::<f64>(),
        )
    }));
    Ok(out)
}

//! Settings-conditioned U-Net mapping a z-buffer to an RGBA image.
//!
//! The settings vector is lifted to a 512-d style vector by an MLP. Every
//! convolution is followed by AdaIN, whose per-channel scale and shift are
//! affine functions of that one shared style vector, then a leaky ReLU.
//! In the feature-append ablation the settings are instead replicated into
//! constant input planes and the AdaIN layers become plain instance norms.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use z2p_tensor::{ops, ParamId, ParamSet, Tape, Tensor, Var};

use crate::encoding::{FourierEncoding, ENCODING_CHANNELS};
use crate::error::{Error, Result};
use crate::image::RgbaImage;
use crate::projection::ZBufferImage;

pub const STYLE_DIM: usize = 512;
pub const OUTPUT_CHANNELS: usize = 4;
pub const BASE_SETTINGS_LEN: usize = 6;
pub const MATERIAL_SETTINGS_LEN: usize = 8;

/// Light position in spherical coordinates relative to the camera, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightPosition {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub metallic: f64,
    pub roughness: f64,
}

/// Visualization controls fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub color: [f64; 3],
    pub light: LightPosition,
    pub material: Option<Material>,
}

impl Settings {
    pub fn len(&self) -> usize {
        if self.material.is_some() {
            MATERIAL_SETTINGS_LEN
        } else {
            BASE_SETTINGS_LEN
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[r, g, b, azimuth, elevation, radius]` plus `[metallic, roughness]`.
    pub fn to_vector(&self) -> Vec<f32> {
        let mut v = vec![
            self.color[0],
            self.color[1],
            self.color[2],
            self.light.azimuth,
            self.light.elevation,
            self.light.radius,
        ];
        if let Some(m) = self.material {
            v.extend([m.metallic, m.roughness]);
        }
        v.into_iter().map(|x| x as f32).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidSettings(format!("{name} = {v} outside [0, 1]")))
            }
        };
        for (c, name) in self.color.iter().zip(["red", "green", "blue"]) {
            unit(name, *c)?;
        }
        let l = self.light;
        if !l.azimuth.is_finite() || !l.elevation.is_finite() {
            return Err(Error::InvalidSettings("light angles must be finite".into()));
        }
        if l.elevation.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidSettings(format!(
                "light elevation {} outside [-pi/2, pi/2]",
                l.elevation
            )));
        }
        if !(l.radius > 0.0) || !l.radius.is_finite() {
            return Err(Error::InvalidSettings(format!("light radius {}", l.radius)));
        }
        if let Some(m) = self.material {
            unit("metallic", m.metallic)?;
            unit("roughness", m.roughness)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingsMode {
    /// Settings drive per-layer AdaIN scale and shift.
    Adain,
    /// Settings are appended as constant input planes.
    FeatureAppend,
}

impl fmt::Display for SettingsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SettingsMode::Adain => "adain",
            SettingsMode::FeatureAppend => "append",
        })
    }
}

impl FromStr for SettingsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adain" => Ok(SettingsMode::Adain),
            "append" | "feature_append" => Ok(SettingsMode::FeatureAppend),
            other => Err(Error::InvalidConfig(format!(
                "settings mode {other:?}, expected adain or append"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub settings_mode: SettingsMode,
    pub encoding_enabled: bool,
    /// 6, or 8 with material controls.
    pub settings_length: usize,
    pub style_dim: usize,
    pub mapping_hidden_layers: usize,
    pub epsilon: f32,
    pub leaky_slope: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 64,
            settings_mode: SettingsMode::Adain,
            encoding_enabled: true,
            settings_length: BASE_SETTINGS_LEN,
            style_dim: STYLE_DIM,
            mapping_hidden_layers: 3,
            epsilon: 1e-5,
            leaky_slope: 0.2,
        }
    }
}

impl UNetConfig {
    /// Two levels, eight base channels: small enough to train on one core.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        let mut c = 1;
        if self.encoding_enabled {
            c += ENCODING_CHANNELS;
        }
        if self.settings_mode == SettingsMode::FeatureAppend {
            c += self.settings_length;
        }
        c
    }

    pub fn output_channels(&self) -> usize {
        OUTPUT_CHANNELS
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 || self.levels > 8 {
            return bad(format!("levels {} outside 1..=8", self.levels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.settings_length != BASE_SETTINGS_LEN && self.settings_length != MATERIAL_SETTINGS_LEN {
            return bad(format!("settings_length {} must be 6 or 8", self.settings_length));
        }
        if self.style_dim == 0 {
            return bad("style_dim must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope {}", self.leaky_slope));
        }
        Ok(())
    }

    pub fn check_resolution(&self, width: usize, height: usize) -> Result<()> {
        let d = self.divisor();
        if width == 0 || height == 0 || width % d != 0 || height % d != 0 {
            return Err(Error::Resolution {
                width,
                height,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Radius in input pixels of the convolutional receptive field of one
    /// output pixel (spatial statistics of the normalization layers aside).
    pub fn receptive_field_radius(&self) -> usize {
        let mut radius = 0;
        let mut jump = 1;
        // level 0: two 3x3 convs
        radius += 2 * jump;
        for _ in 1..=self.levels {
            radius += jump; // stride-2 conv, evaluated on the finer grid
            jump *= 2;
            radius += jump;
        }
        for _ in 0..self.levels {
            jump /= 2;
            radius += jump; // nearest upsample offset
            radius += 2 * jump;
        }
        radius
    }

    /// Number of scalar parameters in a model with this configuration.
    pub fn parameter_count(&self) -> usize {
        let adain = self.settings_mode == SettingsMode::Adain;
        let norm = |c: usize| if adain { 2 * c * (self.style_dim + 1) } else { 2 * c };
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout + norm(cout);
        let mut total = 0;
        if adain {
            total += self.settings_length * self.style_dim + self.style_dim;
            total += self.mapping_hidden_layers * (self.style_dim * self.style_dim + self.style_dim);
        }
        for level in 0..=self.levels {
            let c = self.channels(level);
            let cin = if level == 0 { self.input_channels() } else { self.channels(level - 1) };
            total += conv(cin, c) + conv(c, c);
        }
        for level in 0..self.levels {
            let c = self.channels(level);
            total += conv(self.channels(level + 1), c) + conv(2 * c, c);
        }
        total + OUTPUT_CHANNELS * self.channels(0) + OUTPUT_CHANNELS
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "levels={}\nbase_channels={}\nsettings_mode={}\nencoding_enabled={}\nsettings_length={}\nstyle_dim={}\nmapping_hidden_layers={}\nepsilon={}\nleaky_slope={}\ninput_channels={}\noutput_channels={}\n",
            self.levels,
            self.base_channels,
            self.settings_mode,
            self.encoding_enabled,
            self.settings_length,
            self.style_dim,
            self.mapping_hidden_layers,
            self.epsilon,
            self.leaky_slope,
            self.input_channels(),
            self.output_channels(),
        )
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let map = crate::io::parse_key_values(text)?;
        let get = |key: &str| {
            map.get(key)
                .ok_or_else(|| Error::ModelFormat(format!("config is missing {key}")))
        };
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::ModelFormat(format!("config {key}={v:?} is not valid")))
        }
        let config = Self {
            levels: num("levels", get("levels")?)?,
            base_channels: num("base_channels", get("base_channels")?)?,
            settings_mode: get("settings_mode")?.parse()?,
            encoding_enabled: num("encoding_enabled", get("encoding_enabled")?)?,
            settings_length: num("settings_length", get("settings_length")?)?,
            style_dim: num("style_dim", get("style_dim")?)?,
            mapping_hidden_layers: num("mapping_hidden_layers", get("mapping_hidden_layers")?)?,
            epsilon: num("epsilon", get("epsilon")?)?,
            leaky_slope: num("leaky_slope", get("leaky_slope")?)?,
        };
        config.validate()?;
        for (key, derived) in [
            ("input_channels", config.input_channels()),
            ("output_channels", config.output_channels()),
        ] {
            if let Some(v) = map.get(key) {
                if num::<usize>(key, v)? != derived {
                    return Err(Error::ModelFormat(format!(
                        "config {key}={v} disagrees with derived value {derived}"
                    )));
                }
            }
        }
        Ok(config)
    }
}

/// The 512-d vector shared by every AdaIN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f32>);

/// Two affine maps `style_dim -> channels` producing per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct AdaInLayer {
    pub channels: usize,
    pub gamma_weight: ParamId,
    pub gamma_bias: ParamId,
    pub beta_weight: ParamId,
    pub beta_bias: ParamId,
    pub epsilon: f32,
    /// Runtime multiplier on both weight matrices (equalized learning rate).
    pub weight_gain: f32,
}

/// Values recorded around one normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormTrace {
    /// Conv output entering the layer.
    pub input: Var,
    /// `(x - mean) / (std + eps)`.
    pub normalized: Var,
    /// `[N, C]` scale.
    pub gamma: Var,
    /// `[N, C]` shift.
    pub beta: Var,
    pub output: Var,
}

/// `(x - mean(x)) / (std(x) + eps)` per sample and channel.
pub fn instance_normalize(tape: &mut Tape<f32>, x: Var, epsilon: f32) -> Result<Var> {
    let mean = tape.channel_mean(x)?;
    let std = tape.channel_std(x)?;
    let centered = tape.sub_channel(x, mean)?;
    let denom = tape.add_scalar(std, f64::from(epsilon));
    Ok(tape.div_channel(centered, denom)?)
}

impl AdaInLayer {
    /// `gamma * (x - mean) / (std + eps) + beta` with `gamma, beta` affine in `style`.
    pub fn apply(&self, tape: &mut Tape<f32>, params: &ParamSet<f32>, x: Var, style: Var) -> Result<NormTrace> {
        let channels = tape.value(x).dims4("adain")?.1;
        if channels != self.channels {
            return Err(Error::InvalidConfig(format!(
                "AdaIN layer expects {} channels, got {channels}",
                self.channels
            )));
        }
        let normalized = instance_normalize(tape, x, self.epsilon)?;
        let gw = tape.param(params, self.gamma_weight);
        let gw = tape.scale(gw, f64::from(self.weight_gain));
        let gb = tape.param(params, self.gamma_bias);
        let gamma = tape.linear(style, gw, gb)?;
        let bw = tape.param(params, self.beta_weight);
        let bw = tape.scale(bw, f64::from(self.weight_gain));
        let bb = tape.param(params, self.beta_bias);
        let beta = tape.linear(style, bw, bb)?;
        let scaled = tape.mul_channel(normalized, gamma)?;
        let output = tape.add_channel(scaled, beta)?;
        Ok(NormTrace {
            input: x,
            normalized,
            gamma,
            beta,
            output,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Norm {
    AdaIn(AdaInLayer),
    /// Unconditioned instance norm with learned per-channel affine.
    Instance {
        gamma: ParamId,
        beta: ParamId,
        epsilon: f32,
    },
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    norm: Option<Norm>,
}

/// MLP lifting the settings vector to the style vector. Weights are stored
/// unit-variance and scaled by `sqrt(2 / fan_in)` in the forward pass.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    layers: Vec<(ParamId, ParamId)>,
    gains: Vec<f32>,
    slope: f32,
}

impl MappingNetwork {
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// `[N, S] -> [N, style_dim]`; leaky ReLU after every hidden layer.
    pub fn apply(&self, tape: &mut Tape<f32>, params: &ParamSet<f32>, settings: Var) -> Result<Var> {
        let mut h = settings;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(params, w);
            let w = tape.scale(w, f64::from(self.gains[i]));
            let b = tape.param(params, b);
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.leaky_relu(h, f64::from(self.slope));
            }
        }
        Ok(h)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng) as f32)
    }
}

/// Output of [`Z2pModel::forward_tape`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[N, 4, H, W]` after the sigmoid.
    pub output: Var,
    pub style: Option<Var>,
    /// One entry per normalization layer in evaluation order.
    pub norms: Vec<NormTrace>,
}

/// Network weights, architecture and positional-encoding frequencies.
#[derive(Clone, Debug)]
pub struct Z2pModel {
    config: UNetConfig,
    encoding: Option<FourierEncoding>,
    params: ParamSet<f32>,
    mapping: Option<MappingNetwork>,
    encoder: Vec<Vec<ConvBlock>>,
    decoder: Vec<Vec<ConvBlock>>,
    head: ConvBlock,
    init_seed: u64,
}

impl Z2pModel {
    /// Fresh model with fan-in scaled normal initialization. The positional
    /// frequencies are drawn from `init_seed` as well.
    pub fn new(config: UNetConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let encoding = config
            .encoding_enabled
            .then(|| FourierEncoding::sample(init_seed ^ 0x5EED_F0E1_0000_0001));
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        };
        let mut params = ParamSet::new();
        let adain = config.settings_mode == SettingsMode::Adain;

        let mapping = adain.then(|| {
            let mut layers = Vec::new();
            let mut gains = Vec::new();
            let mut fan_in = config.settings_length;
            for i in 0..=config.mapping_hidden_layers {
                let w = params.add(
                    format!("mapping.{i}.weight"),
                    init.normal(&[config.style_dim, fan_in], 1.0),
                );
                let b = params.add(format!("mapping.{i}.bias"), Tensor::zeros([config.style_dim]));
                layers.push((w, b));
                gains.push((2.0 / fan_in as f32).sqrt());
                fan_in = config.style_dim;
            }
            MappingNetwork {
                layers,
                gains,
                slope: config.leaky_slope,
            }
        });

        let block = |params: &mut ParamSet<f32>,
                         init: &mut Init,
                         name: String,
                         cin: usize,
                         cout: usize,
                         stride: usize|
         -> ConvBlock {
            let fan_in = cin * 9;
            let weight = params.add(
                format!("{name}.weight"),
                init.normal(&[cout, cin, 3, 3], (2.0 / fan_in as f64).sqrt()),
            );
            let bias = params.add(format!("{name}.bias"), Tensor::zeros([cout]));
            let norm = if adain {
                Norm::AdaIn(AdaInLayer {
                    channels: cout,
                    gamma_weight: params.add(
                        format!("{name}.adain.gamma.weight"),
                        init.normal(&[cout, config.style_dim], 1.0),
                    ),
                    gamma_bias: params.add(format!("{name}.adain.gamma.bias"), Tensor::ones([cout])),
                    beta_weight: params.add(
                        format!("{name}.adain.beta.weight"),
                        init.normal(&[cout, config.style_dim], 1.0),
                    ),
                    beta_bias: params.add(format!("{name}.adain.beta.bias"), Tensor::zeros([cout])),
                    epsilon: config.epsilon,
                    weight_gain: (1.0 / config.style_dim as f32).sqrt(),
                })
            } else {
                Norm::Instance {
                    gamma: params.add(format!("{name}.norm.gamma"), Tensor::ones([cout])),
                    beta: params.add(format!("{name}.norm.beta"), Tensor::zeros([cout])),
                    epsilon: config.epsilon,
                }
            };
            ConvBlock {
                weight,
                bias,
                stride,
                padding: 1,
                norm: Some(norm),
            }
        };

        let mut encoder = Vec::new();
        for level in 0..=config.levels {
            let cout = config.channels(level);
            let (cin, stride) = if level == 0 {
                (config.input_channels(), 1)
            } else {
                (config.channels(level - 1), 2)
            };
            encoder.push(vec![
                block(&mut params, &mut init, format!("enc{level}.conv0"), cin, cout, stride),
                block(&mut params, &mut init, format!("enc{level}.conv1"), cout, cout, 1),
            ]);
        }
        let mut decoder = Vec::new();
        for level in (0..config.levels).rev() {
            let c = config.channels(level);
            decoder.push(vec![
                block(&mut params, &mut init, format!("dec{level}.conv0"), config.channels(level + 1), c, 1),
                block(&mut params, &mut init, format!("dec{level}.conv1"), 2 * c, c, 1),
            ]);
        }
        let c0 = config.channels(0);
        let head = ConvBlock {
            weight: params.add(
                "head.weight",
                init.normal(&[OUTPUT_CHANNELS, c0, 1, 1], (1.0 / c0 as f64).sqrt()),
            ),
            bias: params.add("head.bias", Tensor::zeros([OUTPUT_CHANNELS])),
            stride: 1,
            padding: 0,
            norm: None,
        };

        Ok(Self {
            config,
            encoding,
            params,
            mapping,
            encoder,
            decoder,
            head,
            init_seed,
        })
    }

    /// Rebuilds a model from stored parts, checking every parameter against
    /// the layout implied by `config`.
    pub fn from_parts(
        config: UNetConfig,
        init_seed: u64,
        encoding: Option<FourierEncoding>,
        parameters: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        // Refuse before allocating when a damaged config implies a much
        // larger network than the stored parameters could fill.
        let stored: usize = parameters.iter().map(|(_, t)| t.numel()).sum();
        let expected = config.parameter_count();
        if expected > 2 * stored + 1024 {
            return Err(Error::ModelFormat(format!(
                "config implies {expected} parameters but only {stored} are stored"
            )));
        }
        let mut model = Self::new(config, init_seed)?;
        if encoding.is_some() != model.config.encoding_enabled {
            return Err(Error::ModelFormat(format!(
                "encoding frequencies {} but encoding_enabled = {}",
                if encoding.is_some() { "present" } else { "absent" },
                model.config.encoding_enabled
            )));
        }
        if let Some(enc) = &encoding {
            if enc.frequencies.len() != crate::encoding::FREQUENCY_COUNT {
                return Err(Error::ModelFormat(format!(
                    "{} encoding frequencies",
                    enc.frequencies.len()
                )));
            }
        }
        model.encoding = encoding;
        model.load_parameters(parameters)?;
        Ok(model)
    }

    /// Overwrites parameter values by name. Fails on the first shape
    /// mismatch, missing name or unknown name without modifying the model.
    pub fn load_parameters(&mut self, parameters: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut assignments = Vec::with_capacity(parameters.len());
        for (name, value) in parameters {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::UnexpectedParameter(name.clone()))?;
            let expected = self.params.get(id).value.shape();
            if expected != value.shape() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: value.shape().to_vec(),
                });
            }
            assignments.push((id, value));
        }
        if let Some(missing) = self
            .params
            .iter()
            .find(|p| !parameters.iter().any(|(n, _)| n == &p.name))
        {
            return Err(Error::MissingParameter(missing.name.clone()));
        }
        for (id, value) in assignments {
            self.params.get_mut(id).value = value.clone();
        }
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn encoding(&self) -> Option<&FourierEncoding> {
        self.encoding.as_ref()
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn mapping(&self) -> Option<&MappingNetwork> {
        self.mapping.as_ref()
    }

    /// AdaIN layers in evaluation order; empty in feature-append mode.
    pub fn adain_layers(&self) -> Vec<AdaInLayer> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .filter_map(|b| match b.norm {
                Some(Norm::AdaIn(layer)) => Some(layer),
                _ => None,
            })
            .collect()
    }

    fn check_settings_len(&self, len: usize) -> Result<()> {
        if len != self.config.settings_length {
            return Err(Error::InvalidSettings(format!(
                "model expects {} settings values, got {len}",
                self.config.settings_length
            )));
        }
        Ok(())
    }

    /// Style vector for one settings vector; `None` in feature-append mode.
    pub fn map_settings(&self, settings: &Settings) -> Result<Option<StyleVector>> {
        let values = settings.to_vector();
        self.check_settings_len(values.len())?;
        let Some(mapping) = &self.mapping else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([1, values.len()], values)?);
        let w = mapping.apply(&mut tape, &self.params, s)?;
        Ok(Some(StyleVector(tape.value(w).data().to_vec())))
    }

    /// Assembles the constant `[N, C_in, H, W]` network input.
    pub fn build_input(&self, zbuffers: &Tensor<f32>, settings: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, c, h, w) = zbuffers.dims4("forward")?;
        if c != 1 {
            return Err(Error::InvalidConfig(format!("z-buffer batch has {c} channels")));
        }
        self.config.check_resolution(w, h)?;
        let (sn, slen) = settings.dims2("forward")?;
        if sn != n {
            return Err(Error::InvalidSettings(format!(
                "{sn} settings rows for {n} z-buffers"
            )));
        }
        self.check_settings_len(slen)?;
        let mut input = zbuffers.clone();
        if let Some(enc) = &self.encoding {
            let planes = enc.encode(w, h);
            let mut tiled = Vec::with_capacity(n * planes.numel());
            for _ in 0..n {
                tiled.extend_from_slice(planes.data());
            }
            let tiled = Tensor::new([n, ENCODING_CHANNELS, h, w], tiled)?;
            input = ops::concat_channels(&input, &tiled)?;
        }
        if self.config.settings_mode == SettingsMode::FeatureAppend {
            input = ops::concat_channels(&input, &ops::expand_planes(settings, h, w)?)?;
        }
        Ok(input)
    }

    fn apply_block(
        &self,
        tape: &mut Tape<f32>,
        block: &ConvBlock,
        x: Var,
        style: Option<Var>,
        norms: &mut Vec<NormTrace>,
    ) -> Result<Var> {
        let w = tape.param(&self.params, block.weight);
        let b = tape.param(&self.params, block.bias);
        let y = tape.conv2d(x, w, b, block.stride, block.padding)?;
        let normed = match block.norm {
            None => return Ok(y),
            Some(Norm::AdaIn(layer)) => {
                let style = style.expect("AdaIN block requires a style vector");
                let trace = layer.apply(tape, &self.params, y, style)?;
                norms.push(trace);
                trace.output
            }
            Some(Norm::Instance {
                gamma,
                beta,
                epsilon,
            }) => {
                let n = tape.value(y).shape()[0];
                let normalized = instance_normalize(tape, y, epsilon)?;
                let g = tape.param(&self.params, gamma);
                let g = tape.tile_rows(g, n)?;
                let bt = tape.param(&self.params, beta);
                let bt = tape.tile_rows(bt, n)?;
                let scaled = tape.mul_channel(normalized, g)?;
                let output = tape.add_channel(scaled, bt)?;
                norms.push(NormTrace {
                    input: y,
                    normalized,
                    gamma: g,
                    beta: bt,
                    output,
                });
                output
            }
        };
        Ok(tape.leaky_relu(normed, f64::from(self.config.leaky_slope)))
    }

    /// Records a forward pass for a batch: `zbuffers` is `[N, 1, H, W]`,
    /// `settings` is `[N, S]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<f32>,
        zbuffers: &Tensor<f32>,
        settings: &Tensor<f32>,
    ) -> Result<ForwardPass> {
        let input = self.build_input(zbuffers, settings)?;
        let mut x = tape.constant(input);
        let style = match &self.mapping {
            Some(mapping) => {
                let s = tape.constant(settings.clone());
                Some(mapping.apply(tape, &self.params, s)?)
            }
            None => None,
        };
        let mut norms = Vec::new();
        let mut skips = Vec::with_capacity(self.config.levels);
        for (level, blocks) in self.encoder.iter().enumerate() {
            for block in blocks {
                x = self.apply_block(tape, block, x, style, &mut norms)?;
            }
            if level < self.config.levels {
                skips.push(x);
            }
        }
        for blocks in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            x = tape.upsample2x(x)?;
            x = self.apply_block(tape, &blocks[0], x, style, &mut norms)?;
            x = tape.concat_channels(x, skip)?;
            x = self.apply_block(tape, &blocks[1], x, style, &mut norms)?;
        }
        let logits = self.apply_block(tape, &self.head, x, None, &mut norms)?;
        let output = tape.sigmoid(logits);
        Ok(ForwardPass {
            output,
            style,
            norms,
        })
    }

    /// Batched inference, `[N, 4, H, W]` in `[0, 1]`.
    pub fn forward_batch(&self, zbuffers: &Tensor<f32>, settings: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let pass = self.forward_tape(&mut tape, zbuffers, settings)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Renders one z-buffer under `settings`.
    pub fn forward(&self, zbuffer: &ZBufferImage, settings: &Settings) -> Result<RgbaImage> {
        let values = settings.to_vector();
        let s = Tensor::new([1, values.len()], values)?;
        let out = self.forward_batch(&zbuffer.to_tensor(), &s)?;
        RgbaImage::from_tensor(&out)
    }
}

/// Stacks per-sample settings into `[N, S]`.
pub fn settings_batch(settings: &[Settings]) -> Result<Tensor<f32>> {
    let len = settings.first().map_or(BASE_SETTINGS_LEN, Settings::len);
    let mut data = Vec::with_capacity(settings.len() * len);
    for s in settings {
        if s.len() != len {
            return Err(Error::InvalidSettings("mixed settings lengths in batch".into()));
        }
        data.extend(s.to_vector());
    }
    Ok(Tensor::new([settings.len(), len], data)?)
}

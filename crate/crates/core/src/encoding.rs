//! Random Fourier positional features appended to the z-buffer input.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use z2p_tensor::Tensor;

pub const FREQUENCY_COUNT: usize = 10;
pub const MAX_FREQUENCY: f32 = 10.0;
/// sin(u), sin(v), cos(u), cos(v) per frequency.
pub const ENCODING_CHANNELS: usize = 4 * FREQUENCY_COUNT;

#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoding {
    pub frequencies: Vec<f32>,
    pub seed: u64,
}

impl FourierEncoding {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..FREQUENCY_COUNT)
            .map(|_| rng.random_range(0.0..MAX_FREQUENCY))
            .collect();
        Self { frequencies, seed }
    }

    /// Per-pixel features as a `[40, height, width]` tensor, channel order
    /// `sin(w u), sin(w v), cos(w u), cos(w v)` with `u, v` in `[0, 1]`.
    pub fn encode(&self, width: usize, height: usize) -> Tensor<f32> {
        let k = self.frequencies.len();
        let plane = width * height;
        let mut data = vec![0.0f32; 4 * k * plane];
        let us: Vec<f64> = (0..width).map(|x| unit_coordinate(x, width)).collect();
        let vs: Vec<f64> = (0..height).map(|y| unit_coordinate(y, height)).collect();
        for (j, &w) in self.frequencies.iter().enumerate() {
            let w = f64::from(w);
            let (sin_u, rest) = data.split_at_mut(k * plane);
            let (sin_v, rest) = rest.split_at_mut(k * plane);
            let (cos_u, cos_v) = rest.split_at_mut(k * plane);
            for y in 0..height {
                let (sv, cv) = (w * vs[y]).sin_cos();
                for x in 0..width {
                    let (su, cu) = (w * us[x]).sin_cos();
                    let i = j * plane + y * width + x;
                    sin_u[i] = su as f32;
                    sin_v[i] = sv as f32;
                    cos_u[i] = cu as f32;
                    cos_v[i] = cv as f32;
                }
            }
        }
        Tensor::new([4 * k, height, width], data).expect("encoding layout")
    }
}

/// Pixel index mapped to `[0, 1]`; a single-pixel axis maps to 0.
pub fn unit_coordinate(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        index as f64 / (extent - 1) as f64
    }
}

use z2p_tensor::Tensor;

use crate::error::{Error, Result};

/// Planar RGBA image with values in `[0, 1]`, stored channel-major
/// (`[4, height, width]`) to match the network output layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbaImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 4 * width * height],
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 4 * width * height {
            return Err(Error::InvalidConfig(format!(
                "{} values do not form a {width}x{height} RGBA image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Accepts `[4, H, W]` or `[1, 4, H, W]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [4, h, w] | [1, 4, h, w] => (*h, *w),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "expected a [4, H, W] tensor, got {other:?}"
                )))
            }
        };
        Self::from_planar(w, h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([4, self.height, self.width], self.data.clone()).expect("planar layout")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 4] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [
            self.data[i],
            self.data[plane + i],
            self.data[2 * plane + i],
            self.data[3 * plane + i],
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgba: [f32; 4]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgba.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// Quantizes every channel to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| f32::from(to_u8(v)) / 255.0)
                .collect(),
        }
    }
}

/// `round(v * 255)` after clamping to `[0, 1]`.
#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

//! Pinhole projection of point clouds and exponential-intensity z-buffering.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use z2p_tensor::Tensor;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Points closer than this to the image plane are dropped.
pub const NEAR_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Parse {
                line: i + 1,
                message: "non-finite coordinate".into(),
            });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = Vec3>) {
        self.points.extend(more);
    }
}

/// Transform applied by [`normalize_cloud`]: `p' = (p - centroid) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub centroid: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            centroid: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.centroid)) * self.scale
    }
}

/// Centers the cloud at the origin and scales its bounding sphere to radius 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let n = cloud.len() as f64;
    let centroid = cloud.points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let radius = cloud
        .points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let norm = Normalization {
        scale: 1.0 / radius,
        centroid: centroid.into(),
    };
    let points = cloud.points.iter().map(|p| norm.apply(p)).collect();
    Ok((PointCloud { points }, norm))
}

/// Pinhole camera. Camera space has +Z along the view direction, +X to the
/// right of the image and +Y down the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    position: Vec3,
    target: Vec3,
    up: Vec3,
    pub focal_px: f64,
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
    right: Vec3,
    down: Vec3,
    forward: Vec3,
}

impl Camera {
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        focal_px: f64,
        principal_point: (f64, f64),
        (width, height): (usize, usize),
    ) -> Result<Self> {
        if !(focal_px > 0.0) || !focal_px.is_finite() {
            return Err(Error::InvalidCamera(format!("focal length {focal_px}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!("image size {width}x{height}")));
        }
        let view = target - position;
        if !(view.norm() > 0.0) {
            return Err(Error::InvalidCamera("position equals target".into()));
        }
        let forward = view.normalize();
        let side = forward.cross(&up);
        if side.norm() < 1e-9 * up.norm().max(1e-300) {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = side.normalize();
        let down = forward.cross(&right);
        Ok(Self {
            position,
            target,
            up,
            focal_px,
            principal_point,
            width,
            height,
            right,
            down,
            forward,
        })
    }

    /// Camera orbiting the origin with world +Y up. Angles in radians;
    /// `pitch > 0` looks down from above, `yaw = 0` sits on the +Z axis.
    pub fn orbit(
        yaw: f64,
        pitch: f64,
        distance: f64,
        fov_y: f64,
        (width, height): (usize, usize),
    ) -> Result<Self> {
        if !(distance > 0.0) {
            return Err(Error::InvalidCamera(format!("distance {distance}")));
        }
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidCamera(format!("field of view {fov_y}")));
        }
        let position = Vec3::new(
            distance * pitch.cos() * yaw.sin(),
            distance * pitch.sin(),
            distance * pitch.cos() * yaw.cos(),
        );
        let focal = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::look_at(
            position,
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            focal,
            centered_principal_point(width, height),
            (width, height),
        )
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn target(&self) -> Vec3 {
        self.target
    }

    pub fn up(&self) -> Vec3 {
        self.up
    }

    /// Right, down and forward unit vectors in world space.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        (self.right, self.down, self.forward)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let d = p - self.position;
        Vec3::new(d.dot(&self.right), d.dot(&self.down), d.dot(&self.forward))
    }

    /// Unit world-space direction of the ray through pixel `(x, y)`.
    pub fn ray_direction(&self, x: f64, y: f64) -> Vec3 {
        let (cx, cy) = self.principal_point;
        let local = Vec3::new((x - cx) / self.focal_px, (y - cy) / self.focal_px, 1.0);
        (self.right * local.x + self.down * local.y + self.forward * local.z).normalize()
    }
}

/// Principal point at the geometric image center, in pixel-center coordinates.
pub fn centered_principal_point(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) * 0.5, (height as f64 - 1.0) * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(cloud: &PointCloud, cam: &Camera) -> Vec<ProjectedPoint> {
    let (cx, cy) = cam.principal_point;
    cloud
        .points
        .iter()
        .filter_map(|p| {
            let c = cam.to_camera(p);
            (c.z > NEAR_EPSILON).then(|| ProjectedPoint {
                u: cx + cam.focal_px * c.x / c.z,
                v: cy + cam.focal_px * c.y / c.z,
                depth: c.z,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZBufferParams {
    /// Depth offset, world units.
    pub alpha: f64,
    /// Depth falloff scale, world units.
    pub beta: f64,
    /// Side length of the square splat, in pixels.
    pub window: usize,
}

impl Default for ZBufferParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            window: 5,
        }
    }
}

impl ZBufferParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "z-buffer alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "splat window {} must be odd",
                self.window
            )));
        }
        Ok(())
    }
}

/// `exp(-(depth - alpha) / beta)`, clamped to at most 1.
pub fn intensity(depth: f64, params: &ZBufferParams) -> f64 {
    (-(depth - params.alpha) / params.beta).exp().min(1.0)
}

/// Intensity stored for a covered pixel. Kept strictly positive so that
/// coverage stays distinguishable from the empty background after the cast.
pub(crate) fn covered_intensity(depth: f64, params: &ZBufferParams) -> f32 {
    (intensity(depth, params) as f32).max(f32::MIN_POSITIVE)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZBufferImage {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f32>,
    pub params: ZBufferParams,
}

impl ZBufferImage {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.intensities[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, 1, self.height, self.width], self.intensities.clone())
            .expect("z-buffer layout")
    }

    pub fn coverage(&self) -> usize {
        self.intensities.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Splats every point as a `window x window` block centered on its rounded
/// pixel; each pixel keeps the nearest covering point.
pub fn rasterize(
    projected: &[ProjectedPoint],
    params: &ZBufferParams,
    (width, height): (usize, usize),
) -> ZBufferImage {
    let half = (params.window / 2) as i64;
    let mut nearest = vec![f64::INFINITY; width * height];
    for p in projected {
        // f64::round rounds half away from zero; `as` saturates far-off splats.
        let cu = p.u.round() as i64;
        let cv = p.v.round() as i64;
        let x0 = cu.saturating_sub(half).max(0);
        let x1 = cu.saturating_add(half).min(width as i64 - 1);
        let y0 = cv.saturating_sub(half).max(0);
        let y1 = cv.saturating_add(half).min(height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            let row = &mut nearest[y as usize * width..(y as usize + 1) * width];
            for cell in &mut row[x0 as usize..=x1 as usize] {
                if p.depth < *cell {
                    *cell = p.depth;
                }
            }
        }
    }
    let intensities = nearest
        .into_iter()
        .map(|d| if d.is_finite() { covered_intensity(d, params) } else { 0.0 })
        .collect();
    ZBufferImage {
        width,
        height,
        intensities,
        params: *params,
    }
}

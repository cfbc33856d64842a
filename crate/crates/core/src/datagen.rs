//! Synthetic training pairs: analytic sphere scenes on a shadow-catching
//! floor, surface point sampling, and a ray-traced RGBA reference.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbaImage;
use crate::network::{LightPosition, Material, Settings};
use crate::projection::{
    normalize_cloud, project, rasterize, Camera, Normalization, PointCloud, Vec3, ZBufferImage,
    ZBufferParams,
};
use crate::training::{add_uniform_noise, TrainingSample};

const HIT_EPSILON: f64 = 1e-9;
const SHADOW_BIAS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    fn area(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.radius * self.radius
    }

    /// Nearest positive hit distance along a unit direction.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.dot(&oc) - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPSILON)
    }
}

/// Square emitter facing the scene origin, sampled on a regular grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaLight {
    pub center: Vec3,
    pub half_extent: f64,
    /// Perfect square; each sample sits in its own grid cell.
    pub samples: usize,
    /// Per-cell jitter seed; cell centers when `None`.
    pub jitter_seed: Option<u64>,
}

impl AreaLight {
    /// Sample positions, row-major over the emitter's two tangent axes.
    pub fn sample_points(&self) -> Vec<Vec3> {
        let side = (self.samples as f64).sqrt().round().max(1.0) as usize;
        let normal = (-self.center).try_normalize(1e-12).unwrap_or(Vec3::new(0.0, -1.0, 0.0));
        let helper = if normal.y.abs() > 0.99 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let a = helper.cross(&normal).normalize();
        let b = normal.cross(&a);
        let mut rng = self.jitter_seed.map(ChaCha8Rng::seed_from_u64);
        let mut out = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (ju, jv) = match rng.as_mut() {
                    Some(r) => (r.random::<f64>(), r.random::<f64>()),
                    None => (0.5, 0.5),
                };
                let s = (i as f64 + ju) / side as f64 * 2.0 - 1.0;
                let t = (j as f64 + jv) / side as f64 * 2.0 - 1.0;
                out.push(self.center + a * (s * self.half_extent) + b * (t * self.half_extent));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shading {
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
}

impl Default for Shading {
    fn default() -> Self {
        Self {
            ambient: 0.2,
            diffuse: 0.8,
            specular: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub spheres: Vec<Sphere>,
    /// Height of the horizontal floor plane, if present.
    pub floor: Option<f64>,
    pub color: [f64; 3],
    pub light: AreaLight,
    pub shading: Shading,
    pub material: Option<Material>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(Error::InvalidConfig(format!("sphere {i} radius {}", s.radius)));
            }
            if let Some(y) = self.floor {
                if s.center.y - s.radius < y - 1e-9 {
                    return Err(Error::InvalidConfig(format!("sphere {i} dips below the floor")));
                }
            }
        }
        Ok(())
    }

    /// Same scene after the similarity transform applied to its point cloud.
    pub fn transformed(&self, n: &Normalization) -> SceneSpec {
        let centroid = Vec3::from(n.centroid);
        SceneSpec {
            spheres: self
                .spheres
                .iter()
                .map(|s| Sphere {
                    center: n.apply(&s.center),
                    radius: s.radius * n.scale,
                })
                .collect(),
            floor: self.floor.map(|y| (y - centroid.y) * n.scale),
            light: AreaLight {
                center: n.apply(&self.light.center),
                half_extent: self.light.half_extent * n.scale,
                ..self.light
            },
            ..self.clone()
        }
    }

    fn occluded(&self, origin: &Vec3, target: &Vec3) -> bool {
        let d = target - origin;
        let dist = d.norm();
        let dir = d / dist;
        self.spheres
            .iter()
            .any(|s| s.intersect(origin, &dir).is_some_and(|t| t < dist))
    }

    /// Fraction of light samples visible from `p`.
    pub fn visibility(&self, p: &Vec3, offset: &Vec3) -> f64 {
        let origin = p + offset * SHADOW_BIAS;
        let samples = self.light.sample_points();
        let visible = samples.iter().filter(|q| !self.occluded(&origin, q)).count();
        visible as f64 / samples.len() as f64
    }
}

/// World position of a light given in spherical coordinates relative to the
/// camera: azimuth 0 sits behind the camera, positive azimuth turns toward
/// the image right, elevation is measured from the horizontal.
pub fn light_position(light: &LightPosition, cam: &Camera, pivot: &Vec3) -> Vec3 {
    let up = Vec3::new(0.0, 1.0, 0.0);
    let (right, _, forward) = cam.basis();
    let back = Vec3::new(-forward.x, 0.0, -forward.z)
        .try_normalize(1e-12)
        .unwrap_or_else(|| up.cross(&right));
    let right_h = Vec3::new(right.x, 0.0, right.z).try_normalize(1e-12).unwrap_or(right);
    let (sa, ca) = light.azimuth.sin_cos();
    let (se, ce) = light.elevation.sin_cos();
    let dir = (back * ca + right_h * sa) * ce + up * se;
    pivot + dir * light.radius
}

/// Orbit camera parameters, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub yaw: f64,
    pub pitch: f64,
    pub distance: f64,
    pub fov_y: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            yaw: 0.0,
            pitch: 20f64.to_radians(),
            distance: 2.2,
            fov_y: 60f64.to_radians(),
        }
    }
}

impl CameraRig {
    /// Largest accepted `|pitch|`; the orbit degenerates at the poles.
    pub const MAX_PITCH_DEG: f64 = 89.0;

    /// Pitch within the pole limit, camera outside the unit sphere that
    /// holds a normalized cloud, field of view in `(0, pi)`.
    pub fn validate(&self) -> Result<()> {
        if !self.yaw.is_finite() || !(self.pitch.abs() <= Self::MAX_PITCH_DEG.to_radians()) {
            return Err(Error::InvalidCamera(format!(
                "yaw {} pitch {} (pitch limited to +-{} degrees)",
                self.yaw.to_degrees(),
                self.pitch.to_degrees(),
                Self::MAX_PITCH_DEG
            )));
        }
        if !(self.distance > 1.0) || !self.distance.is_finite() {
            return Err(Error::InvalidCamera(format!("distance {} must exceed 1", self.distance)));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidCamera(format!("field of view {} degrees", self.fov_y.to_degrees())));
        }
        Ok(())
    }

    pub fn camera(&self, width: usize, height: usize) -> Result<Camera> {
        Camera::orbit(self.yaw, self.pitch, self.distance, self.fov_y, (width, height))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub resolution: usize,
    pub points: usize,
    /// Fraction of uniform noise points added before normalization.
    pub noise_fraction: f64,
    pub camera: CameraRig,
    pub zbuffer: ZBufferParams,
    pub max_spheres: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub light_radius: f64,
    pub elevation_range: (f64, f64),
    pub light_half_extent: f64,
    pub light_samples: usize,
    pub jitter: bool,
    pub shading: Shading,
    pub material: bool,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            points: 2000,
            noise_fraction: 0.0,
            camera: CameraRig::default(),
            zbuffer: ZBufferParams::default(),
            max_spheres: 3,
            min_radius: 0.25,
            max_radius: 0.6,
            light_radius: 3.0,
            elevation_range: (20f64.to_radians(), 70f64.to_radians()),
            light_half_extent: 0.3,
            light_samples: 16,
            jitter: false,
            shading: Shading::default(),
            material: false,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.resolution == 0 || self.points == 0 {
            return bad("resolution and point count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return bad(format!("noise fraction {} outside [0, 1)", self.noise_fraction));
        }
        if self.max_spheres == 0 || !(self.min_radius > 0.0) || self.max_radius < self.min_radius {
            return bad("sphere count and radius range".into());
        }
        let side = (self.light_samples as f64).sqrt().round() as usize;
        if self.light_samples == 0 || side * side != self.light_samples {
            return bad(format!("light samples {} must be a perfect square", self.light_samples));
        }
        if !(self.light_radius > 0.0) || self.light_half_extent < 0.0 {
            return bad("light radius and extent".into());
        }
        self.zbuffer.validate()
    }
}

/// Random scene and the settings describing it, in world units. The light
/// is placed relative to `cam` around the world origin.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, config: &DatagenConfig, cam: &Camera) -> (SceneSpec, Settings) {
    let count = rng.random_range(1..=config.max_spheres);
    let mut spheres: Vec<Sphere> = Vec::with_capacity(count);
    let mut attempts = 0;
    while spheres.len() < count && attempts < 1000 {
        attempts += 1;
        let radius = rng.random_range(config.min_radius..=config.max_radius);
        let center = Vec3::new(rng.random_range(-0.8..0.8), radius, rng.random_range(-0.8..0.8));
        if spheres
            .iter()
            .all(|s| (s.center - center).norm() > s.radius + radius + 0.02)
        {
            spheres.push(Sphere { center, radius });
        }
    }
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    for s in &mut spheres {
        let c = s.center;
        s.center = Vec3::new(cos * c.x + sin * c.z, c.y, -sin * c.x + cos * c.z);
    }
    let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let light = LightPosition {
        azimuth: rng.random_range(0.0..std::f64::consts::TAU),
        elevation: rng.random_range(config.elevation_range.0..=config.elevation_range.1),
        radius: config.light_radius,
    };
    let material = config.material.then(|| Material {
        metallic: rng.random(),
        roughness: rng.random(),
    });
    let jitter_seed = config.jitter.then(|| rng.random());
    let scene = SceneSpec {
        spheres,
        floor: Some(0.0),
        color,
        light: AreaLight {
            center: light_position(&light, cam, &Vec3::zeros()),
            half_extent: config.light_half_extent,
            samples: config.light_samples,
            jitter_seed,
        },
        shading: config.shading,
        material,
    };
    let settings = Settings {
        color,
        light,
        material,
    };
    (scene, settings)
}

/// `n` points uniform by area over the sphere surfaces.
pub fn sample_points<R: Rng + ?Sized>(scene: &SceneSpec, n: usize, rng: &mut R) -> Result<PointCloud> {
    if scene.spheres.is_empty() || n == 0 {
        return Err(Error::EmptyCloud);
    }
    let cumulative: Vec<f64> = scene
        .spheres
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.area();
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("nonempty");
    let points = (0..n)
        .map(|_| {
            let pick = rng.random::<f64>() * total;
            let i = cumulative.iter().position(|&c| pick < c).unwrap_or(cumulative.len() - 1);
            let s = &scene.spheres[i];
            let d: [f64; 3] = UnitSphere.sample(rng);
            s.center + Vec3::from(d) * s.radius
        })
        .collect();
    PointCloud::new(points)
}

enum Hit {
    Sphere { point: Vec3, normal: Vec3 },
    Floor { point: Vec3 },
}

fn trace(scene: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in scene.spheres.iter().enumerate() {
        if let Some(t) = s.intersect(origin, dir) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    let floor_t = scene.floor.and_then(|y| {
        let t = (y - origin.y) / dir.y;
        (dir.y != 0.0 && t > HIT_EPSILON).then_some(t)
    });
    match (best, floor_t) {
        (Some((t, i)), f) if f.is_none_or(|ft| t <= ft) => {
            let point = origin + dir * t;
            let normal = (point - scene.spheres[i].center).normalize();
            Some(Hit::Sphere { point, normal })
        }
        (_, Some(t)) => Some(Hit::Floor {
            point: origin + dir * t,
        }),
        _ => None,
    }
}

/// Ray-traced RGBA reference. Spheres are opaque and Lambertian with an
/// optional Blinn-Phong lobe; the floor only contributes shadow alpha.
pub fn render_reference(scene: &SceneSpec, cam: &Camera) -> RgbaImage {
    let mut image = RgbaImage::new(cam.width, cam.height);
    let origin = cam.position();
    let sh = scene.shading;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = cam.ray_direction(x as f64, y as f64);
            let rgba = match trace(scene, &origin, &dir) {
                None => [0.0; 4],
                Some(Hit::Floor { point }) => {
                    let up = Vec3::new(0.0, 1.0, 0.0);
                    let v = scene.visibility(&point, &up);
                    [0.0, 0.0, 0.0, (1.0 - v) as f32]
                }
                Some(Hit::Sphere { point, normal }) => {
                    let to_light = (scene.light.center - point).normalize();
                    let ndl = normal.dot(&to_light).max(0.0);
                    let vis = if ndl > 0.0 { scene.visibility(&point, &normal) } else { 0.0 };
                    let lambert = sh.ambient + sh.diffuse * ndl * vis;
                    let mut rgb = scene.color.map(|c| c * lambert);
                    if let Some(m) = scene.material {
                        let view = -dir;
                        let half = (to_light + view).normalize();
                        let smooth = 1.0 - m.roughness;
                        let exponent = 2.0 + 98.0 * smooth * smooth;
                        let lobe = if ndl > 0.0 {
                            sh.specular * smooth * normal.dot(&half).max(0.0).powf(exponent) * vis
                        } else {
                            0.0
                        };
                        for (c, base) in rgb.iter_mut().zip(scene.color) {
                            let tint = 1.0 + (base - 1.0) * m.metallic;
                            *c += tint * lobe;
                        }
                    }
                    let [r, g, b] = rgb.map(|c| c.clamp(0.0, 1.0) as f32);
                    [r, g, b, 1.0]
                }
            };
            image.set(x, y, rgba);
        }
    }
    image
}

/// One generated sample. `scene` and `cloud` are in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene: SceneSpec,
    pub cloud: PointCloud,
    pub normalization: Normalization,
    pub settings: Settings,
    pub zbuffer: ZBufferImage,
    pub target: RgbaImage,
}

impl SceneSample {
    pub fn training_sample(&self) -> TrainingSample {
        TrainingSample {
            zbuffer: self.zbuffer.clone(),
            settings: self.settings,
            target: self.target.clone(),
        }
    }
}

/// Random generator for sample `index` of a dataset with master `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scene, points, noise, normalization, z-buffer and reference render.
pub fn generate_sample(config: &DatagenConfig, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    let cam = config.camera.camera(config.resolution, config.resolution)?;
    let (world, settings) = sample_scene(rng, config, &cam);
    let clean = sample_points(&world, config.points, rng)?;
    let noisy = add_uniform_noise(&clean, config.noise_fraction, rng)?;
    let (cloud, normalization) = normalize_cloud(&noisy)?;
    let mut scene = world.transformed(&normalization);
    scene.light.center = light_position(&settings.light, &cam, &Vec3::zeros());
    scene.light.half_extent = config.light_half_extent;
    let zbuffer = rasterize(
        &project(&cloud, &cam),
        &config.zbuffer,
        (config.resolution, config.resolution),
    );
    // Quantized so the in-memory target equals what a dataset file stores.
    let target = render_reference(&scene, &cam).quantized();
    Ok(SceneSample {
        scene,
        cloud,
        normalization,
        settings,
        zbuffer,
        target,
    })
}

/// `count` samples, each reproducible from `(seed, index)` alone.
pub fn make_dataset(config: &DatagenConfig, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Dataset("sample count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| generate_sample(config, &mut sample_rng(seed, i)))
        .collect()
}

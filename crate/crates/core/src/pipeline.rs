//! End-to-end preview: project, z-buffer, forward, with per-stage timings.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::datagen::CameraRig;
use crate::error::Result;
use crate::image::RgbaImage;
use crate::network::{Settings, Z2pModel};
use crate::projection::{project, rasterize, PointCloud, ZBufferImage, ZBufferParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub project_ms: f64,
    pub zbuffer_ms: f64,
    pub forward_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: RgbaImage,
    pub zbuffer: ZBufferImage,
    pub timings: StageTimings,
}

/// Renders an already normalized cloud. Settings and resolution are
/// checked before any stage runs.
pub fn render(
    model: &Z2pModel,
    cloud: &PointCloud,
    camera: &CameraRig,
    settings: &Settings,
    (width, height): (usize, usize),
    zbuffer: &ZBufferParams,
) -> Result<RenderOutput> {
    settings.validate()?;
    camera.validate()?;
    model.config().check_resolution(width, height)?;
    let cam = camera.camera(width, height)?;
    let start = Instant::now();
    let projected = project(cloud, &cam);
    let t_project = start.elapsed();
    let z = rasterize(&projected, zbuffer, (width, height));
    let t_zbuffer = start.elapsed() - t_project;
    let image = model.forward(&z, settings)?;
    let total = start.elapsed();
    Ok(RenderOutput {
        image,
        zbuffer: z,
        timings: StageTimings {
            project_ms: ms(t_project),
            zbuffer_ms: ms(t_zbuffer),
            forward_ms: ms(total - t_project - t_zbuffer),
            total_ms: ms(total),
        },
    })
}

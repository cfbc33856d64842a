//! File formats: point clouds (XYZ, ASCII PLY), PNG images, the model
//! bundle and on-disk datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use z2p_tensor::Tensor;

use crate::datagen::{DatagenConfig, SceneSample};
use crate::encoding::FourierEncoding;
use crate::error::{Error, Result};
use crate::image::{to_u8, RgbaImage};
use crate::network::{LightPosition, Material, Settings, UNetConfig, Z2pModel};
use crate::projection::{PointCloud, Vec3, ZBufferImage, ZBufferParams};
use crate::training::TrainingSample;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if map.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key {key}"),
            });
        }
    }
    Ok(map)
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        parse_error(line, "invalid UTF-8")
    })
}

fn coordinate(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_error(line, format!("{token:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("non-finite coordinate {token}")));
    }
    Ok(v)
}

/// Whitespace-separated `x y z` rows; extra columns, blank lines and `#`
/// comments are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let mut xyz = [0.0; 3];
        for (axis, slot) in xyz.iter_mut().enumerate() {
            let token = tokens.next().ok_or_else(|| {
                parse_error(i + 1, format!("expected 3 coordinates, found {axis}"))
            })?;
            *slot = coordinate(token, i + 1)?;
        }
        points.push(Vec3::from(xyz));
    }
    PointCloud::new(points)
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; `None` when the element has list properties.
    scalars: Option<Vec<String>>,
    header_line: usize,
}

/// ASCII PLY; only `x`, `y`, `z` of the `vertex` element are read.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_error(1, "missing \"ply\" magic")),
    }
    let mut format_seen = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (n, line) = lines
            .next()
            .ok_or_else(|| parse_error(text.lines().count(), "header has no end_header"))?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                match (tokens.next(), tokens.next()) {
                    (Some("ascii"), Some("1.0")) => {}
                    (Some(f), _) if f.starts_with("binary") => {
                        return Err(parse_error(n, format!("{f} PLY is not supported")))
                    }
                    _ => return Err(parse_error(n, format!("unsupported format line {line:?}"))),
                }
                format_seen = true;
            }
            Some("element") => {
                let (Some(name), Some(count), None) = (tokens.next(), tokens.next(), tokens.next()) else {
                    return Err(parse_error(n, "expected \"element <name> <count>\""));
                };
                let count = count
                    .parse()
                    .map_err(|_| parse_error(n, format!("element {name} count {count:?}")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    scalars: Some(Vec::new()),
                    header_line: n,
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_error(n, "property before any element"))?;
                let rest: Vec<&str> = tokens.collect();
                match rest.as_slice() {
                    ["list", _, _, _] => element.scalars = None,
                    [_, name] => {
                        if let Some(s) = element.scalars.as_mut() {
                            s.push(name.to_string());
                        }
                    }
                    _ => return Err(parse_error(n, format!("malformed property {line:?}"))),
                }
            }
            Some(other) => return Err(parse_error(n, format!("unknown header keyword {other:?}"))),
        }
    }
    if !format_seen {
        return Err(parse_error(1, "missing format line"));
    }
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_error(1, "no vertex element"))?;
    let axes = {
        let e = &elements[vertex];
        let props = e.scalars.as_ref().ok_or_else(|| {
            parse_error(e.header_line, "vertex element with list properties is not supported")
        })?;
        let find = |axis: &str| {
            props.iter().position(|p| p == axis).ok_or_else(|| {
                parse_error(e.header_line, format!("vertex element has no {axis} property"))
            })
        };
        [find("x")?, find("y")?, find("z")?]
    };
    let mut data = lines.filter(|(_, l)| !l.is_empty());
    let mut points = Vec::new();
    for (index, element) in elements.iter().enumerate() {
        for seen in 0..element.count {
            let (n, line) = data.next().ok_or_else(|| {
                parse_error(
                    element.header_line,
                    format!(
                        "element {} declares {} entries but the file ends after {seen}",
                        element.name, element.count
                    ),
                )
            })?;
            if index != vertex {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let expected = element.scalars.as_ref().map_or(0, Vec::len);
            if tokens.len() != expected {
                return Err(parse_error(
                    n,
                    format!(
                        "element vertex entry {} of {} has {} values, expected {expected}",
                        seen + 1,
                        element.count,
                        tokens.len()
                    ),
                ));
            }
            let mut xyz = [0.0; 3];
            for (slot, &col) in xyz.iter_mut().zip(&axes) {
                *slot = coordinate(tokens[col], n)?;
            }
            points.push(Vec3::from(xyz));
        }
    }
    if let Some((n, _)) = data.next() {
        let last = elements.last().map_or("vertex", |e| e.name.as_str());
        return Err(parse_error(
            n,
            format!("data beyond the declared element counts (last element {last})"),
        ));
    }
    PointCloud::new(points)
}

/// PLY when the data starts with the `ply` magic, XYZ otherwise.
pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let text = utf8(bytes)?;
    if text.trim_start().starts_with("ply") && text.trim_start().lines().next().map(str::trim) == Some("ply") {
        parse_ply(text.trim_start())
    } else {
        parse_xyz(text)
    }
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(&bytes)
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        text.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_png(image: &RgbaImage) -> Result<Vec<u8>> {
    let (w, h) = (image.width(), image.height());
    let mut raw = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            raw.extend(image.get(x, y).map(to_u8));
        }
    }
    let buffer = image::RgbaImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::InvalidConfig("image dimensions overflow".into()))?;
    let mut out = Cursor::new(Vec::new());
    buffer.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgba8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut out = RgbaImage::new(w, h);
    for (x, y, px) in decoded.enumerate_pixels() {
        out.set(x as usize, y as usize, px.0.map(|v| f32::from(v) / 255.0));
    }
    Ok(out)
}

/// 8-bit RGBA PNG, `v -> round(v * 255)`.
pub fn write_png_rgba(image: &RgbaImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_png_rgba(path: impl AsRef<Path>) -> Result<RgbaImage> {
    let path = path.as_ref();
    decode_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub const MODEL_MAGIC: &[u8; 4] = b"Z2PW";
pub const MODEL_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 1 << 12;
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Provenance {
    pub train_seed: u64,
    pub steps: u64,
    pub final_loss: f32,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: UNetConfig,
    pub init_seed: u64,
    pub encoding: Option<FourierEncoding>,
    pub parameters: Vec<(String, Tensor<f32>)>,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn from_model(model: &Z2pModel, provenance: Provenance) -> Self {
        Self {
            config: model.config().clone(),
            init_seed: model.init_seed(),
            encoding: model.encoding().cloned(),
            parameters: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<Z2pModel> {
        Z2pModel::from_parts(
            self.config.clone(),
            self.init_seed,
            self.encoding.clone(),
            &self.parameters,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let w = &mut out;
        w.write_u32::<LittleEndian>(MODEL_VERSION).unwrap();
        let config = self.config.to_key_values();
        w.write_u32::<LittleEndian>(config.len() as u32).unwrap();
        w.extend_from_slice(config.as_bytes());
        w.write_u64::<LittleEndian>(self.init_seed).unwrap();
        match &self.encoding {
            None => w.write_u8(0).unwrap(),
            Some(enc) => {
                w.write_u8(1).unwrap();
                w.write_u64::<LittleEndian>(enc.seed).unwrap();
                w.write_u32::<LittleEndian>(enc.frequencies.len() as u32).unwrap();
                for &f in &enc.frequencies {
                    w.write_f32::<LittleEndian>(f).unwrap();
                }
            }
        }
        w.write_u64::<LittleEndian>(self.provenance.train_seed).unwrap();
        w.write_u64::<LittleEndian>(self.provenance.steps).unwrap();
        w.write_f32::<LittleEndian>(self.provenance.final_loss).unwrap();
        w.write_u32::<LittleEndian>(self.parameters.len() as u32).unwrap();
        for (name, value) in &self.parameters {
            w.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            w.extend_from_slice(name.as_bytes());
            w.write_u32::<LittleEndian>(value.ndim() as u32).unwrap();
            for &d in value.shape() {
                w.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in value.data() {
                w.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    /// Parses and validates a bundle; nothing is returned on any error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BundleReader {
            cursor: Cursor::new(bytes),
        };
        let magic = r.bytes(4, "magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {magic:?}, expected \"Z2PW\"")));
        }
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {version}, expected {MODEL_VERSION}"
            )));
        }
        let config_len = r.u32("config length")? as usize;
        let config_text = r.bytes(config_len, "config")?;
        let config_text = std::str::from_utf8(&config_text)
            .map_err(|_| Error::ModelFormat("config is not UTF-8".into()))?;
        let config = UNetConfig::from_key_values(config_text)?;
        let init_seed = r.u64("init seed")?;
        let encoding = match r.u8("encoding flag")? {
            0 => None,
            1 => {
                let seed = r.u64("encoding seed")?;
                let n = r.u32("frequency count")? as usize;
                r.ensure(n.saturating_mul(4), "frequencies")?;
                let frequencies = (0..n).map(|_| r.f32("frequencies")).collect::<Result<_>>()?;
                Some(FourierEncoding { frequencies, seed })
            }
            other => return Err(Error::ModelFormat(format!("encoding flag {other}"))),
        };
        if encoding.is_some() != config.encoding_enabled {
            return Err(Error::ModelFormat(
                "encoding frequencies must be present exactly when encoding is enabled".into(),
            ));
        }
        let provenance = Provenance {
            train_seed: r.u64("train seed")?,
            steps: r.u64("step count")?,
            final_loss: r.f32("final loss")?,
        };
        let count = r.u32("parameter count")? as usize;
        let mut parameters: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for i in 0..count {
            let name_len = r.u32("parameter name length")? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(Error::ModelFormat(format!("parameter {i} name length {name_len}")));
            }
            let name = String::from_utf8(r.bytes(name_len, "parameter name")?)
                .map_err(|_| Error::ModelFormat(format!("parameter {i} name is not UTF-8")))?;
            if !seen.insert(name.clone()) {
                return Err(Error::ModelFormat(format!("duplicate parameter {name}")));
            }
            let ndim = r.u32("parameter rank")? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::ModelFormat(format!("parameter {name} has rank {ndim}")));
            }
            let shape = (0..ndim)
                .map(|_| r.u32("parameter shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::ModelFormat(format!("parameter {name} is too large")))?;
            r.ensure(numel.saturating_mul(4), "parameter data")?;
            let data = (0..numel).map(|_| r.f32("parameter data")).collect::<Result<_>>()?;
            parameters.push((name, Tensor::new(shape, data)?));
        }
        if r.cursor.position() as usize != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.cursor.position() as usize
            )));
        }
        Ok(Self {
            config,
            init_seed,
            encoding,
            parameters,
            provenance,
        })
    }
}

struct BundleReader<'a> {
    cursor: Cursor<&'a [u8]>,
}

impl BundleReader<'_> {
    fn truncated(what: &str) -> Error {
        Error::ModelFormat(format!("truncated file while reading {what}"))
    }

    fn ensure(&self, len: usize, what: &str) -> Result<()> {
        let left = self.cursor.get_ref().len() - self.cursor.position() as usize;
        if len > left {
            return Err(Self::truncated(what));
        }
        Ok(())
    }

    fn bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        self.ensure(len, what)?;
        let mut buf = vec![0; len];
        self.cursor.read_exact(&mut buf).map_err(|_| Self::truncated(what))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.cursor.read_u8().map_err(|_| Self::truncated(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cursor.read_u32::<LittleEndian>().map_err(|_| Self::truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.cursor.read_u64::<LittleEndian>().map_err(|_| Self::truncated(what))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.cursor.read_f32::<LittleEndian>().map_err(|_| Self::truncated(what))
    }
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    ModelBundle::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub const ZBUFFER_MAGIC: &[u8; 4] = b"Z2PZ";
pub const ZBUFFER_VERSION: u32 = 1;

/// `Z2PZ`, version, width, height, alpha (f64), beta (f64), window, then
/// row-major f32 intensities. Little-endian throughout.
pub fn encode_zbuffer(z: &ZBufferImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 4 * z.intensities.len());
    out.extend_from_slice(ZBUFFER_MAGIC);
    out.write_u32::<LittleEndian>(ZBUFFER_VERSION).unwrap();
    out.write_u32::<LittleEndian>(z.width as u32).unwrap();
    out.write_u32::<LittleEndian>(z.height as u32).unwrap();
    out.write_f64::<LittleEndian>(z.params.alpha).unwrap();
    out.write_f64::<LittleEndian>(z.params.beta).unwrap();
    out.write_u32::<LittleEndian>(z.params.window as u32).unwrap();
    for &v in &z.intensities {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode_zbuffer(bytes: &[u8]) -> Result<ZBufferImage> {
    let bad = |m: String| Error::Dataset(format!("z-buffer file: {m}"));
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != ZBUFFER_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let header = (|| -> std::io::Result<_> {
        Ok((
            c.read_u32::<LittleEndian>()?,
            c.read_u32::<LittleEndian>()? as usize,
            c.read_u32::<LittleEndian>()? as usize,
            c.read_f64::<LittleEndian>()?,
            c.read_f64::<LittleEndian>()?,
            c.read_u32::<LittleEndian>()? as usize,
        ))
    })()
    .map_err(|_| bad("truncated header".into()))?;
    let (version, width, height, alpha, beta, window) = header;
    if version != ZBUFFER_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let body = &bytes[c.position() as usize..];
    if Some(body.len()) != width.checked_mul(height).and_then(|n| n.checked_mul(4)) {
        return Err(bad(format!("{} data bytes for {width}x{height}", body.len())));
    }
    let intensities = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let params = ZBufferParams {
        alpha,
        beta,
        window,
    };
    params.validate()?;
    Ok(ZBufferImage {
        width,
        height,
        intensities,
        params,
    })
}

/// `key=value` text; angles in radians.
pub fn format_settings(s: &Settings) -> String {
    let mut out = format!(
        "red={}\ngreen={}\nblue={}\nlight_azimuth={}\nlight_elevation={}\nlight_radius={}\n",
        s.color[0], s.color[1], s.color[2], s.light.azimuth, s.light.elevation, s.light.radius
    );
    if let Some(m) = s.material {
        out.push_str(&format!("metallic={}\nroughness={}\n", m.metallic, m.roughness));
    }
    out
}

pub fn parse_settings(text: &str) -> Result<Settings> {
    let mut map = parse_key_values(text)?;
    let mut take = |key: &str| -> Result<Option<f64>> {
        map.remove(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::InvalidSettings(format!("{key}={v:?} is not a number")))
            })
            .transpose()
    };
    let mut need = |key: &str| take(key)?.ok_or_else(|| Error::InvalidSettings(format!("missing {key}")));
    let color = [need("red")?, need("green")?, need("blue")?];
    let light = LightPosition {
        azimuth: need("light_azimuth")?,
        elevation: need("light_elevation")?,
        radius: need("light_radius")?,
    };
    let material = match (take("metallic")?, take("roughness")?) {
        (None, None) => None,
        (Some(metallic), Some(roughness)) => Some(Material { metallic, roughness }),
        _ => return Err(Error::InvalidSettings("metallic and roughness go together".into())),
    };
    if let Some(key) = map.keys().next() {
        return Err(Error::InvalidSettings(format!("unknown key {key}")));
    }
    let settings = Settings {
        color,
        light,
        material,
    };
    settings.validate()?;
    Ok(settings)
}

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatagenConfig,
    /// Sample directory names, relative to the dataset root.
    pub samples: Vec<String>,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

pub fn write_sample(dir: &Path, sample: &TrainingSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("zbuffer.bin", &encode_zbuffer(&sample.zbuffer))?;
    write("settings.txt", format_settings(&sample.settings).as_bytes())?;
    write("target.png", &encode_png(&sample.target)?)
}

pub fn read_sample(dir: &Path) -> Result<TrainingSample> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let zbuffer = decode_zbuffer(&read("zbuffer.bin")?)?;
    let settings = parse_settings(utf8(&read("settings.txt")?)?)?;
    let target = decode_png(&read("target.png")?)?;
    if (target.width(), target.height()) != (zbuffer.width, zbuffer.height) {
        return Err(Error::Dataset(format!(
            "{}: target is {}x{} but z-buffer is {}x{}",
            dir.display(),
            target.width(),
            target.height(),
            zbuffer.width,
            zbuffer.height
        )));
    }
    Ok(TrainingSample {
        zbuffer,
        settings,
        target,
    })
}

/// One directory per sample plus `manifest.json`.
pub fn write_dataset(root: &Path, samples: &[SceneSample], config: &DatagenConfig, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_dir_name(i);
        write_sample(&root.join(&name), &s.training_sample())?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed,
        config: config.clone(),
        samples: names,
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported dataset version {}", manifest.version)));
    }
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<TrainingSample>)> {
    let manifest = read_manifest(root)?;
    if manifest.samples.is_empty() {
        return Err(Error::Dataset(format!("{} lists no samples", root.display())));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|name| {
            if name.contains(['/', '\\']) || name == ".." {
                return Err(Error::Dataset(format!("sample name {name:?}")));
            }
            read_sample(&root.join(name))
        })
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

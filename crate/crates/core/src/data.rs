//! Tensor archives, PGM image import/export and synthetic datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ArchiveError, Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{ElemKind, Tensor};

pub const MAGIC: [u8; 4] = *b"SADN";
pub const VERSION: u16 = 1;

/// A tensor of any storable element kind.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl TensorData {
    pub fn kind(&self) -> ElemKind {
        match self {
            TensorData::F32(_) => ElemKind::Float32,
            TensorData::F64(_) => ElemKind::Float64,
            TensorData::I8(_) => ElemKind::Int8,
            TensorData::I32(_) => ElemKind::Int32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::I8(t) => t.shape(),
            TensorData::I32(t) => t.shape(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I8(_) => 2,
            TensorData::I32(_) => 3,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::I8(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::I32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    /// Payload size in bytes.
    pub fn nbytes(&self) -> usize {
        self.shape().iter().product::<usize>() * self.kind().size_bytes()
    }
}

/// One named entry of an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub data: TensorData,
    pub qparams: Option<QuantParams>,
}

impl Record {
    pub fn plain(data: TensorData) -> Self {
        Self { data, qparams: None }
    }
}

pub type Archive = BTreeMap<String, Record>;

/// Serializes records in name order.
pub fn encode_archive(records: &Archive) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| ArchiveError::Corrupt("too many records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, rec) in records {
        let len = u32::try_from(name.len()).map_err(|_| ArchiveError::Corrupt(format!("name of {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rec.data.tag());
        let shape = rec.data.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| ArchiveError::Corrupt(format!("{name}: rank {}", shape.len())))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| ArchiveError::Corrupt(format!("{name}: extent {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match rec.qparams {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                out.extend_from_slice(&q.scale.to_le_bytes());
                out.extend_from_slice(&q.zero_point.to_le_bytes());
            }
        }
        rec.data.write_le(&mut out);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ArchiveError> {
        if self.buf.len() - self.pos < n {
            return Err(ArchiveError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ArchiveError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, ArchiveError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

fn decode_values<T, const N: usize>(bytes: &[u8], f: fn([u8; N]) -> T) -> Vec<T> {
    bytes.chunks_exact(N).map(|c| f(c.try_into().expect("exact chunk"))).collect()
}

pub fn decode_archive(buf: &[u8]) -> Result<Archive> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.array("magic")?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic).into());
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version).into());
    }
    let count = c.u32("record count")?;
    let mut records = Archive::new();
    for i in 0..count {
        let len = c.u32(&format!("name length of record {i}"))? as usize;
        let name = std::str::from_utf8(c.take(len, &format!("name of record {i}"))?)
            .map_err(|_| ArchiveError::Corrupt(format!("name of record {i} is not UTF-8")))?
            .to_string();
        let tag = c.u8(&format!("{name}: element kind"))?;
        let rank = c.u8(&format!("{name}: rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32(&format!("{name}: extents"))? as usize);
        }
        let qparams = match c.u8(&format!("{name}: qparams flag"))? {
            0 => None,
            1 => {
                let scale = f64::from_le_bytes(c.array(&format!("{name}: scale"))?);
                let zero_point = i32::from_le_bytes(c.array(&format!("{name}: zero point"))?);
                Some(QuantParams { scale, zero_point })
            }
            f => return Err(ArchiveError::Corrupt(format!("{name}: qparams flag {f}")).into()),
        };
        let kind = match tag {
            0 => ElemKind::Float32,
            1 => ElemKind::Float64,
            2 => ElemKind::Int8,
            3 => ElemKind::Int32,
            t => return Err(ArchiveError::Corrupt(format!("{name}: element tag {t}")).into()),
        };
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(kind.size_bytes()))
            .ok_or_else(|| ArchiveError::Corrupt(format!("{name}: extents overflow")))?;
        let bytes = c.take(numel, &format!("{name}: data"))?;
        let data = match kind {
            ElemKind::Float32 => TensorData::F32(Tensor::new(&shape, decode_values(bytes, f32::from_le_bytes))?),
            ElemKind::Float64 => TensorData::F64(Tensor::new(&shape, decode_values(bytes, f64::from_le_bytes))?),
            ElemKind::Int8 => TensorData::I8(Tensor::new(&shape, decode_values(bytes, i8::from_le_bytes))?),
            ElemKind::Int32 => TensorData::I32(Tensor::new(&shape, decode_values(bytes, i32::from_le_bytes))?),
        };
        if records.insert(name.clone(), Record { data, qparams }).is_some() {
            return Err(ArchiveError::DuplicateName(name).into());
        }
    }
    if c.pos != buf.len() {
        return Err(ArchiveError::Corrupt(format!("{} trailing bytes", buf.len() - c.pos)).into());
    }
    Ok(records)
}

pub fn save_archive(records: &Archive, path: &Path) -> Result<()> {
    let bytes = encode_archive(records)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    decode_archive(&fs::read(path)?)
}

fn pgm_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::MalformedImage("header ends early".into())),
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    Ok(&buf[start..*pos])
}

fn pgm_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedImage(format!("{what} {:?} is not a number", String::from_utf8_lossy(tok))))
}

/// Decodes a binary (P5) PGM into a `1×1×H×W` tensor scaled by 1/maxval.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let magic = pgm_token(buf, &mut pos)?;
    match magic {
        b"P5" => {}
        b"P1" | b"P2" | b"P3" | b"P4" | b"P6" | b"P7" => {
            return Err(Error::UnsupportedImage(format!(
                "{} (only binary grayscale P5 is read)",
                String::from_utf8_lossy(magic)
            )))
        }
        _ => return Err(Error::MalformedImage("missing P5 magic".into())),
    }
    let w = pgm_number(buf, &mut pos, "width")?;
    let h = pgm_number(buf, &mut pos, "height")?;
    let maxval = pgm_number(buf, &mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage(format!("{w}x{h} image")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedImage(format!("maxval {maxval}")));
    }
    if !buf.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::MalformedImage("no whitespace after maxval".into()));
    }
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let raster = &buf[pos..];
    if raster.len() < w * h * bpp {
        return Err(Error::MalformedImage(format!(
            "raster has {} bytes, {w}x{h} needs {}",
            raster.len(),
            w * h * bpp
        )));
    }
    let maxf = maxval as f32;
    let values: Vec<f32> = if bpp == 1 {
        raster[..w * h].iter().map(|&v| v as f32 / maxf).collect()
    } else {
        raster[..2 * w * h]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 / maxf)
            .collect()
    };
    if values.iter().any(|&v| v > 1.0) {
        return Err(Error::MalformedImage(format!("sample exceeds maxval {maxval}")));
    }
    Tensor::new(&[1, 1, h, w], values)
}

pub fn import_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&fs::read(path)?)
}

/// Encodes the last two axes of `img` (values in [0,1]) as an 8-bit P5 PGM.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let r = img.rank();
    if r < 2 || img.shape()[..r - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("encode_pgm", format!("expected a single plane, got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn export_pgm(img: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

/// Nearest-neighbour resize of a `1×1×H×W` image.
pub fn resize_nearest(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (sh, sw) = match *img.shape() {
        [1, 1, sh, sw] => (sh, sw),
        ref s => return Err(Error::shape("resize_nearest", format!("expected 1x1xHxW, got {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::shape("resize_nearest", "target extent is zero"));
    }
    Ok(Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        img.data()[(y * sh / h) * sw + x * sw / w]
    }))
}

/// One training example. `image` is `C×H×W` in [0,1]; `label` is a
/// multi-hot vector (classification) or a `1×H×W` binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "cross"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsSynthConfig {
    /// Probability that each shape appears in an image.
    pub inclusion: f64,
    /// Upper bound of the uniform background noise.
    pub noise: f32,
}

impl Default for ClsSynthConfig {
    fn default() -> Self {
        Self {
            inclusion: 0.5,
            noise: 0.15,
        }
    }
}

fn shape_mask(kind: usize, dy: f64, dx: f64, r: f64) -> bool {
    match kind {
        0 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        1 => dy.abs() <= r * 0.8 && dx.abs() <= r * 0.8,
        _ => {
            let arm = (r / 3.0).max(1.0);
            (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
        }
    }
}

/// Images holding a random subset of circle, square and cross, each with
/// probability `cfg.inclusion`, on a noisy background. Labels are k-hot
/// over the first `num_labels` shapes.
pub fn synth_cls_dataset_with(n: usize, size: usize, num_labels: usize, seed: u64, cfg: &ClsSynthConfig) -> Result<Vec<Sample>> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic image size {size} is below 16")));
    }
    if num_labels == 0 || num_labels > SHAPE_NAMES.len() {
        return Err(Error::Config(format!("num_labels must be in 1..=3, got {num_labels}")));
    }
    if !(0.0..=1.0).contains(&cfg.inclusion) {
        return Err(Error::Config(format!("inclusion probability {}", cfg.inclusion)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = size as f64 * 0.16;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let present: Vec<bool> = (0..num_labels).map(|_| rng.random_bool(cfg.inclusion)).collect();
        let mut img: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0..=cfg.noise)).collect();
        let mut centres: Vec<(f64, f64)> = Vec::new();
        for (kind, _) in present.iter().enumerate().filter(|(_, &p)| p) {
            let radius = r * rng.random_range(0.85..1.15);
            let (mut cy, mut cx);
            let mut tries = 0;
            loop {
                cy = rng.random_range(radius + 1.0..size as f64 - radius - 1.0);
                cx = rng.random_range(radius + 1.0..size as f64 - radius - 1.0);
                tries += 1;
                let clear = centres
                    .iter()
                    .all(|&(y, x)| (y - cy).abs().max((x - cx).abs()) > 2.0 * r * 1.15 + 1.0);
                if clear || tries > 200 {
                    break;
                }
            }
            centres.push((cy, cx));
            let level = rng.random_range(0.7f32..1.0);
            for y in 0..size {
                for x in 0..size {
                    if shape_mask(kind, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, radius) {
                        img[y * size + x] = level;
                    }
                }
            }
        }
        out.push(Sample {
            image: Tensor::new(&[1, size, size], img)?,
            label: Tensor::new(&[num_labels], present.iter().map(|&p| p as u8 as f32).collect())?,
        });
    }
    Ok(out)
}

pub fn synth_cls_dataset(n: usize, size: usize, num_labels: usize, seed: u64) -> Result<Vec<Sample>> {
    synth_cls_dataset_with(n, size, num_labels, seed, &ClsSynthConfig::default())
}

pub const MIN_MASK_FRACTION: f64 = 0.05;
pub const MAX_MASK_FRACTION: f64 = 0.6;

/// Images of one to three elliptical blobs over a darker noisy background.
/// The mask is the union of the blobs and covers between 5% and 60% of the
/// image.
pub fn synth_seg_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic image size {size} is below 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.05).expect("valid sigma");
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let blobs = rng.random_range(1..=3usize);
        let params: Vec<[f64; 6]> = (0..blobs)
            .map(|_| {
                [
                    rng.random_range(0.2 * s..0.8 * s),
                    rng.random_range(0.2 * s..0.8 * s),
                    rng.random_range(0.1 * s..0.25 * s),
                    rng.random_range(0.1 * s..0.25 * s),
                    rng.random_range(0.0..std::f64::consts::PI),
                    rng.random_range(0.45..0.7),
                ]
            })
            .collect();
        let background: f64 = rng.random_range(0.1..0.25);
        let mut img = vec![0f32; size * size];
        let mut mask = vec![0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = background;
                let mut inside = false;
                for &[cy, cx, a, b, theta, contrast] in &params {
                    let (dy, dx) = (py - cy, px - cx);
                    let u = dx * theta.cos() + dy * theta.sin();
                    let w = -dx * theta.sin() + dy * theta.cos();
                    let d2 = (u / a).powi(2) + (w / b).powi(2);
                    if d2 <= 1.0 {
                        inside = true;
                        v = v.max(background + contrast * (1.0 - 0.3 * d2));
                    }
                }
                img[y * size + x] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                mask[y * size + x] = inside as u8 as f32;
            }
        }
        let frac = mask.iter().sum::<f32>() as f64 / (size * size) as f64;
        if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&frac) {
            continue;
        }
        out.push(Sample {
            image: Tensor::new(&[1, size, size], img)?,
            label: Tensor::new(&[1, size, size], mask)?,
        });
    }
    Ok(out)
}

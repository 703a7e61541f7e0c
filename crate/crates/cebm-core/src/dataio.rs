//! Datasets and file formats: synthetic generators, IDX ingestion,
//! checkpoint containers, and sample-image export.

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};
use crate::model::{BaselineEbm, CebmModel, EncoderConfig, GmmCebmModel, Model};
use crate::rng::Stream;
use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Labeled image collection with pixels in [0,1], validated on construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    split: String,
    images: TensorValue,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        images: TensorValue,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "dataset",
                "[N,C,H,W] images".to_string(),
                format!("{shape:?}"),
            ));
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::invalid("dataset", "must be non-empty"));
        }
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} labels"),
                format!("{}", labels.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes", "must be at least 1"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} outside [0, {num_classes})"),
            ));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("images", "pixels must lie in [0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty datasets
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &TensorValue {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy the given examples into a new [len, C, H, W] batch.
    pub fn gather(&self, indices: &[usize]) -> Result<TensorValue> {
        if indices.is_empty() {
            return Err(Error::invalid("indices", "must be non-empty"));
        }
        let n = self.len();
        let stride = self.images.numel() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::invalid("indices", format!("{i} out of range 0..{n}")));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.images.shape()[1..]);
        TensorValue::new(shape, data)
    }

    /// New dataset restricted to the given examples, keeping class count.
    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Result<Self> {
        let images = self.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.name.clone(), split, images, labels, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    TwoMoonsRaster,
    GaussianGridRaster,
    BarPatterns,
}

/// Generator knobs. `noise_std` is coordinate noise for the moons, the
/// cluster standard deviation for the grid, and pixel noise for the bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub num_classes: Option<usize>,
    pub noise_std: f64,
    /// Bar patterns only: maximum bar-position shift in pixels.
    pub jitter: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            num_classes: None,
            noise_std: 0.05,
            jitter: 0,
        }
    }
}

/// Deterministic synthetic datasets with the stream's default options.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n_per_class: usize,
    image_size: usize,
    rng: &mut Stream,
) -> Result<Dataset> {
    gen_synthetic_opt(kind, n_per_class, image_size, SyntheticOptions::default(), rng)
}

pub fn gen_synthetic_opt(
    kind: SyntheticKind,
    n_per_class: usize,
    image_size: usize,
    opts: SyntheticOptions,
    rng: &mut Stream,
) -> Result<Dataset> {
    if image_size < 4 {
        return Err(Error::invalid("image_size", "must be at least 4"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be at least 1"));
    }
    if !(opts.noise_std >= 0.0) || !opts.noise_std.is_finite() {
        return Err(Error::invalid("noise_std", "must be nonnegative and finite"));
    }
    match kind {
        SyntheticKind::TwoMoonsRaster => gen_two_moons(n_per_class, image_size, opts, rng),
        SyntheticKind::GaussianGridRaster => gen_gaussian_grid(n_per_class, image_size, opts, rng),
        SyntheticKind::BarPatterns => gen_bar_patterns(n_per_class, image_size, opts, rng),
    }
}

/// Two interleaved half-circles, each sample rendered as a Gaussian bump at
/// its (rescaled) 2-D location.
fn gen_two_moons(
    n_per_class: usize,
    s: usize,
    opts: SyntheticOptions,
    rng: &mut Stream,
) -> Result<Dataset> {
    if let Some(l) = opts.num_classes {
        if l != 2 {
            return Err(Error::invalid("num_classes", "two_moons_raster has 2 classes"));
        }
    }
    let mut data = Vec::with_capacity(2 * n_per_class * s * s);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let radius = s as f64 / 8.0;
    for class in 0..2usize {
        for _ in 0..n_per_class {
            let t = rng.gen::<f64>() * std::f64::consts::PI;
            let (mut x, mut y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            x += opts.noise_std * nx;
            y += opts.noise_std * ny;
            // Map the moon bounding box to the unit square, then to pixels.
            let u = ((x + 1.5) / 4.0).clamp(0.0, 1.0);
            let v = ((y + 1.0) / 2.5).clamp(0.0, 1.0);
            let cx = u * (s - 1) as f64;
            let cy = (1.0 - v) * (s - 1) as f64;
            for i in 0..s {
                for j in 0..s {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    data.push((-d2 / (2.0 * radius * radius)).exp());
                }
            }
            labels.push(class);
        }
    }
    let images = TensorValue::new(vec![2 * n_per_class, 1, s, s], data)?;
    Dataset::new("two_moons_raster", "train", images, labels, 2)
}

/// Gaussian clusters on a square grid; each image encodes its sampled 2-D
/// coordinate as an intensity pair (left half = x, right half = y).
fn gen_gaussian_grid(
    n_per_class: usize,
    s: usize,
    opts: SyntheticOptions,
    rng: &mut Stream,
) -> Result<Dataset> {
    let classes = opts.num_classes.unwrap_or(4);
    if classes == 0 {
        return Err(Error::invalid("num_classes", "must be at least 1"));
    }
    let side = (classes as f64).sqrt().ceil() as usize;
    let center = |c: usize| -> (f64, f64) {
        let gi = c / side;
        let gj = c % side;
        let pos = |g: usize| {
            if side == 1 {
                0.5
            } else {
                0.2 + 0.6 * g as f64 / (side - 1) as f64
            }
        };
        (pos(gj), pos(gi))
    };
    let half = s / 2;
    let mut data = Vec::with_capacity(classes * n_per_class * s * s);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        let (cx, cy) = center(class);
        for _ in 0..n_per_class {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let x = (cx + opts.noise_std * nx).clamp(0.0, 1.0);
            let y = (cy + opts.noise_std * ny).clamp(0.0, 1.0);
            for _i in 0..s {
                for j in 0..s {
                    data.push(if j < half { x } else { y });
                }
            }
            labels.push(class);
        }
    }
    let images = TensorValue::new(vec![classes * n_per_class, 1, s, s], data)?;
    Dataset::new("gaussian_grid_raster", "train", images, labels, classes)
}

/// Number of oriented bar classes the generator can draw.
pub const BAR_PATTERN_KINDS: usize = 6;

fn gen_bar_patterns(
    n_per_class: usize,
    s: usize,
    opts: SyntheticOptions,
    rng: &mut Stream,
) -> Result<Dataset> {
    let classes = opts.num_classes.unwrap_or(4);
    if classes == 0 || classes > BAR_PATTERN_KINDS {
        return Err(Error::invalid(
            "num_classes",
            format!("bar_patterns supports 1..={BAR_PATTERN_KINDS} classes"),
        ));
    }
    let th = (s / 6).max(1);
    if opts.jitter > s / 4 {
        return Err(Error::invalid("jitter", "must be at most image_size / 4"));
    }
    let mut data = Vec::with_capacity(classes * n_per_class * s * s);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        for _ in 0..n_per_class {
            let shift = |rng: &mut Stream| -> i64 {
                if opts.jitter == 0 {
                    0
                } else {
                    rng.gen_range(-(opts.jitter as i64)..=opts.jitter as i64)
                }
            };
            let d1 = shift(rng);
            let d2 = shift(rng);
            let mid = (s / 2) as i64;
            let on = |i: usize, j: usize| -> bool {
                let (i, j) = (i as i64, j as i64);
                let band = |v: i64, c: i64| v >= c - (th as i64 - 1) / 2 && v < c + (th as i64 + 1) / 2;
                match class {
                    0 => band(i, mid + d1),
                    1 => band(j, mid + d1),
                    2 => (i - j - d1).abs() < th as i64,
                    3 => (i + j - (s as i64 - 1) - d1).abs() < th as i64,
                    4 => band(i, mid + d1) || band(j, mid + d2),
                    _ => {
                        let inset = d1.clamp(0, (s / 4) as i64);
                        let lo = inset;
                        let hi = s as i64 - 1 - inset;
                        let inner = i >= lo && i <= hi && j >= lo && j <= hi;
                        let ring = i < lo + th as i64
                            || i > hi - th as i64
                            || j < lo + th as i64
                            || j > hi - th as i64;
                        inner && ring
                    }
                }
            };
            for i in 0..s {
                for j in 0..s {
                    let base = if on(i, j) { 1.0 } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((base + opts.noise_std * noise).clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let images = TensorValue::new(vec![classes * n_per_class, 1, s, s], data)?;
    Dataset::new("bar_patterns", "train", images, labels, classes)
}

/// Constant-intensity images, an out-of-distribution foil.
pub fn gen_constant_images(n: usize, shape: [usize; 3], value: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid("value", "must lie in [0, 1]"));
    }
    let images = TensorValue::full(vec![n, shape[0], shape[1], shape[2]], value);
    Dataset::new("constant_images", "ood", images, vec![0; n], 1)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                "idx",
                format!(
                    "truncated at byte {}: needed {} more bytes",
                    self.bytes.len(),
                    self.pos + n - self.bytes.len()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let mut b = self.take(4)?;
        Ok(b.read_u32::<BigEndian>().expect("4 bytes"))
    }
}

/// Load an IDX image/label pair, scaling pixels by 1/255. `target_size`
/// center-crops and downscales by area averaging when given.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    target_size: Option<usize>,
) -> Result<Dataset> {
    let image_bytes = std::fs::read(&images_path)?;
    let label_bytes = std::fs::read(&labels_path)?;

    let mut r = IdxReader::new(&image_bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "idx",
            format!("bad magic in image file: got 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format("idx", "zero extent in image header".to_string()));
    }
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("idx", "image extent overflow".to_string()))?;
    let pixels = r.take(total)?;

    let mut lr = IdxReader::new(&label_bytes);
    let lmagic = lr.u32_be()?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "idx",
            format!("bad magic in label file: got 0x{lmagic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let ln = lr.u32_be()? as usize;
    if ln != n {
        return Err(Error::format(
            "idx",
            format!("count mismatch: {n} images but {ln} labels"),
        ));
    }
    let raw_labels = lr.take(n)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;

    let (h, w, data) = match target_size {
        None => {
            let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
            (rows, cols, data)
        }
        Some(t) => {
            if t == 0 || t > rows.min(cols) {
                return Err(Error::invalid(
                    "target_size",
                    format!("must lie in 1..={}", rows.min(cols)),
                ));
            }
            // Center-crop to the largest multiple of t, then average blocks.
            let scale = rows.min(cols) / t;
            let crop = scale * t;
            let (off_r, off_c) = ((rows - crop) / 2, (cols - crop) / 2);
            let mut data = Vec::with_capacity(n * t * t);
            for img in 0..n {
                let base = img * rows * cols;
                for bi in 0..t {
                    for bj in 0..t {
                        let mut acc = 0.0;
                        for di in 0..scale {
                            for dj in 0..scale {
                                let r = off_r + bi * scale + di;
                                let c = off_c + bj * scale + dj;
                                acc += pixels[base + r * cols + c] as f64;
                            }
                        }
                        data.push(acc / (scale * scale) as f64 / 255.0);
                    }
                }
            }
            (t, t, data)
        }
    };
    let images = TensorValue::new(vec![n, 1, h, w], data)?;
    Dataset::new("idx", "train", images, labels, num_classes)
}

/// Structural description of a model, enough to rebuild it before restoring
/// parameters from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: String,
    pub encoder: EncoderConfig,
    pub stat_head_scale: f64,
    pub components: usize,
}

impl ModelSpec {
    pub fn of(model: &Model) -> Self {
        let (scale, components) = match model {
            Model::Cebm(m) => (m.stat_head_scale(), 0),
            Model::Gmm(m) => (m.stat_head_scale(), m.components()),
            Model::Baseline(_) => (1.0, 0),
        };
        Self {
            kind: model.kind_tag().to_string(),
            encoder: model.encoder().clone(),
            stat_head_scale: scale,
            components,
        }
    }

    pub fn instantiate(&self) -> Result<Model> {
        match self.kind.as_str() {
            "cebm" => Ok(Model::Cebm(CebmModel::new(
                self.encoder.clone(),
                self.stat_head_scale,
                0,
            )?)),
            "gmm-cebm" => Ok(Model::Gmm(GmmCebmModel::new(
                self.encoder.clone(),
                self.components,
                self.stat_head_scale,
                0,
            )?)),
            "baseline-ebm" => Ok(Model::Baseline(BaselineEbm::new(self.encoder.clone(), 0)?)),
            other => Err(Error::format("checkpoint", format!("unknown model kind {other}"))),
        }
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CEBM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state. All multi-byte fields are little-endian; the
/// parameter payload is raw f64 bits so round trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub model_spec: String,
    pub config_echo: String,
    pub params: Vec<(String, TensorValue)>,
}

impl Checkpoint {
    pub fn of_model(model: &Model, step: u64, seed: u64, config_echo: impl Into<String>) -> Result<Self> {
        let spec = ModelSpec::of(model);
        let model_spec = serde_json::to_string(&spec)
            .map_err(|e| Error::format("checkpoint", format!("model spec encode: {e}")))?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            kind: model.kind_tag().to_string(),
            step,
            seed,
            model_spec,
            config_echo: config_echo.into(),
            params: model
                .params()
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
        })
    }

    /// Rebuild the model this checkpoint describes and restore every tensor.
    pub fn instantiate(&self) -> Result<Model> {
        let spec: ModelSpec = serde_json::from_str(&self.model_spec)
            .map_err(|e| Error::format("checkpoint", format!("model spec decode: {e}")))?;
        if spec.kind != self.kind {
            return Err(Error::format(
                "checkpoint",
                format!("kind tag {} does not match spec kind {}", self.kind, spec.kind),
            ));
        }
        let mut model = spec.instantiate()?;
        model.params_mut().restore(&self.params)?;
        Ok(model)
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &ckpt.params {
        if !seen.insert(name.clone()) {
            return Err(Error::format(
                "checkpoint",
                format!("duplicate parameter name {name}"),
            ));
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(ckpt.version)?;
    write_string(&mut buf, &ckpt.kind)?;
    buf.write_u64::<LittleEndian>(ckpt.step)?;
    buf.write_u64::<LittleEndian>(ckpt.seed)?;
    write_string(&mut buf, &ckpt.model_spec)?;
    write_string(&mut buf, &ckpt.config_echo)?;
    buf.write_u32::<LittleEndian>(ckpt.params.len() as u32)?;
    for (name, tensor) in &ckpt.params {
        write_string(&mut buf, name)?;
        buf.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
        for &e in tensor.shape() {
            buf.write_u64::<LittleEndian>(e as u64)?;
        }
        for &v in tensor.data() {
            buf.write_u64::<LittleEndian>(v.to_bits())?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct CkptReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl CkptReader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos.checked_add(n).map_or(true, |end| end > self.bytes.len()) {
            return Err(Error::format(
                "checkpoint",
                format!("truncated at byte {}: needed {n} more bytes", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.to_vec().as_slice().read_u32::<LittleEndian>()?)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(self.take(8)?.to_vec().as_slice().read_u64::<LittleEndian>()?)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format("checkpoint", format!("invalid UTF-8 at byte {}", self.pos)))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = CkptReader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            "checkpoint",
            format!("bad magic {magic:02x?}, want {CHECKPOINT_MAGIC:02x?}"),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let kind = r.string()?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let model_spec = r.string()?;
    let config_echo = r.string()?;
    let count = r.u32()? as usize;
    // Plausibility-bound declared sizes by the bytes actually present, so a
    // corrupted header cannot drive allocation.
    if count > r.remaining() / 8 {
        return Err(Error::format(
            "checkpoint",
            format!(
                "truncated at byte {}: parameter count {count} exceeds the remaining payload",
                r.pos
            ),
        ));
    }
    let mut params = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name = r.string()?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(
                "checkpoint",
                format!("duplicate parameter name {name}"),
            ));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::format("checkpoint", format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u64()? as usize;
            numel = numel.checked_mul(e).ok_or_else(|| {
                Error::format("checkpoint", "tensor extent overflow".to_string())
            })?;
            shape.push(e);
        }
        if numel > r.remaining() / 8 {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "truncated at byte {}: tensor {name} declares {numel} values beyond the remaining payload",
                    r.pos
                ),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        params.push((name, TensorValue::new(shape, data)?));
    }
    if r.pos != r.bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes after parameter table", r.bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        version,
        kind,
        step,
        seed,
        model_spec,
        config_echo,
        params,
    })
}

/// Write a [N,C,H,W] batch as an 8-bit PGM (C=1) or PPM (C=3) tile grid.
/// The single comment line records the training step and seed; nothing else
/// in the payload varies between identical runs.
pub fn export_samples(
    path: impl AsRef<Path>,
    batch: &TensorValue,
    grid_cols: usize,
    step: u64,
    seed: u64,
) -> Result<()> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "export_samples",
            "[N,C,H,W] batch".to_string(),
            format!("{shape:?}"),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::invalid("channels", "export supports 1 or 3 channels"));
    }
    if grid_cols == 0 {
        return Err(Error::invalid("grid_cols", "must be at least 1"));
    }
    let cols = grid_cols.min(n);
    let rows = n.div_ceil(cols);
    let (out_h, out_w) = (rows * h, cols * w);
    let mut payload = vec![0u8; out_h * out_w * c];
    for img in 0..n {
        let (gr, gc) = (img / cols, img % cols);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = batch.data()[((img * c + ch) * h + i) * w + j];
                    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    let (oi, oj) = (gr * h + i, gc * w + j);
                    payload[(oi * out_w + oj) * c + ch] = q;
                }
            }
        }
    }
    let tag = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(payload.len() + 64);
    out.extend_from_slice(format!("{tag}\n# step {step} seed {seed}\n{out_w} {out_h}\n255\n").as_bytes());
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

/// Write metric rows as CSV with a header line. Values are emitted with
/// full round-trip precision.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::shape(
                "write_csv",
                format!("{} columns", header.len()),
                format!("{}", row.len()),
            ));
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

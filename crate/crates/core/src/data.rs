//! Labeled image sets, the toy generator, class-conditional sampling, and the
//! learnable synthetic set.
//!
//! Raw pixels live in `[0, 1]` and are stored at f32 precision so that a
//! dataset written to disk and read back is bitwise identical. Everything the
//! networks see is normalized per channel with the dataset's own statistics.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format::{read_file, Decoder, Encoder};
use crate::rng::Stream;
use crate::tensor::kernels::pairwise_sum;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"TGDDDATA";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_REAL_BATCH: usize = 64;

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation of every channel.
    pub fn compute(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        let mut buf = Vec::with_capacity(n * hw);
        for ch in 0..c {
            buf.clear();
            for i in 0..n {
                buf.extend_from_slice(&images.data()[(i * c + ch) * hw..][..hw]);
            }
            let m = pairwise_sum(&buf) / buf.len() as f64;
            let sq: Vec<f64> = buf.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (pairwise_sum(&sq) / buf.len() as f64).sqrt();
            mean.push(m);
            // constant channels normalize to zero rather than dividing by zero
            std.push(if sd > 0.0 { sd } else { 1.0 });
        }
        NormStats { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, images: &Tensor, forward: bool) -> Tensor {
        let s = images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (p, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let (m, sd) = (self.mean[p % c], self.std[p % c]);
            for v in plane {
                *v = if forward { (*v - m) / sd } else { *v * sd + m };
            }
        }
        out
    }

    pub fn normalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, true)
    }

    pub fn denormalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, false)
    }
}

fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// A labeled image set `T = {(x_i, y_i)}`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    normalized: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    stats: NormStats,
    class_index: Vec<Vec<usize>>,
}

impl LabeledDataset {
    /// Builds a dataset and computes its normalization statistics.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let images = quantize_f32(&images);
        let stats = NormStats::compute(&images);
        Self::assemble(images, labels, num_classes, stats)
    }

    /// Builds a dataset normalized with externally supplied statistics, e.g.
    /// a test split normalized like its training split.
    pub fn with_stats(images: Tensor, labels: Vec<usize>, num_classes: usize, stats: NormStats) -> Result<Self> {
        Self::assemble(quantize_f32(&images), labels, num_classes, stats)
    }

    fn assemble(images: Tensor, labels: Vec<usize>, num_classes: usize, stats: NormStats) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N,C,H,W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if stats.mean.len() != s[1] || stats.std.len() != s[1] {
            return Err(Error::Shape(format!("normalization stats do not cover {} channels", s[1])));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::LabelRange { label: y, num_classes });
            }
            class_index[y].push(i);
        }
        let normalized = stats.normalize(&images);
        Ok(LabeledDataset {
            images,
            normalized,
            labels,
            num_classes,
            stats,
            class_index,
        })
    }

    /// Same pixels, normalized with `stats`.
    pub fn renormalized(&self, stats: NormStats) -> Result<Self> {
        Self::assemble(self.images.clone(), self.labels.clone(), self.num_classes, stats)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Raw pixels in `[0, 1]`.
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn class_index(&self, class: usize) -> Option<&[usize]> {
        self.class_index.get(class).map(|v| v.as_slice())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::assemble(images, labels, self.num_classes, self.stats.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_dataset(&self.images, &self.labels, self.num_classes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (images, labels, num_classes) = decode_dataset(bytes)?;
        Self::new(images, labels, num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub(crate) fn encode_dataset(images: &Tensor, labels: &[usize], num_classes: usize) -> Vec<u8> {
    let s = images.shape();
    let mut enc = Encoder::new();
    enc.bytes(DATASET_MAGIC);
    enc.u32(DATASET_VERSION);
    for v in [s[0], s[1], s[2], s[3], num_classes] {
        enc.u32(v as u32);
    }
    for &y in labels {
        enc.u32(y as u32);
    }
    enc.f32s(images.data().iter().map(|&v| v as f32));
    enc.finish()
}

pub(crate) fn decode_dataset(bytes: &[u8]) -> Result<(Tensor, Vec<usize>, usize)> {
    let mut dec = Decoder::new(bytes, "dataset");
    dec.magic(DATASET_MAGIC)?;
    dec.version(DATASET_VERSION)?;
    let mut f = [0usize; 5];
    for v in f.iter_mut() {
        *v = dec.u32()? as usize;
    }
    let [n, c, h, w, num_classes] = f;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate image shape {c}x{h}x{w}")));
    }
    if num_classes < 2 {
        return Err(Error::Format(format!("dataset declares {num_classes} classes")));
    }
    let labels = (0..n).map(|_| dec.u32().map(|y| y as usize)).collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelRange { label: bad, num_classes });
    }
    let pixels = dec.f32s(n * c * h * w)?;
    dec.finish()?;
    let images = Tensor::new(vec![n, c, h, w], pixels.into_iter().map(f64::from).collect())?;
    Ok((images, labels, num_classes))
}

/// Parameters of the sinusoid toy dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_std: f64,
}

impl ToySpec {
    pub fn new(num_classes: usize, per_class: usize, size: (usize, usize), channels: usize) -> Self {
        ToySpec {
            num_classes,
            per_class,
            height: size.0,
            width: size.1,
            channels,
            noise_std: 0.15,
        }
    }
}

/// Class `c` is a plane wave with `1 + c` cycles across the image at
/// orientation `c * pi / num_classes`, with a random phase per sample and
/// Gaussian pixel noise, clipped to `[0, 1]`. Samples are class-major.
pub fn generate_toy_dataset(spec: &ToySpec, seed: u64) -> Result<LabeledDataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config("toy dataset needs at least 2 classes".into()));
    }
    if spec.per_class == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut phase_rng = Stream::new(seed, "toy/phase");
    let mut noise_rng = Stream::new(seed, "toy/noise");
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let n = spec.num_classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * ch * h * w);
    let mut labels = Vec::with_capacity(n);
    let tau = 2.0 * std::f64::consts::PI;
    for c in 0..spec.num_classes {
        let freq = 1.0 + c as f64;
        let theta = c as f64 * std::f64::consts::PI / spec.num_classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        for _ in 0..spec.per_class {
            let phase = phase_rng.uniform_in(0.0, tau);
            for _ in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        let u = ct * x as f64 / w as f64 + st * y as f64 / h as f64;
                        let base = 0.5 + 0.5 * (tau * freq * u + phase).sin();
                        let noise = if spec.noise_std > 0.0 {
                            spec.noise_std * noise_rng.normal()
                        } else {
                            0.0
                        };
                        pixels.push((base + noise).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, ch, h, w], pixels)?, labels, spec.num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Real,
    Synthetic,
}

/// Images of a single class.
#[derive(Debug, Clone)]
pub struct ClassBatch {
    pub class: usize,
    pub images: Tensor,
    pub source: BatchSource,
}

/// Draws `b` normalized images of class `c`: without replacement when the
/// class is large enough, with replacement otherwise.
pub fn sample_class_batch(dataset: &LabeledDataset, class: usize, b: usize, stream: &mut Stream) -> Result<ClassBatch> {
    let pool = dataset.class_index(class).ok_or(Error::UnknownClass(class))?;
    if pool.is_empty() {
        return Err(Error::Config(format!("class {class} has no samples")));
    }
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let picks: Vec<usize> = stream.choose_indices(pool.len(), b).into_iter().map(|k| pool[k]).collect();
    Ok(ClassBatch {
        class,
        images: dataset.normalized().select_rows(&picks)?,
        source: BatchSource::Real,
    })
}

/// The optimization variable: `ipc * num_classes` storage slots in normalized
/// pixel space, class-major, with fixed labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub storage: Tensor,
    labels: Vec<usize>,
    ipc: usize,
    num_classes: usize,
    rho: usize,
    stats: NormStats,
}

impl SyntheticSet {
    pub fn new(storage: Tensor, ipc: usize, num_classes: usize, rho: usize, stats: NormStats) -> Result<Self> {
        let s = storage.shape();
        if ipc < 1 {
            return Err(Error::Config("images per class must be at least 1".into()));
        }
        if rho < 1 {
            return Err(Error::Config("multiformation factor must be at least 1".into()));
        }
        if s.len() != 4 || s[0] != ipc * num_classes {
            return Err(Error::Shape(format!(
                "storage {s:?} does not hold {ipc} slots for each of {num_classes} classes"
            )));
        }
        if s[2] % rho != 0 || s[3] % rho != 0 {
            return Err(Error::Config(format!("image size {}x{} not divisible by rho={rho}", s[2], s[3])));
        }
        if stats.mean.len() != s[1] {
            return Err(Error::Shape("normalization stats do not match channel count".into()));
        }
        let labels = (0..num_classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
        Ok(SyntheticSet {
            storage,
            labels,
            ipc,
            num_classes,
            rho,
            stats,
        })
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// Label of every storage slot.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_slots(&self, class: usize) -> Range<usize> {
        class * self.ipc..(class + 1) * self.ipc
    }

    pub fn channels(&self) -> usize {
        self.storage.shape()[1]
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.storage.shape()[2], self.storage.shape()[3])
    }

    /// Writes the set as a dataset file of denormalized slots, plus a sidecar
    /// with the multiformation factor, the normalization statistics, and any
    /// `extra` provenance lines.
    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let raw = self.stats.denormalize(&self.storage);
        let bytes = encode_dataset(&raw, &self.labels, self.num_classes);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let mut meta = String::new();
        let _ = writeln!(meta, "version=1");
        let _ = writeln!(meta, "rho={}", self.rho);
        let _ = writeln!(meta, "ipc={}", self.ipc);
        let _ = writeln!(meta, "num_classes={}", self.num_classes);
        let _ = writeln!(meta, "norm_mean={}", join_f64(&self.stats.mean));
        let _ = writeln!(meta, "norm_std={}", join_f64(&self.stats.std));
        for (k, v) in extra {
            let _ = writeln!(meta, "{k}={v}");
        }
        let side = sidecar_path(path);
        std::fs::write(&side, meta).map_err(|e| Error::io(side, e))
    }

    /// Loads a set written by [`SyntheticSet::save`]. Pixels come back at f32
    /// precision.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("sidecar {} lacks `{k}`", side.display())))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("sidecar `{k}` is not an integer")))
        };
        let rho = num("rho")?;
        let ipc = num("ipc")?;
        let stats = NormStats {
            mean: split_f64(get("norm_mean")?)?,
            std: split_f64(get("norm_std")?)?,
        };
        let (images, labels, num_classes) = decode_dataset(&read_file(path)?)?;
        if num_classes != num("num_classes")? {
            return Err(Error::Format("sidecar class count disagrees with the data file".into()));
        }
        let set = SyntheticSet::new(stats.normalize(&images), ipc, num_classes, rho, stats)?;
        if set.labels != labels {
            return Err(Error::Format("synthetic labels are not class-major".into()));
        }
        Ok(set)
    }
}

/// `synthetic.tgdd` -> `synthetic.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Format(format!("bad number `{p}`"))))
        .collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Block-average downscale of one `c x h x w` image by an integer factor.
pub fn area_downscale(image: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        s += image[(ch * h + y) * w + x];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = s / norm;
            }
        }
    }
    out
}

/// Initializes each class's slots from randomly chosen real images of that
/// class. With `rho > 1`, each slot tiles `rho^2` real images, each
/// area-downscaled by `rho`, in row-major grid order.
pub fn init_synthetic(dataset: &LabeledDataset, ipc: usize, rho: usize, stream: &mut Stream) -> Result<SyntheticSet> {
    if ipc < 1 {
        return Err(Error::Config("images per class must be at least 1".into()));
    }
    if rho < 1 {
        return Err(Error::Config("multiformation factor must be at least 1".into()));
    }
    let (c, (h, w)) = (dataset.channels(), dataset.image_hw());
    if h % rho != 0 || w % rho != 0 {
        return Err(Error::Config(format!("image size {h}x{w} not divisible by rho={rho}")));
    }
    let img = c * h * w;
    let per_slot = rho * rho;
    let (sh, sw) = (h / rho, w / rho);
    let mut storage = vec![0.0; dataset.num_classes() * ipc * img];
    for class in 0..dataset.num_classes() {
        let pool = dataset.class_index(class).unwrap_or(&[]);
        if pool.is_empty() {
            return Err(Error::Config(format!("class {class} has no samples to initialize from")));
        }
        let picks = stream.choose_indices(pool.len(), ipc * per_slot);
        for slot in 0..ipc {
            let dst = &mut storage[(class * ipc + slot) * img..][..img];
            for g in 0..per_slot {
                let src_idx = pool[picks[slot * per_slot + g]];
                let src = &dataset.normalized().data()[src_idx * img..][..img];
                if rho == 1 {
                    dst.copy_from_slice(src);
                    continue;
                }
                let small = area_downscale(src, c, h, w, rho);
                let (gy, gx) = (g / rho, g % rho);
                for ch in 0..c {
                    for y in 0..sh {
                        for x in 0..sw {
                            dst[(ch * h + gy * sh + y) * w + gx * sw + x] = small[(ch * sh + y) * sw + x];
                        }
                    }
                }
            }
        }
    }
    let storage = Tensor::new(vec![dataset.num_classes() * ipc, c, h, w], storage)?;
    SyntheticSet::new(storage, ipc, dataset.num_classes(), rho, dataset.stats().clone())
}

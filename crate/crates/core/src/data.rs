//! RGB-D datasets on disk (binary netpbm files plus an index), procedural
//! synthetic scenes, normalization and hole masks.
//!
//! Masks use `1` for known pixels and `0` for holes throughout.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::MaskRect;
use crate::tensor::{Element, Tensor};

/// Depth normalization constant used for synthetic scenes.
pub const DEFAULT_DMAX: f64 = 10.0;
pub const INDEX_FILE: &str = "index.txt";
const DEPTH_LEVELS: f64 = 65535.0;

// ---------------------------------------------------------------------------
// netpbm

/// A decoded netpbm raster: `channels` interleaved samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster<S> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    pub samples: Vec<S>,
}

fn netpbm_err(e: impl std::fmt::Display) -> Error {
    Error::Netpbm(e.to_string())
}

fn open_decoder(bytes: &[u8], want: PnmSubtype) -> Result<PnmDecoder<&[u8]>> {
    let dec = PnmDecoder::new(bytes).map_err(netpbm_err)?;
    if dec.subtype() != want {
        return Err(Error::Netpbm(format!(
            "expected binary {} file, found {:?}",
            if matches!(want, PnmSubtype::Pixmap(_)) { "P6" } else { "P5" },
            dec.subtype()
        )));
    }
    Ok(dec)
}

/// Decodes a binary P6 file with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Raster<u8>> {
    let dec = open_decoder(bytes, PnmSubtype::Pixmap(SampleEncoding::Binary))?;
    let maxval = dec.header().maximal_sample();
    if maxval != 255 {
        return Err(Error::Netpbm(format!("PPM maxval must be 255, found {maxval}")));
    }
    let (w, h) = dec.dimensions();
    let mut samples = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut samples).map_err(netpbm_err)?;
    Ok(Raster { width: w as usize, height: h as usize, channels: 3, maxval, samples })
}

/// Decodes a binary P5 file with maxval 255 or 65535 (16-bit samples are
/// big-endian on disk).
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster<u16>> {
    let dec = open_decoder(bytes, PnmSubtype::Graymap(SampleEncoding::Binary))?;
    let maxval = dec.header().maximal_sample();
    let (w, h) = dec.dimensions();
    let samples = match maxval {
        255 => {
            let mut buf = vec![0u8; dec.total_bytes() as usize];
            dec.read_image(&mut buf).map_err(netpbm_err)?;
            buf.into_iter().map(u16::from).collect()
        }
        65535 => {
            let mut buf = vec![0u8; dec.total_bytes() as usize];
            dec.read_image(&mut buf).map_err(netpbm_err)?;
            buf.chunks_exact(2).map(|c| u16::from_ne_bytes([c[0], c[1]])).collect()
        }
        other => return Err(Error::Netpbm(format!("PGM maxval must be 255 or 65535, found {other}"))),
    };
    Ok(Raster { width: w as usize, height: h as usize, channels: 1, maxval, samples })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Netpbm(format!("{} samples for a {width}x{height} RGB image", rgb.len())));
    }
    let mut out = Vec::with_capacity(rgb.len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .encode(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .map_err(netpbm_err)?;
    Ok(out)
}

pub fn encode_pgm8(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::Netpbm(format!("{} samples for a {width}x{height} gray image", gray.len())));
    }
    let mut out = Vec::with_capacity(gray.len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(gray, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(netpbm_err)?;
    Ok(out)
}

pub fn encode_pgm16(width: usize, height: usize, gray: &[u16]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::Netpbm(format!("{} samples for a {width}x{height} gray image", gray.len())));
    }
    let header = GraymapHeader {
        encoding: SampleEncoding::Binary,
        height: height as u32,
        width: width as u32,
        maxwhite: 65535,
    };
    let mut out = Vec::with_capacity(2 * gray.len() + 20);
    PnmEncoder::new(&mut out)
        .with_header(header.into())
        .encode(gray, width as u32, height as u32, ExtendedColorType::L16)
        .map_err(netpbm_err)?;
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Netpbm(format!("{}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<Raster<u8>> {
    decode_ppm(&read_bytes(path)?).map_err(|e| Error::Netpbm(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<Raster<u16>> {
    decode_pgm(&read_bytes(path)?).map_err(|e| Error::Netpbm(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// samples

/// One square RGB-D image in raw units: `rgb` is row-major `S x S x 3` in
/// `[0, 255]`, `depth` is row-major `S x S` in `[0, d_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    pub source: String,
    pub size: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RgbdSample {
    pub fn validate(&self) -> Result<()> {
        let s = self.size;
        if self.rgb.len() != s * s * 3 || self.depth.len() != s * s {
            return Err(Error::Dataset(format!("sample {} has inconsistent buffer sizes", self.id)));
        }
        Ok(())
    }
}

/// Normalized channel-major planes: `rgb` is `3 x S x S`, `depth` is `S x S`,
/// both in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub size: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

impl NormalizedSample {
    /// `(1, 3, S, S)` and `(1, 1, S, S)` tensors.
    pub fn tensors<T: Element>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.size;
        Ok((
            Tensor::from_f64s(&self.rgb, &[1, 3, s, s])?,
            Tensor::from_f64s(&self.depth, &[1, 1, s, s])?,
        ))
    }
}

/// `rgb / 127.5 - 1` and `2 depth / d_max - 1`, reordered to channel-major.
pub fn normalize(sample: &RgbdSample, d_max: f64) -> Result<NormalizedSample> {
    sample.validate()?;
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(Error::invalid(format!("d_max must be positive, got {d_max}")));
    }
    if sample.rgb.iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::Dataset(format!("sample {}: rgb outside [0, 255]", sample.id)));
    }
    if sample.depth.iter().any(|v| !(0.0..=d_max).contains(v)) {
        return Err(Error::Dataset(format!("sample {}: depth outside [0, {d_max}]", sample.id)));
    }
    let n = sample.size * sample.size;
    let mut rgb = vec![0.0; 3 * n];
    for (p, px) in sample.rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            rgb[c * n + p] = px[c] / 127.5 - 1.0;
        }
    }
    let depth = sample.depth.iter().map(|d| 2.0 * d / d_max - 1.0).collect();
    Ok(NormalizedSample { size: sample.size, rgb, depth })
}

/// Inverse of [`normalize`] for one image of a `(B, 3, S, S)` / `(B, 1, S, S)`
/// batch. No clamping is applied.
pub fn denormalize<T: Element>(rgb: &Tensor<T>, depth: &Tensor<T>, index: usize, d_max: f64, id: &str) -> Result<RgbdSample> {
    let (b, s) = match rgb.shape() {
        [b, 3, h, w] if h == w => (*b, *h),
        other => return Err(Error::shape("denormalize", other, &[1, 3, 0, 0])),
    };
    if depth.shape() != [b, 1, s, s] {
        return Err(Error::shape("denormalize", depth.shape(), &[b, 1, s, s]));
    }
    if index >= b {
        return Err(Error::invalid(format!("batch index {index} out of range for batch of {b}")));
    }
    let n = s * s;
    let planes = &rgb.data()[index * 3 * n..(index + 1) * 3 * n];
    let mut out = vec![0.0; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            out[p * 3 + c] = (planes[c * n + p].as_f64() + 1.0) * 127.5;
        }
    }
    let depth = depth.data()[index * n..(index + 1) * n]
        .iter()
        .map(|v| (v.as_f64() + 1.0) * d_max / 2.0)
        .collect();
    Ok(RgbdSample {
        id: id.to_string(),
        source: "prediction".into(),
        size: s,
        rgb: out,
        depth,
    })
}

pub fn rgb_to_bytes(rgb: &[f64]) -> Vec<u8> {
    rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

pub fn depth_to_levels(depth: &[f64], d_max: f64) -> Vec<u16> {
    depth
        .iter()
        .map(|d| (d * DEPTH_LEVELS / d_max).round().clamp(0.0, DEPTH_LEVELS) as u16)
        .collect()
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRect {
    pub rect: MaskRect,
    pub color: [u8; 3],
    pub depth: f64,
}

/// Parameters of a procedural scene; [`SceneLayout::render`] rasterizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub size: usize,
    pub d_max: f64,
    /// Background depth at the top and bottom rows.
    pub depth_top: f64,
    pub depth_bottom: f64,
    /// Background colour at the left and right columns.
    pub color_left: [u8; 3],
    pub color_right: [u8; 3],
    pub rects: Vec<SceneRect>,
}

impl SceneLayout {
    pub fn background_depth(&self, y: usize) -> f64 {
        let t = y as f64 / (self.size - 1) as f64;
        self.depth_top + (self.depth_bottom - self.depth_top) * t
    }

    pub fn background_color(&self, x: usize) -> [u8; 3] {
        let t = x as f64 / (self.size - 1) as f64;
        let mut c = [0u8; 3];
        for k in 0..3 {
            let (a, b) = (self.color_left[k] as f64, self.color_right[k] as f64);
            c[k] = (a + (b - a) * t).round() as u8;
        }
        c
    }

    pub fn render(&self) -> RgbdSample {
        let s = self.size;
        let mut rgb = Vec::with_capacity(s * s * 3);
        let mut depth = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let nearest = self
                    .rects
                    .iter()
                    .filter(|r| r.rect.contains(y, x))
                    .min_by(|a, b| a.depth.total_cmp(&b.depth));
                let (c, d) = match nearest {
                    Some(r) => (r.color, r.depth),
                    None => (self.background_color(x), self.background_depth(y)),
                };
                rgb.extend(c.iter().map(|&v| v as f64));
                depth.push(d);
            }
        }
        RgbdSample {
            id: String::new(),
            source: "synthetic".into(),
            size: s,
            rgb,
            depth,
        }
    }
}

pub fn synth_layout(seed: u64, size: usize, d_max: f64) -> Result<SceneLayout> {
    if size < 16 {
        return Err(Error::invalid(format!("synthetic scenes need size >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth_top = d_max * rng.gen_range(0.85..0.95);
    let depth_bottom = d_max * rng.gen_range(0.5..0.7);
    let color_left: [u8; 3] = rng.gen();
    let color_right: [u8; 3] = rng.gen();
    let (lo, hi) = (size / 8, size / 2);
    let count = rng.gen_range(3..=6);
    let mut layout = SceneLayout {
        size,
        d_max,
        depth_top,
        depth_bottom,
        color_left,
        color_right,
        rects: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let height = rng.gen_range(lo..=hi);
        let width = rng.gen_range(lo..=hi);
        let top = rng.gen_range(0..=size - height);
        let left = rng.gen_range(0..=size - width);
        let rect = MaskRect { top, left, height, width };
        // nearer than the closest background row it covers
        let far = layout.background_depth(top + height - 1).min(layout.background_depth(top));
        let depth = rng.gen_range(0.1 * d_max..0.95 * far);
        layout.rects.push(SceneRect { rect, color: rng.gen(), depth });
    }
    Ok(layout)
}

/// Deterministic procedural RGB-D scene: a gradient background plane plus
/// 3 to 6 nearer rectangles with painter's-algorithm occlusion.
pub fn synth_scene(seed: u64, size: usize) -> Result<RgbdSample> {
    let mut sample = synth_layout(seed, size, DEFAULT_DMAX)?.render();
    sample.id = format!("scene_{seed}");
    Ok(sample)
}

/// Seed of the `index`-th scene of a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5ce7e);
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

// ---------------------------------------------------------------------------
// datasets on disk

/// `root/index.txt` (header `dmax=<float>`, then one id per line),
/// `root/rgb/<id>.ppm`, `root/depth/<id>.pgm`, optional `root/mask/<id>.pgm`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub d_max: f64,
}

impl DatasetIndex {
    pub fn rgb_path(&self, id: &str) -> PathBuf {
        self.root.join("rgb").join(format!("{id}.ppm"))
    }

    pub fn depth_path(&self, id: &str) -> PathBuf {
        self.root.join("depth").join(format!("{id}.pgm"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("mask").join(format!("{id}.pgm"))
    }

    /// Parses the index and checks that every id has its RGB and depth files.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Dataset(format!("{}: empty index", path.display())))?;
        let d_max: f64 = header
            .strip_prefix("dmax=")
            .and_then(|v| v.trim().parse().ok())
            .filter(|v: &f64| *v > 0.0 && v.is_finite())
            .ok_or_else(|| Error::Dataset(format!("{}: bad header {header:?}, expected dmax=<float>", path.display())))?;
        let ids: Vec<String> = lines.map(str::to_string).collect();
        let index = DatasetIndex { root: root.to_path_buf(), ids, d_max };
        index.check()?;
        Ok(index)
    }

    fn check(&self) -> Result<()> {
        if !self.ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Dataset("index ids must be unique and sorted".into()));
        }
        for id in &self.ids {
            if id.contains(['/', '\\']) {
                return Err(Error::Dataset(format!("invalid sample id {id:?}")));
            }
            for (kind, p) in [("rgb", self.rgb_path(id)), ("depth", self.depth_path(id))] {
                if !p.is_file() {
                    return Err(Error::Dataset(format!("sample {id}: missing {kind} file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Creates the directory layout and writes `index.txt` for `ids`.
    pub fn create(root: &Path, mut ids: Vec<String>, d_max: f64) -> Result<Self> {
        ids.sort();
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Dataset("duplicate sample ids".into()));
        }
        fs::create_dir_all(root.join("rgb"))?;
        fs::create_dir_all(root.join("depth"))?;
        let mut text = format!("dmax={d_max}\n");
        for id in &ids {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(root.join(INDEX_FILE), text)?;
        Ok(DatasetIndex { root: root.to_path_buf(), ids, d_max })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn read_sample(index: &DatasetIndex, id: &str) -> Result<RgbdSample> {
    let rgb = read_ppm(&index.rgb_path(id)).map_err(|e| Error::Dataset(format!("sample {id}: {e}")))?;
    let depth = read_pgm(&index.depth_path(id)).map_err(|e| Error::Dataset(format!("sample {id}: {e}")))?;
    sample_from_rasters(id, &index.root.display().to_string(), &rgb, &depth, index.d_max)
}

/// Combines an 8-bit RGB raster and a 16-bit depth raster (levels spread over
/// `[0, d_max]`) into a raw sample.
pub fn sample_from_rasters(id: &str, source: &str, rgb: &Raster<u8>, depth: &Raster<u16>, d_max: f64) -> Result<RgbdSample> {
    if rgb.width != rgb.height || depth.width != rgb.width || depth.height != rgb.height {
        return Err(Error::Dataset(format!(
            "sample {id}: rgb {}x{} and depth {}x{} must be equal squares",
            rgb.width, rgb.height, depth.width, depth.height
        )));
    }
    if depth.maxval != 65535 {
        return Err(Error::Dataset(format!("sample {id}: depth maxval must be 65535")));
    }
    Ok(RgbdSample {
        id: id.to_string(),
        source: source.to_string(),
        size: rgb.width,
        rgb: rgb.samples.iter().map(|&v| v as f64).collect(),
        depth: depth.samples.iter().map(|&v| v as f64 * d_max / DEPTH_LEVELS).collect(),
    })
}

/// Writes the sample's RGB and depth files under `root` (depth quantized to
/// 16 bits over `[0, d_max]`). The index file is not touched.
pub fn write_sample(sample: &RgbdSample, root: &Path, d_max: f64) -> Result<()> {
    sample.validate()?;
    let s = sample.size;
    fs::create_dir_all(root.join("rgb"))?;
    fs::create_dir_all(root.join("depth"))?;
    fs::write(
        root.join("rgb").join(format!("{}.ppm", sample.id)),
        encode_ppm(s, s, &rgb_to_bytes(&sample.rgb))?,
    )?;
    fs::write(
        root.join("depth").join(format!("{}.pgm", sample.id)),
        encode_pgm16(s, s, &depth_to_levels(&sample.depth, d_max))?,
    )?;
    Ok(())
}

/// Writes `count` synthetic scenes of side `size` as a complete dataset.
pub fn generate_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<DatasetIndex> {
    let width = count.saturating_sub(1).to_string().len().max(4);
    let ids: Vec<String> = (0..count).map(|i| format!("scene_{i:0width$}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let mut sample = synth_layout(scene_seed(seed, i), size, DEFAULT_DMAX)?.render();
        sample.id = id.clone();
        write_sample(&sample, root, DEFAULT_DMAX)?;
    }
    DatasetIndex::create(root, ids, DEFAULT_DMAX)
}

/// A fully loaded, normalized dataset of equally sized samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub size: usize,
    pub d_max: f64,
    pub samples: Vec<NormalizedSample>,
}

impl Dataset {
    pub fn from_samples(samples: &[RgbdSample], d_max: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let size = first.size;
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            if s.size != size {
                return Err(Error::Dataset(format!("sample {} is {} px, expected {size}", s.id, s.size)));
            }
            out.push(normalize(s, d_max)?);
        }
        Ok(Dataset {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            size,
            d_max,
            samples: out,
        })
    }

    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let samples = index.ids.iter().map(|id| read_sample(index, id)).collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, index.d_max)
    }

    /// In-memory synthetic dataset, identical to what [`generate_dataset`]
    /// followed by [`Dataset::load`] produces.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let width = count.saturating_sub(1).to_string().len().max(4);
        let samples = (0..count)
            .map(|i| {
                let mut s = synth_layout(scene_seed(seed, i), size, DEFAULT_DMAX)?.render();
                s.id = format!("scene_{i:0width$}");
                // same quantization as a disk round trip
                s.depth = depth_to_levels(&s.depth, DEFAULT_DMAX)
                    .into_iter()
                    .map(|v| v as f64 * DEFAULT_DMAX / DEPTH_LEVELS)
                    .collect();
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, DEFAULT_DMAX)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into `(B, 3, S, S)` and `(B, 1, S, S)`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.size;
        let mut rgb = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut depth = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
            rgb.extend(sample.rgb.iter().map(|&v| T::of(v)));
            depth.extend(sample.depth.iter().map(|&v| T::of(v)));
        }
        let b = indices.len();
        Ok((Tensor::from_vec(rgb, &[b, 3, s, s])?, Tensor::from_vec(depth, &[b, 1, s, s])?))
    }
}

// ---------------------------------------------------------------------------
// masks

/// Random hole rectangle: height and width independently uniform over
/// `[S/8, S/2]`, position uniform among placements that fit.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<MaskRect> {
    if size < 8 {
        return Err(Error::invalid(format!("mask sampling needs size >= 8, got {size}")));
    }
    let (lo, hi) = (size / 8, size / 2);
    let height = rng.gen_range(lo..=hi);
    let width = rng.gen_range(lo..=hi);
    let top = rng.gen_range(0..=size - height);
    let left = rng.gen_range(0..=size - width);
    Ok(MaskRect { top, left, height, width })
}

/// `(B, 1, S, S)` mask with zeros inside each sample's rectangle.
pub fn rect_masks<T: Element>(rects: &[MaskRect], size: usize) -> Result<Tensor<T>> {
    let n = size * size;
    let mut data = vec![T::one(); rects.len() * n];
    for (b, r) in rects.iter().enumerate() {
        if !r.fits(size) {
            return Err(Error::invalid(format!("mask {r:?} does not fit a {size}x{size} image")));
        }
        for y in r.top..r.top + r.height {
            let row = b * n + y * size;
            data[row + r.left..row + r.left + r.width].fill(T::zero());
        }
    }
    Tensor::from_vec(data, &[rects.len(), 1, size, size])
}

/// `z = x * m`: hole pixels become zero.
pub fn apply_mask<T: Element>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    x.mul(m)
}

/// A binary mask loaded from disk, possibly non-rectangular.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalMask {
    pub size: usize,
    /// Row-major, `1` known, `0` hole.
    pub known: Vec<f64>,
    /// Bounding box of the hole pixels, `None` when nothing is missing.
    pub bbox: Option<MaskRect>,
}

impl ExternalMask {
    pub fn from_known(size: usize, known: Vec<f64>) -> Result<Self> {
        if known.len() != size * size {
            return Err(Error::invalid("mask buffer does not match its size"));
        }
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, v) in known.iter().enumerate() {
            if *v == 0.0 {
                let (y, x) = (i / size, i % size);
                bounds = Some(match bounds {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
        let bbox = bounds.map(|(y0, y1, x0, x1)| MaskRect {
            top: y0,
            left: x0,
            height: y1 - y0 + 1,
            width: x1 - x0 + 1,
        });
        Ok(ExternalMask { size, known, bbox })
    }

    pub fn from_rect(size: usize, rect: MaskRect) -> Result<Self> {
        let m = rect_masks::<f64>(&[rect], size)?;
        Self::from_known(size, m.to_vec())
    }

    /// `(1, 1, S, S)` tensor.
    pub fn tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64s(&self.known, &[1, 1, self.size, self.size])
    }

    pub fn hole_count(&self) -> usize {
        self.known.iter().filter(|v| **v == 0.0).count()
    }
}

/// Reads an 8-bit P5 mask of side `size` with values in `{0, 255}`
/// (255 known, 0 hole).
pub fn load_external_mask(path: &Path, size: usize) -> Result<ExternalMask> {
    let raster = read_pgm(path)?;
    decode_mask(raster, size).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn decode_mask(raster: Raster<u16>, size: usize) -> Result<ExternalMask> {
    if raster.width != size || raster.height != size {
        return Err(Error::Dataset(format!(
            "mask is {}x{}, image is {size}x{size}",
            raster.width, raster.height
        )));
    }
    if raster.maxval != 255 {
        return Err(Error::Dataset(format!("mask maxval must be 255, found {}", raster.maxval)));
    }
    let mut known = Vec::with_capacity(raster.samples.len());
    for (i, v) in raster.samples.iter().enumerate() {
        known.push(match v {
            255 => 1.0,
            0 => 0.0,
            other => {
                return Err(Error::Dataset(format!(
                    "mask value {other} at ({}, {}) is not 0 or 255",
                    i / size,
                    i % size
                )))
            }
        });
    }
    ExternalMask::from_known(size, known)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_ppm() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let r = decode_ppm(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 2, 3));
        assert_eq!(r.samples, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
    }

    #[test]
    fn hand_written_pgm16_is_big_endian() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0x12, 0x34, 0xff, 0xfe]);
        let r = decode_pgm(&bytes).unwrap();
        assert_eq!(r.samples, vec![0x1234, 0xfffe]);
        assert_eq!(r.maxval, 65535);
    }

    #[test]
    fn encoders_round_trip() {
        let enc = encode_pgm16(2, 1, &[0x1234, 0xfffe]).unwrap();
        assert!(enc.ends_with(&[0x12, 0x34, 0xff, 0xfe]));
        assert_eq!(decode_pgm(&enc).unwrap().samples, vec![0x1234, 0xfffe]);
        let rgb: Vec<u8> = (0..27).collect();
        assert_eq!(decode_ppm(&encode_ppm(3, 3, &rgb).unwrap()).unwrap().samples, rgb);
        let g = encode_pgm8(2, 2, &[0, 255, 255, 0]).unwrap();
        let r = decode_pgm(&g).unwrap();
        assert_eq!((r.maxval, r.samples), (255, vec![0, 255, 255, 0]));
    }

    #[test]
    fn malformed_netpbm_rejected() {
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
        assert!(decode_ppm(b"P6\n1 1\n15\n\x01\x02\x03").is_err());
        assert!(decode_pgm(b"P5\n1 1\n1000\n\x00\x01").is_err());
        assert!(decode_pgm(b"not an image").is_err());
    }

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(synth_scene(3, 32).unwrap(), synth_scene(3, 32).unwrap());
        assert_ne!(synth_scene(3, 32).unwrap(), synth_scene(4, 32).unwrap());
        assert!(synth_scene(1, 8).is_err());
    }

    #[test]
    fn scene_pixels_come_from_background_or_a_rectangle() {
        for seed in 0..20 {
            let layout = synth_layout(seed, 40, DEFAULT_DMAX).unwrap();
            assert!((3..=6).contains(&layout.rects.len()));
            let s = layout.render();
            for y in 0..40 {
                for x in 0..40 {
                    let d = s.depth[y * 40 + x];
                    let bg = d == layout.background_depth(y);
                    let owner = layout.rects.iter().find(|r| r.depth == d && r.rect.contains(y, x));
                    assert!(bg || owner.is_some());
                    // no covering rectangle is nearer than the chosen one
                    if let Some(o) = owner {
                        assert!(layout.rects.iter().all(|r| !r.rect.contains(y, x) || r.depth >= o.depth));
                        assert_eq!(&s.rgb[(y * 40 + x) * 3..(y * 40 + x) * 3 + 3], &o.color.map(f64::from));
                    } else {
                        assert!(layout.rects.iter().all(|r| !r.rect.contains(y, x)));
                    }
                    assert!(d > 0.0 && d < DEFAULT_DMAX);
                }
            }
        }
    }

    #[test]
    fn rgb_and_depth_edges_coincide_on_rectangles() {
        let layout = synth_layout(11, 48, DEFAULT_DMAX).unwrap();
        let s = layout.render();
        let owner = |y: usize, x: usize| {
            layout
                .rects
                .iter()
                .enumerate()
                .filter(|(_, r)| r.rect.contains(y, x))
                .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
                .map(|(i, _)| i)
        };
        for y in 0..48 {
            for x in 0..47 {
                if owner(y, x) != owner(y, x + 1) {
                    assert_ne!(s.depth[y * 48 + x], s.depth[y * 48 + x + 1]);
                }
            }
        }
    }

    #[test]
    fn normalization_endpoints_and_inverse() {
        let mut s = synth_scene(2, 16).unwrap();
        s.rgb[0] = 0.0;
        s.rgb[1] = 255.0;
        s.depth[0] = DEFAULT_DMAX / 2.0;
        let n = normalize(&s, DEFAULT_DMAX).unwrap();
        assert_eq!(n.rgb[0], -1.0);
        assert_eq!(n.rgb[256], 1.0);
        assert_eq!(n.depth[0], 0.0);
        let (rgb, depth) = n.tensors::<f64>().unwrap();
        let back = denormalize(&rgb, &depth, 0, DEFAULT_DMAX, &s.id).unwrap();
        for (a, b) in back.rgb.iter().zip(&s.rgb) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in back.depth.iter().zip(&s.depth) {
            assert!((a - b).abs() <= 1e-9);
        }
        s.depth[3] = DEFAULT_DMAX + 1.0;
        assert!(normalize(&s, DEFAULT_DMAX).is_err());
    }

    #[test]
    fn normalization_preserves_depth_order() {
        let s = synth_scene(9, 16).unwrap();
        let n = normalize(&s, DEFAULT_DMAX).unwrap();
        for i in 1..s.depth.len() {
            assert_eq!(s.depth[i - 1] < s.depth[i], n.depth[i - 1] < n.depth[i]);
        }
    }

    #[test]
    fn sample_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_dataset(dir.path(), 3, 16, 7).unwrap();
        let reopened = DatasetIndex::open(dir.path()).unwrap();
        assert_eq!(index, reopened);
        let mem = Dataset::synthetic(3, 16, 7).unwrap();
        let disk = Dataset::load(&reopened).unwrap();
        assert_eq!(mem.ids, disk.ids);
        for (a, b) in mem.samples.iter().zip(&disk.samples) {
            assert_eq!(a, b);
        }
        let original = synth_layout(scene_seed(7, 1), 16, DEFAULT_DMAX).unwrap().render();
        let read = read_sample(&reopened, &reopened.ids[1]).unwrap();
        assert_eq!(read.rgb, original.rgb);
        for (a, b) in read.depth.iter().zip(&original.depth) {
            assert!((a - b).abs() <= DEFAULT_DMAX / 65535.0);
        }
    }

    #[test]
    fn missing_depth_file_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_dataset(dir.path(), 2, 16, 1).unwrap();
        fs::remove_file(index.depth_path(&index.ids[1])).unwrap();
        let err = DatasetIndex::open(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&index.ids[1]), "{err}");
    }

    #[test]
    fn mask_sizes_and_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100_000 {
            let r = sample_mask(&mut rng, 256).unwrap();
            assert!((32..=128).contains(&r.height) && (32..=128).contains(&r.width));
            assert!(r.fits(256));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let r = sample_mask(&mut rng, 20).unwrap();
            assert!(r.fits(20));
        }
        assert!(sample_mask(&mut rng, 7).is_err());
    }

    #[test]
    fn mask_tensor_counts() {
        let r = MaskRect { top: 3, left: 5, height: 4, width: 6 };
        let m = rect_masks::<f64>(&[r, MaskRect::full(16)], 16).unwrap();
        let ones: f64 = m.data()[..256].iter().sum();
        assert_eq!(ones, (256 - 24) as f64);
        assert_eq!(m.data()[256..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn masking_zeroes_holes_and_is_idempotent() {
        let n = normalize(&synth_scene(5, 16).unwrap(), DEFAULT_DMAX).unwrap();
        let (x, _) = n.tensors::<f64>().unwrap();
        let r = MaskRect { top: 2, left: 4, height: 5, width: 3 };
        let m = rect_masks::<f64>(&[r], 16).unwrap();
        let z = apply_mask(&x, &m).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    let i = c * 256 + y * 16 + xx;
                    let want = if r.contains(y, xx) { 0.0 } else { x.data()[i] };
                    assert_eq!(z.data()[i], want);
                }
            }
        }
        assert_eq!(apply_mask(&z, &m).unwrap().data(), z.data());
        assert_eq!(apply_mask(&x, &Tensor::ones(&[1, 1, 16, 16])).unwrap().data(), x.data());
        assert!(apply_mask(&x, &Tensor::zeros(&[1, 1, 16, 16])).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn external_masks() {
        let all_known = Raster { width: 4, height: 4, channels: 1, maxval: 255, samples: vec![255u16; 16] };
        let m = decode_mask(all_known, 4).unwrap();
        assert_eq!((m.hole_count(), m.bbox), (0, None));

        // a small silhouette: a diamond with a tail
        let mut px = vec![255u16; 64];
        for (y, x) in [(2, 4), (3, 3), (3, 4), (3, 5), (4, 4), (5, 4), (6, 5)] {
            px[y * 8 + x] = 0;
        }
        let raster = Raster { width: 8, height: 8, channels: 1, maxval: 255, samples: px.clone() };
        let m = decode_mask(raster, 8).unwrap();
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for (i, v) in px.iter().enumerate() {
            if *v == 0 {
                y0 = y0.min(i / 8);
                y1 = y1.max(i / 8);
                x0 = x0.min(i % 8);
                x1 = x1.max(i % 8);
            }
        }
        assert_eq!(m.bbox, Some(MaskRect { top: y0, left: x0, height: y1 - y0 + 1, width: x1 - x0 + 1 }));
        assert_eq!(m.hole_count(), 7);

        let mut bad = px.clone();
        bad[0] = 128;
        assert!(decode_mask(Raster { width: 8, height: 8, channels: 1, maxval: 255, samples: bad }, 8).is_err());
        assert!(decode_mask(Raster { width: 8, height: 8, channels: 1, maxval: 255, samples: px }, 16).is_err());
    }

    #[test]
    fn external_mask_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut px = vec![255u8; 16];
        px[5] = 0;
        fs::write(&path, encode_pgm8(4, 4, &px).unwrap()).unwrap();
        let m = load_external_mask(&path, 4).unwrap();
        assert_eq!(m.bbox, Some(MaskRect { top: 1, left: 1, height: 1, width: 1 }));
    }
}

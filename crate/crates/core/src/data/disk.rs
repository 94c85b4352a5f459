//! On-disk dataset layout:
//!
//! ```text
//! root/meta.json
//! root/sim/{rgb,depth,seg}/NNNNNN.png
//! root/real/rgb/NNNNNN.png
//! root/real/{depth,seg}/NNNNNN.png   (optional, evaluation only)
//! ```
//!
//! Training reads only `real/rgb`; real ground truth exists for evaluation.
//! RGB is 8-bit truecolor, depth 16-bit gray mapped linearly onto
//! `[d_min, d_max]`, segmentation 8-bit indexed.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::scene::{generate_scene, SceneConfig, SceneSample, SCENE_CLASSES};
use crate::data::{derive_seed, MemoryDataset, SceneSource};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::model::Domain;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub size: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub classes: Vec<String>,
    pub sim_count: usize,
    pub real_count: usize,
    /// Real images come from other scenes than the sim images of the same
    /// index.
    pub unpaired: bool,
    pub seed: Option<u64>,
}

impl DatasetMeta {
    fn empty() -> Self {
        Self {
            size: 0,
            d_min: 1.0,
            d_max: 80.0,
            classes: SCENE_CLASSES.iter().map(|s| s.to_string()).collect(),
            sim_count: 0,
            real_count: 0,
            unpaired: true,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Rgb,
    Depth,
    Seg,
}

impl Kind {
    fn dir(self) -> &'static str {
        match self {
            Kind::Rgb => "rgb",
            Kind::Depth => "depth",
            Kind::Seg => "seg",
        }
    }
}

pub fn sample_path(root: &Path, domain: Domain, kind: Kind, index: usize) -> PathBuf {
    root.join(domain.to_string())
        .join(kind.dir())
        .join(format!("{index:06}.png"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteOptions {
    /// Scene-disjoint real split (the default) instead of per-index pairs.
    pub unpaired: bool,
    /// Write `real/seg`.
    pub real_labels: bool,
    /// Write `real/depth`.
    pub real_depth: bool,
}

impl WriteOptions {
    /// Real-domain depth and labels both present, for evaluation sets.
    pub fn evaluation() -> Self {
        Self {
            unpaired: true,
            real_labels: true,
            real_depth: true,
        }
    }
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            unpaired: true,
            real_labels: true,
            real_depth: false,
        }
    }
}

/// Writes `count` sim and `count` real samples generated from `seed`.
pub fn write_dataset(
    root: &Path,
    cfg: &SceneConfig,
    seed: u64,
    count: usize,
    opts: WriteOptions,
) -> Result<DatasetMeta> {
    cfg.validate()?;
    let mut dirs = vec![
        (Domain::Sim, Kind::Rgb),
        (Domain::Sim, Kind::Depth),
        (Domain::Sim, Kind::Seg),
        (Domain::Real, Kind::Rgb),
    ];
    if opts.real_depth {
        dirs.push((Domain::Real, Kind::Depth));
    }
    if opts.real_labels {
        dirs.push((Domain::Real, Kind::Seg));
    }
    for (d, k) in &dirs {
        let p = root.join(d.to_string()).join(k.dir());
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for i in 0..count {
        let sim = generate_scene::<f64>(derive_seed(seed, &[0, i as u64]), cfg)?.sim;
        let real_stream = if opts.unpaired { 1 } else { 0 };
        let real = generate_scene::<f64>(derive_seed(seed, &[real_stream, i as u64]), cfg)?.real;
        let range = (cfg.d_min, cfg.d_max);
        write_sample(root, i, &sim, range, true, true)?;
        write_sample(root, i, &real, range, opts.real_depth, opts.real_labels)?;
    }
    let meta = DatasetMeta {
        size: cfg.size,
        d_min: cfg.d_min,
        d_max: cfg.d_max,
        classes: SCENE_CLASSES.iter().map(|s| s.to_string()).collect(),
        sim_count: count,
        real_count: count,
        unpaired: opts.unpaired,
        seed: Some(seed),
    };
    write_meta(root, &meta)?;
    Ok(meta)
}

/// Writes every sample of `data` with whatever ground truth it carries. Sim
/// samples must have depth and labels.
pub fn save_dataset<T: Scalar, S: AsRef<str>>(
    root: &Path,
    data: &MemoryDataset<T>,
    classes: &[S],
) -> Result<DatasetMeta> {
    let size = SceneSource::<T>::image_size(data);
    let range = (data.d_min, data.d_max);
    let mut dirs = vec![(Domain::Sim, Kind::Rgb), (Domain::Sim, Kind::Depth), (Domain::Sim, Kind::Seg)];
    if !data.real.is_empty() {
        dirs.push((Domain::Real, Kind::Rgb));
    }
    let has = |f: fn(&SceneSample<T>) -> bool| !data.real.is_empty() && data.real.iter().all(f);
    let (real_depth, real_labels) = (has(|s| s.depth.is_some()), has(|s| s.labels.is_some()));
    if real_depth {
        dirs.push((Domain::Real, Kind::Depth));
    }
    if real_labels {
        dirs.push((Domain::Real, Kind::Seg));
    }
    for (d, k) in &dirs {
        let p = root.join(d.to_string()).join(k.dir());
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in data.sim.iter().enumerate() {
        if s.size() != size {
            return Err(Error::Dimension(format!("sim sample {i} is {0}x{0}, expected {size}", s.size())));
        }
        write_sample(root, i, s, range, true, true)?;
    }
    for (i, s) in data.real.iter().enumerate() {
        if s.size() != size {
            return Err(Error::Dimension(format!("real sample {i} is {0}x{0}, expected {size}", s.size())));
        }
        write_sample(root, i, s, range, real_depth, real_labels)?;
    }
    let meta = DatasetMeta {
        size,
        d_min: data.d_min,
        d_max: data.d_max,
        classes: classes.iter().map(|c| c.as_ref().to_string()).collect(),
        sim_count: data.sim.len(),
        real_count: data.real.len(),
        unpaired: false,
        seed: None,
    };
    write_meta(root, &meta)?;
    Ok(meta)
}

fn write_meta(root: &Path, meta: &DatasetMeta) -> Result<()> {
    let p = root.join("meta.json");
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

fn write_sample<T: Scalar>(
    root: &Path,
    index: usize,
    s: &SceneSample<T>,
    (d_min, d_max): (f64, f64),
    depth: bool,
    labels: bool,
) -> Result<()> {
    let n = s.size();
    write_rgb(&sample_path(root, s.domain, Kind::Rgb, index), &s.rgb)?;
    if depth {
        let d = s.require_depth()?;
        let levels: Vec<u16> = d
            .data()
            .iter()
            .map(|&v| {
                let u = (v.as_f64() - d_min) / (d_max - d_min);
                (u.clamp(0.0, 1.0) * 65535.0).round() as u16
            })
            .collect();
        let bytes: Vec<u8> = levels.iter().flat_map(|v| v.to_be_bytes()).collect();
        encode_png(
            &sample_path(root, s.domain, Kind::Depth, index),
            n,
            png::ColorType::Grayscale,
            png::BitDepth::Sixteen,
            None,
            &bytes,
        )?;
    }
    if labels {
        let l = s.require_labels()?;
        encode_png(
            &sample_path(root, s.domain, Kind::Seg, index),
            n,
            png::ColorType::Indexed,
            png::BitDepth::Eight,
            Some(&palette()),
            l.data(),
        )?;
    }
    Ok(())
}

/// Display color of a label index; the ignore label is black.
pub fn label_color(label: u8) -> [u8; 3] {
    if label == IGNORE {
        return [0, 0, 0];
    }
    let h = (label as u32 + 1).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

fn palette() -> Vec<u8> {
    (0..=255u8).flat_map(label_color).collect()
}

pub(crate) fn write_rgb<T: Scalar>(path: &Path, rgb: &Tensor<T>) -> Result<()> {
    let (c, h, w) = match rgb.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("rgb image of shape {s:?}"))),
    };
    if c != 3 || h != w {
        return Err(Error::Dimension(format!("rgb image of shape {:?}", rgb.shape())));
    }
    let plane = h * w;
    let d = rgb.data();
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|i| [0, 1, 2].map(|k| to_byte(d[k * plane + i].as_f64())))
        .collect();
    encode_png(path, w, png::ColorType::Rgb, png::BitDepth::Eight, None, &bytes)
}

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a square image of side `n`.
pub(crate) fn encode_png(
    path: &Path,
    n: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<&[u8]>,
    bytes: &[u8],
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), n as u32, n as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: png::DecodingError| Error::Data(format!("malformed image {}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("image {} is too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes: buf,
    })
}

fn expect_format(
    path: &Path,
    d: &Decoded,
    color: png::ColorType,
    depth: png::BitDepth,
    size: Option<usize>,
) -> Result<usize> {
    if d.color != color || d.depth != depth {
        return Err(Error::Data(format!(
            "malformed image {}: expected {color:?} {depth:?}, found {:?} {:?}",
            path.display(),
            d.color,
            d.depth
        )));
    }
    if d.width != d.height || size.is_some_and(|s| s != d.width) {
        return Err(Error::Data(format!(
            "malformed image {}: {}x{} (expected square side {})",
            path.display(),
            d.width,
            d.height,
            size.map_or("any".to_string(), |s| s.to_string())
        )));
    }
    Ok(d.width)
}

pub(crate) fn read_rgb<T: Scalar>(path: &Path, size: Option<usize>) -> Result<Tensor<T>> {
    let d = decode_png(path)?;
    let n = expect_format(path, &d, png::ColorType::Rgb, png::BitDepth::Eight, size)?;
    let plane = n * n;
    let mut out = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for k in 0..3 {
            out[k * plane + i] = T::from_f64_lossy(d.bytes[3 * i + k] as f64 / 255.0 * 2.0 - 1.0);
        }
    }
    Tensor::new(vec![3, n, n], out)
}

fn read_depth<T: Scalar>(path: &Path, size: usize, meta: &DatasetMeta) -> Result<Tensor<T>> {
    let d = decode_png(path)?;
    let n = expect_format(path, &d, png::ColorType::Grayscale, png::BitDepth::Sixteen, Some(size))?;
    let span = meta.d_max - meta.d_min;
    let data = d
        .bytes
        .chunks_exact(2)
        .map(|b| {
            let v = u16::from_be_bytes([b[0], b[1]]) as f64;
            T::from_f64_lossy(meta.d_min + v / 65535.0 * span)
        })
        .collect();
    Tensor::new(vec![1, n, n], data)
}

fn read_seg(path: &Path, size: usize) -> Result<LabelMap> {
    let d = decode_png(path)?;
    let color = if d.color == png::ColorType::Grayscale {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Indexed
    };
    let n = expect_format(path, &d, color, png::BitDepth::Eight, Some(size))?;
    LabelMap::new([1, n, n], d.bytes)
}

/// Lazily decoded dataset directory. File presence is checked when opened.
#[derive(Clone, Debug)]
pub struct DirectoryDataset {
    root: PathBuf,
    meta: DatasetMeta,
}

fn count_pngs(dir: &Path) -> Result<usize> {
    if !dir.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Opens a dataset directory. An empty directory is an empty dataset.
pub fn load_directory_dataset(root: &Path) -> Result<DirectoryDataset> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let meta_path = root.join("meta.json");
    let mut meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str::<DatasetMeta>(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?
    } else {
        DatasetMeta::empty()
    };
    let sim_count = count_pngs(&root.join("sim").join("rgb"))?;
    let real_count = count_pngs(&root.join("real").join("rgb"))?;
    if meta_path.exists() && (sim_count != meta.sim_count || real_count != meta.real_count) {
        return Err(Error::Data(format!(
            "{} lists {} sim / {} real images, found {sim_count} / {real_count}",
            meta_path.display(),
            meta.sim_count,
            meta.real_count
        )));
    }
    meta.sim_count = sim_count;
    meta.real_count = real_count;
    for i in 0..sim_count {
        for kind in [Kind::Rgb, Kind::Depth, Kind::Seg] {
            let p = sample_path(root, Domain::Sim, kind, i);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    for i in 0..real_count {
        let p = sample_path(root, Domain::Real, Kind::Rgb, i);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    if meta.size == 0 && sim_count + real_count > 0 {
        let first = if sim_count > 0 {
            sample_path(root, Domain::Sim, Kind::Rgb, 0)
        } else {
            sample_path(root, Domain::Real, Kind::Rgb, 0)
        };
        meta.size = read_rgb::<f32>(&first, None)?.shape()[1];
    }
    Ok(DirectoryDataset {
        root: root.to_path_buf(),
        meta,
    })
}

impl DirectoryDataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn count(&self) -> usize {
        self.meta.sim_count + self.meta.real_count
    }

    /// Whether every real image has ground truth of `kind`.
    pub fn has_real(&self, kind: Kind) -> bool {
        self.meta.real_count > 0
            && (0..self.meta.real_count)
                .all(|i| sample_path(&self.root, Domain::Real, kind, i).is_file())
    }
}

impl<T: Scalar> SceneSource<T> for DirectoryDataset {
    fn len(&self, domain: Domain) -> usize {
        match domain {
            Domain::Sim => self.meta.sim_count,
            Domain::Real => self.meta.real_count,
        }
    }

    fn sample(&self, domain: Domain, index: usize) -> Result<SceneSample<T>> {
        if index >= SceneSource::<T>::len(self, domain) {
            return Err(Error::Usage(format!("{domain} index {index} out of range")));
        }
        let n = self.meta.size;
        let rgb = read_rgb(&sample_path(&self.root, domain, Kind::Rgb, index), Some(n))?;
        let dp = sample_path(&self.root, domain, Kind::Depth, index);
        let sp = sample_path(&self.root, domain, Kind::Seg, index);
        // Sim ground truth is mandatory; real ground truth is read if present.
        let required = domain == Domain::Sim;
        let depth = if required || dp.is_file() {
            Some(read_depth(&dp, n, &self.meta)?)
        } else {
            None
        };
        let labels = if required || sp.is_file() {
            Some(read_seg(&sp, n)?)
        } else {
            None
        };
        Ok(SceneSample {
            rgb,
            depth,
            labels,
            domain,
        })
    }

    fn depth_range(&self) -> (f64, f64) {
        (self.meta.d_min, self.meta.d_max)
    }

    fn image_size(&self) -> usize {
        self.meta.size
    }
}

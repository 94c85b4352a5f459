use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use latentbridge::data::disk::label_color;
use latentbridge::data::{load_directory_dataset, SceneSource};
use latentbridge::model::{predict, Domain, Head, ModelBundle};
use latentbridge::train::read_log;
use latentbridge::{Error, Scalar, Tensor};

use crate::{DTypeArg, ModelArgs};

#[derive(clap::Args, Debug)]
pub struct PlotArgs {
    /// JSONL loss log; draws one curve per loss field.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint for prediction panels (needs --data).
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
    /// Dataset directory for prediction panels.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "real")]
    domain: Domain,
    /// Panel rows.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Side of each panel tile in pixels.
    #[arg(long, default_value_t = 128)]
    tile: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

const CURVE_W: u32 = 640;
const CURVE_H: u32 = 360;
const MARGIN: u32 = 24;

pub fn run(a: PlotArgs) -> Result<(), Error> {
    if a.log.is_none() && a.checkpoint.is_none() {
        return Err(Error::Usage("plot needs --log and/or --checkpoint with --data".into()));
    }
    super::ensure_dir(&a.out)?;
    if let Some(log) = &a.log {
        curves(log, &a.out)?;
    }
    if let Some(ck) = &a.checkpoint {
        let model = ModelArgs {
            checkpoint: ck.clone(),
            preset: a.preset.clone(),
            dtype: a.dtype,
        };
        match a.dtype {
            DTypeArg::F32 => panels::<f32>(&model.load()?, &a)?,
            DTypeArg::F64 => panels::<f64>(&model.load()?, &a)?,
        }
    }
    Ok(())
}

fn save(img: &RgbImage, path: &Path) -> Result<(), Error> {
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn curves(log: &Path, out: &Path) -> Result<(), Error> {
    let records = read_log(log)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Empty(format!("{} has no records", log.display())))?;
    let stage = first.report.stage;
    let mut fields: Vec<&str> = stage.term_names().to_vec();
    fields.push("total");
    for field in fields {
        let ys: Vec<f64> = records
            .iter()
            .filter(|r| r.report.stage == stage)
            .map(|r| r.report.get(field).unwrap_or(r.report.total))
            .collect();
        save(&curve(&ys), &out.join(format!("{}-{field}.png", stage.name())))?;
    }
    Ok(())
}

/// Bresenham segment, clipped to the image.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Loss against step, scaled to the finite range of `ys`, inside a frame.
fn curve(ys: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(CURVE_W, CURVE_H, Rgb([255, 255, 255]));
    let (l, t) = (MARGIN as i64, MARGIN as i64);
    let (r, b) = ((CURVE_W - MARGIN) as i64, (CURVE_H - MARGIN) as i64);
    let frame = Rgb([160, 160, 160]);
    for (p, q) in [((l, t), (r, t)), ((r, t), (r, b)), ((r, b), (l, b)), ((l, b), (l, t))] {
        line(&mut img, p, q, frame);
    }
    let finite = ys.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = ys.len().max(2) - 1;
    let at = |i: usize, v: f64| {
        let x = l + ((r - l) as f64 * i as f64 / n as f64).round() as i64;
        let mid = if hi > lo { (v - lo) / span } else { 0.5 };
        let y = b - ((b - t) as f64 * mid).round() as i64;
        (x, y)
    };
    let ink = Rgb([30, 70, 170]);
    let mut prev: Option<(i64, i64)> = None;
    for (i, &v) in ys.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = at(i, v);
        line(&mut img, prev.unwrap_or(p), p, ink);
        prev = Some(p);
    }
    img
}

fn tile_from(n: usize, pixel: impl Fn(usize) -> [u8; 3], side: u32) -> RgbImage {
    let img = RgbImage::from_fn(n as u32, n as u32, |x, y| Rgb(pixel(y as usize * n + x as usize)));
    imageops::resize(&img, side, side, FilterType::Nearest)
}

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rows of input RGB, predicted depth (near is bright) and predicted labels.
fn panels<T: Scalar>(model: &ModelBundle<T>, a: &PlotArgs) -> Result<(), Error> {
    let data = load_directory_dataset(a.data.as_deref().expect("clap requires --data"))?;
    let count = SceneSource::<T>::len(&data, a.domain).min(a.samples);
    if count == 0 {
        return Err(Error::Empty(format!("no {} images to plot", a.domain)));
    }
    let side = a.tile;
    let mut panel = RgbImage::from_pixel(3 * side, count as u32 * side, Rgb([0, 0, 0]));
    let classes = model.arch().seg_classes;
    for i in 0..count {
        let s = SceneSource::<T>::sample(&data, a.domain, i)?;
        let n = s.size();
        let plane = n * n;
        let x = s.rgb.clone().reshape(vec![1, 3, n, n])?;
        let rgb = s.rgb.to_f64_vec();
        let depth: Tensor<T> = predict(model, &x, a.domain, Head::Depth)?;
        let depth = depth.to_f64_vec();
        let logits = predict(model, &x, a.domain, Head::Seg)?.to_f64_vec();
        let label = |p: usize| {
            (0..classes)
                .max_by(|&u, &v| logits[u * plane + p].total_cmp(&logits[v * plane + p]).then(v.cmp(&u)))
                .unwrap_or(0) as u8
        };
        let row = i as u32 * side;
        let tiles = [
            tile_from(n, |p| [0, 1, 2].map(|k| to_byte(rgb[k * plane + p])), side),
            tile_from(n, |p| [to_byte(-depth[p]); 3], side),
            tile_from(n, |p| label_color(label(p)), side),
        ];
        for (col, t) in tiles.iter().enumerate() {
            imageops::replace(&mut panel, t, (col as u32 * side) as i64, row as i64);
        }
    }
    save(&panel, &a.out.join(format!("panel-{}.png", a.domain)))
}

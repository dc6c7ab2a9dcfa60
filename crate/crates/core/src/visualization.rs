//! Disentanglement panels and learning curves, rendered as PNG with CSV
//! companions. The CSVs carry the exact values; the images are previews.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, Real};
use crate::preprocessing::{prepare_batch, IMAGE_COLS, IMAGE_ROWS};
use crate::rng::stream;
use crate::signal_sim::LabeledSignals;
use crate::training::{History, Method, TrainState};

pub const PANEL_NAMES: [&str; 8] = [
    "raw_1",
    "raw_2",
    "background_1",
    "background_2",
    "synthetic_12",
    "synthetic_21",
    "difference_1",
    "difference_2",
];

const SCALE: u32 = 4;
const GAP: u32 = 4;

/// One displayed channel, row-major `16 x 80`.
pub type Panel = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct VizGrid {
    /// In `PANEL_NAMES` order.
    pub panels: Vec<Panel>,
    pub channel: usize,
}

impl VizGrid {
    pub fn panel(&self, name: &str) -> Option<&Panel> {
        PANEL_NAMES.iter().position(|n| *n == name).map(|i| &self.panels[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizMeta {
    pub record_1: usize,
    pub record_2: usize,
    pub device_1: usize,
    pub device_2: usize,
    pub same_record: bool,
    pub same_device: bool,
    pub seed: u64,
    pub channel: usize,
}

fn channel_of<T: Real>(t: &crate::nn::Tensor<T>, b: usize, channel: usize) -> Panel {
    let n = IMAGE_ROWS * IMAGE_COLS;
    t.row(b)[channel * n..(channel + 1) * n].iter().map(|v| v.as_f64()).collect()
}

/// Computes raw, background, cross-synthesized and difference panels for
/// records `i` and `j` of `data`, then writes `<name>.png`, `<name>.json`
/// and one `<name>.<panel>.csv` per panel into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn render_disentanglement<T: Real>(
    state: &TrainState<T>,
    data: &LabeledSignals,
    i: usize,
    j: usize,
    seed: u64,
    channel: usize,
    out_dir: &Path,
    name: &str,
) -> Result<VizGrid> {
    if i >= data.len() || j >= data.len() {
        return Err(Error::config(format!("record index out of range (split has {})", data.len())));
    }
    if channel > 1 {
        return Err(Error::config("channel must be 0 (real) or 1 (imaginary)"));
    }
    let (q, g) = state.background_generator()?;
    let x = prepare_batch::<T>(&[&data.signals[i], &data.signals[j]])?;
    let noise = q.sample_noise(2, &mut stream(seed, "viz", 0));
    let (bg, _) = q.forward(&x, &noise, Mode::Eval)?;
    let z = state.f.embed(&x, Mode::Eval)?;
    let (synth, _) = g.forward(&z, &bg.select(&[1, 0]), Mode::Eval)?;

    let raw = [channel_of(&x, 0, channel), channel_of(&x, 1, channel)];
    let back = [channel_of(&bg, 0, channel), channel_of(&bg, 1, channel)];
    let syn = [channel_of(&synth, 0, channel), channel_of(&synth, 1, channel)];
    let diff: Vec<Panel> = (0..2)
        .map(|k| raw[k].iter().zip(&syn[k]).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    let grid = VizGrid {
        panels: vec![
            raw[0].clone(),
            raw[1].clone(),
            back[0].clone(),
            back[1].clone(),
            syn[0].clone(),
            syn[1].clone(),
            diff[0].clone(),
            diff[1].clone(),
        ],
        channel,
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (panel, pname) in grid.panels.iter().zip(PANEL_NAMES) {
        write_panel_csv(&out_dir.join(format!("{name}.{pname}.csv")), panel)?;
    }
    grid_image(&grid).save(out_dir.join(format!("{name}.png")))?;
    let meta = VizMeta {
        record_1: i,
        record_2: j,
        device_1: data.device_ids[i],
        device_2: data.device_ids[j],
        same_record: i == j,
        same_device: data.device_ids[i] == data.device_ids[j],
        seed,
        channel,
    };
    let path = out_dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(grid)
}

pub fn write_panel_csv(path: &Path, panel: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in panel.chunks(IMAGE_COLS) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_panel_csv(path: &Path) -> Result<Panel> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::with_capacity(IMAGE_ROWS * IMAGE_COLS);
    for rec in r.records() {
        for v in rec?.iter() {
            out.push(v.parse::<f64>().map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?);
        }
    }
    if out.len() != IMAGE_ROWS * IMAGE_COLS {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("expected {} values, found {}", IMAGE_ROWS * IMAGE_COLS, out.len()),
        });
    }
    Ok(out)
}

/// Four rows (raw, background, synthetic, difference) by two columns,
/// each panel min-max scaled to grey levels.
fn grid_image(grid: &VizGrid) -> GrayImage {
    let pw = IMAGE_COLS as u32 * SCALE;
    let ph = IMAGE_ROWS as u32 * SCALE;
    let mut img = GrayImage::from_pixel(2 * pw + 3 * GAP, 4 * ph + 5 * GAP, Luma([255]));
    for (k, panel) in grid.panels.iter().enumerate() {
        let (col, row) = ((k % 2) as u32, (k / 2) as u32);
        let lo = panel.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = panel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (x0, y0) = (GAP + col * (pw + GAP), GAP + row * (ph + GAP));
        for y in 0..ph {
            for x in 0..pw {
                let v = panel[(y / SCALE) as usize * IMAGE_COLS + (x / SCALE) as usize];
                let level = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(x0 + x, y0 + y, Luma([level]));
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: Method,
    pub split: String,
    pub epoch: usize,
    pub mean_auc: f64,
}

/// Averages AUC over runs per (method, split, epoch) and writes
/// `curves.csv` and `curves.png` into `out_dir`.
pub fn render_learning_curves(history_files: &[PathBuf], out_dir: &Path) -> Result<Vec<CurveRow>> {
    if history_files.is_empty() {
        return Err(Error::config("need at least one history file"));
    }
    let mut acc: BTreeMap<(Method, String, usize), (f64, usize)> = BTreeMap::new();
    for path in history_files {
        let h = History::load(path)?;
        if h.eval_history.is_empty() {
            return Err(Error::Malformed {
                path: path.clone(),
                reason: "history has no evaluations".into(),
            });
        }
        for rec in &h.eval_history {
            for (split, auc) in &rec.auc {
                let e = acc.entry((h.method, split.clone(), rec.epoch)).or_insert((0.0, 0));
                e.0 += auc;
                e.1 += 1;
            }
        }
    }
    let rows: Vec<CurveRow> = acc
        .into_iter()
        .map(|((method, split, epoch), (sum, n))| CurveRow {
            method,
            split,
            epoch,
            mean_auc: sum / n as f64,
        })
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    curves_image(&rows).save(out_dir.join("curves.png"))?;
    Ok(rows)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
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

/// Mean AUC against epoch, one colored polyline per (method, split), on
/// axes spanning the observed ranges.
fn curves_image(rows: &[CurveRow]) -> RgbImage {
    let (w, h, m) = (640u32, 400u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let lo = rows.iter().map(|r| r.mean_auc).fold(f64::INFINITY, f64::min).min(0.5);
    let hi = 1.0f64;
    let px = |e: usize| m + ((e as f64 / max_epoch) * (w as i64 - 2 * m) as f64).round() as i64;
    let py = |a: f64| h as i64 - m - (((a - lo) / (hi - lo).max(1e-9)) * (h as i64 - 2 * m) as f64).round() as i64;
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (m, h as i64 - m), (w as i64 - m, h as i64 - m), axis);
    draw_line(&mut img, (m, m), (m, h as i64 - m), axis);
    let mut series: BTreeMap<(Method, &str), Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry((r.method, r.split.as_str())).or_default().push((r.epoch, r.mean_auc));
    }
    for (k, pts) in series.values().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for pair in pts.windows(2) {
            draw_line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), c);
        }
        if let [(e, a)] = pts[..] {
            draw_line(&mut img, (px(e) - 2, py(a)), (px(e) + 2, py(a)), c);
        }
    }
    img
}

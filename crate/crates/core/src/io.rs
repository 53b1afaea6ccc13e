//! PNG images and CSV tables.
//!
//! Images are 8-bit RGB PNG only. Loading maps a byte `v` to `v / 255`;
//! saving clamps to `[0, 1]` and stores `floor(255 x + 0.5)`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{ColorType, ImageFormat, ImageReader, RgbImage};

use crate::analysis::ErrorGrid;
use crate::corr::CorrMaps;
use crate::error::{Error, Result};
use crate::gradcheck::GradReport;
use crate::stylize::StylizeRecord;
use crate::tensor::{Real, Tensor};
use crate::train::TrainRecord;

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        other => return Err(Error::UnsupportedFormat(format!("{}: {other:?}, expected PNG", path.display()))),
    }
    let img = reader.decode()?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::UnsupportedFormat(format!("{}: {:?}, expected 8-bit RGB", path.display(), img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            *t.at_mut(0, ch, y as usize, x as usize) = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(t)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Save a `(1, 3, H, W)` image, or a `(1, 1, H, W)` map as gray.
pub fn save_image<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || (c != 3 && c != 1) {
        return Err(Error::ShapeMismatch(format!("can only save (1, 3|1, H, W) images, got {:?}", t.shape())));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = quantize(t.at(0, ch.min(c - 1), y as usize, x as usize).to_f64());
        }
    }
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Columns `row, col, value` over the query lattice.
pub fn write_error_grid(path: &Path, grid: &ErrorGrid) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row", "col", "value"])?;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            w.serialize((r, c, grid.at(r, c)))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `step, loss, retrieval_rate`.
pub fn write_train_log(path: &Path, log: &[TrainRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "loss", "retrieval_rate"])?;
    for r in log {
        w.serialize((r.step, r.loss, r.retrieval_rate))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `step, total, content, style`.
pub fn write_trace(path: &Path, trace: &[StylizeRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "total", "content", "style"])?;
    for r in trace {
        w.serialize((r.step, r.total, r.content, r.style))?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: `query, query_row, query_col, point, point_row, point_col, value`.
pub fn write_corr_maps<T: Real>(path: &Path, maps: &CorrMaps<T>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["query", "query_row", "query_col", "point", "point_row", "point_col", "value"])?;
    for i in 0..maps.n_samples() {
        let (qr, qc) = maps.samples.query(i);
        for (j, v) in maps.row(i).iter().enumerate() {
            let (pr, pc) = maps.samples.point(i, j);
            w.serialize((i, qr, qc, j, pr, pc, v.to_f64()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `check, max_rel_error, threshold, checked, passed`.
pub fn write_gradcheck(path: &Path, report: &GradReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["check", "max_rel_error", "threshold", "checked", "passed"])?;
    for c in &report.checks {
        w.serialize((&c.name, c.max_rel_error, c.threshold, c.checked, c.passed()))?;
    }
    w.flush()?;
    Ok(())
}

/// Generic two-or-more column numeric table with a header.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

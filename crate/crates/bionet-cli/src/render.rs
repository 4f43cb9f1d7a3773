//! Image artifacts: binary mask PNGs, tinted overlays and the loss-curve
//! plot.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use bionet_core::domain::{ChoroidMask, Sample};
use bionet_core::metrics::extract_boundaries;
use bionet_core::training::TrainLog;

const MASK_TINT: Rgb<u8> = Rgb([236, 100, 180]);
const GT_BOUNDARY: Rgb<u8> = Rgb([60, 220, 90]);
const TINT_ALPHA: f64 = 0.45;

pub fn write_mask_png(path: &Path, mask: &ChoroidMask) -> Result<()> {
    let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for ((r, c), &m) in mask.mask.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([if m == 1 { 255 } else { 0 }]));
    }
    img.save(path).context("encoding mask png")
}

/// B-scan with the predicted mask tinted over it and the ground-truth
/// choroid boundaries drawn as contour lines.
pub fn write_overlay_png(path: &Path, sample: &Sample, predicted: &ChoroidMask) -> Result<()> {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in sample.image.pixels.indexed_iter() {
        let gray = (v * 255.0).round().clamp(0.0, 255.0);
        let mut px = [gray, gray, gray];
        if predicted.mask[[r, c]] == 1 {
            for (channel, &tint) in px.iter_mut().zip(MASK_TINT.0.iter()) {
                *channel = (1.0 - TINT_ALPHA) * *channel + TINT_ALPHA * f64::from(tint);
            }
        }
        img.put_pixel(
            c as u32,
            r as u32,
            Rgb([px[0] as u8, px[1] as u8, px[2] as u8]),
        );
    }
    let (upper, lower) = extract_boundaries(&sample.choroid);
    for curve in [&upper, &lower] {
        for (c, row) in curve.rows.iter().enumerate() {
            if let Some(row) = row {
                let r = row.round() as u32;
                if r < h as u32 {
                    img.put_pixel(c as u32, r, GT_BOUNDARY);
                }
            }
        }
    }
    img.save(path).context("encoding overlay png")
}

/// Total-loss-per-epoch curves, one series per mode.
pub fn plot_loss_curves(path: &Path, logs: &BTreeMap<String, TrainLog>) -> Result<()> {
    use plotters::prelude::*;

    let max_epoch = logs
        .values()
        .map(|l| l.records.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let max_loss = logs
        .values()
        .flat_map(|l| l.records.iter().map(|r| r.loss_total))
        .fold(1e-9f64, f64::max);

    let root = BitMapBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0usize..max_epoch - 1, 0f64..max_loss * 1.05)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("total loss")
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    for (i, (name, log)) in logs.iter().enumerate() {
        let color = palette[i % palette.len()];
        chart
            .draw_series(LineSeries::new(
                log.records.iter().map(|r| (r.epoch, r.loss_total)),
                color.stroke_width(2),
            ))
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(())
}

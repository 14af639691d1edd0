//! Small deterministic figure renderer: psychometric curve plots and image
//! grids, written as PNG without timestamps or other run-varying metadata.

pub mod font;

use crate::error::Result;
use crate::psychometrics::PsychometricFit;
use image::{Rgb, RgbImage};

pub const HUMAN_COLOR: [u8; 3] = [0, 150, 60];
pub const MODEL_COLORS: &[(&str, [u8; 3])] = &[
    ("alexnet", [215, 180, 0]),
    ("vgg11", [210, 40, 40]),
    ("vgg13", [200, 40, 200]),
    ("vgg16", [40, 70, 210]),
    ("fe_alexnet", [20, 20, 20]),
];

pub fn color_for_model(name: &str) -> [u8; 3] {
    MODEL_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .unwrap_or([90, 90, 90])
}

/// The published figures draw the excitation variant as a dashed line.
pub fn dashed_for_model(name: &str) -> bool {
    name == "fe_alexnet"
}

/// Classic jet colormap for heatmap overlays.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let c = |v: f64| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    [
        c(1.5 - (4.0 * t - 3.0).abs()),
        c(1.5 - (4.0 * t - 2.0).abs()),
        c(1.5 - (4.0 * t - 1.0).abs()),
    ]
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Line segment with optional dashing, drawn by dense sampling.
pub fn draw_line(
    img: &mut RgbImage,
    a: (f64, f64),
    b: (f64, f64),
    color: [u8; 3],
    thickness: i64,
    dashed: bool,
) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let steps = (len.ceil() as usize).max(1) * 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        if dashed && ((t * len / 6.0) as i64) % 2 == 1 {
            continue;
        }
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        for dy in -thickness / 2..=thickness / 2 {
            for dx in -thickness / 2..=thickness / 2 {
                put(img, x.round() as i64 + dx, y.round() as i64 + dy, color);
            }
        }
    }
}

pub fn draw_marker(img: &mut RgbImage, center: (f64, f64), color: [u8; 3], radius: i64) {
    let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

/// One curve on a psychometric figure: observed points plus, when present,
/// the fitted function sampled densely.
pub struct CurveSeries {
    pub label: String,
    pub color: [u8; 3],
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
    pub fit: Option<PsychometricFit>,
}

/// Renders the response-probability figure: x = morph proportion, y =
/// probability / proportion of positive responses, both on [0, 1].
pub fn psychometric_figure(series: &[CurveSeries], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (ml, mr, mt, mb) = (64i64, 18i64, 16i64, 46i64);
    let (x0, y0) = (ml as f64, (height as i64 - mb) as f64);
    let (x1, y1) = ((width as i64 - mr) as f64, mt as f64);
    let to_px = |x: f64, y: f64| (x0 + (x1 - x0) * x, y0 + (y1 - y0) * y);

    let axis = [0, 0, 0];
    draw_line(&mut img, (x0, y0), (x1, y0), axis, 1, false);
    draw_line(&mut img, (x0, y0), (x0, y1), axis, 1, false);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let (tx, _) = to_px(v, 0.0);
        draw_line(&mut img, (tx, y0), (tx, y0 + 4.0), axis, 1, false);
        font::draw_text(
            &mut img,
            tx as i64 - 12,
            y0 as i64 + 8,
            &format!("{v:.2}"),
            axis,
            1,
        );
        let (_, py) = to_px(0.0, v);
        draw_line(&mut img, (x0 - 4.0, py), (x0, py), axis, 1, false);
        font::draw_text(&mut img, 8, py as i64 - 3, &format!("{v:.2}"), axis, 1);
    }
    font::draw_text(&mut img, (x0 as i64 + x1 as i64) / 2 - 60, height as i64 - 14, "MORPH PROPORTION", axis, 1);
    font::draw_text(&mut img, 8, mt - 8, "P(POSITIVE)", axis, 1);

    // Mid-line at P = 0.5.
    let (_, half_y) = to_px(0.0, 0.5);
    draw_line(&mut img, (x0, half_y), (x1, half_y), [200, 200, 200], 1, true);

    for s in series {
        if let Some(fit) = &s.fit {
            let mut prev: Option<(f64, f64)> = None;
            for i in 0..=240 {
                let x = i as f64 / 240.0;
                let y = fit.value(x).clamp(0.0, 1.0);
                let p = to_px(x, y);
                if let Some(pp) = prev {
                    draw_line(&mut img, pp, p, s.color, 1, s.dashed);
                }
                prev = Some(p);
            }
        }
        for &(x, y) in &s.points {
            let p = to_px(x, y.clamp(0.0, 1.0));
            draw_marker(&mut img, p, s.color, 2);
        }
    }

    // Legend, top-left inside the axes.
    for (i, s) in series.iter().enumerate() {
        let ly = mt + 8 + (i as i64) * 12;
        let lx = ml + 10;
        draw_line(
            &mut img,
            (lx as f64, ly as f64 + 3.0),
            (lx as f64 + 18.0, ly as f64 + 3.0),
            s.color,
            2,
            s.dashed,
        );
        font::draw_text(&mut img, lx + 24, ly, &s.label, [0, 0, 0], 1);
    }
    img
}

/// Assembles labeled cells into a grid image with row labels on the left and
/// column labels on top. All cells must share dimensions.
pub fn image_grid(
    rows: &[(String, Vec<RgbImage>)],
    col_labels: &[String],
) -> Result<RgbImage> {
    let first = rows
        .first()
        .and_then(|(_, cells)| cells.first())
        .ok_or_else(|| crate::error::Error::EmptyInput("grid needs at least one cell".into()))?;
    let (cw, ch) = first.dimensions();
    for (_, cells) in rows {
        for c in cells {
            if c.dimensions() != (cw, ch) {
                return Err(crate::error::Error::ShapeMismatch(
                    "grid cells must share dimensions".into(),
                ));
            }
        }
    }
    let n_cols = rows.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let label_w = 110u32;
    let label_h = 18u32;
    let gap = 2u32;
    let width = label_w + n_cols as u32 * (cw + gap);
    let height = label_h + rows.len() as u32 * (ch + gap);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (ci, label) in col_labels.iter().enumerate().take(n_cols) {
        let x = label_w + ci as u32 * (cw + gap);
        font::draw_text(&mut img, x as i64 + 2, 4, label, [0, 0, 0], 1);
    }
    for (ri, (label, cells)) in rows.iter().enumerate() {
        let y = label_h + ri as u32 * (ch + gap);
        font::draw_text(&mut img, 2, y as i64 + (ch as i64) / 2 - 4, label, [0, 0, 0], 1);
        for (ci, cell) in cells.iter().enumerate() {
            let x = label_w + ci as u32 * (cw + gap);
            image::imageops::replace(&mut img, cell, x as i64, y as i64);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        // Low values are blue-ish, high values red-ish, out-of-range clamped.
        let low = jet(0.0);
        let high = jet(1.0);
        assert!(low[2] > low[0], "low end blue: {low:?}");
        assert!(high[0] > high[2], "high end red: {high:?}");
        assert_eq!(jet(-1.0), jet(0.0));
        assert_eq!(jet(2.0), jet(1.0));
    }

    #[test]
    fn figure_is_deterministic() {
        let series = vec![CurveSeries {
            label: "demo".into(),
            color: [10, 20, 30],
            dashed: false,
            points: vec![(0.0, 0.1), (0.5, 0.55), (1.0, 0.9)],
            fit: None,
        }];
        let a = psychometric_figure(&series, 320, 240);
        let b = psychometric_figure(&series, 320, 240);
        assert_eq!(a, b);
    }

    #[test]
    fn grid_rejects_mixed_sizes() {
        let a = RgbImage::new(8, 8);
        let b = RgbImage::new(9, 8);
        let rows = vec![("r".to_string(), vec![a, b])];
        assert!(image_grid(&rows, &["c1".into(), "c2".into()]).is_err());
    }

    #[test]
    fn grid_layout_dimensions() {
        let cell = RgbImage::new(16, 16);
        let rows = vec![
            ("m1".to_string(), vec![cell.clone(), cell.clone()]),
            ("m2".to_string(), vec![cell.clone(), cell.clone()]),
        ];
        let grid = image_grid(&rows, &["0%".into(), "100%".into()]).unwrap();
        assert_eq!(grid.width(), 110 + 2 * 18);
        assert_eq!(grid.height(), 18 + 2 * 18);
    }

    #[test]
    fn text_rendering_marks_pixels() {
        let mut img = RgbImage::from_pixel(64, 16, Rgb([255, 255, 255]));
        font::draw_text(&mut img, 2, 2, "A1%", [0, 0, 0], 1);
        let dark = img.pixels().filter(|p| p.0 == [0, 0, 0]).count();
        assert!(dark > 10, "glyphs must render, got {dark} dark pixels");
    }
}

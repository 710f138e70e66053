//! Minimal line charts rendered straight to PNG.
//!
//! No text rendering: axes, light grid lines at the data range quartiles and
//! one coloured polyline per series. Series colours follow [`SERIES_COLOURS`]
//! in order, so the summary file written next to a plot doubles as its legend.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const SERIES_COLOURS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut it = series.iter().flat_map(|s| &s.points).filter(|p| p.0.is_finite() && p.1.is_finite());
    let first = it.next()?;
    let (mut x0, mut x1, mut y0, mut y1) = (first.0, first.0, first.1, first.1);
    for &(x, y) in it {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    Some((x0, x1, y0, y1))
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        put(img, x, y, c);
        put(img, x + 1.0, y, c);
        put(img, x, y + 1.0, c);
    }
}

/// Renders the chart in memory. Non-finite points break a polyline.
pub fn render(series: &[Series]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as f64, HEIGHT as f64);
    let grid = Rgb([225, 225, 225]);
    for q in 0..=4 {
        let f = q as f64 / 4.0;
        let y = MARGIN + f * (h - 2.0 * MARGIN);
        let x = MARGIN + f * (w - 2.0 * MARGIN);
        line(&mut img, (MARGIN, y), (w - MARGIN, y), grid);
        line(&mut img, (x, MARGIN), (x, h - MARGIN), grid);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);

    let Some((x0, x1, y0, y1)) = bounds(series) else {
        return img;
    };
    let map = |(x, y): (f64, f64)| {
        (
            MARGIN + (x - x0) / (x1 - x0) * (w - 2.0 * MARGIN),
            h - MARGIN - (y - y0) / (y1 - y0) * (h - 2.0 * MARGIN),
        )
    };
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(SERIES_COLOURS[i % SERIES_COLOURS.len()]);
        let mut prev: Option<(f64, f64)> = None;
        for &p in &s.points {
            if !(p.0.is_finite() && p.1.is_finite()) {
                prev = None;
                continue;
            }
            let q = map(p);
            match prev {
                Some(a) => line(&mut img, a, q, c),
                None => line(&mut img, q, q, c),
            }
            prev = Some(q);
        }
    }
    img
}

pub fn save_line_plot(path: &Path, series: &[Series]) -> Result<()> {
    render(series).save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

//! Minimal raster charts. Every PNG gets a `<out>.json` sidecar holding the
//! plotted numbers, so consumers never have to read pixels.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::training::LossTrace;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [Rgb<u8>; 3] = [Rgb([20, 20, 20]), Rgb([31, 119, 180]), Rgb([214, 39, 40])];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSeries {
    pub steps: Vec<usize>,
    pub total: Vec<f64>,
    pub ce: Vec<f64>,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarGroup {
    pub scanner: String,
    pub dice: f64,
    pub avd: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlotData {
    Trace(TraceSeries),
    Report { groups: Vec<BarGroup> },
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
        };
        let (x0, y0, x1, y1) = c.frame();
        c.line(x0, y1, x1, y1, AXIS);
        c.line(x0, y0, x0, y1, AXIS);
        c
    }

    fn frame(&self) -> (i64, i64, i64, i64) {
        (MARGIN, MARGIN / 2, WIDTH as i64 - MARGIN / 2, HEIGHT as i64 - MARGIN)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    // Bresenham
    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.img
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

fn write_sidecar(png: &Path, data: &PlotData) -> Result<()> {
    let p = sidecar_path(png);
    std::fs::write(&p, serde_json::to_string_pretty(data)?).map_err(|e| Error::io(&p, e))
}

/// Loss curves: total, CE and Dice terms against step.
pub fn plot_trace(trace: &LossTrace, out: &Path) -> Result<PlotData> {
    if trace.is_empty() {
        return Err(Error::Config("loss trace has no records".into()));
    }
    let r = &trace.records;
    let series = TraceSeries {
        steps: r.iter().map(|x| x.step).collect(),
        total: r.iter().map(|x| x.total).collect(),
        ce: r.iter().map(|x| x.ce).collect(),
        dice: r.iter().map(|x| x.dice).collect(),
    };
    let all = series.total.iter().chain(&series.ce).chain(&series.dice);
    let ymax = all.copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12);
    let (s0, s1) = (series.steps[0] as f64, *series.steps.last().expect("nonempty") as f64);

    let mut c = Canvas::new();
    let (x0, y0, x1, y1) = c.frame();
    let px = |s: usize| x0 + ((s as f64 - s0) / (s1 - s0).max(1.0) * (x1 - x0) as f64).round() as i64;
    let py = |v: f64| y1 - (v / ymax * (y1 - y0) as f64).round() as i64;
    for (values, color) in [&series.total, &series.ce, &series.dice].into_iter().zip(PALETTE) {
        let pts: Vec<(i64, i64)> = series.steps.iter().zip(values).map(|(&s, &v)| (px(s), py(v))).collect();
        if pts.len() == 1 {
            c.rect(pts[0].0 - 1, pts[0].1 - 1, pts[0].0 + 1, pts[0].1 + 1, color);
        }
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
    }
    c.save(out)?;
    let data = PlotData::Trace(series);
    write_sidecar(out, &data)?;
    Ok(data)
}

/// One group of DICE / AVD / F1 bars per scanner.
pub fn plot_report(report: &MetricsReport, out: &Path) -> Result<PlotData> {
    if report.scanners.is_empty() {
        return Err(Error::Config("report has no scanner groups".into()));
    }
    let groups: Vec<BarGroup> = report
        .scanners
        .iter()
        .map(|g| BarGroup {
            scanner: g.scanner.clone(),
            dice: g.dice,
            avd: g.avd,
            f1: g.f1,
        })
        .collect();
    let ymax = groups
        .iter()
        .flat_map(|g| [g.dice, g.avd.unwrap_or(0.0), g.f1])
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);

    let mut c = Canvas::new();
    let (x0, y0, x1, y1) = c.frame();
    let slot = (x1 - x0) / groups.len() as i64;
    let bar = (slot / 4).max(1);
    for (gi, g) in groups.iter().enumerate() {
        let left = x0 + gi as i64 * slot + bar / 2;
        for (bi, (v, color)) in [g.dice, g.avd.unwrap_or(0.0), g.f1].into_iter().zip(PALETTE).enumerate() {
            let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
            let top = y1 - (v / ymax * (y1 - y0) as f64).round() as i64;
            let bx = left + bi as i64 * bar;
            if top < y1 {
                c.rect(bx, top, bx + bar - 2, y1 - 1, color);
            }
        }
    }
    c.save(out)?;
    let data = PlotData::Report { groups };
    write_sidecar(out, &data)?;
    Ok(data)
}

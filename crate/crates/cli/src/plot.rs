//! Static trajectory plots: observed history solid, ground truth dashed,
//! hypotheses translucent with the best-of-K sample opaque.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use fepdiff::dataio::{Point, Trajectory};
use fepdiff::metrics;
use image::{Rgba, RgbaImage};

const BACKGROUND: Rgba<u8> = Rgba([255, 255, 255, 255]);
const HISTORY: [u8; 3] = [20, 20, 20];
const TRUTH: [u8; 3] = [30, 120, 30];
const HYPOTHESIS: [u8; 3] = [200, 40, 40];
const MARGIN: f64 = 20.0;

/// One agent's drawing inputs, in meters.
pub struct AgentPlot {
    pub history: Trajectory,
    pub truth: Option<Trajectory>,
    pub hypotheses: Vec<Trajectory>,
}

struct View {
    min: Point,
    scale: f64,
    height: f64,
}

impl View {
    /// Equal-aspect fit of every point into the canvas.
    fn fit(points: &[Point], width: u32, height: u32) -> View {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                min[c] = min[c].min(p[c]);
                max[c] = max[c].max(p[c]);
            }
        }
        let span = [(max[0] - min[0]).max(1e-6), (max[1] - min[1]).max(1e-6)];
        let usable = [
            (width as f64 - 2.0 * MARGIN).max(1.0),
            (height as f64 - 2.0 * MARGIN).max(1.0),
        ];
        View {
            min,
            scale: (usable[0] / span[0]).min(usable[1] / span[1]),
            height: height as f64,
        }
    }

    fn pixel(&self, p: Point) -> [f64; 2] {
        // image rows grow downward
        [
            MARGIN + (p[0] - self.min[0]) * self.scale,
            self.height - MARGIN - (p[1] - self.min[1]) * self.scale,
        ]
    }
}

fn blend(img: &mut RgbaImage, x: i64, y: i64, rgb: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let px = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        px.0[c] = (alpha * rgb[c] as f64 + (1.0 - alpha) * px.0[c] as f64).round() as u8;
    }
}

/// Polyline of `thickness` pixels; `dash` is an on/off period in pixels.
fn polyline(img: &mut RgbaImage, view: &View, pts: &[Point], rgb: [u8; 3], alpha: f64, dash: Option<f64>) {
    let thickness = 2i64;
    let mut travelled = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (view.pixel(w[0]), view.pixel(w[1]));
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let steps = len.ceil().max(1.0) as usize;
        for s in 0..steps {
            let f = s as f64 / steps as f64;
            let along = travelled + f * len;
            if dash.is_some_and(|d| (along / d) as i64 % 2 == 1) {
                continue;
            }
            let (x, y) = (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]));
            for dx in 0..thickness {
                for dy in 0..thickness {
                    blend(img, x.round() as i64 + dx, y.round() as i64 + dy, rgb, alpha);
                }
            }
        }
        travelled += len;
    }
}

/// Renders the agents and writes a PNG of `width` x `height` pixels.
pub fn render(agents: &[AgentPlot], width: u32, height: u32, out: &Path) -> Result<()> {
    ensure!(width > 0 && height > 0, "image dimensions must be positive");
    ensure!(!agents.is_empty(), "nothing to plot");
    let all: Vec<Point> = agents
        .iter()
        .flat_map(|a| {
            let truth = a.truth.iter().flat_map(|t| t.points().iter().copied());
            let hyps = a.hypotheses.iter().flat_map(|t| t.points().iter().copied());
            a.history.points().iter().copied().chain(truth).chain(hyps)
        })
        .collect();
    let view = View::fit(&all, width, height);
    let mut img = RgbaImage::from_pixel(width, height, BACKGROUND);
    for a in agents {
        // hypotheses start from the last observed position
        let anchor = a.history.last();
        let joined = |t: &Trajectory| -> Vec<Point> { anchor.into_iter().chain(t.points().iter().copied()).collect() };
        let best = match &a.truth {
            Some(gt) => a
                .hypotheses
                .iter()
                .enumerate()
                .map(|(k, h)| (k, metrics::ade(h, gt).unwrap_or(f64::INFINITY)))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(k, _)| k),
            None => None,
        };
        for (k, h) in a.hypotheses.iter().enumerate() {
            if Some(k) != best {
                polyline(&mut img, &view, &joined(h), HYPOTHESIS, 0.25, None);
            }
        }
        if let Some(k) = best {
            polyline(&mut img, &view, &joined(&a.hypotheses[k]), HYPOTHESIS, 1.0, None);
        }
        if let Some(gt) = &a.truth {
            polyline(&mut img, &view, &joined(gt), TRUTH, 1.0, Some(6.0));
        }
        polyline(&mut img, &view, a.history.points(), HISTORY, 1.0, None);
    }
    let tmp = out.with_extension("partial.png");
    img.save(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, out).with_context(|| format!("writing {}", out.display()))
}

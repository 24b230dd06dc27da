//! 2-D SVG frames: particles over iso-density contours of a mixture.

use std::fmt::Write as _;

use nalgebra::{dvector, DVector};

use crate::prior::GaussianMixture;

const SIZE: f64 = 480.0;
const GRID: usize = 120;

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = (x - self.lo[0]) / (self.hi[0] - self.lo[0]) * SIZE;
        let v = SIZE - (y - self.lo[1]) / (self.hi[1] - self.lo[1]) * SIZE;
        (u, v)
    }
}

fn bounds(density: &GaussianMixture, points: &[DVector<f64>]) -> Frame {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let comps = density.components().iter().flat_map(|c| {
        let spread = 3.0 * c.cov.to_matrix(2).diagonal().map(f64::sqrt).max();
        [&c.mean - DVector::repeat(2, spread), &c.mean + DVector::repeat(2, spread)]
    });
    for p in comps.chain(points.iter().cloned()) {
        for k in 0..2 {
            if p[k].is_finite() {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    // Square aspect so circles stay circles.
    let half = (0..2).map(|k| 0.5 * (hi[k] - lo[k])).fold(1e-6, f64::max) * 1.05;
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    Frame {
        lo: [mid[0] - half, mid[1] - half],
        hi: [mid[0] + half, mid[1] + half],
    }
}

/// Marching-squares segments of `field` at `level` on a regular grid.
fn contour(field: &[f64], n: usize, level: f64, frame: &Frame, out: &mut String) {
    let dx = (frame.hi[0] - frame.lo[0]) / (n - 1) as f64;
    let dy = (frame.hi[1] - frame.lo[1]) / (n - 1) as f64;
    let at = |i: usize, j: usize| field[j * n + i];
    let lerp = |a: f64, b: f64| (level - a) / (b - a);
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let v = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let mut hits = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (v[e], v[(e + 1) % 4]);
                if (a >= level) != (b >= level) {
                    let f = lerp(a, b);
                    let (ca, cb) = (corners[e], corners[(e + 1) % 4]);
                    let x = frame.lo[0] + dx * (ca.0 as f64 + f * (cb.0 as f64 - ca.0 as f64));
                    let y = frame.lo[1] + dy * (ca.1 as f64 + f * (cb.1 as f64 - ca.1 as f64));
                    hits.push(frame.px(x, y));
                }
            }
            for pair in hits.chunks(2).filter(|p| p.len() == 2) {
                let _ = write!(
                    out,
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                );
            }
        }
    }
}

pub fn scatter_svg(density: &GaussianMixture, points: &[DVector<f64>], title: &str) -> String {
    let frame = bounds(density, points);
    let dx = (frame.hi[0] - frame.lo[0]) / (GRID - 1) as f64;
    let dy = (frame.hi[1] - frame.lo[1]) / (GRID - 1) as f64;
    let field: Vec<f64> = (0..GRID * GRID)
        .map(|k| {
            let (i, j) = (k % GRID, k / GRID);
            density.log_density(&dvector![frame.lo[0] + dx * i as f64, frame.lo[1] + dy * j as f64]).exp()
        })
        .collect();
    let peak = field.iter().copied().fold(0.0, f64::max);
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    s.push_str("<g stroke=\"#8aa\" stroke-width=\"1\" fill=\"none\">");
    for frac in [0.05, 0.2, 0.4, 0.6, 0.8] {
        contour(&field, GRID, frac * peak, &frame, &mut s);
    }
    s.push_str("</g><g fill=\"#c33\" fill-opacity=\"0.7\">");
    for p in points {
        let (u, v) = frame.px(p[0], p[1]);
        let _ = write!(s, "<circle cx=\"{u:.2}\" cy=\"{v:.2}\" r=\"3\"/>");
    }
    let _ = write!(s, "</g><text x=\"8\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{title}</text></svg>\n");
    s
}

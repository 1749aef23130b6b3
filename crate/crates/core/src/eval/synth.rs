//! Piecewise-smooth synthetic grayscale images: shaded ellipses and
//! rectangles over a smooth background, some carrying a periodic texture.
//! They stand in for natural images in tests and demos.

use rand::Rng as _;

use crate::measure::SignalVector;
use crate::rng;

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

struct Layer {
    shape: Shape,
    level: f64,
    /// Linear shading `(d/dy, d/dx)` in units of the image size.
    slope: (f64, f64),
    /// Amplitude and wave vector of an optional texture.
    texture: Option<(f64, f64, f64)>,
}

/// An `h x w` image with values in `[0, 1]`, fully determined by `seed`.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> SignalVector<f64> {
    let mut r = rng::stream(seed, "synth");
    let bg = (r.random_range(0.2..0.8), r.random_range(-0.3..0.3), r.random_range(-0.3..0.3));
    let count = r.random_range(6..=12);
    let layers: Vec<Layer> = (0..count)
        .map(|_| {
            let shape = if r.random_bool(0.5) {
                Shape::Ellipse {
                    cy: r.random(),
                    cx: r.random(),
                    ry: r.random_range(0.05..0.35),
                    rx: r.random_range(0.05..0.35),
                    angle: r.random_range(0.0..std::f64::consts::PI),
                }
            } else {
                let (y0, x0): (f64, f64) = (r.random_range(-0.1..0.9), r.random_range(-0.1..0.9));
                Shape::Rect { y0, x0, y1: y0 + r.random_range(0.05..0.5), x1: x0 + r.random_range(0.05..0.5) }
            };
            let texture = r.random_bool(0.3).then(|| {
                let period = r.random_range(0.03..0.12);
                let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                (r.random_range(0.03..0.1), k * theta.sin(), k * theta.cos())
            });
            Layer {
                shape,
                level: r.random_range(0.05..0.95),
                slope: (r.random_range(-0.4..0.4), r.random_range(-0.4..0.4)),
                texture,
            }
        })
        .collect();
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
            let mut v = bg.0 + bg.1 * (y - 0.5) + bg.2 * (x - 0.5);
            for l in &layers {
                if l.shape.contains(y, x) {
                    v = l.level + l.slope.0 * (y - 0.5) + l.slope.1 * (x - 0.5);
                    if let Some((amp, ky, kx)) = l.texture {
                        v += amp * (ky * y + kx * x).sin();
                    }
                }
            }
            values.push(v.clamp(0.0, 1.0));
        }
    }
    SignalVector::new(h, w, values).expect("length matches shape")
}

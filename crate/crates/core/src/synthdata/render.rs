use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Star,
    Hexagon,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Star => "star",
            Shape::Hexagon => "hexagon",
        }
    }

    /// Membership test in box-normalised coordinates `u, v` in `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.92 && v.abs() <= 0.92,
            Shape::Triangle => u.abs() <= (v + 1.0) * 0.5,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            Shape::Star => {
                let r = (u * u + v * v).sqrt();
                let theta = v.atan2(u) + std::f64::consts::FRAC_PI_2;
                let lobe = (2.5 * theta).cos().abs();
                r <= 0.42 + 0.58 * lobe.powf(3.0)
            }
            Shape::Hexagon => v.abs() <= 0.866 && 0.5 * v.abs() + 0.866 * u.abs() <= 0.866,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta, Color::Orange, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::Purple => "purple",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.78, 0.20],
            Color::Blue => [0.18, 0.30, 0.95],
            Color::Yellow => [0.95, 0.88, 0.12],
            Color::Cyan => [0.10, 0.85, 0.88],
            Color::Magenta => [0.90, 0.20, 0.85],
            Color::Orange => [1.00, 0.55, 0.05],
            Color::Purple => [0.50, 0.15, 0.70],
        }
    }
}

pub(super) struct Canvas {
    width: usize,
    height: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    /// Low-saturation gradient background.
    pub fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let level: f64 = rng.gen_range(0.30..0.55);
        let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        let (gx, gy): (f64, f64) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
        let mut px = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let g = gx * (x as f64 / width as f64 - 0.5) + gy * (y as f64 / height as f64 - 0.5);
                px.push([level + tint[0] + g, level + tint[1] + g, level + tint[2] + g]);
            }
        }
        Canvas { width, height, px }
    }

    pub fn draw_shape(&mut self, b: &BoundingBox, shape: Shape, color: Color, rng: &mut ChaCha8Rng) {
        let gain: f64 = rng.gen_range(0.85..1.1);
        let rgb = color.rgb().map(|c| (c * gain).min(1.0));
        let (cx, cy) = b.center();
        let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
        for y in b.y_min as usize..b.y_max as usize {
            for x in b.x_min as usize..b.x_max as usize {
                let u = (x as f64 + 0.5 - cx) / hw;
                let v = (y as f64 + 0.5 - cy) / hh;
                if shape.contains(u, v) {
                    self.px[y * self.width + x] = rgb;
                }
            }
        }
    }

    /// Uncategorised scribble: a few thick random strokes inside `b`.
    pub fn draw_clutter(&mut self, b: &BoundingBox, color: Color, rng: &mut ChaCha8Rng) {
        let rgb = color.rgb().map(|c| c * 0.9);
        let n_strokes = rng.gen_range(3..=4);
        let pt = |rng: &mut ChaCha8Rng| (rng.gen_range(b.x_min + 1.0..b.x_max - 1.0), rng.gen_range(b.y_min + 1.0..b.y_max - 1.0));
        let mut last = pt(rng);
        for _ in 0..n_strokes {
            let next = pt(rng);
            let steps = 4 * ((next.0 - last.0).abs().max((next.1 - last.1).abs()) as usize + 1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (last.0 + t * (next.0 - last.0), last.1 + t * (next.1 - last.1));
                for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                    let (xi, yi) = ((x - 0.5 + dx) as usize, (y - 0.5 + dy) as usize);
                    let inside = (xi as f64) >= b.x_min && (xi as f64) < b.x_max && (yi as f64) >= b.y_min && (yi as f64) < b.y_max;
                    if inside {
                        self.px[yi * self.width + xi] = rgb;
                    }
                }
            }
            last = next;
        }
    }

    pub fn add_noise(&mut self, rng: &mut ChaCha8Rng) {
        for p in &mut self.px {
            for c in p.iter_mut() {
                *c += 0.03 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    pub fn into_image(self) -> Image {
        let mut rgb = Vec::with_capacity(self.width * self.height * 3);
        for p in &self.px {
            for &c in p {
                rgb.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Image { width: self.width, height: self.height, rgb }
    }
}

//! Class-conditional parametric scenes and the paired augmentations.

use rand::Rng;

use crate::rng::stream_rng;

/// An RGB image with values in `[0, 1]`, stored row-major as `side × side × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub class_label: usize,
    pub sample_id: usize,
}

impl ImageSample {
    pub fn new(side: usize, class_label: usize, sample_id: usize) -> Self {
        ImageSample { side, pixels: vec![0.0; side * side * 3], class_label, sample_id }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.side + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous coordinates, clamped to the border.
    fn sample(&self, y: f32, x: f32) -> [f32; 3] {
        let max = (self.side - 1) as f32;
        let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.side - 1), (x0 + 1).min(self.side - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let (a, b, c, d) = (self.px(y0, x0), self.px(y0, x1), self.px(y1, x0), self.px(y1, x1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bot = c[k] * (1.0 - fx) + d[k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

/// A single augmented view pair (or tuple) derived from one source image.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub source_id: usize,
    pub views: Vec<ImageSample>,
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];

fn inside(shape: Shape, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        Shape::Disk => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
        Shape::Triangle => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        Shape::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Cross => (dy.abs() <= 0.3 * r && dx.abs() <= r) || (dx.abs() <= 0.3 * r && dy.abs() <= r),
    }
}

/// Renders one sample of class `class_label`. Shape type, texture family and
/// base hue are class properties; position, size, hue, texture phase and
/// pixel noise are jittered per sample.
pub fn render_scene(class_label: usize, num_classes: usize, side: usize, sample_id: usize, seed: u64) -> ImageSample {
    let mut rng = stream_rng(seed, "synth", sample_id as u64);
    let shape = SHAPES[class_label % SHAPES.len()];
    let texture = (class_label / SHAPES.len()) % 2;
    let base_hue = class_label as f32 / num_classes as f32;
    let s = side as f32;
    let hue = base_hue + rng.random_range(-0.08..0.08);
    let cy = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let cx = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let radius = s * rng.random_range(0.22..0.34);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let freq = rng.random_range(0.55..0.8);
    let bg_hue = hue + 0.5 + rng.random_range(-0.1..0.1);
    let fg = hsv_to_rgb(hue, rng.random_range(0.65..0.95), rng.random_range(0.7..0.95));
    let mut img = ImageSample::new(side, class_label, sample_id);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f32, x as f32);
            let wave = match texture {
                0 => (fy * freq + phase).sin(),
                _ => ((fx + fy) * freq * 0.7 + phase).sin() * ((fx - fy) * freq * 0.7).cos(),
            };
            let mut rgb = hsv_to_rgb(bg_hue, 0.35, 0.45 + 0.15 * wave);
            if inside(shape, fy - cy, fx - cx, radius) {
                rgb = fg;
            }
            for c in rgb.iter_mut() {
                *c = (*c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
            img.set(y, x, rgb);
        }
    }
    img
}

/// `num_classes × per_class` samples, ordered by class then index.
pub fn synth_dataset(num_classes: usize, per_class: usize, image_side: usize, seed: u64) -> Vec<ImageSample> {
    (0..num_classes * per_class)
        .map(|id| render_scene(id / per_class, num_classes, image_side, id, seed))
        .collect()
}

/// Random resized crop (area scale in `[0.8, 1]`), horizontal flip with
/// probability 0.5 and a small hue rotation. Label and id are preserved.
pub fn augment(image: &ImageSample, seed: u64) -> ImageSample {
    let mut rng = stream_rng(seed, "augment", image.sample_id as u64);
    let s = image.side as f32;
    let scale: f32 = rng.random_range(0.8..=1.0);
    let crop = s * scale.sqrt();
    let oy = rng.random_range(0.0..=(s - crop));
    let ox = rng.random_range(0.0..=(s - crop));
    let flip = rng.random_bool(0.5);
    let hue_shift: f32 = rng.random_range(-0.03..0.03);
    let mut out = ImageSample::new(image.side, image.class_label, image.sample_id);
    let step = crop / s;
    for y in 0..image.side {
        for x in 0..image.side {
            let sx = if flip { image.side - 1 - x } else { x };
            let src_y = oy + (y as f32 + 0.5) * step - 0.5;
            let src_x = ox + (sx as f32 + 0.5) * step - 0.5;
            let rgb = image.sample(src_y, src_x);
            let (h, sat, v) = rgb_to_hsv(rgb);
            out.set(y, x, hsv_to_rgb(h + hue_shift, sat, v));
        }
    }
    out
}

//! Seeded synthetic data: shape images for the classifier, and noisy scenes
//! with planted framed tiles for the detector and the two-stage pipeline.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dataset::{write_image, DatasetError, Image};

/// Motif classes in sorted order, so directory-derived labels match the
/// indices used here.
pub const SHAPE_CLASSES: [&str; 6] = ["circle", "cross", "hstripes", "square", "triangle", "vstripes"];

/// Whether `(u, v)` (motif-relative, roughly in `[-1, 1]`) lies inside the
/// motif of class `class`.
pub fn motif_contains(class: usize, u: f64, v: f64) -> bool {
    let in_box = u.abs() <= 0.9 && v.abs() <= 0.9;
    match class {
        0 => u * u + v * v <= 0.9,
        1 => (u.abs() <= 0.28 && v.abs() <= 0.9) || (v.abs() <= 0.28 && u.abs() <= 0.9),
        // five bands alternating on, off, on, off, on
        2 => in_box && (((v + 0.9) / 0.36).floor() as i64) % 2 == 0,
        3 => u.abs() <= 0.78 && v.abs() <= 0.78,
        4 => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) / 1.7 * 0.95,
        5 => in_box && (((u + 0.9) / 0.36).floor() as i64) % 2 == 0,
        _ => panic!("motif class {class} out of range"),
    }
}

/// Fraction of a pixel covered by the motif, from 4x4 supersampling.
fn coverage(class: usize, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let u = (px + (sx as f64 + 0.5) / 4.0 - cx) / r;
            let v = (py + (sy as f64 + 0.5) / 4.0 - cy) / r;
            if motif_contains(class, u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luma_of(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// One RGB `size x size` image of a motif with random placement, radius,
/// colours and per-pixel noise. Foreground and background differ in luma by
/// at least 70.
pub fn shape_image<R: Rng>(class: usize, size: usize, rng: &mut R) -> Image {
    let s = size as f64;
    let r = rng.gen_range(0.2 * s..0.38 * s);
    let cx = rng.gen_range(r + 1.0..s - r - 1.0);
    let cy = rng.gen_range(r + 1.0..s - r - 1.0);
    let (bg, fg) = loop {
        let bg = [0; 3].map(|_: i32| rng.gen_range(0.0..255.0));
        let fg = [0; 3].map(|_: i32| rng.gen_range(0.0..255.0));
        if luma_of(fg) - luma_of(bg) >= 70.0 {
            break (bg, fg);
        }
    };
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let a = coverage(class, x as f64, y as f64, cx, cy, r);
            for c in 0..3 {
                let v = bg[c] * (1.0 - a) + fg[c] * a + rng.gen_range(-25.0..25.0);
                pixels.push(clamp_u8(v));
            }
        }
    }
    Image::rgb(size, size, pixels).expect("sizes match")
}

/// Writes `root/<class>/<nnnn>.ppm` for every class. Each image comes from
/// its own seed stream, so the dataset does not depend on write order.
pub fn write_shape_dataset(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<(), DatasetError> {
    for (class, name) in SHAPE_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|source| DatasetError::Io { path: dir.clone(), source })?;
        for i in 0..per_class {
            let mut rng = stream_rng(seed, (class * per_class + i) as u64);
            write_image(&dir.join(format!("{i:04}.ppm")), &shape_image(class, size, &mut rng))?;
        }
    }
    Ok(())
}

/// ChaCha8 generator for one numbered item of a seeded collection.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gray clutter: a coarse random grid upsampled bilinearly, random
/// rectangles, outlines, bars and disks, plus pixel noise.
pub fn background<R: Rng>(width: usize, height: usize, rng: &mut R) -> Image {
    let cell = 8usize;
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(50.0..200.0)).collect();
    let mut field = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            field.push(
                (g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx) * (1.0 - ty)
                    + (g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx) * ty,
            );
        }
    }
    let shapes = (width * height / 1500).max(1);
    for _ in 0..shapes {
        let w = rng.gen_range(4..=(width / 2).max(5));
        let h = rng.gen_range(4..=(height / 2).max(5));
        let x0 = rng.gen_range(0..width) as isize - (w / 2) as isize;
        let y0 = rng.gen_range(0..height) as isize - (h / 2) as isize;
        let value = rng.gen_range(0.0..255.0);
        let kind = rng.gen_range(0..4);
        let line = rng.gen_range(1..=4) as isize;
        for y in y0.max(0)..(y0 + h as isize).min(height as isize) {
            for x in x0.max(0)..(x0 + w as isize).min(width as isize) {
                let (dx, dy) = (x - x0, y - y0);
                let (w, h) = (w as isize, h as isize);
                let paint = match kind {
                    0 => true,
                    1 => dx < line || dy < line || dx >= w - line || dy >= h - line,
                    2 => (dy - h / 2).abs() < line,
                    _ => {
                        let (u, v) = (2.0 * dx as f64 / w as f64 - 1.0, 2.0 * dy as f64 / h as f64 - 1.0);
                        u * u + v * v <= 1.0
                    }
                };
                if paint {
                    field[y as usize * width + x as usize] = value;
                }
            }
        }
    }
    let pixels = field.iter().map(|&v| clamp_u8(v + rng.gen_range(-30.0..30.0))).collect();
    Image::gray(width, height, pixels).expect("sizes match")
}

/// A framed tile planted in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plant {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Draws a tile over `img` (gray): a bright frame around a dark interior
/// holding the class motif in mid-gray. Levels and frame width vary per
/// tile.
pub fn draw_tile<R: Rng>(img: &mut Image, plant: &Plant, rng: &mut R) {
    let Plant { class, x, y, side } = *plant;
    let s = side as f64;
    let frame = (s * rng.gen_range(0.08..0.13)).round().max(1.0);
    let bright = rng.gen_range(190.0..250.0);
    let dark = rng.gen_range(5.0..60.0);
    let mid = rng.gen_range(130.0..180.0);
    let (cx, cy, r) = (s / 2.0, s / 2.0, 0.34 * s);
    let w = img.width();
    for ty in 0..side {
        for tx in 0..side {
            let (fx, fy) = (tx as f64, ty as f64);
            let on_frame = fx < frame || fy < frame || fx >= s - frame || fy >= s - frame;
            let v = if on_frame {
                bright
            } else {
                let a = coverage(class, fx, fy, cx, cy, r);
                dark * (1.0 - a) + mid * a
            };
            img.pixels_mut()[(y + ty) * w + x + tx] = clamp_u8(v + rng.gen_range(-15.0..15.0));
        }
    }
}

/// A gray scene of clutter with the given tiles drawn in order.
pub fn scene<R: Rng>(width: usize, height: usize, plants: &[Plant], rng: &mut R) -> Image {
    let mut img = background(width, height, rng);
    for p in plants {
        assert!(p.x + p.side <= width && p.y + p.side <= height, "plant {p:?} outside the scene");
        draw_tile(&mut img, p, rng);
    }
    img
}

/// A scene holding one tile of a random class, side in `[min_side,
/// max_side]`, at a random position.
pub fn random_scene<R: Rng>(width: usize, height: usize, min_side: usize, max_side: usize, rng: &mut R) -> (Image, Plant) {
    let side = rng.gen_range(min_side..=max_side.min(width).min(height));
    let plant = Plant {
        class: rng.gen_range(0..SHAPE_CLASSES.len()),
        x: rng.gen_range(0..=width - side),
        y: rng.gen_range(0..=height - side),
        side,
    };
    (scene(width, height, &[plant], rng), plant)
}

/// Detector training positive: a tile of a random class with clutter
/// margins adding up to at most a quarter of its side, split at random
/// between the two sides of each axis, resized to `window x window`.
pub fn tile_sample<R: Rng>(window: usize, rng: &mut R) -> Image {
    let side = rng.gen_range(window..=window * 2);
    let margin = rng.gen_range(0..=side / 4);
    let plant = Plant {
        class: rng.gen_range(0..SHAPE_CLASSES.len()),
        x: rng.gen_range(0..=margin),
        y: rng.gen_range(0..=margin),
        side,
    };
    let canvas = scene(side + margin, side + margin, &[plant], rng);
    canvas.resize_bilinear(window, window).expect("positive size")
}

/// A square crop around `plant` with its position and size jittered by up
/// to `jitter` of the side, clamped to the image.
pub fn jittered_crop<R: Rng>(img: &Image, plant: &Plant, jitter: f64, rng: &mut R) -> Image {
    let s = plant.side as f64;
    let side = (s * rng.gen_range(1.0 - jitter..1.0 + jitter)).round().max(2.0) as usize;
    let side = side.min(img.width()).min(img.height());
    let cx = plant.x as f64 + s / 2.0 + rng.gen_range(-jitter..jitter) * s;
    let cy = plant.y as f64 + s / 2.0 + rng.gen_range(-jitter..jitter) * s;
    let x = (cx - side as f64 / 2.0).round().clamp(0.0, (img.width() - side) as f64) as usize;
    let y = (cy - side as f64 / 2.0).round().clamp(0.0, (img.height() - side) as f64) as usize;
    img.crop(x, y, side, side).expect("crop clamped to the image")
}

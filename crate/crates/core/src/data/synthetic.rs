//! Procedural source images for desk-scale experiments and tests: stroke-rendered
//! handwritten-style digits and rotating blob "objects".

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ImageArray;
use crate::error::{Error, Result};
use crate::rng::seeded;

type Stroke = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|k| {
            let t = from + (to - from) * k as f32 / steps as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines for the ten digits in a unit box (x right, y down).
fn glyph(digit: u32) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.28, 0.4, 0.0, 2.0 * PI, 16)],
        1 => vec![vec![(0.36, 0.26), (0.54, 0.1), (0.54, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.34, 0.15),
            (0.52, 0.1),
            (0.7, 0.18),
            (0.74, 0.34),
            (0.62, 0.54),
            (0.25, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.26, 0.14),
            (0.72, 0.14),
            (0.46, 0.45),
            (0.68, 0.56),
            (0.74, 0.74),
            (0.6, 0.88),
            (0.4, 0.9),
            (0.24, 0.8),
        ]],
        4 => vec![vec![(0.64, 0.9), (0.64, 0.1), (0.2, 0.64), (0.8, 0.64)]],
        5 => vec![vec![
            (0.72, 0.12),
            (0.32, 0.12),
            (0.28, 0.45),
            (0.54, 0.4),
            (0.72, 0.55),
            (0.72, 0.77),
            (0.54, 0.9),
            (0.26, 0.84),
        ]],
        6 => vec![
            vec![(0.68, 0.12), (0.45, 0.26), (0.3, 0.5), (0.28, 0.7)],
            arc(0.5, 0.7, 0.22, 0.2, PI, 3.0 * PI, 14),
        ],
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.46, 0.9)]],
        8 => vec![
            arc(0.5, 0.3, 0.18, 0.18, 0.0, 2.0 * PI, 12),
            arc(0.5, 0.7, 0.22, 0.2, 0.0, 2.0 * PI, 14),
        ],
        9 => vec![
            arc(0.5, 0.32, 0.21, 0.2, 0.0, 2.0 * PI, 14),
            vec![(0.71, 0.32), (0.66, 0.6), (0.56, 0.9)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders `n` digit images of `size × size` with random affine pose, stroke width
/// and control-point wobble. Labels cycle through 0..9 so classes stay balanced.
pub fn render_digits(n: usize, size: usize, seed: u64) -> Result<(ImageArray, Vec<u32>)> {
    if size < 8 {
        return Err(Error::invalid("digit canvas must be at least 8 pixels"));
    }
    let mut rng = seeded(seed, 0xD161);
    let wobble = Normal::new(0.0f32, 0.025).expect("valid normal");
    let mut out = ImageArray::zeros(n, 1, size, size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f32;
    for i in 0..n {
        let digit = (i % 10) as u32;
        labels.push(digit);
        let angle = rng.random_range(-0.3f32..0.3);
        let shear = rng.random_range(-0.25f32..0.25);
        let scale_x = rng.random_range(0.5f32..0.68) * s;
        let scale_y = rng.random_range(0.58f32..0.72) * s;
        let shift = (rng.random_range(-0.08f32..0.08) * s, rng.random_range(-0.08f32..0.08) * s);
        let half_width = rng.random_range(0.045f32..0.085) * s;
        let (sin, cos) = angle.sin_cos();
        let strokes: Vec<Stroke> = glyph(digit)
            .into_iter()
            .map(|stroke| {
                stroke
                    .into_iter()
                    .map(|(x, y)| {
                        let x = x - 0.5 + wobble.sample(&mut rng);
                        let y = y - 0.5 + wobble.sample(&mut rng);
                        let (x, y) = ((x + shear * y) * scale_x, y * scale_y);
                        (
                            cos * x - sin * y + s / 2.0 + shift.0,
                            sin * x + cos * y + s / 2.0 + shift.1,
                        )
                    })
                    .collect()
            })
            .collect();
        let img = out.image_mut(i);
        for y in 0..size {
            for x in 0..size {
                let p = (x as f32 + 0.5, y as f32 + 0.5);
                let d = strokes
                    .iter()
                    .flat_map(|st| st.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                    .fold(f32::INFINITY, f32::min);
                img[y * size + x] = (half_width - d + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    Ok((out, labels))
}

/// Renders `n_objects × n_poses` images of rotating blob objects; object `o`'s
/// poses sweep a full turn. Returns images grouped by object, labels = object id.
pub fn render_objects(
    n_objects: usize,
    n_poses: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<(ImageArray, Vec<u32>)> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid("objects render with 1 or 3 channels"));
    }
    let mut out = ImageArray::zeros(n_objects * n_poses, channels, size, size);
    let mut labels = Vec::with_capacity(n_objects * n_poses);
    let s = size as f32;
    let plane = size * size;
    for o in 0..n_objects {
        let mut rng = seeded(seed, 0x0B1E + o as u64);
        let n_blobs = rng.random_range(3..6);
        let blobs: Vec<_> = (0..n_blobs)
            .map(|_| {
                let r = rng.random_range(0.0f32..0.28);
                let theta = rng.random_range(0.0f32..2.0 * PI);
                let sigma = rng.random_range(0.06f32..0.16);
                let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
                (r, theta, sigma, rng.random_range(0.5f32..1.0), color)
            })
            .collect();
        for p in 0..n_poses {
            let idx = o * n_poses + p;
            labels.push(o as u32);
            let turn = 2.0 * PI * p as f32 / n_poses as f32;
            let img = out.image_mut(idx);
            for &(r, theta, sigma, amp, color) in &blobs {
                // rotation about the vertical axis: horizontal offset foreshortens
                let cx = 0.5 + r * (theta + turn).cos();
                let cy = 0.5 + r * theta.sin() * 0.8;
                let sx = sigma * (0.6 + 0.4 * (theta + turn).sin().abs());
                for y in 0..size {
                    for x in 0..size {
                        let dx = (x as f32 + 0.5) / s - cx;
                        let dy = (y as f32 + 0.5) / s - cy;
                        let v = amp * (-(dx * dx) / (2.0 * sx * sx) - dy * dy / (2.0 * sigma * sigma)).exp();
                        for c in 0..channels {
                            let tint = if channels == 3 { color[c] } else { 1.0 };
                            let px = &mut img[c * plane + y * size + x];
                            *px = (*px + v * tint).min(1.0);
                        }
                    }
                }
            }
        }
    }
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_deterministic_balanced_and_in_range() {
        let (a, la) = render_digits(30, 32, 4).unwrap();
        let (b, lb) = render_digits(30, 32, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(a.in_unit_range());
        for d in 0..10 {
            assert_eq!(la.iter().filter(|&&l| l == d).count(), 3);
        }
        for i in 0..30 {
            let ink: f32 = a.image(i).iter().sum();
            assert!(ink > 20.0, "digit {i} nearly empty ({ink})");
        }
    }

    #[test]
    fn digit_classes_are_distinguishable_on_average() {
        let (imgs, labels) = render_digits(200, 32, 1).unwrap();
        let mean = |d: u32| -> Vec<f32> {
            let rows: Vec<usize> = (0..200).filter(|&i| labels[i] == d).collect();
            let mut m = vec![0.0; 1024];
            for &r in &rows {
                for (a, b) in m.iter_mut().zip(imgs.image(r)) {
                    *a += b / rows.len() as f32;
                }
            }
            m
        };
        let (one, zero) = (mean(1), mean(0));
        let dist: f32 = one.iter().zip(&zero).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 5.0);
    }

    #[test]
    fn objects_shape() {
        let (imgs, labels) = render_objects(3, 6, 16, 3, 0).unwrap();
        assert_eq!(imgs.dims(), (18, 3, 16, 16));
        assert_eq!(labels[6], 1);
        assert!(imgs.in_unit_range());
    }
}

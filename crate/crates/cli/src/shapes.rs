//! Synthetic shapes video: a diamond, then a triangle, then a square, each
//! shown for a block of frames. Within a block the shape visits every cell
//! of a `cells × cells` grid in a seeded order, drifting around the cell
//! centre while it stays.

use mmdpcn::hierarchy::Frame;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Diamond,
    Triangle,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Diamond, Shape::Triangle, Shape::Square];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Diamond => "diamond",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
        }
    }

    /// Whether `(dx, dy)`, relative to the centre and in units of the shape
    /// radius, is inside.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
            Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            Shape::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= 0.5 * (dy + 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapesConfig {
    pub size: usize,
    pub frames_per_shape: usize,
    /// Cells per side; matches the patch grid so each shape fits in a patch.
    pub cells: usize,
    /// Shape radius as a fraction of the cell size.
    pub radius: f64,
    /// Drift amplitude in pixels.
    pub drift: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            size: 16,
            frames_per_shape: 100,
            cells: 2,
            radius: 0.35,
            drift: 0.0,
            noise: 0.02,
        }
    }
}

/// Frames and their shape index (0 diamond, 1 triangle, 2 square).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesVideo {
    pub frames: Vec<Frame>,
    pub labels: Vec<usize>,
}

const SUPERSAMPLE: usize = 4;

fn render(shape: Shape, size: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for row in 0..size {
        for col in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    if shape.contains((x - cx) / radius, (y - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            out[row * size + col] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

/// Generate the video. The same seed gives the same frames bit for bit.
pub fn generate(cfg: &ShapesConfig, seed: u64) -> anyhow::Result<ShapesVideo> {
    anyhow::ensure!(cfg.size >= 16, "frame size must be at least 16, got {}", cfg.size);
    anyhow::ensure!(cfg.frames_per_shape > 0, "frames_per_shape must be positive");
    anyhow::ensure!(cfg.radius > 0.0 && cfg.radius < 0.5, "radius must lie in (0, 0.5)");
    anyhow::ensure!(cfg.noise >= 0.0 && cfg.drift >= 0.0, "noise and drift must be >= 0");
    anyhow::ensure!(
        cfg.cells > 0 && cfg.size % cfg.cells == 0,
        "cells ({}) must divide the frame size ({})",
        cfg.cells,
        cfg.size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise)?;
    let size = cfg.size;
    let cell = (size / cfg.cells) as f64;
    let radius = cfg.radius * cell;
    let n = cfg.frames_per_shape;
    let n_cells = cfg.cells * cfg.cells;

    let mut frames = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(3 * n);
    for (label, shape) in Shape::ALL.iter().enumerate() {
        let mut order: Vec<usize> = (0..n_cells).collect();
        order.shuffle(&mut rng);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for i in 0..n {
            let c = order[(i * n_cells / n).min(n_cells - 1)];
            let a = phase + std::f64::consts::TAU * i as f64 * n_cells as f64 / n as f64;
            let cx = (c % cfg.cells) as f64 * cell + cell / 2.0 + cfg.drift * a.cos();
            let cy = (c / cfg.cells) as f64 * cell + cell / 2.0 + cfg.drift * a.sin();
            let mut data = render(*shape, size, cx, cy, radius);
            if cfg.noise > 0.0 {
                for v in &mut data {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            frames.push(Frame::new(size, size, 1, data)?);
            labels.push(label);
        }
    }
    Ok(ShapesVideo { frames, labels })
}

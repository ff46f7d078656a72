//! Procedural layered-shape scenes with exact occlusion labels.
//!
//! Coordinates: x to the right, y downwards, pixel `(x, y)` sampled at its
//! centre `(x + 0.5, y + 0.5)`. An orientation `θ` puts the nearer region
//! along the normal `n_fg = (-sin θ, cos θ)`. Layer 0 is the nearest; the
//! background sits behind every layer.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::wrap_angle;

/// Resampling attempts per scene before giving up.
pub const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of foreground layers.
    pub layers: (usize, usize),
    /// Families a layer's shape is drawn from.
    pub shapes: Vec<ShapeKind>,
    /// Shape radius range as fractions of the shorter canvas side.
    pub extent: (f64, f64),
    /// Amplitude of the per-layer gradient and stripe texture.
    pub texture: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 96,
            width: 96,
            layers: (1, 3),
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Polygon],
            extent: (0.15, 0.32),
            texture: 0.08,
            noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!("canvas {}x{} is too small", self.height, self.width)));
        }
        if self.layers.0 > self.layers.1 {
            return Err(Error::config(format!("layer range {:?} is empty", self.layers)));
        }
        if self.layers.1 > 0 && self.shapes.is_empty() {
            return Err(Error::config("no shape families to draw layers from"));
        }
        let (lo, hi) = self.extent;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::config(format!("shape extent {:?} must satisfy 0 < lo <= hi < 0.5", self.extent)));
        }
        if self.texture < 0.0 || self.noise < 0.0 || !self.texture.is_finite() || !self.noise.is_finite() {
            return Err(Error::config("texture and noise amplitudes must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    /// Convex polygon, vertices in order.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                let mut sign = 0.0;
                for i in 0..n {
                    let (ax, ay) = vertices[i];
                    let (bx, by) = vertices[(i + 1) % n];
                    let c = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if c == 0.0 {
                        return false;
                    }
                    if sign == 0.0 {
                        sign = c.signum();
                    } else if c.signum() != sign {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Unit normal at the boundary point closest to `(x, y)`, pointing into the shape.
    pub fn inward_normal(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Shape::Disk { cx, cy, .. } => {
                let (dx, dy) = (cx - x, cy - y);
                let len = dx.hypot(dy);
                if len == 0.0 {
                    (0.0, 1.0)
                } else {
                    (dx / len, dy / len)
                }
            }
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                let (gx, gy) = centroid(vertices);
                let mut best = (f64::INFINITY, (0.0, 1.0));
                for i in 0..n {
                    let (ax, ay) = vertices[i];
                    let (bx, by) = vertices[(i + 1) % n];
                    let (ex, ey) = (bx - ax, by - ay);
                    let len2 = ex * ex + ey * ey;
                    let t = (((x - ax) * ex + (y - ay) * ey) / len2).clamp(0.0, 1.0);
                    let d = (ax + t * ex - x).hypot(ay + t * ey - y);
                    if d < best.0 {
                        let len = len2.sqrt();
                        let (mut nx, mut ny) = (-ey / len, ex / len);
                        if nx * (gx - ax) + ny * (gy - ay) < 0.0 {
                            nx = -nx;
                            ny = -ny;
                        }
                        best = (d, (nx, ny));
                    }
                }
                best.1
            }
        }
    }
}

fn centroid(v: &[(f64, f64)]) -> (f64, f64) {
    let n = v.len() as f64;
    let (sx, sy) = v.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    (sx / n, sy / n)
}

/// Orientation whose foreground normal `(-sin θ, cos θ)` equals `n`.
pub fn orientation_from_normal((nx, ny): (f64, f64)) -> f64 {
    // `0.0 - nx` keeps atan2 away from the -0.0 branch cut.
    wrap_angle((0.0 - nx).atan2(ny))
}

/// Foreground normal of an orientation.
pub fn foreground_normal(theta: f64) -> (f64, f64) {
    (-theta.sin(), theta.cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fill {
    pub color: [f64; 3],
    /// Linear shading direction and amplitude per unit canvas length.
    pub gradient: (f64, f64),
    pub stripe_direction: (f64, f64),
    pub stripe_frequency: f64,
    pub stripe_phase: f64,
    pub stripe_amplitude: f64,
}

impl Fill {
    fn random(rng: &mut impl Rng, color: [f64; 3], amplitude: f64) -> Self {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = rng.gen_range(0.0..std::f64::consts::TAU);
        Fill {
            color,
            gradient: (amplitude * a.cos(), amplitude * a.sin()),
            stripe_direction: (s.cos(), s.sin()),
            stripe_frequency: rng.gen_range(0.2..0.8),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            stripe_amplitude: amplitude * rng.gen_range(0.0..1.0),
        }
    }

    fn shade(&self, x: f64, y: f64, scale: f64) -> [f64; 3] {
        let g = (self.gradient.0 * x + self.gradient.1 * y) / scale;
        let s = self.stripe_amplitude
            * (self.stripe_frequency * (self.stripe_direction.0 * x + self.stripe_direction.1 * y) + self.stripe_phase).sin();
        self.color.map(|c| c + g + s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    pub fill: Fill,
}

/// A sampled layout: layers front to back over a textured background.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
    pub background: Fill,
}

impl Scene {
    /// Index of the nearest layer covering the centre of pixel `(x, y)`;
    /// `layers.len()` for the background.
    pub fn owner(&self, x: usize, y: usize) -> usize {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.layers.iter().position(|l| l.shape.contains(px, py)).unwrap_or(self.layers.len())
    }

    pub fn owner_map(&self) -> Array2<usize> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| self.owner(x, y))
    }
}

/// One training example. The image is `H x W x 3` in `[0, 1]`, quantised to
/// multiples of 1/255 so it survives 8-bit storage unchanged. Orientation is
/// 0 off the edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSample {
    pub id: String,
    pub image: Array3<f32>,
    pub edge: Array2<bool>,
    pub orientation: Array2<f32>,
}

impl OcclusionSample {
    pub fn height(&self) -> usize {
        self.edge.nrows()
    }

    pub fn width(&self) -> usize {
        self.edge.ncols()
    }

    pub fn edge_count(&self) -> usize {
        self.edge.iter().filter(|&&e| e).count()
    }
}

fn distinct_color(rng: &mut impl Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.5; 3];
    let mut best_gap = -1.0;
    for _ in 0..32 {
        let c = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let gap = taken
            .iter()
            .map(|t| t.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        if gap >= 0.3 {
            return c;
        }
        if gap > best_gap {
            best = c;
            best_gap = gap;
        }
    }
    best
}

fn random_shape(rng: &mut impl Rng, kind: ShapeKind, spec: &SceneSpec) -> Shape {
    let side = spec.height.min(spec.width) as f64;
    let r = side * rng.gen_range(spec.extent.0..=spec.extent.1);
    let cx = rng.gen_range(r + 1.0..=spec.width as f64 - r - 1.0);
    let cy = rng.gen_range(r + 1.0..=spec.height as f64 - r - 1.0);
    match kind {
        ShapeKind::Disk => Shape::Disk { cx, cy, r },
        ShapeKind::Rectangle => {
            let rot = rng.gen_range(0.0..std::f64::consts::PI);
            let aspect = rng.gen_range(0.45..1.0f64);
            let (a, b) = (r * (1.0 / (1.0 + aspect * aspect)).sqrt(), r * aspect * (1.0 / (1.0 + aspect * aspect)).sqrt());
            let (c, s) = (rot.cos(), rot.sin());
            let vertices = [(a, b), (-a, b), (-a, -b), (a, -b)]
                .iter()
                .map(|&(u, v)| (cx + u * c - v * s, cy + u * s + v * c))
                .collect();
            Shape::Polygon { vertices }
        }
        ShapeKind::Polygon => {
            let n = rng.gen_range(5..=7);
            let step = std::f64::consts::TAU / n as f64;
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|i| {
                    let a = start + step * (i as f64 + rng.gen_range(-0.3..0.3));
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape::Polygon { vertices }
        }
    }
}

/// Draws a layout (no validity checks).
pub fn sample_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Scene {
    let count = rng.gen_range(spec.layers.0..=spec.layers.1);
    let bg_color = distinct_color(rng, &[]);
    let background = Fill::random(rng, bg_color, spec.texture);
    let mut colors = vec![bg_color];
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = *spec.shapes.choose(rng).expect("validated non-empty");
        let shape = random_shape(rng, kind, spec);
        let color = distinct_color(rng, &colors);
        colors.push(color);
        layers.push(Layer { shape, fill: Fill::random(rng, color, spec.texture) });
    }
    Scene { height: spec.height, width: spec.width, layers, background }
}

/// Pixel offset closest to a unit direction.
pub fn round_direction((nx, ny): (f64, f64)) -> (isize, isize) {
    (nx.round() as isize, ny.round() as isize)
}

/// Checks the depth-order oracle at `(x, y)`: the pixel one step along the
/// foreground normal belongs to a strictly nearer layer than the pixel one
/// step against it. Off-canvas neighbours count as failures.
pub fn depth_order_holds(owners: &Array2<usize>, x: usize, y: usize, theta: f64) -> bool {
    let (dx, dy) = round_direction(foreground_normal(theta));
    let (h, w) = owners.dim();
    let at = |sx: isize, sy: isize| {
        let (qx, qy) = (x as isize + sx, y as isize + sy);
        (qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h).then(|| owners[(qy as usize, qx as usize)])
    };
    match (at(dx, dy), at(-dx, -dy)) {
        (Some(front), Some(back)) => front < back,
        _ => false,
    }
}

/// Every edge pixel at least 2 px from the border has two or more
/// 8-neighbours on the edge map. Contours may end near the border: border
/// pixels whose normal points off the canvas fail the depth oracle.
pub fn contours_closed(edge: &Array2<bool>) -> bool {
    let (h, w) = edge.dim();
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            if !edge[(y, x)] {
                continue;
            }
            let mut n = 0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx, dy) != (0, 0) && edge[((y as isize + dy) as usize, (x as isize + dx) as usize)] {
                        n += 1;
                    }
                }
            }
            if n < 2 {
                return false;
            }
        }
    }
    true
}

/// Edge map and orientation labels of a scene, or `None` when a layer is
/// barely visible or the contours do not close.
pub fn label_scene(scene: &Scene) -> Option<(Array2<bool>, Array2<f32>)> {
    let owners = scene.owner_map();
    let (h, w) = owners.dim();
    let mut visible = vec![0usize; scene.layers.len() + 1];
    owners.iter().for_each(|&o| visible[o] += 1);
    if visible[..scene.layers.len()].iter().any(|&v| v < 16) {
        return None;
    }
    let mut edge = Array2::from_elem((h, w), false);
    let mut orientation = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let o = owners[(y, x)];
            let farther = |qx: isize, qy: isize| {
                qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h && owners[(qy as usize, qx as usize)] > o
            };
            let (xi, yi) = (x as isize, y as isize);
            if !(farther(xi - 1, yi) || farther(xi + 1, yi) || farther(xi, yi - 1) || farther(xi, yi + 1)) {
                continue;
            }
            let n = scene.layers[o].shape.inward_normal(x as f64 + 0.5, y as f64 + 0.5);
            let theta = orientation_from_normal(n);
            // Junction pixels where a third region cuts in fail the oracle and are left unlabelled.
            if depth_order_holds(&owners, x, y, theta) {
                edge[(y, x)] = true;
                orientation[(y, x)] = theta as f32;
            }
        }
    }
    contours_closed(&edge).then_some((edge, orientation))
}

fn render(scene: &Scene, spec: &SceneSpec, rng: &mut impl Rng) -> Array3<f32> {
    let owners = scene.owner_map();
    let scale = spec.height.max(spec.width) as f64;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    Array3::from_shape_fn((spec.height, spec.width, 3), |(y, x, c)| {
        let o = owners[(y, x)];
        let fill = scene.layers.get(o).map_or(&scene.background, |l| &l.fill);
        let v = fill.shade(x as f64 + 0.5, y as f64 + 0.5, scale)[c] + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
        ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
    })
}

/// Samples layouts until one has visible, closed, oracle-consistent
/// boundaries, and renders it.
pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<(Scene, OcclusionSample)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let scene = sample_scene(spec, &mut rng);
        if let Some((edge, orientation)) = label_scene(&scene) {
            let image = render(&scene, spec, &mut rng);
            let sample = OcclusionSample { id: format!("s{:016x}", spec.seed), image, edge, orientation };
            return Ok((scene, sample));
        }
    }
    Err(Error::Data(format!("no valid scene for seed {} after {MAX_ATTEMPTS} attempts", spec.seed)))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<OcclusionSample> {
    Ok(generate_scene_with_layout(spec)?.1)
}

/// Derives the scene seed of sample `index` in a dataset.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64);
    rng.gen()
}

/// `count` scenes with ids `{prefix}{index:04}`.
pub fn generate_dataset(base: &SceneSpec, count: usize, seed: u64, prefix: &str) -> Result<Vec<OcclusionSample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec { seed: sample_seed(seed, i), ..base.clone() };
            let mut s = generate_scene(&spec)?;
            s.id = format!("{prefix}{i:04}");
            Ok(s)
        })
        .collect()
}

/// Joint crop of image and labels at a seeded random offset.
pub fn random_crop(sample: &OcclusionSample, height: usize, width: usize, rng: &mut impl Rng) -> Result<OcclusionSample> {
    let (h, w) = (sample.height(), sample.width());
    if height == 0 || width == 0 || height > h || width > w {
        return Err(Error::config(format!("crop {height}x{width} does not fit a {h}x{w} sample")));
    }
    let top = rng.gen_range(0..=h - height);
    let left = rng.gen_range(0..=w - width);
    Ok(crop_at(sample, top, left, height, width))
}

pub fn crop_at(sample: &OcclusionSample, top: usize, left: usize, height: usize, width: usize) -> OcclusionSample {
    use ndarray::s;
    OcclusionSample {
        id: sample.id.clone(),
        image: sample.image.slice(s![top..top + height, left..left + width, ..]).to_owned(),
        edge: sample.edge.slice(s![top..top + height, left..left + width]).to_owned(),
        orientation: sample.orientation.slice(s![top..top + height, left..left + width]).to_owned(),
    }
}

/// Mirror along the vertical axis. Mirroring reverses the tangent's x
/// component and the normal's x component, which maps `θ` to `-θ`.
pub fn flip_horizontal(sample: &OcclusionSample) -> OcclusionSample {
    use ndarray::{s, Axis};
    let mut orientation = sample.orientation.slice(s![.., ..;-1]).to_owned();
    orientation.zip_mut_with(&sample.edge.slice(s![.., ..;-1]), |o, &e| {
        if e {
            *o = wrap_angle(-(*o as f64)) as f32;
        }
    });
    let mut image = sample.image.clone();
    image.invert_axis(Axis(1));
    OcclusionSample {
        id: sample.id.clone(),
        image: image.as_standard_layout().to_owned(),
        edge: sample.edge.slice(s![.., ..;-1]).to_owned(),
        orientation,
    }
}

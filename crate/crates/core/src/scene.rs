//! Synthetic labelled scenes and the `NPSC1` text format.
//!
//! A scene is a floor slab with a few primitive objects (spheres, boxes,
//! cylinders) standing on it. Each object gets its own saturated base colour;
//! the floor is desaturated. `NPSC1` files look like
//!
//! ```text
//! NPSC1 <N> <M>
//! x y z r g b label      (N lines, six decimals, LF endings)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Tensor;

/// Point cloud with colours and ground-truth object labels (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    /// `x y z r g b` per point.
    pub points: Vec<[f64; 6]>,
    pub labels: Vec<usize>,
    pub num_objects: usize,
}

impl LabeledScene {
    pub fn new(points: Vec<[f64; 6]>, labels: Vec<usize>, num_objects: usize) -> Result<Self> {
        let s = Self {
            points,
            labels,
            num_objects,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = &self.points[i];
        [p[0], p[1], p[2]]
    }

    /// Indices of the points labelled `object`.
    pub fn object_points(&self, object: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == object).collect()
    }

    /// `N x 6` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 6, self.points.iter().flatten().copied().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Empty("scene has no points".into()));
        }
        if self.labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                self.labels.len(),
                self.points.len()
            )));
        }
        let mut counts = vec![0usize; self.num_objects + 1];
        for &l in &self.labels {
            if l > self.num_objects {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    max: self.num_objects,
                });
            }
            counts[l] += 1;
        }
        if let Some(m) = (1..=self.num_objects).find(|&m| counts[m] == 0) {
            return Err(Error::Config(format!("object {m} has no points")));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("point {i} is not finite")));
            }
            if p[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("point {i} has a colour outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
}

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_points: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    /// Stddev of Gaussian noise on coordinates, metres.
    pub coord_jitter: f64,
    /// Stddev of Gaussian noise on colours.
    pub color_noise: f64,
    /// Side of the square floor, metres.
    pub extent: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 1024,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![Shape::Sphere, Shape::Box, Shape::Cylinder],
            coord_jitter: 0.005,
            color_noise: 0.03,
            extent: 4.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config("object range is empty".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape set is empty".into()));
        }
        if !(self.coord_jitter >= 0.0) || !(self.color_noise >= 0.0) {
            return Err(Error::Config("noise stddevs must be >= 0".into()));
        }
        if !(self.extent > 0.0) {
            return Err(Error::Config("extent must be positive".into()));
        }
        if self.num_points < 4 * (self.max_objects + 1) {
            return Err(Error::Infeasible(format!(
                "{} points cannot hold {} objects",
                self.num_points, self.max_objects
            )));
        }
        Ok(())
    }
}

const MIN_RADIUS: f64 = 0.25;
const MAX_RADIUS: f64 = 0.5;
const GAP: f64 = 0.2;
const PLACEMENT_TRIES: usize = 2000;

struct Placed {
    shape: Shape,
    center: [f64; 2],
    radius: f64,
    height: f64,
    // box half-extents along x, y
    half: [f64; 2],
    color: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_surface(obj: &Placed, rng: &mut Rng) -> [f64; 3] {
    let [cx, cy] = obj.center;
    match obj.shape {
        Shape::Sphere => {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rxy = (1.0 - z * z).max(0.0).sqrt();
            let r = obj.radius;
            [cx + r * rxy * phi.cos(), cy + r * rxy * phi.sin(), r + r * z]
        }
        Shape::Cylinder => {
            let r = obj.radius;
            let side = std::f64::consts::TAU * r * obj.height;
            let top = std::f64::consts::PI * r * r;
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..side + top) < side {
                [cx + r * phi.cos(), cy + r * phi.sin(), rng.random_range(0.0..=obj.height)]
            } else {
                let rr = r * rng.random_range(0.0f64..=1.0).sqrt();
                [cx + rr * phi.cos(), cy + rr * phi.sin(), obj.height]
            }
        }
        Shape::Box => {
            let [hx, hy] = obj.half;
            let h = obj.height;
            // four walls and the lid, area-weighted
            let areas = [2.0 * hy * h, 2.0 * hy * h, 2.0 * hx * h, 2.0 * hx * h, 4.0 * hx * hy];
            let total: f64 = areas.iter().sum();
            let mut u = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && u >= areas[face] {
                u -= areas[face];
                face += 1;
            }
            let a: f64 = rng.random_range(-1.0..=1.0);
            let b: f64 = rng.random_range(0.0..=1.0);
            match face {
                0 => [cx - hx, cy + a * hy, b * h],
                1 => [cx + hx, cy + a * hy, b * h],
                2 => [cx + a * hx, cy - hy, b * h],
                3 => [cx + a * hx, cy + hy, b * h],
                _ => [cx + a * hx, cy + rng.random_range(-1.0..=1.0) * hy, h],
            }
        }
    }
}

fn inside_footprint(obj: &Placed, x: f64, y: f64) -> bool {
    let dx = x - obj.center[0];
    let dy = y - obj.center[1];
    match obj.shape {
        Shape::Box => dx.abs() <= obj.half[0] && dy.abs() <= obj.half[1],
        _ => dx * dx + dy * dy <= obj.radius * obj.radius,
    }
}

/// Sample a scene; a pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = SeedTree::new(seed).child("scene").rng();
    let m = rng.random_range(spec.min_objects..=spec.max_objects);

    let hue0: f64 = rng.random_range(0.0..1.0);
    let mut objects: Vec<Placed> = Vec::with_capacity(m);
    for k in 0..m {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
            let lo = radius + GAP / 2.0;
            let hi = spec.extent - radius - GAP / 2.0;
            if hi <= lo {
                break;
            }
            let center = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            let clear = objects.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d >= o.radius + radius + GAP
            });
            if clear {
                placed = Some((center, radius));
                break;
            }
        }
        let (center, radius) = placed.ok_or_else(|| {
            Error::Infeasible(format!("cannot place object {} of {m} in a {} m floor", k + 1, spec.extent))
        })?;
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let height = rng.random_range(0.4..=1.0);
        let side = radius / std::f64::consts::SQRT_2;
        let half = [side * rng.random_range(0.7..=1.0), side * rng.random_range(0.7..=1.0)];
        let hue = hue0 + k as f64 / m as f64 + rng.random_range(-0.04..=0.04) / m as f64;
        let color = hsv_to_rgb(hue, rng.random_range(0.75..=0.95), rng.random_range(0.75..=0.95));
        objects.push(Placed {
            shape,
            center,
            radius,
            height,
            half,
            color,
        });
    }
    let floor_color = hsv_to_rgb(
        rng.random_range(0.0..1.0),
        rng.random_range(0.05..=0.15),
        rng.random_range(0.35..=0.55),
    );

    // Group sizes: weights in [0.6, 1.4] keep every group above N / (4 (M + 1)).
    let weights: Vec<f64> = (0..=m).map(|_| rng.random_range(0.6..=1.4)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((spec.num_points as f64) * w / wsum).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    counts[0] += spec.num_points - assigned;

    let jitter = Normal::new(0.0, spec.coord_jitter.max(1e-300)).expect("valid stddev");
    let color_jitter = Normal::new(0.0, spec.color_noise.max(1e-300)).expect("valid stddev");
    let mut pts: Vec<([f64; 6], usize)> = Vec::with_capacity(spec.num_points);
    let mut emit = |xyz: [f64; 3], rgb: [f64; 3], label: usize, rng: &mut Rng| {
        let mut p = [0.0; 6];
        for k in 0..3 {
            p[k] = xyz[k] + if spec.coord_jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
            let c = rgb[k] + if spec.color_noise > 0.0 { color_jitter.sample(rng) } else { 0.0 };
            p[3 + k] = c.clamp(0.0, 1.0);
        }
        pts.push((p, label));
    };

    let mut floor_left = counts[0];
    while floor_left > 0 {
        let x = rng.random_range(0.0..spec.extent);
        let y = rng.random_range(0.0..spec.extent);
        if objects.iter().any(|o| inside_footprint(o, x, y)) {
            continue;
        }
        emit([x, y, 0.0], floor_color, 0, &mut rng);
        floor_left -= 1;
    }
    for (k, obj) in objects.iter().enumerate() {
        for _ in 0..counts[k + 1] {
            let xyz = sample_surface(obj, &mut rng);
            emit(xyz, obj.color, k + 1, &mut rng);
        }
    }
    pts.shuffle(&mut rng);

    let (points, labels) = pts.into_iter().unzip();
    LabeledScene::new(points, labels, m)
}

/// Serialise as `NPSC1`.
/// `count` scenes with independent seeds derived from `seed`.
pub fn generate_scenes(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    let root = SeedTree::new(seed).child("scenes");
    (0..count).map(|i| generate_scene(spec, root.index(i as u64).key())).collect()
}

pub fn scene_to_string(scene: &LabeledScene) -> String {
    let mut out = String::with_capacity(scene.len() * 64);
    writeln!(out, "NPSC1 {} {}", scene.len(), scene.num_objects).unwrap();
    for (p, l) in scene.points.iter().zip(&scene.labels) {
        writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
            p[0], p[1], p[2], p[3], p[4], p[5], l
        )
        .unwrap();
    }
    out
}

/// Parse an `NPSC1` document.
pub fn parse_scene(text: &str) -> Result<LabeledScene> {
    let err = |line: usize, message: String| Error::SceneFormat { line, message };
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "NPSC1" {
        return Err(err(1, format!("expected `NPSC1 <N> <M>`, got `{header}`")));
    }
    let n: usize = fields[1].parse().map_err(|_| err(1, format!("bad point count `{}`", fields[1])))?;
    let m: usize = fields[2].parse().map_err(|_| err(1, format!("bad object count `{}`", fields[2])))?;

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        if points.len() == n {
            return Err(err(lineno, format!("more than {n} points")));
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(lineno, format!("expected 7 fields, got {}", f.len())));
        }
        let mut p = [0.0; 6];
        for i in 0..6 {
            p[i] = f[i]
                .parse()
                .map_err(|_| err(lineno, format!("bad number `{}`", f[i])))?;
        }
        let label: usize = f[6]
            .parse()
            .map_err(|_| err(lineno, format!("bad label `{}`", f[6])))?;
        if label > m {
            return Err(err(lineno, format!("label {label} out of range 0..={m}")));
        }
        points.push(p);
        labels.push(label);
    }
    if points.len() != n {
        return Err(err(1, format!("header declares {n} points, found {}", points.len())));
    }
    LabeledScene::new(points, labels, m)
}

pub fn write_scene(scene: &LabeledScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<LabeledScene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(scene_to_string(&a), scene_to_string(&b));
        let c = generate_scene(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_object_count() {
        let spec = SceneSpec {
            min_objects: 2,
            max_objects: 2,
            ..SceneSpec::default()
        };
        for seed in 0..10 {
            let s = generate_scene(&spec, seed).unwrap();
            assert_eq!(s.num_objects, 2);
            let mut present: Vec<usize> = s.labels.iter().copied().filter(|&l| l > 0).collect();
            present.sort_unstable();
            present.dedup();
            assert_eq!(present, vec![1, 2]);
        }
    }

    #[test]
    fn object_point_counts_have_floor() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            let min = spec.num_points / (4 * (s.num_objects + 1));
            for m in 0..=s.num_objects {
                let c = s.labels.iter().filter(|&&l| l == m).count();
                assert!(c >= min, "seed {seed} object {m} has {c} < {min}");
            }
        }
    }

    #[test]
    fn infeasible_spec() {
        let spec = SceneSpec {
            min_objects: 30,
            max_objects: 30,
            num_points: 4096,
            extent: 2.0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Infeasible(_))));
        let few = SceneSpec {
            num_points: 10,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&few, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn hand_written_fixture() {
        let text = "NPSC1 3 1\n\
                    0.000000 0.000000 0.000000 0.500000 0.500000 0.500000 0\n\
                    1.250000 -2.000000 0.100000 1.000000 0.000000 0.000000 1\n\
                    1.300000 -2.000000 0.200000 0.900000 0.100000 0.000000 1\n";
        let s = parse_scene(text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.num_objects, 1);
        assert_eq!(s.labels, vec![0, 1, 1]);
        assert_eq!(s.points[1], [1.25, -2.0, 0.1, 1.0, 0.0, 0.0]);
        assert_eq!(scene_to_string(&s), text);
    }

    #[test]
    fn point_count_mismatch_is_an_error() {
        let text = "NPSC1 2 0\n0 0 0 0 0 0 0\n";
        assert!(matches!(parse_scene(text), Err(Error::SceneFormat { .. })));
        let extra = "NPSC1 1 0\n0 0 0 0 0 0 0\n0 0 0 0 0 0 0\n";
        assert!(parse_scene(extra).is_err());
    }

    #[test]
    fn malformed_header_and_labels() {
        assert!(parse_scene("NPSC2 1 0\n0 0 0 0 0 0 0\n").is_err());
        assert!(parse_scene("NPSC1 x 0\n").is_err());
        assert!(parse_scene("NPSC1 1 0\n0 0 0 0 0 0 1\n").is_err());
        assert!(parse_scene("NPSC1 1 0\n0 0 0 0 0 0\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let s = generate_scene(&SceneSpec::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.npsc");
        write_scene(&s, &path).unwrap();
        let r = read_scene(&path).unwrap();
        assert_eq!(r.labels, s.labels);
        for (a, b) in r.points.iter().zip(&s.points) {
            for k in 0..6 {
                assert!((a[k] - b[k]).abs() <= 5e-7 + 1e-12);
            }
        }
    }
}

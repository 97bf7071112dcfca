//! Procedural paired scenes: one layout of colored primitives rendered as a
//! north-up top-down view and as a 360° ground-level panorama.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Image, ImagePair, SplitRole};
use crate::error::{Error, Result};

const CAMERA_HEIGHT: f64 = 0.15;
const SKY_TOP: [f64; 3] = [0.45, 0.6, 0.9];
const SKY_HORIZON: [f64; 3] = [0.78, 0.86, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
    pub noise_level: f64,
    /// Number of primitives per scene.
    pub scene_complexity: usize,
    /// Side of the square aerial image.
    pub aerial_size: usize,
    /// `[height, width]` of the ground panorama.
    pub ground_size: [usize; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 32,
            seed: 0,
            noise_level: 0.02,
            scene_complexity: 4,
            aerial_size: 32,
            ground_size: [16, 40],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count", "must be ≥ 1"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", "must be finite and ≥ 0"));
        }
        if self.scene_complexity == 0 {
            return Err(Error::config("scene_complexity", "must be ≥ 1"));
        }
        if self.aerial_size < 2 {
            return Err(Error::config("aerial_size", "must be ≥ 2"));
        }
        if self.ground_size[0] < 2 || self.ground_size[1] < 1 {
            return Err(Error::config("ground_size", "needs height ≥ 2 and width ≥ 1"));
        }
        Ok(())
    }

    pub fn pair_id(&self, index: usize) -> String {
        format!("syn{}_{index:05}", self.seed)
    }
}

#[derive(Clone, Copy, Debug)]
enum Footprint {
    Disc { radius: f64 },
    Square { half: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Primitive {
    center: [f64; 2],
    footprint: Footprint,
    height: f64,
    color: [f64; 3],
}

impl Primitive {
    fn contains(&self, p: [f64; 2]) -> bool {
        let (de, dn) = (p[0] - self.center[0], p[1] - self.center[1]);
        match self.footprint {
            Footprint::Disc { radius } => de * de + dn * dn <= radius * radius,
            Footprint::Square { half } => de.abs() <= half && dn.abs() <= half,
        }
    }

    /// Distance along the horizontal ray `dir` from the origin to the footprint boundary.
    fn ray_hit(&self, dir: [f64; 2]) -> Option<f64> {
        let [ce, cn] = self.center;
        match self.footprint {
            Footprint::Disc { radius } => {
                let b = dir[0] * ce + dir[1] * cn;
                let disc = b * b - (ce * ce + cn * cn) + radius * radius;
                if disc < 0.0 {
                    return None;
                }
                let t = b - disc.sqrt();
                (t > 0.0).then_some(t)
            }
            Footprint::Square { half } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (d, c) in [(dir[0], ce), (dir[1], cn)] {
                    if d.abs() < 1e-12 {
                        if c.abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((c - half) / d, (c + half) / d);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                (lo <= hi && lo > 0.0).then_some(lo)
            }
        }
    }
}

struct Scene {
    primitives: Vec<Primitive>,
    ground: [f64; 3],
    texture: [f64; 4],
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, complexity: usize) -> Self {
        let mut primitives = Vec::with_capacity(complexity);
        while primitives.len() < complexity {
            let size = rng.random_range(0.12..0.3);
            let footprint = if rng.random_bool(0.5) {
                Footprint::Disc { radius: size }
            } else {
                Footprint::Square { half: size }
            };
            let radius = rng.random_range(0.0..0.85f64);
            let angle = rng.random_range(0.0..2.0 * PI);
            let center = [radius * angle.sin(), radius * angle.cos()];
            let primitive = Primitive {
                center,
                footprint,
                height: rng.random_range(0.3..1.0),
                color: hsv(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)),
            };
            // keep the camera outside every footprint
            let clearance = [[0.0, 0.0], [0.07, 0.0], [-0.07, 0.0], [0.0, 0.07], [0.0, -0.07]];
            if clearance.iter().any(|&p| primitive.contains(p)) {
                continue;
            }
            primitives.push(primitive);
        }
        // taller primitives paint over shorter ones in the top-down view
        primitives.sort_by(|a, b| a.height.total_cmp(&b.height));
        let ground = [
            rng.random_range(0.3..0.5),
            rng.random_range(0.35..0.55),
            rng.random_range(0.2..0.4),
        ];
        let texture = [
            rng.random_range(6.0..14.0),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(6.0..14.0),
            rng.random_range(0.0..2.0 * PI),
        ];
        Self { primitives, ground, texture }
    }

    fn ground_color(&self, p: [f64; 2]) -> [f64; 3] {
        let [f1, p1, f2, p2] = self.texture;
        let t = 0.06 * (f1 * p[0] + p1).sin() * (f2 * p[1] + p2).sin();
        self.ground.map(|c| c + t)
    }

    /// Color seen looking straight down at world point `p` (east, north).
    fn top_down(&self, p: [f64; 2]) -> [f64; 3] {
        self.primitives
            .iter()
            .rev()
            .find(|prim| prim.contains(p))
            .map_or_else(|| self.ground_color(p), |prim| prim.color)
    }

    fn render_aerial(&self, size: usize) -> Vec<[f64; 3]> {
        let half = size as f64 / 2.0;
        let mut out = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                let p = [(col as f64 - half) / half, (half - row as f64) / half];
                out.push(self.top_down(p));
            }
        }
        out
    }

    fn render_ground(&self, [height, width]: [usize; 2]) -> Vec<[f64; 3]> {
        let horizon = height as f64 / 2.0;
        let mut out = vec![[0.0; 3]; height * width];
        for j in 0..width {
            let theta = 2.0 * PI * j as f64 / width as f64;
            let dir = [theta.sin(), theta.cos()];
            let mut hits: Vec<(f64, &Primitive)> = self
                .primitives
                .iter()
                .filter_map(|p| p.ray_hit(dir).map(|t| (t, p)))
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            for i in 0..height {
                let offset = (i as f64 + 0.5 - horizon) / horizon;
                let color = if offset < 0.0 {
                    let tan_e = (-offset * FRAC_PI_4).tan();
                    hits.iter()
                        .find(|(t, p)| tan_e * t <= p.height - CAMERA_HEIGHT)
                        .map_or_else(
                            || {
                                let a = -offset;
                                std::array::from_fn(|c| SKY_HORIZON[c] * (1.0 - a) + SKY_TOP[c] * a)
                            },
                            |(_, p)| p.color.map(|c| 0.85 * c),
                        )
                } else {
                    let depression = offset * FRAC_PI_2;
                    let reach = CAMERA_HEIGHT / depression.tan();
                    match hits.first() {
                        Some(&(t, p)) if t < reach => p.color.map(|c| 0.85 * c),
                        _ => self.ground_color([reach * dir[0], reach * dir[1]]),
                    }
                };
                out[i * width + j] = color;
            }
        }
        out
    }
}

fn finish(pixels: Vec<[f64; 3]>, h: usize, w: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let dist = (noise > 0.0).then(|| Normal::new(0.0, noise).unwrap());
    let data = pixels
        .into_iter()
        .flatten()
        .map(|v| {
            let v = v + dist.as_ref().map_or(0.0, |d| d.sample(rng));
            // quantize to 8 bits so PNG persistence is lossless
            ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
        })
        .collect();
    Image::new(h, w, data).unwrap()
}

/// Renders `spec.count` matched pairs. Each pair draws its layout from its own
/// RNG stream, so the output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let pairs: Vec<ImagePair> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let scene = Scene::random(&mut rng, spec.scene_complexity);
            let s = spec.aerial_size;
            let [gh, gw] = spec.ground_size;
            let aerial = finish(scene.render_aerial(s), s, s, spec.noise_level, &mut rng);
            let ground = finish(scene.render_ground(spec.ground_size), gh, gw, spec.noise_level, &mut rng);
            ImagePair {
                id: spec.pair_id(i),
                ground: ground.into(),
                aerial: aerial.into(),
            }
        })
        .collect();
    DatasetSplit::new(pairs, SplitRole::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(split: &DatasetSplit) -> Vec<(Image, Image)> {
        split
            .pairs()
            .iter()
            .map(|p| ((*p.ground.load().unwrap()).clone(), (*p.aerial.load().unwrap()).clone()))
            .collect()
    }

    #[test]
    fn identical_spec_identical_data() {
        let spec = SyntheticSpec { count: 4, seed: 7, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(images(&a), images(&b));
        let ids: Vec<&str> = a.pairs().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["syn7_00000", "syn7_00001", "syn7_00002", "syn7_00003"]);
    }

    #[test]
    fn seed_changes_layout() {
        let spec = |seed| SyntheticSpec { count: 4, seed, noise_level: 0.0, ..Default::default() };
        let a = images(&generate_synthetic(&spec(1)).unwrap());
        let b = images(&generate_synthetic(&spec(2)).unwrap());
        for ((ga, aa), (gb, ab)) in a.iter().zip(&b) {
            assert!(ga.sq_distance(gb) > 0.0);
            assert!(aa.sq_distance(ab) > 0.0);
        }
    }

    #[test]
    fn values_are_quantized() {
        let split = generate_synthetic(&SyntheticSpec { count: 1, ..Default::default() }).unwrap();
        let (g, a) = &images(&split)[0];
        for v in g.data().iter().chain(a.data()) {
            let q = (*v as f64 * 255.0).round() / 255.0;
            assert_eq!(*v, q as f32);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec { count: 0, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { noise_level: -1.0, ..Default::default() }).is_err());
    }
}

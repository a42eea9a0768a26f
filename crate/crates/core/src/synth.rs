//! Deterministic synthetic 2-d registration pairs with known deformations.
//!
//! The target image is an analytic "anatomy": a smooth background, a body
//! outline, `K` elliptical organs and a texture that moves with the anatomy.
//! A ground-truth displacement field `u` (a sum of Gaussian bumps) maps
//! target locations to source locations, so the source image is the anatomy
//! rendered at `phi^{-1}(y)` where `phi(x) = x + u(x)`. Registering with `u`
//! therefore reproduces the target up to interpolation error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pair::{Dvf, Landmark, RegistrationPair};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Square image side in voxels.
    pub size: usize,
    pub organs: usize,
    /// Maximum ground-truth displacement, voxels.
    pub magnitude: f64,
    pub bumps: usize,
    /// Amplitude of the anatomical texture (deforms with the anatomy).
    pub texture: f64,
    /// Standard deviation of independent per-image noise.
    pub noise: f64,
    /// Adds an intensity ramp over the first organ of the source image only,
    /// so image similarity and mask overlap pull in slightly different
    /// directions.
    pub intensity_conflict: bool,
    pub landmarks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 64,
            organs: 2,
            magnitude: 4.0,
            bumps: 4,
            texture: 0.08,
            noise: 0.0,
            intensity_conflict: true,
            landmarks: 23,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("image size {} below 16", self.size)));
        }
        if !(0.0..=self.size as f64 / 8.0).contains(&self.magnitude) {
            return Err(Error::Config(format!(
                "displacement magnitude {} outside [0, size/8 = {}]",
                self.magnitude,
                self.size as f64 / 8.0
            )));
        }
        if self.organs == 0 || self.organs > 4 {
            return Err(Error::Config(format!("organ count {} not in 1..=4", self.organs)));
        }
        if self.landmarks < 5 * self.organs {
            return Err(Error::Config(format!(
                "{} landmarks cannot cover {} organs (need 5 each)",
                self.landmarks, self.organs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    ax: f64,
    ay: f64,
}

/// Smooth analytic displacement field.
#[derive(Clone, Debug)]
pub struct BumpField {
    bumps: Vec<Bump>,
}

impl BumpField {
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        self.bumps.iter().fold((0.0, 0.0), |(ux, uy), b| {
            let r2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            let g = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            (ux + b.ax * g, uy + b.ay * g)
        })
    }

    /// Solves `x + u(x) = y` by fixed-point iteration.
    pub fn invert(&self, y: (f64, f64)) -> (f64, f64) {
        let mut x = y;
        for _ in 0..40 {
            let (ux, uy) = self.eval(x.0, x.1);
            x = (y.0 - ux, y.1 - uy);
        }
        x
    }

    pub fn raster(&self, size: usize) -> Dvf {
        Dvf::from_fn(size, size, |x, y| self.eval(x as f64, y as f64))
    }
}

fn random_field(config: &SynthConfig, rng: &mut impl Rng) -> BumpField {
    let s = config.size as f64;
    let mut bumps: Vec<Bump> = (0..config.bumps)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            Bump {
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                sigma: rng.random_range(0.16 * s..0.26 * s),
                ax: amp * angle.cos(),
                ay: amp * angle.sin(),
            }
        })
        .collect();
    let field = BumpField {
        bumps: bumps.clone(),
    };
    let peak = field.raster(config.size).max_magnitude();
    let scale = if peak > 0.0 { config.magnitude / peak } else { 0.0 };
    for b in &mut bumps {
        b.ax *= scale;
        b.ay *= scale;
    }
    BumpField { bumps }
}

/// Random smooth ground-truth field rasterized on the pixel grid, scaled so
/// its largest displacement equals `config.magnitude`.
pub fn gen_gt_dvf(config: &SynthConfig, rng: &mut impl Rng) -> Dvf {
    random_field(config, rng).raster(config.size)
}

#[derive(Clone, Debug)]
struct Organ {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Organ {
    /// Elliptical radius; 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) <= 1.0
    }

    /// Soft occupancy with a sub-voxel edge.
    fn occupancy(&self, x: f64, y: f64) -> f64 {
        let signed = (1.0 - self.radius(x, y)) * self.a.min(self.b);
        1.0 / (1.0 + (-signed / 0.35).exp())
    }

    fn boundary_point(&self, angle: f64) -> (f64, f64) {
        let (u, v) = (self.a * angle.cos(), self.b * angle.sin());
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }
}

struct Anatomy {
    size: f64,
    organs: Vec<Organ>,
    wave: (f64, f64, f64),
    body: (f64, f64),
    lattice: Vec<f64>,
    lattice_side: usize,
    texture: f64,
}

const LATTICE_STEP: f64 = 4.0;
const LATTICE_MARGIN: f64 = 16.0;

impl Anatomy {
    fn random(config: &SynthConfig, rng: &mut impl Rng) -> Self {
        let s = config.size as f64;
        let k = config.organs;
        let organs = (0..k)
            .map(|i| {
                let t = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Organ {
                    cx: s * (0.34 + 0.32 * t) + rng.random_range(-0.05 * s..0.05 * s),
                    cy: s * (0.38 + 0.24 * t) + rng.random_range(-0.05 * s..0.05 * s),
                    a: rng.random_range(0.13 * s..0.18 * s),
                    b: rng.random_range(0.10 * s..0.14 * s),
                    cos: theta.cos(),
                    sin: theta.sin(),
                    intensity: 0.9 - 0.3 * t,
                }
            })
            .collect();
        let side = ((s + 2.0 * LATTICE_MARGIN) / LATTICE_STEP) as usize + 2;
        let lattice = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        Anatomy {
            size: s,
            organs,
            wave: (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            body: (rng.random_range(0.40..0.46) * s, rng.random_range(0.34..0.42) * s),
            lattice,
            lattice_side: side,
            texture: config.texture,
        }
    }

    fn texture_at(&self, x: f64, y: f64) -> f64 {
        let side = self.lattice_side;
        let gx = ((x + LATTICE_MARGIN) / LATTICE_STEP).clamp(0.0, (side - 2) as f64);
        let gy = ((y + LATTICE_MARGIN) / LATTICE_STEP).clamp(0.0, (side - 2) as f64);
        let (i, j) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (gx - i as f64, gy - j as f64);
        let l = |a: usize, b: usize| self.lattice[b * side + a];
        let top = l(i, j) * (1.0 - tx) + l(i + 1, j) * tx;
        let bot = l(i, j + 1) * (1.0 - tx) + l(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Intensity at anatomical location `(x, y)`; `ramp` scales the first
    /// organ's contrast.
    fn intensity(&self, x: f64, y: f64, ramp: f64) -> f64 {
        let s = self.size;
        let (fx, fy, phase) = self.wave;
        let mut v = 0.12
            + 0.05 * (std::f64::consts::TAU * (fx * x + fy * y) / s + phase).sin();
        let (dx, dy) = ((x - 0.5 * s) / self.body.0, (y - 0.5 * s) / self.body.1);
        let body_edge = (1.0 - (dx * dx + dy * dy).sqrt()) * self.body.0.min(self.body.1);
        v += 0.22 / (1.0 + (-body_edge / 0.5).exp());
        for (k, organ) in self.organs.iter().enumerate() {
            let occ = organ.occupancy(x, y);
            let level = if k == 0 { organ.intensity * ramp } else { organ.intensity };
            v = v * (1.0 - occ) + level * occ;
        }
        v + self.texture * self.texture_at(x, y)
    }
}

/// Independent generator for pair `index` of a dataset seeded with `seed`.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 keeps neighbouring indices decorrelated
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One synthetic pair. The returned pair carries its ground-truth field.
pub fn gen_pair(config: &SynthConfig, rng: &mut impl Rng) -> Result<RegistrationPair> {
    config.validate()?;
    let n = config.size;
    let s = n as f64;
    let anatomy = Anatomy::random(config, rng);
    let field = random_field(config, rng);

    let mut target = Tensor::zeros(&[1, 1, n, n]);
    let mut source = Tensor::zeros(&[1, 1, n, n]);
    let k = config.organs;
    let mut target_mask = Tensor::zeros(&[1, k, n, n]);
    let mut source_mask = Tensor::zeros(&[1, k, n, n]);
    let conflict = config.intensity_conflict;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64, y as f64);
            let i = y * n + x;
            target.data_mut()[i] = anatomy.intensity(px, py, 1.0);
            let (ax, ay) = field.invert((px, py));
            let ramp = if conflict { 1.0 + 0.2 * (px - 0.5 * s) / s } else { 1.0 };
            source.data_mut()[i] = anatomy.intensity(ax, ay, ramp);
            for (c, organ) in anatomy.organs.iter().enumerate() {
                target_mask.data_mut()[c * n * n + i] = organ.contains(px, py) as u8 as f64;
                source_mask.data_mut()[c * n * n + i] = organ.contains(ax, ay) as u8 as f64;
            }
        }
    }
    if config.noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, config.noise)
            .map_err(|e| Error::Config(format!("noise level: {e}")))?;
        for v in target.data_mut().iter_mut().chain(source.data_mut().iter_mut()) {
            *v += rng.sample(normal);
        }
    }
    for v in target.data_mut().iter_mut().chain(source.data_mut().iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }

    // Landmarks: organ centres, four boundary points per organ, then random
    // interior sites. Margins keep the mapped sources inside the image.
    let margin = config.magnitude + 2.0;
    let in_domain = |p: (f64, f64)| {
        p.0 >= margin && p.1 >= margin && p.0 <= s - 1.0 - margin && p.1 <= s - 1.0 - margin
    };
    let mut sites = Vec::with_capacity(config.landmarks);
    for organ in &anatomy.organs {
        sites.push((organ.cx, organ.cy));
        for q in 0..4 {
            let p = organ.boundary_point(q as f64 * std::f64::consts::FRAC_PI_2);
            if in_domain(p) {
                sites.push(p);
            }
        }
    }
    sites.retain(|&p| in_domain(p));
    while sites.len() < config.landmarks {
        sites.push((
            rng.random_range(margin..s - 1.0 - margin),
            rng.random_range(margin..s - 1.0 - margin),
        ));
    }
    sites.truncate(config.landmarks);
    let landmarks = sites
        .into_iter()
        .map(|(x, y)| {
            let (ux, uy) = field.eval(x, y);
            Landmark {
                target: [x, y],
                source: [x + ux, y + uy],
            }
        })
        .collect();

    let pair = RegistrationPair {
        source_image: source,
        target_image: target,
        source_mask,
        target_mask,
        landmarks,
        gt_dvf: Some(field.raster(n)),
    };
    pair.validate()?;
    Ok(pair)
}

/// Pairs in the default benchmark.
pub const DEFAULT_PAIRS: usize = 40;
/// Training pairs in the default benchmark; the rest are for evaluation.
pub const DEFAULT_TRAIN_PAIRS: usize = 32;

/// Deterministic, index-addressable collection of pairs. The first
/// `train` indices form the training split, the rest the evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SynthConfig,
    pub count: usize,
    pub train: usize,
}

impl Dataset {
    pub fn new(config: SynthConfig, count: usize, train: usize) -> Result<Self> {
        config.validate()?;
        if count == 0 || train > count {
            return Err(Error::Config(format!(
                "dataset needs count >= 1 and train <= count (count {count}, train {train})"
            )));
        }
        Ok(Dataset {
            config,
            count,
            train,
        })
    }

    /// The default benchmark for `seed`.
    pub fn standard(seed: u64) -> Result<Self> {
        Dataset::new(SynthConfig { seed, ..SynthConfig::default() }, DEFAULT_PAIRS, DEFAULT_TRAIN_PAIRS)
    }

    /// Pair `index`, a pure function of the configuration and the index.
    pub fn pair(&self, index: usize) -> Result<RegistrationPair> {
        if index >= self.count {
            return Err(Error::Contract(format!(
                "pair index {index} outside dataset of {}",
                self.count
            )));
        }
        gen_pair(&self.config, &mut pair_rng(self.config.seed, index as u64))
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train
    }

    pub fn eval_indices(&self) -> std::ops::Range<usize> {
        self.train..self.count
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<RegistrationPair>> + '_ {
        (0..self.count).map(|i| self.pair(i))
    }
}

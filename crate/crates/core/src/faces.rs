//! Synthetic 32×32 grayscale faces: Gaussian bumps at 17 landmarks over a smooth
//! elliptical base. Identities differ in landmark template, per-region bump
//! intensities and face shape; a scalar expression parameter raises the brows and
//! opens the mouth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Point};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_DIM: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const NUM_LANDMARKS: usize = 17;

pub const JAW: [usize; 5] = [0, 1, 2, 3, 4];
pub const BROWS: [usize; 4] = [5, 6, 7, 8];
pub const EYES: [usize; 4] = [9, 10, 11, 12];
pub const NOSE: usize = 13;
pub const MOUTH: [usize; 3] = [14, 15, 16];

/// Landmarks carrying the smoothness loss: brows, eyes and mouth.
pub fn expression_landmarks() -> Vec<usize> {
    BROWS.iter().chain(&EYES).chain(&MOUTH).copied().collect()
}

const TEMPLATE: [Point<f64>; NUM_LANDMARKS] = [
    [7.0, 14.0],
    [9.0, 22.0],
    [16.0, 27.0],
    [23.0, 22.0],
    [25.0, 14.0],
    [9.0, 9.0],
    [13.0, 8.5],
    [19.0, 8.5],
    [23.0, 9.0],
    [9.5, 12.5],
    [13.5, 12.5],
    [18.5, 12.5],
    [22.5, 12.5],
    [16.0, 17.0],
    [12.5, 21.5],
    [19.5, 21.5],
    [16.0, 23.0],
];

/// Per-landmark displacement at full expression (`e = 1`).
const EXPRESSION_AXIS: [Point<f64>; NUM_LANDMARKS] = [
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, -2.0],
    [0.0, -2.0],
    [0.0, -2.0],
    [0.0, -2.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [-0.5, 0.5],
    [0.5, 0.5],
    [0.0, 2.5],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Jaw,
    Brows,
    Eyes,
    Nose,
    Mouth,
}

fn region(i: usize) -> Region {
    match i {
        0..=4 => Region::Jaw,
        5..=8 => Region::Brows,
        9..=12 => Region::Eyes,
        13 => Region::Nose,
        _ => Region::Mouth,
    }
}

const REGIONS: [Region; 5] = [
    Region::Jaw,
    Region::Brows,
    Region::Eyes,
    Region::Nose,
    Region::Mouth,
];

fn base_amplitude(r: Region) -> f64 {
    match r {
        Region::Jaw => -0.15,
        Region::Brows => -0.35,
        Region::Eyes => -0.45,
        Region::Nose => 0.2,
        Region::Mouth => -0.35,
    }
}

fn base_width(r: Region) -> f64 {
    match r {
        Region::Jaw => 2.0,
        Region::Brows => 1.2,
        Region::Eyes => 1.1,
        Region::Nose => 1.5,
        Region::Mouth => 1.3,
    }
}

/// Parameters fixed for one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub template: [Point<f64>; NUM_LANDMARKS],
    /// Bump amplitude per region: jaw, brows, eyes, nose, mouth.
    pub intensity: [f64; 5],
    pub width_scale: f64,
    pub face_axes: [f64; 2],
    pub skin: f64,
}

/// Per-image nuisance: global shift in pixels and a brightness gain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub shift: [f64; 2],
    pub gain: f64,
}

impl Nuisance {
    pub const NONE: Nuisance = Nuisance {
        shift: [0.0, 0.0],
        gain: 1.0,
    };
}

/// One rendered face with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub pixels: Vec<f64>,
    pub landmarks: [Point<f64>; NUM_LANDMARKS],
    pub identity: usize,
    pub expression: f64,
}

fn clamp(v: f64, lim: f64) -> f64 {
    v.max(-lim).min(lim)
}

impl IdentityParams {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut template = TEMPLATE;
        for p in template.iter_mut() {
            p[0] += clamp(0.8 * n.sample(rng), 1.6);
            p[1] += clamp(0.8 * n.sample(rng), 1.6);
        }
        let mut intensity = [0.0; 5];
        for (v, r) in intensity.iter_mut().zip(REGIONS) {
            *v = base_amplitude(r) * (1.0 + clamp(0.3 * n.sample(rng), 0.6));
        }
        Self {
            template,
            intensity,
            width_scale: 1.0 + clamp(0.12 * n.sample(rng), 0.25),
            face_axes: [
                10.0 * (1.0 + clamp(0.06 * n.sample(rng), 0.12)),
                12.0 * (1.0 + clamp(0.06 * n.sample(rng), 0.12)),
            ],
            skin: 0.5 + clamp(0.08 * n.sample(rng), 0.16),
        }
    }

    /// Landmark positions at expression `e` under `nuis`.
    pub fn landmarks(&self, e: f64, nuis: &Nuisance) -> [Point<f64>; NUM_LANDMARKS] {
        let mut out = self.template;
        for (p, d) in out.iter_mut().zip(EXPRESSION_AXIS) {
            p[0] += e * d[0] + nuis.shift[0];
            p[1] += e * d[1] + nuis.shift[1];
        }
        out
    }

    /// Row-major pixels; pixel `(row, col)` sits at `(x, y) = (col, row)`.
    pub fn render(&self, e: f64, nuis: &Nuisance) -> (Vec<f64>, [Point<f64>; NUM_LANDMARKS]) {
        let lm = self.landmarks(e, nuis);
        let (cx, cy) = (16.0 + nuis.shift[0], 17.0 + nuis.shift[1]);
        let mut px = vec![0.0; IMAGE_DIM];
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let (x, y) = (col as f64, row as f64);
                let rho = (((x - cx) / self.face_axes[0]).powi(2)
                    + ((y - cy) / self.face_axes[1]).powi(2))
                .sqrt();
                let mut v = self.skin / (1.0 + ((rho - 1.0) / 0.08).exp());
                for (i, p) in lm.iter().enumerate() {
                    let r = region(i);
                    let amp = self.intensity[REGIONS.iter().position(|&q| q == r).unwrap()];
                    let s = base_width(r) * self.width_scale;
                    let d2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
                    v += amp * (-d2 / (2.0 * s * s)).exp();
                }
                px[row * IMAGE_SIZE + col] = nuis.gain * v;
            }
        }
        (px, lm)
    }
}

/// A population of identities fixed by `(n_identities, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceGenerator {
    identities: Vec<IdentityParams>,
    seed: u64,
}

/// Independent random streams derived from one seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl FaceGenerator {
    pub fn new(n_identities: usize, seed: u64) -> Result<Self> {
        if n_identities < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 identities, got {n_identities}"
            )));
        }
        let mut rng = stream_rng(seed, 0);
        Ok(Self {
            identities: (0..n_identities)
                .map(|_| IdentityParams::sample(&mut rng))
                .collect(),
            seed,
        })
    }

    pub fn n_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn identity(&self, i: usize) -> &IdentityParams {
        &self.identities[i]
    }

    pub fn sample_nuisance<R: Rng + ?Sized>(rng: &mut R) -> Nuisance {
        let u = Uniform::new_inclusive(-0.75, 0.75);
        let n = Normal::new(0.0, 0.04).unwrap();
        Nuisance {
            shift: [u.sample(rng), u.sample(rng)],
            gain: 1.0 + clamp(n.sample(rng), 0.1),
        }
    }

    /// One face of identity `id` with expression and nuisance drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> FaceSample {
        let e: f64 = rng.gen_range(0.0..=1.0);
        let nuis = Self::sample_nuisance(rng);
        self.render(id, e, &nuis)
    }

    pub fn render(&self, id: usize, e: f64, nuis: &Nuisance) -> FaceSample {
        let (pixels, landmarks) = self.identities[id].render(e, nuis);
        FaceSample {
            pixels,
            landmarks,
            identity: id,
            expression: e,
        }
    }

    /// `per_id` faces for every identity from stream `stream`, identity-major.
    pub fn batch(&self, per_id: usize, stream: u64) -> FaceDataset {
        let mut rng = stream_rng(self.seed, stream);
        let mut samples = Vec::with_capacity(per_id * self.identities.len());
        for id in 0..self.identities.len() {
            for _ in 0..per_id {
                samples.push(self.sample(id, &mut rng));
            }
        }
        FaceDataset { samples }
    }
}

/// Images with ground-truth landmarks, identity labels and expression values.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceDataset {
    pub samples: Vec<FaceSample>,
}

impl FaceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Images `[N, 1024]` for the given indices.
    pub fn images(&self, idx: &[usize]) -> Tensor<f64> {
        let mut d = Vec::with_capacity(idx.len() * IMAGE_DIM);
        for &i in idx {
            d.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::matrix(idx.len(), IMAGE_DIM, d).expect("fixed image width")
    }

    pub fn all_images(&self) -> Tensor<f64> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn landmark_set(&self, i: usize) -> Result<LandmarkSet<f64>> {
        let s = IMAGE_SIZE as f64;
        let pts = self.samples[i]
            .landmarks
            .iter()
            .map(|p| [p[0].max(0.0).min(s), p[1].max(0.0).min(s)])
            .collect();
        LandmarkSet::new(pts, expression_landmarks(), s, s)
    }
}

/// The protocol dataset: `images_per_id` faces per identity, deterministic in `seed`.
pub fn synth_dataset(n_identities: usize, images_per_id: usize, seed: u64) -> Result<FaceDataset> {
    Ok(FaceGenerator::new(n_identities, seed)?.batch(images_per_id, 1))
}

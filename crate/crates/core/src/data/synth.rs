use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::template::{self, TEMPLATE};
use crate::error::{Error, Result};
use crate::lakan::LandmarkSet;
use crate::ndiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

/// One image `C×H×W` in `[0, 1]` with its landmarks and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub label: Label,
}

impl Sample {
    pub fn bitwise_eq(&self, other: &Sample) -> bool {
        self.label == other.label
            && self.image.bitwise_eq(&other.image)
            && self.landmarks.coords().len() == other.landmarks.coords().len()
            && self
                .landmarks
                .coords()
                .iter()
                .zip(other.landmarks.coords())
                .all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits())
    }
}

/// Similarity transform about the image centre, in pixel units:
/// `p ↦ c + s·R(θ)·(p − c) + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: f64,
    pub scale: f64,
    pub shift: [f64; 2],
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        rotation: 0.0,
        scale: 1.0,
        shift: [0.0, 0.0],
    };

    pub fn apply(&self, p: [f64; 2], center: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - center, p[1] - center);
        [
            center + self.scale * (c * dx - s * dy) + self.shift[0],
            center + self.scale * (s * dx + c * dy) + self.shift[1],
        ]
    }

    pub fn invert(&self, p: [f64; 2], center: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - center - self.shift[0], p[1] - center - self.shift[1]);
        [
            center + (c * dx + s * dy) / self.scale,
            center + (-s * dx + c * dy) / self.scale,
        ]
    }

    fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub size: usize,
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_shift_px: f64,
    pub landmark_sigma_px: f64,
    /// Range of the per-image skin texture noise amplitude.
    pub texture: (f64, f64),
    pub background_noise: f64,
}

impl Default for FaceParams {
    fn default() -> Self {
        FaceParams {
            size: 64,
            max_rotation_deg: 10.0,
            scale: (0.9, 1.1),
            max_shift_px: 4.0,
            landmark_sigma_px: 1.0,
            texture: (0.01, 0.05),
            background_noise: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgeParams {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// Range of the per-axis shift magnitude in pixels; the sign is random.
    pub shift_px: (f64, f64),
    pub gain: (f64, f64),
    pub max_brightness: f64,
    pub feather_px: (f64, f64),
    /// Smallest number of jaw/mouth points drawn for the hull.
    pub min_hull_points: usize,
}

impl Default for ForgeParams {
    fn default() -> Self {
        ForgeParams {
            max_rotation_deg: 3.0,
            scale: (0.96, 1.04),
            shift_px: (0.3, 1.5),
            gain: (0.85, 1.15),
            max_brightness: 0.05,
            feather_px: (1.0, 3.0),
            min_hull_points: 8,
        }
    }
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

fn inside_ellipse(q: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    ((q[0] - c[0]) / r[0]).powi(2) + ((q[1] - c[1]) / r[1]).powi(2)
}

/// Colour of the noise-free face at template coordinate `q`, or `None`
/// outside the face outline.
fn face_color(q: [f64; 2], skin: [f64; 3]) -> Option<[f64; 3]> {
    let rho = inside_ellipse(q, template::FACE_CENTER, template::FACE_RADII);
    if rho > 1.0 {
        return None;
    }
    let shade = 1.0 - 0.25 * rho;
    let mut color = skin.map(|c| c * shade);
    for eye in [template::LEFT_EYE, template::RIGHT_EYE] {
        let c = template::centroid(eye);
        if inside_ellipse(q, c, [0.055, 0.025]) <= 1.0 {
            color = if inside_ellipse(q, c, [0.018, 0.018]) <= 1.0 {
                [0.2, 0.15, 0.1]
            } else {
                [0.95, 0.95, 0.92]
            };
        }
    }
    if (q[0] - 0.5).abs() < 0.01 && (0.40..=0.62).contains(&q[1]) {
        color = color.map(|c| c * 0.75);
    }
    let u = (q[0] - 0.5) / 0.1;
    if u.abs() <= 1.0 && (q[1] - (0.74 + 0.02 * (1.0 - u * u))).abs() < 0.012 {
        color = [0.65, 0.25, 0.3];
    }
    Some(color)
}

/// Draws a real face from `seed`.
pub fn generate_face(seed: u64, params: &FaceParams) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.size;
    let size = n as f64;
    let pose = Similarity {
        rotation: symmetric(&mut rng, params.max_rotation_deg).to_radians(),
        scale: uniform_in(&mut rng, params.scale),
        shift: [symmetric(&mut rng, params.max_shift_px), symmetric(&mut rng, params.max_shift_px)],
    };
    let r = rng.random_range(0.55..0.95);
    let g = r * rng.random_range(0.7..0.85);
    let skin = [r, g, g * rng.random_range(0.75..0.9)];
    let background = rng.random_range(0.15..0.45);
    let texture = uniform_in(&mut rng, params.texture);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let center = size / 2.0;
    let mut image = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let c = pose.invert(p, center);
            let q = [c[0] / size, c[1] / size];
            let noise = unit.sample(&mut rng);
            let color = match face_color(q, skin) {
                Some(col) => col.map(|v| v + texture * noise),
                None => [background + params.background_noise * noise; 3],
            };
            for ch in 0..3 {
                image[(ch * n + y) * n + x] = color[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }

    let jitter = params.landmark_sigma_px / size;
    let coords = TEMPLATE
        .iter()
        .map(|t| {
            let p = pose.apply([t[0] * size, t[1] * size], center);
            let u = p[0] / size + jitter * unit.sample(&mut rng);
            let v = p[1] / size + jitter * unit.sample(&mut rng);
            [u.clamp(0.0, 1.0) as f32, v.clamp(0.0, 1.0) as f32]
        })
        .collect();
    Ok(Sample {
        image: Tensor::new([3, n, n], image)?,
        landmarks: LandmarkSet::new(coords)?,
        label: Label::Real,
    })
}

/// The random choices behind one forgery.
#[derive(Clone, Debug, PartialEq)]
pub struct Forgery {
    pub warp: Similarity,
    pub gain: [f64; 3],
    pub brightness: f64,
    /// Landmark indices whose convex hull defines the blend region.
    pub hull: Vec<usize>,
    pub feather: f64,
}

impl Forgery {
    pub fn draw(rng: &mut impl Rng, params: &ForgeParams, landmarks: &LandmarkSet, size: usize) -> Result<Self> {
        let pool: Vec<usize> = template::blend_region().collect();
        let sign = |rng: &mut dyn RngCore| if rng.next_u32() & 1 == 0 { 1.0 } else { -1.0 };
        let warp = Similarity {
            rotation: symmetric(rng, params.max_rotation_deg).to_radians(),
            scale: uniform_in(rng, params.scale),
            shift: [
                sign(rng) * uniform_in(rng, params.shift_px),
                sign(rng) * uniform_in(rng, params.shift_px),
            ],
        };
        let gain = [0; 3].map(|_| uniform_in(rng, params.gain));
        let brightness = symmetric(rng, params.max_brightness);
        let feather = uniform_in(rng, params.feather_px);
        let min = params.min_hull_points.clamp(1, pool.len());
        for _ in 0..=MAX_HULL_RETRIES {
            let k = rng.random_range(min..=pool.len());
            let mut hull: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            hull.sort_unstable();
            if convex_hull(&pixel_points(landmarks, &hull, size)).len() >= 3 {
                return Ok(Forgery {
                    warp,
                    gain,
                    brightness,
                    hull,
                    feather,
                });
            }
        }
        Err(Error::Generation(format!(
            "no non-degenerate blend hull after {MAX_HULL_RETRIES} retries"
        )))
    }

    /// A forgery that changes nothing inside the mask.
    pub fn identity(hull: Vec<usize>, feather: f64) -> Self {
        Forgery {
            warp: Similarity::IDENTITY,
            gain: [1.0; 3],
            brightness: 0.0,
            hull,
            feather,
        }
    }
}

const MAX_HULL_RETRIES: usize = 5;

fn pixel_points(landmarks: &LandmarkSet, indices: &[usize], size: usize) -> Vec<[f64; 2]> {
    indices
        .iter()
        .map(|&i| {
            let c = landmarks.coords()[i];
            [c[0] as f64 * size as f64, c[1] as f64 * size as f64]
        })
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull without collinear points (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Hard hull indicator at pixel centres, blurred by a Gaussian of width
/// `feather` pixels truncated at `⌈3·feather⌉`. Row-major `size×size`.
pub fn hull_mask(landmarks: &LandmarkSet, indices: &[usize], feather: f64, size: usize) -> Vec<f64> {
    let hull = convex_hull(&pixel_points(landmarks, indices, size));
    let mut hard = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            if inside_hull(&hull, [x as f64 + 0.5, y as f64 + 0.5]) {
                hard[y * size + x] = 1.0;
            }
        }
    }
    if feather <= 0.0 {
        return hard;
    }
    let radius = (3.0 * feather).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * feather * feather)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let blur = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let (sx, sy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    if (0..size as isize).contains(&sx) && (0..size as isize).contains(&sy) {
                        acc += k * src[sy as usize * size + sx as usize];
                    }
                }
                out[y * size + x] = acc;
            }
        }
        out
    };
    blur(&blur(&hard, true), false)
}

/// Bilinear resampling of one channel plane at `p` (pixel-centre
/// convention, clamped at the border).
fn bilinear(plane: &[f32], size: usize, p: [f64; 2]) -> f64 {
    let max = (size - 1) as f64;
    let x = (p[0] - 0.5).clamp(0.0, max);
    let y = (p[1] - 0.5).clamp(0.0, max);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * size + xx] as f64;
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warped, colour-shifted copy of `image` (`3×size×size`).
pub fn transform_image(image: &Tensor<f32>, forgery: &Forgery) -> Vec<f64> {
    let size = image.shape()[1];
    let center = size as f64 / 2.0;
    let data = image.data();
    let identity = forgery.warp.is_identity();
    let mut out = vec![0.0; data.len()];
    for ch in 0..3 {
        let plane = &data[ch * size * size..][..size * size];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let v = if identity {
                    plane[i] as f64
                } else {
                    bilinear(plane, size, forgery.warp.apply([x as f64 + 0.5, y as f64 + 0.5], center))
                };
                let shifted = forgery.gain[ch] * v + forgery.brightness;
                out[ch * size * size + i] = if forgery.gain[ch] == 1.0 && forgery.brightness == 0.0 {
                    v
                } else {
                    shifted.clamp(0.0, 1.0)
                };
            }
        }
    }
    out
}

/// `real + mask·(transformed − real)` per channel; the mask is shared.
pub fn composite(real: &Tensor<f32>, transformed: &[f64], mask: &[f64]) -> Result<Tensor<f32>> {
    let plane = mask.len();
    let data = real
        .data()
        .iter()
        .zip(transformed)
        .enumerate()
        .map(|(i, (&r, &t))| (r as f64 + mask[i % plane] * (t - r as f64)) as f32)
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// Applies a specific forgery to a real sample.
pub fn apply_forgery(real: &Sample, forgery: &Forgery) -> Result<Sample> {
    let size = real.image.shape()[1];
    let transformed = transform_image(&real.image, forgery);
    let mask = hull_mask(&real.landmarks, &forgery.hull, forgery.feather, size);
    Ok(Sample {
        image: composite(&real.image, &transformed, &mask)?,
        landmarks: real.landmarks.clone(),
        label: Label::Fake,
    })
}

/// Self-blended forgery of a real sample.
pub fn forge_face(real: &Sample, seed: u64, params: &ForgeParams) -> Result<Sample> {
    if real.label != Label::Real {
        return Err(Error::Generation("only real samples can be forged".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forgery = Forgery::draw(&mut rng, params, &real.landmarks, real.image.shape()[1])?;
    apply_forgery(real, &forgery)
}

/// `2·pairs` samples ordered real, fake, real, fake, …; each fake is forged
/// from the real sample just before it.
pub fn generate_dataset(pairs: usize, seed: u64, face: &FaceParams, forge: &ForgeParams) -> Result<Vec<Sample>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let (face_seed, forge_seed) = (master.next_u64(), master.next_u64());
        let real = generate_face(face_seed, face)?;
        let fake = forge_face(&real, forge_seed, forge)?;
        out.push(real);
        out.push(fake);
    }
    Ok(out)
}

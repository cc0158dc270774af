//! Canonical 68-point face template in normalised `[0, 1]` coordinates,
//! following the Dlib point order: jaw 0–16, brows 17–26, nose 27–35,
//! eyes 36–47, outer mouth 48–59, inner mouth 60–67.

pub const TEMPLATE_VERSION: u32 = 1;

pub const TEMPLATE: [[f64; 2]; 68] = [
    [0.2000, 0.5000], [0.2058, 0.5741], [0.2228, 0.6454], [0.2506, 0.7111],
    [0.2879, 0.7687], [0.3333, 0.8160], [0.3852, 0.8511], [0.4415, 0.8727],
    [0.5000, 0.8800], [0.5585, 0.8727], [0.6148, 0.8511], [0.6667, 0.8160],
    [0.7121, 0.7687], [0.7494, 0.7111], [0.7772, 0.6454], [0.7942, 0.5741],
    [0.8000, 0.5000], [0.2700, 0.3500], [0.3150, 0.3350], [0.3600, 0.3300],
    [0.4050, 0.3350], [0.4500, 0.3500], [0.5500, 0.3500], [0.5950, 0.3350],
    [0.6400, 0.3300], [0.6850, 0.3350], [0.7300, 0.3500], [0.5000, 0.4000],
    [0.5000, 0.4600], [0.5000, 0.5200], [0.5000, 0.5800], [0.4400, 0.6200],
    [0.4700, 0.6250], [0.5000, 0.6300], [0.5300, 0.6250], [0.5600, 0.6200],
    [0.3050, 0.4200], [0.3325, 0.3983], [0.3875, 0.3983], [0.4150, 0.4200],
    [0.3875, 0.4417], [0.3325, 0.4417], [0.5850, 0.4200], [0.6125, 0.3983],
    [0.6675, 0.3983], [0.6950, 0.4200], [0.6675, 0.4417], [0.6125, 0.4417],
    [0.4000, 0.7400], [0.4134, 0.7225], [0.4500, 0.7097], [0.5000, 0.7050],
    [0.5500, 0.7097], [0.5866, 0.7225], [0.6000, 0.7400], [0.5866, 0.7575],
    [0.5500, 0.7703], [0.5000, 0.7750], [0.4500, 0.7703], [0.4134, 0.7575],
    [0.4300, 0.7400], [0.4505, 0.7294], [0.5000, 0.7250], [0.5495, 0.7294],
    [0.5700, 0.7400], [0.5495, 0.7506], [0.5000, 0.7550], [0.4505, 0.7506],];

pub const JAW: std::ops::Range<usize> = 0..17;
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;
pub const MOUTH: std::ops::Range<usize> = 48..68;

/// Face outline in template coordinates: centre and semi-axes.
pub const FACE_CENTER: [f64; 2] = [0.5, 0.5];
pub const FACE_RADII: [f64; 2] = [0.3, 0.38];

/// Jaw and mouth indices, the pool forgery hulls are drawn from.
pub fn blend_region() -> impl Iterator<Item = usize> {
    JAW.chain(MOUTH)
}

pub fn centroid(range: std::ops::Range<usize>) -> [f64; 2] {
    let n = range.len() as f64;
    let (sx, sy) = range.fold((0.0, 0.0), |(x, y), i| (x + TEMPLATE[i][0], y + TEMPLATE[i][1]));
    [sx / n, sy / n]
}

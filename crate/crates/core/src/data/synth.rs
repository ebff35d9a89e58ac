//! Procedural face renderer.
//!
//! Faces live in normalized coordinates `u, v ∈ [-1, 1]` (v pointing down).
//! Every shape is drawn with a soft edge roughly two pixels wide so the
//! renderer is smooth in its parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;

pub const IDENTITY_DIM: usize = 12;

/// Parameters of one rendered face. Rendering is a pure function of these.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceSpec {
    /// Entries in `[0, 1]`: skin tone, brightness, head width, head height, eye
    /// spacing, eye height, eye size, mouth width, mouth height, hair colour,
    /// iris colour, background.
    pub identity_vector: Vec<f64>,
    pub pose_jitter: f64,
    pub seed: u64,
}

impl SyntheticFaceSpec {
    pub fn render(&self, resolution: usize) -> Image {
        let geom = FaceGeometry::from_identity(&self.identity_vector);
        let pose = Pose::draw(self.pose_jitter, self.seed);
        render_face(&geom, &pose, resolution)
    }
}

/// Draws a random identity vector.
pub fn random_identity<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..IDENTITY_DIM).map(|_| rng.random::<f64>()).collect()
}

#[derive(Clone, Debug)]
struct FaceGeometry {
    skin: [f64; 3],
    hair: [f64; 3],
    background: [f64; 3],
    iris: [f64; 3],
    head_a: f64,
    head_b: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
    hairline: f64,
    brow_tilt: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl FaceGeometry {
    fn from_identity(id: &[f64]) -> Self {
        let p = |i: usize| id.get(i).copied().unwrap_or(0.5).clamp(0.0, 1.0);
        let bright = 0.85 + 0.3 * p(1);
        let skin = lerp3([0.96, 0.80, 0.69], [0.42, 0.28, 0.19], p(0)).map(|c| (c * bright).min(1.0));
        let hair = lerp3([0.12, 0.08, 0.05], [0.85, 0.70, 0.35], p(9));
        let background = lerp3([0.25, 0.35, 0.55], [0.70, 0.75, 0.65], p(11));
        let iris = lerp3([0.15, 0.35, 0.60], [0.30, 0.18, 0.08], p(10));
        Self {
            skin,
            hair,
            background,
            iris,
            head_a: 0.48 + 0.22 * p(2),
            head_b: 0.62 + 0.2 * p(3),
            eye_dx: 0.14 + 0.14 * p(4),
            eye_y: -0.12 + 0.12 * p(5),
            eye_r: 0.06 + 0.05 * p(6),
            mouth_y: 0.28 + 0.14 * p(8),
            mouth_w: 0.12 + 0.14 * p(7),
            hairline: 0.65 + 0.2 * (0.3 * p(9) + 0.7 * p(3)),
            brow_tilt: -0.08 + 0.16 * p(1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    dx: f64,
    dy: f64,
    rot: f64,
    scale: f64,
    light: f64,
}

impl Pose {
    fn draw(jitter: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = || rng.random_range(-1.0..=1.0) * jitter;
        Self { dx: 0.08 * sym(), dy: 0.08 * sym(), rot: 0.15 * sym(), scale: 1.0 + 0.06 * sym(), light: 0.08 * sym() }
    }
}

/// Coverage of a shape with signed distance `d` and edge width `soft`.
fn cover(d: f64, soft: f64) -> f64 {
    (0.5 - d / soft).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse.
fn ellipse(u: f64, v: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let (x, y) = ((u - cx) / a, (v - cy) / b);
    ((x * x + y * y).sqrt() - 1.0) * a.min(b)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * alpha;
    }
}

fn render_face(g: &FaceGeometry, pose: &Pose, res: usize) -> Image {
    let soft = 4.0 / res as f64;
    let (sin, cos) = pose.rot.sin_cos();
    Image::from_fn(res, res, |px, py| {
        let x = (px as f64 + 0.5) / res as f64 * 2.0 - 1.0;
        let y = (py as f64 + 0.5) / res as f64 * 2.0 - 1.0;
        // inverse pose: translate, rotate, scale back into the face frame
        let (tx, ty) = (x - pose.dx, y - pose.dy);
        let u = (cos * tx + sin * ty) / pose.scale;
        let v = (-sin * tx + cos * ty) / pose.scale;

        let mut c = lerp3(g.background, g.background.map(|b| b * 0.8), (y + 1.0) / 2.0);

        let head_cy = 0.08;
        let head = ellipse(u, v, 0.0, head_cy, g.head_a, g.head_b);
        let hair_shell = ellipse(u, v, 0.0, head_cy - 0.06, g.head_a + 0.08, g.head_b + 0.08);
        blend(&mut c, g.hair, cover(hair_shell.max(v - head_cy - 0.1), soft));

        let shade = 1.0 + pose.light * u - 0.18 * (u * u / (g.head_a * g.head_a) + (v - head_cy).powi(2));
        let skin = g.skin.map(|s| (s * shade).clamp(0.0, 1.0));
        blend(&mut c, skin, cover(head, soft));
        // fringe: the part of the head above the hairline
        let hair_top = v - (head_cy - g.head_b * g.hairline);
        blend(&mut c, g.hair, cover(head.max(hair_top), soft));

        for side in [-1.0, 1.0] {
            let ex = side * g.eye_dx;
            let sclera = ellipse(u, v, ex, g.eye_y, g.eye_r * 1.5, g.eye_r);
            blend(&mut c, [0.95, 0.95, 0.93], cover(sclera, soft));
            let iris = ellipse(u, v, ex, g.eye_y, g.eye_r * 0.75, g.eye_r * 0.75);
            blend(&mut c, g.iris, cover(iris, soft));
            let pupil = ellipse(u, v, ex, g.eye_y, g.eye_r * 0.35, g.eye_r * 0.35);
            blend(&mut c, [0.03, 0.03, 0.03], cover(pupil, soft));
            let brow_y = g.eye_y - g.eye_r * 1.9 + side * g.brow_tilt * (u - ex);
            let brow = ellipse(u, v, ex, brow_y, g.eye_r * 1.8, 0.025);
            blend(&mut c, g.hair.map(|h| h * 0.8), cover(brow, soft));
        }

        let nose = ellipse(u, v, 0.0, (g.eye_y + g.mouth_y) / 2.0 + 0.04, 0.05, 0.035);
        blend(&mut c, g.skin.map(|s| s * 0.78), cover(nose, soft));
        let mouth = ellipse(u, v, 0.0, g.mouth_y, g.mouth_w, 0.04);
        blend(&mut c, [0.65, 0.22, 0.25], cover(mouth, soft));

        c.map(|v| v as f32)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: Vec<f64>, seed: u64) -> SyntheticFaceSpec {
        SyntheticFaceSpec { identity_vector: id, pose_jitter: 1.0, seed }
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = spec(vec![0.3; IDENTITY_DIM], 9);
        assert_eq!(s.render(64), s.render(64));
    }

    #[test]
    fn different_identities_differ() {
        let a = spec(vec![0.2; IDENTITY_DIM], 1).render(64);
        let b = spec(vec![0.8; IDENTITY_DIM], 1).render(64);
        assert!(a.mean_l2_distance(&b) > 0.0);
    }

    #[test]
    fn pose_only_varies_with_seed() {
        let id = vec![0.5; IDENTITY_DIM];
        let a = spec(id.clone(), 1).render(32);
        let b = spec(id.clone(), 2).render(32);
        assert!(a.mean_l2_distance(&b) > 0.0);
        let still = SyntheticFaceSpec { identity_vector: id, pose_jitter: 0.0, seed: 1 };
        let moved = SyntheticFaceSpec { seed: 2, ..still.clone() };
        assert_eq!(still.render(32), moved.render(32));
    }
}

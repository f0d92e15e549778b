//! Procedural surface coloring: a checker pattern modulated by value noise.
//!
//! Periodic-plus-stochastic texture is the hard case for inpainting, which is
//! exactly what the synthetic scenes are meant to exercise. Everything is a
//! pure function of (position, seed).

use crate::math::Vec3;

/// Seed-derived texture parameters for one surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTexture {
    color_a: [f64; 3],
    color_b: [f64; 3],
    checker_scale: f64,
    noise_scale: f64,
    noise_amp: f64,
    seed: u64,
}

impl SurfaceTexture {
    pub fn from_seed(seed: u64) -> Self {
        let mut s = seed;
        let mut next = || {
            s = splitmix64(s);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let base = [0.25 + 0.5 * next(), 0.25 + 0.5 * next(), 0.25 + 0.5 * next()];
        let alt = [0.25 + 0.5 * next(), 0.25 + 0.5 * next(), 0.25 + 0.5 * next()];
        SurfaceTexture {
            color_a: base,
            color_b: alt,
            checker_scale: 0.8 + 1.4 * next(),
            noise_scale: 1.5 + 2.5 * next(),
            noise_amp: 0.15 + 0.15 * next(),
            seed: splitmix64(seed ^ 0x9e3779b97f4a7c15),
        }
    }

    /// Albedo at a world position, clamped to [0.05, 0.95] so it stays
    /// strictly inside the color decoder's sigmoid range.
    pub fn color_at(&self, p: Vec3) -> [f64; 3] {
        let cell = |x: f64| (x * self.checker_scale).floor() as i64;
        let checker = (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2) == 0;
        let (hi, lo) = if checker {
            (self.color_a, self.color_b)
        } else {
            (self.color_b, self.color_a)
        };
        let n = value_noise_3d(p * self.noise_scale, self.seed);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let mixed = hi[c] * (1.0 - self.noise_amp) + lo[c] * self.noise_amp
                + self.noise_amp * (n - 0.5);
            out[c] = mixed.clamp(0.05, 0.95);
        }
        out
    }
}

/// Trilinearly interpolated lattice noise in [0, 1].
fn value_noise_3d(p: Vec3, seed: u64) -> f64 {
    let xf = p.x.floor();
    let yf = p.y.floor();
    let zf = p.z.floor();
    let (tx, ty, tz) = (smooth(p.x - xf), smooth(p.y - yf), smooth(p.z - zf));
    let (x0, y0, z0) = (xf as i64, yf as i64, zf as i64);
    let mut corner = [0.0; 8];
    for (i, c) in corner.iter_mut().enumerate() {
        let dx = (i & 1) as i64;
        let dy = ((i >> 1) & 1) as i64;
        let dz = ((i >> 2) & 1) as i64;
        *c = lattice(x0 + dx, y0 + dy, z0 + dz, seed);
    }
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(corner[0], corner[1], tx);
    let x10 = lerp(corner[2], corner[3], tx);
    let x01 = lerp(corner[4], corner[5], tx);
    let x11 = lerp(corner[6], corner[7], tx);
    let y0v = lerp(x00, x10, ty);
    let y1v = lerp(x01, x11, ty);
    lerp(y0v, y1v, tz)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic lattice value in [0, 1).
fn lattice(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ (x as u64).wrapping_mul(0x9e3779b97f4a7c15)
            ^ (y as u64).wrapping_mul(0xbf58476d1ce4e5b9)
            ^ (z as u64).wrapping_mul(0x94d049bb133111eb),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

//! Multi-octave value noise, hashed so no RNG state is involved.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// A seeded colour texture on the plane.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    pub seed: u64,
    pub octaves: usize,
    /// Period of the coarsest octave, in pixels.
    pub base_period: f64,
}

impl Texture {
    /// Colour at `(x, y)`, each channel in `[0.05, 0.95]`.
    pub fn sample(&self, x: f64, y: f64, channel: usize) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut period = self.base_period;
        for o in 0..self.octaves.max(1) {
            let s = splitmix(self.seed ^ ((o as u64) << 32) ^ ((channel as u64) << 48));
            sum += amp * value_noise(s, x / period, y / period);
            norm += amp;
            amp *= 0.5;
            period *= 0.5;
        }
        0.05 + 0.9 * (sum / norm)
    }
}

//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, position)`, so a stream can be
//! re-created at any point and two runs with the same seed agree bit for bit.

use super::Matrix;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator of uniform and standard-normal draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    key: u64,
    position: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            key: mix64(seed ^ GAMMA),
            position: 0,
        }
    }

    /// Generator positioned at `position` in the stream of `seed`.
    pub fn at(seed: u64, position: u64) -> Self {
        SeededRng {
            position,
            ..Self::new(seed)
        }
    }

    /// Independent stream derived from this generator's seed.
    pub fn substream(&self, index: u64) -> SeededRng {
        SeededRng::new(self.seed ^ mix64(index.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    #[inline]
    fn word(&self, lane: u64) -> u64 {
        let counter = self.position.wrapping_mul(2).wrapping_add(lane).wrapping_add(1);
        mix64(self.key.wrapping_add(counter.wrapping_mul(GAMMA)))
    }

    #[inline]
    fn unit(w: u64) -> f64 {
        // 53 random bits, centred in their bucket: never exactly 0 or 1.
        ((w >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        let u = Self::unit(self.word(0));
        self.position += 1;
        u
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let w = self.word(0);
        self.position += 1;
        ((w as u128 * n as u128) >> 64) as usize
    }

    /// One standard-normal draw (Box–Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = Self::unit(self.word(0));
        let u2 = Self::unit(self.word(1));
        self.position += 1;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// `rows x cols` matrix of standard-normal draws, filled row by row.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, self.standard_normal(rows * cols))
    }
}

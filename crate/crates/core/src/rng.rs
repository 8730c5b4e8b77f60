//! Counter-based random streams.
//!
//! A stream is a 64-bit key derived from the experiment seed and a path of
//! integer labels (path id, step id, ladder index, ...). Every draw is a pure
//! function of its key, so results never depend on how work is scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Matrix;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Labels separating the independent uses of one experiment seed.
pub mod lane {
    pub const ONE_STEP: u64 = 1;
    pub const DYNAMICS: u64 = 2;
    pub const FEEDBACK: u64 = 3;
    pub const BOUNDARY: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const BUILDER: u64 = 6;
    pub const LADDER: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            key: splitmix64(seed ^ 0x5e_ed0f_7a1e_u64),
        }
    }

    /// Derived stream for `label`; distinct labels give independent streams.
    pub fn child(self, label: u64) -> Self {
        RngStream {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_mul(GOLDEN).wrapping_add(1))),
        }
    }

    pub fn key(self) -> u64 {
        self.key
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut z = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// `dim` independent standard normals.
    pub fn normals(self, dim: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `count × dim` standard normals; row `i` comes from `self.child(i)`.
    pub fn normal_matrix(self, count: usize, dim: usize) -> Matrix {
        use rayon::prelude::*;
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|i| self.child(i as u64).normals(dim))
            .collect();
        Matrix::from_fn(count, dim, |i, j| rows[i][j])
    }
}

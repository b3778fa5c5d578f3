//! Deterministic random-number plumbing.
//!
//! All randomness in the crate flows from a single 64-bit seed through a
//! counter-based splitting scheme: every sampling task derives its own
//! sub-seed from `(seed, stream ids...)` and runs an independent ChaCha
//! stream. Parallel Monte-Carlo loops split work into fixed-size chunks with
//! one derived stream per chunk and reduce partial sums in chunk order, so
//! results are bit-identical regardless of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// SplitMix64 finalizer; the standard 64-bit mixer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a seed and a list of stream identifiers.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    let mut s = mix64(seed);
    for &id in streams {
        s = mix64(s ^ mix64(id));
    }
    s
}

/// Fresh ChaCha stream for the given derived seed.
pub fn rng_from(seed: u64, streams: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, streams))
}

/// Samples per parallel chunk. Fixed so that the chunk decomposition (and
/// hence the floating-point reduction order) never depends on thread count.
pub const CHUNK: usize = 4096;

/// Accumulator for a Monte-Carlo mean with standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct McMoments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl McMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &McMoments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    }
}

/// Runs `n` Monte-Carlo trials split into deterministic chunks, in parallel.
///
/// `body(rng, out)` evaluates one trial and writes `dims` statistics into
/// `out`. Returns one [`McMoments`] per statistic. The reduction is performed
/// chunk-by-chunk in index order, so the result does not depend on the rayon
/// thread count.
pub fn parallel_mc<F>(n: usize, dims: usize, seed: u64, body: F) -> Vec<McMoments>
where
    F: Fn(&mut ChaCha12Rng, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let chunk_stats: Vec<Vec<McMoments>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from(seed, &[c as u64]);
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut out = vec![0.0; dims];
            let mut stats = vec![McMoments::default(); dims];
            for _ in lo..hi {
                body(&mut rng, &mut out);
                for (s, &x) in stats.iter_mut().zip(out.iter()) {
                    s.push(x);
                }
            }
            stats
        })
        .collect();

    let mut total = vec![McMoments::default(); dims];
    for stats in &chunk_stats {
        for (t, s) in total.iter_mut().zip(stats.iter()) {
            t.merge(s);
        }
    }
    total
}

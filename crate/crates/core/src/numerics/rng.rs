//! Counter-based random streams.
//!
//! The generator is Philox4x32-10 (Salmon et al., "Parallel random numbers:
//! as easy as 1, 2, 3"). A stream is the triple `(seed, stream_id, counter)`:
//! the seed is the 64-bit key, the stream id fills the upper half of the
//! 128-bit counter and the block index fills the lower half. Every draw is a
//! pure function of that triple, so a stream can be checkpointed by storing
//! three integers and resumed on any platform.
//!
//! Normal variates use the Box-Muller transform on one 128-bit block per pair
//! of normals, evaluated with `libm`.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Named purposes for streams derived from a master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamPurpose {
    CodebookCore = 1,
    CodebookProjector = 2,
    Shuffle = 3,
    Resample = 4,
    Autoencoder = 5,
    Data = 6,
    Analysis = 7,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Stream for `purpose` under `master_seed`; `index` separates siblings
    /// (for example one shuffle stream per epoch).
    pub fn derive(master_seed: u64, purpose: StreamPurpose, index: u32) -> Self {
        Self::new(master_seed, ((purpose as u64) << 32) | index as u64)
    }

    /// Restores a stream at an arbitrary counter position.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_block(&mut self) -> [u32; 4] {
        let ctr = [
            self.counter as u32,
            (self.counter >> 32) as u32,
            self.stream_id as u32,
            (self.stream_id >> 32) as u32,
        ];
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        self.counter = self.counter.wrapping_add(1);
        philox4x32_10(ctr, key)
    }

    /// One block, low 64 bits.
    pub fn next_u64(&mut self) -> u64 {
        let b = self.next_block();
        b[0] as u64 | (b[1] as u64) << 32
    }

    /// Uniform in the open interval (0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        to_open_unit(self.next_u64())
    }

    /// Uniform integer in `0..bound` by multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Two independent standard normals from one block.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let b = self.next_block();
        let u1 = to_open_unit(b[0] as u64 | (b[1] as u64) << 32);
        let u2 = to_open_unit(b[2] as u64 | (b[3] as u64) << 32);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// Fills `out` with standard normals; an odd tail discards the spare variate.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair().0;
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[inline]
fn to_open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// i.i.d. N(0, 1) tensor of the given shape.
pub fn sample_standard_normal<T: Scalar>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    sample_normal(shape, 1.0, rng)
}

/// i.i.d. N(0, std²) tensor of the given shape.
pub fn sample_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0.0f64; n];
    rng.fill_normal(&mut buf);
    let data = buf.into_iter().map(|x| T::lift(x * std)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 library.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn same_stream_is_bit_identical() {
        let a: Tensor<f32> = sample_standard_normal(&[7, 5], &mut RngStream::new(42, 3));
        let b: Tensor<f32> = sample_standard_normal(&[7, 5], &mut RngStream::new(42, 3));
        assert!(a.bit_eq(&b));
        let c: Tensor<f32> = sample_standard_normal(&[7, 5], &mut RngStream::new(42, 4));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn resume_from_counter() {
        let mut a = RngStream::new(9, 1);
        a.next_u64();
        a.next_u64();
        let mut b = RngStream::at(9, 1, a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments_over_a_million_draws() {
        let n = 1_000_000;
        let mut buf = vec![0.0; n];
        RngStream::new(2024, 0).fill_normal(&mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        let std = var.sqrt();
        assert!((0.99..=1.01).contains(&std), "std {std}");
    }

    /// Joint 10x10 histogram of paired uniforms from two streams. Under
    /// independence the Pearson statistic is chi-square with 99 degrees of
    /// freedom; the bound is its 0.999 quantile (Wilson-Hilferty).
    #[test]
    fn distinct_streams_pass_chi_square_independence() {
        let n = 200_000;
        let mut a = RngStream::new(7, 1);
        let mut b = RngStream::new(7, 2);
        let mut counts = [0u32; 100];
        for _ in 0..n {
            let i = (a.uniform() * 10.0) as usize;
            let j = (b.uniform() * 10.0) as usize;
            counts[i * 10 + j] += 1;
        }
        let expected = n as f64 / 100.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dof = 99.0f64;
        let z = 3.090_232; // 0.999 normal quantile
        let h = 2.0 / (9.0 * dof);
        let crit = dof * (1.0 - h + z * h.sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = RngStream::new(1, 1).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}

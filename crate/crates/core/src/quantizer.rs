//! Nearest-code lookup, the straight-through estimator, the three-term VQ
//! loss and the codebook-side backward pass.
//!
//! Assignments are constants during backward. The codebook term sends
//! gradient only into the codes that were selected, and from there only into
//! the projector of the group that owns them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{projector_backward, GroupedCodebook, MaterializedCodebook, ProjectorParams};
use crate::error::{Error, Result};
use crate::numerics::{gemm_acc, threads, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the codebook term `‖Q − sg[Z]‖²`.
    pub beta: f64,
    /// Weight on the commitment term `‖Z − sg[Q]‖²`.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.25,
        }
    }
}

impl LossWeights {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-term losses, each a mean over all elements of its tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub codebook_term: f64,
    pub commit_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct QuantizeResult<T = f32> {
    /// Global code index per position, positions in row-major order.
    pub indices: Vec<usize>,
    /// Leading dimensions of the feature map (everything but the code dimension).
    pub grid: Vec<usize>,
    /// Selected codes, same shape as the input feature map.
    pub quantized: Tensor<T>,
    /// Forward value of the straight-through output; equal to `quantized`.
    pub straight_through: Tensor<T>,
    pub group_counts: Vec<usize>,
    pub code_counts: Vec<usize>,
    pub codebook_version: u64,
}

impl<T: Scalar> QuantizeResult<T> {
    pub fn positions(&self) -> usize {
        self.indices.len()
    }
}

/// Exhaustive nearest code by squared Euclidean distance, ties to the smallest index.
pub fn nearest_code<'a, T: Scalar>(z: &[T], codebook: &'a Tensor<T>) -> Result<(usize, &'a [T])> {
    let (n, d) = codebook.dims2()?;
    if n == 0 {
        return Err(Error::config("cannot quantize against an empty codebook"));
    }
    if z.len() != d {
        return Err(Error::shape(format!(
            "vector of length {} does not match code dimension {d}",
            z.len()
        )));
    }
    let mut best = 0;
    let mut best_dist = T::infinity();
    for i in 0..n {
        let dist = squared_distance(z, codebook.row(i));
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    Ok((best, codebook.row(best)))
}

#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

const LOOKUP_CHUNK: usize = 256;

/// Nearest-code indices for each row of `rows` (`p × d`) using
/// `‖q‖² − 2 z·q`, which has the same argmin as the full distance.
pub fn lookup_indices<T: Scalar>(rows: &[T], codes: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, d) = codes.dims2()?;
    if n == 0 {
        return Err(Error::config("cannot quantize against an empty codebook"));
    }
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::shape(format!(
            "feature rows of total length {} do not match code dimension {d}",
            rows.len()
        )));
    }
    let norms: Vec<T> = (0..n)
        .map(|i| codes.row(i).iter().map(|&x| x * x).sum())
        .collect();
    let codes_t = codes.transpose()?;
    let chunk_len = LOOKUP_CHUNK * d;
    let work = |chunk: &[T]| -> Vec<usize> {
        let m = chunk.len() / d;
        let mut dots = vec![T::zero(); m * n];
        gemm_acc(chunk, codes_t.data(), &mut dots, m, d, n);
        let two = T::lift(2.0);
        dots.chunks(n)
            .map(|row| {
                let mut best = 0;
                let mut best_score = T::infinity();
                for (i, (&dot, &norm)) in row.iter().zip(&norms).enumerate() {
                    let s = norm - two * dot;
                    if s < best_score {
                        best = i;
                        best_score = s;
                    }
                }
                best
            })
            .collect()
    };
    let out = if threads() > 1 {
        rows.par_chunks(chunk_len).map(work).collect::<Vec<_>>().concat()
    } else {
        rows.chunks(chunk_len).flat_map(work).collect()
    };
    Ok(out)
}

/// Quantizes every position of `z` (`[..., d]`) against a materialized codebook.
pub fn quantize<T: Scalar>(z: &Tensor<T>, codebook: &MaterializedCodebook<T>) -> Result<QuantizeResult<T>> {
    let d = codebook.d();
    let last = z.shape().last().copied().unwrap_or(0);
    if z.rank() < 2 || last != d {
        return Err(Error::shape(format!(
            "feature map shape {:?} does not end in code dimension {d}",
            z.shape()
        )));
    }
    let indices = lookup_indices(z.data(), &codebook.codes)?;
    let mut quantized = Tensor::zeros(z.shape());
    let mut code_counts = vec![0usize; codebook.n()];
    for (p, &i) in indices.iter().enumerate() {
        quantized.data_mut()[p * d..(p + 1) * d].copy_from_slice(codebook.codes.row(i));
        code_counts[i] += 1;
    }
    let group_counts = codebook
        .offsets
        .windows(2)
        .map(|w| code_counts[w[0]..w[1]].iter().sum())
        .collect();
    Ok(QuantizeResult {
        indices,
        grid: z.shape()[..z.rank() - 1].to_vec(),
        straight_through: quantized.clone(),
        quantized,
        group_counts,
        code_counts,
        codebook_version: codebook.version,
    })
}

/// Materializes `gc` once and quantizes `z` against it.
pub fn quantize_featuremap<T: Scalar>(z: &Tensor<T>, gc: &GroupedCodebook<T>) -> Result<QuantizeResult<T>> {
    quantize(z, &gc.materialized()?)
}

/// Straight-through backward: the gradient reaching the quantized map is
/// passed to the encoder output unchanged.
pub fn ste_gradient<T: Scalar>(upstream: &Tensor<T>) -> Tensor<T> {
    upstream.clone()
}

fn mean_sq_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let e = x.as_f64() - y.as_f64();
            e * e
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Reconstruction, codebook and commitment terms plus their weighted total.
pub fn vq_losses<T: Scalar>(
    images: &Tensor<T>,
    recon: &Tensor<T>,
    z: &Tensor<T>,
    result: &QuantizeResult<T>,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let recon_loss = mean_sq_diff(images, recon)?;
    // Both terms share a value; they differ only in where gradients flow.
    let cb = mean_sq_diff(&result.quantized, z)?;
    Ok(LossBreakdown {
        recon: recon_loss,
        codebook_term: cb,
        commit_term: cb,
        total: recon_loss + weights.beta * cb + weights.gamma * cb,
    })
}

/// Gradient of `β·‖Q − sg[Z]‖²` (mean) with respect to the quantized map.
pub fn codebook_term_grad<T: Scalar>(result: &QuantizeResult<T>, z: &Tensor<T>, weights: LossWeights) -> Result<Tensor<T>> {
    let scale = T::lift(2.0 * weights.beta / z.len().max(1) as f64);
    result.quantized.zip_map(z, |q, zv| scale * (q - zv))
}

/// Scatters the codebook-term gradient onto codebook rows (`n × d`), in position order.
pub fn code_row_grads<T: Scalar>(
    result: &QuantizeResult<T>,
    z: &Tensor<T>,
    weights: LossWeights,
    n: usize,
) -> Result<Tensor<T>> {
    let dq = codebook_term_grad(result, z, weights)?;
    let d = z.shape()[z.rank() - 1];
    let mut out = Tensor::zeros(&[n, d]);
    for (p, &i) in result.indices.iter().enumerate() {
        let src = &dq.data()[p * d..(p + 1) * d];
        for (o, &g) in out.row_mut(i).iter_mut().zip(src) {
            *o += g;
        }
    }
    Ok(out)
}

/// Gradients of the weighted codebook term with respect to every group's
/// projector. Groups with no assigned positions get exact zeros.
pub fn backward_codebook<T: Scalar>(
    result: &QuantizeResult<T>,
    z: &Tensor<T>,
    gc: &GroupedCodebook<T>,
    weights: LossWeights,
) -> Result<Vec<ProjectorParams<T>>> {
    if result.codebook_version != gc.version() {
        return Err(Error::Contract(format!(
            "quantization result was produced by codebook version {} but the codebook is now at version {}",
            result.codebook_version,
            gc.version()
        )));
    }
    z.check_same_shape(&result.quantized)?;
    let dc = code_row_grads(result, z, weights, gc.n())?;
    gc.groups()
        .iter()
        .enumerate()
        .map(|(j, g)| {
            if result.group_counts[j] == 0 || weights.beta == 0.0 {
                return Ok(g.projector.zeros_like());
            }
            let (lo, hi) = (gc.offsets()[j], gc.offsets()[j + 1]);
            projector_backward(g.core(), &g.projector, &dc.slice_rows(lo, hi))
        })
        .collect()
}

/// Gradient reaching the encoder output: the straight-through copy of the
/// decoder-side gradient plus the commitment term `γ·‖Z − sg[Q]‖²`.
pub fn encoder_side_grad<T: Scalar>(
    result: &QuantizeResult<T>,
    z: &Tensor<T>,
    upstream: &Tensor<T>,
    weights: LossWeights,
) -> Result<Tensor<T>> {
    upstream.check_same_shape(z)?;
    let scale = T::lift(2.0 * weights.gamma / z.len().max(1) as f64);
    let mut grad = ste_gradient(upstream);
    for ((g, &zv), &q) in grad.data_mut().iter_mut().zip(z.data()).zip(result.quantized.data()) {
        *g += scale * (zv - q);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{init_grouped_codebook, uniform_specs, CodebookStreams, ProjectorVariant};
    use crate::numerics::{sample_standard_normal, RngStream};
    use proptest::prelude::*;

    fn two_codes() -> Tensor<f64> {
        Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]])
    }

    #[test]
    fn nearest_code_examples() {
        let cb = two_codes();
        assert_eq!(nearest_code(&[0.2, 0.1], &cb).unwrap().0, 0);
        let (i, row) = nearest_code(&[1.0, 1.0], &cb).unwrap();
        assert_eq!(i, 1);
        assert_eq!(squared_distance(&[1.0, 1.0], row), 0.0);
        assert_eq!(nearest_code(&[0.5, 0.5], &cb).unwrap().0, 0);
        assert!(matches!(
            nearest_code(&[0.0, 0.0], &Tensor::<f64>::zeros(&[0, 2])),
            Err(Error::Config(_))
        ));
        assert_eq!(lookup_indices(&[0.5, 0.5, 0.2, 0.1, 1.0, 1.0], &cb).unwrap(), vec![0, 0, 1]);
    }

    fn small_codebook(seed: u64) -> GroupedCodebook<f64> {
        init_grouped_codebook(
            3,
            &uniform_specs(16, 4, 3).unwrap(),
            ProjectorVariant::Linear,
            &mut CodebookStreams::from_seed(seed),
        )
        .unwrap()
    }

    #[test]
    fn single_position_reduces_to_nearest_code() {
        let gc = small_codebook(1);
        let z = Tensor::from_vec(&[1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let res = quantize_featuremap(&z, &gc).unwrap();
        let cb = gc.materialize().unwrap();
        assert_eq!(res.indices[0], nearest_code(z.data(), &cb).unwrap().0);
    }

    #[test]
    fn identical_positions_use_one_code() {
        let gc = small_codebook(2);
        let z = Tensor::from_vec(&[3, 3, 3], [0.1, 0.4, -0.3].repeat(9)).unwrap();
        let res = quantize_featuremap(&z, &gc).unwrap();
        assert!(res.indices.iter().all(|&i| i == res.indices[0]));
        let (j, _) = gc.group_of_index(res.indices[0]).unwrap();
        assert_eq!(res.group_counts[j], 9);
        assert_eq!(res.group_counts.iter().sum::<usize>(), 9);
    }

    #[test]
    fn matches_exhaustive_search() {
        let gc = small_codebook(3);
        let z: Tensor<f64> = sample_standard_normal(&[4, 4, 3], &mut RngStream::new(3, 9));
        let res = quantize_featuremap(&z, &gc).unwrap();
        let cb = gc.materialize().unwrap();
        for p in 0..16 {
            let zp = &z.data()[p * 3..(p + 1) * 3];
            let brute = (0..16)
                .map(|i| (squared_distance(zp, cb.row(i)), i))
                .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
                .1;
            assert_eq!(res.indices[p], brute);
            assert_eq!(&res.quantized.data()[p * 3..(p + 1) * 3], cb.row(brute));
        }
        assert!(res.straight_through.bit_eq(&res.quantized));
    }

    #[test]
    fn ste_is_identity() {
        let g: Tensor<f32> = sample_standard_normal(&[2, 2, 3], &mut RngStream::new(0, 0));
        assert!(ste_gradient(&g).bit_eq(&g));
        assert!(ste_gradient(&Tensor::<f32>::zeros(&[2, 2])).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_hand_arithmetic() {
        let one = |v: f64| Tensor::from_vec(&[1, 1], vec![v]).unwrap();
        let mat = MaterializedCodebook::ungrouped(one(3.0), 0).unwrap();
        let z = one(2.0);
        let res = quantize(&z, &mat).unwrap();
        let l = vq_losses(&one(1.0), &one(0.0), &z, &res, LossWeights::new(1.0, 0.25).unwrap()).unwrap();
        assert_eq!((l.recon, l.codebook_term, l.commit_term, l.total), (1.0, 1.0, 1.0, 2.25));
    }

    #[test]
    fn zero_terms() {
        let codes = two_codes();
        let mat = MaterializedCodebook::ungrouped(codes.clone(), 0).unwrap();
        let z = codes.clone().reshape(&[1, 2, 2]).unwrap();
        let res = quantize(&z, &mat).unwrap();
        let img = Tensor::<f64>::full(&[2, 2], 0.3);
        let l = vq_losses(&img, &img, &z, &res, LossWeights::default()).unwrap();
        assert_eq!((l.recon, l.codebook_term, l.commit_term, l.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights::new(-1.0, 0.25).is_err());
    }

    #[test]
    fn stale_result_is_a_contract_violation() {
        let mut gc = small_codebook(4);
        let z: Tensor<f64> = sample_standard_normal(&[2, 2, 3], &mut RngStream::new(4, 0));
        let res = quantize_featuremap(&z, &gc).unwrap();
        assert!(backward_codebook(&res, &z, &gc, LossWeights::default()).is_ok());
        gc.projector_mut(0);
        assert!(matches!(
            backward_codebook(&res, &z, &gc, LossWeights::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn beta_zero_gives_zero_codebook_gradients() {
        let gc = small_codebook(5);
        let z: Tensor<f64> = sample_standard_normal(&[4, 4, 3], &mut RngStream::new(5, 0));
        let res = quantize_featuremap(&z, &gc).unwrap();
        let grads = backward_codebook(&res, &z, &gc, LossWeights::new(0.0, 0.25).unwrap()).unwrap();
        assert!(grads.iter().all(|g| g.is_all_zero()));
    }

    proptest! {
        #[test]
        fn dot_trick_agrees_with_naive_distance(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed, 1);
            let codes: Tensor<f64> = sample_standard_normal(&[37, 5], &mut rng);
            let z: Tensor<f64> = sample_standard_normal(&[50, 5], &mut rng);
            let fast = lookup_indices(z.data(), &codes).unwrap();
            for p in 0..50 {
                prop_assert_eq!(fast[p], nearest_code(z.row(p), &codes).unwrap().0);
            }
        }

        #[test]
        fn argmin_invariant_under_common_shift(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed, 2);
            let codes: Tensor<f64> = sample_standard_normal(&[20, 4], &mut rng);
            let z: Tensor<f64> = sample_standard_normal(&[4], &mut rng);
            let shift: Tensor<f64> = sample_standard_normal(&[4], &mut rng);
            let shifted_codes = Tensor::from_vec(
                &[20, 4],
                codes.data().chunks(4).flat_map(|r| r.iter().zip(shift.data()).map(|(a, b)| a + b)).collect(),
            ).unwrap();
            let shifted_z: Vec<f64> = z.data().iter().zip(shift.data()).map(|(a, b)| a + b).collect();
            prop_assert_eq!(
                nearest_code(z.data(), &codes).unwrap().0,
                nearest_code(&shifted_z, &shifted_codes).unwrap().0
            );
        }

        #[test]
        fn quantized_rows_are_codebook_rows(seed in 0u64..10_000) {
            let gc = small_codebook(seed);
            let z: Tensor<f64> = sample_standard_normal(&[3, 5, 3], &mut RngStream::new(seed, 3));
            let res = quantize_featuremap(&z, &gc).unwrap();
            let cb = gc.materialize().unwrap();
            for (p, &i) in res.indices.iter().enumerate() {
                prop_assert_eq!(&res.quantized.data()[p * 3..(p + 1) * 3], cb.row(i));
            }
        }
    }
}

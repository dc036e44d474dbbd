//! Codebook statistics, similarity matrices, 2-D projections and image metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codebook::MaterializedCodebook;
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, sample_normal, RngStream, Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Fraction of the `n` codes with a positive count.
pub fn utilization(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).count() as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: usize,
    pub norm_mean: f64,
    /// Population variance of the row norms.
    pub norm_var: f64,
    pub usage_frac: f64,
}

/// Per-group norm statistics and usage shares. The flag is `true` when no
/// code was used at all, in which case every usage fraction is 0.
pub fn group_stats<T: Scalar>(codebook: &MaterializedCodebook<T>, counts: &[usize]) -> Result<(Vec<GroupStats>, bool)> {
    if counts.len() != codebook.n() {
        return Err(Error::shape(format!(
            "got {} usage counts for a codebook of {} codes",
            counts.len(),
            codebook.n()
        )));
    }
    let total: usize = counts.iter().sum();
    let stats = codebook
        .offsets
        .windows(2)
        .enumerate()
        .map(|(j, w)| {
            let norms: Vec<f64> = (w[0]..w[1])
                .map(|i| {
                    codebook
                        .codes
                        .row(i)
                        .iter()
                        .map(|v| v.as_f64() * v.as_f64())
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let m = norms.len().max(1) as f64;
            let mean = norms.iter().sum::<f64>() / m;
            let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
            let used: usize = counts[w[0]..w[1]].iter().sum();
            GroupStats {
                group: j,
                norm_mean: mean,
                norm_var: var,
                usage_frac: if total == 0 { 0.0 } else { used as f64 / total as f64 },
            }
        })
        .collect();
    Ok((stats, total == 0))
}

/// Pairwise cosine similarities between rows.
pub fn cosine_similarity_matrix<T: Scalar>(codes: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = codes.dims2()?;
    let mut unit = codes.clone();
    for i in 0..m {
        let row = unit.row_mut(i);
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric(format!("row {i} has zero norm")));
        }
        let inv = T::lift(1.0 / norm);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let mut s = matmul_nt(&unit, &unit)?;
    for i in 0..m {
        for j in 0..i {
            // Symmetrize.
            let avg = (s.get(&[i, j]) + s.get(&[j, i])) * T::lift(0.5);
            s.set(&[i, j], avg);
            s.set(&[j, i], avg);
        }
        s.set(&[i, i], T::one());
    }
    Ok(s)
}

/// Projects rows onto two random directions with N(0, 1/d) entries.
pub fn random_projection_2d<T: Scalar>(codes: &Tensor<T>, rng: &mut RngStream) -> Result<Tensor<T>> {
    let (_, d) = codes.dims2()?;
    if d < 2 {
        return Err(Error::config(format!("random projection needs d >= 2, got {d}")));
    }
    let r = sample_normal(&[d, 2], (1.0 / d as f64).sqrt(), rng);
    matmul(codes, &r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2d {
    /// `m × 2` scores on the two leading components.
    pub coords: Tensor<f64>,
    pub explained_variance: [f64; 2],
    /// Columns dropped for having zero variance.
    pub dropped: Vec<usize>,
}

/// Leading two principal components of the standardized rows.
///
/// Eigenvectors come from nalgebra's symmetric eigen-decomposition of the
/// covariance of the standardized columns (population normalization). Each
/// eigenvector is signed so that its largest-magnitude entry is positive.
pub fn pca_2d<T: Scalar>(codes: &Tensor<T>) -> Result<Pca2d> {
    let (m, d) = codes.dims2()?;
    if m < 3 {
        return Err(Error::config(format!("PCA needs at least 3 rows, got {m}")));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in 0..d {
        let col: Vec<f64> = (0..m).map(|i| codes.row(i)[c].as_f64()).collect();
        let mean = col.iter().sum::<f64>() / m as f64;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        if std <= 1e-12 {
            dropped.push(c);
            continue;
        }
        kept.push(c);
        cols.push(col.iter().map(|x| (x - mean) / std).collect());
    }
    if kept.is_empty() {
        return Err(Error::numeric("every column has zero variance"));
    }
    let p = kept.len();
    let x = DMatrix::from_fn(m, p, |i, j| cols[j][i]);
    let cov = (x.transpose() * &x) / m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut coords = Tensor::zeros(&[m, 2]);
    let mut explained = [0.0; 2];
    for (slot, &e) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = eig.eigenvalues[e].max(0.0);
        for i in 0..m {
            let s: f64 = (0..p).map(|j| x[(i, j)] * v[j]).sum();
            coords.set(&[i, slot], s);
        }
    }
    Ok(Pca2d {
        coords,
        explained_variance: explained,
        dropped,
    })
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(image: &Tensor<T>, recon: &Tensor<T>, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::config("PSNR peak value must be positive"));
    }
    Ok(psnr_from_mse(mse(image, recon)?, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}

/// Mean SSIM of one `H × W × C` image pair over non-overlapping 7×7 windows,
/// averaged over windows and channels, for data range 1.
pub fn ssim<T: Scalar>(image: &Tensor<T>, recon: &Tensor<T>) -> Result<f64> {
    image.check_same_shape(recon)?;
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape(format!("SSIM expects H×W×C images, got {s:?}"))),
    };
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::config(format!("image {h}×{w} is smaller than the {win}×{win} SSIM window")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let count = (win * win) as f64;
    let (x, y) = (image.data(), recon.data());
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..h / win {
        for wx in 0..w / win {
            for ch in 0..c {
                let at = |dy: usize, dx: usize| ((wy * win + dy) * w + wx * win + dx) * c + ch;
                let (mut mx, mut my) = (0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        mx += x[at(dy, dx)].as_f64();
                        my += y[at(dy, dx)].as_f64();
                    }
                }
                mx /= count;
                my /= count;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let a = x[at(dy, dx)].as_f64() - mx;
                        let b = y[at(dy, dx)].as_f64() - my;
                        vx += a * a;
                        vy += b * b;
                        cxy += a * b;
                    }
                }
                vx /= count;
                vy /= count;
                cxy /= count;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Up to `per_group` codes from each group, chosen without replacement.
/// Returns the selected rows with their global indices and group ids.
pub fn sample_codes_per_group<T: Scalar>(
    codebook: &MaterializedCodebook<T>,
    per_group: usize,
    rng: &mut RngStream,
) -> (Tensor<T>, Vec<(usize, usize)>) {
    let d = codebook.d();
    let mut data = Vec::new();
    let mut picked = Vec::new();
    for (j, w) in codebook.offsets.windows(2).enumerate() {
        let size = w[1] - w[0];
        let mut local = if size <= per_group {
            (0..size).collect::<Vec<_>>()
        } else {
            rng.permutation(size)[..per_group].to_vec()
        };
        local.sort_unstable();
        for i in local {
            let g = w[0] + i;
            data.extend_from_slice(codebook.codes.row(g));
            picked.push((g, j));
        }
    }
    let rows = picked.len();
    (Tensor::from_vec(&[rows, d], data).expect("rows × d"), picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_standard_normal;
    use proptest::prelude::*;

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&[1, 0, 5, 0], 4), 0.5);
        assert_eq!(utilization(&[2, 3, 1], 3), 1.0);
        assert_eq!(utilization(&[0, 0], 2), 0.0);
    }

    #[test]
    fn group_norm_stats() {
        let codes = Tensor::<f64>::from_rows(&[&[3.0, 0.0], &[0.0, 4.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let cb = MaterializedCodebook {
            codes,
            offsets: vec![0, 2, 4],
            version: 0,
        };
        let (s, none) = group_stats(&cb, &[1, 1, 1, 1]).unwrap();
        assert!(!none);
        assert!((s[0].norm_mean - 3.5).abs() < 1e-12);
        assert!((s[0].norm_var - 0.25).abs() < 1e-12);
        assert_eq!(s[1].norm_var, 0.0);
        assert_eq!(s[0].usage_frac, 0.5);
        let (s, none) = group_stats(&cb, &[0; 4]).unwrap();
        assert!(none && s.iter().all(|g| g.usage_frac == 0.0));
    }

    #[test]
    fn uniform_usage_over_four_groups() {
        let mut rng = RngStream::new(0, 0);
        let cb = MaterializedCodebook {
            codes: sample_standard_normal::<f64>(&[8, 3], &mut rng),
            offsets: vec![0, 2, 4, 6, 8],
            version: 0,
        };
        let (s, _) = group_stats(&cb, &[3, 1, 2, 2, 0, 4, 4, 0]).unwrap();
        assert!(s.iter().all(|g| g.usage_frac == 0.25));
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_similarity_matrix(&Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
        let s = cosine_similarity_matrix(&Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]])).unwrap();
        assert!((s.get(&[0, 1]) - 1.0).abs() < 1e-12);
        let err = cosine_similarity_matrix(&Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]])).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn projection_is_reproducible_and_linear() {
        let mut rng = RngStream::new(4, 4);
        let a: Tensor<f64> = sample_standard_normal(&[5, 6], &mut rng);
        let b: Tensor<f64> = sample_standard_normal(&[5, 6], &mut rng);
        let p = |t: &Tensor<f64>| random_projection_2d(t, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(p(&a).shape(), &[5, 2]);
        assert!(p(&a).bit_eq(&p(&a)));
        let sum = p(&a.add(&b).unwrap());
        assert!(sum.max_abs_diff(&p(&a).add(&p(&b)).unwrap()) < 1e-12);
    }

    #[test]
    fn pca_collinear_and_ordering() {
        let t = Tensor::<f64>::from_rows(&[&[-1.0, -2.0], &[0.0, 0.0], &[1.0, 2.0]]);
        let p = pca_2d(&t).unwrap();
        assert!(p.explained_variance[1].abs() <= 1e-8);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(pca_2d(&Tensor::<f64>::zeros(&[2, 2])).is_err());
    }

    /// Closed-form eigenvectors of a 2×2 symmetric matrix.
    fn eig2(a: f64, b: f64, c: f64) -> [(f64, [f64; 2]); 2] {
        let tr = a + c;
        let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let vec = |l: f64| {
            let v = if b.abs() > 1e-15 { [b, l - a] } else if (l - a).abs() < 1e-15 { [1.0, 0.0] } else { [0.0, 1.0] };
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        [(l1, vec(l1)), (l2, vec(l2))]
    }

    #[test]
    fn pca_three_points_match_closed_form() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let t = Tensor::<f64>::from_rows(&[&pts[0], &pts[1], &pts[2]]);
        let p = pca_2d(&t).unwrap();
        let mut z = [[0.0; 2]; 3];
        for c in 0..2 {
            let mean = pts.iter().map(|r| r[c]).sum::<f64>() / 3.0;
            let sd = (pts.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
            for i in 0..3 {
                z[i][c] = (pts[i][c] - mean) / sd;
            }
        }
        let cov = |a: usize, b: usize| z.iter().map(|r| r[a] * r[b]).sum::<f64>() / 3.0;
        let eig = eig2(cov(0, 0), cov(0, 1), cov(1, 1));
        for (slot, (l, v)) in eig.iter().enumerate() {
            assert!((p.explained_variance[slot] - l).abs() < 1e-9);
            let dot: Vec<f64> = z.iter().map(|r| r[0] * v[0] + r[1] * v[1]).collect();
            let same = (0..3).all(|i| (p.coords.get(&[i, slot]) - dot[i]).abs() < 1e-6);
            let flipped = (0..3).all(|i| (p.coords.get(&[i, slot]) + dot[i]).abs() < 1e-6);
            assert!(same || flipped, "component {slot}");
        }
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::zeros(&[10]);
        let b = Tensor::<f64>::full(&[10], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let c = Tensor::<f64>::full(&[10], 0.2);
        let drop = psnr(&a, &b, 1.0).unwrap() - psnr(&a, &c, 1.0).unwrap();
        assert!((drop - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(matches!(psnr(&a, &Tensor::zeros(&[3]), 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_examples() {
        let mut rng = RngStream::new(1, 1);
        let img = Tensor::<f64>::from_vec(&[14, 14, 3], (0..588).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let (a, b) = (0.2, 0.7);
        let s = ssim(&Tensor::<f64>::full(&[7, 7, 1], a), &Tensor::full(&[7, 7, 1], b)).unwrap();
        let c1 = 0.01f64 * 0.01;
        assert!((s - (2.0 * a * b + c1) / (a * a + b * b + c1)).abs() < 1e-12);
        assert!(matches!(ssim(&Tensor::<f64>::zeros(&[6, 6, 3]), &Tensor::zeros(&[6, 6, 3])), Err(Error::Config(_))));
    }

    #[test]
    fn per_group_sampling_caps_and_orders() {
        let mut rng = RngStream::new(2, 2);
        let cb = MaterializedCodebook {
            codes: sample_standard_normal::<f32>(&[300, 4], &mut rng),
            offsets: vec![0, 200, 300],
            version: 0,
        };
        let (rows, picked) = sample_codes_per_group(&cb, 128, &mut rng);
        assert_eq!(rows.shape(), &[228, 4]);
        assert_eq!(picked.iter().filter(|p| p.1 == 0).count(), 128);
        assert!(picked.iter().all(|&(g, j)| (j == 0) == (g < 200)));
    }

    proptest! {
        #[test]
        fn utilization_is_monotone(counts in prop::collection::vec(0usize..3, 1..20), pick in 0usize..20) {
            let n = counts.len();
            let mut more = counts.clone();
            more[pick % n] += 1;
            prop_assert!(utilization(&more, n) >= utilization(&counts, n));
        }

        #[test]
        fn cosine_matrix_is_symmetric(seed in 0u64..200, m in 1usize..8, d in 1usize..6) {
            let t: Tensor<f32> = sample_standard_normal(&[m, d], &mut RngStream::new(seed, 0));
            let s = cosine_similarity_matrix(&t).unwrap();
            prop_assert!(s.max_abs_diff(&s.transpose().unwrap()) <= 1e-6);
            for i in 0..m {
                prop_assert!((s.get(&[i, i]) - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn psnr_decreases_with_mse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
        }

        #[test]
        fn ssim_is_bounded(seed in 0u64..100) {
            let mut rng = RngStream::new(seed, 3);
            let a = Tensor::<f64>::from_vec(&[7, 7, 2], (0..98).map(|_| rng.uniform()).collect()).unwrap();
            let b = Tensor::<f64>::from_vec(&[7, 7, 2], (0..98).map(|_| rng.uniform()).collect()).unwrap();
            let s = ssim(&a, &b).unwrap();
            prop_assert!(s > -1.0 && s <= 1.0);
        }

        #[test]
        fn pca_projection_is_lossless_on_rank_two_data(seed in 0u64..100) {
            let mut rng = RngStream::new(seed, 9);
            let base: Tensor<f64> = sample_standard_normal(&[12, 2], &mut rng);
            let mix: Tensor<f64> = sample_standard_normal(&[2, 4], &mut rng);
            let data = matmul(&base, &mix).unwrap();
            let p = pca_2d(&data).unwrap();
            prop_assert!((p.explained_variance[0] + p.explained_variance[1] - 4.0).abs() < 1e-8);
            // Projecting standardized rank-2 rows onto the top-2 subspace keeps all pairwise geometry.
            let mut z = data.clone();
            for c in 0..4 {
                let col: Vec<f64> = (0..12).map(|i| data.get(&[i, c])).collect();
                let mean = col.iter().sum::<f64>() / 12.0;
                let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0).sqrt();
                for i in 0..12 {
                    z.set(&[i, c], (col[i] - mean) / sd);
                }
            }
            let g1 = matmul_nt(&z, &z).unwrap();
            let g2 = matmul_nt(&p.coords, &p.coords).unwrap();
            prop_assert!(g1.max_abs_diff(&g2) < 1e-8);
        }
    }
}

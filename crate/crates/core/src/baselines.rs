//! Unsupervised hashing baselines: random-projection LSH, PCA + sign, and
//! ITQ (PCA followed by a learned rotation minimizing quantization loss).
//! These are standard reconstructions used for comparison against the RBM.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::binary::BinaryHash;
use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};
use crate::postproc::{fit_pca, PcaModel};
use crate::seed::{stream_rng, STREAM_ITQ, STREAM_LSH};

pub const DEFAULT_ITQ_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LshModel {
    /// n_bits x dim, i.i.d. standard normal
    pub projections: DMatrix<f64>,
    pub seed: u64,
}

pub fn lsh_fit(dim: usize, n_bits: usize, seed: u64) -> Result<LshModel> {
    if n_bits == 0 || dim == 0 {
        return Err(NipError::Dim(format!(
            "LSH needs dim >= 1 and n_bits >= 1, got {dim} and {n_bits}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_LSH);
    let mut projections = DMatrix::zeros(n_bits, dim);
    for r in 0..n_bits {
        for c in 0..dim {
            projections[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(LshModel { projections, seed })
}

fn sign_bits(id: &str, projected: impl Iterator<Item = f64>) -> BinaryHash {
    BinaryHash::from_bits(id.to_string(), projected.map(|v| v > 0.0))
}

fn check_dim(expected: usize, d: &Descriptor, what: &str) -> Result<()> {
    if d.dim() != expected {
        return Err(NipError::Dim(format!(
            "{what} expects {expected} dims, descriptor has {}",
            d.dim()
        )));
    }
    Ok(())
}

pub fn lsh_hash(m: &LshModel, d: &Descriptor) -> Result<BinaryHash> {
    check_dim(m.projections.ncols(), d, "LSH model")?;
    let x = DVector::from_column_slice(&d.values);
    Ok(sign_bits(&d.image_id, (&m.projections * x).iter().copied()))
}

/// Unwhitened PCA to `n_bits` components.
pub fn pcahash_fit(data: &DMatrix<f64>, n_bits: usize) -> Result<PcaModel> {
    fit_pca(data, n_bits)
}

/// Bit `j` is the sign of the j-th centered principal projection.
pub fn pcahash_hash(m: &PcaModel, d: &Descriptor) -> Result<BinaryHash> {
    check_dim(m.in_dim(), d, "PCA hash model")?;
    Ok(sign_bits(
        &d.image_id,
        m.apply_values(&d.values)?.into_iter(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItqModel {
    pub pca: PcaModel,
    /// n_bits x n_bits orthogonal; codes are sign(V R) for row vectors V.
    pub rotation: DMatrix<f64>,
    pub iterations: usize,
    /// ||B - V R||_F^2 after each iteration.
    pub loss_history: Vec<f64>,
}

impl ItqModel {
    pub fn n_bits(&self) -> usize {
        self.rotation.nrows()
    }
}

/// Orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, STREAM_ITQ);
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    // fix column signs so Q does not depend on the solver's convention
    let r = qr.r();
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn quantize(v: &DMatrix<f64>) -> DMatrix<f64> {
    v.map(|x| if x > 0.0 { 1.0 } else { -1.0 })
}

/// Closest orthogonal matrix R maximizing tr(R^T M), i.e. U V^T from M = U S V^T.
fn procrustes(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(NipError::NumericalDivergence(
                "SVD failed in ITQ rotation update".into(),
            ))
        }
    };
    Ok(u * v_t)
}

pub fn itq_fit(
    data: &DMatrix<f64>,
    n_bits: usize,
    iterations: usize,
    seed: u64,
) -> Result<ItqModel> {
    if iterations == 0 {
        return Err(NipError::Config("ITQ needs at least one iteration".into()));
    }
    let pca = fit_pca(data, n_bits)?;
    let mut projected = DMatrix::zeros(data.nrows(), n_bits);
    for (r, row) in data.row_iter().enumerate() {
        let x: Vec<f64> = row.iter().copied().collect();
        for (c, v) in pca.apply_values(&x)?.into_iter().enumerate() {
            projected[(r, c)] = v;
        }
    }
    let mut rotation = random_orthogonal(n_bits, seed);
    let mut loss_history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let b = quantize(&(&projected * &rotation));
        rotation = procrustes(&(projected.transpose() * &b))?;
        loss_history.push((&b - &projected * &rotation).norm_squared());
    }
    Ok(ItqModel {
        pca,
        rotation,
        iterations,
        loss_history,
    })
}

pub fn itq_hash(m: &ItqModel, d: &Descriptor) -> Result<BinaryHash> {
    check_dim(m.pca.in_dim(), d, "ITQ model")?;
    let v = DVector::from_vec(m.pca.apply_values(&d.values)?);
    let rotated = m.rotation.transpose() * v;
    Ok(sign_bits(&d.image_id, rotated.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::stack_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, c| rng.random::<f64>() * (1.0 + c as f64))
    }

    fn desc(id: &str, v: Vec<f64>) -> Descriptor {
        Descriptor::from_values(id, v).unwrap()
    }

    #[test]
    fn lsh_is_deterministic_with_expected_shape() {
        let a = lsh_fit(512, 256, 3).unwrap();
        assert_eq!(a, lsh_fit(512, 256, 3).unwrap());
        assert_eq!(a.projections.shape(), (256, 512));
        assert_ne!(a, lsh_fit(512, 256, 4).unwrap());
    }

    #[test]
    fn lsh_rows_look_standard_normal() {
        let m = lsh_fit(10_000, 2, 9).unwrap();
        for row in m.projections.row_iter() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // 4 sigma: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n)
            assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
        }
    }

    #[test]
    fn lsh_hash_properties() {
        let m = lsh_fit(8, 64, 1).unwrap();
        assert_eq!(
            lsh_hash(&m, &desc("z", vec![0.0; 8])).unwrap().count_ones(),
            0
        );
        let x: Vec<f64> = (0..8).map(|i| (i as f64 - 3.3) * 0.7).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 12.5).collect();
        let hx = lsh_hash(&m, &desc("x", x)).unwrap();
        let hn = lsh_hash(&m, &desc("x", neg)).unwrap();
        let hs = lsh_hash(&m, &desc("x", scaled)).unwrap();
        assert!(hx
            .to_bools()
            .iter()
            .zip(hn.to_bools())
            .all(|(a, b)| *a != b));
        assert_eq!(hx, hs);
        assert!(matches!(
            lsh_hash(&m, &desc("x", vec![1.0])),
            Err(NipError::Dim(_))
        ));
    }

    #[test]
    fn pcahash_mean_is_all_zero_and_line_split() {
        let x = data(30, 5, 2);
        let m = pcahash_fit(&x, 3).unwrap();
        let mean = desc("m", m.mean.iter().copied().collect());
        assert_eq!(pcahash_hash(&m, &mean).unwrap().count_ones(), 0);

        // points on a line: the single bit splits them at their mean
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let m = pcahash_fit(&stack_rows(&refs).unwrap(), 1).unwrap();
        let bits: Vec<bool> = pts
            .iter()
            .map(|p| pcahash_hash(&m, &desc("p", p.clone())).unwrap().get(0))
            .collect();
        assert_eq!(
            bits,
            vec![false, false, false, false, true, true, true, true]
        );
    }

    #[test]
    fn itq_with_identity_rotation_is_pcahash() {
        let x = data(40, 6, 3);
        let mut m = itq_fit(&x, 4, 5, 1).unwrap();
        m.rotation = DMatrix::identity(4, 4);
        let pca = pcahash_fit(&x, 4).unwrap();
        for row in x.row_iter() {
            let d = desc("r", row.iter().copied().collect());
            assert_eq!(itq_hash(&m, &d).unwrap(), pcahash_hash(&pca, &d).unwrap());
        }
    }

    #[test]
    fn itq_loss_monotone_and_rotation_orthogonal() {
        let x = data(200, 12, 4);
        for iters in 1..=20 {
            let m = itq_fit(&x, 8, iters, 7).unwrap();
            let rtr = m.rotation.transpose() * &m.rotation;
            assert!((rtr - DMatrix::<f64>::identity(8, 8)).amax() < 1e-8);
            if iters == 20 {
                for w in m.loss_history.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", m.loss_history);
                }
            }
        }
        assert!(matches!(itq_fit(&x, 8, 0, 7), Err(NipError::Config(_))));
    }

    #[test]
    fn itq_scale_invariant_on_centered_input() {
        let x = data(60, 10, 5);
        let m = itq_fit(&x, 6, 10, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let offset: Vec<f64> = (0..10).map(|_| rng.random::<f64>() - 0.5).collect();
            let a: Vec<f64> = m
                .pca
                .mean
                .iter()
                .zip(&offset)
                .map(|(mu, o)| mu + o)
                .collect();
            let b: Vec<f64> = m
                .pca
                .mean
                .iter()
                .zip(&offset)
                .map(|(mu, o)| mu + 3.7 * o)
                .collect();
            assert_eq!(
                itq_hash(&m, &desc("a", a)).unwrap(),
                itq_hash(&m, &desc("a", b)).unwrap()
            );
        }
    }

    #[test]
    fn itq_256_bits_from_512_dims() {
        let x = data(300, 512, 6);
        let m = itq_fit(&x, 256, 2, 3).unwrap();
        let d = desc("q", x.row(0).iter().copied().collect());
        assert_eq!(itq_hash(&m, &d).unwrap().n_bits(), 256);
    }
}

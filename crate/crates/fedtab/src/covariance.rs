//! Federated global covariance of encoded representations.
//!
//! Each client uploads only its row count, column means E(X_k), and locally
//! normalized second moments E(X_k^T X_k); the server combines them with
//! N_k/N weights into the pooled covariance, clamps entries to [-1, 1] to
//! uphold the stated l2-sensitivity of 2, optionally perturbs with the
//! Gaussian mechanism, and factors the result (repairing indefiniteness by
//! eigenvalue clipping when noise breaks it).

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::transforms::EncodedMatrix;

/// Eigenvalues below this are clipped up to it during PSD repair.
const EIGEN_FLOOR: f64 = 1e-9;
/// Diagonal jitter tried before falling back to eigenvalue repair.
const CHOLESKY_JITTER: f64 = 1e-12;

/// Per-client first and second moments of the encoded representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMoments {
    /// Column means, length l.
    pub mean: Vec<f64>,
    /// (1/N_k) * sum_j x_j^T x_j, row-major l x l.
    pub second_moment: Vec<f64>,
    pub count: usize,
    pub dim: usize,
}

/// Computes a client's moments. Empty matrices are rejected; a client with
/// no rows must be excluded upstream.
pub fn local_moments(matrix: &EncodedMatrix) -> Result<LocalMoments> {
    let n = matrix.n_rows();
    let l = matrix.width();
    if n == 0 {
        return Err(Error::Contract(
            "local moments require at least one row".into(),
        ));
    }
    let mut mean = vec![0.0; l];
    let mut second = vec![0.0; l * l];
    for i in 0..n {
        let row = matrix.row(i);
        for a in 0..l {
            mean[a] += row[a];
            for b in a..l {
                second[a * l + b] += row[a] * row[b];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut mean {
        *v *= inv;
    }
    for a in 0..l {
        for b in a..l {
            second[a * l + b] *= inv;
            second[b * l + a] = second[a * l + b];
        }
    }
    Ok(LocalMoments {
        mean,
        second_moment: second,
        count: n,
        dim: l,
    })
}

/// Privacy budget for the Gaussian mechanism on the covariance release.
/// `epsilon = +inf` disables the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
    /// l2-sensitivity of the clamped covariance (2, from entries in [-1, 1]).
    pub sensitivity: f64,
    /// Derived noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DpParams {
    /// Standard sensitivity-2 budget.
    pub fn new(epsilon: f64, delta: f64, seed_value: u64) -> Result<Self> {
        let sensitivity = 2.0;
        let noise_sigma = gaussian_sigma(epsilon, delta, sensitivity)?;
        Ok(DpParams {
            epsilon,
            delta,
            sensitivity,
            noise_sigma,
            seed: seed_value,
        })
    }

    pub fn disabled(seed_value: u64) -> Self {
        DpParams {
            epsilon: f64::INFINITY,
            delta: 1e-4,
            sensitivity: 2.0,
            noise_sigma: 0.0,
            seed: seed_value,
        }
    }
}

/// JSON has no Infinity literal; an infinite budget serializes as "inf".
pub(crate) mod epsilon_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            ser.serialize_str("inf")
        } else {
            ser.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(de)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Text(s) => Err(de::Error::custom(format!("invalid epsilon '{s}'"))),
        }
    }
}

/// Gaussian-mechanism calibration: sigma = delta_f * sqrt(2 ln(1.25/delta)) / epsilon.
pub fn gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if epsilon.is_infinite() && epsilon > 0.0 {
        return Ok(0.0);
    }
    if !(epsilon > 0.0) || epsilon.is_nan() {
        return Err(Error::Config(format!(
            "epsilon must be positive or infinite, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(sensitivity > 0.0) {
        return Err(Error::Config(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Global covariance of the encoded representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCovariance {
    /// Row-major l x l symmetric matrix.
    pub sigma: Vec<f64>,
    pub dim: usize,
    /// True when any entry was clamped into [-1, 1].
    pub clamped: bool,
    /// Number of upper-triangle entries (diagonal included) that clamped.
    pub clamp_events: u64,
    /// Noise parameters applied to this matrix, if any.
    pub dp: Option<DpParams>,
}

impl GlobalCovariance {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.dim + j]
    }

    fn check_symmetric(&self, tol: f64) -> Result<()> {
        let l = self.dim;
        for i in 0..l {
            for j in (i + 1)..l {
                if (self.sigma[i * l + j] - self.sigma[j * l + i]).abs() > tol {
                    return Err(Error::Contract(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Combines client moments into the global covariance:
/// E(X) = sum_k (N_k/N) E(X_k), E(X^T X) = sum_k (N_k/N) E(X_k^T X_k),
/// Sigma = E(X^T X) - E(X)^T E(X), symmetrized and clamped to [-1, 1].
pub fn aggregate_covariance(moments: &[LocalMoments]) -> Result<GlobalCovariance> {
    let first = moments
        .first()
        .ok_or_else(|| Error::Protocol("aggregate_covariance requires at least one client".into()))?;
    let l = first.dim;
    let total: usize = moments.iter().map(|m| m.count).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregate_covariance saw zero total rows".into()));
    }
    let mut mean = vec![0.0; l];
    let mut second = vec![0.0; l * l];
    for m in moments {
        if m.dim != l || m.mean.len() != l || m.second_moment.len() != l * l {
            return Err(Error::Protocol(format!(
                "moment dimension mismatch: expected l={l}, got l={}",
                m.dim
            )));
        }
        let w = m.count as f64 / total as f64;
        for (acc, v) in mean.iter_mut().zip(&m.mean) {
            *acc += w * v;
        }
        for (acc, v) in second.iter_mut().zip(&m.second_moment) {
            *acc += w * v;
        }
    }

    let mut sigma = vec![0.0; l * l];
    let mut clamp_events = 0u64;
    for i in 0..l {
        for j in i..l {
            // Symmetrize while the matrix assembles.
            let raw = 0.5 * (second[i * l + j] + second[j * l + i]) - mean[i] * mean[j];
            let clamped = raw.clamp(-1.0, 1.0);
            if clamped != raw {
                clamp_events += 1;
            }
            sigma[i * l + j] = clamped;
            sigma[j * l + i] = clamped;
        }
    }
    Ok(GlobalCovariance {
        sigma,
        dim: l,
        clamped: clamp_events > 0,
        clamp_events,
        dp: None,
    })
}

/// Adds seeded i.i.d. Gaussian noise to the upper triangle and mirrors it,
/// keeping the matrix exactly symmetric. With sigma = 0 this is an identity.
pub fn add_dp_noise(cov: &GlobalCovariance, dp: &DpParams) -> GlobalCovariance {
    let mut out = cov.clone();
    out.dp = Some(*dp);
    if dp.noise_sigma == 0.0 {
        return out;
    }
    let l = cov.dim;
    let mut rng = seed::rng(dp.seed, seed::stream::DP_NOISE);
    let normal = Normal::new(0.0, dp.noise_sigma).expect("sigma validated");
    for i in 0..l {
        for j in i..l {
            let noisy = cov.sigma[i * l + j] + normal.sample(&mut rng);
            out.sigma[i * l + j] = noisy;
            out.sigma[j * l + i] = noisy;
        }
    }
    out
}

/// Lower-triangular factor U with U U^T equal to the (possibly repaired)
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    /// Row-major l x l lower-triangular matrix.
    pub u: Vec<f64>,
    pub dim: usize,
    /// Largest eigenvalue clip applied during PSD repair (0 when none).
    pub repair_shift: f64,
}

impl CholFactor {
    /// U z for a length-l vector z (lower-triangular multiply).
    pub fn correlate(&self, z: &[f64], out: &mut [f64]) {
        let l = self.dim;
        for i in 0..l {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.u[i * l + j] * z[j];
            }
            out[i] = acc;
        }
    }

    /// U U^T, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let l = self.dim;
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.u[i * l + k] * self.u[j * l + k];
                }
                out[i * l + j] = acc;
            }
        }
        out
    }
}

/// Cholesky factorization with PSD repair. A symmetric input that factors
/// directly (or with a tiny diagonal jitter) passes through; otherwise the
/// spectrum is clipped at a small floor and the repaired matrix is factored.
pub fn psd_cholesky(cov: &GlobalCovariance) -> Result<CholFactor> {
    cov.check_symmetric(1e-12)?;
    let l = cov.dim;
    let matrix = DMatrix::from_row_slice(l, l, &cov.sigma);

    if let Some(chol) = matrix.clone().cholesky() {
        return Ok(CholFactor {
            u: chol.l().as_slice().to_vec().row_major(l),
            dim: l,
            repair_shift: 0.0,
        });
    }
    let jittered = &matrix + DMatrix::identity(l, l) * CHOLESKY_JITTER;
    if let Some(chol) = jittered.cholesky() {
        return Ok(CholFactor {
            u: chol.l().as_slice().to_vec().row_major(l),
            dim: l,
            repair_shift: 0.0,
        });
    }

    // Indefinite (DP noise): clip eigenvalues up to the floor and refactor.
    let eigen = SymmetricEigen::new(matrix);
    let mut repair_shift: f64 = 0.0;
    let mut clipped = eigen.eigenvalues.clone();
    for v in clipped.iter_mut() {
        if *v < EIGEN_FLOOR {
            repair_shift = repair_shift.max(EIGEN_FLOOR - *v);
            *v = EIGEN_FLOOR;
        }
    }
    let rebuilt = &eigen.eigenvectors
        * DMatrix::from_diagonal(&clipped)
        * eigen.eigenvectors.transpose();
    // Exact symmetry can be lost to rounding in the reconstruction.
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    let chol = rebuilt
        .clone()
        .cholesky()
        .or_else(|| (rebuilt + DMatrix::identity(l, l) * CHOLESKY_JITTER).cholesky())
        .ok_or_else(|| {
            Error::Numerical("cholesky failed after eigenvalue repair".into())
        })?;
    Ok(CholFactor {
        u: chol.l().as_slice().to_vec().row_major(l),
        dim: l,
        repair_shift,
    })
}

/// nalgebra stores column-major; the crate's matrix buffers are row-major.
trait RowMajor {
    fn row_major(self, l: usize) -> Vec<f64>;
}

impl RowMajor for Vec<f64> {
    fn row_major(self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; l * l];
        for col in 0..l {
            for row in 0..l {
                out[row * l + col] = self[col * l + row];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{EncodedLayout, EncodedRole};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: usize, data: Vec<f64>) -> EncodedMatrix {
        let l = data.len() / rows.max(1);
        let layout = EncodedLayout {
            columns: (0..l)
                .map(|i| (EncodedRole::ZScore, format!("c{i}")))
                .collect(),
        };
        EncodedMatrix::new(layout, rows, data).unwrap()
    }

    fn random_matrix(rows: usize, l: usize, scale: f64, seed: u64) -> EncodedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * l)
            .map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale)
            .collect();
        matrix(rows, data)
    }

    #[test]
    fn single_row_moments() {
        let m = matrix(1, vec![1.0, -2.0]);
        let lm = local_moments(&m).unwrap();
        assert_eq!(lm.mean, vec![1.0, -2.0]);
        assert_eq!(lm.second_moment, vec![1.0, -2.0, -2.0, 4.0]);
        assert_eq!(lm.count, 1);
    }

    #[test]
    fn hand_computed_moments() {
        let m = matrix(2, vec![1.0, 0.0, -1.0, 0.0]);
        let lm = local_moments(&m).unwrap();
        assert_eq!(lm.mean, vec![0.0, 0.0]);
        assert_eq!(lm.second_moment, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_matrix_moments() {
        let m = matrix(3, vec![0.0; 6]);
        let lm = local_moments(&m).unwrap();
        assert!(lm.mean.iter().all(|v| *v == 0.0));
        assert!(lm.second_moment.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let m = matrix(0, vec![]);
        assert!(local_moments(&m).is_err());
    }

    fn pooled_covariance(rows: &[&[f64]], l: usize) -> Vec<f64> {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; l];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; l * l];
        for r in rows {
            for i in 0..l {
                for j in 0..l {
                    cov[i * l + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
                }
            }
        }
        cov
    }

    #[test]
    fn single_client_matches_centralized() {
        let m = random_matrix(50, 4, 0.9, 1);
        let rows: Vec<&[f64]> = (0..50).map(|i| m.row(i)).collect();
        let expected = pooled_covariance(&rows, 4);
        let got = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        for (a, b) in got.sigma.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(!got.clamped);
    }

    #[test]
    fn two_clients_match_pooled() {
        let a = random_matrix(50, 5, 0.9, 2);
        let b = random_matrix(50, 5, 0.9, 3);
        let mut rows: Vec<&[f64]> = (0..50).map(|i| a.row(i)).collect();
        rows.extend((0..50).map(|i| b.row(i)));
        let expected = pooled_covariance(&rows, 5);
        let got = aggregate_covariance(&[
            local_moments(&a).unwrap(),
            local_moments(&b).unwrap(),
        ])
        .unwrap();
        for (x, y) in got.sigma.iter().zip(&expected) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn constant_rows_give_zero_covariance() {
        let m = matrix(4, vec![0.5, -0.25].repeat(4));
        let got = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        for v in &got.sigma {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_dimensions_are_a_protocol_error() {
        let a = local_moments(&random_matrix(10, 3, 0.5, 4)).unwrap();
        let b = local_moments(&random_matrix(10, 4, 0.5, 5)).unwrap();
        assert!(aggregate_covariance(&[a, b]).is_err());
    }

    #[test]
    fn clamping_fires_and_counts() {
        // Values around +-3 produce variances ~9, far above 1.
        let m = random_matrix(100, 2, 3.0, 6);
        let got = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        assert!(got.clamped);
        assert!(got.clamp_events >= 2);
        for v in &got.sigma {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }

    #[test]
    fn sigma_formula_matches_closed_form() {
        // eps=1, delta=1e-4, sensitivity=2: 2*sqrt(2 ln 12500) = 8.68723...
        let sigma = gaussian_sigma(1.0, 1e-4, 2.0).unwrap();
        assert!((sigma - 8.687238).abs() < 1e-3);
        // Doubling epsilon halves sigma exactly.
        let half = gaussian_sigma(2.0, 1e-4, 2.0).unwrap();
        assert_eq!(half, sigma / 2.0);
        // Infinite budget disables the mechanism.
        assert_eq!(gaussian_sigma(f64::INFINITY, 1e-4, 2.0).unwrap(), 0.0);
        assert!(gaussian_sigma(0.0, 1e-4, 2.0).is_err());
        assert!(gaussian_sigma(1.0, 0.0, 2.0).is_err());
        assert!(gaussian_sigma(1.0, 1.5, 2.0).is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let m = random_matrix(20, 3, 0.9, 7);
        let cov = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        let dp = DpParams::disabled(9);
        let noisy = add_dp_noise(&cov, &dp);
        assert_eq!(noisy.sigma, cov.sigma);
    }

    #[test]
    fn noise_is_symmetric_and_deterministic() {
        let m = random_matrix(20, 4, 0.9, 8);
        let cov = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        let dp = DpParams::new(1.0, 1e-4, 42).unwrap();
        let a = add_dp_noise(&cov, &dp);
        let b = add_dp_noise(&cov, &dp);
        assert_eq!(a.sigma, b.sigma);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.entry(i, j), a.entry(j, i));
            }
        }
        let other = DpParams::new(1.0, 1e-4, 43).unwrap();
        assert_ne!(add_dp_noise(&cov, &other).sigma, a.sigma);
    }

    #[test]
    fn noise_sample_std_matches_sigma() {
        // 10^4 upper-triangle draws: sample std within 2% of sigma.
        let l = 141; // l(l+1)/2 = 10011 draws
        let cov = GlobalCovariance {
            sigma: vec![0.0; l * l],
            dim: l,
            clamped: false,
            clamp_events: 0,
            dp: None,
        };
        let dp = DpParams::new(1.0, 1e-4, 7).unwrap();
        let noisy = add_dp_noise(&cov, &dp);
        let mut draws = Vec::with_capacity(10_011);
        for i in 0..l {
            for j in i..l {
                draws.push(noisy.entry(i, j));
            }
        }
        let n = draws.len() as f64;
        let mean: f64 = draws.iter().sum::<f64>() / n;
        let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - dp.noise_sigma).abs() / dp.noise_sigma < 0.02,
            "std {std} vs sigma {}",
            dp.noise_sigma
        );
    }

    fn plain_cov(sigma: Vec<f64>, dim: usize) -> GlobalCovariance {
        GlobalCovariance {
            sigma,
            dim,
            clamped: false,
            clamp_events: 0,
            dp: None,
        }
    }

    #[test]
    fn identity_factors_to_identity() {
        let cov = plain_cov(vec![1.0, 0.0, 0.0, 1.0], 2);
        let f = psd_cholesky(&cov).unwrap();
        assert_eq!(f.u, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.repair_shift, 0.0);
    }

    #[test]
    fn hand_cholesky() {
        // [[4, 2], [2, 5]] = [[2, 0], [1, 2]] [[2, 1], [0, 2]]
        let cov = plain_cov(vec![4.0, 2.0, 2.0, 5.0], 2);
        let f = psd_cholesky(&cov).unwrap();
        for (a, b) in f.u.iter().zip(&[2.0, 0.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12, "{:?}", f.u);
        }
    }

    #[test]
    fn indefinite_matrix_is_repaired() {
        // Eigenvalues 1.2 and -0.3.
        let cov = plain_cov(vec![0.45, 0.75, 0.75, 0.45], 2);
        let f = psd_cholesky(&cov).unwrap();
        assert!(f.repair_shift >= 0.3, "repair_shift {}", f.repair_shift);
        let rebuilt = f.reconstruct();
        // Compare against the eigen-clip oracle computed by hand:
        // clip(-0.3) -> 1e-9 keeps the +1.2 eigendirection intact.
        for v in &rebuilt {
            assert!((v - 0.6).abs() < 1e-6, "rebuilt {:?}", rebuilt);
        }
    }

    #[test]
    fn reconstruction_matches_repaired_sigma() {
        let m = random_matrix(200, 6, 0.9, 10);
        let cov = aggregate_covariance(&[local_moments(&m).unwrap()]).unwrap();
        let f = psd_cholesky(&cov).unwrap();
        let rebuilt = f.reconstruct();
        for (a, b) in rebuilt.iter().zip(&cov.sigma) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn asymmetric_input_is_a_contract_violation() {
        let cov = plain_cov(vec![1.0, 0.5, 0.2, 1.0], 2);
        assert!(psd_cholesky(&cov).is_err());
    }

    #[test]
    fn correlate_applies_lower_triangle() {
        let f = CholFactor {
            u: vec![2.0, 0.0, 1.0, 2.0],
            dim: 2,
            repair_shift: 0.0,
        };
        let mut out = vec![0.0; 2];
        f.correlate(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![2.0, 3.0]);
    }

    #[test]
    fn epsilon_serde_round_trips_infinity() {
        let dp = DpParams::disabled(5);
        let json = serde_json::to_string(&dp).unwrap();
        assert!(json.contains("\"inf\""));
        let back: DpParams = serde_json::from_str(&json).unwrap();
        assert!(back.epsilon.is_infinite());
        let dp = DpParams::new(4.0, 1e-4, 5).unwrap();
        let back: DpParams =
            serde_json::from_str(&serde_json::to_string(&dp).unwrap()).unwrap();
        assert_eq!(back.epsilon, 4.0);
    }
}

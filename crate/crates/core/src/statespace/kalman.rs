use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest `T * dim` the joint-Gaussian oracle accepts.
pub const ORACLE_LIMIT: usize = 64;

/// `z_t = A z_{t-1} + w_t`, `x_t = C z_t + v_t`, `w ~ N(0, Γ)`,
/// `v ~ N(0, Σ)`. `mean0`/`cov0` are the prior of the first state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSSM {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// `p(z_t | x_1..x_t)`.
    pub filtered: Vec<GaussianBelief>,
    /// `p(z_t | x_1..x_{t-1})`.
    pub predicted: Vec<GaussianBelief>,
    pub loglik: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-10 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

impl LinearGaussianSSM {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        gamma: DMatrix<f64>,
        sigma: DMatrix<f64>,
        mean0: DVector<f64>,
        cov0: DMatrix<f64>,
    ) -> Result<Self> {
        let ssm = Self {
            a,
            c,
            gamma,
            sigma,
            mean0,
            cov0,
        };
        ssm.validate()?;
        Ok(ssm)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let d = self.obs_dim();
        let shapes = [
            ("A", self.a.shape(), (n, n)),
            ("C", self.c.shape(), (d, n)),
            ("transition covariance", self.gamma.shape(), (n, n)),
            ("emission covariance", self.sigma.shape(), (d, d)),
            ("initial covariance", self.cov0.shape(), (n, n)),
            ("initial mean", (self.mean0.len(), 1), (n, 1)),
        ];
        for (what, got, want) in shapes {
            if got != want {
                return Err(Error::Validation(format!("{what} is {got:?}, expected {want:?}")));
            }
        }
        for (what, m) in [
            ("transition covariance", &self.gamma),
            ("emission covariance", &self.sigma),
            ("initial covariance", &self.cov0),
        ] {
            if !is_spd(m) {
                return Err(Error::Validation(format!("{what} is not symmetric positive definite")));
            }
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[DVector<f64>]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::Input("empty observation sequence".into()));
        }
        if let Some(t) = obs.iter().position(|x| x.len() != self.obs_dim()) {
            return Err(Error::Input(format!(
                "observation {t} has length {}, expected {}",
                obs[t].len(),
                self.obs_dim()
            )));
        }
        Ok(())
    }
}

/// Predict/update recursion with Joseph-form covariance updates; the
/// log-likelihood accumulates the innovation densities.
pub fn kalman_filter(ssm: &LinearGaussianSSM, obs: &[DVector<f64>]) -> Result<FilterResult> {
    ssm.check_obs(obs)?;
    let n = ssm.state_dim();
    let d = ssm.obs_dim() as f64;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut filtered = Vec::with_capacity(obs.len());
    let mut predicted = Vec::with_capacity(obs.len());
    let mut loglik = 0.0;
    for (t, x) in obs.iter().enumerate() {
        let (m_pred, p_pred) = match filtered.last() {
            None => (ssm.mean0.clone(), ssm.cov0.clone()),
            Some(GaussianBelief { mean, cov }) => (
                &ssm.a * mean,
                symmetrize(&(&ssm.a * cov * ssm.a.transpose() + &ssm.gamma)),
            ),
        };
        let s = symmetrize(&(&ssm.c * &p_pred * ssm.c.transpose() + &ssm.sigma));
        let chol = s.clone().cholesky().ok_or_else(|| Error::Numerical {
            frame: t,
            detail: "innovation covariance is not positive definite".into(),
        })?;
        let innov = x - &ssm.c * &m_pred;
        let s_inv_innov = chol.solve(&innov);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        loglik += -0.5 * (d * LN_2PI + log_det + innov.dot(&s_inv_innov));
        // K = P C^T S^-1
        let gain = chol.solve(&(&ssm.c * &p_pred)).transpose();
        let mean = &m_pred + &gain * &innov;
        let ikc = &eye - &gain * &ssm.c;
        let cov = symmetrize(&(&ikc * &p_pred * ikc.transpose() + &gain * &ssm.sigma * gain.transpose()));
        predicted.push(GaussianBelief {
            mean: m_pred,
            cov: p_pred,
        });
        filtered.push(GaussianBelief { mean, cov });
    }
    Ok(FilterResult {
        filtered,
        predicted,
        loglik,
    })
}

/// Rauch-Tung-Striebel smoothing: `p(z_t | x_1..x_T)` for every `t`.
pub fn kalman_smooth(ssm: &LinearGaussianSSM, obs: &[DVector<f64>]) -> Result<Vec<GaussianBelief>> {
    let f = kalman_filter(ssm, obs)?;
    let t_len = obs.len();
    let mut out = vec![f.filtered[t_len - 1].clone(); t_len];
    for t in (0..t_len - 1).rev() {
        let filt = &f.filtered[t];
        let pred = &f.predicted[t + 1];
        let chol = pred.cov.clone().cholesky().ok_or_else(|| Error::Numerical {
            frame: t + 1,
            detail: "predicted covariance is not positive definite".into(),
        })?;
        // J = P_t A^T P_{t+1|t}^-1
        let j = chol.solve(&(&ssm.a * &filt.cov)).transpose();
        let next = &out[t + 1];
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let cov = symmetrize(&(&filt.cov + &j * (&next.cov - &pred.cov) * j.transpose()));
        out[t] = GaussianBelief { mean, cov };
    }
    Ok(out)
}

/// Posterior of `z_t` (zero-based) given every observation in `obs`, by
/// building the joint Gaussian over all states and observations and
/// conditioning directly.
pub fn exact_gaussian_posterior_oracle(
    ssm: &LinearGaussianSSM,
    obs: &[DVector<f64>],
    t: usize,
) -> Result<GaussianBelief> {
    ssm.check_obs(obs)?;
    let n = ssm.state_dim();
    let d = ssm.obs_dim();
    let t_len = obs.len();
    if t >= t_len {
        return Err(Error::Input(format!("frame {t} beyond {t_len} observations")));
    }
    if t_len * n.max(d) > ORACLE_LIMIT {
        return Err(Error::Size {
            states: t_len * n.max(d),
            limit: ORACLE_LIMIT,
        });
    }
    // Marginal means and covariances of every state.
    let mut means = vec![ssm.mean0.clone()];
    let mut vars = vec![ssm.cov0.clone()];
    for k in 1..t_len {
        means.push(&ssm.a * &means[k - 1]);
        vars.push(&ssm.a * &vars[k - 1] * ssm.a.transpose() + &ssm.gamma);
    }
    // Cov(z_i, z_j) = A^{j-i} V_i for j >= i.
    let mut zz = DMatrix::<f64>::zeros(t_len * n, t_len * n);
    for i in 0..t_len {
        let mut block = vars[i].clone();
        for j in i..t_len {
            if j > i {
                block = &ssm.a * &block;
            }
            zz.view_mut((j * n, i * n), (n, n)).copy_from(&block);
            zz.view_mut((i * n, j * n), (n, n)).copy_from(&block.transpose());
        }
    }
    let mut big_c = DMatrix::<f64>::zeros(t_len * d, t_len * n);
    let mut big_sigma = DMatrix::<f64>::zeros(t_len * d, t_len * d);
    let mut mean_z = DVector::<f64>::zeros(t_len * n);
    let mut xs = DVector::<f64>::zeros(t_len * d);
    for k in 0..t_len {
        big_c.view_mut((k * d, k * n), (d, n)).copy_from(&ssm.c);
        big_sigma.view_mut((k * d, k * d), (d, d)).copy_from(&ssm.sigma);
        mean_z.rows_mut(k * n, n).copy_from(&means[k]);
        xs.rows_mut(k * d, d).copy_from(&obs[k]);
    }
    let zx = &zz * big_c.transpose();
    let xx = &big_c * &zz * big_c.transpose() + big_sigma;
    let mean_x = &big_c * &mean_z;
    let lu = xx.lu();
    let resid = lu.solve(&(xs - mean_x)).ok_or_else(|| Error::Numerical {
        frame: t,
        detail: "joint observation covariance is singular".into(),
    })?;
    let gain_t = lu.solve(&zx.transpose()).ok_or_else(|| Error::Numerical {
        frame: t,
        detail: "joint observation covariance is singular".into(),
    })?;
    let post_mean = mean_z + &zx * resid;
    let post_cov = &zz - &zx * gain_t;
    Ok(GaussianBelief {
        mean: post_mean.rows(t * n, n).into_owned(),
        cov: symmetrize(&post_cov.view((t * n, t * n), (n, n)).into_owned()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.3
    }

    fn random_ssm<R: Rng>(n: usize, d: usize, rng: &mut R) -> LinearGaussianSSM {
        LinearGaussianSSM::new(
            DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.9..0.9)),
            DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.5..1.5)),
            random_spd(n, rng),
            random_spd(d, rng),
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            random_spd(n, rng),
        )
        .unwrap()
    }

    fn random_obs<R: Rng>(d: usize, t: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..t)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
            .collect()
    }

    fn close(a: &GaussianBelief, b: &GaussianBelief, tol: f64) -> bool {
        (&a.mean - &b.mean).amax() < tol && (&a.cov - &b.cov).amax() < tol
    }

    #[test]
    fn filter_and_smoother_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let ssm = random_ssm(2, 2, &mut rng);
            let obs = random_obs(2, 5, &mut rng);
            let f = kalman_filter(&ssm, &obs).unwrap();
            let s = kalman_smooth(&ssm, &obs).unwrap();
            for t in 0..5 {
                let o = exact_gaussian_posterior_oracle(&ssm, &obs[..=t], t).unwrap();
                assert!(close(&f.filtered[t], &o, 1e-8));
                let o = exact_gaussian_posterior_oracle(&ssm, &obs, t).unwrap();
                assert!(close(&s[t], &o, 1e-8));
            }
        }
    }

    #[test]
    fn single_frame_smoothing_is_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ssm = random_ssm(2, 1, &mut rng);
        let obs = random_obs(1, 1, &mut rng);
        let f = kalman_filter(&ssm, &obs).unwrap();
        assert_eq!(kalman_smooth(&ssm, &obs).unwrap()[0], f.filtered[0]);
    }

    #[test]
    fn smoothing_reduces_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ssm = random_ssm(2, 1, &mut rng);
        let obs = random_obs(1, 6, &mut rng);
        let f = kalman_filter(&ssm, &obs).unwrap();
        let s = kalman_smooth(&ssm, &obs).unwrap();
        for t in 0..6 {
            let diff = &f.filtered[t].cov - &s[t].cov;
            let eig = diff.symmetric_eigenvalues();
            assert!(eig.min() > -1e-12);
        }
    }

    #[test]
    fn noiseless_limit_tracks_observation() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let ssm = LinearGaussianSSM::new(
            one(1.0),
            one(1.0),
            one(1e-12),
            one(1e-12),
            DVector::from_element(1, 0.0),
            one(1.0),
        )
        .unwrap();
        let obs: Vec<_> = [0.7, 0.7, 0.7].iter().map(|&v| DVector::from_element(1, v)).collect();
        let f = kalman_filter(&ssm, &obs).unwrap();
        assert!((f.filtered[2].mean[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn uninformative_emission_propagates_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut ssm = random_ssm(2, 2, &mut rng);
        ssm.c = DMatrix::zeros(2, 2);
        let obs_a = random_obs(2, 4, &mut rng);
        let obs_b = random_obs(2, 4, &mut rng);
        let fa = kalman_filter(&ssm, &obs_a).unwrap();
        let fb = kalman_filter(&ssm, &obs_b).unwrap();
        for t in 0..4 {
            assert!(close(&fa.filtered[t], &fa.predicted[t], 1e-12));
            assert!(close(&fa.filtered[t], &fb.filtered[t], 1e-12));
        }
        let mut mean = ssm.mean0.clone();
        for _ in 0..3 {
            mean = &ssm.a * mean;
        }
        assert!((&fa.filtered[3].mean - mean).amax() < 1e-12);
    }

    #[test]
    fn hand_computed_two_frame_case() {
        // z1 ~ N(0, 1), z2 = 0.5 z1 + w (var 0.25), x_t = z_t + v (var 0.5).
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let ssm = LinearGaussianSSM::new(
            one(0.5),
            one(1.0),
            one(0.25),
            one(0.5),
            DVector::from_element(1, 0.0),
            one(1.0),
        )
        .unwrap();
        let obs = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -0.4)];
        // Joint of (z1, x1, x2): var z1 = 1, var z2 = 0.5, cov(z1, z2) = 0.5.
        let s_zx = [1.0, 0.5];
        let s_xx = [[1.5, 0.5], [0.5, 1.0]];
        let det = s_xx[0][0] * s_xx[1][1] - s_xx[0][1] * s_xx[1][0];
        let inv = [[s_xx[1][1] / det, -s_xx[0][1] / det], [-s_xx[1][0] / det, s_xx[0][0] / det]];
        let x = [1.0, -0.4];
        let k = [
            s_zx[0] * inv[0][0] + s_zx[1] * inv[1][0],
            s_zx[0] * inv[0][1] + s_zx[1] * inv[1][1],
        ];
        let mean = k[0] * x[0] + k[1] * x[1];
        let var = 1.0 - (k[0] * s_zx[0] + k[1] * s_zx[1]);
        let o = exact_gaussian_posterior_oracle(&ssm, &obs, 0).unwrap();
        assert!((o.mean[0] - mean).abs() < 1e-14);
        assert!((o.cov[(0, 0)] - var).abs() < 1e-14);
    }

    #[test]
    fn decoupled_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut ssm = random_ssm(2, 2, &mut rng);
        ssm.a = DMatrix::zeros(2, 2);
        let mut obs = random_obs(2, 4, &mut rng);
        let before = exact_gaussian_posterior_oracle(&ssm, &obs, 2).unwrap();
        obs[3] = DVector::from_element(2, 9.0);
        obs[1] = DVector::from_element(2, -9.0);
        let after = exact_gaussian_posterior_oracle(&ssm, &obs, 2).unwrap();
        assert!(close(&before, &after, 1e-12));
    }

    #[test]
    fn loglik_matches_joint_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ssm = random_ssm(1, 1, &mut rng);
        let obs = random_obs(1, 2, &mut rng);
        let f = kalman_filter(&ssm, &obs).unwrap();
        // x = (x1, x2) is jointly Gaussian; evaluate its density directly.
        let (a, c, q, r) = (ssm.a[(0, 0)], ssm.c[(0, 0)], ssm.gamma[(0, 0)], ssm.sigma[(0, 0)]);
        let (m0, p0) = (ssm.mean0[0], ssm.cov0[(0, 0)]);
        let v2 = a * a * p0 + q;
        let mu = [c * m0, c * a * m0];
        let s = [[c * c * p0 + r, c * c * a * p0], [c * c * a * p0, c * c * v2 + r]];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let e = [obs[0][0] - mu[0], obs[1][0] - mu[1]];
        let quad = (s[1][1] * e[0] * e[0] - 2.0 * s[0][1] * e[0] * e[1] + s[0][0] * e[1] * e[1]) / det;
        let ll = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
        assert!((f.loglik - ll).abs() < 1e-12);
    }

    #[test]
    fn singular_innovation_reports_frame() {
        let ssm = LinearGaussianSSM {
            a: DMatrix::identity(1, 1),
            c: DMatrix::identity(1, 1),
            gamma: DMatrix::from_element(1, 1, -1.0),
            sigma: DMatrix::from_element(1, 1, 0.0),
            mean0: DVector::zeros(1),
            cov0: DMatrix::from_element(1, 1, 0.5),
        };
        let obs = vec![DVector::zeros(1); 3];
        let err = kalman_filter(&ssm, &obs).unwrap_err();
        assert!(matches!(err, Error::Numerical { frame: 1, .. }), "{err}");
    }
}

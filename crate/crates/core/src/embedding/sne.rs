use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Kernel widths of the Gaussian neighbourhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Sigma {
    Fixed(f64),
    PerPoint(Vec<f64>),
}

impl Sigma {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        let s = match self {
            Sigma::Fixed(s) => vec![*s; n],
            Sigma::PerPoint(v) if v.len() == n => v.clone(),
            Sigma::PerPoint(v) => {
                return Err(Error::Input(format!("{} widths for {n} points", v.len())));
            }
        };
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("every sigma must be positive and finite".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SneConfig {
    pub sigma: Sigma,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Scale of the random latent initialisation.
    pub init_scale: f64,
}

impl Default for SneConfig {
    fn default() -> Self {
        Self {
            sigma: Sigma::Fixed(1.0),
            latent_dim: 2,
            learning_rate: 0.5,
            iterations: 200,
            init_scale: 1e-2,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `p_{j|i} ∝ exp(-|x_i - x_j|^2 / 2 sigma_i^2)` over `j != i`, with the
/// same width in the normaliser. Rows are points; the diagonal is zero.
pub fn sne_affinities(points: &Matrix, sigma: &Sigma) -> Result<Matrix> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::Input("affinities need at least two points".into()));
    }
    let s = sigma.resolve(n)?;
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                if j == i {
                    f64::NEG_INFINITY
                } else {
                    -sq_dist(points.row(i), points.row(j)) / (2.0 * s[i] * s[i])
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for (j, v) in e.iter().enumerate() {
            p[(i, j)] = v / total;
        }
    }
    Ok(p)
}

/// Cost `C = sum_i KL(P_i || Q_i)` as a 1x1 node of the latent leaf `z`.
pub fn sne_cost_graph(g: &mut Graph, p: &Matrix, z: NodeId, sigma: &[f64]) -> Result<NodeId> {
    let (n, _) = g.shape(z);
    if p.shape() != (n, n) || sigma.len() != n {
        return Err(Error::Input(format!(
            "affinities {:?} and {} widths for {n} latent points",
            p.shape(),
            sigma.len()
        )));
    }
    let sq = g.row_sq_norm(z)?;
    let sqt = g.transpose(sq)?;
    let zt = g.transpose(z)?;
    let gram = g.matmul(z, zt)?;
    let cross = g.scale(gram, -2.0)?;
    let both = g.add(sq, sqt)?;
    let dist = g.add(both, cross)?;
    let inv = g.constant(Matrix::column_vector(
        &sigma.iter().map(|s| -1.0 / (2.0 * s * s)).collect::<Vec<_>>(),
    ));
    let scaled = g.mul(dist, inv)?;
    let mut mask = Matrix::zeros(n, n);
    let mut eye = Matrix::filled(n, n, 1e-300);
    for i in 0..n {
        mask[(i, i)] = -1e300;
        eye[(i, i)] = 1.0;
    }
    let mask = g.constant(mask);
    let logits = g.add(scaled, mask)?;
    let q = g.softmax(logits)?;
    // The diagonal is shifted to 1 so its log is 0; off-diagonal underflow
    // is kept away from log(0).
    let eye = g.constant(eye);
    let qs = g.add(q, eye)?;
    let lq = g.log(qs)?;
    let pc = g.constant(p.clone());
    let cross = g.mul(pc, lq)?;
    let cross = g.sum(cross)?;
    let entropy: f64 = p.as_slice().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let neg = g.neg(cross)?;
    g.add_scalar(neg, entropy)
}

/// Cost and its gradient with respect to the latent points.
pub fn sne_cost_grad(p: &Matrix, latent: &Matrix, sigma: &Sigma) -> Result<(f64, Matrix)> {
    let s = sigma.resolve(latent.rows())?;
    let mut g = Graph::new();
    let z = g.param("z", latent);
    let c = sne_cost_graph(&mut g, p, z, &s)?;
    let cost = g.value(c).item();
    let mut grads = g.eval_backward(c)?;
    Ok((cost, grads.remove("z").expect("latent leaf")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SneResult {
    pub latent: Matrix,
    /// Cost before each update and after the last one.
    pub costs: Vec<f64>,
}

/// Gradient descent on the latent points from a small random start.
pub fn sne_embed<R: Rng + ?Sized>(points: &Matrix, config: &SneConfig, rng: &mut R) -> Result<SneResult> {
    if config.latent_dim == 0 {
        return Err(Error::Validation("latent dimension must be positive".into()));
    }
    let p = sne_affinities(points, &config.sigma)?;
    let z = Matrix::randn(points.rows(), config.latent_dim, config.init_scale, rng);
    descend(&p, z, &config.sigma, config.learning_rate, config.iterations, None)
}

fn descend(
    p: &Matrix,
    mut z: Matrix,
    sigma: &Sigma,
    lr: f64,
    iterations: usize,
    only_row: Option<usize>,
) -> Result<SneResult> {
    let mut costs = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let (c, grad) = sne_cost_grad(p, &z, sigma)?;
        costs.push(c);
        for i in 0..z.rows() {
            if only_row.is_some_and(|r| r != i) {
                continue;
            }
            for (v, gv) in z.row_mut(i).iter_mut().zip(grad.row(i)) {
                *v -= lr * gv;
            }
        }
    }
    costs.push(sne_cost_grad(p, &z, sigma)?.0);
    Ok(SneResult { latent: z, costs })
}

/// Embeds a new point: its code starts at the mean of the existing codes
/// and only that code is descended, the others stay fixed.
pub fn sne_insert(
    points: &Matrix,
    latent: &Matrix,
    new_point: &[f64],
    config: &SneConfig,
    steps: usize,
) -> Result<SneResult> {
    let n = points.rows();
    if latent.rows() != n || new_point.len() != points.cols() {
        return Err(Error::Input("new point or latent codes do not match the data".into()));
    }
    let sigma = match &config.sigma {
        Sigma::Fixed(s) => Sigma::Fixed(*s),
        Sigma::PerPoint(_) => {
            return Err(Error::Contract("insertion needs a fixed sigma".into()));
        }
    };
    let mut rows: Vec<&[f64]> = (0..n).map(|i| points.row(i)).collect();
    rows.push(new_point);
    let p = sne_affinities(&Matrix::from_rows(&rows), &sigma)?;
    let d = latent.cols();
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| latent[(r, c)]).sum::<f64>() / n as f64)
        .collect();
    let mut zrows: Vec<&[f64]> = (0..n).map(|i| latent.row(i)).collect();
    zrows.push(&mean);
    descend(&p, Matrix::from_rows(&zrows), &sigma, config.learning_rate, steps, Some(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_points_pick_each_other() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]);
        let p = sne_affinities(&x, &Sigma::Fixed(0.7)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn equilateral_is_even() {
        let h = 3f64.sqrt() / 2.0;
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]);
        let p = sne_affinities(&x, &Sigma::Fixed(1.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((p[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_points_give_uniform_rows() {
        let x = Matrix::filled(4, 2, 1.5);
        let p = sne_affinities(&x, &Sigma::Fixed(1.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p[(i, j)], if i == j { 0.0 } else { 1.0 / 3.0 });
            }
        }
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::randn(5, 2, 1.0, &mut rng);
        let p = sne_affinities(&x, &Sigma::Fixed(1.0)).unwrap();
        for i in 0..5 {
            let k = |j: usize| (-sq_dist(x.row(i), x.row(j)) / 2.0).exp();
            let z: f64 = (0..5).filter(|&j| j != i).map(k).sum();
            for j in (0..5).filter(|&j| j != i) {
                assert!((p[(i, j)] - k(j) / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bad_sigma_rejected() {
        let x = Matrix::zeros(3, 1);
        assert!(sne_affinities(&x, &Sigma::Fixed(0.0)).is_err());
        assert!(sne_affinities(&x, &Sigma::PerPoint(vec![1.0, 1.0])).is_err());
        assert!(sne_affinities(&Matrix::zeros(1, 1), &Sigma::Fixed(1.0)).is_err());
    }

    #[test]
    fn latent_copy_costs_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::randn(8, 2, 1.0, &mut rng);
        let sigma = Sigma::PerPoint((0..8).map(|i| 0.5 + 0.1 * i as f64).collect());
        let p = sne_affinities(&x, &sigma).unwrap();
        let (c, _) = sne_cost_grad(&p, &x, &sigma).unwrap();
        assert!(c.abs() < 1e-12, "{c}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::randn(6, 4, 1.0, &mut rng);
        let p = sne_affinities(&x, &Sigma::Fixed(1.0)).unwrap();
        let mut g = Graph::new();
        let z = g.param("z", &Matrix::randn(6, 2, 1.0, &mut rng));
        let c = sne_cost_graph(&mut g, &p, z, &[1.0; 6]).unwrap();
        assert!(g.value(c).item() > 0.0);
        assert!(finite_diff_check(&mut g, c, "z", 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn inserted_point_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::randn(12, 3, 1.0, &mut rng);
        let config = SneConfig::default();
        let fit = sne_embed(&x, &config, &mut rng).unwrap();
        let r = sne_insert(&x, &fit.latent, &[0.5, -0.2, 0.1], &config, 50).unwrap();
        assert!(r.costs[50] < r.costs[0]);
        for i in 0..12 {
            assert_eq!(r.latent.row(i), fit.latent.row(i));
        }
    }
}

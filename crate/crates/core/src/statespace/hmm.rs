use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Largest product state space [`flatten_multimodal`] builds.
pub const MAX_FLAT_STATES: usize = 512;

/// One observation: a symbol (categorical emissions) or a vector
/// (Gaussian emissions).
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Symbol(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    /// `table[k][v] = p(x = v | z = k)`.
    Categorical(Vec<Vec<f64>>),
    /// Diagonal Gaussian per state.
    Gaussian { mean: Vec<Vec<f64>>, var: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteHMM {
    pub pi: Vec<f64>,
    /// `a[i][j] = p(z_t = j | z_{t-1} = i)`.
    pub a: Vec<Vec<f64>>,
    pub emission: Emission,
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&p| !(p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl DiscreteHMM {
    pub fn new(pi: Vec<f64>, a: Vec<Vec<f64>>, emission: Emission) -> Result<Self> {
        let k = pi.len();
        if k == 0 {
            return Err(Error::Validation("HMM needs at least one state".into()));
        }
        check_simplex(&pi, "initial distribution")?;
        if a.len() != k || a.iter().any(|r| r.len() != k) {
            return Err(Error::Validation(format!("transition matrix must be {k}x{k}")));
        }
        for (i, row) in a.iter().enumerate() {
            check_simplex(row, &format!("transition row {i}"))?;
        }
        match &emission {
            Emission::Categorical(t) => {
                if t.len() != k {
                    return Err(Error::Validation("one emission row per state required".into()));
                }
                for (i, row) in t.iter().enumerate() {
                    check_simplex(row, &format!("emission row {i}"))?;
                }
            }
            Emission::Gaussian { mean, var } => {
                let d = mean.first().map_or(0, Vec::len);
                if mean.len() != k || var.len() != k || mean.iter().chain(var).any(|v| v.len() != d) {
                    return Err(Error::Validation("one mean and variance per state required".into()));
                }
                if var.iter().flatten().any(|&v| !(v > 0.0)) {
                    return Err(Error::Validation("emission variances must be positive".into()));
                }
            }
        }
        Ok(Self { pi, a, emission })
    }

    pub fn states(&self) -> usize {
        self.pi.len()
    }

    /// `p(x | z = k)`.
    pub fn emission_prob(&self, k: usize, x: &Observation) -> Result<f64> {
        match (&self.emission, x) {
            (Emission::Categorical(t), Observation::Symbol(v)) => t[k]
                .get(*v)
                .copied()
                .ok_or_else(|| Error::Input(format!("symbol {v} outside the alphabet"))),
            (Emission::Gaussian { mean, var }, Observation::Vector(x)) => {
                if x.len() != mean[k].len() {
                    return Err(Error::Input(format!(
                        "observation of length {} for emission dim {}",
                        x.len(),
                        mean[k].len()
                    )));
                }
                let lp: f64 = x
                    .iter()
                    .zip(&mean[k])
                    .zip(&var[k])
                    .map(|((x, m), v)| -HALF_LN_2PI - 0.5 * v.ln() - (x - m).powi(2) / (2.0 * v))
                    .sum();
                Ok(lp.exp())
            }
            _ => Err(Error::Input("observation kind does not match the emission model".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    /// `gamma[t][k] = p(z_t = k | x_1..x_T)`.
    pub gamma: Vec<Vec<f64>>,
    pub loglik: f64,
    /// Scaling factors `c_t = p(x_t | x_{<t})`.
    pub scales: Vec<f64>,
}

/// Scaled forward pass: normalised `alpha` and the scaling factors.
fn forward(hmm: &DiscreteHMM, obs: &[Observation]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if obs.is_empty() {
        return Err(Error::Input("empty observation sequence".into()));
    }
    let k = hmm.states();
    let mut alphas = Vec::with_capacity(obs.len());
    let mut scales = Vec::with_capacity(obs.len());
    for (t, x) in obs.iter().enumerate() {
        let mut alpha = vec![0.0; k];
        for j in 0..k {
            let prior = if t == 0 {
                hmm.pi[j]
            } else {
                let prev: &Vec<f64> = &alphas[t - 1];
                (0..k).map(|i| prev[i] * hmm.a[i][j]).sum()
            };
            alpha[j] = prior * hmm.emission_prob(j, x)?;
        }
        let c: f64 = alpha.iter().sum();
        if !(c > 0.0) {
            return Err(Error::ZeroLikelihood { frame: t });
        }
        alpha.iter_mut().for_each(|v| *v /= c);
        alphas.push(alpha);
        scales.push(c);
    }
    Ok((alphas, scales))
}

/// `log p(x_1..x_T) = sum_t log c_t` from the forward pass alone.
pub fn sequence_likelihood(hmm: &DiscreteHMM, obs: &[Observation]) -> Result<f64> {
    let (_, scales) = forward(hmm, obs)?;
    Ok(scales.iter().map(|c| c.ln()).sum())
}

/// Scaled forward-backward smoothing.
pub fn hmm_forward_backward(hmm: &DiscreteHMM, obs: &[Observation]) -> Result<ForwardBackward> {
    let (alphas, scales) = forward(hmm, obs)?;
    let k = hmm.states();
    let t_len = obs.len();
    let mut beta = vec![1.0; k];
    let mut gamma = vec![Vec::new(); t_len];
    for t in (0..t_len).rev() {
        let mut g: Vec<f64> = (0..k).map(|i| alphas[t][i] * beta[i]).collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        gamma[t] = g;
        if t > 0 {
            let e: Vec<f64> = (0..k)
                .map(|j| hmm.emission_prob(j, &obs[t]))
                .collect::<Result<_>>()?;
            beta = (0..k)
                .map(|i| (0..k).map(|j| hmm.a[i][j] * e[j] * beta[j]).sum::<f64>() / scales[t])
                .collect();
        }
    }
    Ok(ForwardBackward {
        gamma,
        loglik: scales.iter().map(|c| c.ln()).sum(),
        scales,
    })
}

/// A Markov chain `(pi, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub pi: Vec<f64>,
    pub a: Vec<Vec<f64>>,
}

impl Chain {
    pub fn states(&self) -> usize {
        self.pi.len()
    }
}

/// Shared chain `z^s` plus one independent chain `z^m` per modality;
/// modality `m` emits a symbol from `p(x^m | z^m, z^s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalHMM {
    pub shared: Chain,
    pub chains: Vec<Chain>,
    /// `emissions[m][z_m][z_s][v]`.
    pub emissions: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MultimodalHMM {
    pub fn alphabet(&self, m: usize) -> usize {
        self.emissions[m][0][0].len()
    }

    fn flat_states(&self) -> usize {
        self.shared.states() * self.chains.iter().map(Chain::states).product::<usize>()
    }

    /// Flat state index: `z_s` most significant, then `z_1 .. z_M`.
    pub fn encode_state(&self, zs: usize, zm: &[usize]) -> usize {
        let mut idx = zs;
        for (c, &z) in self.chains.iter().zip(zm) {
            idx = idx * c.states() + z;
        }
        idx
    }

    pub fn decode_state(&self, mut idx: usize) -> (usize, Vec<usize>) {
        let mut zm = vec![0; self.chains.len()];
        for (m, c) in self.chains.iter().enumerate().rev() {
            zm[m] = idx % c.states();
            idx /= c.states();
        }
        (idx, zm)
    }

    /// Joint symbol for one frame, `x^1` most significant.
    pub fn encode_symbols(&self, x: &[usize]) -> Result<usize> {
        if x.len() != self.chains.len() {
            return Err(Error::Input(format!(
                "{} symbols for {} modalities",
                x.len(),
                self.chains.len()
            )));
        }
        let mut idx = 0;
        for (m, &v) in x.iter().enumerate() {
            if v >= self.alphabet(m) {
                return Err(Error::Input(format!("symbol {v} outside modality {m}'s alphabet")));
            }
            idx = idx * self.alphabet(m) + v;
        }
        Ok(idx)
    }

    /// Posterior of the shared chain from flattened posteriors.
    pub fn shared_marginal(&self, gamma: &[Vec<f64>]) -> Vec<Vec<f64>> {
        gamma
            .iter()
            .map(|g| {
                let mut out = vec![0.0; self.shared.states()];
                for (i, p) in g.iter().enumerate() {
                    out[self.decode_state(i).0] += p;
                }
                out
            })
            .collect()
    }
}

/// Product-state HMM equivalent to `mm`, with transitions
/// `A_s ⊗ A_1 ⊗ ... ⊗ A_M` and joint-symbol categorical emissions.
pub fn flatten_multimodal(mm: &MultimodalHMM) -> Result<DiscreteHMM> {
    if mm.emissions.len() != mm.chains.len() {
        return Err(Error::Validation("one emission table per modality required".into()));
    }
    let k = mm.flat_states();
    if k > MAX_FLAT_STATES {
        return Err(Error::Size {
            states: k,
            limit: MAX_FLAT_STATES,
        });
    }
    let symbols: usize = (0..mm.chains.len()).map(|m| mm.alphabet(m)).product();
    let decoded: Vec<(usize, Vec<usize>)> = (0..k).map(|i| mm.decode_state(i)).collect();
    let pi: Vec<f64> = decoded
        .iter()
        .map(|(zs, zm)| {
            mm.shared.pi[*zs] * mm.chains.iter().zip(zm).map(|(c, &z)| c.pi[z]).product::<f64>()
        })
        .collect();
    let a: Vec<Vec<f64>> = decoded
        .iter()
        .map(|(is, im)| {
            decoded
                .iter()
                .map(|(js, jm)| {
                    mm.shared.a[*is][*js]
                        * mm
                            .chains
                            .iter()
                            .enumerate()
                            .map(|(m, c)| c.a[im[m]][jm[m]])
                            .product::<f64>()
                })
                .collect()
        })
        .collect();
    let table: Vec<Vec<f64>> = decoded
        .iter()
        .map(|(zs, zm)| {
            (0..symbols)
                .map(|mut v| {
                    let mut p = 1.0;
                    for m in (0..mm.chains.len()).rev() {
                        let am = mm.alphabet(m);
                        p *= mm.emissions[m][zm[m]][*zs][v % am];
                        v /= am;
                    }
                    p
                })
                .collect()
        })
        .collect();
    // Products of simplexes are simplexes up to rounding; renormalise so the
    // validation tolerance holds for larger products.
    let norm = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    DiscreteHMM::new(
        norm(pi),
        a.into_iter().map(norm).collect(),
        Emission::Categorical(table.into_iter().map(norm).collect()),
    )
}

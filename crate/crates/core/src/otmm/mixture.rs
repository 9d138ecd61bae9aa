use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lse, softmax_row, BoundParams, Graph, ParamSet, Tensor, Var};

pub(crate) const ALPHA: &str = "alpha";
const MU: &str = "mu";
const LOG_SIGMA: &str = "log_sigma";

/// Initial per-coordinate scale of every component.
pub const INIT_SIGMA: f64 = 0.5;

/// Diagonal Gaussian mixture of one class: mixing logits `alpha` (`1 x K`),
/// centroids `mu` (`K x d`) and log scales `log_sigma` (`K x d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    params: ParamSet,
}

impl ClassMixture {
    pub fn new(alpha: Vec<f64>, mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        let k = alpha.len();
        let (mk, d) = mu.dims2();
        if k == 0 || mk != k || log_sigma.dims2() != (k, d) || mu.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "mixture with {k} logits, centroids {:?}, log scales {:?}",
                mu.shape(),
                log_sigma.shape()
            )));
        }
        let mut params = ParamSet::new();
        params.insert(ALPHA, Tensor::matrix(1, k, alpha)?)?;
        params.insert(MU, mu)?;
        params.insert(LOG_SIGMA, log_sigma)?;
        Ok(Self { params })
    }

    /// Centroids at the first `k` distinct rows of `features`; missing ones
    /// are the first row plus `N(0, 0.01)` jitter. Uniform weights and scale
    /// [`INIT_SIGMA`].
    pub fn init_from_features<R: Rng + ?Sized>(features: &Tensor, k: usize, rng: &mut R) -> Result<Self> {
        let (n, d) = features.dims2();
        if n == 0 || k == 0 {
            return Err(Error::Data("cannot initialize a mixture without features".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..n {
            if rows.len() == k {
                break;
            }
            let r = features.row(i);
            if !rows.iter().any(|x| x.as_slice() == r) {
                rows.push(r.to_vec());
            }
        }
        while rows.len() < k {
            let jittered = features
                .row(0)
                .iter()
                .map(|&x| {
                    let e: f64 = StandardNormal.sample(rng);
                    x + 0.1 * e
                })
                .collect();
            rows.push(jittered);
        }
        let mu = Tensor::from_rows(&rows, d)?;
        let log_sigma = Tensor::matrix(k, d, vec![INIT_SIGMA.ln(); k * d])?;
        Self::new(vec![0.0; k], mu, log_sigma)
    }

    pub(crate) fn from_params(mut params: ParamSet) -> Result<Self> {
        let alpha = params.get(ALPHA).map(Tensor::dims2);
        let mu = params.get(MU).map(Tensor::dims2);
        let ls = params.get(LOG_SIGMA).map(Tensor::dims2);
        match (alpha, mu, ls) {
            (Some((1, k)), Some((mk, d)), Some(s)) if k == mk && s == (k, d) && params.len() == 3 => {
                params.restore_grads();
                Ok(Self { params })
            }
            _ => Err(Error::Checkpoint("malformed mixture parameters".into())),
        }
    }

    pub fn num_components(&self) -> usize {
        self.alpha().len()
    }

    pub fn dim(&self) -> usize {
        self.mu().cols()
    }

    pub fn alpha(&self) -> &[f64] {
        self.params.get(ALPHA).expect("alpha").values()
    }

    /// `pi = softmax(alpha)`.
    pub fn weights(&self) -> Vec<f64> {
        softmax_row(self.alpha())
    }

    pub fn mu(&self) -> &Tensor {
        self.params.get(MU).expect("mu")
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        self.mu().row(k)
    }

    pub fn log_sigma(&self) -> &Tensor {
        self.params.get(LOG_SIGMA).expect("log_sigma")
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma().map(f64::exp)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Frozen randomness behind `n` mixture draws: standard Gumbel noise
/// (`n x K`) and one `n x d` standard normal block per component.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureNoise {
    pub gumbel: Tensor,
    pub gauss: Vec<Tensor>,
}

impl MixtureNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, k: usize, d: usize, rng: &mut R) -> Self {
        let gumbel_dist = Gumbel::new(0.0, 1.0).expect("valid gumbel");
        let gumbel = (0..n * k).map(|_| gumbel_dist.sample(rng)).collect();
        let gauss = (0..k)
            .map(|_| {
                let v = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
                Tensor::matrix(n, d, v).expect("noise shape")
            })
            .collect();
        Self {
            gumbel: Tensor::matrix(n, k, gumbel).expect("noise shape"),
            gauss,
        }
    }

    pub fn num_draws(&self) -> usize {
        self.gumbel.rows()
    }
}

/// `softmax((log pi + g) / tau)` with `pi = softmax(alpha)`.
pub fn gumbel_softmax_with_noise(alpha: &[f64], gumbel: &[f64], tau: f64) -> Vec<f64> {
    let l = lse(alpha);
    let logits: Vec<f64> = alpha
        .iter()
        .zip(gumbel)
        .map(|(a, g)| (a - l + g) / tau)
        .collect();
    softmax_row(&logits)
}

/// One relaxed categorical draw over the components of `alpha`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(alpha: &[f64], tau: f64, rng: &mut R) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let g: Vec<f64> = (0..alpha.len()).map(|_| dist.sample(rng)).collect();
    gumbel_softmax_with_noise(alpha, &g, tau)
}

/// Records `z_j = sum_k y_jk (mu_k + eps_jk * sigma_k)` for every draw `j`
/// of `noise`, one row per draw.
pub fn mixture_samples_on(
    g: &mut Graph,
    bound: &BoundParams,
    noise: &MixtureNoise,
    tau: f64,
) -> Result<Var> {
    let alpha = bound.var(ALPHA);
    let mu = bound.var(MU);
    let log_sigma = bound.var(LOG_SIGMA);
    let k = g.value(alpha).len();
    if noise.gumbel.cols() != k || noise.gauss.len() != k {
        return Err(Error::Shape(format!(
            "noise for {} components applied to a {k}-component mixture",
            noise.gauss.len()
        )));
    }
    let log_pi = g.row_log_softmax(alpha);
    let gumbel = g.constant(noise.gumbel.clone());
    let logits = g.add_row_broadcast(gumbel, log_pi)?;
    let logits = g.scale(logits, 1.0 / tau);
    let y = g.row_softmax(logits);
    let sigma = g.exp(log_sigma);
    let mut acc: Option<Var> = None;
    for (kk, eps) in noise.gauss.iter().enumerate() {
        let eps = g.constant(eps.clone());
        let sigma_k = g.row(sigma, kk)?;
        let mu_k = g.row(mu, kk)?;
        let comp = g.mul_row_broadcast(eps, sigma_k)?;
        let comp = g.add_row_broadcast(comp, mu_k)?;
        let y_k = g.column(y, kk)?;
        let term = g.mul_col_broadcast(comp, y_k)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one component"))
}

/// Samples with their frozen noise.
#[derive(Clone, Debug)]
pub struct MixtureDraw {
    pub samples: Tensor,
    pub noise: MixtureNoise,
}

/// Evaluates the reparameterized samples for fixed noise.
pub fn mixture_samples(mix: &ClassMixture, noise: &MixtureNoise, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = g.bind(mix.params());
    let z = mixture_samples_on(&mut g, &bound, noise, tau)?;
    Ok(g.value(z).clone())
}

/// `n` relaxed draws from `mix`, `n x d`.
pub fn sample_mixture<R: Rng + ?Sized>(mix: &ClassMixture, tau: f64, n: usize, rng: &mut R) -> Result<MixtureDraw> {
    if n == 0 {
        return Err(Error::Config("at least one mixture draw is required".into()));
    }
    let noise = MixtureNoise::draw(n, mix.num_components(), mix.dim(), rng);
    let samples = mixture_samples(mix, &noise, tau)?;
    Ok(MixtureDraw { samples, noise })
}

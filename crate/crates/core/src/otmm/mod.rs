//! Per-class Gaussian mixtures fitted online through the entropic dual of
//! optimal transport: a potential `phi` is pushed up the dual objective,
//! then the mixture is pushed down it through reparameterized samples.

mod mixture;
mod potential;

pub use mixture::{
    gumbel_softmax_sample, gumbel_softmax_with_noise, mixture_samples, mixture_samples_on, sample_mixture, ClassMixture,
    MixtureDraw, MixtureNoise, INIT_SIGMA,
};
pub use potential::{KantorovichPotential, POTENTIAL_HIDDEN};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtmmConfig {
    /// Entropic regularization rate.
    pub epsilon: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub n_phi_steps: usize,
    pub n_mix_steps: usize,
    /// Mixture draws per objective estimate.
    pub n_mix_samples: usize,
    pub lr_phi: f64,
    /// Step size for centroids and log scales.
    pub lr_mix: f64,
    /// Step size for the mixing logits.
    pub lr_alpha: f64,
    pub seed: u64,
}

impl Default for OtmmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tau: 0.1,
            n_phi_steps: 5,
            n_mix_steps: 3,
            n_mix_samples: 10,
            lr_phi: 0.01,
            lr_mix: 0.05,
            lr_alpha: 0.001,
            seed: 0,
        }
    }
}

impl OtmmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("tau", self.tau),
            ("lr_phi", self.lr_phi),
            ("lr_mix", self.lr_mix),
            ("lr_alpha", self.lr_alpha),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_mix_samples == 0 {
            return Err(Error::Config("n_mix_samples must be at least 1".into()));
        }
        Ok(())
    }
}

fn uniform_log_weights(n: usize) -> Vec<f64> {
    vec![-(n as f64).ln(); n]
}

/// Records `-eps * logsumexp_i((phi_i - d(z_i, y_j)) / eps + log p_i)` for
/// every row `y_j` of `y`, as an `n x 1` column. `phi_z` holds `phi(z_i)` as
/// an `m x 1` column.
pub(crate) fn conjugate_on(g: &mut Graph, y: Var, z: Var, phi_z: Var, log_p: &[f64], eps: f64) -> Result<Var> {
    let m = g.value(z).rows();
    if m == 0 {
        return Err(Error::Data("conjugate potential over an empty batch".into()));
    }
    let d = g.pairwise_sq_dist(y, z)?;
    let neg_d = g.scale(d, -1.0);
    let phi_row = g.reshape(phi_z, 1, m)?;
    let a = g.add_row_broadcast(neg_d, phi_row)?;
    let a = g.scale(a, 1.0 / eps);
    let lp = g.constant(Tensor::matrix(1, m, log_p.to_vec())?);
    let a = g.add_row_broadcast(a, lp)?;
    let l = g.row_logsumexp(a)?;
    Ok(g.scale(l, -eps))
}

/// Records `sum_i p_i phi(z_i) + sum_j q_j phi~(y_j)`.
pub fn dual_on(
    g: &mut Graph,
    z: Var,
    phi_z: Var,
    p: &[f64],
    y: Var,
    q: &[f64],
    eps: f64,
) -> Result<Var> {
    let log_p: Vec<f64> = p.iter().map(|w| w.ln()).collect();
    let conj = conjugate_on(g, y, z, phi_z, &log_p, eps)?;
    let a = g.weighted_sum(phi_z, p)?;
    let b = g.weighted_sum(conj, q)?;
    g.add(a, b)
}

/// `phi~(y) = -eps * [logsumexp_i((-d(z_i, y) + phi(z_i)) / eps) - ln |Z|]`
/// with `d` the squared Euclidean distance.
pub fn phi_tilde(y: &[f64], z: &Tensor, phi: &KantorovichPotential, eps: f64) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::Data("conjugate potential over an empty batch".into()));
    }
    let phi_vals = phi.values(z)?;
    let mut g = Graph::new();
    let yv = g.constant(Tensor::matrix(1, y.len(), y.to_vec())?);
    let zv = g.constant(z.clone());
    let pv = g.constant(Tensor::matrix(z.rows(), 1, phi_vals)?);
    let out = conjugate_on(&mut g, yv, zv, pv, &uniform_log_weights(z.rows()), eps)?;
    Ok(g.scalar(out))
}

/// Dual objective `mean_i phi(z_i) + mean_j phi~(y_j)` for mixture draws
/// with the given noise.
pub fn dual_objective_with_noise(
    z: &Tensor,
    mix: &ClassMixture,
    phi: &KantorovichPotential,
    noise: &MixtureNoise,
    cfg: &OtmmConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let obj = record_dual(&mut g, z, mix, phi, noise, cfg)?;
    Ok(g.scalar(obj))
}

fn record_dual(
    g: &mut Graph,
    z: &Tensor,
    mix: &ClassMixture,
    phi: &KantorovichPotential,
    noise: &MixtureNoise,
    cfg: &OtmmConfig,
) -> Result<Var> {
    let (m, n) = (z.rows(), noise.num_draws());
    if m == 0 {
        return Err(Error::Data("dual objective over an empty batch".into()));
    }
    let phi_bound = g.bind(phi.params());
    let mix_bound = g.bind(mix.params());
    let zv = g.constant(z.clone());
    let phi_z = phi.forward(g, &phi_bound, zv)?;
    let y = mixture_samples_on(g, &mix_bound, noise, cfg.tau)?;
    dual_on(g, zv, phi_z, &vec![1.0 / m as f64; m], y, &vec![1.0 / n as f64; n], cfg.epsilon)
}

/// Dual objective estimated with `cfg.n_mix_samples` fresh mixture draws.
pub fn dual_objective<R: Rng + ?Sized>(
    z: &Tensor,
    mix: &ClassMixture,
    phi: &KantorovichPotential,
    cfg: &OtmmConfig,
    rng: &mut R,
) -> Result<f64> {
    let noise = MixtureNoise::draw(cfg.n_mix_samples, mix.num_components(), mix.dim(), rng);
    dual_objective_with_noise(z, mix, phi, &noise, cfg)
}

/// One ascent step on the potential for fixed noise; returns the objective
/// before the step.
pub fn phi_ascent_step(
    z: &Tensor,
    mix: &ClassMixture,
    phi: &mut KantorovichPotential,
    noise: &MixtureNoise,
    cfg: &OtmmConfig,
) -> Result<f64> {
    let m = z.rows();
    if m == 0 {
        return Err(Error::Data("dual objective over an empty batch".into()));
    }
    let samples = mixture_samples(mix, noise, cfg.tau)?;
    let n = samples.rows();
    let mut g = Graph::new();
    let bound = g.bind(phi.params());
    let zv = g.constant(z.clone());
    let y = g.constant(samples);
    let phi_z = phi.forward(&mut g, &bound, zv)?;
    let obj = dual_on(&mut g, zv, phi_z, &vec![1.0 / m as f64; m], y, &vec![1.0 / n as f64; n], cfg.epsilon)?;
    let neg = g.scale(obj, -1.0);
    let grads = g.backward(neg)?;
    grads.accumulate_into(&bound, phi.params_mut())?;
    sgd_step(phi.params_mut(), cfg.lr_phi)?;
    Ok(g.scalar(obj))
}

/// One descent step on the mixture for fixed noise; returns the objective
/// before the step.
pub fn mixture_descent_step(
    z: &Tensor,
    mix: &mut ClassMixture,
    phi: &KantorovichPotential,
    noise: &MixtureNoise,
    cfg: &OtmmConfig,
) -> Result<f64> {
    let m = z.rows();
    if m == 0 {
        return Err(Error::Data("dual objective over an empty batch".into()));
    }
    let n = noise.num_draws();
    let phi_vals = phi.values(z)?;
    let mut g = Graph::new();
    let bound = g.bind(mix.params());
    let zv = g.constant(z.clone());
    let phi_z = g.constant(Tensor::matrix(m, 1, phi_vals)?);
    let y = mixture_samples_on(&mut g, &bound, noise, cfg.tau)?;
    let obj = dual_on(&mut g, zv, phi_z, &vec![1.0 / m as f64; m], y, &vec![1.0 / n as f64; n], cfg.epsilon)?;
    let grads = g.backward(obj)?;
    for (name, var) in bound.iter() {
        let lr = if name == mixture::ALPHA { cfg.lr_alpha } else { cfg.lr_mix };
        if let Some(d) = grads.wrt(*var) {
            mix.params_mut().get_mut(name).expect("bound parameter").add_scaled(d, -lr);
        }
    }
    Ok(g.scalar(obj))
}

/// `n_phi_steps` ascent steps on `phi` with the mixture frozen, fresh
/// noise per step.
pub fn update_phi<R: Rng + ?Sized>(
    z: &Tensor,
    mix: &ClassMixture,
    phi: &mut KantorovichPotential,
    cfg: &OtmmConfig,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..cfg.n_phi_steps {
        let noise = MixtureNoise::draw(cfg.n_mix_samples, mix.num_components(), mix.dim(), rng);
        phi_ascent_step(z, mix, phi, &noise, cfg)?;
    }
    Ok(())
}

/// `n_mix_steps` descent steps on `(alpha, mu, log_sigma)` with `phi`
/// frozen, fresh noise per step.
pub fn update_mixture<R: Rng + ?Sized>(
    z: &Tensor,
    mix: &mut ClassMixture,
    phi: &KantorovichPotential,
    cfg: &OtmmConfig,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..cfg.n_mix_steps {
        let noise = MixtureNoise::draw(cfg.n_mix_samples, mix.num_components(), mix.dim(), rng);
        mixture_descent_step(z, mix, phi, &noise, cfg)?;
    }
    Ok(())
}

/// Mixtures and potentials of every class seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtmmState {
    components: usize,
    mixtures: BTreeMap<ClassId, ClassMixture>,
    potentials: BTreeMap<ClassId, KantorovichPotential>,
}

impl OtmmState {
    pub fn new(components: usize) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("at least one centroid per class is required".into()));
        }
        Ok(Self {
            components,
            mixtures: BTreeMap::new(),
            potentials: BTreeMap::new(),
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn mixtures(&self) -> &BTreeMap<ClassId, ClassMixture> {
        &self.mixtures
    }

    pub fn mixture(&self, c: ClassId) -> Option<&ClassMixture> {
        self.mixtures.get(&c)
    }

    pub fn potential(&self, c: ClassId) -> Option<&KantorovichPotential> {
        self.potentials.get(&c)
    }

    /// Replaces (or adds) the mixture of class `c`.
    pub fn set_mixture(&mut self, c: ClassId, mix: ClassMixture) {
        self.mixtures.insert(c, mix);
    }

    pub(crate) fn restore_grads(&mut self) -> Result<()> {
        for mix in self.mixtures.values_mut() {
            *mix = ClassMixture::from_params(mix.params().clone())?;
        }
        for phi in self.potentials.values_mut() {
            let mlp = crate::model::Mlp::from_params(phi.mlp().widths().to_vec(), phi.params().clone())?;
            *phi = KantorovichPotential::from_mlp(mlp);
        }
        Ok(())
    }
}

fn potential_seed(seed: u64, c: ClassId) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(c as u64)
        .rotate_left(17)
}

/// For every class of `batches` (detached features, one row per sample):
/// creates its mixture and potential on first sight, then runs
/// [`update_phi`] and [`update_mixture`] on that class's rows.
pub fn otmm_step<R: Rng + ?Sized>(
    batches: &BTreeMap<ClassId, Tensor>,
    state: &mut OtmmState,
    cfg: &OtmmConfig,
    rng: &mut R,
) -> Result<()> {
    for (&c, z) in batches {
        if z.rows() == 0 {
            continue;
        }
        if !state.mixtures.contains_key(&c) {
            let mix = ClassMixture::init_from_features(z, state.components, rng)?;
            state.mixtures.insert(c, mix);
        }
        if !state.potentials.contains_key(&c) {
            let phi = KantorovichPotential::new(z.cols(), potential_seed(cfg.seed, c))?;
            state.potentials.insert(c, phi);
        }
        let mix = state.mixtures.get_mut(&c).expect("inserted above");
        let phi = state.potentials.get_mut(&c).expect("inserted above");
        update_phi(z, mix, phi, cfg, rng)?;
        update_mixture(z, mix, phi, cfg, rng)?;
        if !mix.params().is_finite() || !phi.params().is_finite() {
            return Err(Error::NonFinite(format!("mixture state of class {c}")));
        }
    }
    Ok(())
}

/// `sum_i p_i phi_i + sum_j q_j phi~(y_j)` for a potential given by its
/// values `phi` on the atoms `z`, with its gradient in `phi`.
pub fn discrete_dual(
    z: &Tensor,
    p: &[f64],
    y: &Tensor,
    q: &[f64],
    phi: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    if phi.len() != z.rows() || p.len() != z.rows() || q.len() != y.rows() {
        return Err(Error::Shape("discrete dual weights do not match atoms".into()));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let yv = g.constant(y.clone());
    let pv = g.leaf(Tensor::matrix(phi.len(), 1, phi.to_vec())?);
    let obj = dual_on(&mut g, zv, pv, p, yv, q, eps)?;
    let grads = g.backward(obj)?;
    let grad = grads
        .wrt(pv)
        .map(|t| t.values().to_vec())
        .unwrap_or_else(|| vec![0.0; phi.len()]);
    Ok((g.scalar(obj), grad))
}

/// Maximizes [`discrete_dual`] over the potential values by gradient ascent
/// with step `eps`, stopping once the gradient norm drops below `tol`.
/// Returns the final objective.
pub fn maximize_discrete_dual(
    z: &Tensor,
    p: &[f64],
    y: &Tensor,
    q: &[f64],
    eps: f64,
    max_steps: usize,
    tol: f64,
) -> Result<f64> {
    let mut phi = vec![0.0; z.rows()];
    let mut value = 0.0;
    for _ in 0..max_steps {
        let (v, grad) = discrete_dual(z, p, y, q, &phi, eps)?;
        value = v;
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < tol {
            return Ok(value);
        }
        for (x, d) in phi.iter_mut().zip(&grad) {
            *x += eps * d;
        }
    }
    Ok(value)
}

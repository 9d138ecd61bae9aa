//! Dynamic preservation: a prototype cross-entropy that separates classes,
//! followed by a distance-softmax loss that compresses each class around
//! its batch mean.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, LabeledSample};
use crate::error::{Error, Result};
use crate::model::{AlignedPrototypes, FeatureExtractor};
use crate::numerics::{clip_grad_norm, sgd_step, Graph, Tensor, Var};

/// Per-class mean features `p^c` of one joint batch.
pub type MeanPrototypes = BTreeMap<ClassId, Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreservationConfig {
    pub lr_theta: f64,
    pub lr_proto: f64,
    /// Fraction of the prototype step applied to classes of earlier tasks.
    pub clip_alpha: f64,
    pub steps_l1: usize,
    pub steps_l2: usize,
    /// Extractor step size of the compression steps; `lr_theta` if unset.
    pub lr_compression: Option<f64>,
    /// Largest joint gradient norm applied to the feature extractor in one
    /// step; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for PreservationConfig {
    fn default() -> Self {
        Self {
            lr_theta: 0.1,
            lr_proto: 0.1,
            clip_alpha: 0.1,
            steps_l1: 1,
            steps_l2: 1,
            lr_compression: Some(0.01),
            max_grad_norm: 1.0,
        }
    }
}

impl PreservationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_theta", self.lr_theta),
            ("lr_proto", self.lr_proto),
            ("lr_compression", self.lr_compression.unwrap_or(self.lr_theta)),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.max_grad_norm >= 0.0) || !self.max_grad_norm.is_finite() {
            return Err(Error::Config(format!(
                "max_grad_norm must be non-negative, got {}",
                self.max_grad_norm
            )));
        }
        if !(0.0..=1.0).contains(&self.clip_alpha) {
            return Err(Error::Config(format!(
                "clip_alpha must lie in [0, 1], got {}",
                self.clip_alpha
            )));
        }
        Ok(())
    }
}

/// `1 / n_c` for every sample, so summing weighted per-sample terms gives the
/// sum over classes of per-class means.
fn class_mean_weights(labels: &[ClassId]) -> Vec<f64> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    labels.iter().map(|l| 1.0 / counts[l] as f64).collect()
}

/// Records the separation loss for features `z` (one row per label) against
/// the prototype matrix `w` whose rows follow `proto_classes`.
pub fn separation_loss_on(
    g: &mut Graph,
    z: Var,
    labels: &[ClassId],
    w: Var,
    proto_classes: &[ClassId],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("separation loss over an empty batch".into()));
    }
    let targets = labels
        .iter()
        .map(|l| {
            proto_classes
                .iter()
                .position(|c| c == l)
                .ok_or(Error::MissingPrototype(*l))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = g.matmul_nt(z, w)?;
    g.softmax_cross_entropy(logits, &targets, &class_mean_weights(labels))
}

/// Separation loss of fixed features: per-class mean of
/// `-log softmax(<w, z>)[label]`, summed over the classes present.
pub fn loss_separation(features: &Tensor, labels: &[ClassId], protos: &AlignedPrototypes) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(features.clone());
    let w = g.constant(protos.as_matrix());
    let l = separation_loss_on(&mut g, z, labels, w, &protos.classes())?;
    Ok(g.scalar(l))
}

/// Per-class mean of the rows of `features`.
pub fn compute_mean_prototypes(features: &Tensor, labels: &[ClassId]) -> MeanPrototypes {
    let d = features.cols();
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], 0));
        for (s, x) in e.0.iter_mut().zip(features.row(i)) {
            *s += x;
        }
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Records the compression loss; `means` enter as constants.
pub fn compression_loss_on(g: &mut Graph, z: Var, labels: &[ClassId], means: &MeanPrototypes) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("compression loss over an empty batch".into()));
    }
    let classes: Vec<ClassId> = means.keys().copied().collect();
    let targets = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).ok_or(Error::MissingPrototype(*l)))
        .collect::<Result<Vec<_>>>()?;
    let d = g.value(z).cols();
    let rows: Vec<&Vec<f64>> = means.values().collect();
    let p = g.constant(Tensor::from_rows(&rows, d)?);
    let dist = g.pairwise_sq_dist(z, p)?;
    let logits = g.scale(dist, -1.0);
    g.softmax_cross_entropy(logits, &targets, &class_mean_weights(labels))
}

pub fn loss_compression(features: &Tensor, labels: &[ClassId], means: &MeanPrototypes) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(features.clone());
    let l = compression_loss_on(&mut g, z, labels, means)?;
    Ok(g.scalar(l))
}

/// `w^c <- w^c - lr * alpha * g^c` for old classes and `w^c - lr * g^c`
/// otherwise.
pub fn apply_clip_grad(
    protos: &mut AlignedPrototypes,
    grads: &BTreeMap<ClassId, Vec<f64>>,
    clip_alpha: f64,
    lr_proto: f64,
    old_classes: &BTreeSet<ClassId>,
) {
    for (c, gc) in grads {
        let factor = if old_classes.contains(c) {
            lr_proto * clip_alpha
        } else {
            lr_proto
        };
        if factor == 0.0 {
            continue;
        }
        if let Some(w) = protos.get_mut(*c) {
            for (x, d) in w.iter_mut().zip(gc) {
                *x -= factor * d;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PreservationReport {
    /// Separation loss before the first update, if any step ran.
    pub separation: Option<f64>,
    /// Compression loss before the first compression update, if any ran.
    pub compression: Option<f64>,
}

/// One round of dynamic preservation over the stream batch `new` and the
/// replay batch `replay`.
///
/// Runs `steps_l1` separation steps (feature extractor at full rate,
/// prototypes through [`apply_clip_grad`]), recomputes the mean prototypes
/// with the updated extractor, then runs `steps_l2` compression steps on the
/// extractor only.
pub fn dynamic_preservation_step(
    new: &[&LabeledSample],
    replay: &[&LabeledSample],
    fe: &mut FeatureExtractor,
    protos: &mut AlignedPrototypes,
    old_classes: &BTreeSet<ClassId>,
    cfg: &PreservationConfig,
) -> Result<PreservationReport> {
    let samples: Vec<&LabeledSample> = new.iter().chain(replay).copied().collect();
    let mut report = PreservationReport::default();
    if samples.is_empty() {
        return Ok(report);
    }
    let labels: Vec<ClassId> = samples.iter().map(|s| s.label).collect();
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let x = Tensor::from_rows(&inputs, fe.input_dim())?;

    for _ in 0..cfg.steps_l1 {
        let proto_classes = protos.classes();
        let mut g = Graph::new();
        let bound = g.bind(fe.params());
        let xv = g.constant(x.clone());
        let z = fe.forward(&mut g, &bound, xv)?;
        let w = g.leaf(protos.as_matrix());
        let loss = separation_loss_on(&mut g, z, &labels, w, &proto_classes)?;
        report.separation.get_or_insert(g.scalar(loss));
        let grads = g.backward(loss)?;
        grads.accumulate_into(&bound, fe.params_mut())?;
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(fe.params_mut(), cfg.max_grad_norm);
        }
        sgd_step(fe.params_mut(), cfg.lr_theta)?;
        if let Some(gw) = grads.wrt(w) {
            let per_class = proto_classes
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, gw.row(i).to_vec()))
                .collect();
            apply_clip_grad(protos, &per_class, cfg.clip_alpha, cfg.lr_proto, old_classes);
        }
    }

    let mut means: Option<MeanPrototypes> = None;
    for _ in 0..cfg.steps_l2 {
        let mut g = Graph::new();
        let bound = g.bind(fe.params());
        let xv = g.constant(x.clone());
        let z = fe.forward(&mut g, &bound, xv)?;
        let means = means.get_or_insert_with(|| compute_mean_prototypes(g.value(z), &labels));
        let loss = compression_loss_on(&mut g, z, &labels, means)?;
        report.compression.get_or_insert(g.scalar(loss));
        let grads = g.backward(loss)?;
        grads.accumulate_into(&bound, fe.params_mut())?;
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(fe.params_mut(), cfg.max_grad_norm);
        }
        sgd_step(fe.params_mut(), cfg.lr_compression.unwrap_or(cfg.lr_theta))?;
    }

    if !fe.params().is_finite() {
        return Err(Error::NonFinite("feature extractor parameters".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_new_classes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn equal_logits_give_ln_classes_per_class() {
        let mut p = AlignedPrototypes::new(2);
        p.insert(0, vec![0.0, 0.0]).unwrap();
        p.insert(1, vec![0.0, 0.0]).unwrap();
        let z = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let l = loss_separation(&z, &[0, 1, 1], &p).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_true_logit_drives_loss_to_zero() {
        let mut p = AlignedPrototypes::new(1);
        p.insert(0, vec![1.0]).unwrap();
        p.insert(1, vec![-1.0]).unwrap();
        let z = Tensor::matrix(1, 1, vec![50.0]).unwrap();
        let l = loss_separation(&z, &[0], &p).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn separation_matches_naive_per_sample_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = AlignedPrototypes::new(5);
        for c in 0..3 {
            p.insert(c, (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        let z = random_features(&mut rng, 7, 5);
        let labels = [0, 2, 1, 1, 0, 2, 2];
        let got = loss_separation(&z, &labels, &p).unwrap();

        let mut want = 0.0;
        for c in 0..3 {
            let members: Vec<usize> = (0..7).filter(|&i| labels[i] == c).collect();
            let mut s = 0.0;
            for &i in &members {
                let logits: Vec<f64> = (0..3)
                    .map(|k| (0..5).map(|t| p.get(k).unwrap()[t] * z.get(i, t)).sum())
                    .collect();
                let denom: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
                s += -(logits[c].exp() / denom).ln();
            }
            want += s / members.len() as f64;
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn mean_prototypes_examples() {
        let z = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(compute_mean_prototypes(&z, &[4])[&4], vec![0.5, -1.0, 2.0]);
        let z = Tensor::matrix(2, 2, vec![1.5, -2.0, -1.5, 2.0]).unwrap();
        assert_eq!(compute_mean_prototypes(&z, &[1, 1])[&1], vec![0.0, 0.0]);
    }

    #[test]
    fn mean_prototypes_match_naive_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_features(&mut rng, 9, 4);
        let labels = [3, 1, 3, 3, 1, 7, 1, 3, 7];
        let got = compute_mean_prototypes(&z, &labels);
        for (&c, mean) in &got {
            let rows: Vec<usize> = (0..9).filter(|&i| labels[i] == c).collect();
            for t in 0..4 {
                let want = rows.iter().map(|&i| z.get(i, t)).sum::<f64>() / rows.len() as f64;
                assert!((mean[t] - want).abs() < 1e-12);
            }
        }
        assert!(!got.contains_key(&0));
    }

    #[test]
    fn compression_single_class_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_features(&mut rng, 5, 3);
        let labels = [2; 5];
        let means = compute_mean_prototypes(&z, &labels);
        assert_eq!(loss_compression(&z, &labels, &means).unwrap(), 0.0);
    }

    #[test]
    fn compression_closed_form() {
        let r2: f64 = 1.7;
        let mut means = MeanPrototypes::new();
        means.insert(0, vec![0.0, 0.0]);
        means.insert(1, vec![r2.sqrt(), 0.0]);
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let l = loss_compression(&z, &[0], &means).unwrap();
        assert!((l - (1.0 + (-r2).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn compression_rejects_empty_batch() {
        let z = Tensor::zeros(&[0, 2]);
        assert!(loss_compression(&z, &[], &MeanPrototypes::new()).is_err());
    }

    fn two_class_protos(seed: u64) -> AlignedPrototypes {
        let mut p = AlignedPrototypes::new(3);
        init_new_classes(&mut p, &[0, 1], seed).unwrap();
        p
    }

    #[test]
    fn clip_alpha_zero_freezes_old_prototypes() {
        let mut p = two_class_protos(1);
        let before = p.clone();
        let mut grads = BTreeMap::new();
        grads.insert(0, vec![1.0, 2.0, 3.0]);
        grads.insert(1, vec![1.0, 2.0, 3.0]);
        let old: BTreeSet<_> = [0].into();
        apply_clip_grad(&mut p, &grads, 0.0, 0.5, &old);
        assert_eq!(p.get(0), before.get(0));
        assert_ne!(p.get(1), before.get(1));
    }

    #[test]
    fn clip_alpha_one_matches_new_class_rule() {
        let g = vec![0.3, -0.1, 0.8];
        let mut grads = BTreeMap::new();
        grads.insert(0, g.clone());
        let mut as_old = two_class_protos(2);
        let mut as_new = as_old.clone();
        apply_clip_grad(&mut as_old, &grads, 1.0, 0.2, &[0].into());
        apply_clip_grad(&mut as_new, &grads, 1.0, 0.2, &BTreeSet::new());
        assert_eq!(as_old, as_new);
    }

    #[test]
    fn clip_alpha_scales_old_displacement() {
        let g = vec![0.3, -0.1, 0.8];
        let mut grads = BTreeMap::new();
        grads.insert(0, g.clone());
        let start = two_class_protos(3);
        let mut clipped = start.clone();
        let mut full = start.clone();
        apply_clip_grad(&mut clipped, &grads, 0.1, 0.2, &[0].into());
        apply_clip_grad(&mut full, &grads, 0.1, 0.2, &BTreeSet::new());
        for t in 0..3 {
            let dc = clipped.get(0).unwrap()[t] - start.get(0).unwrap()[t];
            let df = full.get(0).unwrap()[t] - start.get(0).unwrap()[t];
            assert!((dc - 0.1 * df).abs() < 1e-15);
        }
    }

    fn toy_batch() -> Vec<LabeledSample> {
        let pts = [
            ([1.0, 0.2], 0),
            ([0.9, -0.1], 0),
            ([1.2, 0.1], 0),
            ([-1.0, 0.1], 1),
            ([-0.8, -0.2], 1),
            ([-1.1, 0.0], 1),
        ];
        pts.iter()
            .map(|(f, l)| LabeledSample {
                features: f.to_vec(),
                label: *l,
            })
            .collect()
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let batch = toy_batch();
        let refs: Vec<&LabeledSample> = batch.iter().collect();
        let mut fe = FeatureExtractor::new(2, 8, 3, 0).unwrap();
        let mut p = two_class_protos(0);
        let (fe0, p0) = (fe.clone(), p.clone());
        let cfg = PreservationConfig {
            steps_l1: 0,
            steps_l2: 0,
            ..Default::default()
        };
        dynamic_preservation_step(&refs, &[], &mut fe, &mut p, &BTreeSet::new(), &cfg).unwrap();
        assert_eq!(fe, fe0);
        assert_eq!(p, p0);
    }

    #[test]
    fn separation_step_decreases_loss() {
        let batch = toy_batch();
        let refs: Vec<&LabeledSample> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let inputs: Vec<&[f64]> = batch.iter().map(|s| s.features.as_slice()).collect();
        let mut fe = FeatureExtractor::new(2, 8, 3, 4).unwrap();
        let mut p = two_class_protos(4);
        let before = loss_separation(&fe.extract_features(&inputs).unwrap(), &labels, &p).unwrap();
        let cfg = PreservationConfig {
            lr_theta: 0.1,
            lr_proto: 0.1,
            steps_l1: 1,
            steps_l2: 0,
            ..Default::default()
        };
        dynamic_preservation_step(&refs, &[], &mut fe, &mut p, &BTreeSet::new(), &cfg).unwrap();
        let after = loss_separation(&fe.extract_features(&inputs).unwrap(), &labels, &p).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn compression_steps_tighten_classes() {
        let batch = toy_batch();
        let refs: Vec<&LabeledSample> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let inputs: Vec<&[f64]> = batch.iter().map(|s| s.features.as_slice()).collect();
        let spread = |fe: &FeatureExtractor| {
            let z = fe.extract_features(&inputs).unwrap();
            let means = compute_mean_prototypes(&z, &labels);
            (0..labels.len())
                .map(|i| crate::numerics::sq_dist(z.row(i), &means[&labels[i]]))
                .sum::<f64>()
                / labels.len() as f64
        };
        let mut fe = FeatureExtractor::new(2, 16, 2, 9).unwrap();
        let mut p = two_class_protos(9);
        let before = spread(&fe);
        let cfg = PreservationConfig {
            lr_theta: 1e-2,
            steps_l1: 0,
            steps_l2: 3,
            ..Default::default()
        };
        dynamic_preservation_step(&refs, &[], &mut fe, &mut p, &BTreeSet::new(), &cfg).unwrap();
        let after = spread(&fe);
        assert!(after <= before, "{before} -> {after}");
    }
}

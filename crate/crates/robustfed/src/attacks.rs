//! Adversarial client behaviors: label flipping on local data, model
//! replacement boosting of submitted updates, and pure-random Byzantine
//! vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::Dataset;
use crate::params::ParamVector;
use crate::seeding::rng_for;

/// What an adversarial client does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Honest behavior (used for the no-attack scenario).
    None,
    /// Resample the labels of a random subset of the client's data.
    LabelFlip { fraction: f64 },
    /// Submit an i.i.d. Gaussian vector instead of a trained update.
    RandomGaussian { sigma: f64 },
}

/// Adversarial configuration for a federated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Scale submitted deltas by `beta = n / eta` (model replacement).
    pub boost: bool,
    /// Share of clients that are adversarial.
    pub byzantine_fraction: f64,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            boost: false,
            byzantine_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AttackKind::LabelFlip { fraction } = self.kind {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidSpec("label-flip fraction must be in [0, 1]".into()));
            }
        }
        if let AttackKind::RandomGaussian { sigma } = self.kind {
            if sigma < 0.0 {
                return Err(Error::InvalidSpec("gaussian sigma must be nonnegative".into()));
            }
        }
        if !(0.0..1.0).contains(&self.byzantine_fraction) {
            return Err(Error::InvalidSpec("byzantine_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Resample the labels of `floor(fraction * N)` uniformly chosen examples.
/// New labels are uniform over all `num_classes` classes, so a flipped label
/// may coincide with the original. Features are untouched.
pub fn flip_labels(data: &Dataset, fraction: f64, num_classes: usize, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidSpec("fraction must be in [0, 1]".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidSpec("need at least 2 classes to flip".into()));
    }
    let mut flipped = data.clone();
    let count = (fraction * data.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(flipped);
    }
    let mut rng = rng_for(seed, 0xF11, 0);
    // Partial Fisher-Yates: the first `count` slots form a uniform subset.
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    for &i in &indices[..count] {
        flipped.set_label(i, rng.gen_range(0..num_classes));
    }
    Ok(flipped)
}

/// Model replacement boosting: the transmitted update (in delta form) is
/// `beta * (v_adv - v_global)` with `beta = n / eta`.
pub fn boost_update(
    v_adv: &ParamVector,
    v_global: &ParamVector,
    n: usize,
    eta: f64,
) -> Result<ParamVector> {
    if eta <= 0.0 {
        return Err(Error::InvalidSpec("server eta must be positive".into()));
    }
    let beta = n as f64 / eta;
    v_adv.sub(v_global)?.scale(beta)
}

/// An i.i.d. zero-mean Gaussian vector with standard deviation `sigma`.
pub fn random_byzantine(d: usize, sigma: f64, seed: u64) -> Result<ParamVector> {
    if d == 0 {
        return Err(Error::EmptyVector);
    }
    let mut rng = rng_for(seed, 0xBAD, 0);
    ParamVector::new(
        (0..d)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{fedavg, UpdateSet};
    use crate::data::make_blobs;

    #[test]
    fn zero_fraction_leaves_dataset_unchanged() {
        let data = make_blobs(3, 2, 10, 2.0, 1).unwrap();
        let flipped = flip_labels(&data, 0.0, 3, 9).unwrap();
        assert_eq!(data, flipped);
    }

    #[test]
    fn flip_changes_exactly_the_selected_count() {
        let data = make_blobs(2, 2, 50, 2.0, 2).unwrap(); // 100 examples
        for fraction in [0.1, 0.25, 0.5, 0.99] {
            let flipped = flip_labels(&data, fraction, 2, 3).unwrap();
            let expected = (fraction * 100.0).floor() as usize;
            let differing = data
                .labels()
                .iter()
                .zip(flipped.labels())
                .filter(|(a, b)| a != b)
                .count();
            // Resampling can reproduce the original label, so differing
            // labels never exceed the selected count.
            assert!(differing <= expected, "fraction {fraction}");
            // Features are untouched.
            for i in 0..data.len() {
                assert_eq!(data.row(i), flipped.row(i));
            }
        }
    }

    #[test]
    fn full_flip_keeps_about_one_in_c_labels() {
        let data = make_blobs(10, 2, 1000, 2.0, 4).unwrap(); // N = 10000
        let flipped = flip_labels(&data, 1.0, 10, 5).unwrap();
        let same = data
            .labels()
            .iter()
            .zip(flipped.labels())
            .filter(|(a, b)| a == b)
            .count() as f64;
        let n = data.len() as f64;
        let p = 0.1;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (same - n * p).abs() < 3.0 * sigma,
            "{same} coincidences outside 3 sigma of {}",
            n * p
        );
    }

    #[test]
    fn flip_is_deterministic() {
        let data = make_blobs(4, 2, 25, 2.0, 6).unwrap();
        let a = flip_labels(&data, 0.7, 4, 11).unwrap();
        let b = flip_labels(&data, 0.7, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, flip_labels(&data, 0.7, 4, 12).unwrap());
    }

    #[test]
    fn boost_examples() {
        let global = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let adv = ParamVector::new(vec![1.0, 1.0]).unwrap();
        let boosted = boost_update(&adv, &global, 10, 1.0).unwrap();
        assert_eq!(boosted.as_slice(), &[10.0, 10.0]);

        // beta = n / eta = 200 at the reference client count.
        let boosted = boost_update(&adv, &global, 200, 1.0).unwrap();
        assert_eq!(boosted.as_slice(), &[200.0, 200.0]);

        let same = boost_update(&adv, &adv, 7, 0.5).unwrap();
        assert_eq!(same.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn boost_is_linear_in_the_delta() {
        // Exactly representable inputs keep the identities bit-level.
        let global = ParamVector::new(vec![1.0, -2.0]).unwrap();
        let a = ParamVector::new(vec![3.0, 2.0]).unwrap();
        let b = ParamVector::new(vec![5.0, -6.0]).unwrap();
        let n = 8;
        let eta = 1.0;
        let boost_a = boost_update(&a, &global, n, eta).unwrap();
        let boost_b = boost_update(&b, &global, n, eta).unwrap();
        // boost(a) + boost(b) == beta * ((a - g) + (b - g))
        let sum_deltas = a.sub(&global).unwrap().add(&b.sub(&global).unwrap()).unwrap();
        let combined = sum_deltas.scale(n as f64 / eta).unwrap();
        assert_eq!(boost_a.add(&boost_b).unwrap(), combined);
    }

    #[test]
    fn mean_aggregation_adopts_the_boosted_adversary() {
        // With mean aggregation, eta = 1, zero benign deltas and beta = n,
        // the next global model equals the adversary's parameters exactly.
        let n = 4usize;
        let global = ParamVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        let adv = ParamVector::new(vec![1.5, 3.0, -4.0]).unwrap();
        let mut deltas = vec![ParamVector::zeros(3).unwrap(); n - 1];
        deltas.push(boost_update(&adv, &global, n, 1.0).unwrap());
        let aggregated = fedavg(&UpdateSet::new(deltas).unwrap()).unwrap().aggregate;
        let next_global = global.add(&aggregated).unwrap();
        assert_eq!(next_global, adv);
    }

    #[test]
    fn random_byzantine_properties() {
        assert_eq!(
            random_byzantine(5, 0.0, 1).unwrap().as_slice(),
            &[0.0; 5]
        );
        let d = 100_000;
        let sigma = 2.0;
        let v = random_byzantine(d, sigma, 7).unwrap();
        let mean: f64 = v.as_slice().iter().sum::<f64>() / d as f64;
        let bound = 4.0 * sigma / (d as f64).sqrt();
        assert!(mean.abs() < bound, "sample mean {mean} outside {bound}");
        assert_eq!(v, random_byzantine(d, sigma, 7).unwrap());
        assert_ne!(v, random_byzantine(d, sigma, 8).unwrap());
    }

    #[test]
    fn spec_validation() {
        let mut spec = AttackSpec::none();
        assert!(spec.validate().is_ok());
        spec.byzantine_fraction = 1.0;
        assert!(spec.validate().is_err());
        spec.byzantine_fraction = 0.2;
        spec.kind = AttackKind::LabelFlip { fraction: 1.5 };
        assert!(spec.validate().is_err());
    }
}

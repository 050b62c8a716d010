//! Robust aggregation operators and the combinators that turn them into
//! Layerwise Cosine Aggregation.
//!
//! Four base rules are provided: FedAvg (mean), Krum (nearest-neighbor score
//! selection), Bulyan (mean of the lowest-Krum-score subset) and GeoMed (the
//! medoid). Each can be modified along three axes:
//!
//! * distance metric: squared Euclidean or cosine distance,
//! * median-norm clipping applied before scoring,
//! * layerwise application over a [`LayerPartition`], running the rule
//!   independently per block and concatenating the block results.
//!
//! The four named variants map onto [`AggregatorSpec`] as:
//!
//! | variant          | metric           | clip      | layerwise |
//! |------------------|------------------|-----------|-----------|
//! | original         | squared Euclidean| none      | no        |
//! | layerwise        | squared Euclidean| none      | yes       |
//! | cosine           | cosine           | median cap| no        |
//! | layerwise cosine | cosine           | median cap| yes       |
//!
//! Ties are always broken by lowest client index, and distance sums are
//! accumulated in fixed index order, so results are reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{concat, project, DistanceMetric, LayerPartition, ParamVector};

/// Base aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseRule {
    FedAvg,
    Krum,
    Bulyan,
    GeoMed,
}

impl BaseRule {
    pub fn name(&self) -> &'static str {
        match self {
            BaseRule::FedAvg => "fedavg",
            BaseRule::Krum => "krum",
            BaseRule::Bulyan => "bulyan",
            BaseRule::GeoMed => "geomed",
        }
    }
}

/// Norm clipping applied before an operator runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    None,
    /// Rescale every update whose norm exceeds the lower median of the norms
    /// down to that median.
    MedianCap,
}

/// The named operator variants studied throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Layerwise,
    Cosine,
    LayerwiseCosine,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Original,
        Variant::Layerwise,
        Variant::Cosine,
        Variant::LayerwiseCosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Layerwise => "layerwise",
            Variant::Cosine => "cosine",
            Variant::LayerwiseCosine => "layerwise_cosine",
        }
    }
}

/// Declarative description of an aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub base: BaseRule,
    pub metric: DistanceMetric,
    pub clip: ClipMode,
    pub layerwise: bool,
    /// Expected number of Byzantine updates; a hyperparameter, never inferred.
    pub f: usize,
    /// Bulyan selection-set size.
    pub bulyan_m: usize,
    /// Optional coordinate-wise trimmed mean over the Bulyan selection set
    /// instead of the plain mean. Off by default.
    pub bulyan_trimmed: bool,
}

impl AggregatorSpec {
    /// Spec for a base rule in one of the four named variants, with `f`
    /// expected Byzantine updates and the default Bulyan selection size.
    pub fn variant(base: BaseRule, variant: Variant, f: usize) -> Self {
        let (metric, clip, layerwise) = match variant {
            Variant::Original => (DistanceMetric::SquaredEuclidean, ClipMode::None, false),
            Variant::Layerwise => (DistanceMetric::SquaredEuclidean, ClipMode::None, true),
            Variant::Cosine => (DistanceMetric::Cosine, ClipMode::MedianCap, false),
            Variant::LayerwiseCosine => (DistanceMetric::Cosine, ClipMode::MedianCap, true),
        };
        AggregatorSpec {
            base,
            metric,
            clip,
            layerwise,
            f,
            bulyan_m: DEFAULT_BULYAN_M,
            bulyan_trimmed: false,
        }
    }

    /// Structural validation independent of the update-set size.
    ///
    /// Cosine distance is magnitude-blind, so it must always be paired with
    /// median clipping: two updates with drastically different norms would
    /// otherwise be scored as similar.
    pub fn validate(&self) -> Result<()> {
        if self.metric == DistanceMetric::Cosine && self.clip != ClipMode::MedianCap {
            return Err(Error::InvalidSpec(
                "cosine metric requires median clipping".into(),
            ));
        }
        if self.base == BaseRule::Bulyan && self.bulyan_m == 0 {
            return Err(Error::InvalidSpec("bulyan_m must be positive".into()));
        }
        Ok(())
    }
}

/// Default Bulyan selection-set size.
pub const DEFAULT_BULYAN_M: usize = 5;

/// A set of `n` updates of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSet {
    updates: Vec<ParamVector>,
}

impl UpdateSet {
    pub fn new(updates: Vec<ParamVector>) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::EmptyUpdateSet);
        }
        let d = updates[0].dim();
        for u in &updates[1..] {
            if u.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: u.dim(),
                });
            }
        }
        Ok(Self { updates })
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.updates[0].dim()
    }

    pub fn vectors(&self) -> &[ParamVector] {
        &self.updates
    }

    pub fn get(&self, i: usize) -> &ParamVector {
        &self.updates[i]
    }

    /// Project every update onto block `j` of `p`.
    pub fn project(&self, p: &LayerPartition, j: usize) -> Result<UpdateSet> {
        let projected = self
            .updates
            .iter()
            .map(|v| project(v, p, j))
            .collect::<Result<Vec<_>>>()?;
        UpdateSet::new(projected)
    }
}

/// Result of an aggregation call: the aggregate vector, which input indices
/// (zero-based) were selected, and named diagnostics such as scores, clip
/// thresholds and per-block winners.
#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub aggregate: ParamVector,
    pub selected_indices: Vec<usize>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl AggregationOutcome {
    fn new(aggregate: ParamVector, selected_indices: Vec<usize>) -> Self {
        Self {
            aggregate,
            selected_indices,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// Result of median clipping: the clipped set plus the threshold.
#[derive(Debug, Clone)]
pub struct ClippedSet {
    pub updates: UpdateSet,
    /// Lower median of the input norms.
    pub threshold: f64,
}

/// Clip every update to the lower median of the norms.
///
/// The threshold is the sorted norm at index `(n - 1) / 2`. Updates above it
/// are rescaled to the threshold; updates at or below it pass through
/// unchanged (bit-exactly). Zero-norm updates are rejected because a zero
/// vector has no direction to rescale.
pub fn median_clip(u: &UpdateSet) -> Result<ClippedSet> {
    let mut norms = Vec::with_capacity(u.len());
    for (index, v) in u.vectors().iter().enumerate() {
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm { index });
        }
        norms.push(n);
    }
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[(u.len() - 1) / 2];

    let clipped = u
        .vectors()
        .iter()
        .zip(&norms)
        .map(|(v, &n)| {
            if n > threshold {
                v.scale(threshold / n)
            } else {
                Ok(v.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClippedSet {
        updates: UpdateSet::new(clipped)?,
        threshold,
    })
}

/// Pairwise distance matrix in fixed index order.
fn distance_matrix(u: &UpdateSet, metric: DistanceMetric) -> Result<Vec<Vec<f64>>> {
    let n = u.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(u.get(i), u.get(j))?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok(dist)
}

/// Krum score of every update: the sum of distances to its `n - f - 2`
/// nearest other updates.
fn krum_scores(u: &UpdateSet, f: usize, metric: DistanceMetric) -> Result<Vec<f64>> {
    let n = u.len();
    if n < f + 3 {
        return Err(Error::InsufficientClients { n, f });
    }
    let neighbors = n - f - 2;
    let dist = distance_matrix(u, metric)?;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = 0.0;
        for &d in &others[..neighbors] {
            s += d;
        }
        scores.push(s);
    }
    Ok(scores)
}

/// Index of the minimum value, lowest index on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `m` smallest values in ascending value order, lowest index
/// first among equal values.
fn smallest_indices(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

/// Krum: return the update with the minimal sum of distances to its
/// `n - f - 2` nearest neighbors under `metric`.
pub fn krum(u: &UpdateSet, f: usize, metric: DistanceMetric) -> Result<AggregationOutcome> {
    let scores = krum_scores(u, f, metric)?;
    let winner = argmin(&scores);
    let mut outcome = AggregationOutcome::new(u.get(winner).clone(), vec![winner]);
    outcome
        .diagnostics
        .insert("krum_score".into(), scores[winner]);
    Ok(outcome)
}

/// Bulyan (plain-mean form): average the `m` updates with the lowest Krum
/// scores. With `trimmed` set, a coordinate-wise trimmed mean over the
/// selection set replaces the plain mean: the `min(f, (m - 1) / 2)` largest
/// and smallest values of each coordinate are dropped before averaging.
pub fn bulyan(
    u: &UpdateSet,
    f: usize,
    m: usize,
    metric: DistanceMetric,
    trimmed: bool,
) -> Result<AggregationOutcome> {
    if u.len() < m {
        return Err(Error::SelectionTooLarge { m, n: u.len() });
    }
    let scores = krum_scores(u, f, metric)?;
    let selected = smallest_indices(&scores, m);
    let chosen: Vec<ParamVector> = selected.iter().map(|&i| u.get(i).clone()).collect();
    let aggregate = if trimmed {
        let trim = f.min((m - 1) / 2);
        trimmed_mean(&chosen, trim)?
    } else {
        mean(&chosen)?
    };
    let mut outcome = AggregationOutcome::new(aggregate, selected.clone());
    outcome
        .diagnostics
        .insert("bulyan_worst_selected_score".into(), scores[*selected.last().unwrap()]);
    Ok(outcome)
}

/// GeoMed: return the medoid, the input minimizing the sum of distances to
/// all inputs under `metric`.
pub fn geomed(u: &UpdateSet, metric: DistanceMetric) -> Result<AggregationOutcome> {
    let dist = distance_matrix(u, metric)?;
    let sums: Vec<f64> = dist
        .iter()
        .map(|row| {
            let mut s = 0.0;
            for &d in row {
                s += d;
            }
            s
        })
        .collect();
    let winner = argmin(&sums);
    let mut outcome = AggregationOutcome::new(u.get(winner).clone(), vec![winner]);
    outcome
        .diagnostics
        .insert("geomed_score".into(), sums[winner]);
    Ok(outcome)
}

/// FedAvg: the coordinate-wise arithmetic mean of all updates.
pub fn fedavg(u: &UpdateSet) -> Result<AggregationOutcome> {
    Ok(AggregationOutcome::new(mean(u.vectors())?, Vec::new()))
}

fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
    let d = vectors[0].dim();
    let mut acc = vec![0.0; d];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    ParamVector::new(acc.into_iter().map(|x| x / n).collect())
}

fn trimmed_mean(vectors: &[ParamVector], trim: usize) -> Result<ParamVector> {
    let d = vectors[0].dim();
    let kept = vectors.len() - 2 * trim;
    let mut out = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(vectors.len());
    for coord in 0..d {
        column.clear();
        column.extend(vectors.iter().map(|v| v.as_slice()[coord]));
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = 0.0;
        for &x in &column[trim..trim + kept] {
            s += x;
        }
        out.push(s / kept as f64);
    }
    ParamVector::new(out)
}

/// Run `spec`'s base rule (no clipping, no layerwise wrapping) on `u`.
fn run_base(u: &UpdateSet, spec: &AggregatorSpec) -> Result<AggregationOutcome> {
    match spec.base {
        BaseRule::FedAvg => fedavg(u),
        BaseRule::Krum => krum(u, spec.f, spec.metric),
        BaseRule::Bulyan => bulyan(u, spec.f, spec.bulyan_m, spec.metric, spec.bulyan_trimmed),
        BaseRule::GeoMed => geomed(u, spec.metric),
    }
}

/// Clip (if requested) then run the base rule, recording the threshold.
fn run_scoped(u: &UpdateSet, spec: &AggregatorSpec) -> Result<AggregationOutcome> {
    match spec.clip {
        ClipMode::None => run_base(u, spec),
        ClipMode::MedianCap => {
            let clipped = median_clip(u)?;
            let mut outcome = run_base(&clipped.updates, spec)?;
            outcome
                .diagnostics
                .insert("clip_threshold".into(), clipped.threshold);
            Ok(outcome)
        }
    }
}

/// Layerwise application: run the (clipped) base rule independently per
/// block of `p` and concatenate the block aggregates in partition order.
///
/// Clipping happens per block on the projected vectors, so the
/// norm-equalization argument that justifies cosine ranking holds within
/// each sub-problem. Diagnostics record the winning index per block for
/// selection rules; `selected_indices` is the deduplicated union of block
/// winners in ascending order.
pub fn layerwise(u: &UpdateSet, p: &LayerPartition, spec: &AggregatorSpec) -> Result<AggregationOutcome> {
    p.check_dim(u.dim())?;
    let mut blocks = Vec::with_capacity(p.num_blocks());
    let mut selected = Vec::new();
    let mut diagnostics = BTreeMap::new();
    for j in 0..p.num_blocks() {
        let block_set = u.project(p, j)?;
        let outcome = run_scoped(&block_set, spec)?;
        for (key, value) in &outcome.diagnostics {
            diagnostics.insert(format!("block{j}_{key}"), *value);
        }
        for (slot, &idx) in outcome.selected_indices.iter().enumerate() {
            diagnostics.insert(format!("block{j}_selected{slot}"), idx as f64);
            if !selected.contains(&idx) {
                selected.push(idx);
            }
        }
        blocks.push(outcome.aggregate);
    }
    selected.sort_unstable();
    let mut outcome = AggregationOutcome::new(concat(&blocks)?, selected);
    outcome.diagnostics = diagnostics;
    Ok(outcome)
}

/// Dispatch an [`AggregatorSpec`] on an update set: optional median clipping
/// (global, or per block under layerwise), the base rule under the spec's
/// metric, and the layerwise wrapper.
///
/// The paper regime `f < n/2 - 1` is checked here and surfaced as the
/// diagnostic `f_regime_ok` (1 inside the regime, 0 outside); running
/// outside the regime is allowed.
pub fn aggregate(spec: &AggregatorSpec, p: &LayerPartition, u: &UpdateSet) -> Result<AggregationOutcome> {
    spec.validate()?;
    let mut outcome = if spec.layerwise {
        layerwise(u, p, spec)?
    } else {
        run_scoped(u, spec)?
    };
    let regime_ok = (spec.f as f64) < u.len() as f64 / 2.0 - 1.0;
    outcome
        .diagnostics
        .insert("f_regime_ok".into(), if regime_ok { 1.0 } else { 0.0 });
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec()).unwrap()
    }

    fn set_1d(values: &[f64]) -> UpdateSet {
        UpdateSet::new(values.iter().map(|&v| pv(&[v])).collect()).unwrap()
    }

    /// Exhaustive re-scoring of Krum from the definition, with no shared code
    /// with the implementation path.
    fn brute_force_krum_scores(u: &UpdateSet, f: usize, metric: DistanceMetric) -> Vec<f64> {
        let n = u.len();
        let q = n - f - 2;
        (0..n)
            .map(|i| {
                let mut dists: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| metric.distance(u.get(i), u.get(j)).unwrap())
                    .collect();
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                dists[..q].iter().sum()
            })
            .collect()
    }

    fn brute_force_argmin(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn median_clip_examples() {
        // Lower median of {1, 2, 3} is 2: [3] is rescaled to norm 2.
        let clipped = median_clip(&set_1d(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(clipped.threshold, 2.0);
        assert_eq!(clipped.updates.get(0).as_slice(), &[1.0]);
        assert_eq!(clipped.updates.get(1).as_slice(), &[2.0]);
        assert_eq!(clipped.updates.get(2).as_slice(), &[2.0]);

        let identical = set_1d(&[1.5, 1.5, 1.5]);
        let clipped = median_clip(&identical).unwrap();
        assert_eq!(clipped.updates, identical);

        let single = set_1d(&[4.0]);
        let clipped = median_clip(&single).unwrap();
        assert_eq!(clipped.threshold, 4.0);
        assert_eq!(clipped.updates, single);

        assert!(median_clip(&set_1d(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn median_clip_uses_lower_median_for_even_n() {
        // Sorted norms {1, 2, 3, 4}: lower median is index (4-1)/2 = 1 -> 2.
        let clipped = median_clip(&set_1d(&[4.0, 1.0, 3.0, 2.0])).unwrap();
        assert_eq!(clipped.threshold, 2.0);
    }

    #[test]
    fn krum_all_identical_picks_lowest_index() {
        let u = set_1d(&[2.0, 2.0, 2.0, 2.0]);
        let outcome = krum(&u, 1, DistanceMetric::SquaredEuclidean).unwrap();
        assert_eq!(outcome.selected_indices, vec![0]);
        assert_eq!(outcome.diagnostics["krum_score"], 0.0);
    }

    #[test]
    fn krum_rejects_outlier() {
        let u = set_1d(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let outcome = krum(&u, 1, DistanceMetric::SquaredEuclidean).unwrap();
        let oracle = brute_force_krum_scores(&u, 1, DistanceMetric::SquaredEuclidean);
        assert_eq!(outcome.selected_indices[0], brute_force_argmin(&oracle));
        // The winner must be an interior point, never the outlier.
        assert_ne!(outcome.aggregate.as_slice(), &[10.0]);
    }

    #[test]
    fn krum_requires_enough_clients() {
        let u = set_1d(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            krum(&u, 2, DistanceMetric::SquaredEuclidean),
            Err(Error::InsufficientClients { n: 4, f: 2 })
        ));
    }

    #[test]
    fn bulyan_matches_brute_force_on_outlier_set() {
        let u = set_1d(&[0.0, 1.0, 2.0, 3.0, 100.0]);
        let outcome = bulyan(&u, 1, 3, DistanceMetric::SquaredEuclidean, false).unwrap();
        let scores = brute_force_krum_scores(&u, 1, DistanceMetric::SquaredEuclidean);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let expected: f64 = order[..3]
            .iter()
            .map(|&i| u.get(i).as_slice()[0])
            .sum::<f64>()
            / 3.0;
        assert_eq!(outcome.aggregate.as_slice(), &[expected]);
        assert_eq!(outcome.selected_indices, order[..3].to_vec());
    }

    #[test]
    fn bulyan_of_identical_updates_is_that_update() {
        let u = set_1d(&[7.0; 6]);
        let outcome = bulyan(&u, 1, 5, DistanceMetric::SquaredEuclidean, false).unwrap();
        assert_eq!(outcome.aggregate.as_slice(), &[7.0]);
    }

    #[test]
    fn bulyan_errors() {
        let u = set_1d(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            bulyan(&u, 0, 5, DistanceMetric::SquaredEuclidean, false),
            Err(Error::SelectionTooLarge { m: 5, n: 3 })
        ));
        let u = set_1d(&[1.0, 2.0, 3.0, 4.0]);
        assert!(bulyan(&u, 2, 3, DistanceMetric::SquaredEuclidean, false).is_err());
    }

    #[test]
    fn bulyan_trimmed_mean_drops_extremes() {
        let u = set_1d(&[0.0, 1.0, 2.0, 3.0, 100.0]);
        // m = 5 selects everything; trim = min(1, 2) = 1 drops 0 and 100.
        let outcome = bulyan(&u, 1, 5, DistanceMetric::SquaredEuclidean, true).unwrap();
        assert_eq!(outcome.aggregate.as_slice(), &[2.0]);
    }

    #[test]
    fn geomed_examples() {
        let single = set_1d(&[3.0]);
        let outcome = geomed(&single, DistanceMetric::SquaredEuclidean).unwrap();
        assert_eq!(outcome.aggregate.as_slice(), &[3.0]);

        // Sums of squared distances for {0, 1, 10}: 101, 82, 181.
        let u = set_1d(&[0.0, 1.0, 10.0]);
        let outcome = geomed(&u, DistanceMetric::SquaredEuclidean).unwrap();
        assert_eq!(outcome.selected_indices, vec![1]);
        assert_eq!(outcome.diagnostics["geomed_score"], 82.0);

        let ties = set_1d(&[5.0, 5.0, 5.0]);
        let outcome = geomed(&ties, DistanceMetric::SquaredEuclidean).unwrap();
        assert_eq!(outcome.selected_indices, vec![0]);
    }

    #[test]
    fn fedavg_examples() {
        let u = set_1d(&[0.0, 2.0]);
        assert_eq!(fedavg(&u).unwrap().aggregate.as_slice(), &[1.0]);

        let u = UpdateSet::new(vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[-1.0, -1.0])]).unwrap();
        assert_eq!(fedavg(&u).unwrap().aggregate.as_slice(), &[0.0, 0.0]);

        let u = set_1d(&[4.25; 5]);
        assert_eq!(fedavg(&u).unwrap().aggregate.as_slice(), &[4.25]);
    }

    #[test]
    fn layerwise_single_block_is_bit_exact_base() {
        let mut rng = rng_for(11, 0, 0);
        for _ in 0..50 {
            let n = rng.gen_range(4..9);
            let d = rng.gen_range(1..7);
            let updates: Vec<ParamVector> = (0..n)
                .map(|_| pv(&(0..d).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>()))
                .collect();
            let u = UpdateSet::new(updates).unwrap();
            let p = LayerPartition::single(d).unwrap();
            let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 1);
            let base = krum(&u, 1, DistanceMetric::SquaredEuclidean).unwrap();
            let wrapped = layerwise(&u, &p, &spec).unwrap();
            assert_eq!(wrapped.aggregate, base.aggregate);
            assert_eq!(wrapped.selected_indices, base.selected_indices);
        }
    }

    #[test]
    fn layerwise_splices_different_block_winners() {
        // Block 1: client 0 sits in the middle of the crowd; client 3 is the
        // outlier. Block 2: roles are reversed by construction, so Krum must
        // pick client 0's first block and client 1's second block.
        let updates = vec![
            pv(&[0.0, 9.0]),
            pv(&[5.0, 0.05]),
            pv(&[0.2, 0.1]),
            pv(&[0.1, 0.2]),
            pv(&[9.0, 0.0]),
        ];
        let u = UpdateSet::new(updates).unwrap();
        let p = LayerPartition::new(vec![1, 1]).unwrap();
        let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Layerwise, 1);

        // Brute-force per-block winners.
        let mut expected_blocks = Vec::new();
        for j in 0..2 {
            let block = u.project(&p, j).unwrap();
            let scores = brute_force_krum_scores(&block, 1, DistanceMetric::SquaredEuclidean);
            expected_blocks.push(block.get(brute_force_argmin(&scores)).clone());
        }
        let expected = concat(&expected_blocks).unwrap();

        let outcome = layerwise(&u, &p, &spec).unwrap();
        assert_eq!(outcome.aggregate, expected);
        // Crafted so the two blocks have different winners.
        assert!(outcome.selected_indices.len() >= 2);
    }

    #[test]
    fn layerwise_identical_clients_any_partition() {
        let v = pv(&[1.0, 2.0, 3.0, 4.0]);
        let u = UpdateSet::new(vec![v.clone(); 5]).unwrap();
        for blocks in [vec![4], vec![1, 3], vec![2, 2], vec![1, 1, 1, 1]] {
            let p = LayerPartition::new(blocks).unwrap();
            let spec = AggregatorSpec::variant(BaseRule::GeoMed, Variant::Layerwise, 1);
            let outcome = layerwise(&u, &p, &spec).unwrap();
            assert_eq!(outcome.aggregate, v);
        }
    }

    #[test]
    fn aggregate_dispatch_matches_plain_krum() {
        let u = set_1d(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let p = LayerPartition::single(1).unwrap();
        let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 1);
        let direct = krum(&u, 1, DistanceMetric::SquaredEuclidean).unwrap();
        let dispatched = aggregate(&spec, &p, &u).unwrap();
        assert_eq!(dispatched.aggregate, direct.aggregate);
        assert_eq!(dispatched.selected_indices, direct.selected_indices);
    }

    #[test]
    fn cosine_krum_agrees_with_euclidean_on_equal_norms() {
        let mut rng = rng_for(23, 0, 0);
        for _ in 0..50 {
            let n = rng.gen_range(5..10);
            let d = rng.gen_range(2..6);
            let vectors: Vec<ParamVector> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let v = pv(&raw);
                    v.scale(2.0 / v.norm()).unwrap()
                })
                .collect();
            let u = UpdateSet::new(vectors).unwrap();
            let p = LayerPartition::single(d).unwrap();
            let original = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 1);
            let cosine = AggregatorSpec::variant(BaseRule::Krum, Variant::Cosine, 1);
            let a = aggregate(&original, &p, &u).unwrap();
            let b = aggregate(&cosine, &p, &u).unwrap();
            assert_eq!(a.selected_indices, b.selected_indices);
        }
    }

    #[test]
    fn cosine_geomed_after_clipping_picks_majority_axis() {
        // Two of three directions lie on the x-axis, so the medoid under
        // cosine distance must be one of them.
        let u = UpdateSet::new(vec![pv(&[1.0, 0.0]), pv(&[2.0, 0.0]), pv(&[0.0, 3.0])]).unwrap();
        let p = LayerPartition::single(2).unwrap();
        let spec = AggregatorSpec::variant(BaseRule::GeoMed, Variant::Cosine, 0);
        let outcome = aggregate(&spec, &p, &u).unwrap();
        assert!(outcome.selected_indices[0] < 2);
        assert_eq!(outcome.aggregate.as_slice()[1], 0.0);
    }

    #[test]
    fn cosine_without_clipping_is_rejected() {
        let spec = AggregatorSpec {
            base: BaseRule::Krum,
            metric: DistanceMetric::Cosine,
            clip: ClipMode::None,
            layerwise: false,
            f: 1,
            bulyan_m: 5,
            bulyan_trimmed: false,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn regime_diagnostic_flags_large_f() {
        let u = set_1d(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        let p = LayerPartition::single(1).unwrap();
        // f = 2 < 8/2 - 1 = 3: inside the regime.
        let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 2);
        assert_eq!(aggregate(&spec, &p, &u).unwrap().diagnostics["f_regime_ok"], 1.0);
        // f = 3 is not < 3: outside, but still runs (8 >= 3 + 3).
        let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 3);
        assert_eq!(aggregate(&spec, &p, &u).unwrap().diagnostics["f_regime_ok"], 0.0);
    }

    proptest! {
        /// Krum and GeoMed aggregates are always one of the (possibly
        /// clipped) inputs.
        #[test]
        fn selection_membership(
            raw in proptest::collection::vec(
                proptest::collection::vec(0.1f64..10.0, 3),
                5..10,
            ),
            use_cosine in proptest::bool::ANY,
        ) {
            let u = UpdateSet::new(
                raw.into_iter().map(|v| ParamVector::new(v).unwrap()).collect(),
            ).unwrap();
            let p = LayerPartition::single(3).unwrap();
            let variant = if use_cosine { Variant::Cosine } else { Variant::Original };
            for base in [BaseRule::Krum, BaseRule::GeoMed] {
                let spec = AggregatorSpec::variant(base, variant, 1);
                let outcome = aggregate(&spec, &p, &u).unwrap();
                let candidates = match spec.clip {
                    ClipMode::None => u.clone(),
                    ClipMode::MedianCap => median_clip(&u).unwrap().updates,
                };
                prop_assert!(candidates.vectors().contains(&outcome.aggregate));
            }
        }

        /// Permuting client order permutes the selection consistently and
        /// leaves the aggregate unchanged (distinct inputs, so ties cannot
        /// mask a mismatch).
        #[test]
        fn permutation_equivariance(
            seed in 0u64..5000,
        ) {
            let mut rng = rng_for(seed, 77, 0);
            let n = rng.gen_range(5..9);
            let d = rng.gen_range(1..5);
            let vectors: Vec<ParamVector> = (0..n)
                .map(|i| {
                    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();
                    v[0] += i as f64 * 1e-3; // ensure all-distinct inputs
                    ParamVector::new(v).unwrap()
                })
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted: Vec<ParamVector> = perm.iter().map(|&i| vectors[i].clone()).collect();
            let u = UpdateSet::new(vectors).unwrap();
            let up = UpdateSet::new(permuted).unwrap();
            for base in [BaseRule::Krum, BaseRule::GeoMed] {
                let spec = AggregatorSpec::variant(base, Variant::Original, 1);
                let p = LayerPartition::single(d).unwrap();
                let a = aggregate(&spec, &p, &u).unwrap();
                let b = aggregate(&spec, &p, &up).unwrap();
                prop_assert_eq!(&a.aggregate, &b.aggregate);
                // perm maps original position -> new position.
                let mapped: Vec<usize> = a.selected_indices
                    .iter()
                    .map(|&i| perm.iter().position(|&x| x == i).unwrap())
                    .collect();
                prop_assert_eq!(mapped, b.selected_indices);
            }
        }

        /// After median clipping, no norm exceeds the threshold and at least
        /// half the vectors pass through unchanged.
        #[test]
        fn clip_safety(
            raw in proptest::collection::vec(
                proptest::collection::vec(0.01f64..8.0, 2),
                1..12,
            ),
        ) {
            let u = UpdateSet::new(
                raw.into_iter().map(|v| ParamVector::new(v).unwrap()).collect(),
            ).unwrap();
            let clipped = median_clip(&u).unwrap();
            let tau = clipped.threshold;
            let mut unchanged = 0;
            for (before, after) in u.vectors().iter().zip(clipped.updates.vectors()) {
                prop_assert!(after.norm() <= tau * (1.0 + 1e-12));
                if before == after {
                    unchanged += 1;
                }
            }
            prop_assert!(unchanged >= (u.len() + 1) / 2);
        }
    }
}

//! Monte-Carlo estimation of the two resilience conditions: the angle bound
//! between the rule's expected output and the true gradient, and finite
//! moment ratios of the output against the benign distribution.
//!
//! Per trial, `n - f` benign vectors are drawn i.i.d. as `g + sigma * N(0, I)`
//! and `f` Byzantine vectors from the configured generator (placed after the
//! benign vectors); the rule under test aggregates them. Across trials the
//! estimator reports the empirical mean output, its inner product with `g`,
//! the angle `alpha_hat` between them, and the moment ratios
//! `E|F|^r / E|G|^r` for `r` in {2, 3, 4}.
//!
//! The unbounded-moment side of the second condition is not falsifiable from
//! finite samples; the finite moment-ratio report is the honest desk-scale
//! surrogate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregatorSpec, UpdateSet};
use crate::error::{Error, Result};
use crate::params::{LayerPartition, ParamVector};
use crate::seeding::rng_for;

/// Generator for the `f` Byzantine vectors of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ByzantineGenerator {
    /// i.i.d. zero-mean Gaussian entries with the given standard deviation.
    RandomGaussian { sigma: f64 },
    /// The benign mean reflected through the origin and rescaled, a crude
    /// directed attack for stress tests.
    ScaledOpposite { factor: f64 },
}

impl ByzantineGenerator {
    fn draw(&self, g: &ParamVector, rng: &mut impl Rng) -> Result<ParamVector> {
        match *self {
            ByzantineGenerator::RandomGaussian { sigma } => ParamVector::new(
                (0..g.dim())
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            ByzantineGenerator::ScaledOpposite { factor } => g.scale(-factor),
        }
    }
}

/// A resilience experiment: `n` updates of dimension `d`, of which `f` are
/// Byzantine, with benign updates distributed as `g + sigma * N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceScenario {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub g: ParamVector,
    pub sigma: f64,
    pub byz: ByzantineGenerator,
    pub trials: usize,
}

impl ResilienceScenario {
    pub fn validate(&self) -> Result<()> {
        if self.f >= self.n {
            return Err(Error::InvalidScenario(format!(
                "need at least one benign vector: n = {}, f = {}",
                self.n, self.f
            )));
        }
        if self.g.dim() != self.d {
            return Err(Error::InvalidScenario(format!(
                "g has dimension {} but d = {}",
                self.g.dim(),
                self.d
            )));
        }
        if self.g.norm() == 0.0 {
            return Err(Error::InvalidScenario("g must be nonzero".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidScenario("sigma must be nonnegative".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidScenario("trials must be positive".into()));
        }
        Ok(())
    }
}

/// Empirical moment ratios `E|F|^r / E|G|^r` for `r` in {2, 3, 4}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRatios {
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
}

/// Monte-Carlo estimate of the resilience quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceEstimate {
    pub mean_output: ParamVector,
    /// `<mean_output, g>`.
    pub inner_product: f64,
    pub inner_product_stderr: f64,
    /// Angle between the mean output and `g`, in radians.
    pub alpha_hat: f64,
    /// Batch-means standard error of `alpha_hat`.
    pub alpha_hat_stderr: f64,
    /// Per-block angles for layerwise specs, in partition order; empty
    /// otherwise.
    pub per_layer_alpha: Vec<f64>,
    /// Angle of each contiguous trial batch's mean output, the basis of
    /// `alpha_hat_stderr` and of paired comparisons between rules run on
    /// common random numbers.
    pub batch_alpha: Vec<f64>,
    pub moment_ratios: MomentRatios,
    pub moment_ratio_stderrs: MomentRatios,
    pub trials: usize,
}

impl ResilienceEstimate {
    /// The first resilience condition, evaluated with this estimate's own
    /// angle: `<EF, g> >= (1 - sin alpha_hat) * |g|^2`.
    pub fn condition_i_holds(&self, g: &ParamVector) -> bool {
        let g2 = g.norm() * g.norm();
        self.inner_product >= (1.0 - self.alpha_hat.sin()) * g2
    }
}

/// Number of contiguous batches used for batch-means standard errors.
const STDERR_BATCHES: usize = 20;

fn dot(a: &ParamVector, b: &ParamVector) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        acc += x * y;
    }
    acc
}

fn angle_between(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEstimate(
            "mean output has zero norm; the angle to g is undefined".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

fn sample_stderr(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Run the Monte-Carlo estimator for `spec` under `scenario`.
pub fn estimate(
    scenario: &ResilienceScenario,
    spec: &AggregatorSpec,
    p: &LayerPartition,
    seed: u64,
) -> Result<ResilienceEstimate> {
    estimate_with_batches(scenario, spec, p, seed, STDERR_BATCHES)
}

/// As [`estimate`] with an explicit batch count for the batch-means standard
/// errors. Paired comparisons gain statistical power from more batches.
pub fn estimate_with_batches(
    scenario: &ResilienceScenario,
    spec: &AggregatorSpec,
    p: &LayerPartition,
    seed: u64,
    stderr_batches: usize,
) -> Result<ResilienceEstimate> {
    scenario.validate()?;
    spec.validate()?;
    p.check_dim(scenario.d)?;

    let trials = scenario.trials;
    let benign_count = scenario.n - scenario.f;
    let mut sum_output = vec![0.0; scenario.d];
    let mut ip_per_trial = Vec::with_capacity(trials);
    let mut out_moments = [0.0f64; 3]; // E|F|^r accumulators, r = 2, 3, 4
    let mut benign_moments = [0.0f64; 3];
    let mut outputs_for_batches: Vec<ParamVector> = Vec::with_capacity(trials);
    let mut out_moment_batches: Vec<[f64; 3]> = Vec::with_capacity(trials);

    for trial in 0..trials {
        let mut rng = rng_for(seed, 0x51A, trial as u64);
        let mut updates = Vec::with_capacity(scenario.n);
        for _ in 0..benign_count {
            let v = ParamVector::new(
                scenario
                    .g
                    .as_slice()
                    .iter()
                    .map(|&gi| gi + scenario.sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )?;
            let norm = v.norm();
            for (r, acc) in benign_moments.iter_mut().enumerate() {
                *acc += norm.powi(r as i32 + 2);
            }
            updates.push(v);
        }
        for _ in 0..scenario.f {
            updates.push(scenario.byz.draw(&scenario.g, &mut rng)?);
        }
        let outcome = aggregate(spec, p, &UpdateSet::new(updates)?)?;
        let out = outcome.aggregate;
        for (acc, &x) in sum_output.iter_mut().zip(out.as_slice()) {
            *acc += x;
        }
        ip_per_trial.push(dot(&out, &scenario.g));
        let norm = out.norm();
        let mut trial_moments = [0.0f64; 3];
        for r in 0..3 {
            let m = norm.powi(r as i32 + 2);
            out_moments[r] += m;
            trial_moments[r] = m;
        }
        out_moment_batches.push(trial_moments);
        outputs_for_batches.push(out);
    }

    let mean_output = ParamVector::new(
        sum_output.iter().map(|&s| s / trials as f64).collect(),
    )?;
    let inner_product = dot(&mean_output, &scenario.g);
    let alpha_hat = angle_between(&mean_output, &scenario.g)?;

    // Batch-means standard errors over contiguous trial batches.
    let batches = stderr_batches.max(1).min(trials);
    let mut batch_alphas = Vec::with_capacity(batches);
    let mut batch_ratios: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for b in 0..batches {
        let lo = b * trials / batches;
        let hi = (b + 1) * trials / batches;
        let mut acc = vec![0.0; scenario.d];
        let mut moment_acc = [0.0f64; 3];
        for t in lo..hi {
            for (a, &x) in acc.iter_mut().zip(outputs_for_batches[t].as_slice()) {
                *a += x;
            }
            for r in 0..3 {
                moment_acc[r] += out_moment_batches[t][r];
            }
        }
        let count = (hi - lo) as f64;
        let batch_mean = ParamVector::new(acc.iter().map(|&s| s / count).collect())?;
        if let Ok(a) = angle_between(&batch_mean, &scenario.g) {
            batch_alphas.push(a);
        }
        let benign_mean_moment = |r: usize| benign_moments[r] / (trials * benign_count) as f64;
        for r in 0..3 {
            batch_ratios[r].push(moment_acc[r] / count / benign_mean_moment(r));
        }
    }

    let benign_mean = |r: usize| benign_moments[r] / (trials * benign_count) as f64;
    let out_mean = |r: usize| out_moments[r] / trials as f64;
    let moment_ratios = MomentRatios {
        r2: out_mean(0) / benign_mean(0),
        r3: out_mean(1) / benign_mean(1),
        r4: out_mean(2) / benign_mean(2),
    };
    let moment_ratio_stderrs = MomentRatios {
        r2: sample_stderr(&batch_ratios[0]),
        r3: sample_stderr(&batch_ratios[1]),
        r4: sample_stderr(&batch_ratios[2]),
    };

    let per_layer_alpha = if spec.layerwise {
        (0..p.num_blocks())
            .map(|j| {
                let mo = crate::params::project(&mean_output, p, j)?;
                let gj = crate::params::project(&scenario.g, p, j)?;
                angle_between(&mo, &gj)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(ResilienceEstimate {
        mean_output,
        inner_product,
        inner_product_stderr: sample_stderr(&ip_per_trial),
        alpha_hat,
        alpha_hat_stderr: sample_stderr(&batch_alphas),
        per_layer_alpha,
        batch_alpha: batch_alphas,
        moment_ratios,
        moment_ratio_stderrs,
        trials,
    })
}

/// Paired comparison of two rules' angles under common random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaComparison {
    pub alpha_a: f64,
    pub alpha_b: f64,
    /// `alpha_a - alpha_b`.
    pub diff: f64,
    /// Batch-means standard error of the per-batch paired differences.
    pub diff_stderr: f64,
}

/// Compare the angles of two specs on the same seeded trial stream.
///
/// Both estimators see identical benign and Byzantine draws in every trial,
/// so the per-batch angle differences cancel the shared Monte-Carlo noise;
/// the reported standard error is that of the paired differences over
/// `batches` contiguous batches.
pub fn compare_alphas(
    scenario: &ResilienceScenario,
    spec_a: &AggregatorSpec,
    p_a: &LayerPartition,
    spec_b: &AggregatorSpec,
    p_b: &LayerPartition,
    seed: u64,
    batches: usize,
) -> Result<AlphaComparison> {
    let est_a = estimate_with_batches(scenario, spec_a, p_a, seed, batches)?;
    let est_b = estimate_with_batches(scenario, spec_b, p_b, seed, batches)?;
    if est_a.batch_alpha.len() != est_b.batch_alpha.len() {
        return Err(Error::DegenerateEstimate(
            "batch counts differ between the paired estimates".into(),
        ));
    }
    let diffs: Vec<f64> = est_a
        .batch_alpha
        .iter()
        .zip(&est_b.batch_alpha)
        .map(|(a, b)| a - b)
        .collect();
    Ok(AlphaComparison {
        alpha_a: est_a.alpha_hat,
        alpha_b: est_b.alpha_hat,
        diff: est_a.alpha_hat - est_b.alpha_hat,
        diff_stderr: sample_stderr(&diffs),
    })
}

/// Report of the layerwise angle-composition check: the expected layerwise
/// output must satisfy the angle bound built from the worst per-layer angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseAngleReport {
    /// `<E F_layerwise, g>`.
    pub lhs: f64,
    /// `(1 - sin(max per-layer alpha)) * |g|^2`.
    pub rhs: f64,
    pub max_layer_alpha: f64,
    pub per_layer_alpha: Vec<f64>,
    pub lhs_stderr: f64,
    /// Whether `lhs >= rhs` within three standard errors of the lhs.
    pub passes: bool,
}

/// Check the layerwise angle composition: aggregate with the layerwise
/// version of `base_spec` over `p`, then verify
/// `<EF, g> >= (1 - sin(max_j alpha_j)) * |g|^2` within three standard
/// errors. With a single block this reduces to the first resilience
/// condition of the base rule.
pub fn layerwise_angle_check(
    scenario: &ResilienceScenario,
    base_spec: &AggregatorSpec,
    p: &LayerPartition,
    seed: u64,
) -> Result<LayerwiseAngleReport> {
    let mut spec = base_spec.clone();
    spec.layerwise = true;
    let est = estimate(scenario, &spec, p, seed)?;
    let max_layer_alpha = est
        .per_layer_alpha
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let g_sq = scenario.g.norm() * scenario.g.norm();
    let lhs = est.inner_product;
    let rhs = (1.0 - max_layer_alpha.sin()) * g_sq;
    // Three standard errors, with a floating-point floor so the exactly
    // tight case (zero noise, zero stderr) is not failed over rounding.
    let tolerance = 3.0 * est.inner_product_stderr + 1e-12 * rhs.abs();
    Ok(LayerwiseAngleReport {
        lhs,
        rhs,
        max_layer_alpha,
        per_layer_alpha: est.per_layer_alpha,
        lhs_stderr: est.inner_product_stderr,
        passes: lhs >= rhs - tolerance,
    })
}

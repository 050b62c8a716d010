//! Synthetic dataset generation and federated partitioning.
//!
//! Blobs stand in for the image benchmarks at desk scale: each class is an
//! isotropic Gaussian cluster around a random direction. Partitioning is
//! either IID (uniform shuffle split) or label-skewed via a Dirichlet draw
//! of per-class client proportions, the standard synthetic surrogate for
//! real non-IID federations.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::Dataset;
use crate::seeding::rng_for;

/// How a global dataset is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    /// Per-class client proportions drawn from `Dirichlet(alpha, ..., alpha)`.
    /// Small `alpha` concentrates each class on few clients.
    LabelDirichlet { alpha: f64 },
}

/// Federation roster plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationPlan {
    pub num_clients: usize,
    pub scheme: PartitionScheme,
    /// Clients receiving fewer examples than this are dropped from the
    /// roster and their examples discarded.
    pub min_samples_per_client: usize,
}

impl FederationPlan {
    pub fn iid(num_clients: usize) -> Self {
        Self {
            num_clients,
            scheme: PartitionScheme::Iid,
            min_samples_per_client: DEFAULT_MIN_SAMPLES,
        }
    }

    pub fn dirichlet(num_clients: usize, alpha: f64) -> Self {
        Self {
            num_clients,
            scheme: PartitionScheme::LabelDirichlet { alpha },
            min_samples_per_client: DEFAULT_MIN_SAMPLES,
        }
    }
}

/// Default roster cutoff, matching the "more than 30 samples" rule used to
/// prune starved clients.
pub const DEFAULT_MIN_SAMPLES: usize = 30;

/// Ratio between a class center's norm and the cluster noise scale. Noise
/// std is `spread / CENTER_TO_NOISE`, so clusters stay separable at any
/// positive spread and `spread = 0` degenerates to exact centers.
const CENTER_TO_NOISE: f64 = 6.0;

/// Generate Gaussian class clusters with unit-norm random centers scaled by
/// `spread`. Produces `per_class` examples for each of `num_classes` labels,
/// deterministically under `seed`.
pub fn make_blobs(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidSpec("make_blobs needs at least 2 classes".into()));
    }
    if input_dim == 0 {
        return Err(Error::InvalidSpec("input_dim must be positive".into()));
    }
    let mut rng = rng_for(seed, 0xB10B, 0);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        loop {
            let raw: Vec<f64> = (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                centers.push(raw.into_iter().map(|v| v / norm * spread).collect::<Vec<_>>());
                break;
            }
        }
    }
    let noise_std = spread / CENTER_TO_NOISE;
    let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cj in center {
                let eps: f64 = rng.sample(StandardNormal);
                features.push(cj + noise_std * eps);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, input_dim, labels)
}

/// Generate one blob distribution and split it into a training and a
/// held-out test set. Both sets share the same class centers; only the
/// cluster noise differs.
pub fn make_blobs_split(
    num_classes: usize,
    input_dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let total = train_per_class + test_per_class;
    let all = make_blobs(num_classes, input_dim, total, spread, seed)?;
    let mut train_idx = Vec::with_capacity(num_classes * train_per_class);
    let mut test_idx = Vec::with_capacity(num_classes * test_per_class);
    for class in 0..num_classes {
        let start = class * total;
        train_idx.extend(start..start + train_per_class);
        test_idx.extend(start + train_per_class..start + total);
    }
    Ok((all.subset(&train_idx), all.subset(&test_idx)))
}

/// Split `data` across clients according to `plan`. Shards are pairwise
/// disjoint subsets of the input; clients below the minimum sample count are
/// removed from the returned roster.
pub fn federate(data: &Dataset, plan: &FederationPlan, seed: u64) -> Result<Vec<Dataset>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if plan.num_clients == 0 {
        return Err(Error::InvalidSpec("num_clients must be positive".into()));
    }
    if plan.num_clients > data.len() {
        return Err(Error::TooManyClients {
            examples: data.len(),
            clients: plan.num_clients,
        });
    }
    let assignments = match plan.scheme {
        PartitionScheme::Iid => iid_assignments(data.len(), plan.num_clients, seed),
        PartitionScheme::LabelDirichlet { alpha } => {
            if alpha <= 0.0 {
                return Err(Error::InvalidSpec("dirichlet alpha must be positive".into()));
            }
            dirichlet_assignments(data, plan.num_clients, alpha, seed)
        }
    };
    Ok(assignments
        .into_iter()
        .filter(|shard| shard.len() >= plan.min_samples_per_client)
        .map(|shard| data.subset(&shard))
        .collect())
}

fn shuffle(indices: &mut [usize], rng: &mut impl Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

fn iid_assignments(n: usize, clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, 0x11D, 0);
    shuffle(&mut indices, &mut rng);
    let base = n / clients;
    let remainder = n % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut cursor = 0;
    for c in 0..clients {
        let take = base + usize::from(c < remainder);
        shards.push(indices[cursor..cursor + take].to_vec());
        cursor += take;
    }
    shards
}

fn dirichlet_assignments(data: &Dataset, clients: usize, alpha: f64, seed: u64) -> Vec<Vec<usize>> {
    let num_classes = data.labels().iter().copied().max().unwrap_or(0) + 1;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    let mut rng = rng_for(seed, 0xD17, 0);
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        if members.is_empty() {
            continue;
        }
        shuffle(&mut members, &mut rng);
        // Dirichlet proportions from normalized Gamma draws.
        let mut weights: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let counts = largest_remainder_counts(&weights, members.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    shards
}

/// Apportion `total` items proportionally to `weights`: floor the shares,
/// then hand leftover items to the largest fractional parts (lowest index
/// on ties).
fn largest_remainder_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let share = w * total as f64;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((i, share - floor as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = total.saturating_sub(assigned);
    for &(i, _) in &fractions {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Write a dataset as delimited text: a header row with the example count
/// and feature dimension, then one example per line with the label last.
/// Floats are printed in shortest round-trip form, so import reproduces the
/// dataset bit-exactly.
pub fn export_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{} {}", data.len(), data.feature_dim())?;
    for i in 0..data.len() {
        for x in data.row(i) {
            write!(w, "{x} ")?;
        }
        writeln!(w, "{}", data.label(i))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`export_dataset`].
pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("dataset file is empty".into()))??;
    let mut parts = header.split_whitespace();
    let rows: usize = parse_field(parts.next(), "example count")?;
    let dim: usize = parse_field(parts.next(), "feature dimension")?;
    let mut features = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim + 1 {
            return Err(Error::Config(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        for field in &fields[..dim] {
            features.push(field.parse::<f64>().map_err(|e| {
                Error::Config(format!("line {}: bad float {field:?}: {e}", lineno + 2))
            })?);
        }
        labels.push(fields[dim].parse::<usize>().map_err(|e| {
            Error::Config(format!("line {}: bad label: {e}", lineno + 2))
        })?);
    }
    if labels.len() != rows {
        return Err(Error::Config(format!(
            "header promised {rows} examples but file contains {}",
            labels.len()
        )));
    }
    Dataset::new(features, dim, labels)
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .ok_or_else(|| Error::Config(format!("missing {what} in header")))?
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad {what}: {e}")))
}

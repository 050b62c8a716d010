//! Byzantine-robust aggregation for federated learning, at desk scale.
//!
//! The crate provides the classical robust aggregation operators — Krum,
//! Bulyan, GeoMed — together with the combinators that harden them in
//! high-dimensional settings: layerwise application over a parameter
//! partition, cosine distance in place of squared Euclidean distance, and
//! median-norm clipping. Around the operators sits everything needed to
//! study them end to end without an ML framework: hand-gradient models,
//! synthetic federated datasets (IID and label-skewed), poisoning attacks
//! (label flipping, model-replacement boosting, random Byzantine vectors),
//! a multi-round simulation loop, and a Monte-Carlo estimator of the
//! resilience conditions.
//!
//! Everything is seeded and deterministic: identical configs produce
//! bit-identical results regardless of thread count.
//!
//! ## Quick tour
//!
//! ```
//! use robustfed::aggregation::{aggregate, AggregatorSpec, BaseRule, UpdateSet, Variant};
//! use robustfed::params::{LayerPartition, ParamVector};
//!
//! // Five 1-d updates, one of them wildly off.
//! let updates = UpdateSet::new(
//!     [0.0, 0.1, 0.2, 0.3, 10.0]
//!         .iter()
//!         .map(|&v| ParamVector::new(vec![v]).unwrap())
//!         .collect(),
//! )
//! .unwrap();
//! let spec = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 1);
//! let partition = LayerPartition::single(1).unwrap();
//! let outcome = aggregate(&spec, &partition, &updates).unwrap();
//! assert_ne!(outcome.aggregate.as_slice()[0], 10.0);
//! ```
//!
//! The `examples/` directory walks through each capability; the thin
//! `robustfed` binary exposes the same machinery as the `simulate`,
//! `resilience` and `sweep` subcommands.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod learning;
pub mod params;
pub mod resilience;
pub mod seeding;
pub mod simulator;

pub use error::{Error, Result};

//! Noisy counterfactual matching (NCM) for linear models.
//!
//! Counterfactual pairs drawn from two training domains span the spurious
//! directions of the data. NCM estimates that span with a truncated SVD of
//! the pair differences and trains a linear model on inputs with the span
//! projected out. The crate also samples the synthetic latent SCMs used to
//! study the method and checks the test-domain risk bound empirically.
//!
//! ```
//! use ncm_core::{
//!     estimate_subspace, evaluate, generate_cf_pairs, generate_mixture, sample_scm, train, DomainSpec,
//!     LossKind, TrainConfig,
//! };
//!
//! let c = 1.0 / 3.0;
//! let scm = sample_scm(
//!     12,
//!     12,
//!     3,
//!     vec![
//!         DomainSpec::train("a", 0.1, c, 0.5),
//!         DomainSpec::train("b", 2.0, c, 0.5),
//!         DomainSpec::test("t", 4.0, c),
//!     ],
//!     1,
//! )
//! .unwrap();
//! let data = generate_mixture(&scm, 500, 2).unwrap();
//! let pairs = generate_cf_pairs(&scm, "a", "b", 3, 3).unwrap();
//! let est = estimate_subspace(&pairs.delta, 3).unwrap();
//! let model = train(&data, Some(&est), &TrainConfig::default(), LossKind::LogLoss).unwrap();
//! assert!(est.basis.tr_mul(&model.weights).amax() < 1e-8);
//! assert!(evaluate(&model, &data).unwrap().accuracy > 0.5);
//! ```

pub mod bounds;
pub mod counterfactuals;
pub mod error;
pub mod harness;
pub mod jsonl;
pub mod linalg;
pub mod linmodels;
pub mod rng;
pub mod scm;
pub mod subspace;

pub use bounds::{
    compare_moments, second_moment, second_moment_closed_form, second_moment_parallel, term2, verdict_table,
    verify_bound, BoundHolds, BoundReport, MomentAgreement, SecondMoment,
};
pub use counterfactuals::{corrupt_pairs, generate_cf_pairs, random_pairing, CfPairSet, PairsMeta};
pub use error::{NcmError, Result};
pub use linmodels::{
    evaluate, gradient, loss, train, train_observed, EvalReport, LinearModel, LossKind, Optimizer, TrainConfig,
    WeightInit,
};
pub use scm::{
    generate_dataset, generate_mixture, sample_scm, sample_scm_with, Dataset, DomainRole, DomainSpec, LabelKind,
    LatentScm, ScmOptions,
};
pub use subspace::{estimate_subspace, subspace_distance, wedin_check, SubspaceEstimate, WedinDiagnostics};

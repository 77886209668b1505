//! Confidential federated training: devices upload encrypted data, a ledger
//! releases per-blob keys only to attested workloads that a policy names, and
//! model updates leave the pipeline only after differentially private noise.
//!
//! The pieces, roughly in pipeline order:
//!
//! * [`envelope`]: hybrid public-key encryption bound to a blob header.
//! * [`attestation`]: a simulated hardware root of trust and enclave quotes.
//! * [`policy`]: access policies as a DAG of permitted transforms.
//! * [`ledger`]: the key-release state machine and its hash-chained audit log.
//! * [`transforms`]: clipping, aggregation, tree-aggregation noise and release.
//! * [`accounting`]: zCDP budgets and their (epsilon, delta) conversion.
//! * [`training`]: synthetic data, server optimizers and the in-memory trainer.
//! * [`orchestrator`]: the untrusted scheduler, devices, storage and observer.

pub mod accounting;
pub mod attestation;
pub mod envelope;
pub mod ledger;
pub mod model;
pub mod orchestrator;
pub mod policy;
pub mod training;
pub mod transforms;
pub mod types;

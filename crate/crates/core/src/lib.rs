//! Gateway between an EHR system and machine-learning classifier sidecars.
//!
//! A request for one classifier route triggers a concurrent lab-data fetch
//! from the EHR ([`ehr_client`]), conversion of the results into feature rows
//! ([`preprocess`]), a batched call to the classifier's loopback sidecar
//! ([`dispatch`]), and a response to the EHR whose clinical results are
//! retained without any lab data ([`audit`]). [`gateway`] wires the stages
//! behind an IP allowlist; [`registry`] holds classifier configuration.
//!
//! [`mock_ehr`] and [`ref_classifier`] are runnable stand-ins for the EHR and
//! for a classifier sidecar, so the whole system runs on one machine.

pub mod audit;
pub mod dispatch;
pub mod ehr_client;
pub mod gateway;
pub mod mock_ehr;
pub mod preprocess;
pub mod ref_classifier;
pub mod registry;
pub mod server;

pub use gateway::{Gateway, GatewayResponse, PredictionRequest, ResultEntry};
pub use registry::{load_config, ClassifierSpec, GatewayConfig, Registry};

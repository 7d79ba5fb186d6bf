//! Dataset manifests, session logs and the synthetic stimulus generator.

pub mod features;
pub mod greebles;
pub mod import;
pub mod manifest;
pub mod session;

pub use features::{manifest_features, FeatureMap};
pub use greebles::{generate_greebles, GreeblesSet, GreeblesSpec, DISTRACTORS, FEATURE_NAMES};
pub use import::{import_csv, ImportMapping};
pub use manifest::{load_manifest, DatasetManifest, ImageGeometry, ManifestItem};
pub use session::{
    check_session, load_sessions, save_sessions, validate_session, write_sessions, Interaction,
    LearnerSession, Phase, TEST_STEPS, TOTAL_STEPS, TRAIN_STEPS,
};

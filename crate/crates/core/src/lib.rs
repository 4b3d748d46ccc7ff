//! Planning and control stack for time-optimal driving on small closed
//! circuits: raceline generation, online forward-backward speed replanning
//! under g-g-v acceleration envelopes, Pure Pursuit and clothoid path
//! tracking, a model-structured neural steering controller, and a
//! deterministic closed-loop simulator with an ablation harness.
//!
//! Units are SI throughout: meters, seconds, radians, m/s, m/s².
//! Signed curvature is positive for left turns.

pub mod control;
pub mod geometry;
pub mod ggv;
pub mod harness;
pub mod msnn;
pub mod presets;
pub mod raceline;
pub mod sim;
pub mod velocity;

pub use geometry::{Path, PoseCurv, TrackDefinition};
pub use control::{CurvatureReference, LookaheadSchedule};
pub use ggv::GgvDiagram;
pub use harness::{AblationGrid, AblationReport, RunMetrics};
pub use msnn::{MsnnModel, ReferenceWindow, SteerDataset};
pub use raceline::Raceline;
pub use sim::{PlantConfig, RunTrace, StackConfig, VehicleState};
pub use velocity::SpeedPlan;

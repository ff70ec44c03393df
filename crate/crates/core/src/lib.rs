//! Decoding engine for a small seeded transformer with pluggable KV-cache
//! policies: full caching, sink-plus-window, heavy-hitter eviction,
//! prefill-time selection and periodically refreshed partial caches.
//!
//! Attention cost is accounted analytically per step and layer; see
//! [`metrics`].

pub mod error;
pub mod harness;
pub mod kv_store;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod policies;
pub mod scheduler;
pub mod session;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use policies::{PolicyConfig, PolicyKind};
pub use scheduler::{ScheduleConfig, ScheduleMode};
pub use session::Session;

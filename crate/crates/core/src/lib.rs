//! Intent recognition with object/context localization guidance, hashtag
//! transfer, class grouping and annotation statistics.

pub mod annotation;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hashtags;
pub mod masks;
pub mod model;
pub mod plot;
pub mod saliency;
pub mod synthetic;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};

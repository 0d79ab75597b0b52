//! Synthetic collective-mobility worlds with labeled anomaly injection.

mod inject;
mod world;

pub use inject::{
    inject, Injection, InjectionConfig, ANOMALY_TYPES, TAG_ABSENCE, TAG_ABSENCE_SOURCE,
    TAG_COORDINATION, TAG_LOCATION_OUTLIER, TAG_NORMAL, TAG_UNEXPECTED,
};
pub use world::{
    generate_world, poi, AgentProfile, Role, Site, World, WorldConfig, LEISURE_POIS, POI_NAMES,
};

//! Virtual spine straightening and vertebra inpainting for osteoplasty
//! planning.
//!
//! The pipeline takes a CT, its vertebra segmentation and the label of the
//! fractured vertebra, moves every healthy vertebra onto a patient-scaled
//! healthy atlas with per-vertebra rigid registrations blended by inverse
//! distance, replaces the fractured vertebra with a healthy estimate, and
//! reports the volume difference as an upper bound for bone cement.

pub mod analysis;
pub mod atlas;
pub mod cli;
pub mod error;
pub mod inpaint;
pub mod labels;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod render;
pub mod straighten;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    DisplacementField, LabelVolume, ScalarVolume, Vec3, Volume, VolumeGeometry,
};

//! Synthetic volumetric scanner: scene description, rasterization with
//! realistic artifacts, and exact ground truth for downstream verification.

mod render;
mod scene;
mod volume;

pub use render::{
    render, RenderError, AMBIENT, INTERIOR_DECAY_PER_MM, INTERIOR_PEAK, METAL_INTENSITY,
    MIRROR_ATTENUATION, SURFACE_BAND_MM, SURFACE_PEAK, TRACT_INTENSITY,
};
pub use scene::{
    ArtifactParams, DriverSpec, GroundTruth, NeedlePlacement, SceneSpec, TissueSpec, TractSpec,
    WoundPolyline, WoundTruth, WOUND_DEPTH_RANGE_MM, WOUND_WIDTH_RANGE_MM,
};
pub use volume::{
    GrayImage, OctVolume, VolumeError, DEFAULT_DIMS, DEFAULT_FOV_MM, FULL_RES_DIMS,
};

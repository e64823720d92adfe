//! Two-stage whole-heart segmentation at desk scale: a 3D region-proposal
//! detector that emits exactly one heart bounding box, followed by a 3D
//! U-net that segments 7 cardiac structures plus background inside that
//! box, trained with an edge-aware auxiliary loss.

pub mod anchors;
pub mod boxes;
pub mod detector;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod sobel;
pub mod unet;
pub mod verify;
pub mod volume;

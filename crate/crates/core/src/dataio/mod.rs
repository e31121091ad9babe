//! Files in and out: sequence manifests, images, disparity maps, archived
//! volumes and distributions, and the synthetic scene generator.

mod archives;
mod manifest;
mod pfm;
mod png;
mod scene;

pub use archives::{distribution_from_archive, distribution_to_archive, volume_from_archive, volume_to_archive};
pub use manifest::{
    format_points, load_points, load_sequence, parse_points, save_generated, save_sequence, FrameRecord, Manifest,
    Sequence, MANIFEST_VERSION,
};
pub use pfm::{decode_disparity, encode_disparity, load_disparity, save_disparity, INVALID_SENTINEL};
pub use png::{load_image, save_image};
pub use scene::{generate_scene, quantize16, GeneratedScene, SceneObject, SceneSpec, Trajectory};

//! File formats: binary avatar containers, frame sequences and images,
//! plus landmark smoothing and a synthetic capture generator.

pub mod asset;
pub mod container;
pub mod imageio;
pub mod one_euro;
pub mod sequence;
pub mod synthetic;

pub use asset::{
    load_avatar, load_baked, load_checkpoint, save_avatar, save_baked, save_checkpoint,
};
pub use container::Container;
pub use imageio::{read_image, read_mask, write_image};
pub use one_euro::{smooth_landmarks, OneEuro, OneEuroConfig};
pub use sequence::{load_dataset, load_sequence, save_sequence, FrameRecord};
pub use synthetic::{make_synthetic, SyntheticConfig, SyntheticScene};

pub mod ppm;
pub mod weights;

pub use ppm::{load_image_ppm, read_ppm, write_ppm, Normalization, RgbImage};
pub use weights::{load_weights, save_weights};

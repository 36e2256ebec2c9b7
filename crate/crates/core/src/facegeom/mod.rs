//! Cell grids, landmarks, facial-structure distances and the bucketized
//! positional encoding indexed by them.

pub mod distance;
pub mod grid;
pub mod landmarks;
pub mod pe;

pub use distance::{
    combined_distance, euclidean_distance, relative_distance, relative_distance_vector,
    saliency_count, saliency_counts, saliency_distance, FacialMode, FacialStructure,
};
pub use grid::CellGrid;
pub use landmarks::{read_landmark_file, write_landmark_file, LandmarkRecord, LandmarkSet, Point};
pub use pe::{pe_index, PeBuckets, Pif};

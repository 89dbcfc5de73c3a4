//! Synthetic label-map / photo dataset and image I/O.

mod dataset;
mod image;
mod scene;

pub use dataset::{
    make_dataset, Dataset, DatasetCounts, DatasetManifest, ImageEntry, UnpairedBatch, ValEntry,
    ValPair, MANIFEST_FILE,
};
pub use image::{save_grid, RgbImage};
pub use scene::{gen_scene, render_scene, to_class_map, ClassMap, Scene, SceneSpec, Style};

use std::fs;
use std::path::{Path, PathBuf};

use asymgan_autograd::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::scene::{gen_scene, ClassMap, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::mix64;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_x: usize,
    pub train_y: usize,
    pub val: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train_x: 200,
            train_y: 200,
            val: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub file: PathBuf,
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValEntry {
    pub label: PathBuf,
    pub photo: PathBuf,
    pub class_map: PathBuf,
    pub scene_seed: u64,
}

/// Description of a generated dataset. File paths are relative to
/// `root_path`, the directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(skip)]
    pub root_path: PathBuf,
    pub spec: SceneSpec,
    pub n_train_x: usize,
    pub n_train_y: usize,
    pub n_val_pairs: usize,
    pub master_seed: u64,
    pub train_x: Vec<ImageEntry>,
    pub train_y: Vec<ImageEntry>,
    pub val: Vec<ValEntry>,
}

#[derive(Clone, Copy)]
enum Split {
    TrainX = 1,
    TrainY = 2,
    Val = 3,
}

/// Scene seeds of different splits never collide: the split tag occupies
/// the top byte, which no index below 2^56 can reach.
fn scene_seed(master: u64, split: Split, index: usize) -> u64 {
    mix64(master) ^ ((split as u64) << 56) ^ index as u64
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.root_path = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root_path.join(rel)
    }
}

/// Generates scenes and writes PNGs plus `manifest.json` into `out_dir`.
pub fn make_dataset(
    spec: &SceneSpec,
    counts: DatasetCounts,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["train_x", "train_y", "val"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let train_x: Vec<ImageEntry> = (0..counts.train_x)
        .map(|i| ImageEntry {
            file: PathBuf::from(format!("train_x/{i:05}.png")),
            scene_seed: scene_seed(master_seed, Split::TrainX, i),
        })
        .collect();
    let train_y: Vec<ImageEntry> = (0..counts.train_y)
        .map(|i| ImageEntry {
            file: PathBuf::from(format!("train_y/{i:05}.png")),
            scene_seed: scene_seed(master_seed, Split::TrainY, i),
        })
        .collect();
    let val: Vec<ValEntry> = (0..counts.val)
        .map(|i| ValEntry {
            label: PathBuf::from(format!("val/{i:05}_label.png")),
            photo: PathBuf::from(format!("val/{i:05}_photo.png")),
            class_map: PathBuf::from(format!("val/{i:05}_classmap.png")),
            scene_seed: scene_seed(master_seed, Split::Val, i),
        })
        .collect();

    train_x.par_iter().try_for_each(|e| {
        gen_scene(e.scene_seed, spec).photo.save(&out_dir.join(&e.file))
    })?;
    train_y.par_iter().try_for_each(|e| {
        gen_scene(e.scene_seed, spec).label.save(&out_dir.join(&e.file))
    })?;
    val.par_iter().try_for_each(|e| -> Result<()> {
        let s = gen_scene(e.scene_seed, spec);
        s.label.save(&out_dir.join(&e.label))?;
        s.photo.save(&out_dir.join(&e.photo))?;
        s.class_map.to_image().save(&out_dir.join(&e.class_map))
    })?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        root_path: out_dir.to_path_buf(),
        spec: spec.clone(),
        n_train_x: counts.train_x,
        n_train_y: counts.train_y,
        n_val_pairs: counts.val,
        master_seed,
        train_x,
        train_y,
        val,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct ValPair<S> {
    pub label: Tensor<S>,
    pub photo: Tensor<S>,
    pub class_map: ClassMap,
    pub scene_seed: u64,
}

/// A dataset decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub manifest: DatasetManifest,
    pub train_x: Vec<Tensor<S>>,
    pub train_y: Vec<Tensor<S>>,
    pub val: Vec<ValPair<S>>,
}

/// One unpaired minibatch with the indices it was drawn from.
#[derive(Clone, Debug)]
pub struct UnpairedBatch<S> {
    pub x: Tensor<S>,
    pub y: Tensor<S>,
    pub x_indices: Vec<usize>,
    pub y_indices: Vec<usize>,
    pub epoch: u64,
}

impl<S: Scalar> Dataset<S> {
    /// Loads `manifest.json` (or a directory containing it) and decodes every image.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        Self::from_manifest(DatasetManifest::load(&file)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let load = |rel: &Path| -> Result<Tensor<S>> {
            Ok(RgbImage::load(&manifest.resolve(rel))?.to_tensor())
        };
        let train_x = manifest
            .train_x
            .iter()
            .map(|e| load(&e.file))
            .collect::<Result<Vec<_>>>()?;
        let train_y = manifest
            .train_y
            .iter()
            .map(|e| load(&e.file))
            .collect::<Result<Vec<_>>>()?;
        let val = manifest
            .val
            .iter()
            .map(|e| {
                Ok(ValPair {
                    label: load(&e.label)?,
                    photo: load(&e.photo)?,
                    class_map: ClassMap::from_image(&RgbImage::load(&manifest.resolve(&e.class_map))?),
                    scene_seed: e.scene_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            train_x,
            train_y,
            val,
        })
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> Result<u64> {
        if batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        let n = self.train_x.len().min(self.train_y.len()) / batch_size;
        if n == 0 {
            return Err(Error::Argument(format!(
                "batch_size {batch_size} exceeds the smaller training split"
            )));
        }
        Ok(n as u64)
    }

    /// Minibatch for global `step`: each domain follows its own permutation,
    /// redrawn every epoch from `(split_seed, epoch, domain)`.
    pub fn unpaired_batch(&self, split_seed: u64, step: u64, batch_size: usize) -> Result<UnpairedBatch<S>> {
        let spe = self.steps_per_epoch(batch_size)?;
        let epoch = step / spe;
        let offset = (step % spe) as usize * batch_size;
        let pick = |images: &[Tensor<S>], domain: u64| -> Result<(Tensor<S>, Vec<usize>)> {
            let perm = epoch_permutation(images.len(), split_seed, epoch, domain);
            let idx = perm[offset..offset + batch_size].to_vec();
            let items: Vec<Tensor<S>> = idx.iter().map(|&i| images[i].clone()).collect();
            Ok((Tensor::stack_batch(&items)?, idx))
        };
        let (x, x_indices) = pick(&self.train_x, 0)?;
        let (y, y_indices) = pick(&self.train_y, 1)?;
        Ok(UnpairedBatch {
            x,
            y,
            x_indices,
            y_indices,
            epoch,
        })
    }

    /// Regenerates the aligned class maps of the training photos.
    pub fn train_x_class_maps(&self) -> Vec<ClassMap> {
        self.manifest
            .train_x
            .iter()
            .map(|e| gen_scene(e.scene_seed, &self.manifest.spec).class_map)
            .collect()
    }
}

fn epoch_permutation(n: usize, split_seed: u64, epoch: u64, domain: u64) -> Vec<usize> {
    let seed = mix64(mix64(split_seed) ^ epoch.wrapping_mul(2).wrapping_add(domain));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

//! Procedural single-view shape collection and its embedding index.
//!
//! Every instance is one randomized primitive composition rendered from one
//! random viewpoint. Training code sees only the image and the silhouette;
//! ground-truth clouds and poses sit behind [`Dataset::ground_truth`], which
//! counts every access so tests can prove the training path never touches it.
//!
//! On disk a dataset is a directory with `manifest.json` and per-instance
//! `images/NNNNN.png`, `masks/NNNNN.png`, `clouds/NNNNN.ply` and
//! `poses/NNNNN.json`.

mod knn;
mod shapes;

pub use knn::{KnnError, KnnIndex};
pub use shapes::{sample_instance, Category};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::geometry::{PointCloud, ViewSampler, Viewpoint};
use crate::imageio::{self, ImageError};
use crate::ply::{self, PlyEncoding, PlyError};
use crate::render::{self, RenderError, RenderSettings};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("instance {0} does not exist")]
    UnknownInstance(usize),
    #[error("could not generate instance {index} with mask coverage in [{lo}, {hi}]")]
    Coverage { index: usize, lo: f64, hi: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Surface points per ground-truth cloud.
    pub gt_points: usize,
    pub categories: Vec<Category>,
    pub view_range: ViewSampler,
    pub render: RenderSettings,
    /// Accepted range of silhouette coverage.
    pub min_coverage: f64,
    pub max_coverage: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 500,
            val: 50,
            test: 50,
            gt_points: 4096,
            categories: Category::ALL.to_vec(),
            view_range: ViewSampler::default(),
            render: RenderSettings::default(),
            min_coverage: 0.01,
            max_coverage: 0.9,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.categories.is_empty() {
            return Err(DatasetError::Config("no categories".into()));
        }
        if self.gt_points < 2048 {
            return Err(DatasetError::Config(format!("gt_points {} < 2048", self.gt_points)));
        }
        if self.view_range.elevation_min > self.view_range.elevation_max {
            return Err(DatasetError::Config("elevation range is inverted".into()));
        }
        if self.train == 0 {
            return Err(DatasetError::Config("empty training split".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// What the trainer may see of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, 64, 64]`, quantized to 8 bits.
    pub image: Tensor,
    /// `[64, 64]` in {0, 1}.
    pub mask: Tensor,
}

/// Evaluation-only ground truth of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub cloud: PointCloud,
    pub view: Viewpoint,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: usize,
    pub split: Split,
    pub category: Category,
    pub image: String,
    pub mask: String,
    pub cloud: String,
    pub pose: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub instances: Vec<InstanceEntry>,
}

enum GtStore {
    Memory(Vec<GroundTruth>),
    Disk(PathBuf),
}

pub struct Dataset {
    manifest: DatasetManifest,
    samples: Vec<Sample>,
    gt: GtStore,
    gt_reads: Arc<AtomicUsize>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("instances", &self.samples.len())
            .field("seed", &self.manifest.seed)
            .finish()
    }
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn instance_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 8) | attempt);
    rng
}

/// Builds one instance, retrying with a fresh stream when the silhouette
/// coverage falls outside the configured band.
fn make_instance(config: &DatasetConfig, seed: u64, index: usize) -> Result<(Sample, GroundTruth), DatasetError> {
    let category = config.categories[index % config.categories.len()];
    let pixels = config.render.pixels() as f64;
    for attempt in 0..64 {
        let mut rng = instance_rng(seed, index, attempt);
        let cloud = sample_instance(category, config.gt_points, &mut rng);
        let view = config.view_range.sample(&mut rng);
        let mask = render::threshold(&render::mask_of(&cloud, &view, &config.render)?);
        let coverage = mask.sum() / pixels;
        if coverage < config.min_coverage || coverage > config.max_coverage {
            continue;
        }
        let image = quantize(&render::image_of(&cloud, &view, &config.render)?);
        return Ok((
            Sample { id: index, image, mask },
            GroundTruth { cloud, view, category },
        ));
    }
    Err(DatasetError::Coverage {
        index,
        lo: config.min_coverage,
        hi: config.max_coverage,
    })
}

impl Dataset {
    /// Generates every instance in memory.
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self, DatasetError> {
        config.validate()?;
        let mut samples = Vec::with_capacity(config.total());
        let mut gts = Vec::with_capacity(config.total());
        let mut instances = Vec::with_capacity(config.total());
        for index in 0..config.total() {
            let split = if index < config.train {
                Split::Train
            } else if index < config.train + config.val {
                Split::Val
            } else {
                Split::Test
            };
            let (sample, gt) = make_instance(config, seed, index)?;
            instances.push(InstanceEntry {
                id: index,
                split,
                category: gt.category,
                image: format!("images/{index:05}.png"),
                mask: format!("masks/{index:05}.png"),
                cloud: format!("clouds/{index:05}.ply"),
                pose: format!("poses/{index:05}.json"),
            });
            samples.push(sample);
            gts.push(gt);
        }
        Ok(Self {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                seed,
                config: config.clone(),
                instances,
            },
            samples,
            gt: GtStore::Memory(gts),
            gt_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Writes the dataset under `dir` (created if needed).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        for sub in ["images", "masks", "clouds", "poses"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        for (entry, sample) in self.manifest.instances.iter().zip(&self.samples) {
            imageio::save_rgb(dir.join(&entry.image), &sample.image)?;
            imageio::save_mask(dir.join(&entry.mask), &sample.mask)?;
            let gt = self.load_gt(entry.id)?;
            ply::write_ply(dir.join(&entry.cloud), &gt.cloud, PlyEncoding::BinaryLittleEndian)?;
            let pose_path = dir.join(&entry.pose);
            let pose = serde_json::to_string_pretty(&gt.view).expect("plain struct");
            fs::write(&pose_path, pose).map_err(io_err(&pose_path))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("plain struct");
        fs::write(&path, json).map_err(io_err(&path))?;
        Ok(())
    }

    /// Opens a dataset written by [`Dataset::write`]; ground truth stays on disk.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported version {}", manifest.version)));
        }
        let mut samples = Vec::with_capacity(manifest.instances.len());
        for (i, entry) in manifest.instances.iter().enumerate() {
            if entry.id != i {
                return Err(DatasetError::Manifest(format!("instance {i} has id {}", entry.id)));
            }
            samples.push(Sample {
                id: i,
                image: imageio::load_rgb(dir.join(&entry.image))?,
                mask: imageio::load_mask(dir.join(&entry.mask))?,
            });
        }
        Ok(Self {
            manifest,
            samples,
            gt: GtStore::Disk(dir),
            gt_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.manifest
            .instances
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn sample(&self, id: usize) -> Result<&Sample, DatasetError> {
        self.samples.get(id).ok_or(DatasetError::UnknownInstance(id))
    }

    /// Category label from the manifest. Not part of the training signal.
    pub fn category(&self, id: usize) -> Result<Category, DatasetError> {
        self.manifest
            .instances
            .get(id)
            .map(|e| e.category)
            .ok_or(DatasetError::UnknownInstance(id))
    }

    /// Ground truth of instance `id`; every call is counted.
    pub fn ground_truth(&self, id: usize) -> Result<GroundTruth, DatasetError> {
        self.gt_reads.fetch_add(1, Ordering::SeqCst);
        self.load_gt(id)
    }

    /// Number of [`Dataset::ground_truth`] calls so far.
    pub fn gt_reads(&self) -> usize {
        self.gt_reads.load(Ordering::SeqCst)
    }

    /// Shared handle to the access counter.
    pub fn gt_audit(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.gt_reads)
    }

    fn load_gt(&self, id: usize) -> Result<GroundTruth, DatasetError> {
        let entry = self.manifest.instances.get(id).ok_or(DatasetError::UnknownInstance(id))?;
        match &self.gt {
            GtStore::Memory(v) => Ok(v[id].clone()),
            GtStore::Disk(dir) => {
                let cloud = ply::read_ply(dir.join(&entry.cloud))?;
                let path = dir.join(&entry.pose);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let view = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
                Ok(GroundTruth {
                    cloud,
                    view,
                    category: entry.category,
                })
            }
        }
    }
}

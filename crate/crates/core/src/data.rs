//! Labeled datasets, IDX ingestion, synthetic blob tasks, and keyed epoch
//! orderings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    RealTrain,
    Synthetic,
    Validation,
    Test,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::RealTrain => "real-train",
            Role::Synthetic => "synthetic",
            Role::Validation => "validation",
            Role::Test => "test",
        })
    }
}

/// `N × feature-shape` examples with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub role: Role,
    /// Examples per class when class-balanced, otherwise 0.
    pub ipc: usize,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, role: Role, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("dataset must be non-empty".into()));
        }
        if features.rows() != labels.len() || features.rank() < 2 {
            return Err(Error::Shape {
                context: "dataset features vs labels",
                expected: vec![labels.len()],
                actual: features.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        let ipc = balanced_ipc(&labels, class_count);
        Ok(Self {
            features,
            labels,
            role,
            ipc,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example feature shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.gather_rows(indices), labels, self.role, self.class_count)
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Example indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Average examples per class, used for compression bookkeeping.
    pub fn per_class(&self) -> usize {
        if self.ipc > 0 {
            self.ipc
        } else {
            self.len() / self.class_count.max(1)
        }
    }

    /// Splits off the last `⌊fraction·n_c⌋` examples of every class.
    /// Returns `(kept, held_out)`; the two never share an example.
    pub fn holdout(&self, fraction: f64, held_role: Role) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Config(format!("holdout fraction must be in (0, 1), got {fraction}")));
        }
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for idx in self.class_indices() {
            let k = (idx.len() as f64 * fraction).floor() as usize;
            let cut = idx.len() - k;
            keep.extend_from_slice(&idx[..cut]);
            held.extend_from_slice(&idx[cut..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        if keep.is_empty() || held.is_empty() {
            return Err(Error::InvalidInput("holdout leaves an empty split".into()));
        }
        Ok((self.subset(&keep)?, self.subset(&held)?.with_role(held_role)))
    }

    /// Examples `start..start + count` of every class, in dataset order.
    pub fn take_per_class(&self, start: usize, count: usize, role: Role) -> Result<Self> {
        let mut picked = Vec::with_capacity(count * self.class_count);
        for (c, idx) in self.class_indices().iter().enumerate() {
            if idx.len() < start + count {
                return Err(Error::InvalidInput(format!(
                    "class {c} has {} examples, need {}",
                    idx.len(),
                    start + count
                )));
            }
            picked.extend_from_slice(&idx[start..start + count]);
        }
        picked.sort_unstable();
        Ok(self.subset(&picked)?.with_role(role))
    }

    /// Relabels example `j` of class `c` as `(c + j) mod C`, so every class's
    /// examples are spread evenly over all labels. Keeps class balance.
    pub fn latin_relabel(&self) -> Result<Self> {
        let mut labels = self.labels.clone();
        for idx in self.class_indices() {
            for (j, &i) in idx.iter().enumerate() {
                labels[i] = (self.labels[i] + j) % self.class_count;
            }
        }
        Self::new(self.features.clone(), labels, self.role, self.class_count)
    }

    pub fn save(&self, dir: &Path, seed: Option<u64>, provenance: BTreeMap<String, String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut f = Vec::with_capacity(self.features.len() * 4);
        for v in self.features.data() {
            f.extend_from_slice(&v.to_le_bytes());
        }
        crate::io::write_atomic(&dir.join("features.f32"), &f)?;
        let mut l = Vec::with_capacity(self.labels.len() * 8);
        for &y in &self.labels {
            l.extend_from_slice(&(y as i64).to_le_bytes());
        }
        crate::io::write_atomic(&dir.join("labels.i64"), &l)?;
        let manifest = ContainerManifest {
            shape: self.features.shape().to_vec(),
            role: self.role,
            ipc: self.ipc,
            class_count: self.class_count,
            seed,
            provenance,
        };
        crate::io::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, ContainerManifest)> {
        let manifest: ContainerManifest = crate::io::read_json(&dir.join("manifest.json"))?;
        let fpath = dir.join("features.f32");
        let fbytes = std::fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let n: usize = manifest.shape.iter().product();
        if fbytes.len() != n * 4 {
            return Err(Error::Format {
                field: "features.f32",
                detail: format!("expected {} bytes, found {}", n * 4, fbytes.len()),
            });
        }
        let data = fbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let lpath = dir.join("labels.i64");
        let lbytes = std::fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let rows = manifest.shape.first().copied().unwrap_or(0);
        if lbytes.len() != rows * 8 {
            return Err(Error::Format {
                field: "labels.i64",
                detail: format!("expected {} bytes, found {}", rows * 8, lbytes.len()),
            });
        }
        let labels = lbytes
            .chunks_exact(8)
            .map(|c| {
                let v = i64::from_le_bytes(c.try_into().unwrap());
                usize::try_from(v).map_err(|_| Error::Format {
                    field: "labels.i64",
                    detail: format!("negative label {v}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self::new(
            Tensor::new(manifest.shape.clone(), data)?,
            labels,
            manifest.role,
            manifest.class_count,
        )?;
        if manifest.ipc != ds.ipc {
            return Err(Error::Format {
                field: "ipc",
                detail: format!("manifest says {}, labels give {}", manifest.ipc, ds.ipc),
            });
        }
        Ok((ds, manifest))
    }
}

fn balanced_ipc(labels: &[usize], class_count: usize) -> usize {
    let mut counts = vec![0usize; class_count];
    for &y in labels {
        counts[y] += 1;
    }
    match counts.first() {
        Some(&c) if c > 0 && counts.iter().all(|&x| x == c) => c,
        _ => 0,
    }
}

/// `manifest.json` of the on-disk dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub shape: Vec<usize>,
    pub role: Role,
    pub ipc: usize,
    pub class_count: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            field,
            detail: "file truncated in header".into(),
        })
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images.magic",
            detail: format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = be_u32(images, 4, "images.count")? as usize;
    let rows = be_u32(images, 8, "images.rows")? as usize;
    let cols = be_u32(images, 12, "images.cols")? as usize;
    let payload = &images[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Format {
            field: "images.payload",
            detail: format!("expected {} bytes, found {}", n * rows * cols, payload.len()),
        });
    }

    let magic = be_u32(labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels.magic",
            detail: format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let m = be_u32(labels, 4, "labels.count")? as usize;
    if m != n {
        return Err(Error::Format {
            field: "labels.count",
            detail: format!("{n} images but {m} labels"),
        });
    }
    let lpayload = &labels[8..];
    if lpayload.len() != m {
        return Err(Error::Format {
            field: "labels.payload",
            detail: format!("expected {m} bytes, found {}", lpayload.len()),
        });
    }
    if n == 0 {
        return Err(Error::Format {
            field: "images.count",
            detail: "no examples".into(),
        });
    }
    let features: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(
        Tensor::new(vec![n, 1, rows, cols], features)?,
        labels,
        Role::RealTrain,
        class_count,
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&ib, &lb)
}

/// Gaussian clusters, one standard-normal mean per class and isotropic noise
/// of standard deviation `spread`, then one global affine map onto `[0, 1]`.
/// Examples are ordered class by class.
pub fn make_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config("blob counts must be > 0".into()));
    }
    if !(spread >= 0.0) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }
    let mut mean_rng = rng::keyed(domain::BLOBS, seed, 0);
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| mean_rng.sample(StandardNormal)).collect())
        .collect();
    let mut noise_rng = rng::keyed(domain::BLOBS, seed, 1);
    let mut raw = Vec::with_capacity(class_count * per_class * dim);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = noise_rng.sample(StandardNormal);
                raw.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let features: Vec<f32> = if hi > lo {
        raw.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.5; raw.len()]
    };
    LabeledDataset::new(
        Tensor::new(vec![class_count * per_class, dim], features)?,
        labels,
        Role::RealTrain,
        class_count,
    )
}

/// A keyed permutation of `[0, N)` for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochOrder {
    pub order_seed: u64,
    pub epoch: u32,
    pub permutation: Vec<usize>,
}

/// Fisher–Yates over a stream keyed by `(order_seed, epoch)`.
pub fn epoch_order_n(n: usize, order_seed: u64, epoch: u32) -> EpochOrder {
    let mut rng = rng::keyed(domain::EPOCH_ORDER, order_seed, epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    EpochOrder {
        order_seed,
        epoch,
        permutation: perm,
    }
}

pub fn epoch_order(dataset: &LabeledDataset, order_seed: u64, epoch: u32) -> EpochOrder {
    epoch_order_n(dataset.len(), order_seed, epoch)
}

/// Real examples per class over synthetic examples per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub real_per_class: usize,
    pub ipc: usize,
}

impl CompressionRatio {
    pub fn ratio(&self) -> f64 {
        self.real_per_class as f64 / self.ipc as f64
    }
}

pub fn compression_ratio(real_per_class: usize, ipc: usize) -> Result<CompressionRatio> {
    if ipc == 0 || real_per_class == 0 {
        return Err(Error::Config("compression ratio needs ipc > 0 and real_per_class > 0".into()));
    }
    Ok(CompressionRatio { real_per_class, ipc })
}

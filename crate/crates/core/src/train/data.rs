//! Datasets: MNIST-style IDX files and seeded synthetic problems.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{HeadKind, Target};
use crate::numkernel::DenseVector;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DenseVector,
    pub y: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_dim: usize,
    target_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::dim("Dataset::new", "at least one sample", 0));
        };
        let feature_dim = first.x.len();
        let target_dim = target_len(&first.y);
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != feature_dim || target_len(&s.y) != target_dim {
                return Err(Error::dim(
                    "Dataset::new",
                    format!("{feature_dim} features / {target_dim} targets"),
                    format!("{} / {} at sample {i}", s.x.len(), target_len(&s.y)),
                ));
            }
            if std::mem::discriminant(&s.y) != std::mem::discriminant(&first.y) {
                return Err(Error::InvalidTarget(format!("sample {i} mixes target kinds")));
            }
        }
        Ok(Dataset {
            samples,
            feature_dim,
            target_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Width the last layer must have: class count, 1 for binary, or the
    /// regression target length.
    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Checks that every label is valid for `head`.
    pub fn check_head(&self, head: HeadKind) -> Result<()> {
        self.samples
            .iter()
            .try_for_each(|s| s.y.check_for(head, self.target_dim))
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n.max(1));
    }
}

fn target_len(t: &Target) -> usize {
    match t {
        Target::Binary(_) => 1,
        Target::OneHot(v) | Target::Real(v) => v.len(),
    }
}

fn ingest_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ingest_err(path, offset as u64, format!("file ends before {what}")))
}

/// Parsed IDX image file: `count` images of `rows × cols` unsigned bytes.
struct IdxImages {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "row count")? as usize;
    let cols = be_u32(bytes, 12, path, "column count")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(ingest_err(
            path,
            bytes.len() as u64,
            format!("truncated: {count} images of {rows}x{cols} need {} bytes", 16 + need),
        ));
    }
    if body.len() > need {
        return Err(ingest_err(path, (16 + need) as u64, "trailing bytes after last image"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(ingest_err(
            path,
            bytes.len() as u64,
            format!("truncated: {count} labels need {} bytes", 8 + count),
        ));
    }
    if body.len() > count {
        return Err(ingest_err(path, (8 + count) as u64, "trailing bytes after last label"));
    }
    if let Some(i) = body.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(ingest_err(
            path,
            (8 + i) as u64,
            format!("label {} outside 0..{MNIST_CLASSES}", body[i]),
        ));
    }
    Ok(body.to_vec())
}

/// Reads an IDX image/label pair. Pixels are scaled by `1/255` and laid out
/// row-major; labels become one-hot vectors over 10 classes. `limit` keeps the
/// first `limit` samples.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = parse_images(&fs::read(images)?, images)?;
    let lab = parse_labels(&fs::read(labels)?, labels)?;
    if img.count != lab.len() {
        return Err(ingest_err(
            labels,
            4,
            format!("{} labels for {} images in {}", lab.len(), img.count, images.display()),
        ));
    }
    if img.count == 0 {
        return Err(ingest_err(images, 4, "no images"));
    }
    let n = limit.map_or(img.count, |l| l.min(img.count));
    let dim = img.rows * img.cols;
    let samples = (0..n)
        .map(|i| Sample {
            x: img.pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            y: Target::one_hot(lab[i] as usize, MNIST_CLASSES).expect("label range checked"),
        })
        .collect();
    Dataset::new(samples)
}

/// Writes an IDX pair; the inverse of [`load_idx`] for raw bytes.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    label_bytes: &[u8],
) -> Result<()> {
    let count = label_bytes.len();
    if pixels.len() != count * rows * cols {
        return Err(Error::dim("write_idx", count * rows * cols, pixels.len()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + count);
    for v in [IDX_LABELS_MAGIC, count as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(label_bytes);
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Linear,
    Logistic,
    Blobs,
}

/// Parameters of a synthetic problem. Every draw comes from one ChaCha8
/// stream seeded with `seed`, in the order documented on each kind:
///
/// * `Linear`: `A` (`dims × outputs`, column by column) then `c` (`outputs`),
///   all `U[−1, 1]`; then per sample `x ~ U[−1, 1]^dims` followed by
///   `outputs` standard normals `ε`; `y = Aᵀx + c + noise·ε`. Real targets.
/// * `Logistic`: `w ~ U[−1, 1]^dims`, `b ~ U[−0.5, 0.5]`; per sample
///   `x ~ U[−1, 1]^dims`, `y = 1` if `wᵀx + b > 0` else `0`. Binary targets.
/// * `Blobs`: centers `μ_k ~ U[−1, 1]^dims` for `k < classes`; sample `i`
///   has class `i mod classes` and `x = μ_k + noise·ε`, `ε` standard normal.
///   One-hot targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub dims: usize,
    pub seed: u64,
    /// Blobs only.
    pub classes: usize,
    /// Linear only.
    pub outputs: usize,
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, dims: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            n,
            dims,
            seed,
            classes: 3,
            outputs: 1,
            noise: match kind {
                SynthKind::Blobs => 0.5,
                _ => 0.0,
            },
        }
    }
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.dims == 0 {
        return Err(Error::dim(
            "synth_dataset",
            "n >= 1 and dims >= 1",
            format!("n={} dims={}", spec.n, spec.dims),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniform =
        |rng: &mut ChaCha8Rng, len: usize, r: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-r..=r)).collect() };
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let samples = match spec.kind {
        SynthKind::Linear => {
            if spec.outputs == 0 {
                return Err(Error::dim("synth_dataset", "outputs >= 1", 0));
            }
            let a = uniform(&mut rng, spec.dims * spec.outputs, 1.0);
            let c = uniform(&mut rng, spec.outputs, 1.0);
            (0..spec.n)
                .map(|_| {
                    let x = uniform(&mut rng, spec.dims, 1.0);
                    let y: Vec<f64> = (0..spec.outputs)
                        .map(|j| {
                            let col = &a[j * spec.dims..(j + 1) * spec.dims];
                            let lin: f64 = col.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + c[j];
                            lin + spec.noise * normal(&mut rng)
                        })
                        .collect();
                    Sample {
                        x: DenseVector::from_vec_unchecked(x),
                        y: Target::Real(DenseVector::from_vec_unchecked(y)),
                    }
                })
                .collect()
        }
        SynthKind::Logistic => {
            let w = uniform(&mut rng, spec.dims, 1.0);
            let b = rng.random_range(-0.5..=0.5);
            (0..spec.n)
                .map(|_| {
                    let x = uniform(&mut rng, spec.dims, 1.0);
                    let lin: f64 = w.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + b;
                    Sample {
                        x: DenseVector::from_vec_unchecked(x),
                        y: Target::Binary(if lin > 0.0 { 1.0 } else { 0.0 }),
                    }
                })
                .collect()
        }
        SynthKind::Blobs => {
            if spec.classes < 2 {
                return Err(Error::dim("synth_dataset", "classes >= 2", spec.classes));
            }
            let centers: Vec<Vec<f64>> = (0..spec.classes).map(|_| uniform(&mut rng, spec.dims, 1.0)).collect();
            (0..spec.n)
                .map(|i| {
                    let k = i % spec.classes;
                    let x = centers[k].iter().map(|m| m + spec.noise * normal(&mut rng)).collect();
                    Sample {
                        x: DenseVector::from_vec_unchecked(x),
                        y: Target::one_hot(k, spec.classes).expect("class in range"),
                    }
                })
                .collect()
        }
    };
    Dataset::new(samples)
}

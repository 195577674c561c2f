//! Seeded mini-batch SGD.
//!
//! Randomness comes from one ChaCha8 seed split into streams: 0 initializes
//! the network, 1 draws the holdout split, 2 shuffles each epoch and 3 feeds
//! the pre-training gradient check.

pub mod config;
pub mod data;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataSource, ModelConfig, OutputConfig, TrainConfig};
pub use data::{load_idx, synth_dataset, Dataset, Sample, SynthKind, SynthSpec};

use crate::container;
use crate::error::{Error, Result};
use crate::gradcheck::{oracle_triangle, sample_instance, Stencil, TriangleReport, TriangleTolerances};
use crate::losses::{loss_eval, HeadKind, Target};
use crate::network::{backprop, Network, NetworkShape, ParamVector};
use crate::numkernel::DenseVector;

const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_GATE: u64 = 3;

/// Samples drawn by the pre-training check.
pub const GATE_SAMPLES: usize = 3;
/// Widths of the gate's proxy network are capped here so the dense
/// reference stays cheap.
pub const GATE_MAX_WIDTH: usize = 6;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `θ − lr·grad`.
pub fn sgd_step(theta: ParamVector, grad: &DenseVector, lr: f64) -> Result<ParamVector> {
    if grad.len() != theta.len() {
        return Err(Error::dim("sgd_step", theta.len(), grad.len()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::NonFinite("sgd_step learning rate"));
    }
    let ParamVector { mut theta, layout } = theta;
    theta.axpy(-lr, grad)?;
    Ok(ParamVector { theta, layout })
}

/// Mean of per-sample gradients, computed in parallel and summed in sample
/// order. Also returns the mean loss.
pub fn batch_gradient(network: &Network, batch: &[&Sample]) -> Result<(DenseVector, f64)> {
    let grads = batch
        .par_iter()
        .map(|s| backprop(network, &s.x, &s.y))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = DenseVector::zeros(network.param_count());
    let mut loss = 0.0;
    for g in &grads {
        sum.axpy(1.0, &g.grad)?;
        loss += g.loss;
    }
    let n = batch.len() as f64;
    Ok((sum.scale(1.0 / n), loss / n))
}

/// Mean loss and, for classifier heads, accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

fn correct(head: HeadKind, y: &Target, yhat: &DenseVector) -> bool {
    match head {
        HeadKind::SigmoidBce => (yhat[0] > 0.5) == (y.as_vector()[0] > 0.5),
        _ => argmax(yhat) == y.class(),
    }
}

fn argmax(v: &[f64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

pub fn evaluate<'a>(network: &Network, samples: impl IntoParallelIterator<Item = &'a Sample>) -> Result<Evaluation> {
    let head = network.head();
    let per = samples
        .into_par_iter()
        .map(|s| {
            let yhat = network.predict(&s.x)?;
            Ok((loss_eval(head, &s.y, &yhat)?, correct(head, &s.y, &yhat)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let accuracy = head
        .is_classifier()
        .then(|| per.iter().filter(|p| p.1).count() as f64 / n);
    Ok(Evaluation { loss, accuracy })
}

/// One metrics line. Epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<EpochRecord>,
    pub gate: Vec<TriangleReport>,
}

/// Runs the oracle triangle on a small network with the same depth,
/// activations and head as `shape`, widths capped at [`GATE_MAX_WIDTH`].
pub fn gradcheck_gate(shape: &NetworkShape, seed: u64) -> Result<Vec<TriangleReport>> {
    let mut dims: Vec<usize> = shape.dims().iter().map(|&d| d.min(GATE_MAX_WIDTH)).collect();
    if shape.head() == HeadKind::SigmoidBce {
        *dims.last_mut().unwrap() = 1;
    }
    let proxy = NetworkShape::new(dims, shape.hidden_activations().to_vec(), shape.head())?;
    let tol = TriangleTolerances {
        stencil: Stencil::Central4,
        ..TriangleTolerances::default()
    };
    let mut rng = stream_rng(seed, STREAM_GATE);
    let reports = (0..GATE_SAMPLES)
        .map(|_| oracle_triangle(&sample_instance(&proxy, tol.stencil.kink_margin(), &mut rng), tol))
        .collect::<Result<Vec<_>>>()?;
    if let Some((i, r)) = reports.iter().enumerate().find(|(_, r)| !r.pass()) {
        return Err(Error::GradCheckGate(format!(
            "sample {i}: dense max rel error {:e}, finite-difference max rel error {:e}",
            r.dense.max_rel_error, r.finite_diff.max_rel_error
        )));
    }
    Ok(reports)
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Idx { images, labels, limit } => load_idx(images, labels, *limit),
        src => synth_dataset(&src.synth_spec(cfg.seed).expect("synth source")),
    }
}

/// Checks the model against the data and splits indices into
/// `(train, holdout)`.
fn prepare(cfg: &TrainConfig, shape: &NetworkShape, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let origin = cfg.origin.clone().unwrap_or_else(|| "<config>".into());
    let bad = |field: &str, msg: String| Error::Config {
        path: origin.clone(),
        field: field.into(),
        msg,
    };
    if shape.input_dim() != data.feature_dim() {
        return Err(bad(
            "model.layers",
            format!(
                "input width {} but data has {} features",
                shape.input_dim(),
                data.feature_dim()
            ),
        ));
    }
    if shape.output_dim() != data.target_dim() {
        return Err(bad(
            "model.layers",
            format!(
                "output width {} but data targets have {} entries",
                shape.output_dim(),
                data.target_dim()
            ),
        ));
    }
    data.check_head(shape.head())
        .map_err(|e| bad("model.head", e.to_string()))?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, STREAM_SPLIT));
    let n_hold = (cfg.holdout_fraction * data.len() as f64).round() as usize;
    let train = order.split_off(n_hold);
    if train.is_empty() {
        return Err(bad(
            "holdout_fraction",
            format!("leaves no training samples out of {}", data.len()),
        ));
    }
    Ok((train, order))
}

/// Trains on `data` without touching the filesystem. `on_epoch` sees each
/// record as it is produced.
pub fn train_on(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let shape = cfg.model.shape()?;
    let (train_idx, hold_idx) = prepare(cfg, &shape, data)?;
    let gate = if cfg.gradcheck_gate {
        gradcheck_gate(&shape, cfg.seed)?
    } else {
        Vec::new()
    };

    let start = Instant::now();
    let samples = data.samples();
    let mut network = Network::random(&shape, &mut stream_rng(cfg.seed, STREAM_INIT));
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut order = train_idx.clone();
    let mut records = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (grad, loss) = batch_gradient(&network, &batch)?;
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("batch loss {loss}; lower learning_rate (now {})", cfg.learning_rate),
                    });
                }
                let theta = sgd_step(network.params(), &grad, cfg.learning_rate)?;
                network = Network::from_params(&shape, &theta.theta)?;
            }
        }
        let train_eval = evaluate(&network, train_idx.par_iter().map(|&i| &samples[i]))?;
        if !train_eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("mean training loss {}", train_eval.loss),
            });
        }
        let hold_eval = if hold_idx.is_empty() {
            None
        } else {
            Some(evaluate(&network, hold_idx.par_iter().map(|&i| &samples[i]))?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: train_eval.loss,
            holdout_loss: hold_eval.map(|e| e.loss),
            holdout_accuracy: hold_eval.and_then(|e| e.accuracy),
            wall_time_s: cfg.output.wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record)?;
        records.push(record);
    }
    Ok(TrainOutcome { network, records, gate })
}

/// Loads the configured data, trains, streams metrics to
/// `output.metrics` and saves the final model to `output.model`.
pub fn train(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let mut log = match &cfg.output.metrics {
        Some(path) => Some(BufWriter::new(create(path)?)),
        None => None,
    };
    let outcome = train_on(cfg, &data, |r| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        on_epoch(r);
        Ok(())
    })?;
    if let Some(path) = &cfg.output.model {
        create(path)?;
        container::save(&outcome.network, path)?;
    }
    Ok(outcome)
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

/// Metrics records as JSON lines.
pub fn metrics_jsonl(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain data") + "\n")
        .collect()
}

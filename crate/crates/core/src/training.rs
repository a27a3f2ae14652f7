//! Two-stage training: Adam for the first epochs, then plain SGD with a
//! smaller batch, validation-driven learning-rate decay and early stopping.
//! The loss is the mean squared error of the reconstructed signal on the
//! target scanner's diffusion-weighted directions.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwi::{normalize_b0, WeightedTable, PATCH_CENTER, PATCH_VOXELS};
use crate::error::{Error, Result};
use crate::model::{basis_transpose, NetworkParams, SHARD};
use crate::nn::{Graph, NdTensor, Optimizer, OptimizerKind};
use crate::io::PairedSubject;
use crate::sh::{design_matrix, ShBasisSpec, ShVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    /// Starting SGD learning rate.
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub lr_decay_factor: f64,
    pub decay_patience_epochs: usize,
    pub stop_patience_epochs: usize,
    /// Hard cap on the total number of epochs.
    pub max_epochs: usize,
    /// Relative margin a validation loss must beat the best by to count.
    pub improvement_rel_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage1_lr: 0.001,
            stage1_batch: 256,
            stage2_lr: 0.001,
            stage2_batch: 128,
            lr_decay_factor: 0.9,
            decay_patience_epochs: 5,
            stop_patience_epochs: 10,
            max_epochs: 200,
            improvement_rel_tol: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.stage1_epochs,
            self.stage1_batch,
            self.stage2_batch,
            self.decay_patience_epochs,
            self.stop_patience_epochs,
            self.max_epochs,
        ];
        if counts.contains(&0) {
            return Err(Error::Invalid("epoch counts and batch sizes must be positive".into()));
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Invalid("lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_patience_epochs > self.stop_patience_epochs {
            return Err(Error::Invalid("decay patience exceeds stop patience".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub optimizer: OptimizerKind,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub batch_size: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
    /// The learning rate was multiplied by the decay factor after this epoch.
    pub lr_decayed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoImprovement,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: Option<StopReason>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// What the schedule drives: one training pass, one validation pass and a
/// copy of the current weights.
pub trait EpochRunner {
    type Snapshot;

    fn train_epoch(&mut self, epoch: usize, opt: &mut Optimizer, batch_size: usize) -> Result<f64>;
    fn validation_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
}

/// Runs the two-stage schedule and returns the best-validation snapshot.
///
/// Validation loss is tracked from the first epoch; learning-rate decay and
/// early stopping only act during the second stage. The decay counter resets
/// on decay and on improvement, the stop counter only on improvement.
pub fn run_schedule<R: EpochRunner>(runner: &mut R, cfg: &TrainConfig) -> Result<(R::Snapshot, TrainLog)> {
    cfg.validate()?;
    let mut opt = Optimizer::adam(cfg.stage1_lr);
    let mut log = TrainLog {
        records: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stop_reason: None,
    };
    let mut best = None;
    let mut since_best = 0;
    let mut since_decay = 0;

    for epoch in 1..=cfg.max_epochs {
        let stage = if epoch <= cfg.stage1_epochs { 1 } else { 2 };
        if epoch == cfg.stage1_epochs + 1 {
            opt = Optimizer::sgd(cfg.stage2_lr);
        }
        let batch = if stage == 1 { cfg.stage1_batch } else { cfg.stage2_batch };
        let lr = opt.learning_rate;

        let train_loss = runner.train_epoch(epoch, &mut opt, batch)?;
        let val_loss = if train_loss.is_finite() {
            runner.validation_loss()?
        } else {
            f64::NAN
        };
        let mut record = EpochRecord {
            epoch,
            stage,
            optimizer: opt.kind,
            lr,
            batch_size: batch,
            train_loss,
            val_loss,
            improved: false,
            lr_decayed: false,
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            log.records.push(record);
            return Err(Error::Diverged {
                epoch,
                log: Box::new(log),
            });
        }

        let margin = cfg.improvement_rel_tol * log.best_val_loss.abs();
        if log.best_val_loss.is_infinite() || val_loss < log.best_val_loss - margin {
            record.improved = true;
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = Some(runner.snapshot());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }

        let mut stop = false;
        if stage == 2 {
            if since_best >= cfg.stop_patience_epochs {
                stop = true;
            } else if since_decay >= cfg.decay_patience_epochs {
                opt.learning_rate *= cfg.lr_decay_factor;
                since_decay = 0;
                record.lr_decayed = true;
            }
        }
        log.records.push(record);
        if stop {
            log.stop_reason = Some(StopReason::NoImprovement);
            break;
        }
    }
    if log.stop_reason.is_none() {
        log.stop_reason = Some(StopReason::MaxEpochs);
    }
    let best = best.expect("first epoch always improves");
    Ok((best, log))
}

/// Mean over samples and directions of `(B·pred − B·target)²`; `pred` and
/// `target` are `[batch, n_coef]` row-major.
pub fn signal_mse_loss(pred: &[f64], target: &[f64], basis: &DMatrix<f64>) -> Result<f64> {
    let nc = basis.ncols();
    if pred.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if pred.len() != target.len() || pred.len() % nc != 0 {
        return Err(Error::Shape(format!(
            "prediction {} vs target {} values for {nc} coefficients",
            pred.len(),
            target.len()
        )));
    }
    let diff: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a - b).collect();
    let nd = basis.nrows();
    let mut total = 0.0;
    for row in diff.chunks_exact(nc) {
        for j in 0..nd {
            let mut s = 0.0;
            for (k, &d) in row.iter().enumerate() {
                s += basis[(j, k)] * d;
            }
            total += s * s;
        }
    }
    Ok(total / (diff.len() / nc * nd) as f64)
}

/// Source and target SH volumes of one subject on a shared grid.
#[derive(Debug, Clone)]
pub struct ShPair {
    pub id: String,
    pub source: ShVolume,
    pub target: ShVolume,
    /// Target scanner's diffusion-weighted directions (loss space).
    pub target_table: WeightedTable,
}

impl ShPair {
    /// Normalizes both scans of `s` by their mean b0 and fits SH to each.
    pub fn from_subject(s: &PairedSubject, spec: ShBasisSpec) -> Result<Self> {
        let named = |e: Error| Error::Invalid(format!("subject {}: {e}", s.id));
        let src = normalize_b0(&s.source, &s.mask).map_err(named)?;
        let tgt = normalize_b0(&s.target, &s.mask).map_err(named)?;
        Ok(ShPair {
            id: s.id.clone(),
            source: ShVolume::fit(&src, &s.mask, spec)?,
            target: ShVolume::fit(&tgt, &s.mask, spec)?,
            target_table: tgt.table,
        })
    }
}

/// Flattened patches with their target coefficients and target signals.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub n: usize,
    pub n_coef: usize,
    pub patches: Vec<f64>,
    pub target_coeffs: Vec<f64>,
    pub target_signal: Vec<f64>,
}

impl TrainingSet {
    pub fn from_pairs(pairs: &[&ShPair], basis: &DMatrix<f64>) -> Result<Self> {
        let nc = basis.ncols();
        let nd = basis.nrows();
        let mut set = TrainingSet {
            n: 0,
            n_coef: nc,
            patches: Vec::new(),
            target_coeffs: Vec::new(),
            target_signal: Vec::new(),
        };
        for pair in pairs {
            if pair.source.spec.n_coef() != nc || pair.target.spec.n_coef() != nc {
                return Err(Error::Shape(format!("subject {}: SH order mismatch", pair.id)));
            }
            if pair.source.coeffs.spatial_dims() != pair.target.coeffs.spatial_dims() {
                return Err(Error::Shape(format!("subject {}: grids differ", pair.id)));
            }
            let patches = pair.source.patches().map_err(|e| {
                Error::Invalid(format!("subject {}: {e}", pair.id))
            })?;
            for (patch, v) in patches.iter() {
                let t = pair.target.coeffs.voxel(v);
                for j in 0..nd {
                    set.target_signal
                        .push((0..nc).map(|k| basis[(j, k)] * t[k]).sum::<f64>());
                }
                set.target_coeffs.extend_from_slice(&t);
                set.patches.extend_from_slice(patch);
            }
            set.n += patches.len();
        }
        Ok(set)
    }

    pub fn patch_len(&self) -> usize {
        self.n_coef * PATCH_VOXELS
    }

    /// Centre coefficients of every source patch, `[n, n_coef]`.
    pub fn source_centers(&self) -> Vec<f64> {
        let plen = self.patch_len();
        self.patches
            .chunks_exact(plen)
            .flat_map(|p| (0..self.n_coef).map(move |c| p[c * PATCH_VOXELS + PATCH_CENTER]))
            .collect()
    }
}

/// Signal-space loss and parameter gradients over a set of samples, summed in
/// fixed shard order. The loss is normalized by `denom_samples` samples.
pub fn loss_and_grads(
    params: &NetworkParams,
    patches: &[f64],
    target_signal: &[f64],
    basis_t: &Arc<NdTensor>,
    denom_samples: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let plen = params.spec.n_coef() * PATCH_VOXELS;
    let nd = basis_t.shape()[1];
    let n = patches.len() / plen;
    if target_signal.len() != n * nd {
        return Err(Error::Shape("target signal does not match the batch".into()));
    }
    let scale = 1.0 / (denom_samples * nd) as f64;
    let shards: Vec<(f64, Vec<Vec<f64>>)> = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|s| {
            let lo = s * SHARD;
            let hi = (lo + SHARD).min(n);
            let m = hi - lo;
            let mut g = Graph::new();
            let vars = params.attach(&mut g);
            let x = g.constant(params.input_tensor(&patches[lo * plen..hi * plen], m)?);
            let pred = params.forward_graph(&mut g, &vars, x)?;
            let sig = g.matmul_const(pred, Arc::clone(basis_t))?;
            let tgt = g.constant(NdTensor::new(vec![m, nd], target_signal[lo * nd..hi * nd].to_vec())?);
            let d = g.sub(sig, tgt)?;
            let sq = g.square(d);
            let total = g.sum(sq);
            let loss = g.scale(total, scale);
            g.backward(loss)?;
            let value = g.value(loss).item();
            let grads = vars
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;

    let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for (l, gs) in shards {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

struct NetworkRunner<'a> {
    params: NetworkParams,
    train: &'a TrainingSet,
    val: &'a TrainingSet,
    basis: &'a DMatrix<f64>,
    basis_t: Arc<NdTensor>,
    seed: u64,
}

impl EpochRunner for NetworkRunner<'_> {
    type Snapshot = NetworkParams;

    fn train_epoch(&mut self, epoch: usize, opt: &mut Optimizer, batch_size: usize) -> Result<f64> {
        let n = self.train.n;
        let plen = self.train.patch_len();
        let nd = self.basis.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut weighted = 0.0;
        let mut patches = Vec::with_capacity(batch_size * plen);
        let mut targets = Vec::with_capacity(batch_size * nd);
        for idx in order.chunks(batch_size) {
            patches.clear();
            targets.clear();
            for &i in idx {
                patches.extend_from_slice(&self.train.patches[i * plen..(i + 1) * plen]);
                targets.extend_from_slice(&self.train.target_signal[i * nd..(i + 1) * nd]);
            }
            let (loss, grads) = loss_and_grads(&self.params, &patches, &targets, &self.basis_t, idx.len())?;
            if !loss.is_finite() {
                return Ok(f64::NAN);
            }
            opt.step(&mut self.params.tensors, &grads)?;
            weighted += loss * idx.len() as f64;
        }
        Ok(weighted / n as f64)
    }

    fn validation_loss(&mut self) -> Result<f64> {
        validation_loss(&self.params, self.val, self.basis)
    }

    fn snapshot(&self) -> NetworkParams {
        self.params.clone()
    }
}

/// Signal-space MSE of `params` on a held-out set (no RISH projection).
pub fn validation_loss(params: &NetworkParams, set: &TrainingSet, basis: &DMatrix<f64>) -> Result<f64> {
    let pred = params.predict(&set.patches, set.n)?;
    signal_mse_loss(&pred, &set.target_coeffs, basis)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: TrainLog,
}

/// Trains `model` on the pooled patches of `train` and selects the epoch with
/// the lowest validation loss on `val`.
pub fn train(model: NetworkParams, train: &[&ShPair], val: &ShPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training subjects".into()));
    }
    let table = &val.target_table;
    for p in train {
        if !p.target_table.same_as(table, 1e-9) {
            return Err(Error::Invalid(format!(
                "subject {} uses a different target direction set",
                p.id
            )));
        }
    }
    if val.source.mask.count() == 0 {
        return Err(Error::Invalid(format!("validation subject {} has an empty mask", val.id)));
    }
    let spec = val.target.spec;
    if model.spec.sh_order != spec.order {
        return Err(Error::Invalid(format!(
            "network order {} vs SH order {}",
            model.spec.sh_order, spec.order
        )));
    }
    let basis = design_matrix(&spec, &table.dirs)?;
    let train_set = TrainingSet::from_pairs(train, &basis)?;
    let val_set = TrainingSet::from_pairs(&[val], &basis)?;
    let mut runner = NetworkRunner {
        params: model,
        train: &train_set,
        val: &val_set,
        basis: &basis,
        basis_t: basis_transpose(&basis),
        seed: cfg.seed,
    };
    let (params, log) = run_schedule(&mut runner, cfg)?;
    Ok(TrainOutcome { params, log })
}

//! Desk-scale supervised training: loss plumbing, SGD/Adam, a deterministic
//! epoch loop, evaluation, and lossless checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::LabeledDataset;
use crate::model::{argmax, CnnModel, Gradients, ScdcfModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Uniform access to the two trainable model kinds.
pub trait Trainable {
    fn kind(&self) -> &'static str;
    fn loss_and_grads(&mut self, images: &[&Tensor], labels: &[u8]) -> Result<(f64, Gradients)>;
    fn logits_eval(&mut self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>>;
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<Vec<f64>>;
    fn update_params(&mut self, f: &mut dyn FnMut(usize, &mut [f64]));
    fn state_names(&self) -> Vec<String>;
    fn state(&self) -> Vec<Vec<f64>>;
    fn update_state(&mut self, f: &mut dyn FnMut(usize, &mut [f64]));
    /// One-line topology echo stored in checkpoints.
    fn spec_echo(&self) -> String;
}

impl Trainable for ScdcfModel {
    fn kind(&self) -> &'static str {
        "scdcf"
    }

    fn loss_and_grads(&mut self, images: &[&Tensor], labels: &[u8]) -> Result<(f64, Gradients)> {
        ScdcfModel::loss_and_grads(self, images, labels, true)
    }

    fn logits_eval(&mut self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        self.forward_logits(images, false)
    }

    fn param_names(&self) -> Vec<String> {
        ScdcfModel::param_names(self)
    }

    fn params(&self) -> Vec<Vec<f64>> {
        self.visit_params().iter().map(|s| s.to_vec()).collect()
    }

    fn update_params(&mut self, f: &mut dyn FnMut(usize, &mut [f64])) {
        self.visit_params_mut(|i, s| f(i, s));
    }

    fn state_names(&self) -> Vec<String> {
        ScdcfModel::state_names(self)
    }

    fn state(&self) -> Vec<Vec<f64>> {
        self.visit_state().iter().map(|s| s.to_vec()).collect()
    }

    fn update_state(&mut self, f: &mut dyn FnMut(usize, &mut [f64])) {
        self.visit_state_mut(|i, s| f(i, s));
    }

    fn spec_echo(&self) -> String {
        let widths: Vec<String> = self.spec.layers.iter().map(|l| l.m_out.to_string()).collect();
        format!(
            "scdcf K={} K_alpha={} T={} N_s={} L={} L_alpha={} widths={} hidden={} classes={} input={} padding={}",
            self.spec.k,
            self.spec.k_alpha,
            self.spec.grid.t(),
            self.spec.grid.n_s(),
            self.spec.layers[0].l,
            self.spec.layers.last().unwrap().l_alpha,
            widths.join("-"),
            self.hidden,
            self.classes,
            self.input_hw,
            self.spec.padding.name(),
        )
    }
}

impl Trainable for CnnModel {
    fn kind(&self) -> &'static str {
        "cnn"
    }

    fn loss_and_grads(&mut self, images: &[&Tensor], labels: &[u8]) -> Result<(f64, Gradients)> {
        CnnModel::loss_and_grads(self, images, labels, true)
    }

    fn logits_eval(&mut self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        self.forward_logits(images, false)
    }

    fn param_names(&self) -> Vec<String> {
        CnnModel::param_names(self)
    }

    fn params(&self) -> Vec<Vec<f64>> {
        self.visit_params().iter().map(|s| s.to_vec()).collect()
    }

    fn update_params(&mut self, f: &mut dyn FnMut(usize, &mut [f64])) {
        self.visit_params_mut(|i, s| f(i, s));
    }

    fn state_names(&self) -> Vec<String> {
        CnnModel::state_names(self)
    }

    fn state(&self) -> Vec<Vec<f64>> {
        self.visit_state().iter().map(|s| s.to_vec()).collect()
    }

    fn update_state(&mut self, f: &mut dyn FnMut(usize, &mut [f64])) {
        self.visit_state_mut(|i, s| f(i, s));
    }

    fn spec_echo(&self) -> String {
        let widths: Vec<String> = self.kernels.iter().map(|k| k.shape()[1].to_string()).collect();
        format!("cnn widths={} l={}", widths.join("-"), self.kernels[0].shape()[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

impl OptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptKind::Sgd),
            "adam" => Ok(OptKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{}'", other))),
        }
    }
}

/// Optimizer with a step-decayed learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr0: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr0: f64, decay_epochs: Vec<usize>, decay_factor: f64, shapes: &[usize]) -> Self {
        Optimizer {
            kind,
            lr0,
            decay_epochs,
            decay_factor,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Learning rate during `epoch` (1-based): decays after each listed epoch
    /// has completed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr0 * self.decay_factor.powi(decays as i32)
    }

    pub fn apply<M: Trainable + ?Sized>(&mut self, model: &mut M, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step;
        match self.kind {
            OptKind::Sgd => {
                model.update_params(&mut |i, w| {
                    for (wv, gv) in w.iter_mut().zip(&grads[i]) {
                        *wv -= lr * gv;
                    }
                });
            }
            OptKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let m = &mut self.m;
                let v = &mut self.v;
                model.update_params(&mut |i, w| {
                    let (ms, vs) = (&mut m[i], &mut v[i]);
                    for ((wv, gv), (mv, vv)) in w
                        .iter_mut()
                        .zip(&grads[i])
                        .zip(ms.iter_mut().zip(vs.iter_mut()))
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *wv -= lr * mh / (vh.sqrt() + eps);
                    }
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_accuracy,lr\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch,
                r.train_loss.map(crate::harness::format_float).unwrap_or_default(),
                crate::harness::format_float(r.eval_accuracy),
                crate::harness::format_float(r.lr),
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptKind,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Checkpoints are written here (at decay epochs and at the end) when set.
    pub checkpoint_path: Option<std::path::PathBuf>,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            optimizer: OptKind::Adam,
            lr: 0.01,
            decay_epochs: vec![5, 10],
            decay_factor: 0.1,
            seed,
            checkpoint_path: None,
        }
    }
}

/// Argmax-match fraction on a dataset, batched inference with running
/// statistics.
pub fn evaluate<M: Trainable + ?Sized>(model: &mut M, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for chunk in data.images.chunks(64).zip_longest_labels(&data.labels, 64) {
        let (imgs, labels) = chunk;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let logits = model.logits_eval(&refs)?;
        for (row, &label) in logits.iter().zip(labels) {
            if argmax(row) == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// Small helper to iterate image/label chunks in lockstep.
trait ChunkPairs<'a> {
    fn zip_longest_labels(
        self,
        labels: &'a [u8],
        size: usize,
    ) -> Box<dyn Iterator<Item = (&'a [Tensor], &'a [u8])> + 'a>;
}

impl<'a> ChunkPairs<'a> for std::slice::Chunks<'a, Tensor> {
    fn zip_longest_labels(
        self,
        labels: &'a [u8],
        size: usize,
    ) -> Box<dyn Iterator<Item = (&'a [Tensor], &'a [u8])> + 'a> {
        Box::new(self.zip(labels.chunks(size)))
    }
}

/// Deterministic training loop: seeded shuffling, fixed reduction order,
/// per-epoch logging, checkpoints at decay epochs and at the end.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &LabeledDataset,
    eval_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = Optimizer::new(
        config.optimizer,
        config.lr,
        config.decay_epochs.clone(),
        config.decay_factor,
        &shapes,
    );
    let mut log = TrainLog::default();
    let initial_acc = evaluate(model, eval_set)?;
    log.records.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        eval_accuracy: initial_acc,
        lr: opt.lr_at(1),
    });
    let n = train_set.len();
    for epoch in 1..=config.epochs {
        let lr = opt.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let imgs: Vec<&Tensor> = batch.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(&imgs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::State(format!(
                    "training diverged at epoch {} (loss {})",
                    epoch, loss
                )));
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            opt.apply(model, &grads, lr);
        }
        let eval_accuracy = evaluate(model, eval_set)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / seen as f64),
            eval_accuracy,
            lr,
        });
        if let Some(path) = &config.checkpoint_path {
            if config.decay_epochs.contains(&epoch) || epoch == config.epochs {
                save_checkpoint(model, &opt, epoch, config.seed, path)?;
            }
        }
    }
    if config.epochs == 0 {
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(model, &opt, 0, config.seed, path)?;
        }
    }
    Ok(log)
}

/// Checkpoint container: a text header listing every named buffer, then the
/// little-endian f64 payload in header order. Parameters, running statistics,
/// and optimizer moments all round-trip bit-exactly.
pub fn save_checkpoint<M: Trainable + ?Sized>(
    model: &M,
    opt: &Optimizer,
    epoch: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut header = String::new();
    header.push_str("format=checkpoint-v1\n");
    let _ = writeln!(header, "model={}", model.kind());
    let _ = writeln!(header, "spec={}", model.spec_echo());
    let _ = writeln!(header, "epoch={}", epoch);
    let _ = writeln!(header, "seed={}", seed);
    let _ = writeln!(header, "opt_step={}", opt.step);
    let mut payload: Vec<f64> = Vec::new();
    let params = model.params();
    for (name, values) in model.param_names().iter().zip(&params) {
        let _ = writeln!(header, "param={}:{}", name, values.len());
        payload.extend_from_slice(values);
    }
    let state = model.state();
    for (name, values) in model.state_names().iter().zip(&state) {
        let _ = writeln!(header, "state={}:{}", name, values.len());
        payload.extend_from_slice(values);
    }
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        let _ = writeln!(header, "opt=m{}:{}", i, m.len());
        payload.extend_from_slice(m);
        let _ = writeln!(header, "opt=v{}:{}", i, v.len());
        payload.extend_from_slice(v);
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint into an architecturally matching model. Returns
/// `(epoch, optimizer)` with the restored moments.
pub fn load_checkpoint<M: Trainable + ?Sized>(model: &mut M, config: &TrainConfig, path: &Path) -> Result<(usize, Optimizer)> {
    let bytes = std::fs::read(path)?;
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("missing checkpoint header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..sep]).map_err(|_| Error::Format("non-UTF8 header".into()))?;
    let mut epoch = 0usize;
    let mut opt_step = 0u64;
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint line '{}'", line)))?;
        match k {
            "format" => {
                if v != "checkpoint-v1" {
                    return Err(Error::Format(format!("unknown checkpoint format '{}'", v)));
                }
            }
            "model" => {
                if v != model.kind() {
                    return Err(Error::Format(format!(
                        "checkpoint is for model '{}', expected '{}'",
                        v,
                        model.kind()
                    )));
                }
            }
            "spec" => {}
            "seed" => {}
            "epoch" => epoch = v.parse().map_err(|_| Error::Format("bad epoch".into()))?,
            "opt_step" => opt_step = v.parse().map_err(|_| Error::Format("bad opt_step".into()))?,
            "param" | "state" | "opt" => {
                let (name, len) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad entry '{}'", v)))?;
                entries.push((
                    k.to_string(),
                    name.to_string(),
                    len.parse().map_err(|_| Error::Format("bad entry length".into()))?,
                ));
            }
            other => return Err(Error::Format(format!("unknown checkpoint key '{}'", other))),
        }
    }
    let total: usize = entries.iter().map(|(_, _, n)| n).sum();
    let payload_off = sep + 2;
    if bytes.len() < payload_off + total * 8 {
        return Err(Error::Format("truncated checkpoint payload".into()));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(entries.len());
    let mut off = payload_off;
    for (_, _, n) in &entries {
        let mut buf = Vec::with_capacity(*n);
        for _ in 0..*n {
            buf.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        values.push(buf);
    }

    let param_names = model.param_names();
    let state_names = model.state_names();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = Optimizer::new(
        config.optimizer,
        config.lr,
        config.decay_epochs.clone(),
        config.decay_factor,
        &shapes,
    );
    opt.step = opt_step;
    let mut p_idx = 0usize;
    let mut s_idx = 0usize;
    for ((kind, name, len), vals) in entries.iter().zip(values) {
        match kind.as_str() {
            "param" => {
                if p_idx >= param_names.len() || &param_names[p_idx] != name || shapes[p_idx] != *len {
                    return Err(Error::Format(format!(
                        "checkpoint parameter '{}' does not match the model layout",
                        name
                    )));
                }
                let idx = p_idx;
                model.update_params(&mut |i, w| {
                    if i == idx {
                        w.copy_from_slice(&vals);
                    }
                });
                p_idx += 1;
            }
            "state" => {
                if s_idx >= state_names.len() || &state_names[s_idx] != name {
                    return Err(Error::Format(format!(
                        "checkpoint state '{}' does not match the model layout",
                        name
                    )));
                }
                let idx = s_idx;
                model.update_state(&mut |i, w| {
                    if i == idx {
                        w.copy_from_slice(&vals);
                    }
                });
                s_idx += 1;
            }
            _ => {
                // opt entries arrive as m0, v0, m1, v1, ... in slot order.
                let slot: usize = name[1..]
                    .parse()
                    .map_err(|_| Error::Format("bad optimizer entry".into()))?;
                if name.starts_with('m') {
                    opt.m[slot] = vals;
                } else {
                    opt.v[slot] = vals;
                }
            }
        }
    }
    if p_idx != param_names.len() {
        return Err(Error::Format("checkpoint is missing parameters".into()));
    }
    Ok((epoch, opt))
}

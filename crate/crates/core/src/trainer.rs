//! One training step in the order of the multi-supervision pseudocode,
//! the epoch loop, SGD with momentum (or AdamW), checkpoints and metrics.

use crate::augment::{augment_image, eda_augment, mlm_mask, sample_rng, AugmentConfig, Lexicon};
use crate::data::{make_batches, pack, Sample, Vocab, PAD};
use crate::error::{Error, Result};
use crate::losses::{
    clip_loss, mlm_loss, mvs_loss, nns_loss, simsiam_loss, LossReport, LossTerms, LossWeights,
};
use crate::nets::{
    decays, encode_image, encode_text, init_params, mlm_logits, project, simsiam_heads, Bound, Modality, ModelConfig,
    ModelParams, ParamSet, TokenBatch, LOGIT_SCALE,
};
use crate::nnqueue::FeatureQueue;
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// `momentum` is the first-moment decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_base: f64,
    pub lr_peak: f64,
    pub warmup_epochs: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Zero disables the queue; nearest-neighbor targets then fall back to
    /// the batch's own text features.
    pub queue_capacity: usize,
    pub seed: u64,
    /// Lower bound on the temperature.
    pub tau_min: f64,
    /// Learning-rate multipliers keyed by parameter-name prefix; the
    /// longest matching prefix wins.
    pub lr_mult: BTreeMap<String, f64>,
    pub unmasked_contrastive: bool,
    pub nns_both_views: bool,
    pub mvs_average: bool,
    pub min_count: usize,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr_scale = 128.0 / 10240.0;
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.2,
            lr_base: 0.01 * lr_scale,
            lr_peak: 0.2 * lr_scale,
            warmup_epochs: 1.0,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            queue_capacity: 4096,
            seed: 0,
            tau_min: 0.01,
            lr_mult: BTreeMap::new(),
            unmasked_contrastive: false,
            nns_both_views: false,
            mvs_average: false,
            min_count: 1,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=self.epochs as f64).contains(&self.warmup_epochs) {
            return Err(Error::Config(format!(
                "warmup_epochs {} outside [0, epochs]",
                self.warmup_epochs
            )));
        }
        if !(self.tau_min > 0.0) || self.lr_base < 0.0 || self.lr_peak < 0.0 {
            return Err(Error::Config("tau_min must be positive and learning rates non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_beta2 must be in [0, 1) and adam_eps positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from a dotted path, e.g. `augment.gray_prob=0.1`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        apply_override(self, assignment)
    }

    pub fn lr_multiplier(&self, name: &str) -> f64 {
        self.lr_mult
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(1.0, |(_, &m)| m)
    }
}

/// Sets one field of any serde-backed config from `dotted.key=value`.
/// The value is parsed as JSON, falling back to a plain string.
pub fn apply_override<T: Serialize + serde::de::DeserializeOwned>(target: &mut T, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut tree = serde_json::to_value(&*target)?;
    let mut slot = &mut tree;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    *target = serde_json::from_value(tree).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
    Ok(())
}

/// Linear warm-up from `lr_base` to `lr_peak`, then cosine decay reaching
/// zero at the final step.
pub fn lr_schedule(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let warm = (cfg.warmup_epochs * steps_per_epoch as f64).round();
    let s = step as f64;
    if s < warm {
        return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * s / warm;
    }
    let span = total - 1.0 - warm;
    let progress = if span > 0.0 { ((s - warm) / span).min(1.0) } else { 1.0 };
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub momentum: ParamSet<f32>,
    /// Second-moment estimates; empty for SGD.
    pub second: ParamSet<f32>,
    pub step: u64,
    pub lr: f64,
}

fn zeros_like(params: &ParamSet<f32>) -> ParamSet<f32> {
    let mut out = ParamSet::default();
    for (name, t) in params.iter() {
        out.insert(name, Tensor::zeros(t.shape()));
    }
    out
}

impl OptimState {
    pub fn new(params: &ParamSet<f32>, optimizer: Optimizer) -> Self {
        OptimState {
            momentum: zeros_like(params),
            second: match optimizer {
                Optimizer::Sgd => ParamSet::default(),
                Optimizer::AdamW => zeros_like(params),
            },
            step: 0,
            lr: 0.0,
        }
    }
}

/// Training samples with their caption word ids.
pub struct TrainData {
    pub samples: Vec<Sample>,
    pub words: Vec<Vec<usize>>,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
}

impl TrainData {
    pub fn new(samples: Vec<Sample>, vocab: Vocab, lexicon: Lexicon) -> Self {
        let words = samples.iter().map(|s| vocab.encode_words(&s.caption)).collect();
        TrainData {
            samples,
            words,
            vocab,
            lexicon,
        }
    }
}

/// Two augmented views of every sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub indices: Vec<usize>,
    pub images1: Tensor<f32>,
    pub images2: Tensor<f32>,
    /// View-1 text before masking.
    pub text1: TokenBatch,
    /// View-1 text after masking.
    pub text1_masked: TokenBatch,
    pub text2: TokenBatch,
    pub mlm_positions: Vec<Vec<usize>>,
    pub mlm_originals: Vec<Vec<usize>>,
}

fn token_batch(rows: Vec<(Vec<usize>, usize)>) -> TokenBatch {
    let len = rows.iter().map(|r| r.1).max().unwrap_or(1);
    let trimmed: Vec<Vec<usize>> = rows.into_iter().map(|(ids, l)| ids[..l].to_vec()).collect();
    TokenBatch::from_rows(&trimmed, len, PAD)
}

/// Deterministic in `(seed, epoch, sample index)` only.
pub fn prepare_batch(data: &TrainData, indices: &[usize], epoch: u64, cfg: &TrainConfig) -> Result<PreparedBatch> {
    let max_len = cfg.model.context_length;
    let mut img1 = Vec::new();
    let mut img2 = Vec::new();
    let mut t1 = Vec::new();
    let mut t1m = Vec::new();
    let mut t2 = Vec::new();
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    let mut shape = Vec::new();
    for &idx in indices {
        let s = &data.samples[idx];
        let mut rng = sample_rng(cfg.seed, epoch, idx as u64);
        let a = augment_image(&s.image, &cfg.augment, &mut rng)?;
        let b = augment_image(&s.image, &cfg.augment, &mut rng)?;
        shape = a.shape().to_vec();
        img1.extend_from_slice(a.data());
        img2.extend_from_slice(b.data());
        let e1 = eda_augment(&data.words[idx], &cfg.augment, &data.lexicon, &mut rng);
        let e2 = eda_augment(&data.words[idx], &cfg.augment, &data.lexicon, &mut rng);
        let (ids1, len1) = pack(&e1.tokens, max_len);
        let masked = mlm_mask(&ids1[..len1], &cfg.augment, data.vocab.len(), &mut rng);
        t1m.push((masked.tokens, len1));
        t1.push((ids1, len1));
        t2.push(pack(&e2.tokens, max_len));
        positions.push(masked.positions);
        originals.push(masked.originals);
    }
    let n = indices.len();
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    Ok(PreparedBatch {
        indices: indices.to_vec(),
        images1: Tensor::new(full.clone(), img1)?,
        images2: Tensor::new(full, img2)?,
        text1: token_batch(t1),
        text1_masked: token_batch(t1m),
        text2: token_batch(t2),
        mlm_positions: positions,
        mlm_originals: originals,
    })
}

fn concat_images(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn split_rows<'g>(v: Var<'g, f32>, n: usize) -> Result<(Var<'g, f32>, Var<'g, f32>)> {
    let first: Vec<usize> = (0..n).collect();
    let second: Vec<usize> = (n..2 * n).collect();
    Ok((v.gather_rows(&first)?, v.gather_rows(&second)?))
}

/// Forward pass of every active term. Returns the loss terms and the
/// view-1 contrastive text features that feed the queue.
fn forward<'g>(
    g: &'g Graph<f32>,
    bp: &Bound<'g, f32>,
    batch: &PreparedBatch,
    queue: Option<&FeatureQueue>,
    cfg: &TrainConfig,
) -> Result<(LossTerms<'g, f32>, Tensor<f32>)> {
    let n = batch.indices.len();
    let (alpha, beta, gamma) = (cfg.alpha > 0.0, cfg.beta > 0.0, cfg.gamma > 0.0);
    let two_image_views = alpha || beta || gamma;

    let (f1, f2) = if two_image_views {
        let both = encode_image(bp, g.constant(concat_images(&batch.images1, &batch.images2)?))?;
        let (a, b) = split_rows(both, n)?;
        (a, Some(b))
    } else {
        (encode_image(bp, g.constant(batch.images1.clone()))?, None)
    };
    let zi1 = project(bp, f1, Modality::Image)?;
    let zi2 = f2.map(|f| project(bp, f, Modality::Image)).transpose()?;

    let contrastive = if alpha && !cfg.unmasked_contrastive {
        &batch.text1_masked
    } else {
        &batch.text1
    };
    let mut sequences = contrastive.clone();
    if beta {
        sequences = sequences.concat(&batch.text2)?;
    }
    let text = encode_text(bp, &sequences)?;
    let sent = project(bp, text.sent_feat, Modality::Text)?;
    let (zt1, zt2) = if beta {
        let (a, b) = split_rows(sent, n)?;
        (a, Some(b))
    } else {
        (sent, None)
    };

    let inv_tau = bp.get(LOGIT_SCALE)?.exp();
    let clip = clip_loss(zi1, zt1, inv_tau)?;

    let (iss, tss) = if alpha {
        let ss = simsiam_heads(bp, f1, f2.expect("second view encoded"))?;
        let iss = simsiam_loss(ss.z, ss.z_aug, ss.p, ss.p_aug)?;
        let (word_feats, len) = if cfg.unmasked_contrastive {
            let masked = encode_text(bp, &batch.text1_masked)?;
            (masked.word_feats, masked.len)
        } else {
            let rows: Vec<usize> = (0..n * text.len).collect();
            (text.word_feats.gather_rows(&rows)?, text.len)
        };
        let logits = mlm_logits(bp, word_feats, n, len)?;
        let tss = mlm_loss(logits, &batch.mlm_positions, &batch.mlm_originals)?.loss;
        (Some(iss), Some(tss))
    } else {
        (None, None)
    };

    let mvs = match (beta, zi2, zt2) {
        (true, Some(i2), Some(t2)) => Some(mvs_loss(zi1, i2, zt1, t2, inv_tau, cfg.mvs_average)?),
        _ => None,
    };

    let text_feats = zt1.value();
    let nns = if gamma {
        let found = match queue {
            Some(q) => q.nearest(&text_feats)?.map(|nb| nb.rows),
            None => None,
        };
        let nn = g.constant(found.unwrap_or_else(|| text_feats.clone()));
        let i2 = zi2.expect("second view encoded");
        let mut l = nns_loss(i2, nn, inv_tau)?;
        if cfg.nns_both_views {
            l = l.add(nns_loss(zi1, nn, inv_tau)?)?;
        }
        Some(l)
    } else {
        None
    };
    Ok((LossTerms { clip, iss, tss, mvs, nns }, text_feats))
}

/// SGD: `buf = μ·buf + (g + λ·w)`, `w -= lr·mult·buf`.
/// AdamW: bias-corrected moments with decoupled decay `w -= lr·mult·λ·w`.
/// Parameters that received no gradient are left untouched.
fn optimizer_update(
    params: &mut ParamSet<f32>,
    optim: &mut OptimState,
    grads: &[Option<Tensor<f32>>],
    lr: f64,
    cfg: &TrainConfig,
) {
    let names: Vec<String> = params.names().to_vec();
    let b1 = cfg.momentum as f32;
    let b2 = cfg.adam_beta2 as f32;
    let t = optim.step as i32 + 1;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let eps = cfg.adam_eps as f32;
    for (k, name) in names.iter().enumerate() {
        let Some(grad) = &grads[k] else { continue };
        let wd = if decays(name) { cfg.weight_decay as f32 } else { 0.0 };
        let step = (lr * cfg.lr_multiplier(name)) as f32;
        let m = optim.momentum.get_mut(name).expect("moments mirror params");
        let w = params.get_mut(name).expect("parameter exists");
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((wv, mv), &gv) in w.data_mut().iter_mut().zip(m.data_mut()).zip(grad.data()) {
                    *mv = b1 * *mv + (gv + wd * *wv);
                    *wv -= step * *mv;
                }
            }
            Optimizer::AdamW => {
                let v = optim.second.get_mut(name).expect("moments mirror params");
                for (((wv, mv), vv), &gv) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data()) {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    *wv -= step * (wd * *wv + (*mv / c1) / ((*vv / c2).sqrt() + eps));
                }
            }
        }
    }
}

/// Runs one step: forward, queue lookup with the current text features,
/// all losses, backward, SGD update, temperature clamp, then the FIFO push.
pub fn train_step(
    params: &mut ModelParams<f32>,
    optim: &mut OptimState,
    queue: Option<&mut FeatureQueue>,
    batch: &PreparedBatch,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let g = Graph::new();
    let bp = params.bind(&g, true);
    let (terms, text_feats) = forward(&g, &bp, batch, queue.as_deref(), cfg)?;
    let (total, report) = terms.combine(&cfg.weights())?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step: optim.step,
            report: format!("{report:?}"),
        });
    }
    let grads = g.backward(total)?;
    let per_param: Vec<Option<Tensor<f32>>> = bp.vars().iter().map(|&v| grads.get(v).cloned()).collect();
    if per_param.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            step: optim.step,
            report: format!("non-finite gradient; losses {report:?}"),
        });
    }
    drop(bp);
    optimizer_update(&mut params.params, optim, &per_param, lr, cfg);
    let max_scale = (1.0 / cfg.tau_min).ln() as f32;
    if let Some(s) = params.params.get_mut(LOGIT_SCALE) {
        let v = s.data_mut();
        v[0] = v[0].min(max_scale);
    }
    if let Some(q) = queue {
        q.push_batch(&text_feats)?;
    }
    optim.step += 1;
    optim.lr = lr;
    Ok(report)
}

pub const METRICS_HEADER: &str = "step,epoch,lr,tau,loss_total,loss_clip,loss_iss,loss_tss,loss_mvs,loss_nns";

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub tau: f64,
    pub report: LossReport,
}

impl StepRecord {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.tau, r.total, r.l_clip, r.l_iss, r.l_tss, r.l_mvs, r.l_nns
        )
    }
}

/// Full mutable training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub optim: OptimState,
    pub queue: Option<FeatureQueue>,
    pub vocab: Vocab,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    /// Fresh state; the model vocabulary size follows `vocab`.
    pub fn new(mut cfg: TrainConfig, vocab: Vocab) -> Result<Self> {
        cfg.model.vocab_size = vocab.len();
        cfg.validate()?;
        let params = init_params::<f32>(&cfg.model, cfg.seed)?;
        let optim = OptimState::new(&params.params, cfg.optimizer);
        let queue = match cfg.queue_capacity {
            0 => None,
            c => Some(FeatureQueue::new(c, cfg.model.embed_dim)?),
        };
        Ok(Trainer {
            cfg,
            params,
            optim,
            queue,
            vocab,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.cfg.batch_size
    }

    pub fn step(&mut self, batch: &PreparedBatch, steps_per_epoch: usize) -> Result<StepRecord> {
        let lr = lr_schedule(self.optim.step, steps_per_epoch, &self.cfg);
        let step = self.optim.step;
        let report = train_step(&mut self.params, &mut self.optim, self.queue.as_mut(), batch, lr, &self.cfg)?;
        Ok(StepRecord {
            step,
            epoch: self.epoch,
            lr,
            tau: self.params.tau(),
            report,
        })
    }

    /// Runs one epoch, preparing the next batch on a helper thread while the
    /// current one trains. `on_step` sees every record in order.
    pub fn run_epoch(&mut self, data: &TrainData, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let spe = self.steps_per_epoch(data.samples.len());
        if spe == 0 {
            return Err(Error::Data(format!(
                "{} samples cannot fill one batch of {}",
                data.samples.len(),
                self.cfg.batch_size
            )));
        }
        let batches = make_batches(data.samples.len(), self.cfg.batch_size, self.epoch, self.cfg.seed);
        let epoch = self.epoch;
        let cfg = self.cfg.clone();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = std::sync::mpsc::sync_channel::<Result<PreparedBatch>>(1);
            scope.spawn(move || {
                for idx in &batches {
                    if tx.send(prepare_batch(data, idx, epoch, &cfg)).is_err() {
                        break;
                    }
                }
            });
            for prepared in rx {
                let record = self.step(&prepared?, spe)?;
                on_step(&record)?;
            }
            Ok(())
        })?;
        self.epoch += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub arrays: Vec<ArrayEntry>,
}

const MOMENTUM_PREFIX: &str = "optim.momentum.";
const SECOND_PREFIX: &str = "optim.second.";

pub fn checkpoint_dir(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Writes `header.json` and `params.bin` (little-endian f32 in header order).
pub fn save_checkpoint(t: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    let mut bin: Vec<u8> = Vec::new();
    let mut put = |name: String, tensor: &Tensor<f32>| {
        arrays.push(ArrayEntry {
            name,
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset: bin.len(),
        });
        for v in tensor.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, tensor) in t.params.params.iter() {
        put(name.to_string(), tensor);
    }
    for (name, tensor) in t.optim.momentum.iter() {
        put(format!("{MOMENTUM_PREFIX}{name}"), tensor);
    }
    for (name, tensor) in t.optim.second.iter() {
        put(format!("{SECOND_PREFIX}{name}"), tensor);
    }
    if let Some(q) = &t.queue {
        let (storage, meta) = q.to_arrays();
        put("queue.storage".into(), &storage);
        put("queue.meta".into(), &meta);
    }
    let header = CheckpointHeader {
        format: 1,
        step: t.optim.step,
        epoch: t.epoch,
        lr: t.optim.lr,
        config: t.cfg.clone(),
        vocab: t.vocab.clone(),
        arrays,
    };
    let tmp = dir.join("params.bin.tmp");
    fs::write(&tmp, &bin)?;
    fs::rename(&tmp, dir.join("params.bin"))?;
    fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointHeader, BTreeMap<String, Tensor<f32>>)> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
    let bin = fs::read(dir.join("params.bin"))?;
    let mut arrays = BTreeMap::new();
    for e in &header.arrays {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = bin
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{} extends past params.bin", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((header, arrays))
}

/// Restores the full training state saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let (header, mut arrays) = read_checkpoint(dir)?;
    let mut t = Trainer::new(header.config.clone(), header.vocab.clone())?;
    let names: Vec<String> = t.params.params.names().to_vec();
    for name in &names {
        let a = arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        let m = arrays
            .remove(&format!("{MOMENTUM_PREFIX}{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing momentum for {name}")))?;
        let slot = t.params.params.get_mut(name).expect("fresh params have every name");
        if a.shape() != slot.shape() || m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} expected {:?}", a.shape(), slot.shape())));
        }
        let a_shape = a.shape().to_vec();
        *slot = a;
        *t.optim.momentum.get_mut(name).expect("mirrors params") = m;
        if let Some(slot) = t.optim.second.get_mut(name) {
            *slot = arrays
                .remove(&format!("{SECOND_PREFIX}{name}"))
                .filter(|v| v.shape() == a_shape.as_slice())
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
        }
    }
    t.queue = match (arrays.remove("queue.storage"), arrays.remove("queue.meta")) {
        (Some(s), Some(m)) => Some(FeatureQueue::from_arrays(&s, &m)?),
        (None, None) => None,
        _ => return Err(Error::Checkpoint("queue.storage and queue.meta must appear together".into())),
    };
    t.optim.step = header.step;
    t.optim.lr = header.lr;
    t.epoch = header.epoch;
    Ok(t)
}

/// Model parameters and vocabulary only, for evaluation.
pub fn load_model(dir: &Path) -> Result<(ModelParams<f32>, Vocab, TrainConfig)> {
    let t = load_checkpoint(dir)?;
    Ok((t.params, t.vocab, t.cfg))
}

/// Latest `checkpoints/epoch_*` directory under `out`.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let root = out.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("header.json").exists() && p.join("params.bin").exists())
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

/// Trains for the configured epochs, appending to `out/metrics.csv` and
/// checkpointing after every epoch. With `resume`, continues from the
/// latest checkpoint and drops metrics rows logged after it.
pub fn run_training(cfg: TrainConfig, data: &TrainData, out: &Path, resume: bool) -> Result<Trainer> {
    fs::create_dir_all(out)?;
    let metrics = out.join("metrics.csv");
    let mut trainer = match (resume, latest_checkpoint(out)?) {
        (true, Some(dir)) => {
            let t = load_checkpoint(&dir)?;
            if t.vocab != data.vocab {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the data".into()));
            }
            log::info!("resuming from {} at step {}", dir.display(), t.optim.step);
            t
        }
        _ => Trainer::new(cfg, data.vocab.clone())?,
    };
    let kept: Vec<String> = if resume && metrics.exists() {
        fs::read_to_string(&metrics)?
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < trainer.optim.step))
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    let mut file = std::io::BufWriter::new(fs::File::create(&metrics)?);
    writeln!(file, "{METRICS_HEADER}")?;
    for line in &kept {
        writeln!(file, "{line}")?;
    }
    while (trainer.epoch as usize) < trainer.cfg.epochs {
        trainer.run_epoch(data, |r| {
            writeln!(file, "{}", r.csv())?;
            Ok(())
        })?;
        file.flush()?;
        save_checkpoint(&trainer, &checkpoint_dir(out, trainer.epoch))?;
        log::info!("epoch {} done at step {}", trainer.epoch, trainer.optim.step);
    }
    file.flush()?;
    Ok(trainer)
}

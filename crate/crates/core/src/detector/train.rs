use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{multibox_loss_with_grad, LossBreakdown, LossConfig};
use super::matching::{match_priors, DEFAULT_MATCH_IOU};
use super::nn::{Gradients, MiniSsd, ModelConfig, Tensor};
use super::{DetectorError, Real};
use crate::augment::{augment, AugmentConfig, Sample};
use crate::fsio::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub neg_pos_ratio: usize,
    pub match_iou: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Log a progress line every this many iterations; 0 disables logging.
    pub log_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 3e-4,
            batch_size: 5,
            alpha: 1.0,
            neg_pos_ratio: 3,
            match_iou: DEFAULT_MATCH_IOU,
            seed: 0,
            optimizer: Optimizer::adam(),
            log_every: 100,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 240,000 iterations at the default settings.
    pub fn paper_scale() -> Self {
        Self { iterations: 240_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.match_iou) {
            return bad("match_iou outside [0, 1]");
        }
        self.augment.validate().map_err(DetectorError::Config)
    }

    fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, neg_pos_ratio: self.neg_pos_ratio }
    }
}

/// Random access to training samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Sample, DetectorError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample, DetectorError> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<Sample, DetectorError> {
        Ok(self[index].clone())
    }
}

/// One row of the loss trace; `conf` and `loc` are already divided by the match count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub conf: f64,
    pub loc: f64,
    pub total: f64,
}

impl LossRecord {
    fn from_breakdown(iteration: usize, l: &LossBreakdown) -> Self {
        let n = l.n.max(1) as f64;
        Self { iteration, conf: l.conf / n, loc: l.loc / n, total: l.total }
    }
}

pub fn write_loss_csv<W: Write>(w: W, trace: &[LossRecord]) -> Result<(), DetectorError> {
    let mut out = csv::Writer::from_writer(w);
    for r in trace {
        out.serialize(r).map_err(|e| DetectorError::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<(), DetectorError> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, trace)?;
    crate::fsio::write_atomic_bytes(path, &buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum OptState {
    Sgd,
    Adam { m: Gradients, v: Gradients },
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(model: &mut MiniSsd, grads: &Gradients, lr: f64) {
    let lr = lr as Real;
    for (t, g) in model.params_mut().iter_mut().zip(grads) {
        for (w, &d) in t.data.iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: MiniSsd,
    config: TrainConfig,
    rng: ChaCha8Rng,
    iteration: usize,
    opt: OptState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, mut config: TrainConfig) -> Result<Self, DetectorError> {
        config.augment.output_size = model_config.input_size;
        config.validate()?;
        let model = MiniSsd::new(model_config, config.seed)?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: MiniSsd, config: TrainConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        if config.augment.output_size != model.config().input_size {
            return Err(DetectorError::Config("augment output_size must equal the model input size".into()));
        }
        let opt = match config.optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { .. } => OptState::Adam { m: model.zero_grads(), v: model.zero_grads() },
        };
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self { model, config, rng, iteration: 0, opt })
    }

    pub fn model(&self) -> &MiniSsd {
        &self.model
    }

    pub fn into_model(self) -> MiniSsd {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Moves the stopping point of [`Trainer::run`], e.g. to continue a restored run.
    pub fn set_iterations(&mut self, iterations: usize) {
        self.config.iterations = iterations;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Loss and parameter gradients of one prepared batch, without touching the parameters.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<(LossBreakdown, Gradients), DetectorError> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        let mut assignments = Vec::with_capacity(batch.len());
        for s in batch {
            let (p, c) = self.model.forward(&self.model.input_from_raster(&s.image)?)?;
            preds.push(p);
            caches.push(c);
            assignments.push(match_priors(self.model.priors(), &s.boxes, self.config.match_iou)?);
        }
        let (loss, d_preds) = multibox_loss_with_grad(&preds, &assignments, &self.config.loss())?;
        let mut grads = self.model.zero_grads();
        if loss.n > 0 {
            for (c, d) in caches.iter().zip(&d_preds) {
                self.model.backward(c, d, &mut grads)?;
            }
        }
        Ok((loss, grads))
    }

    fn apply(&mut self, grads: &Gradients) {
        let lr = self.config.lr;
        match (&mut self.opt, self.config.optimizer) {
            (OptState::Sgd, _) => sgd_step(&mut self.model, grads, lr),
            (OptState::Adam { m, v }, Optimizer::Adam { beta1, beta2, eps }) => {
                let t = (self.iteration + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (beta1 as Real, beta2 as Real);
                for (((p, g), m), v) in self.model.params_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &d), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        let mhat = *mi as f64 / c1;
                        let vhat = *vi as f64 / c2;
                        *w -= (lr * mhat / (vhat.sqrt() + eps)) as Real;
                    }
                }
            }
            (OptState::Adam { .. }, Optimizer::Sgd) => unreachable!("optimizer state follows the config"),
        }
    }

    /// Draws a batch, augments it, and takes one optimizer step.
    pub fn step<S: SampleSource + ?Sized>(&mut self, data: &S) -> Result<LossRecord, DetectorError> {
        if data.is_empty() {
            return Err(DetectorError::EmptyDataset);
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = self.rng.gen_range(0..data.len());
            batch.push(augment(&data.sample(i)?, &self.config.augment, &mut self.rng));
        }
        let (loss, grads) = self.batch_gradients(&batch)?;
        self.apply(&grads);
        self.iteration += 1;
        Ok(LossRecord::from_breakdown(self.iteration, &loss))
    }

    /// Runs until `config.iterations` steps have been taken.
    pub fn run<S: SampleSource + ?Sized>(&mut self, data: &S) -> Result<Vec<LossRecord>, DetectorError> {
        let mut trace = Vec::with_capacity(self.config.iterations.saturating_sub(self.iteration));
        while self.iteration < self.config.iterations {
            let r = self.step(data)?;
            if self.config.log_every > 0 && r.iteration % self.config.log_every == 0 {
                let k = self.config.log_every.min(trace.len() + 1);
                let mean = (trace.iter().rev().take(k - 1).map(|r: &LossRecord| r.total).sum::<f64>() + r.total) / k as f64;
                log::info!("iteration {} loss {:.4} (mean of last {k}: {mean:.4})", r.iteration, r.total);
            }
            trace.push(r);
        }
        Ok(trace)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DetectorError> {
        let (m, v) = match &self.opt {
            OptState::Sgd => (None, None),
            OptState::Adam { m, v } => (Some(m), Some(v)),
        };
        let mut tensors: Vec<Tensor> = self.model.params().to_vec();
        for (prefix, state) in [("adam.m.", m), ("adam.v.", v)] {
            if let Some(state) = state {
                for (p, g) in self.model.params().iter().zip(state) {
                    tensors.push(Tensor { name: format!("{prefix}{}", p.name), shape: p.shape.clone(), data: g.clone() });
                }
            }
        }
        let ckpt = Checkpoint {
            model: self.model.config().clone(),
            train: self.config.clone(),
            iteration: self.iteration,
            rng: Some(self.rng.clone()),
            tensors,
        };
        write_atomic(path, |w| ckpt.write(w).map_err(|e| std::io::Error::other(e.to_string())))?;
        Ok(())
    }

    /// Restores a trainer that continues exactly where the saved one stopped.
    pub fn load_checkpoint(path: &Path) -> Result<Self, DetectorError> {
        let ckpt = Checkpoint::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in ckpt.tensors {
            if t.name.starts_with("adam.m.") {
                m.push(t.data);
            } else if t.name.starts_with("adam.v.") {
                v.push(t.data);
            } else {
                params.push(t);
            }
        }
        let mut model = MiniSsd::zeroed(ckpt.model)?;
        model.load_params(params)?;
        let opt = match ckpt.train.optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { .. } => {
                if m.len() != model.params().len() || v.len() != model.params().len() {
                    return Err(DetectorError::Checkpoint("optimizer state does not match the model".into()));
                }
                OptState::Adam { m, v }
            }
        };
        let rng = ckpt.rng.ok_or_else(|| DetectorError::Checkpoint("missing RNG state".into()))?;
        Ok(Self { model, config: ckpt.train, rng, iteration: ckpt.iteration, opt })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    iteration: usize,
    rng: Option<ChaCha8Rng>,
    tensors: Vec<TensorHeader>,
}

/// On-disk layout: magic, u32 version, u64 metadata length, JSON metadata, then every tensor
/// as little-endian f64 values in metadata order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub rng: Option<ChaCha8Rng>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn write<W: Write + ?Sized>(&self, w: &mut W) -> Result<(), DetectorError> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            tensors: self.tensors.iter().map(|t| TensorHeader { name: t.name.clone(), shape: t.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for &v in &t.data {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, DetectorError> {
        let bad = |m: &str| DetectorError::Checkpoint(m.into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(DetectorError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for h in meta.tensors {
            let n: usize = h.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8).map_err(|_| bad("truncated tensor data"))?;
                data.push(f64::from_le_bytes(b8) as Real);
            }
            tensors.push(Tensor { name: h.name, shape: h.shape, data });
        }
        Ok(Self { model: meta.model, train: meta.train, iteration: meta.iteration, rng: meta.rng, tensors })
    }
}

/// Writes a model alone, for inference.
pub fn save_model(model: &MiniSsd, path: &Path) -> Result<(), DetectorError> {
    let ckpt = Checkpoint {
        model: model.config().clone(),
        train: TrainConfig::default(),
        iteration: 0,
        rng: None,
        tensors: model.params().to_vec(),
    };
    write_atomic(path, |w| ckpt.write(w).map_err(|e| std::io::Error::other(e.to_string())))?;
    Ok(())
}

/// Loads the model parameters of a checkpoint, ignoring optimizer state.
pub fn load_model(path: &Path) -> Result<MiniSsd, DetectorError> {
    let ckpt = Checkpoint::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
    let mut model = MiniSsd::zeroed(ckpt.model)?;
    model.load_params(ckpt.tensors.into_iter().filter(|t| !t.name.starts_with("adam.")).collect())?;
    Ok(model)
}

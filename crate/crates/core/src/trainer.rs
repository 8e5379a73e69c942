//! AdamW training on MSE, evaluation and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::Dataset;
use crate::metrics::{aggregate, score, MetricsConfig, MetricsReport};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Graph, Mode, RunningStats, Shape, Tensor, Var};
use crate::unet::{build_unet, model_param_count, UNetConfig, UNetModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 30,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if self.weight_decay < 0.0 {
            bad.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            bad.push("adam betas must lie in [0, 1)".to_string());
        }
        if !(self.adam_eps > 0.0) {
            bad.push(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid TrainConfig: {}", bad.join("; "))))
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape(format!(
                "adamw_step: gradient for {} has shape {}, parameter has {}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {} contains NaN or inf", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, decay) = (cfg.learning_rate, 1.0 - cfg.learning_rate * cfg.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = params.get(id).shape();
        let mut p = params.get(id).data().to_vec();
        let mut m = state.m[k].data().to_vec();
        let mut v = state.v[k].data().to_vec();
        for (((p, m), v), &g) in p.iter_mut().zip(&mut m).zip(&mut v).zip(grads[k].data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
        params.set(id, Tensor::from_vec(shape, p)?)?;
        state.m[k] = Tensor::from_vec(shape, m)?;
        state.v[k] = Tensor::from_vec(shape, v)?;
    }
    Ok(())
}

/// Mean squared error node.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Loss, then gradients for every parameter in store order.
pub fn loss_and_grads(model: &mut UNetModel, x: &Tensor, y: &Tensor, dropout: &mut RngStream) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let pred = model.forward(&mut g, &p, xv, Mode::Train, dropout)?;
    let loss = mse_loss(&mut g, pred, yv)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.get(v)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, loss)` for every optimiser step, steps counted from 1.
    pub losses: Vec<(u64, f64)>,
    pub evals: Vec<EpochEval>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{l:.9e}\n"));
        }
        out
    }
}

/// Owns a model and its optimiser state for the duration of training.
pub struct Trainer {
    pub model: UNetModel,
    pub state: OptimizerState,
    pub cfg: TrainConfig,
    /// Epochs already completed (restored from checkpoints).
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model initialised from `RngStream::new(cfg.seed, "init")`.
    pub fn new(unet: &UNetConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_unet(unet, &RngStream::new(cfg.seed, "init"))?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: UNetModel, cfg: &TrainConfig) -> Self {
        let state = OptimizerState::new(model.params());
        Self {
            model,
            state,
            cfg: cfg.clone(),
            epoch: 0,
        }
    }

    fn dropout_rng(&self) -> RngStream {
        RngStream::new(self.cfg.seed, "dropout").fork(&self.state.step.to_string())
    }

    /// One AdamW step on the listed items. Returns the pre-update loss.
    pub fn step(&mut self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let (x, y) = data.batch(indices)?;
        let mut rng = self.dropout_rng();
        let (loss, grads) = loss_and_grads(&mut self.model, &x, &y, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at step {}", self.state.step + 1)));
        }
        adamw_step(self.model.params_mut(), &grads, &mut self.state, &self.cfg)?;
        Ok(loss)
    }

    /// Index order for one epoch, reshuffled from the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(self.cfg.seed, "shuffle").fork(&epoch.to_string()).shuffle(&mut order);
        order
    }

    /// Train for the remaining epochs. The last partial batch of each epoch is kept.
    pub fn fit(&mut self, data: &Dataset, eval: Option<(&Dataset, &MetricsConfig)>, log: &mut TrainLog) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("train: empty dataset".into()));
        }
        if self.cfg.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the dataset size {}",
                self.cfg.batch_size,
                data.len()
            )));
        }
        while self.epoch < self.cfg.epochs {
            let order = self.epoch_order(self.epoch, data.len());
            for chunk in order.chunks(self.cfg.batch_size) {
                let loss = self.step(data, chunk)?;
                log.losses.push((self.state.step, loss));
            }
            self.epoch += 1;
            if let Some((test, mcfg)) = eval {
                if self.cfg.eval_every > 0 && self.epoch.is_multiple_of(self.cfg.eval_every) {
                    let r = evaluate(&self.model, test, mcfg)?;
                    log.evals.push(EpochEval {
                        epoch: self.epoch,
                        ssim: r.model.ssim,
                        psnr: r.model.psnr,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Build from seed and train. Returns the trained model and its log.
pub fn train(unet: &UNetConfig, data: &Dataset, cfg: &TrainConfig) -> Result<(UNetModel, TrainLog)> {
    let mut trainer = Trainer::new(unet, cfg)?;
    let mut log = TrainLog::default();
    trainer.fit(data, None, &mut log)?;
    Ok((trainer.model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: MetricsReport,
    /// Metrics of the zero-filled network input against the same targets.
    pub zero_filled: MetricsReport,
}

/// Per-image metrics of the model output and of the raw input.
pub fn evaluate(model: &UNetModel, data: &Dataset, cfg: &MetricsConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty dataset".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::with_capacity(data.len());
    let mut base = Vec::with_capacity(data.len());
    for ((id, x), y) in data.ids.iter().zip(&data.inputs).zip(&data.targets) {
        let pred = model.predict(x)?;
        rows.push(score(id.clone(), &pred, y, cfg)?);
        base.push(score(id.clone(), x, y, cfg)?);
    }
    let name = model.config().attention.name();
    let (_, overhead) = model_param_count(model);
    Ok(EvalReport {
        model: aggregate(name, overhead, cfg, rows)?,
        zero_filled: aggregate("zero_filled", 0, cfg, base)?,
    })
}

const CHECKPOINT_FORMAT: &str = "cmrlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    step: u64,
    epoch: usize,
    train: Option<TrainConfig>,
    params: Vec<(String, String)>,
    running_stats: Vec<(String, String, String)>,
    optimizer: Option<Vec<(String, String)>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Model parameters, running statistics, config and (optionally) optimiser
/// moments written as one `.ten` file per tensor plus JSON metadata.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    save_parts(&trainer.model, Some((&trainer.state, &trainer.cfg, trainer.epoch)), dir)
}

pub fn save_model(model: &UNetModel, dir: &Path) -> Result<()> {
    save_parts(model, None, dir)
}

fn save_parts(model: &UNetModel, opt: Option<(&OptimizerState, &TrainConfig, usize)>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), model.config())?;
    let mut params = Vec::new();
    for (name, t) in model.params().iter() {
        let file = format!("param.{name}.ten");
        write_tensor(&dir.join(&file), t)?;
        params.push((name.to_string(), file));
    }
    let mut stats = Vec::new();
    for (name, s) in model.running_stats() {
        let (mf, vf) = (format!("stats.{name}.mean.ten"), format!("stats.{name}.var.ten"));
        let c = s.channels();
        write_tensor(&dir.join(&mf), &Tensor::from_vec(Shape::vector(c), s.mean.clone())?)?;
        write_tensor(&dir.join(&vf), &Tensor::from_vec(Shape::vector(c), s.var.clone())?)?;
        stats.push((name.to_string(), mf, vf));
    }
    let optimizer = match opt {
        Some((state, _, _)) => {
            let mut files = Vec::new();
            for (k, (name, _)) in model.params().iter().enumerate() {
                let (mf, vf) = (format!("adam_m.{name}.ten"), format!("adam_v.{name}.ten"));
                write_tensor(&dir.join(&mf), &state.m[k])?;
                write_tensor(&dir.join(&vf), &state.v[k])?;
                files.push((mf, vf));
            }
            Some(files)
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: opt.map_or(0, |o| o.0.step),
        epoch: opt.map_or(0, |o| o.2),
        train: opt.map(|o| o.1.clone()),
        params,
        running_stats: stats,
        optimizer,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load_parts(dir: &Path) -> Result<(UNetModel, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
            dir.display(),
            manifest.format,
            manifest.version
        )));
    }
    let cfg: UNetConfig = read_json(&dir.join("config.json"))?;
    let mut model = build_unet(&cfg, &RngStream::new(0, "load"))?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::Format(format!(
            "{}: manifest lists {} parameters, config implies {}",
            dir.display(),
            manifest.params.len(),
            model.params().len()
        )));
    }
    for (name, file) in &manifest.params {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| Error::Format(format!("{}: unknown parameter {name}", dir.display())))?;
        model.params_mut().set(id, read_tensor(&dir.join(file))?)?;
    }
    for (name, mf, vf) in &manifest.running_stats {
        let mean = read_tensor(&dir.join(mf))?.into_vec();
        let var = read_tensor(&dir.join(vf))?.into_vec();
        model.set_running_stats(name, RunningStats::from_values(mean, var)?)?;
    }
    Ok((model, manifest))
}

pub fn load_model(dir: &Path) -> Result<UNetModel> {
    load_parts(dir).map(|(m, _)| m)
}

/// Restore a trainer exactly where [`save_checkpoint`] left it.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let (model, manifest) = load_parts(dir)?;
    let (Some(files), Some(cfg)) = (manifest.optimizer, manifest.train) else {
        return Err(Error::Format(format!("{}: checkpoint has no optimiser state", dir.display())));
    };
    let mut state = OptimizerState::new(model.params());
    state.step = manifest.step;
    for (k, (mf, vf)) in files.iter().enumerate() {
        let m = read_tensor(&dir.join(mf))?;
        let v = read_tensor(&dir.join(vf))?;
        if m.shape() != state.m[k].shape() || v.shape() != state.v[k].shape() {
            return Err(Error::Format(format!("{}: optimiser moment shape mismatch in {mf}", dir.display())));
        }
        state.m[k] = m;
        state.v[k] = v;
    }
    Ok(Trainer {
        model,
        state,
        cfg,
        epoch: manifest.epoch,
    })
}

//! Training loop: self-supervised adapter passes and supervised MIL passes.
//!
//! An SSL step differentiates the DA-SSL loss with respect to the adapter and
//! the SimSiam heads only; the MIL is traversed with its weights bound as tape
//! constants. A supervised step differentiates the classification loss with
//! respect to the adapter and the MIL; the heads are not on that tape.
//!
//! Every random draw in pass `p` comes from streams derived from
//! `(train.seed, p, ...)`, so a checkpoint only needs the pass counter to
//! reproduce the rest of a run.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterKind, AdapterParams};
use crate::augment::{make_views, ViewPair};
use crate::autodiff::{Gradients, Tape, Var};
use crate::bag_store::{filter_tumor, read_bag, CohortManifest, FeatureBag};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mil::{class_weights, init_mil, positive_probability, supervised_loss_graph, MilParams};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::params::to_f64;
use crate::rng::{self, derive_seed, str_tag};
use crate::sampler::{uniform_sample, SampledBag, SamplerConfig};
use crate::ssl::{adapt, dassl_graph, init_heads, LossReport, SslHeads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    SslThenSup,
    Joint,
    SupOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ssl,
    Sup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub ssl_epochs: usize,
    pub sup_epochs: usize,
    /// Bags per SSL step.
    pub batch_size: usize,
    pub ssl_lr: f64,
    pub sup_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight on the SSL loss in joint mode.
    pub beta: f64,
    pub seed: u64,
    /// Write a checkpoint after every n-th pass; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::SslThenSup,
            ssl_epochs: 10,
            sup_epochs: 20,
            batch_size: 8,
            ssl_lr: 0.01,
            sup_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta: 0.5,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.ssl_lr > 0.0 && self.sup_lr > 0.0) {
            return Err(Error::Config("train learning rates must be > 0".into()));
        }
        if self.beta < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.beta, weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.schedule != Schedule::SupOnly && self.ssl_epochs == 0 && self.sup_epochs == 0 {
            return Err(Error::Config("train schedule has no epochs".into()));
        }
        Ok(())
    }

    /// The sequence of passes this schedule runs.
    pub fn plan(&self) -> Vec<Phase> {
        match self.schedule {
            Schedule::SslThenSup => std::iter::repeat_n(Phase::Ssl, self.ssl_epochs)
                .chain(std::iter::repeat_n(Phase::Sup, self.sup_epochs))
                .collect(),
            Schedule::Joint => (0..self.ssl_epochs.max(self.sup_epochs))
                .flat_map(|e| {
                    let ssl = (e < self.ssl_epochs).then_some(Phase::Ssl);
                    let sup = (e < self.sup_epochs).then_some(Phase::Sup);
                    ssl.into_iter().chain(sup)
                })
                .collect(),
            Schedule::SupOnly => vec![Phase::Sup; self.sup_epochs],
        }
    }

    fn ssl_weight(&self) -> f64 {
        if self.schedule == Schedule::Joint {
            self.beta
        } else {
            1.0
        }
    }
}

/// A slide ready for training: its (optionally tumor-filtered) bag.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlide {
    pub bag: FeatureBag,
}

impl PreparedSlide {
    pub fn slide_id(&self) -> &str {
        self.bag.slide_id()
    }

    pub fn patient_id(&self) -> &str {
        self.bag.patient_id()
    }

    pub fn target(&self) -> u8 {
        self.bag.target()
    }
}

pub fn prepare_slide(bag: &FeatureBag, filter: bool) -> Result<PreparedSlide> {
    Ok(PreparedSlide {
        bag: filter_tumor(bag, filter)?,
    })
}

/// Reads and filters every bag of a manifest. Targets come from the manifest.
pub fn prepare_manifest(manifest: &CohortManifest, filter: bool) -> Result<Vec<PreparedSlide>> {
    manifest
        .rows()
        .iter()
        .map(|row| {
            let loaded = read_bag(&row.file_path)?.bag;
            let bag = FeatureBag::new(
                &row.slide_id,
                &row.patient_id,
                &row.center_id,
                loaded.features().clone(),
                loaded.coords().clone(),
                loaded.patch_class().to_vec(),
                row.target,
            )?;
            prepare_slide(&bag, filter)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub adapter: Option<AdapterParams>,
    pub mil: MilParams,
    pub heads: SslHeads,
}

impl Model {
    pub fn init(cfg: &ExperimentConfig, input_dim: usize) -> Result<Self> {
        let seed = cfg.train.seed;
        let adapter = match cfg.adapter.kind {
            AdapterKind::None => None,
            kind => Some(init_adapter(
                kind,
                input_dim,
                cfg.adapter.hidden_for(input_dim),
                cfg.adapter.kernel_size,
                derive_seed(seed, &[1]),
            )?),
        };
        Ok(Self {
            adapter,
            mil: init_mil(&cfg.mil, input_dim, derive_seed(seed, &[2]))?,
            heads: init_heads(input_dim, cfg.ssl.latent_dim, derive_seed(seed, &[3]))?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mil.input_dim
    }

    /// Positive-class probability for one sampled bag (eval mode).
    pub fn predict_sampled(&self, sampled: &SampledBag) -> Result<f64> {
        let mut tape = Tape::new();
        let avars = self.adapter.as_ref().map(|a| a.bind(&mut tape, false));
        let mvars = self.mil.bind(&mut tape, false);
        let x = tape.constant(to_f64(&sampled.features));
        let z = adapt(&mut tape, self.adapter.as_ref().zip(avars.as_ref()), x, &sampled.valid_mask);
        let g = self.mil.forward(&mut tape, &mvars, z, &sampled.valid_mask, None)?;
        let logits = tape.value(g.logits).row(0).to_vec();
        Ok(positive_probability(&logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub ssl_adapter: Option<Sgd>,
    pub ssl_heads: Sgd,
    pub sup_adapter: Option<Adam>,
    pub sup_mil: Adam,
}

impl Optimizers {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            ssl_adapter: model.adapter.as_ref().map(|a| Sgd::new(a, cfg.momentum, cfg.weight_decay)),
            ssl_heads: Sgd::new(&model.heads, cfg.momentum, cfg.weight_decay),
            sup_adapter: model.adapter.as_ref().map(|a| Adam::new(a, 0.0)),
            sup_mil: Adam::new(&model.mil, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub optim: Optimizers,
    /// Passes of the plan already completed.
    pub passes_done: usize,
    pub ssl_steps: usize,
    pub sup_steps: usize,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, input_dim: usize) -> Result<Self> {
        let model = Model::init(cfg, input_dim)?;
        let optim = Optimizers::new(&model, &cfg.train);
        Ok(Self {
            model,
            optim,
            passes_done: 0,
            ssl_steps: 0,
            sup_steps: 0,
        })
    }
}

fn grads_for(grads: &Gradients, vars: &[Var]) -> Vec<Option<Array2<f64>>> {
    vars.iter().map(|&v| grads.get(v).cloned()).collect()
}

/// One optimizer step on `weight · L_DA-SSL` over a batch of view pairs.
/// Only the adapter and the heads move.
pub fn ssl_step(state: &mut TrainState, batch: &[&ViewPair], cfg: &ExperimentConfig, lr: f64) -> Result<LossReport> {
    let model = &mut state.model;
    let mut tape = Tape::new();
    let avars = model.adapter.as_ref().map(|a| a.bind(&mut tape, true));
    let mvars = model.mil.bind(&mut tape, false);
    let hvars = model.heads.bind(&mut tape, true);
    let g = dassl_graph(
        &mut tape,
        model.adapter.as_ref().zip(avars.as_ref()),
        (&model.mil, &mvars),
        (&model.heads, &hvars),
        batch,
        &cfg.ssl,
    )?;
    let weight = cfg.train.ssl_weight();
    let objective = if weight == 1.0 { g.l_total } else { tape.scale(g.l_total, weight) };
    let grads = tape.backward(objective);
    if let (Some(adapter), Some(av), Some(opt)) = (model.adapter.as_mut(), avars.as_ref(), state.optim.ssl_adapter.as_mut()) {
        opt.step(adapter, &grads_for(&grads, &av.all), lr);
    }
    state.optim.ssl_heads.step(&mut model.heads, &grads_for(&grads, &hvars.all), lr);
    state.ssl_steps += 1;
    Ok(LossReport {
        l_simsiam: tape.scalar(g.l_simsiam),
        l_cons: tape.scalar(g.l_cons),
        l_total: tape.scalar(g.l_total),
        l_sup: None,
    })
}

/// One Adam step on the supervised loss of a single unpadded bag. Updates the
/// adapter and the MIL; the SSL heads are untouched. Returns the loss.
pub fn supervised_step(
    state: &mut TrainState,
    bag: &SampledBag,
    target: u8,
    weights: Option<[f64; 2]>,
    cfg: &ExperimentConfig,
    masking_rng: &mut rng::Rng,
) -> Result<f64> {
    let model = &mut state.model;
    let mut tape = Tape::new();
    let avars = model.adapter.as_ref().map(|a| a.bind(&mut tape, true));
    let mvars = model.mil.bind(&mut tape, true);
    let x = tape.constant(to_f64(&bag.features));
    let z = adapt(&mut tape, model.adapter.as_ref().zip(avars.as_ref()), x, &bag.valid_mask);
    let g = model.mil.forward(&mut tape, &mvars, z, &bag.valid_mask, Some(masking_rng))?;
    let loss = supervised_loss_graph(&mut tape, &g, target, weights, cfg.mil.diversity_coef)?;
    let grads = tape.backward(loss);
    let lr = cfg.train.sup_lr;
    if let (Some(adapter), Some(av), Some(opt)) = (model.adapter.as_mut(), avars.as_ref(), state.optim.sup_adapter.as_mut()) {
        opt.step(adapter, &grads_for(&grads, &av.all), lr);
    }
    state.optim.sup_mil.step(&mut model.mil, &grads_for(&grads, &mvars.all), lr);
    state.sup_steps += 1;
    Ok(tape.scalar(loss))
}

/// Training log record for one completed pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub pass: usize,
    pub phase: Phase,
    /// Epoch index within its phase.
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_simsiam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cons: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sup: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Where a run writes its artifacts; both are optional.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainResult {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Sampler settings for a slide in a given pass.
fn sampler_for(cfg: &SamplerConfig, slide: &str, pass: Option<usize>, pad: bool) -> SamplerConfig {
    let mut tags = vec![str_tag(slide)];
    if let Some(p) = pass {
        tags.push(p as u64);
    }
    SamplerConfig {
        seed: derive_seed(cfg.seed, &tags),
        pad_to_k: pad,
        ..cfg.clone()
    }
}

/// The bag the model sees at inference: a fixed, unpadded grid sample.
pub fn inference_sample(slide: &PreparedSlide, cfg: &ExperimentConfig) -> Result<SampledBag> {
    uniform_sample(&slide.bag, &sampler_for(&cfg.sampler, slide.slide_id(), None, false))
}

pub fn predict(model: &Model, slides: &[PreparedSlide], cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    slides
        .iter()
        .map(|s| model.predict_sampled(&inference_sample(s, cfg)?))
        .collect()
}

pub fn train(slides: &[PreparedSlide], cfg: &ExperimentConfig, out: &RunOutput) -> Result<TrainResult> {
    let first = slides.first().ok_or(Error::EmptyTrainingSplit)?;
    let state = TrainState::new(cfg, first.bag.dim())?;
    run_from(state, slides, cfg, out)
}

/// Continues a run from a checkpoint written with the same configuration.
pub fn resume(checkpoint: Checkpoint, slides: &[PreparedSlide], cfg: &ExperimentConfig, out: &RunOutput) -> Result<TrainResult> {
    if checkpoint.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint config hash {} does not match the current config {}",
            checkpoint.config_hash,
            cfg.hash()
        )));
    }
    run_from(checkpoint.state, slides, cfg, out)
}

fn run_from(mut state: TrainState, slides: &[PreparedSlide], cfg: &ExperimentConfig, out: &RunOutput) -> Result<TrainResult> {
    cfg.validate()?;
    if slides.is_empty() {
        return Err(Error::EmptyTrainingSplit);
    }
    let d = state.model.input_dim();
    if let Some(bad) = slides.iter().find(|s| s.bag.dim() != d) {
        return Err(Error::Dim(format!("slide {} has d={}, model expects {d}", bad.slide_id(), bad.bag.dim())));
    }
    let tc = &cfg.train;
    let plan = tc.plan();
    let weights = if cfg.mil.class_weighting {
        let pos = slides.iter().filter(|s| s.target() == 1).count() as f64 / slides.len() as f64;
        Some(class_weights(pos)?)
    } else {
        None
    };
    let n_batches = slides.len().div_ceil(tc.batch_size);
    let total_ssl_steps = plan.iter().filter(|&&p| p == Phase::Ssl).count() * n_batches;

    let mut log_file = match &out.log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.passes_done > 0)
                .write(true)
                .truncate(state.passes_done == 0)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), f))
        }
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = Vec::new();
    while state.passes_done < plan.len() {
        let pass = state.passes_done;
        let phase = plan[pass];
        let epoch = plan[..pass].iter().filter(|&&p| p == phase).count();
        let start = Instant::now();
        let mut order: Vec<usize> = (0..slides.len()).collect();
        order.shuffle(&mut rng::derived_rng(tc.seed, &[pass as u64, 0]));
        let mut entry = EpochLog {
            pass,
            phase,
            epoch,
            l_simsiam: None,
            l_cons: None,
            l_total: None,
            l_sup: None,
            wall_time_s: 0.0,
        };
        match phase {
            Phase::Ssl => {
                let mut sums = [0.0; 3];
                for chunk in order.chunks(tc.batch_size) {
                    let pairs = chunk
                        .iter()
                        .map(|&i| {
                            let s = &slides[i];
                            let sampled = uniform_sample(&s.bag, &sampler_for(&cfg.sampler, s.slide_id(), Some(pass), true))?;
                            let aug = crate::augment::AugmentConfig {
                                seed: derive_seed(cfg.augment.seed, &[str_tag(s.slide_id()), pass as u64]),
                                ..cfg.augment.clone()
                            };
                            Ok(make_views(&sampled, &aug))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&ViewPair> = pairs.iter().collect();
                    let lr = cosine_lr(tc.ssl_lr, state.ssl_steps, total_ssl_steps);
                    let r = ssl_step(&mut state, &refs, cfg, lr)?;
                    sums[0] += r.l_simsiam;
                    sums[1] += r.l_cons;
                    sums[2] += r.l_total;
                }
                let n = n_batches as f64;
                entry.l_simsiam = Some(sums[0] / n);
                entry.l_cons = Some(sums[1] / n);
                entry.l_total = Some(sums[2] / n);
            }
            Phase::Sup => {
                let mut sum = 0.0;
                let mut mask_rng = rng::derived_rng(tc.seed, &[pass as u64, 1]);
                for &i in &order {
                    let s = &slides[i];
                    let sampled = uniform_sample(&s.bag, &sampler_for(&cfg.sampler, s.slide_id(), Some(pass), false))?;
                    sum += supervised_step(&mut state, &sampled, s.target(), weights, cfg, &mut mask_rng)?;
                }
                entry.l_sup = Some(sum / slides.len() as f64);
            }
        }
        state.passes_done += 1;
        entry.wall_time_s = start.elapsed().as_secs_f64();
        if let Some((path, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(entry);
        if let Some(dir) = &out.checkpoint_dir {
            let every = tc.checkpoint_every;
            let last = state.passes_done == plan.len();
            if last || (every > 0 && state.passes_done.is_multiple_of(every)) {
                let ckpt = Checkpoint {
                    config_hash: cfg.hash(),
                    state: state.clone(),
                };
                let name = if last {
                    "final.json".to_string()
                } else {
                    format!("pass_{:04}.json", state.passes_done)
                };
                ckpt.save(&dir.join(name))?;
            }
        }
    }
    Ok(TrainResult { state, log })
}

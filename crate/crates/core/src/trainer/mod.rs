//! Adversarial training: alternating critic and generator updates with Adam,
//! loss logging, and bit-exact checkpoint/resume.

pub mod adam;
pub mod checkpoint;
pub mod wasserstein;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_step, Adam, AdamConfig};
pub use wasserstein::{estimate_w1_1d, W1Config, W1Estimate};
pub use checkpoint::{read_archive, write_archive, Archive, Checkpoint, Record, RecordData};

use crate::data::{rect_masks, sample_mask, Dataset};
use crate::error::{Error, Result};
use crate::models::{
    build_critic, build_generator, composite, extract_local_patches, seeded, CriticConfig, CriticModel, CriticScope,
    FusionVariant, GeneratorConfig, GeneratorModel, MaskRect,
};
use crate::nn::ParamStore;
use crate::objectives::{content_loss, generator_objective, gradient_penalty, interpolate_samples, wgan_critic_loss, wgan_generator_loss, LossWeights};
use crate::tensor::{grad, no_grad, Tensor};

/// RNG stream for batch, mask and interpolation draws.
pub const DATA_STREAM: u64 = 0;
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: FusionVariant,
    pub image_size: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_iters: usize,
    pub total_iters: u64,
    pub weights: LossWeights,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    /// Leading iterations that train the generator on the content loss only.
    pub content_only_warmup_iters: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: FusionVariant::LateFusion,
            image_size: 64,
            base_channels: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            critic_iters: 5,
            total_iters: 1000,
            weights: LossWeights::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            content_only_warmup_iters: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critic_iters == 0 {
            return Err(Error::invalid("critic_iters must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.image_size < 16 {
            return Err(Error::invalid(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::new(self.variant, self.image_size, self.base_channels, self.seed)
    }

    /// Side of the square local-critic input.
    pub fn local_patch_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn critic_config(&self, scope: CriticScope) -> CriticConfig {
        CriticConfig {
            scope,
            input_size: match scope {
                CriticScope::Global => self.image_size,
                CriticScope::Local => self.local_patch_size(),
            },
            base_channels: self.base_channels,
            seed: self.seed,
        }
    }

    pub fn is_warmup(&self, iter: u64) -> bool {
        iter < self.content_only_warmup_iters
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub critic_updates: u64,
    pub generator_updates: u64,
}

/// One row of the loss log. Critic columns are means over the iteration's
/// critic steps (zero when none ran); `d_*_loss` excludes the penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub d_global_loss: f64,
    pub d_local_loss: f64,
    pub gp_global: f64,
    pub gp_local: f64,
    pub l1_rgb: f64,
    pub l1_depth: f64,
    pub g_adv_global: f64,
    pub g_adv_local: f64,
    pub g_total: f64,
}

impl LossRecord {
    pub const COLUMNS: [&'static str; 10] = [
        "iter",
        "d_global_loss",
        "d_local_loss",
        "gp_global",
        "gp_local",
        "l1_rgb",
        "l1_depth",
        "g_adv_global",
        "g_adv_local",
        "g_total",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.iter as f64,
            self.d_global_loss,
            self.d_local_loss,
            self.gp_global,
            self.gp_local,
            self.l1_rgb,
            self.l1_depth,
            self.g_adv_global,
            self.g_adv_local,
            self.g_total,
        ]
    }

    pub fn from_values(v: &[f64]) -> Self {
        LossRecord {
            iter: v[0] as u64,
            d_global_loss: v[1],
            d_local_loss: v[2],
            gp_global: v[3],
            gp_local: v[4],
            l1_rgb: v[5],
            l1_depth: v[6],
            g_adv_global: v[7],
            g_adv_local: v[8],
            g_total: v[9],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// The loss log as CSV; floats use the shortest representation that parses
/// back to the same value.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = LossRecord::COLUMNS.join(",");
    out.push('\n');
    for r in log {
        let _ = write!(out, "{}", r.iter);
        for v in &r.values()[1..] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLosses {
    pub d_global: f64,
    pub d_local: f64,
    pub gp_global: f64,
    pub gp_local: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLosses {
    pub l1_rgb: f64,
    pub l1_depth: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub total: f64,
}

/// Ground truth, masks and (for critic steps) interpolation weights of one
/// update.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub indices: Vec<usize>,
    pub rects: Vec<MaskRect>,
    pub t: Vec<f64>,
    pub x_c: Tensor<f64>,
    pub x_d: Tensor<f64>,
    pub m: Tensor<f64>,
}

impl StepBatch {
    pub fn masked(&self) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((self.x_c.mul(&self.m)?, self.x_d.mul(&self.m)?))
    }
}

fn check_finite(what: &str, v: f64, iter: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string(), iter })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: GeneratorModel<f64>,
    pub global_critic: CriticModel<f64>,
    pub local_critic: CriticModel<f64>,
    pub opt_generator: Adam,
    pub opt_global: Adam,
    pub opt_local: Adam,
    pub rng: ChaCha8Rng,
    /// Completed outer iterations.
    pub iter: u64,
    pub counters: UpdateCounters,
    /// Running SHA-256 over every batch's indices, masks and interpolation
    /// weights.
    pub data_digest: [u8; 32],
    pub log: Vec<LossRecord>,
}

fn build_networks(config: &TrainConfig) -> Result<(GeneratorModel<f64>, CriticModel<f64>, CriticModel<f64>)> {
    config.validate()?;
    Ok((
        build_generator(&config.generator_config())?,
        build_critic(&config.critic_config(CriticScope::Global))?,
        build_critic(&config.critic_config(CriticScope::Local))?,
    ))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let (generator, global_critic, local_critic) = build_networks(&config)?;
        let adam = config.adam();
        Ok(Trainer {
            opt_generator: Adam::new(adam, &generator.params),
            opt_global: Adam::new(adam, &global_critic.params),
            opt_local: Adam::new(adam, &local_critic.params),
            rng: seeded(config.seed, DATA_STREAM),
            generator,
            global_critic,
            local_critic,
            config,
            iter: 0,
            counters: UpdateCounters::default(),
            data_digest: [0; 32],
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iter: self.iter,
            counters: self.counters,
            generator: self.generator.params.clone(),
            global_critic: self.global_critic.params.clone(),
            local_critic: self.local_critic.params.clone(),
            opt_generator: self.opt_generator.clone(),
            opt_global: self.opt_global.clone(),
            opt_local: self.opt_local.clone(),
            rng: self.rng.clone(),
            data_digest: self.data_digest,
            log: self.log.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (mut generator, global_critic, local_critic) = build_networks(&ck.config)?;
        generator.params = ck.generator;
        Ok(Trainer {
            config: ck.config,
            generator,
            global_critic: global_critic.with_params(ck.global_critic),
            local_critic: local_critic.with_params(ck.local_critic),
            opt_generator: ck.opt_generator,
            opt_global: ck.opt_global,
            opt_local: ck.opt_local,
            rng: ck.rng,
            iter: ck.iter,
            counters: ck.counters,
            data_digest: ck.data_digest,
            log: ck.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(path, &self.checkpoint().to_archive()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let ck = Checkpoint::from_archive(&archive, |cfg| {
            let (g, dg, dl) = build_networks(cfg)?;
            Ok([g.params, dg.params, dl.params])
        })?;
        Self::from_checkpoint(ck)
    }

    /// Draws batch indices (uniform, with replacement), one hole rectangle
    /// per sample and, if `with_t`, per-sample interpolation weights.
    pub fn sample_batch(&mut self, data: &Dataset, with_t: bool) -> Result<StepBatch> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if data.size != self.config.image_size {
            return Err(Error::Dataset(format!(
                "dataset images are {} px, model expects {}",
                data.size, self.config.image_size
            )));
        }
        let b = self.config.batch_size;
        let indices: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..data.len())).collect();
        let rects = (0..b).map(|_| sample_mask(&mut self.rng, data.size)).collect::<Result<Vec<_>>>()?;
        let t: Vec<f64> = if with_t { (0..b).map(|_| self.rng.gen::<f64>()).collect() } else { Vec::new() };

        let mut h = Sha256::new();
        h.update(self.data_digest);
        for i in &indices {
            h.update((*i as u64).to_le_bytes());
        }
        for r in &rects {
            for v in [r.top, r.left, r.height, r.width] {
                h.update((v as u64).to_le_bytes());
            }
        }
        for v in &t {
            h.update(v.to_le_bytes());
        }
        self.data_digest.copy_from_slice(&h.finalize());

        let (x_c, x_d) = data.batch::<f64>(&indices)?;
        let m = rect_masks::<f64>(&rects, data.size)?;
        Ok(StepBatch { indices, rects, t, x_c, x_d, m })
    }

    /// Composited generator output `z + G(z, m) * (1 - m)` without a graph.
    pub fn inpaint(&self, z_c: &Tensor<f64>, z_d: &Tensor<f64>, m: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        no_grad(|| {
            let (raw_c, raw_d) = self.generator.forward(z_c, z_d, m)?;
            Ok((composite(&raw_c, z_c, m)?, composite(&raw_d, z_d, m)?))
        })
    }

    /// One Adam update of both critics on real, inpainted and interpolated
    /// RGB-D inputs. The generator runs without a graph and is not modified.
    pub fn critic_step(&mut self, batch: &StepBatch) -> Result<CriticLosses> {
        let iter = self.iter;
        let patch = self.config.local_patch_size();
        let lambda = self.config.weights.lambda_gp;
        let (z_c, z_d) = batch.masked()?;
        let (fake_c, fake_d) = self.inpaint(&z_c, &z_d, &batch.m)?;
        let real = Tensor::cat(&[&batch.x_c, &batch.x_d], 1)?;
        let fake = Tensor::cat(&[&fake_c, &fake_d], 1)?;
        let t = Tensor::from_vec(batch.t.clone(), &[batch.t.len()])?;
        let x_hat = interpolate_samples(&real, &fake, &t)?;

        let real_local = extract_local_patches(&real, &batch.rects, patch)?;
        let fake_local = extract_local_patches(&fake, &batch.rects, patch)?;
        let hat_local = extract_local_patches(&x_hat, &batch.rects, patch)?;

        let mut out = CriticLosses::default();
        for (scope, real, fake, hat) in [
            (CriticScope::Global, &real, &fake, &x_hat),
            (CriticScope::Local, &real_local, &fake_local, &hat_local),
        ] {
            let critic = match scope {
                CriticScope::Global => &self.global_critic,
                CriticScope::Local => &self.local_critic,
            };
            let loss = wgan_critic_loss(&critic.forward(real)?, &critic.forward(fake)?)?;
            let gp = gradient_penalty(critic, &hat.detach().into_leaf(true), lambda)?;
            let total = loss.add(&gp)?;
            let (l, p) = (loss.item()?, gp.item()?);
            let name = if scope == CriticScope::Global { "global" } else { "local" };
            check_finite(&format!("{name} critic loss"), l, iter)?;
            check_finite(&format!("{name} gradient penalty"), p, iter)?;
            let grads = grad(&total, &critic.params.tensors(), false)?;
            match scope {
                CriticScope::Global => {
                    self.opt_global.step(&mut self.global_critic.params, &grads)?;
                    (out.d_global, out.gp_global) = (l, p);
                }
                CriticScope::Local => {
                    self.opt_local.step(&mut self.local_critic.params, &grads)?;
                    (out.d_local, out.gp_local) = (l, p);
                }
            }
        }
        self.counters.critic_updates += 1;
        Ok(out)
    }

    /// One Adam update of the generator on the l1 content loss plus, when
    /// `adversarial`, the weighted critic terms on composited outputs.
    pub fn generator_step(&mut self, batch: &StepBatch, adversarial: bool) -> Result<GeneratorLosses> {
        let iter = self.iter;
        let w = self.config.weights;
        let (z_c, z_d) = batch.masked()?;
        let (raw_c, raw_d) = self.generator.forward(&z_c, &z_d, &batch.m)?;
        let content = content_loss(&raw_c, &batch.x_c, &raw_d, &batch.x_d, w.alpha)?;
        let mut out = GeneratorLosses {
            l1_rgb: check_finite("rgb l1", content.l1_rgb.item()?, iter)?,
            l1_depth: check_finite("depth l1", content.l1_depth.item()?, iter)?,
            ..Default::default()
        };
        let total = if adversarial {
            let fake = Tensor::cat(&[&composite(&raw_c, &z_c, &batch.m)?, &composite(&raw_d, &z_d, &batch.m)?], 1)?;
            let fake_local = extract_local_patches(&fake, &batch.rects, self.config.local_patch_size())?;
            let adv_g = wgan_generator_loss(&self.global_critic.forward(&fake)?);
            let adv_l = wgan_generator_loss(&self.local_critic.forward(&fake_local)?);
            out.adv_global = check_finite("global adversarial loss", adv_g.item()?, iter)?;
            out.adv_local = check_finite("local adversarial loss", adv_l.item()?, iter)?;
            generator_objective(&content.total, &adv_g, &adv_l, w.beta_adv)?
        } else {
            content.total
        };
        out.total = check_finite("generator objective", total.item()?, iter)?;
        let grads = grad(&total, &self.generator.params.tensors(), false)?;
        self.opt_generator.step(&mut self.generator.params, &grads)?;
        self.counters.generator_updates += 1;
        Ok(out)
    }

    /// `critic_iters` critic updates (skipped during warmup) followed by one
    /// generator update, each on a freshly drawn batch.
    pub fn train_iteration(&mut self, data: &Dataset) -> Result<LossRecord> {
        let warmup = self.config.is_warmup(self.iter);
        let mut c = CriticLosses::default();
        if !warmup {
            let n = self.config.critic_iters;
            for _ in 0..n {
                let batch = self.sample_batch(data, true)?;
                let l = self.critic_step(&batch)?;
                c.d_global += l.d_global / n as f64;
                c.d_local += l.d_local / n as f64;
                c.gp_global += l.gp_global / n as f64;
                c.gp_local += l.gp_local / n as f64;
            }
        }
        let batch = self.sample_batch(data, false)?;
        let g = self.generator_step(&batch, !warmup)?;
        let record = LossRecord {
            iter: self.iter,
            d_global_loss: c.d_global,
            d_local_loss: c.d_local,
            gp_global: c.gp_global,
            gp_local: c.gp_local,
            l1_rgb: g.l1_rgb,
            l1_depth: g.l1_depth,
            g_adv_global: g.adv_global,
            g_adv_local: g.adv_local,
            g_total: g.total,
        };
        self.iter += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Trains until `self.iter == until`. With an output directory, writes
    /// periodic checkpoints, `final.ckpt` and the loss CSV there.
    pub fn run(&mut self, data: &Dataset, until: u64, out: Option<&Path>) -> Result<()> {
        self.run_with_progress(data, until, out, |_| {})
    }

    /// [`Trainer::run`] with a callback after every iteration.
    pub fn run_with_progress(
        &mut self,
        data: &Dataset,
        until: u64,
        out: Option<&Path>,
        mut progress: impl FnMut(&LossRecord),
    ) -> Result<()> {
        while self.iter < until {
            let record = self.train_iteration(data)?;
            progress(&record);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.iter % every == 0 && self.iter < until {
                    self.save(&checkpoint_path(dir, self.iter))?;
                }
            }
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            self.save(&dir.join(FINAL_CHECKPOINT))?;
            std::fs::write(dir.join(LOSS_LOG_FILE), loss_log_csv(&self.log))?;
        }
        Ok(())
    }

    /// Snapshot of every parameter of the three networks, by network.
    pub fn parameter_snapshot(&self) -> [Vec<(String, Vec<f64>)>; 3] {
        let snap = |p: &ParamStore<f64>| p.iter().map(|(k, t)| (k.to_string(), t.to_vec())).collect();
        [snap(&self.generator.params), snap(&self.global_critic.params), snap(&self.local_critic.params)]
    }
}

pub fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt_{iter:08}.ckpt"))
}

/// Builds a trainer from `config` and trains it on `data` for
/// `config.total_iters` iterations.
pub fn train(data: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(data, config.total_iters, out)?;
    Ok(trainer)
}

//! Alternating training loop: one discriminator update on real targets versus
//! detached fakes, then one transfer-network update, repeated. Covers paired,
//! adversarial-only, single-branch and restoration modes with CSV logging,
//! rolling checkpoints and stateless resume.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::checkpoint::{fnv1a64, mix_seed, Checkpoint, CheckpointError, OptimizerEntry};
use crate::data::{
    apply_mask, batch_tensors, epoch_batches, GlyphPair, MaskSpec, DataError, EXTENT,
};
use crate::losses::{
    branch_adversarial_losses, branch_weight_schedule, compute_lambda_w, generator_branch_losses,
    pixel_loss, san_scale_c, total_adversarial, total_loss, LossError, WeightSchedule,
};
use crate::model::HanModel;
use crate::nn::ParameterSet;
use crate::tensor::{concat_batch, BatchNormMode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFinite { step: u64, term: &'static str, value: f64 },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("training needs a non-empty pair set")]
    EmptyCorpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    StrongPaired,
    SoftPaired,
    Restoration,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "strong_paired" => Some(TrainMode::StrongPaired),
            "soft_paired" => Some(TrainMode::SoftPaired),
            "restoration" => Some(TrainMode::Restoration),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::StrongPaired => "strong_paired",
            TrainMode::SoftPaired => "soft_paired",
            TrainMode::Restoration => "restoration",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscVariant {
    Hierarchical,
    Single,
}

impl DiscVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hierarchical" => Some(DiscVariant::Hierarchical),
            "single" => Some(DiscVariant::Single),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscVariant::Hierarchical => "hierarchical",
            DiscVariant::Single => "single",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub variant: DiscVariant,
    pub schedule: WeightSchedule,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub classic_dis_loss: bool,
    pub mask_coverage: f64,
    /// With timing off (the default) the CSV seconds column is written as 0,
    /// keeping logs byte-identical across reruns of the same seed.
    pub timing_in_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::StrongPaired,
            variant: DiscVariant::Hierarchical,
            schedule: WeightSchedule::Fixed,
            batch_size: 16,
            steps: 1000,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            seed: 0,
            checkpoint_every: 0,
            log_every: 1,
            lambda_p: 1.0,
            lambda_a: 1.0,
            classic_dis_loss: false,
            mask_coverage: 0.30,
            timing_in_log: false,
        }
    }
}

impl TrainConfig {
    /// Effective pixel weight: adversarial-only mode forces lambda_p = 0.
    pub fn effective_lambda_p(&self) -> f64 {
        match self.mode {
            TrainMode::SoftPaired => 0.0,
            _ => self.lambda_p,
        }
    }

    /// Branch weights for an epoch, with the single-branch variant collapsing
    /// to (0, 0, 0, c) where c rescales the surviving branch.
    pub fn effective_lambda(&self, epoch: u64) -> [f64; 4] {
        let lambda = branch_weight_schedule(self.schedule, epoch);
        match self.variant {
            DiscVariant::Hierarchical => lambda,
            DiscVariant::Single => {
                let c = san_scale_c(lambda);
                [0.0, 0.0, 0.0, c]
            }
        }
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "mode={}\nvariant={}\nschedule={}\nbatch_size={}\nsteps={}\nlearning_rate={}\n\
             adam_beta1={}\nadam_beta2={}\nseed={}\ncheckpoint_every={}\nlog_every={}\n\
             lambda_p={}\nlambda_a={}\nclassic_dis_loss={}\nmask_coverage={}\ntiming_in_log={}\n",
            self.mode.name(),
            self.variant.name(),
            self.schedule.name(),
            self.batch_size,
            self.steps,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.seed,
            self.checkpoint_every,
            self.log_every,
            self.lambda_p,
            self.lambda_a,
            self.classic_dis_loss,
            self.mask_coverage,
            self.timing_in_log,
        )
    }

    /// Apply `key=value` lines ('#' comments allowed) on top of self.
    pub fn apply_key_values(&mut self, text: &str) -> Result<(), TrainError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::BadConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |k: &str, v: &str| TrainError::BadConfig(format!("{k}: bad value {v:?}"));
        match key {
            "mode" => self.mode = TrainMode::parse(value).ok_or_else(|| bad(key, value))?,
            "variant" => self.variant = DiscVariant::parse(value).ok_or_else(|| bad(key, value))?,
            "schedule" => {
                self.schedule = WeightSchedule::parse(value).ok_or_else(|| bad(key, value))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "steps" => self.steps = value.parse().map_err(|_| bad(key, value))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key, value))?,
            "adam_beta1" => self.adam_beta1 = value.parse().map_err(|_| bad(key, value))?,
            "adam_beta2" => self.adam_beta2 = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad(key, value))?
            }
            "log_every" => self.log_every = value.parse().map_err(|_| bad(key, value))?,
            "lambda_p" => self.lambda_p = value.parse().map_err(|_| bad(key, value))?,
            "lambda_a" => self.lambda_a = value.parse().map_err(|_| bad(key, value))?,
            "classic_dis_loss" => {
                self.classic_dis_loss = value.parse().map_err(|_| bad(key, value))?
            }
            "mask_coverage" => self.mask_coverage = value.parse().map_err(|_| bad(key, value))?,
            "timing_in_log" => self.timing_in_log = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(TrainError::BadConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Fields that must agree between a resumed run and its checkpoint.
    fn resume_signature(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.mode.name(),
            self.variant.name(),
            self.schedule.name(),
            self.batch_size,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.seed,
            self.lambda_p,
            self.lambda_a,
            self.classic_dis_loss,
            self.mask_coverage,
        )
    }
}

// ---- optimizer ----

/// Bias-corrected adaptive-moment update with a shared step counter.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, beta1: f64, beta2: f64) -> Adam {
        let moments = params
            .trainable()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, moments }
    }

    /// One update over every trainable parameter; missing gradients count as
    /// zero. Parameter data is modified in place.
    pub fn update(&mut self, params: &ParameterSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, m, v) in self.moments.iter_mut() {
            let t = params.get(name).expect("optimizer tracks registered parameters");
            let grad = t.grad();
            let mut data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn to_entry(&self, name: &str) -> OptimizerEntry {
        OptimizerEntry {
            name: name.to_string(),
            step: self.step,
            moments: self.moments.clone(),
        }
    }

    pub fn restore(&mut self, entry: &OptimizerEntry) -> Result<(), TrainError> {
        self.step = entry.step;
        for (name, m, v) in self.moments.iter_mut() {
            let stored = entry
                .moments
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| TrainError::BadConfig(format!("checkpoint lacks optimizer state for {name}")))?;
            if stored.1.len() != m.len() {
                return Err(TrainError::BadConfig(format!("optimizer state size mismatch for {name}")));
            }
            m.copy_from_slice(&stored.1);
            v.copy_from_slice(&stored.2);
        }
        Ok(())
    }
}

// ---- logging ----

pub const LOG_HEADER: &str =
    "step,epoch,pixel,gen_1,gen_2,gen_3,gen_4,dis_1,dis_2,dis_3,dis_4,total_gen,total_dis,seconds";

#[derive(Clone, Debug)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub pixel: f64,
    pub gen: [f64; 4],
    pub dis: [f64; 4],
    pub total_gen: f64,
    pub total_dis: f64,
    pub seconds: f64,
}

impl TrainLogRecord {
    pub fn csv_row(&self, timing: bool) -> String {
        let secs = if timing { self.seconds } else { 0.0 };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.pixel,
            self.gen[0],
            self.gen[1],
            self.gen[2],
            self.gen[3],
            self.dis[0],
            self.dis[1],
            self.dis[2],
            self.dis[3],
            self.total_gen,
            self.total_dis,
            secs
        )
    }
}

// ---- trainer ----

pub struct Trainer {
    pub model: HanModel,
    pub gen_params: ParameterSet,
    pub dis_params: ParameterSet,
    pub all_params: ParameterSet,
    pub gen_opt: Adam,
    pub dis_opt: Adam,
    pub config: TrainConfig,
    pub lambda_w: f64,
    pub step: u64,
    started: Instant,
}

fn finite(step: u64, term: &'static str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite { step, term, value })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, train_pairs: &[GlyphPair]) -> Result<Trainer, TrainError> {
        if train_pairs.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if config.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        let model = HanModel::new(config.seed);
        let gen_params = model.generator_parameters();
        let dis_params = model.discriminator_parameters();
        let all_params = model.all_parameters();
        let gen_opt =
            Adam::new(&gen_params, config.learning_rate, config.adam_beta1, config.adam_beta2);
        let dis_opt =
            Adam::new(&dis_params, config.learning_rate, config.adam_beta1, config.adam_beta2);
        let targets: Vec<&Tensor> = train_pairs.iter().map(|p| &p.target.pixels).collect();
        let lambda_w = compute_lambda_w(targets)?;
        Ok(Trainer {
            model,
            gen_params,
            dis_params,
            all_params,
            gen_opt,
            dis_opt,
            config,
            lambda_w,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn epoch_of(&self, step: u64, corpus_len: usize) -> u64 {
        let per_epoch = corpus_len.div_ceil(self.config.batch_size) as u64;
        step / per_epoch.max(1)
    }

    /// One discriminator update followed by one transfer-network update on a
    /// (source, target) batch. Fake images are detached for the discriminator
    /// phase; discriminator weights are frozen during the generator phase.
    pub fn train_step(
        &mut self,
        source: &Tensor,
        target: &Tensor,
        epoch: u64,
    ) -> Result<TrainLogRecord, TrainError> {
        let cfg = &self.config;
        let lambda = cfg.effective_lambda(epoch);
        let lambda_p = cfg.effective_lambda_p();
        let lambda_a = cfg.lambda_a;
        let step = self.step + 1;

        // transfer network forward, reused by both phases
        let outs = self.model.transfer_forward(source, BatchNormMode::Train)?;
        let t1_up = outs.t1.upsample_nearest(4)?;
        let t2_up = outs.t2.upsample_nearest(2)?;
        let fakes = concat_batch(&[t1_up, t2_up, outs.t3.clone()])?;

        let adversarial_active = lambda_a != 0.0;
        let (dis_vals, total_dis_val) = if adversarial_active {
            // discriminator phase: real targets vs detached fakes
            let fakes_detached = fakes.detach();
            let (_, real_scores) = self.model.discriminate(target, BatchNormMode::Train)?;
            let (_, fake_scores) =
                self.model.discriminate(&fakes_detached, BatchNormMode::Train)?;
            let (dis_losses, _) =
                branch_adversarial_losses(&real_scores, &fake_scores, cfg.classic_dis_loss)?;
            let total_dis = total_adversarial(&dis_losses, lambda)?;
            let dis_vals: [f64; 4] = [
                finite(step, "dis_1", dis_losses[0].value())?,
                finite(step, "dis_2", dis_losses[1].value())?,
                finite(step, "dis_3", dis_losses[2].value())?,
                finite(step, "dis_4", dis_losses[3].value())?,
            ];
            let total_dis_val = finite(step, "total_dis", total_dis.value())?;
            total_dis.backward();
            self.dis_opt.update(&self.dis_params);
            self.gen_params.zero_grads();
            self.dis_params.zero_grads();
            (dis_vals, total_dis_val)
        } else {
            ([0.0; 4], 0.0)
        };

        // generator phase: pixel term plus adversarial pressure through a
        // frozen discriminator
        let pix = pixel_loss(&outs.t3_logits, target, self.lambda_w)?;
        let pix_val = finite(step, "pixel", pix.value())?;
        let (gen_vals, total_gen, total_gen_val) = if adversarial_active {
            self.dis_params.set_trainable_enabled(false);
            let (_, fake_scores) = self.model.discriminate(&fakes, BatchNormMode::Train)?;
            let gen_losses = generator_branch_losses(&fake_scores)?;
            let total_adv = total_adversarial(&gen_losses, lambda)?;
            let gen_vals: [f64; 4] = [
                finite(step, "gen_1", gen_losses[0].value())?,
                finite(step, "gen_2", gen_losses[1].value())?,
                finite(step, "gen_3", gen_losses[2].value())?,
                finite(step, "gen_4", gen_losses[3].value())?,
            ];
            let total_gen = if lambda_p != 0.0 {
                total_loss(&pix, &total_adv, lambda_p, lambda_a)?
            } else {
                total_adv.mul_scalar(lambda_a)
            };
            let total_gen_val = finite(step, "total_gen", total_gen.value())?;
            (gen_vals, total_gen, total_gen_val)
        } else {
            let total_gen = pix.mul_scalar(lambda_p);
            let v = finite(step, "total_gen", total_gen.value())?;
            ([0.0; 4], total_gen, v)
        };
        total_gen.backward();
        self.gen_opt.update(&self.gen_params);
        self.gen_params.zero_grads();
        self.dis_params.zero_grads();
        if adversarial_active {
            self.dis_params.set_trainable_enabled(true);
        }

        self.step = step;
        Ok(TrainLogRecord {
            step,
            epoch,
            pixel: pix_val,
            gen: gen_vals,
            dis: dis_vals,
            total_gen: total_gen_val,
            total_dis: total_dis_val,
            seconds: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn make_checkpoint(&self, manifest_hash: u64, corpus_len: usize) -> Checkpoint {
        let mut ck = Checkpoint::from_parameters(&self.all_params);
        ck.config_echo = self.config.to_key_values();
        ck.manifest_hash = manifest_hash;
        ck.step = self.step;
        ck.epoch = self.epoch_of(self.step, corpus_len);
        ck.optimizers =
            vec![self.gen_opt.to_entry("generator"), self.dis_opt.to_entry("discriminator")];
        ck
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<(), TrainError> {
        let mut stored = TrainConfig::default();
        stored.apply_key_values(&ck.config_echo)?;
        if stored.resume_signature() != self.config.resume_signature() {
            return Err(TrainError::BadConfig(format!(
                "checkpoint was written by an incompatible run ({} vs {})",
                stored.resume_signature(),
                self.config.resume_signature()
            )));
        }
        ck.apply(&self.all_params)?;
        for entry in &ck.optimizers {
            match entry.name.as_str() {
                "generator" => self.gen_opt.restore(entry)?,
                "discriminator" => self.dis_opt.restore(entry)?,
                other => {
                    return Err(TrainError::BadConfig(format!("unknown optimizer entry {other:?}")))
                }
            }
        }
        self.step = ck.step;
        Ok(())
    }
}

/// Build the (source, target) tensors for one batch, deriving masked inputs on
/// the fly in restoration mode. Masks depend only on (seed, epoch, id).
pub fn assemble_batch(
    pairs: &[GlyphPair],
    indices: &[usize],
    config: &TrainConfig,
    epoch: u64,
) -> (Tensor, Tensor) {
    match config.mode {
        TrainMode::Restoration => {
            let area = EXTENT * EXTENT;
            let n = indices.len();
            let mut src = Vec::with_capacity(n * area);
            let mut dst = Vec::with_capacity(n * area);
            for &i in indices {
                let pair = &pairs[i];
                let mask_seed = mix_seed(
                    mix_seed(config.seed, epoch),
                    fnv1a64(pair.target.id.as_bytes()),
                );
                let spec = MaskSpec::random(config.mask_coverage, mask_seed);
                let masked = apply_mask(&pair.target, &spec);
                src.extend_from_slice(&masked.pixels.data());
                dst.extend_from_slice(&pair.target.pixels.data());
            }
            (
                Tensor::constant(&[n, 1, EXTENT, EXTENT], src).expect("sized"),
                Tensor::constant(&[n, 1, EXTENT, EXTENT], dst).expect("sized"),
            )
        }
        _ => batch_tensors(pairs, indices),
    }
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainLogRecord>,
    pub lambda_w: f64,
    pub final_step: u64,
}

/// Run (or resume) a full training loop, writing `train_log.csv` and a rolling
/// `checkpoint.bin` under `out_dir`.
pub fn train(
    config: &TrainConfig,
    train_pairs: &[GlyphPair],
    out_dir: &Path,
    manifest_hash: u64,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| TrainError::Io { path: out_dir.to_path_buf(), source: e })?;
    let log_path = out_dir.join("train_log.csv");
    let ck_path = out_dir.join("checkpoint.bin");

    let mut trainer = Trainer::new(config.clone(), train_pairs)?;
    if trainer.lambda_w < 0.0 {
        eprintln!(
            "warning: lambda_w = {} is negative (positive pixels outnumber negative ones)",
            trainer.lambda_w
        );
    }
    let mut records: Vec<TrainLogRecord> = Vec::new();
    let mut existing_log: Option<String> = None;
    if let Some(ck_file) = resume {
        let ck = Checkpoint::load(ck_file)?;
        trainer.restore_from(&ck)?;
        let prior = ck_file.parent().map(|d| d.join("train_log.csv"));
        if let Some(prior) = prior {
            if prior.exists() {
                existing_log = Some(
                    std::fs::read_to_string(&prior)
                        .map_err(|e| TrainError::Io { path: prior.clone(), source: e })?,
                );
            }
        }
    }

    let mut log = String::new();
    match existing_log {
        Some(text) => log.push_str(&text),
        None => {
            log.push_str(LOG_HEADER);
            log.push('\n');
        }
    }

    let per_epoch = train_pairs.len().div_ceil(config.batch_size) as u64;
    while trainer.step < config.steps {
        let epoch = trainer.step / per_epoch;
        let within = (trainer.step % per_epoch) as usize;
        let batches = epoch_batches(train_pairs.len(), config.batch_size, config.seed, epoch);
        for batch in batches.iter().skip(within) {
            if trainer.step >= config.steps {
                break;
            }
            let (src, dst) = assemble_batch(train_pairs, batch, config, epoch);
            let record = trainer.train_step(&src, &dst, epoch)?;
            let step = record.step;
            if config.log_every > 0 && (step % config.log_every == 0 || step == config.steps) {
                log.push_str(&record.csv_row(config.timing_in_log));
                log.push('\n');
                records.push(record);
            }
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                trainer.make_checkpoint(manifest_hash, train_pairs.len()).save(&ck_path)?;
            }
        }
    }

    trainer.make_checkpoint(manifest_hash, train_pairs.len()).save(&ck_path)?;
    let mut f = std::fs::File::create(&log_path)
        .map_err(|e| TrainError::Io { path: log_path.clone(), source: e })?;
    f.write_all(log.as_bytes())
        .map_err(|e| TrainError::Io { path: log_path.clone(), source: e })?;
    Ok(TrainOutcome {
        checkpoint_path: ck_path,
        log_path,
        records,
        lambda_w: trainer.lambda_w,
        final_step: trainer.step,
    })
}

/// Rebuild a model from a checkpoint (weights and running statistics).
pub fn load_model(ck_path: &Path) -> Result<(HanModel, Checkpoint), TrainError> {
    let ck = Checkpoint::load(ck_path)?;
    let model = HanModel::new(0);
    let params = model.all_parameters();
    ck.apply(&params)?;
    Ok((model, ck))
}

/// Eval-mode T3 for a batch of [n, 1, 64, 64] inputs in [0, 1].
pub fn transfer_infer(model: &HanModel, images: &Tensor) -> Result<Tensor, TrainError> {
    Ok(model.transfer_forward(images, BatchNormMode::Eval)?.t3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, StyleKind, StyleTransform};

    fn tiny_corpus(n: usize) -> Vec<GlyphPair> {
        synth_corpus(n, StyleTransform::named(StyleKind::Thicken), 77)
    }

    fn tiny_config(steps: u64) -> TrainConfig {
        TrainConfig { batch_size: 2, steps, log_every: 1, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut set = ParameterSet::new();
        let p = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        set.push("p".into(), p.clone());
        let mut opt = Adam::new(&set, 0.1, 0.9, 0.999);
        opt.update(&set); // no gradient recorded anywhere
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut set = ParameterSet::new();
        let p = Tensor::param(&[2], vec![0.5, -0.5]).unwrap();
        set.push("p".into(), p.clone());
        let mut opt = Adam::new(&set, 1e-3, 0.5, 0.999);
        p.add_to_grad(&[0.3, -0.7]);
        opt.update(&set);
        let v = p.to_vec();
        assert!((v[0] - (0.5 - 1e-3)).abs() < 1e-6, "{v:?}");
        assert!((v[1] - (-0.5 + 1e-3)).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn adam_moments_decay_under_zero_gradients() {
        let mut set = ParameterSet::new();
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        set.push("p".into(), p.clone());
        let mut opt = Adam::new(&set, 0.0, 0.5, 0.9);
        p.add_to_grad(&[1.0]);
        opt.update(&set);
        let m0 = opt.moments[0].1[0];
        p.zero_grad();
        for _ in 0..5 {
            opt.update(&set);
        }
        let m5 = opt.moments[0].1[0];
        assert!((m5 - m0 * 0.5f64.powi(5)).abs() < 1e-12);
    }

    #[test]
    fn config_roundtrips_through_key_values() {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Restoration;
        cfg.variant = DiscVariant::Single;
        cfg.steps = 123;
        cfg.lambda_a = 0.5;
        let text = cfg.to_key_values();
        let mut back = TrainConfig::default();
        back.apply_key_values(&text).unwrap();
        assert_eq!(back.to_key_values(), text);
        assert!(back.set("nonsense", "1").is_err());
    }

    #[test]
    fn san_variant_scales_only_the_last_branch() {
        let mut cfg = TrainConfig::default();
        cfg.variant = DiscVariant::Single;
        assert_eq!(cfg.effective_lambda(0), [0.0, 0.0, 0.0, 2.5]);
        cfg.variant = DiscVariant::Hierarchical;
        assert_eq!(cfg.effective_lambda(0), [0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn soft_paired_zeroes_pixel_weight() {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::SoftPaired;
        cfg.lambda_p = 1.0;
        assert_eq!(cfg.effective_lambda_p(), 0.0);
    }

    #[test]
    fn one_step_changes_parameters_and_respects_phases() {
        let pairs = tiny_corpus(4);
        let mut trainer = Trainer::new(tiny_config(1), &pairs).unwrap();
        let gen_before = trainer.gen_params.byte_image();
        let dis_before = trainer.dis_params.byte_image();
        let (src, dst) = batch_tensors(&pairs, &[0, 1]);
        let record = trainer.train_step(&src, &dst, 0).unwrap();
        assert!(record.total_gen.is_finite() && record.total_dis.is_finite());
        assert_ne!(trainer.gen_params.byte_image(), gen_before, "generator should move");
        assert_ne!(trainer.dis_params.byte_image(), dis_before, "discriminator should move");
    }

    #[test]
    fn discriminator_phase_never_touches_generator_and_vice_versa() {
        // replicate train_step with hash checks between the phases
        let pairs = tiny_corpus(4);
        let mut trainer = Trainer::new(tiny_config(1), &pairs).unwrap();
        let (src, dst) = batch_tensors(&pairs, &[0, 1]);

        let outs = trainer.model.transfer_forward(&src, BatchNormMode::Train).unwrap();
        let fakes = concat_batch(&[
            outs.t1.upsample_nearest(4).unwrap(),
            outs.t2.upsample_nearest(2).unwrap(),
            outs.t3.clone(),
        ])
        .unwrap();
        let gen_hash_before = fnv1a64(&trainer.gen_params.trainable_byte_image());

        let fakes_d = fakes.detach();
        let (_, real) = trainer.model.discriminate(&dst, BatchNormMode::Train).unwrap();
        let (_, fake) = trainer.model.discriminate(&fakes_d, BatchNormMode::Train).unwrap();
        let (dis_losses, _) = branch_adversarial_losses(&real, &fake, false).unwrap();
        let total_dis = total_adversarial(&dis_losses, [0.5, 0.5, 0.5, 1.0]).unwrap();
        total_dis.backward();
        trainer.dis_opt.update(&trainer.dis_params);
        trainer.gen_params.zero_grads();
        trainer.dis_params.zero_grads();
        assert_eq!(
            fnv1a64(&trainer.gen_params.trainable_byte_image()),
            gen_hash_before,
            "discriminator phase altered generator weights"
        );

        let dis_hash_before = fnv1a64(&trainer.dis_params.trainable_byte_image());
        trainer.dis_params.set_trainable_enabled(false);
        let (_, fake_g) = trainer.model.discriminate(&fakes, BatchNormMode::Train).unwrap();
        let gen_losses = generator_branch_losses(&fake_g).unwrap();
        let total_adv = total_adversarial(&gen_losses, [0.5, 0.5, 0.5, 1.0]).unwrap();
        let pix = pixel_loss(&outs.t3_logits, &dst, trainer.lambda_w).unwrap();
        let total_gen = total_loss(&pix, &total_adv, 1.0, 1.0).unwrap();
        total_gen.backward();
        trainer.gen_opt.update(&trainer.gen_params);
        trainer.dis_params.set_trainable_enabled(true);
        assert_eq!(
            fnv1a64(&trainer.dis_params.trainable_byte_image()),
            dis_hash_before,
            "generator phase altered discriminator weights"
        );
    }

    #[test]
    fn pure_regression_reduces_pixel_loss() {
        let pairs = tiny_corpus(4);
        let mut cfg = tiny_config(200);
        cfg.lambda_a = 0.0;
        cfg.batch_size = 4;
        cfg.learning_rate = 1e-3;
        let mut trainer = Trainer::new(cfg.clone(), &pairs).unwrap();
        let mut pixel = Vec::new();
        for step in 0..200u64 {
            let epoch = trainer.epoch_of(step, pairs.len());
            let batches = epoch_batches(pairs.len(), cfg.batch_size, cfg.seed, epoch);
            let batch = &batches[(step % batches.len() as u64) as usize];
            let (src, dst) = assemble_batch(&pairs, batch, &cfg, epoch);
            let rec = trainer.train_step(&src, &dst, epoch).unwrap();
            assert_eq!(rec.gen, [0.0; 4]);
            assert_eq!(rec.total_dis, 0.0);
            pixel.push(rec.pixel);
        }
        // smoothed over windows of 20, the loss must not increase
        let window = 20;
        let smooth: Vec<f64> = pixel
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        for i in 1..smooth.len() {
            assert!(
                smooth[i] <= smooth[i - 1] + 1e-4,
                "pixel loss rose at window {i}: {} -> {}",
                smooth[i - 1],
                smooth[i]
            );
        }
        assert!(smooth.last().unwrap() < &smooth[0]);
    }

    #[test]
    fn restoration_batches_mask_the_inputs() {
        let pairs = tiny_corpus(4);
        let mut cfg = tiny_config(1);
        cfg.mode = TrainMode::Restoration;
        let (src, dst) = assemble_batch(&pairs, &[0, 1, 2, 3], &cfg, 0);
        let s = src.to_vec();
        let d = dst.to_vec();
        assert_ne!(s, d, "masking should zero a region");
        // masked input never adds ink, only removes it
        for (sv, dv) in s.iter().zip(&d) {
            assert!(sv <= dv || (sv - dv).abs() < 1e-12);
        }
        // same (seed, epoch, id) gives the same mask
        let (src2, _) = assemble_batch(&pairs, &[0, 1, 2, 3], &cfg, 0);
        assert_eq!(s, src2.to_vec());
        let (src3, _) = assemble_batch(&pairs, &[0, 1, 2, 3], &cfg, 1);
        assert_ne!(s, src3.to_vec(), "different epoch should remask");
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let pairs = tiny_corpus(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(0);
        let outcome = train(&cfg, &pairs, dir.path(), 9, None).unwrap();
        assert!(outcome.checkpoint_path.exists());
        assert_eq!(outcome.final_step, 0);
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        assert_eq!(log.lines().count(), 1, "header only");
        let ck = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ck.step, 0);
        assert_eq!(ck.manifest_hash, 9);
    }

    #[test]
    fn resume_is_bit_exact() {
        let pairs = tiny_corpus(4);
        let full_dir = tempfile::tempdir().unwrap();
        let part_dir = tempfile::tempdir().unwrap();

        let mut cfg = tiny_config(6);
        cfg.checkpoint_every = 0;
        let full = train(&cfg, &pairs, full_dir.path(), 1, None).unwrap();

        let mut cfg_head = cfg.clone();
        cfg_head.steps = 3;
        train(&cfg_head, &pairs, part_dir.path(), 1, None).unwrap();
        let mut cfg_tail = cfg.clone();
        cfg_tail.steps = 6;
        let resumed = train(
            &cfg_tail,
            &pairs,
            part_dir.path(),
            1,
            Some(&part_dir.path().join("checkpoint.bin")),
        )
        .unwrap();

        let full_bytes = std::fs::read(&full.checkpoint_path).unwrap();
        let resumed_bytes = std::fs::read(&resumed.checkpoint_path).unwrap();
        assert_eq!(full_bytes, resumed_bytes, "resumed checkpoint differs from straight run");
        let full_log = std::fs::read_to_string(&full.log_path).unwrap();
        let resumed_log = std::fs::read_to_string(&resumed.log_path).unwrap();
        assert_eq!(full_log, resumed_log);
    }

    #[test]
    fn log_identities_hold() {
        let pairs = tiny_corpus(4);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(4);
        cfg.variant = DiscVariant::Single;
        let outcome = train(&cfg, &pairs, dir.path(), 0, None).unwrap();
        for r in &outcome.records {
            let lambda = cfg.effective_lambda(r.epoch);
            let adv: f64 = (0..4).map(|i| lambda[i] * r.gen[i]).sum();
            let want_gen = cfg.effective_lambda_p() * r.pixel + cfg.lambda_a * adv;
            assert!((r.total_gen - want_gen).abs() < 1e-6);
            let want_dis: f64 = (0..4).map(|i| lambda[i] * r.dis[i]).sum();
            assert!((r.total_dis - want_dis).abs() < 1e-6);
        }
    }

    #[test]
    fn infer_output_is_deterministic_and_in_range() {
        let pairs = tiny_corpus(2);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&tiny_config(2), &pairs, dir.path(), 0, None).unwrap();
        let (model, _) = load_model(&outcome.checkpoint_path).unwrap();
        let (src, _) = batch_tensors(&pairs, &[0, 1]);
        let a = transfer_infer(&model, &src).unwrap();
        let b = transfer_infer(&model, &src).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

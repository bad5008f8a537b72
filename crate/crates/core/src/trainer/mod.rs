//! Alternating generator/discriminator optimization, checkpoints and the
//! metrics log.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, EpochSampler, Manifest};
use crate::discriminator::{discriminate, init_discriminator};
use crate::error::{Error, Result};
use crate::generator::{encode, harmonize, init_generator, level_masks};
use crate::losses::{content_loss, d_loss, g_adv_loss, style_loss, target_grid, total_g_loss, LossReport};
use crate::nn::Mode;
use crate::optim::Adam;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Array, Tape, Var};

pub use checkpoint::{
    checkpoint_config_hash, encode_weights, load_checkpoint, read_weights, save_checkpoint, write_weights,
    StoredTensor, WeightMap, FORMAT_VERSION, META_FILE, WEIGHTS_FILE,
};
pub use config::{Ablation, Preset, TrainConfig};

/// Seed offsets so the two networks draw independent initializations.
const GENERATOR_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const DISCRIMINATOR_SEED_SALT: u64 = 0xc2b2_ae3d_27d4_eb4f;
const SAMPLER_SEED_SALT: u64 = 0x1656_67b1_9e37_79f9;

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub config: TrainConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub sampler: EpochSampler,
}

/// Overwrites the encoder with external weights; names and shapes must
/// match the generator's `g.enc.*` entries.
pub fn load_encoder_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let map = read_weights(path)?;
    let mut loaded = 0;
    for (name, t) in &map {
        let Some(p) = store.get_mut(name) else { continue };
        if p.kind != ParamKind::Frozen {
            continue;
        }
        let value = t.to_array()?;
        if value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: `{name}` has shape {:?}, expected {:?}",
                path.display(),
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        loaded += 1;
    }
    let expected = store.iter().filter(|(_, p)| p.kind == ParamKind::Frozen).count();
    if loaded != expected {
        return Err(Error::Checkpoint(format!(
            "{}: provides {loaded} of {expected} encoder tensors",
            path.display()
        )));
    }
    Ok(())
}

impl TrainState {
    /// Fresh, seeded state for a dataset of `dataset_len` records.
    pub fn new(config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let mut generator = init_generator(&config.generator(), config.seed ^ GENERATOR_SEED_SALT);
        if let Some(path) = &config.encoder_weights {
            load_encoder_weights(&mut generator, path)?;
        }
        let discriminator = config
            .discriminator()
            .map(|d| init_discriminator(&d, config.seed ^ DISCRIMINATOR_SEED_SALT))
            .unwrap_or_default();
        Ok(TrainState {
            iteration: 0,
            sampler: EpochSampler::new(dataset_len, config.seed ^ SAMPLER_SEED_SALT),
            config,
            generator,
            discriminator,
            adam_g: Adam::new(),
            adam_d: Adam::new(),
        })
    }
}

fn check_grads(grads: &BTreeMap<String, Array>, net: &str) -> Result<()> {
    match grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        Some((name, _)) => Err(Error::NonFinite(format!("{net} gradient of `{name}`"))),
        None => Ok(()),
    }
}

/// One discriminator update on the detached harmonized batch, the
/// composites and the backgrounds, all in one forward pass.
fn discriminator_update(state: &TrainState, d: &mut ParamStore, adam: &mut Adam, harmonized: &Array, batch: &Batch) -> Result<f64> {
    let dcfg = state.config.discriminator().expect("discriminator enabled");
    let b = batch.len();
    let target = target_grid(&batch.mask, dcfg.n)?;
    let input = concatenate(Axis(0), &[harmonized.view(), batch.composite.view(), batch.background.view()])
        .expect("batch parts share shape");
    let tape = Tape::new();
    let p = d.bind(&tape, true);
    let pred = discriminate(&p, &dcfg, &Var::constant(input), Mode::Train)?;
    let loss = d_loss(
        &tape,
        &tape.narrow_batch(&pred, 0, b),
        &tape.narrow_batch(&pred, b, b),
        &tape.narrow_batch(&pred, 2 * b, b),
        &target,
    )?;
    let value = loss.scalar();
    if !value.is_finite() {
        return Err(Error::NonFinite("d_adv loss".into()));
    }
    let grads = p.gradients(&tape.backward(&loss));
    check_grads(&grads, "discriminator")?;
    let updates = p.take_updates();
    drop(p);
    adam.update(&state.config.optimizer, d, &grads);
    d.apply_updates(updates);
    Ok(value)
}

/// One training step: the discriminator update(s) on the detached output,
/// then the generator update against the updated discriminator. `state` is
/// left untouched if any loss or gradient is non-finite.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    let cfg = state.config.clone();
    let gcfg = cfg.generator();
    let tape = Tape::new();
    let pg = state.generator.bind(&tape, true);
    let composite = Var::constant(batch.composite.clone());
    let background = Var::constant(batch.background.clone());
    let out = harmonize(&pg, &gcfg, &composite, &background, &batch.mask)?;

    let mut d_next = state.discriminator.clone();
    let mut adam_d = state.adam_d.clone();
    let mut d_adv = None;
    if cfg.ablation.use_discriminator {
        for _ in 0..cfg.d_steps {
            d_adv = Some(discriminator_update(state, &mut d_next, &mut adam_d, out.image.value(), batch)?);
        }
    }

    let masks = level_masks(&batch.mask)?;
    let fo = encode(&pg, &gcfg, &out.image)?;
    let style = style_loss(&tape, &fo, &out.background_features, &masks)?;
    let content = content_loss(&tape, &fo[3], &out.composite_features[3])?;
    let g_adv = match cfg.discriminator() {
        Some(dcfg) => {
            // Batch statistics, as during the discriminator update; the
            // running averages are not touched by the generator step.
            let pd = d_next.bind(&tape, false);
            Some(g_adv_loss(&tape, &discriminate(&pd, &dcfg, &out.image, Mode::Train)?))
        }
        None => None,
    };
    let total = total_g_loss(&tape, &style, &content, g_adv.as_ref(), &cfg.weights);
    let report = LossReport {
        style: style.scalar(),
        content: content.scalar(),
        g_adv: g_adv.as_ref().map(Var::scalar),
        d_adv,
        total_g: total.scalar(),
    };
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite(format!("{term} loss at iteration {}", state.iteration + 1)));
    }
    let grads = pg.gradients(&tape.backward(&total));
    check_grads(&grads, "generator")?;
    drop(pg);
    let mut g_next = state.generator.clone();
    let mut adam_g = state.adam_g.clone();
    adam_g.update(&cfg.optimizer, &mut g_next, &grads);

    state.generator = g_next;
    state.adam_g = adam_g;
    state.discriminator = d_next;
    state.adam_d = adam_d;
    state.iteration += 1;
    Ok(report)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub style: f64,
    pub content: f64,
    pub g_adv: Option<f64>,
    pub d_adv: Option<f64>,
    pub total_g: f64,
    pub wall_time_s: f64,
    /// Networks updated in this step, in order.
    pub updates: Vec<String>,
}

impl MetricsRecord {
    pub fn new(iteration: u64, report: &LossReport, wall_time_s: f64) -> Self {
        let mut updates = Vec::new();
        if report.d_adv.is_some() {
            updates.push("discriminator".to_string());
        }
        updates.push("generator".to_string());
        MetricsRecord {
            iteration,
            style: report.style,
            content: report.content,
            g_adv: report.g_adv,
            d_adv: report.d_adv,
            total_g: report.total_g,
            wall_time_s,
            updates,
        }
    }

    pub fn report(&self) -> LossReport {
        LossReport {
            style: self.style,
            content: self.content,
            g_adv: self.g_adv,
            d_adv: self.d_adv,
            total_g: self.total_g,
        }
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))))
        .collect()
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";

pub fn checkpoint_dir(output: &Path, iteration: u64) -> PathBuf {
    output.join(format!("iter_{iteration:06}"))
}

/// Runs `state` up to `state.config.iterations`, appending to the metrics
/// log in `output` and writing checkpoints at the configured cadence plus a
/// final one. Returns the reports of the steps taken.
pub fn run(
    state: &mut TrainState,
    dataset: &mut Dataset,
    output: &Path,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>> {
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let metrics_path = output.join(METRICS_FILE);
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let start = Instant::now();
    let mut reports = Vec::new();
    let batch_size = state.config.batch_size;
    while state.iteration < state.config.iterations {
        let batch = dataset.next_batch(&mut state.sampler, batch_size)?;
        let report = train_step(state, &batch)?;
        let record = MetricsRecord::new(state.iteration, &report, start.elapsed().as_secs_f64());
        let mut line = serde_json::to_vec(&record).expect("metrics serialize");
        line.push(b'\n');
        metrics.write_all(&line).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(state.iteration, &report);
        reports.push(report);
        let every = state.config.checkpoint_every;
        if every > 0 && state.iteration % every == 0 {
            save_checkpoint(state, checkpoint_dir(output, state.iteration))?;
        }
    }
    save_checkpoint(state, output.join(FINAL_CHECKPOINT))?;
    Ok(reports)
}

/// Fresh training run from `config`, reading records tagged `train`.
pub fn train(config: &TrainConfig, manifest: Manifest, on_step: impl FnMut(u64, &LossReport)) -> Result<Vec<LossReport>> {
    let manifest = manifest.split(crate::data::Split::Train);
    let mut dataset = Dataset::new(manifest, config.image_size)?;
    let mut state = TrainState::new(config.clone(), dataset.len())?;
    run(&mut state, &mut dataset, &config.output_dir, on_step)
}

/// Loads a checkpoint to continue with `config`, warning when its model
/// settings differ from those the checkpoint was trained with.
pub fn resume(checkpoint: &Path, config: &TrainConfig) -> Result<TrainState> {
    let mut state = load_checkpoint(checkpoint)?;
    let stored = checkpoint_config_hash(checkpoint)?;
    if stored != config.hash() {
        log::warn!(
            "resume config differs from the one stored in {} (hash {} vs {})",
            checkpoint.display(),
            &stored[..12],
            &config.hash()[..12]
        );
    }
    state.config = config.clone();
    Ok(state)
}

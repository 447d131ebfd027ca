//! Loss computation, the optimization loop, checkpointing, and
//! validation-driven model selection for all three condition modes.

use crate::data::{derive_seed, ManifestRecord, Manifest, Taxonomy};
use crate::dsp::{amplitude, read_wav, stft, StftConfig};
use crate::model::{
    BatchForward, Checkpoint, ConditionInput, ConditionMode, MaskEstimator, ModelConfig,
};
use crate::nn::{BnState, Grads, Optimizer, OptimizerConfig, ParamStore, Phase};
use crate::phoneme::{encode_one_hot, g2p, PhonemeInventory};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}; diagnostics: {diagnostics}")]
    NonFinite { step: u64, diagnostics: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Phoneme(#[from] crate::phoneme::PhonemeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub condition_mode: ConditionMode,
    /// Steps between validation passes.
    pub val_interval: u64,
    /// Validations without improvement before stopping early.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 2000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            condition_mode: ConditionMode::Onomatopoeia,
            val_interval: 100,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.val_interval == 0 {
            return Err(TrainError::Config("val_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// sqrt(||Y - Y_hat||_F^2 / (T*F)).
pub fn rmse_loss(y: &Array2<f32>, y_hat: &Array2<f32>) -> Result<f64> {
    if y.dim() != y_hat.dim() {
        return Err(TrainError::Shape(format!(
            "rmse shapes {:?} vs {:?}",
            y.dim(),
            y_hat.dim()
        )));
    }
    let n = y.len() as f64;
    let ss: f64 = y
        .iter()
        .zip(y_hat.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((ss / n).sqrt())
}

/// One training example: mixture and target magnitude spectrograms plus the
/// extraction query.
#[derive(Debug, Clone)]
pub struct Sample {
    pub mixture: Array2<f32>,
    pub target: Array2<f32>,
    pub cond: ConditionInput,
}

/// Manifest-backed sample loader; converts audio to magnitudes and target
/// words/classes into condition inputs for the chosen mode.
pub struct SampleSet {
    root: PathBuf,
    pub records: Vec<ManifestRecord>,
    tax: Taxonomy,
    inv: PhonemeInventory,
    mode: ConditionMode,
    stft_cfg: StftConfig,
}

impl SampleSet {
    pub fn load(
        manifest: &Path,
        root: &Path,
        mode: ConditionMode,
        stft_cfg: StftConfig,
    ) -> Result<Self> {
        let m = Manifest::read(manifest)?;
        if m.records.is_empty() {
            return Err(TrainError::Config(format!(
                "empty manifest: {}",
                manifest.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            records: m.records,
            tax: Taxonomy::default_taxonomy(),
            inv: PhonemeInventory::default_inventory(),
            mode,
            stft_cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn condition_for(&self, rec: &ManifestRecord) -> Result<ConditionInput> {
        condition_for_record(self.mode, rec, &self.tax, &self.inv)
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let rec = &self.records[index];
        let mixture = read_wav(&self.root.join(&rec.paths.mixture))?;
        let target = read_wav(&self.root.join(&rec.paths.target))?;
        Ok(Sample {
            mixture: amplitude(&stft(&mixture, &self.stft_cfg)?).magnitudes,
            target: amplitude(&stft(&target, &self.stft_cfg)?).magnitudes,
            cond: self.condition_for(rec)?,
        })
    }
}

/// The extraction query for a manifest record under a condition mode.
pub fn condition_for_record(
    mode: ConditionMode,
    rec: &ManifestRecord,
    tax: &Taxonomy,
    inv: &PhonemeInventory,
) -> Result<ConditionInput> {
    Ok(match mode {
        ConditionMode::Onomatopoeia => {
            let word = crate::phoneme::OnomatopoeicWord::new(&rec.target_word)?;
            let seq = g2p(&word, inv)?;
            ConditionInput::Word(encode_one_hot(&seq, inv)?)
        }
        ConditionMode::Subclass => {
            ConditionInput::Class(tax.subclass_index(&rec.target_subclass)?)
        }
        ConditionMode::Superclass => {
            ConditionInput::Class(tax.superclass_index(&rec.target_superclass)?)
        }
    })
}

/// Mean per-sample RMSE of the masked mixture against the target, and the
/// mask gradients of that mean.
pub fn batch_loss_and_mask_grads(
    masks: &[Array2<f32>],
    batch: &[Sample],
) -> Result<(f64, Vec<Array2<f32>>)> {
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut dmasks = Vec::with_capacity(batch.len());
    for (mask, s) in masks.iter().zip(batch) {
        let est = mask * &s.mixture;
        let loss = rmse_loss(&s.target, &est)?;
        total += loss / b;
        let n = s.target.len() as f64;
        // d rmse / dM = (M.X - Y).X / (T*F*rmse); zero at exact match.
        let scale = if loss > 0.0 {
            (1.0 / (b * n * loss)) as f32
        } else {
            0.0
        };
        let mut dm = (&est - &s.target) * &s.mixture;
        dm.mapv_inplace(|v| v * scale);
        dmasks.push(dm);
    }
    Ok((total, dmasks))
}

fn forward_batch(
    model: &MaskEstimator,
    ps: &ParamStore<f32>,
    phase: &mut Phase<'_, f32>,
    batch: &[Sample],
) -> Result<BatchForward<f32>> {
    let xs: Vec<Array2<f32>> = batch.iter().map(|s| s.mixture.clone()).collect();
    let conds: Vec<ConditionInput> = batch.iter().map(|s| s.cond.clone()).collect();
    Ok(model.forward(ps, phase, &xs, &conds)?)
}

/// One optimizer update on the batch; returns the scalar loss.
pub fn train_step(
    model: &MaskEstimator,
    ps: &mut ParamStore<f32>,
    bn: &mut BnState<f32>,
    opt: &mut Optimizer<f32>,
    batch: &[Sample],
) -> Result<f64> {
    let mut phase = Phase::Train(bn);
    let fwd = forward_batch(model, ps, &mut phase, batch)?;
    let (loss, dmasks) = batch_loss_and_mask_grads(&fwd.masks, batch)?;
    let mut grads = Grads::zeros_like(ps);
    model.backward(ps, &mut grads, &fwd, &dmasks);
    opt.apply(ps, &grads);
    Ok(loss)
}

/// Mean loss over a whole sample set with batch-norm in inference mode.
pub fn validation_loss(
    model: &MaskEstimator,
    ps: &ParamStore<f32>,
    bn: &BnState<f32>,
    set: &SampleSet,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch: Vec<Sample> = chunk
            .iter()
            .map(|&i| set.sample(i))
            .collect::<Result<_>>()?;
        let mut phase = Phase::Eval(bn);
        let fwd = forward_batch(model, ps, &mut phase, &batch)?;
        for (mask, s) in fwd.masks.iter().zip(&batch) {
            total += rmse_loss(&s.target, &(mask * &s.mixture))?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_loss: f64,
    pub steps_run: u64,
}

/// Deterministic per-step batch RNG; depends only on (seed, step) so resumed
/// runs draw identical batches.
fn step_rng(seed: u64, step: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, 0xBA7C4, step))
}

/// Trains until max_steps or early stop, validating periodically and keeping
/// the best-validation checkpoint. Returns checkpoint paths.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    stft_cfg: StftConfig,
    dataset_root: &Path,
    train_manifest: &Path,
    val_manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    run_config_echo: String,
) -> Result<FitOutcome> {
    train_cfg.validate()?;
    if model_cfg.condition_mode != train_cfg.condition_mode {
        return Err(TrainError::Config(
            "model and train configs disagree on condition_mode".into(),
        ));
    }
    let train_set = SampleSet::load(
        train_manifest,
        dataset_root,
        train_cfg.condition_mode,
        stft_cfg,
    )?;
    let val_set = SampleSet::load(val_manifest, dataset_root, train_cfg.condition_mode, stft_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let log_path = out_dir.join("train_log.jsonl");

    let (model, mut ps, mut bn, mut opt, start_step, mut best_val) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (model, ps, bn) = ckpt.restore()?;
            let opt = ckpt
                .restore_optimizer(&ps)?
                .unwrap_or_else(|| Optimizer::new(train_cfg.optimizer.clone(), &ps));
            (model, ps, bn, opt, ckpt.step, ckpt.best_val_loss)
        }
        None => {
            let mut ps = ParamStore::new();
            let mut bn = BnState::new();
            let model = MaskEstimator::build(model_cfg, &mut ps, &mut bn, train_cfg.seed)?;
            let opt = Optimizer::new(train_cfg.optimizer.clone(), &ps);
            (model, ps, bn, opt, 0, None)
        }
    };

    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?,
    );
    let started = Instant::now();
    let mut stale_validations = 0usize;
    let mut steps_run = start_step;

    for step in start_step..train_cfg.max_steps {
        let mut rng = step_rng(train_cfg.seed, step);
        let indices: Vec<usize> = (0..train_cfg.batch_size)
            .map(|_| rng.gen_range(0..train_set.len()))
            .collect();
        let batch: Vec<Sample> = indices
            .iter()
            .map(|&i| train_set.sample(i))
            .collect::<Result<_>>()?;
        let loss = train_step(&model, &mut ps, &mut bn, &mut opt, &batch)?;
        steps_run = step + 1;
        if !loss.is_finite() {
            let diagnostics = serde_json::json!({
                "batch_indices": indices,
                "param_flat_len": ps.flat_len(),
                "optimizer_step": opt.step,
            })
            .to_string();
            return Err(TrainError::NonFinite { step, diagnostics });
        }

        let validate_now =
            steps_run % train_cfg.val_interval == 0 || steps_run == train_cfg.max_steps;
        let mut val_loss = None;
        if validate_now {
            let vl = validation_loss(&model, &ps, &bn, &val_set, train_cfg.batch_size)?;
            val_loss = Some(vl);
            let improved = best_val.map_or(true, |b| vl < b);
            if improved {
                best_val = Some(vl);
                stale_validations = 0;
                Checkpoint::capture(
                    &model,
                    &ps,
                    &bn,
                    Some(&opt),
                    run_config_echo.clone(),
                    train_cfg.seed,
                    steps_run,
                    best_val,
                )
                .save(&best_path)?;
            } else {
                stale_validations += 1;
            }
            Checkpoint::capture(
                &model,
                &ps,
                &bn,
                Some(&opt),
                run_config_echo.clone(),
                train_cfg.seed,
                steps_run,
                best_val,
            )
            .save(&last_path)?;
        }

        let row = TrainLogRow {
            step: steps_run,
            train_loss: loss,
            val_loss,
            wall_time: started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut log, &row)?;
        log.write_all(b"\n")?;
        log.flush()?;

        if stale_validations >= train_cfg.early_stop_patience {
            break;
        }
    }

    // A run that never reached a validation boundary still checkpoints.
    if !last_path.exists() || best_val.is_none() {
        let vl = validation_loss(&model, &ps, &bn, &val_set, train_cfg.batch_size)?;
        best_val = Some(best_val.map_or(vl, |b: f64| b.min(vl)));
        let ckpt = Checkpoint::capture(
            &model,
            &ps,
            &bn,
            Some(&opt),
            run_config_echo,
            train_cfg.seed,
            steps_run,
            best_val,
        );
        ckpt.save(&last_path)?;
        if !best_path.exists() {
            ckpt.save(&best_path)?;
        }
    }

    Ok(FitOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_loss: best_val.unwrap(),
        steps_run,
    })
}

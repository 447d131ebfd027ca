//! SDR/SDRi computation, per-regime and per-SNR aggregation into report
//! tables, and spectrogram figure emission.

use crate::data::{Manifest, ManifestRecord, Regime, Taxonomy};
use crate::dsp::{
    amplitude, apply_mask, griffin_lim, istft, read_wav, stft, ComplexSpectrogram, InitPhase,
    Spectrogram, StftConfig, TFMask, Waveform,
};
use crate::model::{Checkpoint, ConditionInput, ConditionMode, MaskEstimator};
use crate::nn::{BnState, ParamStore};
use crate::phoneme::PhonemeInventory;
use crate::training::condition_for_record;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Returned for an exact reconstruction, where the true ratio is infinite.
pub const SDR_CAP_DB: f64 = 120.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: reference {reference} vs estimate {estimate}")]
    Length { reference: usize, estimate: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing audio file: {0}")]
    MissingAudio(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// 10*log10(||y||^2 / ||y - estimate||^2), capped at +120 dB when the
/// estimate matches exactly.
pub fn sdr(y: &Waveform, estimate: &Waveform) -> Result<f64> {
    if y.samples.len() != estimate.samples.len() {
        return Err(EvalError::Length {
            reference: y.samples.len(),
            estimate: estimate.samples.len(),
        });
    }
    let ey = y.energy();
    if ey == 0.0 {
        return Err(EvalError::Degenerate("silent reference".into()));
    }
    let ee: f64 = y
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    if ee == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok(10.0 * (ey / ee).log10())
}

/// SDR improvement of the estimate over using the raw mixture.
pub fn sdri(y: &Waveform, x: &Waveform, estimate: &Waveform) -> Result<f64> {
    Ok(sdr(y, estimate)? - sdr(y, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Reconstruction {
    GriffinLim { iterations: usize },
    Mixture,
}

impl Default for Reconstruction {
    fn default() -> Self {
        Reconstruction::Mixture
    }
}

/// Truncates or zero-pads the estimate to the reference length.
pub fn align_to(reference_len: usize, mut estimate: Waveform) -> Waveform {
    estimate.samples.resize(reference_len, 0.0);
    estimate
}

/// A restored model ready to extract sources from mixtures.
pub struct Extractor {
    pub model: MaskEstimator,
    pub params: ParamStore<f32>,
    pub bn: BnState<f32>,
    pub stft_cfg: StftConfig,
}

impl Extractor {
    pub fn from_checkpoint(path: &Path, stft_cfg: StftConfig) -> Result<Self> {
        let (model, params, bn) = Checkpoint::load(path)?.restore()?;
        Ok(Self {
            model,
            params,
            bn,
            stft_cfg,
        })
    }

    pub fn mode(&self) -> ConditionMode {
        self.model.cfg.condition_mode
    }

    pub fn mask_for(&self, mixture: &Spectrogram, cond: &ConditionInput) -> Result<TFMask> {
        Ok(self.model.estimate_mask(&self.params, &self.bn, mixture, cond)?)
    }

    /// Full extraction: mask the mixture magnitudes and reconstruct audio.
    pub fn extract(
        &self,
        mixture: &Waveform,
        cond: &ConditionInput,
        recon: Reconstruction,
    ) -> Result<Waveform> {
        let complex = stft(mixture, &self.stft_cfg)?;
        let mags = amplitude(&complex);
        let mask = self.mask_for(&mags, cond)?;
        reconstruct(&complex, &mask, recon)
    }
}

/// Applies the mask and inverts: either masked magnitudes with the mixture's
/// phase, or iterative phase retrieval from the masked magnitudes.
pub fn reconstruct(
    mixture: &ComplexSpectrogram,
    mask: &TFMask,
    recon: Reconstruction,
) -> Result<Waveform> {
    match recon {
        Reconstruction::Mixture => {
            let mut masked = mixture.clone();
            ndarray::Zip::from(&mut masked.bins)
                .and(&mask.values)
                .for_each(|z, &m| *z = *z * m);
            Ok(istft(&masked)?)
        }
        Reconstruction::GriffinLim { iterations } => {
            let masked = apply_mask(&amplitude(mixture), mask)?;
            Ok(griffin_lim(&masked, iterations, InitPhase::Zero)?)
        }
    }
}

/// What produces the mask: a trained model or the ideal-ratio-mask oracle
/// computed from ground truth (pipeline upper-bound reference).
pub enum Masker {
    Model(Extractor),
    IdealRatio,
}

pub const IRM_EPS: f32 = 1e-8;

pub fn ideal_ratio_mask(target: &Spectrogram, mixture: &Spectrogram) -> TFMask {
    let mut values = Array2::zeros(mixture.magnitudes.dim());
    ndarray::Zip::from(&mut values)
        .and(&target.magnitudes)
        .and(&mixture.magnitudes)
        .for_each(|v, &y, &x| *v = y / (x + IRM_EPS));
    TFMask { values }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub regime: Regime,
    pub snr_db: i32,
    pub sdr_mixture: f64,
    pub sdr_estimate: f64,
    pub sdri: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: Regime,
    pub snr_db: i32,
    pub count: usize,
    pub mean_sdri: f64,
    pub std_sdri: f64,
    pub median_sdri: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups records by (regime, snr) and aggregates mean, std, and median.
pub fn aggregate(records: &[EvalRecord]) -> EvalReport {
    let mut groups: BTreeMap<(Regime, i32), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.regime, r.snr_db)).or_default().push(r.sdri);
    }
    let rows = groups
        .into_iter()
        .map(|((regime, snr_db), mut vals)| {
            let count = vals.len();
            let mean = vals.iter().sum::<f64>() / count as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            ReportRow {
                regime,
                snr_db,
                count,
                mean_sdri: mean,
                std_sdri: var.sqrt(),
                median_sdri: median(&mut vals),
            }
        })
        .collect();
    EvalReport { rows }
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn to_text_table(&self) -> String {
        let mut out = String::from(
            "regime             snr_db  count  mean_sdri  std_sdri  median_sdri\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>6}  {:>5}  {:>9.3}  {:>8.3}  {:>11.3}\n",
                r.regime.to_string(),
                r.snr_db,
                r.count,
                r.mean_sdri,
                r.std_sdri,
                r.median_sdri
            ));
        }
        out
    }
}

pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub report: EvalReport,
}

fn read_wav_listed(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(EvalError::MissingAudio(path.display().to_string()));
    }
    Ok(read_wav(path)?)
}

fn evaluate_record(
    masker: &Masker,
    rec: &ManifestRecord,
    root: &Path,
    stft_cfg: &StftConfig,
    recon: Reconstruction,
    tax: &Taxonomy,
    inv: &PhonemeInventory,
) -> Result<EvalRecord> {
    let mixture = read_wav_listed(&root.join(&rec.paths.mixture))?;
    let target = read_wav_listed(&root.join(&rec.paths.target))?;
    let complex = stft(&mixture, stft_cfg)?;
    let mags = amplitude(&complex);
    let mask = match masker {
        Masker::Model(extractor) => {
            let cond = condition_for_record(extractor.mode(), rec, tax, inv)?;
            extractor.mask_for(&mags, &cond)?
        }
        Masker::IdealRatio => {
            let target_mags = amplitude(&stft(&target, stft_cfg)?);
            ideal_ratio_mask(&target_mags, &mags)
        }
    };
    let estimate = align_to(target.samples.len(), reconstruct(&complex, &mask, recon)?);
    let sdr_mixture = sdr(&target, &mixture)?;
    let sdr_estimate = sdr(&target, &estimate)?;
    Ok(EvalRecord {
        id: rec.id.clone(),
        regime: rec.regime,
        snr_db: rec.snr_db,
        sdr_mixture,
        sdr_estimate,
        sdri: sdr_estimate - sdr_mixture,
    })
}

/// Extracts every record in the manifest and aggregates SDRi per
/// (regime, snr) cell.
pub fn evaluate_manifest(
    masker: &Masker,
    manifest: &Path,
    root: &Path,
    stft_cfg: StftConfig,
    recon: Reconstruction,
) -> Result<EvalOutcome> {
    let m = Manifest::read(manifest)?;
    let tax = Taxonomy::default_taxonomy();
    let inv = PhonemeInventory::default_inventory();
    let records: Vec<Result<EvalRecord>> = m
        .records
        .par_iter()
        .map(|rec| evaluate_record(masker, rec, root, &stft_cfg, recon, &tax, &inv))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(r?);
    }
    let report = aggregate(&out);
    Ok(EvalOutcome {
        records: out,
        report,
    })
}

// ---------------------------------------------------------------------------
// Figure emission: 4-row log-magnitude panels
// ---------------------------------------------------------------------------

fn log_mag_image(rows: &[&Array2<f32>]) -> image::GrayImage {
    let (f, t) = rows[0].dim();
    let gap = 4usize;
    let height = rows.len() * f + (rows.len() - 1) * gap;
    let mut img = image::GrayImage::from_pixel(t as u32, height as u32, image::Luma([255u8]));
    for (ri, mag) in rows.iter().enumerate() {
        assert_eq!(mag.dim(), (f, t));
        let db = mag.mapv(|v| 20.0 * (v + 1e-6).log10());
        let max = db.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let floor = max - 80.0;
        let y0 = ri * (f + gap);
        for fi in 0..f {
            for ti in 0..t {
                let norm = ((db[(fi, ti)] - floor) / 80.0).clamp(0.0, 1.0);
                // Dark = loud; low frequencies at the bottom of each panel.
                let pixel = (255.0 * (1.0 - norm)) as u8;
                img.put_pixel(ti as u32, (y0 + f - 1 - fi) as u32, image::Luma([pixel]));
            }
        }
    }
    img
}

/// Writes `n` 4-row panels (mixture, baseline extraction, onomatopoeia
/// extraction, ground truth); example choice is seeded.
pub fn plot_examples(
    onoma: &Extractor,
    baseline: &Extractor,
    manifest: &Path,
    root: &Path,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let m = Manifest::read(manifest)?;
    let tax = Taxonomy::default_taxonomy();
    let inv = PhonemeInventory::default_inventory();
    std::fs::create_dir_all(out_dir)?;
    let mut indices: Vec<usize> = (0..m.records.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(n);
    indices.sort_unstable();

    let mut written = Vec::with_capacity(indices.len());
    for idx in indices {
        let rec = &m.records[idx];
        let mixture = read_wav_listed(&root.join(&rec.paths.mixture))?;
        let target = read_wav_listed(&root.join(&rec.paths.target))?;
        let mix_mags = amplitude(&stft(&mixture, &onoma.stft_cfg)?);
        let tgt_mags = amplitude(&stft(&target, &onoma.stft_cfg)?);
        let estimate_mags = |ex: &Extractor| -> Result<Array2<f32>> {
            let cond = condition_for_record(ex.mode(), rec, &tax, &inv)?;
            let mask = ex.mask_for(&mix_mags, &cond)?;
            Ok(apply_mask(&mix_mags, &mask)?.magnitudes)
        };
        let baseline_mags = estimate_mags(baseline)?;
        let onoma_mags = estimate_mags(onoma)?;
        let img = log_mag_image(&[
            &mix_mags.magnitudes,
            &baseline_mags,
            &onoma_mags,
            &tgt_mags.magnitudes,
        ]);
        let path = out_dir.join(format!("example-{}.png", rec.id));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes both report forms next to each other.
pub fn write_report(report: &EvalReport, out_dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let json = out_dir.join(format!("{stem}.json"));
    let text = out_dir.join(format!("{stem}.txt"));
    report.write_json(&json)?;
    let mut f = std::fs::File::create(&text)?;
    f.write_all(report.to_text_table().as_bytes())?;
    Ok((json, text))
}

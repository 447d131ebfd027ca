//! The mask estimator: U-Net encoder, conditioning encoders (BiLSTM over
//! phonemes, one-hot class baselines), tile-and-concatenate fusion, U-Net
//! decoder, and sigmoid mask head.
//!
//! Encoder blocks are 4x4 stride-2 convolutions with batch norm and a leaky
//! rectifier (slope 0.2); decoder blocks are 4x4 stride-2 transposed
//! convolutions with batch norm and a rectifier, except the final block which
//! has neither. Matching encoder/decoder levels are skip-connected. The
//! condition vector is tiled into D constant feature maps and concatenated at
//! the bottleneck.

use crate::dsp::{Spectrogram, TFMask};
use crate::nn::{
    leaky_relu, leaky_relu_backward, sigmoid, BatchNorm2d, BatchNorm2dCache, BnState, Conv2d,
    Conv2dCache, ConvTranspose2d, ConvTranspose2dCache, Grads, Linear, LinearCache, Lstm,
    LstmCache, Optimizer, ParamStore, Phase, Scalar,
};
use crate::phoneme::OneHotSequence;
use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("condition does not match condition_mode: {0}")]
    ConditionMismatch(String),
    #[error("class label {label} out of range (vocab {vocab})")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("empty phoneme sequence")]
    EmptySequence,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] bincode::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    Onomatopoeia,
    Subclass,
    Superclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder/decoder depth K.
    pub depth: usize,
    /// Channel multiplier; encoder level k emits base_channels * 2^k maps.
    pub base_channels: usize,
    /// Condition embedding dimension D (onomatopoeia mode).
    pub embed_dim: usize,
    /// Hidden units per BiLSTM direction.
    pub lstm_units: usize,
    pub condition_mode: ConditionMode,
    /// Input frequency bins after the Nyquist trim; divisible by 2^depth.
    pub input_bins: usize,
    /// One-hot vocabulary size for the class baseline modes.
    pub class_vocab_size: usize,
    /// Width of the phoneme one-hot rows.
    pub phoneme_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 2,
            embed_dim: 128,
            lstm_units: 512,
            condition_mode: ConditionMode::Onomatopoeia,
            input_bins: 1024,
            class_vocab_size: 44,
            phoneme_dim: 27,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(ModelError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.input_bins % (1 << self.depth) != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input_bins {} not divisible by 2^{}",
                self.input_bins, self.depth
            )));
        }
        if self.condition_dim() == 0 {
            return Err(ModelError::InvalidConfig("condition dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Bottleneck channel count C.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// D: embedding size in onomatopoeia mode, vocabulary size in the class
    /// baseline modes (the one-hot is used directly as the condition).
    pub fn condition_dim(&self) -> usize {
        match self.condition_mode {
            ConditionMode::Onomatopoeia => self.embed_dim,
            ConditionMode::Subclass | ConditionMode::Superclass => self.class_vocab_size,
        }
    }
}

/// The query for one extraction: a phoneme one-hot sequence or a class label.
#[derive(Debug, Clone)]
pub enum ConditionInput {
    Word(OneHotSequence),
    Class(usize),
}

struct EncBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct DecBlock {
    deconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

struct WordEncoder {
    fwd: Lstm,
    bwd: Lstm,
    proj: Linear,
}

/// U-Net mask estimator; parameters live in an external [`ParamStore`].
pub struct MaskEstimator {
    pub cfg: ModelConfig,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    word: Option<WordEncoder>,
}

pub struct EncCache<T> {
    conv: Conv2dCache<T>,
    bn: Option<BatchNorm2dCache<T>>,
    pre_act: Array4<T>,
}

pub struct DecCache<T> {
    deconv: ConvTranspose2dCache<T>,
    bn: Option<BatchNorm2dCache<T>>,
    pre_act: Option<Array4<T>>,
}

pub struct CondCache<T> {
    lstm_f: Vec<LstmCache<T>>,
    lstm_b: Vec<LstmCache<T>>,
    proj: LinearCache<T>,
}

pub struct BatchForward<T> {
    /// Per-sample masks at the original (F, T) shape, entries in (0,1).
    pub masks: Vec<Array2<T>>,
    mask_pad: Array4<T>,
    enc_caches: Vec<EncCache<T>>,
    dec_caches: Vec<DecCache<T>>,
    cond_cache: Option<CondCache<T>>,
    orig_shape: (usize, usize),
    trimmed: bool,
}

impl MaskEstimator {
    /// Registers all parameters for `cfg` into the stores, seeded.
    pub fn build<T: Scalar>(
        cfg: ModelConfig,
        ps: &mut ParamStore<T>,
        bn: &mut BnState<T>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = cfg.depth;
        let mut enc = Vec::with_capacity(k);
        for level in 1..=k {
            let cin = if level == 1 {
                1
            } else {
                cfg.base_channels << (level - 1)
            };
            let cout = cfg.base_channels << level;
            enc.push(EncBlock {
                conv: Conv2d::new(ps, &mut rng, &format!("enc{level}.conv"), cin, cout),
                bn: BatchNorm2d::new(ps, bn, &format!("enc{level}.bn"), cout),
            });
        }
        let c = cfg.bottleneck_channels();
        let d = cfg.condition_dim();
        let mut dec = Vec::with_capacity(k);
        for level in 1..=k {
            let cin = if level == 1 {
                c + d
            } else {
                2 * (cfg.base_channels << (k - level + 1))
            };
            let cout = if level == k {
                1
            } else {
                cfg.base_channels << (k - level)
            };
            let bn_layer = if level == k {
                None
            } else {
                Some(BatchNorm2d::new(ps, bn, &format!("dec{level}.bn"), cout))
            };
            dec.push(DecBlock {
                deconv: ConvTranspose2d::new(ps, &mut rng, &format!("dec{level}.deconv"), cin, cout),
                bn: bn_layer,
            });
        }
        let word = match cfg.condition_mode {
            ConditionMode::Onomatopoeia => Some(WordEncoder {
                fwd: Lstm::new(ps, &mut rng, "word.fwd", cfg.phoneme_dim, cfg.lstm_units),
                bwd: Lstm::new(ps, &mut rng, "word.bwd", cfg.phoneme_dim, cfg.lstm_units),
                proj: Linear::new(ps, &mut rng, "word.proj", 2 * cfg.lstm_units, cfg.embed_dim),
            }),
            _ => None,
        };
        Ok(Self { cfg, enc, dec, word })
    }

    /// U-Net encoder: per level both spatial axes halve and channels double.
    /// Returns (bottleneck, per-level outputs, caches).
    pub fn encode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        phase: &mut Phase<'_, T>,
        x: &Array4<T>,
    ) -> Result<(Array4<T>, Vec<Array4<T>>, Vec<EncCache<T>>)> {
        let (_, c, h, w) = x.dim();
        if c != 1 {
            return Err(ModelError::Shape(format!("expected 1 input channel, got {c}")));
        }
        let k = self.enc.len();
        if h % (1 << k) != 0 || w % (1 << k) != 0 {
            return Err(ModelError::Shape(format!(
                "input {h}x{w} not divisible by 2^{k}; caller must pad"
            )));
        }
        let mut cur = x.clone();
        let mut levels = Vec::with_capacity(k);
        let mut caches = Vec::with_capacity(k);
        for block in &self.enc {
            let (a, conv_cache) = block.conv.forward(ps, &cur);
            let (b, bn_cache) = block.bn.forward(ps, phase, &a);
            let (h_out, pre_act) = leaky_relu(&b, LEAKY_SLOPE);
            caches.push(EncCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_act,
            });
            levels.push(h_out.clone());
            cur = h_out;
        }
        Ok((cur, levels, caches))
    }

    /// One-hot class label used directly as the condition vector.
    pub fn class_encode<T: Scalar>(&self, label: usize) -> Result<Array1<T>> {
        let vocab = self.cfg.class_vocab_size;
        if label >= vocab {
            return Err(ModelError::LabelOutOfRange { label, vocab });
        }
        let mut v = Array1::zeros(vocab);
        v[label] = T::one();
        Ok(v)
    }

    /// BiLSTM word embedding: learned projection of the concatenated final
    /// forward and final backward hidden states.
    pub fn bilstm_encode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        l: &OneHotSequence,
    ) -> Result<Array1<T>> {
        let word = self
            .word
            .as_ref()
            .ok_or_else(|| ModelError::ConditionMismatch("model has no word encoder".into()))?;
        let (_, (_, _, concat)) = self.bilstm_encode_cached(ps, l)?;
        let (o, _) = word.proj.forward(ps, &concat);
        Ok(o.remove_axis(Axis(0)))
    }

    fn bilstm_encode_cached<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        l: &OneHotSequence,
    ) -> Result<(Array1<T>, (LstmCache<T>, LstmCache<T>, Array2<T>))> {
        let word = self
            .word
            .as_ref()
            .ok_or_else(|| ModelError::ConditionMismatch("model has no word encoder".into()))?;
        if l.matrix.nrows() == 0 {
            return Err(ModelError::EmptySequence);
        }
        let xs = l.matrix.mapv(|v| T::from_f(v as f64));
        let (h_f, cache_f) = word.fwd.forward(ps, &xs);
        let mut rev = xs.clone();
        rev.invert_axis(Axis(0));
        let (h_b, cache_b) = word.bwd.forward(ps, &rev);
        let mut concat = Array2::zeros((1, 2 * self.cfg.lstm_units));
        concat.slice_mut(s![0, ..self.cfg.lstm_units]).assign(&h_f);
        concat.slice_mut(s![0, self.cfg.lstm_units..]).assign(&h_b);
        Ok((concat.clone().remove_axis(Axis(0)), (cache_f, cache_b, concat)))
    }

    fn condition_batch<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        conds: &[ConditionInput],
    ) -> Result<(Array2<T>, Option<CondCache<T>>)> {
        let d = self.cfg.condition_dim();
        let mut o = Array2::zeros((conds.len(), d));
        match self.cfg.condition_mode {
            ConditionMode::Onomatopoeia => {
                let word = self.word.as_ref().unwrap();
                let mut lstm_f = Vec::with_capacity(conds.len());
                let mut lstm_b = Vec::with_capacity(conds.len());
                let mut concat = Array2::zeros((conds.len(), 2 * self.cfg.lstm_units));
                for (i, cond) in conds.iter().enumerate() {
                    let l = match cond {
                        ConditionInput::Word(l) => l,
                        ConditionInput::Class(_) => {
                            return Err(ModelError::ConditionMismatch(
                                "got class label, expected onomatopoeic word".into(),
                            ))
                        }
                    };
                    let (_, (cf, cb, row)) = self.bilstm_encode_cached(ps, l)?;
                    concat.row_mut(i).assign(&row.row(0));
                    lstm_f.push(cf);
                    lstm_b.push(cb);
                }
                let (proj_out, proj_cache) = word.proj.forward(ps, &concat);
                o.assign(&proj_out);
                Ok((
                    o,
                    Some(CondCache {
                        lstm_f,
                        lstm_b,
                        proj: proj_cache,
                    }),
                ))
            }
            ConditionMode::Subclass | ConditionMode::Superclass => {
                for (i, cond) in conds.iter().enumerate() {
                    let label = match cond {
                        ConditionInput::Class(label) => *label,
                        ConditionInput::Word(_) => {
                            return Err(ModelError::ConditionMismatch(
                                "got word, expected class label".into(),
                            ))
                        }
                    };
                    o.row_mut(i).assign(&self.class_encode::<T>(label)?);
                }
                Ok((o, None))
            }
        }
    }

    /// Stretches each condition vector into D constant feature maps and
    /// concatenates them after the bottleneck channels.
    pub fn tile_and_concat<T: Scalar>(bottleneck: &Array4<T>, o: &Array2<T>) -> Array4<T> {
        let (b, c, fh, fw) = bottleneck.dim();
        let d = o.ncols();
        assert_eq!(o.nrows(), b);
        let mut fused = Array4::zeros((b, c + d, fh, fw));
        fused.slice_mut(s![.., ..c, .., ..]).assign(bottleneck);
        for bi in 0..b {
            for di in 0..d {
                fused.slice_mut(s![bi, c + di, .., ..]).fill(o[(bi, di)]);
            }
        }
        fused
    }

    /// U-Net decoder over the fused bottleneck with skip connections;
    /// returns mask logits at the padded input shape.
    pub fn decode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        phase: &mut Phase<'_, T>,
        fused: &Array4<T>,
        skips: &[Array4<T>],
    ) -> Result<(Array4<T>, Vec<DecCache<T>>)> {
        let k = self.dec.len();
        if skips.len() != k {
            return Err(ModelError::Shape(format!(
                "expected {k} skip levels, got {}",
                skips.len()
            )));
        }
        let mut cur = fused.clone();
        let mut caches = Vec::with_capacity(k);
        for (j, block) in self.dec.iter().enumerate() {
            let level = j + 1;
            let (u, deconv_cache) = block.deconv.forward(ps, &cur);
            if level == k {
                caches.push(DecCache {
                    deconv: deconv_cache,
                    bn: None,
                    pre_act: None,
                });
                cur = u;
            } else {
                let bn = block.bn.as_ref().unwrap();
                let (v, bn_cache) = bn.forward(ps, phase, &u);
                let (r, pre_act) = leaky_relu(&v, 0.0);
                let skip = &skips[k - level - 1];
                if skip.dim() != r.dim() {
                    return Err(ModelError::Shape(format!(
                        "skip level {} shape {:?} vs decoder {:?}",
                        k - level,
                        skip.dim(),
                        r.dim()
                    )));
                }
                let (b, rc, rh, rw) = r.dim();
                let mut g = Array4::zeros((b, 2 * rc, rh, rw));
                g.slice_mut(s![.., ..rc, .., ..]).assign(&r);
                g.slice_mut(s![.., rc.., .., ..]).assign(skip);
                caches.push(DecCache {
                    deconv: deconv_cache,
                    bn: bn_cache,
                    pre_act: Some(pre_act),
                });
                cur = g;
            }
        }
        Ok((cur, caches))
    }

    /// Full pipeline on a batch of equally-shaped spectrogram views:
    /// trim/pad -> encode -> condition -> fuse -> decode -> sigmoid -> unpad.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        phase: &mut Phase<'_, T>,
        xs: &[Array2<T>],
        conds: &[ConditionInput],
    ) -> Result<BatchForward<T>> {
        if xs.is_empty() || xs.len() != conds.len() {
            return Err(ModelError::Shape(format!(
                "batch of {} spectrograms vs {} conditions",
                xs.len(),
                conds.len()
            )));
        }
        let (f_orig, t_orig) = xs[0].dim();
        let trimmed = if f_orig == self.cfg.input_bins + 1 {
            true
        } else if f_orig == self.cfg.input_bins {
            false
        } else {
            return Err(ModelError::Shape(format!(
                "spectrogram has {f_orig} bins; model expects {} (+1 Nyquist)",
                self.cfg.input_bins
            )));
        };
        let f_in = self.cfg.input_bins;
        let block = 1 << self.cfg.depth;
        let t_pad = t_orig.div_ceil(block) * block;
        let mut x = Array4::zeros((xs.len(), 1, f_in, t_pad));
        for (bi, sample) in xs.iter().enumerate() {
            if sample.dim() != (f_orig, t_orig) {
                return Err(ModelError::Shape("ragged batch shapes".into()));
            }
            x.slice_mut(s![bi, 0, .., ..t_orig])
                .assign(&sample.slice(s![..f_in, ..]));
        }

        let (bottleneck, skips, enc_caches) = self.encode(ps, phase, &x)?;
        let (o, cond_cache) = self.condition_batch(ps, conds)?;
        let fused = Self::tile_and_concat(&bottleneck, &o);
        let (logits, dec_caches) = self.decode(ps, phase, &fused, &skips)?;

        let mask_pad = logits.mapv(sigmoid);
        let masks = (0..xs.len())
            .map(|bi| {
                let mut m = Array2::zeros((f_orig, t_orig));
                m.slice_mut(s![..f_in, ..])
                    .assign(&mask_pad.slice(s![bi, 0, .., ..t_orig]));
                if trimmed {
                    // Nyquist row of the mask is copied from the adjacent bin.
                    let last = mask_pad.slice(s![bi, 0, f_in - 1, ..t_orig]).to_owned();
                    m.row_mut(f_in).assign(&last);
                }
                m
            })
            .collect();
        Ok(BatchForward {
            masks,
            mask_pad,
            enc_caches,
            dec_caches,
            cond_cache,
            orig_shape: (f_orig, t_orig),
            trimmed,
        })
    }

    /// Backpropagates per-sample mask gradients (at the original shape)
    /// through the whole pipeline, accumulating parameter gradients.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        fwd: &BatchForward<T>,
        dmasks: &[Array2<T>],
    ) {
        let (f_orig, t_orig) = fwd.orig_shape;
        let f_in = self.cfg.input_bins;
        let (b, _, _, t_pad) = fwd.mask_pad.dim();
        assert_eq!(dmasks.len(), b);
        // Map mask gradients back onto the padded domain and through sigmoid.
        let mut dlogits = Array4::<T>::zeros(fwd.mask_pad.raw_dim());
        for (bi, dm) in dmasks.iter().enumerate() {
            assert_eq!(dm.dim(), (f_orig, t_orig));
            let mut dpad = Array2::<T>::zeros((f_in, t_pad));
            dpad.slice_mut(s![.., ..t_orig]).assign(&dm.slice(s![..f_in, ..]));
            if fwd.trimmed {
                // Nyquist-copy adjoint: its gradient lands on the source row.
                let mut last = dpad.slice_mut(s![f_in - 1, ..t_orig]);
                last += &dm.row(f_in);
            }
            let mpad = fwd.mask_pad.slice(s![bi, 0, .., ..]);
            ndarray::Zip::from(dlogits.slice_mut(s![bi, 0, .., ..]))
                .and(&dpad)
                .and(&mpad)
                .for_each(|dz, &d, &m| *dz = d * m * (T::one() - m));
        }

        // Decoder backward, collecting skip gradients per encoder level.
        let k = self.dec.len();
        let mut dskips: Vec<Option<Array4<T>>> = vec![None; k];
        let mut dcur = dlogits;
        for (j, block) in self.dec.iter().enumerate().rev() {
            let level = j + 1;
            let cache = &fwd.dec_caches[j];
            let du = if level == k {
                dcur
            } else {
                let rc = dcur.dim().1 / 2;
                let dr = dcur.slice(s![.., ..rc, .., ..]).to_owned();
                dskips[k - level - 1] = Some(dcur.slice(s![.., rc.., .., ..]).to_owned());
                let dv = leaky_relu_backward(cache.pre_act.as_ref().unwrap(), &dr, 0.0);
                block.bn.as_ref().unwrap().backward(
                    ps,
                    grads,
                    cache.bn.as_ref().expect("backward requires a train-phase forward"),
                    &dv,
                )
            };
            dcur = block.deconv.backward(ps, grads, &cache.deconv, &du);
        }

        // Split fused gradient into bottleneck and condition parts.
        let c = self.cfg.bottleneck_channels();
        let dbottleneck = dcur.slice(s![.., ..c, .., ..]).to_owned();
        let dcond = dcur.slice(s![.., c.., .., ..]);
        let d = self.cfg.condition_dim();
        let mut do_mat = Array2::<T>::zeros((b, d));
        for bi in 0..b {
            for di in 0..d {
                do_mat[(bi, di)] = dcond.slice(s![bi, di, .., ..]).sum();
            }
        }

        // Condition branch backward (trainable only in onomatopoeia mode).
        if let Some(cond_cache) = &fwd.cond_cache {
            let word = self.word.as_ref().unwrap();
            let dconcat = word.proj.backward(ps, grads, &cond_cache.proj, &do_mat);
            let h = self.cfg.lstm_units;
            for bi in 0..b {
                let dh_f = dconcat.slice(s![bi, ..h]).to_owned();
                let dh_b = dconcat.slice(s![bi, h..]).to_owned();
                word.fwd.backward(ps, grads, &cond_cache.lstm_f[bi], &dh_f);
                word.bwd.backward(ps, grads, &cond_cache.lstm_b[bi], &dh_b);
            }
        }

        // Encoder backward, adding skip gradients at each level's output.
        let mut dlevel = dbottleneck;
        for (idx, block) in self.enc.iter().enumerate().rev() {
            if idx < k - 1 {
                if let Some(ds) = &dskips[idx] {
                    dlevel += ds;
                }
            }
            let cache = &fwd.enc_caches[idx];
            let db = leaky_relu_backward(&cache.pre_act, &dlevel, LEAKY_SLOPE);
            let da = block.bn.backward(
                ps,
                grads,
                cache.bn.as_ref().expect("backward requires a train-phase forward"),
                &db,
            );
            dlevel = block.conv.backward(ps, grads, &cache.conv, &da);
        }
    }

    /// Inference entry point: estimates the soft mask for one spectrogram.
    pub fn estimate_mask(
        &self,
        ps: &ParamStore<f32>,
        bn_state: &BnState<f32>,
        x: &Spectrogram,
        cond: &ConditionInput,
    ) -> Result<TFMask> {
        let mut phase = Phase::Eval(bn_state);
        let fwd = self.forward(
            ps,
            &mut phase,
            std::slice::from_ref(&x.magnitudes),
            std::slice::from_ref(cond),
        )?;
        Ok(TFMask {
            values: fwd.masks.into_iter().next().unwrap(),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: self-describing container for params, optimizer state, config.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn blob(name: &str, a: &ArrayD<f32>) -> TensorBlob {
    TensorBlob {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.iter().copied().collect(),
    }
}

fn unblob(b: &TensorBlob) -> Result<ArrayD<f32>> {
    ArrayD::from_shape_vec(b.shape.clone(), b.data.clone())
        .map_err(|e| ModelError::Format(format!("tensor {}: {e}", b.name)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerBlob {
    pub step: u64,
    pub config: crate::nn::OptimizerConfig,
    pub m: Vec<TensorBlob>,
    pub v: Vec<TensorBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// Run configuration echo (JSON text), for provenance.
    pub run_config: String,
    pub params: Vec<TensorBlob>,
    pub bn_state: Vec<TensorBlob>,
    pub optimizer: Option<OptimizerBlob>,
    pub seed: u64,
    pub step: u64,
    pub best_val_loss: Option<f64>,
}

impl Checkpoint {
    pub fn capture(
        model: &MaskEstimator,
        ps: &ParamStore<f32>,
        bn: &BnState<f32>,
        optimizer: Option<&Optimizer<f32>>,
        run_config: String,
        seed: u64,
        step: u64,
        best_val_loss: Option<f64>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: model.cfg,
            run_config,
            params: ps.iter().map(|(n, a)| blob(n, a)).collect(),
            bn_state: bn
                .names
                .iter()
                .zip(&bn.values)
                .map(|(n, a)| blob(n, a))
                .collect(),
            optimizer: optimizer.map(|opt| OptimizerBlob {
                step: opt.step,
                config: opt.config.clone(),
                m: opt.m.iter().enumerate().map(|(i, a)| blob(&format!("m{i}"), a)).collect(),
                v: opt.v.iter().enumerate().map(|(i, a)| blob(&format!("v{i}"), a)).collect(),
            }),
            seed,
            step,
            best_val_loss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        bincode::serialize_into(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = bincode::deserialize_from(file)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and stores; parameter blobs are matched by name.
    pub fn restore(&self) -> Result<(MaskEstimator, ParamStore<f32>, BnState<f32>)> {
        let mut ps = ParamStore::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(self.model_config, &mut ps, &mut bn, self.seed)?;
        let by_name: std::collections::HashMap<&str, &TensorBlob> =
            self.params.iter().map(|b| (b.name.as_str(), b)).collect();
        for i in 0..ps.len() {
            let id = crate::nn::ParamId(i);
            let name = ps.name(id).to_string();
            let b = by_name
                .get(name.as_str())
                .ok_or_else(|| ModelError::Format(format!("missing parameter {name}")))?;
            let arr = unblob(b)?;
            if arr.shape() != ps.get(id).shape() {
                return Err(ModelError::Format(format!("shape mismatch for {name}")));
            }
            *ps.get_mut(id) = arr;
        }
        let st_by_name: std::collections::HashMap<&str, &TensorBlob> =
            self.bn_state.iter().map(|b| (b.name.as_str(), b)).collect();
        for (i, name) in bn.names.clone().iter().enumerate() {
            let b = st_by_name
                .get(name.as_str())
                .ok_or_else(|| ModelError::Format(format!("missing state {name}")))?;
            bn.values[i] = unblob(b)?;
        }
        Ok((model, ps, bn))
    }

    /// Restores the optimizer moments saved alongside the parameters.
    pub fn restore_optimizer(&self, ps: &ParamStore<f32>) -> Result<Option<Optimizer<f32>>> {
        match &self.optimizer {
            None => Ok(None),
            Some(ob) => {
                let mut opt = Optimizer::new(ob.config.clone(), ps);
                opt.step = ob.step;
                opt.m = ob.m.iter().map(unblob).collect::<Result<_>>()?;
                opt.v = ob.v.iter().map(unblob).collect::<Result<_>>()?;
                Ok(Some(opt))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phoneme::{encode_one_hot, g2p, OnomatopoeicWord, PhonemeInventory};
    use ndarray::Array2;
    use rand::Rng;

    fn tiny_cfg(mode: ConditionMode) -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 2,
            embed_dim: 2,
            lstm_units: 3,
            condition_mode: mode,
            input_bins: 8,
            class_vocab_size: 4,
            phoneme_dim: 27,
        }
    }

    fn word_onehot(text: &str) -> OneHotSequence {
        let inv = PhonemeInventory::default_inventory();
        encode_one_hot(&g2p(&OnomatopoeicWord::new(text).unwrap(), &inv).unwrap(), &inv).unwrap()
    }

    fn rand2(rng: &mut impl Rng, f: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((f, t), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoder_shape_halving() {
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 2,
            input_bins: 1024,
            lstm_units: 4,
            embed_dim: 4,
            ..ModelConfig::default()
        };
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 0).unwrap();
        let x = ndarray::Array4::<f32>::zeros((1, 1, 1024, 160));
        let mut phase = Phase::Eval(&bn);
        let (bottleneck, levels, _) = model.encode(&ps, &mut phase, &x).unwrap();
        assert_eq!(bottleneck.dim(), (1, 32, 64, 10));
        assert_eq!(levels[0].dim(), (1, 4, 512, 80));
        assert_eq!(levels[2].dim(), (1, 16, 128, 20));
    }

    #[test]
    fn encoder_rejects_non_divisible() {
        let cfg = tiny_cfg(ConditionMode::Subclass);
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 0).unwrap();
        let x = ndarray::Array4::<f32>::zeros((1, 1, 7, 8));
        let bn2 = bn.clone();
        let mut phase = Phase::Eval(&bn2);
        assert!(model.encode(&ps, &mut phase, &x).is_err());
    }

    #[test]
    fn class_encode_one_hot() {
        let mut cfg = tiny_cfg(ConditionMode::Superclass);
        cfg.class_vocab_size = 16;
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 0).unwrap();
        let v: Array1<f32> = model.class_encode(0).unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(v[0], 1.0);
        assert_eq!(v.sum(), 1.0);
        let mut cfg44 = tiny_cfg(ConditionMode::Subclass);
        cfg44.class_vocab_size = 44;
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model44 = MaskEstimator::build(cfg44, &mut ps, &mut bn, 0).unwrap();
        let v: Array1<f32> = model44.class_encode(43).unwrap();
        assert_eq!(v.len(), 44);
        assert_eq!(v[43], 1.0);
        assert_eq!(v.sum(), 1.0);
        assert!(model44.class_encode::<f32>(44).is_err());
    }

    #[test]
    fn bilstm_embedding_is_order_sensitive_and_deterministic() {
        let cfg = tiny_cfg(ConditionMode::Onomatopoeia);
        let mut ps = ParamStore::<f64>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 3).unwrap();
        let fwd_word = word_onehot("kanpi");
        let mut rev = fwd_word.clone();
        rev.matrix.invert_axis(Axis(0));
        let a = model.bilstm_encode(&ps, &fwd_word).unwrap();
        let b = model.bilstm_encode(&ps, &fwd_word).unwrap();
        let c = model.bilstm_encode(&ps, &rev).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        let diff = (&a - &c).mapv(f64::abs).sum();
        assert!(diff > 1e-8, "reversal produced identical embedding");
    }

    #[test]
    fn tile_and_concat_broadcast() {
        let bottleneck = ndarray::Array4::<f64>::from_elem((1, 2, 3, 4), 7.0);
        let o = ndarray::arr2(&[[3.0]]);
        let fused = MaskEstimator::tile_and_concat(&bottleneck, &o);
        assert_eq!(fused.dim(), (1, 3, 3, 4));
        assert!(fused
            .slice(s![0, 2, .., ..])
            .iter()
            .all(|&v| v == 3.0));
        assert_eq!(fused.slice(s![.., ..2, .., ..]), bottleneck);
    }

    #[test]
    fn mask_shape_and_range_for_both_time_lengths() {
        let cfg = ModelConfig {
            lstm_units: 8,
            embed_dim: 4,
            ..ModelConfig::default()
        };
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 1).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for t in [157usize, 160] {
            let x = Spectrogram {
                magnitudes: Array2::from_shape_simple_fn((1025, t), || rng.gen_range(0.0..2.0)),
                config: crate::dsp::StftConfig::default(),
            };
            let cond = ConditionInput::Word(word_onehot("kankan"));
            let mask = model.estimate_mask(&ps, &bn, &x, &cond).unwrap();
            assert_eq!(mask.values.dim(), (1025, t));
            assert!(mask.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn condition_mode_mismatch_is_rejected() {
        let cfg = tiny_cfg(ConditionMode::Subclass);
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 0).unwrap();
        let x = Spectrogram {
            magnitudes: Array2::ones((8, 8)),
            config: crate::dsp::StftConfig::default(),
        };
        let cond = ConditionInput::Word(word_onehot("pi"));
        assert!(matches!(
            model.estimate_mask(&ps, &bn, &x, &cond),
            Err(ModelError::ConditionMismatch(_))
        ));
    }

    #[test]
    fn mask_is_sensitive_to_condition_vector() {
        // Perturbing one coordinate of o must change the mask.
        let cfg = tiny_cfg(ConditionMode::Subclass);
        let mut ps = ParamStore::<f64>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 9).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let x = vec![rand2(&mut rng, 8, 8)];
        let bn2 = bn.clone();
        let run = |o: &Array2<f64>| {
            let mut phase = Phase::Eval(&bn2);
            let (bt, skips, _) = model
                .encode(&ps, &mut phase, &{
                    let mut arr = ndarray::Array4::zeros((1, 1, 8, 8));
                    arr.slice_mut(s![0, 0, .., ..]).assign(&x[0]);
                    arr
                })
                .unwrap();
            let fused = MaskEstimator::tile_and_concat(&bt, o);
            let (logits, _) = model.decode(&ps, &mut phase, &fused, &skips).unwrap();
            logits.mapv(sigmoid)
        };
        let o0 = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        let mut o1 = o0.clone();
        o1[(0, 0)] += 1e-3;
        let diff = (&run(&o0) - &run(&o1)).mapv(|v| v * v).sum().sqrt();
        assert!(diff >= 1e-8, "mask insensitive to condition: {diff}");
    }

    #[test]
    fn full_pipeline_gradient_check() {
        // Finite differences through trim/pad, U-Net, BiLSTM conditioning,
        // fusion, sigmoid, and the Nyquist copy, in f64.
        let cfg = tiny_cfg(ConditionMode::Onomatopoeia);
        let mut ps = ParamStore::<f64>::new();
        let mut bn0 = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn0, 7).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let xs = vec![rand2(&mut rng, 9, 8), rand2(&mut rng, 9, 8)];
        let ys = vec![rand2(&mut rng, 9, 8), rand2(&mut rng, 9, 8)];
        let conds = vec![
            ConditionInput::Word(word_onehot("kan")),
            ConditionInput::Word(word_onehot("pi")),
        ];
        let loss = |ps: &ParamStore<f64>| -> f64 {
            let mut bn = bn0.clone();
            let mut phase = Phase::Train(&mut bn);
            let fwd = model.forward(ps, &mut phase, &xs, &conds).unwrap();
            fwd.masks
                .iter()
                .zip(xs.iter().zip(&ys))
                .map(|(m, (x, y))| (&(m * x) - y).mapv(|v| v * v).sum())
                .sum()
        };
        let mut bn = bn0.clone();
        let mut phase = Phase::Train(&mut bn);
        let fwd = model.forward(&ps, &mut phase, &xs, &conds).unwrap();
        let dmasks: Vec<_> = fwd
            .masks
            .iter()
            .zip(xs.iter().zip(&ys))
            .map(|(m, (x, y))| (&(m * x) - y).mapv(|v| 2.0 * v) * x)
            .collect();
        let mut grads = Grads::zeros_like(&ps);
        model.backward(&ps, &mut grads, &fwd, &dmasks);

        let n = ps.flat_len();
        let eps = 1e-5;
        let mut idx_rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        for _ in 0..12 {
            let i = idx_rng.gen_range(0..n);
            let orig = ps.get_flat(i);
            ps.set_flat(i, orig + eps);
            let lp = loss(&ps);
            ps.set_flat(i, orig - eps);
            let lm = loss(&ps);
            ps.set_flat(i, orig);
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.get_flat(i);
            if numeric.abs() < 1e-8 && analytic.abs() < 1e-8 {
                continue;
            }
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "flat param {i}: numeric {numeric} analytic {analytic} rel {rel}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let cfg = tiny_cfg(ConditionMode::Onomatopoeia);
        let mut ps = ParamStore::<f32>::new();
        let mut bn = BnState::new();
        let model = MaskEstimator::build(cfg, &mut ps, &mut bn, 4).unwrap();
        let x = Spectrogram {
            magnitudes: Array2::from_elem((8, 8), 0.5),
            config: crate::dsp::StftConfig::default(),
        };
        let cond = ConditionInput::Word(word_onehot("popo"));
        let before = model.estimate_mask(&ps, &bn, &x, &cond).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint::capture(&model, &ps, &bn, None, String::from("{}"), 4, 0, None);
        ckpt.save(&path).unwrap();
        let (model2, ps2, bn2) = Checkpoint::load(&path).unwrap().restore().unwrap();
        let after = model2.estimate_mask(&ps2, &bn2, &x, &cond).unwrap();
        assert_eq!(before.values, after.values);
    }
}

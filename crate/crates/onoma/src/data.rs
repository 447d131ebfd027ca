//! Procedural dataset: labeled synthetic sound events with paired rule-based
//! onomatopoeia, exact-SNR mixing, and train/val/eval manifest construction
//! under three interference regimes.

use crate::dsp::{write_wav, Waveform};
use crate::phoneme::OnomatopoeicWord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CANVAS_SECONDS: f64 = 5.0;
pub const SNR_GRID: [i32; 5] = [-10, -5, 0, 5, 10];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid event spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unknown subclass: {0}")]
    UnknownSubclass(String),
    #[error("event at offset {offset}s with duration {duration}s exceeds the {CANVAS_SECONDS}s canvas")]
    CanvasOverflow { offset: f64, duration: f64 },
    #[error("infeasible dataset request: {0}")]
    Infeasible(String),
    #[error("manifest format: {0}")]
    Format(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Phoneme(#[from] crate::phoneme::PhonemeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

// ---------------------------------------------------------------------------
// Taxonomy: 16 superclasses, 44 subclasses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    pub superclasses: Vec<String>,
    /// (subclass, superclass) pairs.
    pub subclasses: Vec<(String, String)>,
}

impl Taxonomy {
    pub fn default_taxonomy() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("metal", &["metal05", "metal10", "metal15"]),
            ("dice", &["dice1", "dice2", "dice3"]),
            ("bottle", &["bottle1", "bottle2"]),
            ("cup", &["cup1", "cup2"]),
            ("particl", &["particl1", "particl2"]),
            ("cap", &["cap1", "cap2"]),
            ("clap", &["clap1", "clap2"]),
            ("claps", &["claps1", "claps2"]),
            ("clip", &["clip1", "clip2"]),
            ("bell", &["bell1", "bell2"]),
            ("bells", &["bells1", "bells2", "bells3", "bells4", "bells5"]),
            ("coin", &["coin1", "coin2", "coin3"]),
            ("coins", &["coins1", "coins2", "coins3", "coins4", "coins5"]),
            ("whistle", &["whistle1", "whistle2", "whistle3"]),
            ("phone", &["phone1", "phone2", "phone3", "phone4"]),
            ("toy", &["toy1", "toy2"]),
        ];
        let superclasses = table.iter().map(|(s, _)| s.to_string()).collect();
        let subclasses = table
            .iter()
            .flat_map(|(sup, subs)| subs.iter().map(|sub| (sub.to_string(), sup.to_string())))
            .collect();
        Self {
            superclasses,
            subclasses,
        }
    }

    pub fn superclass_of(&self, subclass: &str) -> Result<&str> {
        self.subclasses
            .iter()
            .find(|(sub, _)| sub == subclass)
            .map(|(_, sup)| sup.as_str())
            .ok_or_else(|| DataError::UnknownSubclass(subclass.to_string()))
    }

    pub fn subclass_index(&self, subclass: &str) -> Result<usize> {
        self.subclasses
            .iter()
            .position(|(sub, _)| sub == subclass)
            .ok_or_else(|| DataError::UnknownSubclass(subclass.to_string()))
    }

    pub fn superclass_index(&self, superclass: &str) -> Result<usize> {
        self.superclasses
            .iter()
            .position(|s| s == superclass)
            .ok_or_else(|| DataError::UnknownSubclass(superclass.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Event synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Tonal,
    DecayingPartials,
    NoiseBurst,
    Ring,
    ChirpTrain,
}

/// Which waveform family a superclass's events are drawn from.
pub fn family_of(superclass: &str) -> Family {
    match superclass {
        "metal" | "bottle" | "cup" | "bell" | "bells" => Family::DecayingPartials,
        "dice" | "coin" | "coins" => Family::ChirpTrain,
        "particl" | "cap" | "clap" | "claps" | "clip" => Family::NoiseBurst,
        "whistle" | "toy" => Family::Tonal,
        "phone" => Family::Ring,
        other => panic!("no family mapping for superclass {other}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub subclass: String,
    pub family: Family,
    pub f0: f64,
    pub duration: f64,
    pub decay: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl EventSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration <= 5.0) {
            return Err(DataError::InvalidSpec(format!(
                "duration {} outside (0, 5]",
                self.duration
            )));
        }
        if !(80.0..=7600.0).contains(&self.f0) {
            return Err(DataError::InvalidSpec(format!(
                "f0 {} outside [80, 7600] Hz",
                self.f0
            )));
        }
        if self.repeats == 0 {
            return Err(DataError::InvalidSpec("repeats must be >= 1".into()));
        }
        if self.decay <= 0.0 {
            return Err(DataError::InvalidSpec("decay must be > 0".into()));
        }
        Ok(())
    }
}

/// Renders one event at 16 kHz, deterministic per seed, peak-normalized
/// to 0.5. `repeats` subdivides the duration into equal strike segments.
pub fn synthesize_event(spec: &EventSpec) -> Result<Waveform> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = (spec.duration * sr).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut samples = vec![0.0f64; n];
    let seg_len = n / spec.repeats;
    // Sound occupies the leading portion of each segment; the tail is silent
    // so repeated strikes stay audibly separated.
    let active = ((seg_len as f64) * 0.7).round() as usize;
    for r in 0..spec.repeats {
        let start = r * seg_len;
        match spec.family {
            Family::Tonal => {
                let fade = (active / 10).max(1);
                for i in 0..active {
                    let t = i as f64 / sr;
                    let mut env = 1.0;
                    if i < fade {
                        env = i as f64 / fade as f64;
                    }
                    if active - i <= fade {
                        env = env.min((active - i) as f64 / fade as f64);
                    }
                    samples[start + i] = env * (2.0 * std::f64::consts::PI * spec.f0 * t).sin();
                }
            }
            Family::DecayingPartials => {
                // Inharmonic ratios in the neighborhood of struck-bar modes.
                let ratios = [1.0, 2.756, 5.404, 8.933];
                let amps = [1.0, 0.6, 0.4, 0.25];
                let phases: Vec<f64> = (0..4)
                    .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
                    .collect();
                for i in 0..active {
                    let t = i as f64 / sr;
                    let mut v = 0.0;
                    for p in 0..4 {
                        let f = spec.f0 * ratios[p];
                        if f >= sr / 2.0 {
                            continue;
                        }
                        v += amps[p]
                            * (-spec.decay * t * (1.0 + 0.3 * p as f64)).exp()
                            * (2.0 * std::f64::consts::PI * f * t + phases[p]).sin();
                    }
                    samples[start + i] = v;
                }
            }
            Family::NoiseBurst => {
                for i in 0..active {
                    let t = i as f64 / sr;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    samples[start + i] = z * (-spec.decay * t).exp();
                }
            }
            Family::Ring => {
                let mod_rate = 22.0;
                for i in 0..active {
                    let t = i as f64 / sr;
                    let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * mod_rate * t).sin();
                    samples[start + i] =
                        env * (2.0 * std::f64::consts::PI * spec.f0 * t).sin();
                }
            }
            Family::ChirpTrain => {
                let len_s = active as f64 / sr;
                let f1 = (2.0 * spec.f0).min(7600.0);
                for i in 0..active {
                    let t = i as f64 / sr;
                    let phase = 2.0
                        * std::f64::consts::PI
                        * (spec.f0 * t + (f1 - spec.f0) * t * t / (2.0 * len_s));
                    samples[start + i] = (-3.0 * t / len_s).exp() * phase.sin();
                }
            }
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(DataError::Degenerate("synthesized event is silent".into()));
    }
    let scale = 0.5 / peak;
    Waveform::new(
        samples.iter().map(|&v| (v * scale) as f32).collect(),
        SAMPLE_RATE,
    )
    .map_err(Into::into)
}

// ---------------------------------------------------------------------------
// Rule-based onomatopoeia
// ---------------------------------------------------------------------------

fn vowel_for(spec: &EventSpec) -> char {
    match spec.family {
        Family::Tonal => {
            if spec.f0 >= 1000.0 {
                'i'
            } else {
                'u'
            }
        }
        _ => {
            if spec.f0 >= 2000.0 {
                'i'
            } else if spec.f0 >= 500.0 {
                'a'
            } else {
                'o'
            }
        }
    }
}

fn base_word(spec: &EventSpec) -> String {
    let v = vowel_for(spec);
    match spec.family {
        // Long tones carry a long-vowel marker (doubled vowel).
        Family::Tonal => {
            if spec.duration >= 1.0 {
                format!("p{v}{v}")
            } else {
                format!("p{v}")
            }
        }
        Family::DecayingPartials => format!("k{v}n"),
        Family::NoiseBurst => format!("p{v}n"),
        Family::Ring => format!("r{v}n"),
        Family::ChirpTrain => format!("ch{v}n"),
    }
}

/// Canonical onomatopoeic word: family consonant + f0-bucket vowel,
/// reduplicated when the event repeats.
pub fn word_for_event(spec: &EventSpec) -> OnomatopoeicWord {
    let base = base_word(spec);
    let text = if spec.repeats >= 2 {
        base.repeat(2)
    } else {
        base
    };
    OnomatopoeicWord::new(&text).expect("rule table emits valid romaji")
}

/// Three lexical variants per event: the canonical word, a voiced-initial
/// form, and a "-ri" suffixed form.
pub fn word_variants(spec: &EventSpec) -> [OnomatopoeicWord; 3] {
    let base = base_word(spec);
    let voiced_base = if let Some(rest) = base.strip_prefix("ch") {
        format!("j{rest}")
    } else {
        let mut c = base.chars();
        let first = match c.next().unwrap() {
            'p' => 'b',
            'k' => 'g',
            'r' => 'd',
            other => other,
        };
        format!("{first}{}", c.as_str())
    };
    let dup = |b: &str| {
        if spec.repeats >= 2 {
            b.repeat(2)
        } else {
            b.to_string()
        }
    };
    [
        OnomatopoeicWord::new(&dup(&base)).unwrap(),
        OnomatopoeicWord::new(&dup(&voiced_base)).unwrap(),
        OnomatopoeicWord::new(&format!("{}ri", dup(&base))).unwrap(),
    ]
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// Gain g such that 10*log10(||target||^2 / ||g*interference||^2) == snr_db.
pub fn scale_to_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<f64> {
    let et = target.energy();
    let ei = interference.energy();
    if et == 0.0 {
        return Err(DataError::Degenerate("silent target".into()));
    }
    if ei == 0.0 {
        return Err(DataError::Degenerate("silent interference".into()));
    }
    Ok((et / ei).sqrt() * 10f64.powf(-snr_db / 20.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    InterSuperclass,
    IntraSuperclass,
    IntraSubclass,
}

impl Regime {
    pub const ALL: [Regime; 3] = [
        Regime::InterSuperclass,
        Regime::IntraSuperclass,
        Regime::IntraSubclass,
    ];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::InterSuperclass => "inter-superclass",
            Regime::IntraSuperclass => "intra-superclass",
            Regime::IntraSubclass => "intra-subclass",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target: EventSpec,
    pub target_word: OnomatopoeicWord,
    pub interferences: Vec<EventSpec>,
    pub snr_db: i32,
    pub regime: Regime,
    pub split: Split,
    /// Onset seconds: target first, then one per interference.
    pub offsets: Vec<f64>,
}

fn place(canvas: &mut [f64], event: &Waveform, offset: f64) -> Result<()> {
    let start = (offset * SAMPLE_RATE as f64).round() as usize;
    if start + event.samples.len() > canvas.len() {
        return Err(DataError::CanvasOverflow {
            offset,
            duration: event.samples.len() as f64 / SAMPLE_RATE as f64,
        });
    }
    for (i, &s) in event.samples.iter().enumerate() {
        canvas[start + i] += s as f64;
    }
    Ok(())
}

fn canvas_energy(c: &[f64]) -> f64 {
    c.iter().map(|&v| v * v).sum()
}

/// Renders (mixture, target-at-offset). The joint interference gain
/// satisfies the requested SNR against the summed interference; a global
/// rescale avoids clipping without disturbing the ratio.
pub fn mix(spec: &MixtureSpec) -> Result<(Waveform, Waveform)> {
    let (m, t, _) = mix_with_snr(spec)?;
    Ok((m, t))
}

/// Like [`mix`] but also returns the SNR re-measured from the rendered
/// canvases in f64, before storage quantization. Infinite with no
/// interference.
pub fn mix_with_snr(spec: &MixtureSpec) -> Result<(Waveform, Waveform, f64)> {
    if spec.offsets.len() != 1 + spec.interferences.len() {
        return Err(DataError::InvalidSpec(format!(
            "{} offsets for {} events",
            spec.offsets.len(),
            1 + spec.interferences.len()
        )));
    }
    let n = (CANVAS_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut target = vec![0.0f64; n];
    place(&mut target, &synthesize_event(&spec.target)?, spec.offsets[0])?;

    let mut mixture: Vec<f64>;
    let measured;
    if spec.interferences.is_empty() {
        mixture = target.clone();
        measured = f64::INFINITY;
    } else {
        let mut interference = vec![0.0f64; n];
        for (ev, &off) in spec.interferences.iter().zip(&spec.offsets[1..]) {
            place(&mut interference, &synthesize_event(ev)?, off)?;
        }
        let et = canvas_energy(&target);
        let ei = canvas_energy(&interference);
        if et == 0.0 || ei == 0.0 {
            return Err(DataError::Degenerate("silent target or interference".into()));
        }
        let g = (et / ei).sqrt() * 10f64.powf(-(spec.snr_db as f64) / 20.0);
        mixture = target.clone();
        for (m, &i) in mixture.iter_mut().zip(&interference) {
            *m += g * i;
        }
        // Re-measure from the actual scaled canvas (scale-invariant, so the
        // clipping rescale below cannot disturb it).
        let ei_scaled: f64 = interference.iter().map(|&v| {
            let s = g * v;
            s * s
        }).sum();
        measured = 10.0 * (et / ei_scaled).log10();
    }
    // Joint rescale preserves the target/interference ratio exactly.
    let peak = mixture
        .iter()
        .chain(target.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.99 {
        let s = 0.99 / peak;
        for v in &mut mixture {
            *v *= s;
        }
        for v in &mut target {
            *v *= s;
        }
    }
    let to_wave = |v: Vec<f64>| Waveform::new(v.iter().map(|&x| x as f32).collect(), SAMPLE_RATE);
    Ok((to_wave(mixture)?, to_wave(target)?, measured))
}

/// Measured SNR of a rendered pair in dB (from the residual mixture-target).
pub fn measure_snr(mixture: &Waveform, target: &Waveform) -> Result<f64> {
    if mixture.samples.len() != target.samples.len() {
        return Err(DataError::InvalidSpec("length mismatch".into()));
    }
    let et = target.energy();
    let ei: f64 = mixture
        .samples
        .iter()
        .zip(&target.samples)
        .map(|(&m, &t)| {
            let d = m as f64 - t as f64;
            d * d
        })
        .sum();
    if et == 0.0 || ei == 0.0 {
        return Err(DataError::Degenerate("degenerate pair".into()));
    }
    Ok(10.0 * (et / ei).log10())
}

/// True iff every interference satisfies the regime's class/word constraint.
pub fn validate_regime(spec: &MixtureSpec, tax: &Taxonomy) -> Result<bool> {
    let tsub = &spec.target.subclass;
    let tsup = tax.superclass_of(tsub)?;
    for interf in &spec.interferences {
        let isub = &interf.subclass;
        let isup = tax.superclass_of(isub)?;
        let ok = match spec.regime {
            Regime::InterSuperclass => isup != tsup,
            Regime::IntraSuperclass => isup == tsup && isub != tsub,
            Regime::IntraSubclass => {
                isub == tsub && word_for_event(interf).as_str() != spec.target_word.as_str()
            }
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Records per eval regime manifest; divisible by 5 (one stratum per SNR).
    pub eval_size_per_regime: usize,
    pub num_interferences: usize,
    /// Event instances synthesized per subclass, split 7:2:1.
    pub events_per_subclass: usize,
}

impl DatasetConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            train_size: 768,
            val_size: 64,
            eval_size_per_regime: 100,
            num_interferences: 1,
            events_per_subclass: 20,
        }
    }

    /// Documented full-scale target sizes; not exercised by the test suite.
    pub fn paper(seed: u64) -> Self {
        Self {
            seed,
            train_size: 7563,
            val_size: 2160,
            eval_size_per_regime: 5535,
            num_interferences: 1,
            events_per_subclass: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_size_per_regime % SNR_GRID.len() != 0 {
            return Err(DataError::Infeasible(format!(
                "eval_size_per_regime {} not divisible by {}",
                self.eval_size_per_regime,
                SNR_GRID.len()
            )));
        }
        if !(1..=3).contains(&self.num_interferences) {
            return Err(DataError::Infeasible("num_interferences must be 1..=3".into()));
        }
        if self.events_per_subclass < 10 {
            return Err(DataError::Infeasible(
                "events_per_subclass must be >= 10 so every split holds >= 2 \
                 instances per subclass"
                    .into(),
            ));
        }
        if self.train_size == 0 || self.val_size == 0 || self.eval_size_per_regime == 0 {
            return Err(DataError::Infeasible("all split sizes must be > 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    // SplitMix64-style scramble so per-entity streams never collide.
    let mut z = root
        ^ (a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        ^ (b.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SubclassProfile {
    family: Family,
    f0_center: f64,
    dur_lo: f64,
    dur_hi: f64,
}

fn profile_for(subclass: &str, superclass: &str, index: usize) -> SubclassProfile {
    let family = family_of(superclass);
    let (f0_lo, f0_hi, dur_lo, dur_hi): (f64, f64, f64, f64) = match family {
        Family::Tonal => (600.0, 3000.0, 0.4, 1.8),
        Family::DecayingPartials => (300.0, 1600.0, 0.3, 0.9),
        Family::NoiseBurst => (300.0, 2600.0, 0.2, 0.6),
        Family::Ring => (400.0, 1400.0, 0.8, 1.6),
        Family::ChirpTrain => (300.0, 2400.0, 0.3, 0.9),
    };
    // Spread subclass centers geometrically across the family band so
    // subclasses are acoustically distinct but deterministic by name order.
    let h = derive_seed(0x5EED, subclass.len() as u64, index as u64) % 997;
    let u = h as f64 / 996.0;
    let f0_center = f0_lo * (f0_hi / f0_lo).powf(u);
    SubclassProfile {
        family,
        f0_center,
        dur_lo,
        dur_hi,
    }
}

/// One split's worth of event instances for one subclass.
#[derive(Debug, Clone)]
pub struct EventPool {
    /// Indexed by subclass position in the taxonomy.
    pub by_subclass: Vec<Vec<EventSpec>>,
}

/// Event instances for one split under the 7:2:1 partition. Within a
/// subclass, consecutive instances alternate repeat counts so every split
/// chunk contains at least two distinct canonical words (keeps the
/// intra-subclass regime feasible).
pub fn event_pool(cfg: &DatasetConfig, tax: &Taxonomy, split: Split) -> EventPool {
    let total = cfg.events_per_subclass;
    let n_train = total * 7 / 10;
    let n_val = total * 2 / 10;
    let range = match split {
        Split::Train => 0..n_train,
        Split::Val => n_train..n_train + n_val,
        Split::Eval => n_train + n_val..total,
    };
    let by_subclass = tax
        .subclasses
        .iter()
        .enumerate()
        .map(|(si, (sub, sup))| {
            let profile = profile_for(sub, sup, si);
            range
                .clone()
                .map(|j| {
                    let seed = derive_seed(cfg.seed, si as u64, j as u64);
                    let mut rng = ChaCha20Rng::seed_from_u64(seed);
                    let f0 = (profile.f0_center * 2f64.powf(rng.gen_range(-0.6..0.6)))
                        .clamp(80.0, 7600.0);
                    let duration = rng.gen_range(profile.dur_lo..profile.dur_hi);
                    let decay = rng.gen_range(4.0..12.0);
                    EventSpec {
                        subclass: sub.clone(),
                        family: profile.family,
                        f0,
                        duration,
                        decay,
                        repeats: 1 + (j % 2),
                        seed,
                    }
                })
                .collect()
        })
        .collect();
    EventPool { by_subclass }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordPaths {
    pub mixture: String,
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub regime: Regime,
    pub snr_db: i32,
    pub target_subclass: String,
    pub target_superclass: String,
    pub target_word: String,
    pub interference_subclasses: Vec<String>,
    pub paths: RecordPaths,
    pub measured_snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| DataError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

fn sample_offset(rng: &mut ChaCha20Rng, duration: f64) -> f64 {
    let max = CANVAS_SECONDS - duration;
    if max <= 0.0 {
        0.0
    } else {
        rng.gen_range(0.0..max)
    }
}

fn pick_interference(
    rng: &mut ChaCha20Rng,
    pool: &EventPool,
    tax: &Taxonomy,
    regime: Regime,
    target: &EventSpec,
    target_word: &str,
) -> Result<EventSpec> {
    let tsub_idx = tax.subclass_index(&target.subclass)?;
    let tsup = tax.superclass_of(&target.subclass)?.to_string();
    match regime {
        Regime::InterSuperclass | Regime::IntraSuperclass => {
            let candidates: Vec<usize> = (0..tax.subclasses.len())
                .filter(|&i| {
                    let (sub, sup) = &tax.subclasses[i];
                    match regime {
                        Regime::InterSuperclass => *sup != tsup,
                        Regime::IntraSuperclass => *sup == tsup && *sub != target.subclass,
                        Regime::IntraSubclass => unreachable!(),
                    }
                })
                .collect();
            if candidates.is_empty() {
                return Err(DataError::Infeasible(format!(
                    "no {regime} interference subclass for target {}",
                    target.subclass
                )));
            }
            let si = candidates[rng.gen_range(0..candidates.len())];
            let events = &pool.by_subclass[si];
            Ok(events[rng.gen_range(0..events.len())].clone())
        }
        Regime::IntraSubclass => {
            let candidates: Vec<&EventSpec> = pool.by_subclass[tsub_idx]
                .iter()
                .filter(|ev| {
                    ev.seed != target.seed && word_for_event(ev).as_str() != target_word
                })
                .collect();
            if candidates.is_empty() {
                return Err(DataError::Infeasible(format!(
                    "no same-subclass different-word interference for {}",
                    target.subclass
                )));
            }
            Ok(candidates[rng.gen_range(0..candidates.len())].clone())
        }
    }
}

fn make_mixture_spec(
    rng: &mut ChaCha20Rng,
    pool: &EventPool,
    tax: &Taxonomy,
    cfg: &DatasetConfig,
    split: Split,
    regime: Regime,
    snr_db: i32,
) -> Result<MixtureSpec> {
    let si = rng.gen_range(0..tax.subclasses.len());
    let events = &pool.by_subclass[si];
    let target = events[rng.gen_range(0..events.len())].clone();
    // Eval queries use the canonical word; train/val draw one of the three
    // lexical variants so the word encoder sees surface variation.
    let target_word = match split {
        Split::Eval => word_for_event(&target),
        Split::Train | Split::Val => {
            let variants = word_variants(&target);
            variants[rng.gen_range(0..3)].clone()
        }
    };
    let mut interferences = Vec::with_capacity(cfg.num_interferences);
    for _ in 0..cfg.num_interferences {
        interferences.push(pick_interference(
            rng,
            pool,
            tax,
            regime,
            &target,
            target_word.as_str(),
        )?);
    }
    let mut offsets = vec![sample_offset(rng, target.duration)];
    for ev in &interferences {
        offsets.push(sample_offset(rng, ev.duration));
    }
    Ok(MixtureSpec {
        target,
        target_word,
        interferences,
        snr_db,
        regime,
        split,
        offsets,
    })
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub evals: BTreeMap<Regime, PathBuf>,
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Eval => 3,
    }
}

fn plan_split(
    cfg: &DatasetConfig,
    tax: &Taxonomy,
    split: Split,
    regime: Option<Regime>,
    size: usize,
) -> Result<Vec<MixtureSpec>> {
    let pool = event_pool(cfg, tax, split);
    let regime_tag = regime.map_or(0, |r| 1 + Regime::ALL.iter().position(|&x| x == r).unwrap());
    let mut rng =
        ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, split_tag(split), regime_tag as u64));
    let per_snr = size / SNR_GRID.len();
    let mut specs = Vec::with_capacity(size);
    for i in 0..size {
        let r = regime.unwrap_or_else(|| Regime::ALL[rng.gen_range(0..3)]);
        let snr = match regime {
            // Eval manifests are stratified exactly size/5 per SNR level.
            Some(_) => SNR_GRID[i / per_snr],
            None => SNR_GRID[rng.gen_range(0..SNR_GRID.len())],
        };
        let spec = make_mixture_spec(&mut rng, &pool, tax, cfg, split, r, snr)?;
        debug_assert!(validate_regime(&spec, tax)?);
        specs.push(spec);
    }
    Ok(specs)
}

fn render_split(
    specs: &[MixtureSpec],
    name: &str,
    root: &Path,
) -> Result<Manifest> {
    let tax = Taxonomy::default_taxonomy();
    std::fs::create_dir_all(root.join("audio").join(name))?;
    let rendered: Vec<Result<ManifestRecord>> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = format!("{name}-{i:05}");
            let (mixture, target, measured) = mix_with_snr(spec)?;
            let mix_rel = format!("audio/{name}/{id}.mix.wav");
            let tgt_rel = format!("audio/{name}/{id}.tgt.wav");
            write_wav(&root.join(&mix_rel), &mixture)?;
            write_wav(&root.join(&tgt_rel), &target)?;
            Ok(ManifestRecord {
                id,
                split: spec.split,
                regime: spec.regime,
                snr_db: spec.snr_db,
                target_subclass: spec.target.subclass.clone(),
                target_superclass: tax.superclass_of(&spec.target.subclass)?.to_string(),
                target_word: spec.target_word.as_str().to_string(),
                interference_subclasses: spec
                    .interferences
                    .iter()
                    .map(|e| e.subclass.clone())
                    .collect(),
                paths: RecordPaths {
                    mixture: mix_rel,
                    target: tgt_rel,
                },
                measured_snr_db: measured,
                seed: spec.target.seed,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(rendered.len());
    for r in rendered {
        records.push(r?);
    }
    Ok(Manifest { records })
}

/// Builds the full dataset tree under `root`: rendered audio plus train/val
/// manifests and one eval manifest per regime. Deterministic per config.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetPaths> {
    cfg.validate()?;
    let tax = Taxonomy::default_taxonomy();
    std::fs::create_dir_all(root)?;

    let train_specs = plan_split(cfg, &tax, Split::Train, None, cfg.train_size)?;
    let val_specs = plan_split(cfg, &tax, Split::Val, None, cfg.val_size)?;

    let train = render_split(&train_specs, "train", root)?;
    let val = render_split(&val_specs, "val", root)?;
    let train_path = root.join("train.jsonl");
    let val_path = root.join("val.jsonl");
    train.write(&train_path)?;
    val.write(&val_path)?;

    let mut evals = BTreeMap::new();
    for regime in Regime::ALL {
        let name = format!("eval-{regime}");
        let specs = plan_split(cfg, &tax, Split::Eval, Some(regime), cfg.eval_size_per_regime)?;
        let manifest = render_split(&specs, &name, root)?;
        let path = root.join(format!("{name}.jsonl"));
        manifest.write(&path)?;
        evals.insert(regime, path);
    }
    Ok(DatasetPaths {
        root: root.to_path_buf(),
        train: train_path,
        val: val_path,
        evals,
    })
}

/// Event seeds used by a manifest; split-hygiene checks compare these sets.
pub fn manifest_event_seeds(m: &Manifest) -> BTreeSet<u64> {
    m.records.iter().map(|r| r.seed).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{amplitude, stft, StftConfig};
    use crate::phoneme::{g2p, PhonemeInventory};

    fn spec(family: Family, f0: f64, duration: f64, repeats: usize, seed: u64) -> EventSpec {
        EventSpec {
            subclass: "test".into(),
            family,
            f0,
            duration,
            decay: 6.0,
            repeats,
            seed,
        }
    }

    #[test]
    fn taxonomy_shape() {
        let tax = Taxonomy::default_taxonomy();
        assert_eq!(tax.superclasses.len(), 16);
        assert_eq!(tax.subclasses.len(), 44);
        for (sub, sup) in &tax.subclasses {
            assert_eq!(tax.superclass_of(sub).unwrap(), sup);
        }
        // Every superclass keeps >= 2 subclasses (intra-superclass feasibility).
        for sup in &tax.superclasses {
            let n = tax.subclasses.iter().filter(|(_, s)| s == sup).count();
            assert!(n >= 2, "superclass {sup} has {n} subclasses");
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_sized() {
        let s = spec(Family::NoiseBurst, 800.0, 0.5, 1, 42);
        let a = synthesize_event(&s).unwrap();
        let b = synthesize_event(&s).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 8000);
        let peak = a.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tonal_event_peaks_at_f0() {
        let s = spec(Family::Tonal, 1000.0, 1.0, 1, 7);
        let w = synthesize_event(&s).unwrap();
        let spec_mag = amplitude(&stft(&w, &StftConfig::default()).unwrap());
        // Sum magnitude over time, find the dominant bin.
        let profile = spec_mag.magnitudes.sum_axis(ndarray::Axis(1));
        let peak_bin = profile
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // 1 kHz at 16 kHz / 2048-point window is bin 128.
        assert!((peak_bin as i64 - 128).unsigned_abs() <= 1, "peak bin {peak_bin}");
    }

    #[test]
    fn event_validation_rejects_out_of_range() {
        assert!(synthesize_event(&spec(Family::Tonal, 50.0, 1.0, 1, 0)).is_err());
        assert!(synthesize_event(&spec(Family::Tonal, 1000.0, 0.0, 1, 0)).is_err());
        assert!(synthesize_event(&spec(Family::Tonal, 1000.0, 6.0, 1, 0)).is_err());
    }

    #[test]
    fn word_rules() {
        // Repeated strike words by f0 bucket.
        for (f0, expect) in [(2500.0, "kinkin"), (900.0, "kankan"), (300.0, "konkon")] {
            let s = spec(Family::DecayingPartials, f0, 0.5, 2, 1);
            assert_eq!(word_for_event(&s).as_str(), expect);
        }
        // Long tones carry the long-vowel marker after g2p.
        let long_tone = spec(Family::Tonal, 2000.0, 1.5, 1, 1);
        let w = word_for_event(&long_tone);
        assert_eq!(w.as_str(), "pii");
        let inv = PhonemeInventory::default_inventory();
        let phones = g2p(&w, &inv).unwrap();
        assert!(phones.phonemes.contains(&":".to_string()));
        // Short tone has no marker.
        let short_tone = spec(Family::Tonal, 2000.0, 0.5, 1, 1);
        assert_eq!(word_for_event(&short_tone).as_str(), "pi");
        // Determinism.
        assert_eq!(
            word_for_event(&long_tone).as_str(),
            word_for_event(&long_tone).as_str()
        );
    }

    #[test]
    fn word_variants_are_three_distinct_parseable_words() {
        let inv = PhonemeInventory::default_inventory();
        for family in [
            Family::Tonal,
            Family::DecayingPartials,
            Family::NoiseBurst,
            Family::Ring,
            Family::ChirpTrain,
        ] {
            for repeats in [1, 2] {
                let s = spec(family, 900.0, 1.2, repeats, 3);
                let vs = word_variants(&s);
                assert_ne!(vs[0].as_str(), vs[1].as_str());
                assert_ne!(vs[0].as_str(), vs[2].as_str());
                assert_ne!(vs[1].as_str(), vs[2].as_str());
                assert_eq!(vs[0].as_str(), word_for_event(&s).as_str());
                for v in &vs {
                    g2p(v, &inv).unwrap();
                }
            }
        }
    }

    #[test]
    fn scale_to_snr_closed_forms() {
        let t = Waveform::new(vec![0.5, -0.5, 0.5, -0.5], SAMPLE_RATE).unwrap();
        let i = Waveform::new(vec![0.5, 0.5, -0.5, -0.5], SAMPLE_RATE).unwrap();
        assert!((scale_to_snr(&t, &i, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((scale_to_snr(&t, &i, 10.0).unwrap() - 10f64.powf(-0.5)).abs() < 1e-12);
        let t4 = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], SAMPLE_RATE).unwrap();
        assert!((scale_to_snr(&t4, &i, 0.0).unwrap() - 2.0).abs() < 1e-12);
        let silent = Waveform::new(vec![0.0; 4], SAMPLE_RATE).unwrap();
        assert!(scale_to_snr(&t, &silent, 0.0).is_err());
        assert!(scale_to_snr(&silent, &i, 0.0).is_err());
    }

    fn random_mixture_spec(rng: &mut ChaCha20Rng, snr_db: i32) -> MixtureSpec {
        let tax = Taxonomy::default_taxonomy();
        let cfg = DatasetConfig::toy(rng.gen());
        let pool = event_pool(&cfg, &tax, Split::Train);
        let si = rng.gen_range(0..tax.subclasses.len());
        let target = pool.by_subclass[si][rng.gen_range(0..pool.by_subclass[si].len())].clone();
        let word = word_for_event(&target);
        let interf =
            pick_interference(rng, &pool, &tax, Regime::InterSuperclass, &target, word.as_str())
                .unwrap();
        let offsets = vec![
            sample_offset(rng, target.duration),
            sample_offset(rng, interf.duration),
        ];
        MixtureSpec {
            target,
            target_word: word,
            interferences: vec![interf],
            snr_db,
            regime: Regime::InterSuperclass,
            split: Split::Train,
            offsets,
        }
    }

    #[test]
    fn mixing_hits_requested_snr_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..10 {
            let snr = SNR_GRID[rng.gen_range(0..SNR_GRID.len())];
            let spec = random_mixture_spec(&mut rng, snr);
            let (mixture, target, measured) = mix_with_snr(&spec).unwrap();
            assert!(
                (measured - snr as f64).abs() < 1e-9,
                "snr {snr} measured {measured}"
            );
            // The stored f32 pair agrees up to storage quantization.
            let residual = measure_snr(&mixture, &target).unwrap();
            assert!((residual - snr as f64).abs() < 1e-3, "residual snr {residual}");
        }
    }

    #[test]
    fn zero_interference_mixture_equals_target() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut spec = random_mixture_spec(&mut rng, 0);
        spec.interferences.clear();
        spec.offsets.truncate(1);
        let (mixture, target) = mix(&spec).unwrap();
        assert_eq!(mixture.samples, target.samples);
    }

    #[test]
    fn validate_regime_examples() {
        let tax = Taxonomy::default_taxonomy();
        let mk = |sub: &str, seed| EventSpec {
            subclass: sub.into(),
            family: family_of(tax.superclass_of(sub).unwrap()),
            f0: 1000.0,
            duration: 0.5,
            decay: 6.0,
            repeats: 1,
            seed,
        };
        let base = |target: EventSpec, interf: EventSpec, regime| {
            let word = word_for_event(&target);
            MixtureSpec {
                offsets: vec![0.0, 0.0],
                target,
                target_word: word,
                interferences: vec![interf],
                snr_db: 0,
                regime,
                split: Split::Eval,
            }
        };
        let s = base(mk("whistle1", 1), mk("metal05", 2), Regime::InterSuperclass);
        assert!(validate_regime(&s, &tax).unwrap());
        let s = base(mk("whistle1", 1), mk("whistle2", 2), Regime::InterSuperclass);
        assert!(!validate_regime(&s, &tax).unwrap());
        // Same subclass, different word (short vs long tone).
        let mut target = mk("whistle1", 1);
        target.duration = 1.5;
        let interf = mk("whistle1", 2);
        let s = base(target, interf, Regime::IntraSubclass);
        assert!(validate_regime(&s, &tax).unwrap());
        // Same subclass, same word: rejected.
        let s = base(mk("whistle1", 1), mk("whistle1", 2), Regime::IntraSubclass);
        assert!(!validate_regime(&s, &tax).unwrap());
        // Unknown subclass propagates a taxonomy error.
        let s = base(mk("whistle1", 1), {
            let mut e = mk("whistle2", 2);
            e.subclass = "nope".into();
            e
        }, Regime::InterSuperclass);
        assert!(validate_regime(&s, &tax).is_err());
    }

    #[test]
    fn plan_split_respects_constraints() {
        let tax = Taxonomy::default_taxonomy();
        let mut cfg = DatasetConfig::toy(11);
        cfg.train_size = 30;
        cfg.eval_size_per_regime = 15;
        let train = plan_split(&cfg, &tax, Split::Train, None, cfg.train_size).unwrap();
        assert_eq!(train.len(), 30);
        for s in &train {
            assert!(validate_regime(s, &tax).unwrap());
        }
        for regime in Regime::ALL {
            let ev = plan_split(&cfg, &tax, Split::Eval, Some(regime), 15).unwrap();
            for snr in SNR_GRID {
                assert_eq!(ev.iter().filter(|s| s.snr_db == snr).count(), 3);
            }
            for s in &ev {
                assert!(validate_regime(s, &tax).unwrap());
                assert_eq!(s.regime, regime);
            }
        }
    }

    #[test]
    fn event_splits_are_disjoint() {
        let tax = Taxonomy::default_taxonomy();
        let cfg = DatasetConfig::toy(3);
        let seeds = |split| -> BTreeSet<u64> {
            event_pool(&cfg, &tax, split)
                .by_subclass
                .iter()
                .flatten()
                .map(|e| e.seed)
                .collect()
        };
        let train = seeds(Split::Train);
        let val = seeds(Split::Val);
        let eval = seeds(Split::Eval);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&eval));
        assert!(val.is_disjoint(&eval));
        // 7:2:1 partition of 20 instances per subclass.
        assert_eq!(train.len(), 44 * 14);
        assert_eq!(val.len(), 44 * 4);
        assert_eq!(eval.len(), 44 * 2);
    }

    #[test]
    fn build_dataset_toy_slice_is_deterministic() {
        let mut cfg = DatasetConfig::toy(9);
        cfg.train_size = 6;
        cfg.val_size = 5;
        cfg.eval_size_per_regime = 5;
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let pa = build_dataset(&cfg, &a).unwrap();
        let pb = build_dataset(&cfg, &b).unwrap();
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&pa.train), read(&pb.train));
        assert_eq!(read(&pa.val), read(&pb.val));
        for regime in Regime::ALL {
            assert_eq!(read(&pa.evals[&regime]), read(&pb.evals[&regime]));
        }

        let train = Manifest::read(&pa.train).unwrap();
        assert_eq!(train.records.len(), 6);
        for rec in &train.records {
            assert!((rec.measured_snr_db - rec.snr_db as f64).abs() < 1e-9);
            let wav = crate::dsp::read_wav(&pa.root.join(&rec.paths.mixture)).unwrap();
            assert_eq!(wav.samples.len(), 80_000);
        }
        // Eval stratification: one record per SNR level at size 5.
        let ev = Manifest::read(&pa.evals[&Regime::IntraSubclass]).unwrap();
        let snrs: Vec<i32> = ev.records.iter().map(|r| r.snr_db).collect();
        assert_eq!(snrs, SNR_GRID.to_vec());
    }
}

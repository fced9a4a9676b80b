//! Deterministic simulator for the barometer inside a sealed phone.
//!
//! The internal pressure offset from ambient is integrated at the internal
//! rate with an exact single-pole vent update. External forcing (screen flex,
//! speaker output) enters as increments of a forcing level: every change of the
//! level shifts the internal pressure by the same amount, after which the vent
//! bleeds the offset back toward ambient. The integrated signal is block-averaged
//! down to the output rate, then Gaussian sensor noise and quantization are
//! applied.
//!
//! Randomness comes from ChaCha8 streams derived from the config seed: stream 0
//! feeds sensor noise, stream 1 feeds event draws (contact durations), stream 2
//! feeds corpus layout (sub-sample event jitter). Keeping them apart means a
//! zero-amplitude forcing reproduces the idle trace exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Triangular};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::{segment, PrepError, SegmentationProtocol};
use crate::trace::{Dataset, DatasetError, Label, PressureTrace, TraceError};

/// Recorded in reports so runs can be reproduced by other implementations.
pub const RNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.9) seed_from_u64; stream 0 = sensor noise, 1 = events, 2 = layout; record seed = base ^ index";

const NOISE_STREAM: u64 = 0;
const EVENT_STREAM: u64 = 1;
const LAYOUT_STREAM: u64 = 2;

/// Flex gains for keys 1..=9: corners 0.80, edges 0.95, center 1.10.
pub const DEFAULT_KEY_FLEX_GAIN: [f64; 9] = [0.80, 0.95, 0.80, 0.95, 1.10, 0.95, 0.80, 0.95, 0.80];

/// Per-key shift of the release undershoot ratio, evenly spread over keys 1..=9.
pub const DEFAULT_KEY_UNDERSHOOT_OFFSET: [f64; 9] = [
    -0.45, -0.3375, -0.225, -0.1125, 0.0, 0.1125, 0.225, 0.3375, 0.45,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("invalid tap profile: {0}")]
    Profile(String),
    #[error("invalid speaker source: {0}")]
    Source(String),
    #[error("duration {duration_s} s is shorter than one output sample")]
    TooShort { duration_s: f64 },
    #[error("tap window [{start_s}, {end_s}] s does not fit inside a {duration_s} s trace")]
    TapOutOfBounds {
        start_s: f64,
        end_s: f64,
        duration_s: f64,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("class counts must all be positive")]
    ZeroCount,
    #[error("expected {expected} class counts, got {found}")]
    CountArity { expected: usize, found: usize },
    #[error("window length {window_len} does not fit the task")]
    WindowLen { window_len: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prep(#[from] PrepError),
}

/// Full physical-channel parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub ambient_hpa: f64,
    /// Vent equalization time constant of the sealed device.
    pub tau_s: f64,
    pub internal_rate_hz: u32,
    pub output_rate_hz: u32,
    pub noise_std_hpa: f64,
    pub quant_step_hpa: f64,
    pub ip_sealed: bool,
    /// Time constant used instead of `tau_s` when `ip_sealed` is false.
    pub tau_unsealed_s: f64,
    pub seed: u64,
    pub key_flex_gain: [f64; 9],
    pub key_undershoot_offset: [f64; 9],
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            ambient_hpa: 1013.25,
            tau_s: 0.5,
            internal_rate_hz: 1000,
            output_rate_hz: 25,
            noise_std_hpa: 0.01,
            quant_step_hpa: 1.0 / 4096.0,
            ip_sealed: true,
            tau_unsealed_s: 0.02,
            seed: 0,
            key_flex_gain: DEFAULT_KEY_FLEX_GAIN,
            key_undershoot_offset: DEFAULT_KEY_UNDERSHOOT_OFFSET,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !self.ambient_hpa.is_finite() {
            return bad("ambient_hpa must be finite");
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return bad("tau_s must be positive");
        }
        if !(self.tau_unsealed_s > 0.0) {
            return bad("tau_unsealed_s must be positive");
        }
        if self.tau_unsealed_s >= self.tau_s {
            return bad("tau_unsealed_s must be smaller than tau_s");
        }
        if self.output_rate_hz == 0 {
            return bad("output_rate_hz must be positive");
        }
        if self.internal_rate_hz < 2 * self.output_rate_hz {
            return bad("internal_rate_hz must be at least twice output_rate_hz");
        }
        if !self.internal_rate_hz.is_multiple_of(self.output_rate_hz) {
            return bad("internal_rate_hz must be a multiple of output_rate_hz");
        }
        if !(self.noise_std_hpa >= 0.0 && self.noise_std_hpa.is_finite()) {
            return bad("noise_std_hpa must be >= 0");
        }
        if !(self.quant_step_hpa >= 0.0 && self.quant_step_hpa.is_finite()) {
            return bad("quant_step_hpa must be >= 0");
        }
        if self
            .key_flex_gain
            .iter()
            .chain(&self.key_undershoot_offset)
            .any(|v| !v.is_finite())
        {
            return bad("per-key tables must be finite");
        }
        Ok(())
    }

    /// Vent time constant in effect for this device.
    pub fn effective_tau_s(&self) -> f64 {
        if self.ip_sealed {
            self.tau_s
        } else {
            self.tau_unsealed_s
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn samples_per_output(&self) -> usize {
        (self.internal_rate_hz / self.output_rate_hz) as usize
    }
}

/// Screen-tap forcing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TapProfile {
    /// Numpad key 1..=9, or `None` for a tap at an arbitrary position (gain 1).
    pub key: Option<u8>,
    pub delta_p_hpa: f64,
    pub recovery_undershoot_ratio: f64,
    pub contact_ms_min: f64,
    pub contact_ms_max: f64,
    /// Mode of the triangular contact-duration distribution.
    pub contact_ms_mean: f64,
}

impl Default for TapProfile {
    fn default() -> Self {
        Self {
            key: None,
            delta_p_hpa: 0.05,
            recovery_undershoot_ratio: 0.5,
            contact_ms_min: 24.0,
            contact_ms_max: 183.0,
            contact_ms_mean: 85.0,
        }
    }
}

impl TapProfile {
    pub fn for_key(key: u8) -> Self {
        Self {
            key: Some(key),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Profile(m.to_string()));
        if let Some(k) = self.key {
            if !(1..=9).contains(&k) {
                return bad("key must be in 1..=9");
            }
        }
        // Zero is accepted so a null forcing can be expressed.
        if !(self.delta_p_hpa >= 0.0 && self.delta_p_hpa.is_finite()) {
            return bad("delta_p_hpa must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.recovery_undershoot_ratio) {
            return bad("recovery_undershoot_ratio must be in [0, 1]");
        }
        if !(self.contact_ms_min > 0.0
            && self.contact_ms_min <= self.contact_ms_mean
            && self.contact_ms_mean <= self.contact_ms_max
            && self.contact_ms_max.is_finite())
        {
            return bad("need 0 < contact_ms_min <= contact_ms_mean <= contact_ms_max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Tone {
    Sinusoid { freq_hz: f64 },
    /// Components as `(freq_hz, relative_amplitude)`.
    MultiTone { components: Vec<(f64, f64)> },
    None,
}

impl Tone {
    /// Stand-in for a phone ringtone; one component sits above the 12.5 Hz
    /// output Nyquist frequency.
    pub fn ringtone() -> Self {
        Tone::MultiTone {
            components: vec![(6.0, 1.0), (9.0, 0.7), (19.0, 0.5)],
        }
    }

    fn components(&self) -> Vec<(f64, f64)> {
        match self {
            Tone::Sinusoid { freq_hz } => vec![(*freq_hz, 1.0)],
            Tone::MultiTone { components } => components.clone(),
            Tone::None => Vec::new(),
        }
    }
}

impl FromStr for Tone {
    type Err = SimError;

    /// `none`, `ringtone`, `sine:<hz>` or `multi:<hz>@<amp>;<hz>@<amp>...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SimError::Source(format!("cannot parse tone {s:?}"));
        match s.trim() {
            "none" => return Ok(Tone::None),
            "ringtone" => return Ok(Tone::ringtone()),
            _ => {}
        }
        if let Some(f) = s.strip_prefix("sine:") {
            let freq_hz = f.trim().parse().map_err(|_| err())?;
            return Ok(Tone::Sinusoid { freq_hz });
        }
        if let Some(list) = s.strip_prefix("multi:") {
            let components = list
                .split(';')
                .map(|c| {
                    let (f, a) = c.split_once('@').ok_or_else(err)?;
                    Ok((
                        f.trim().parse().map_err(|_| err())?,
                        a.trim().parse().map_err(|_| err())?,
                    ))
                })
                .collect::<Result<Vec<_>, SimError>>()?;
            return Ok(Tone::MultiTone { components });
        }
        Err(err())
    }
}

/// Acoustic source coupled into the internal pressure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerSource {
    pub kind: Tone,
    pub amplitude_hpa: f64,
    pub external: bool,
    pub external_attenuation: f64,
}

impl Default for SpeakerSource {
    fn default() -> Self {
        Self {
            kind: Tone::Sinusoid { freq_hz: 12.0 },
            amplitude_hpa: 0.007,
            external: false,
            external_attenuation: 0.5,
        }
    }
}

impl SpeakerSource {
    pub fn external() -> Self {
        Self {
            external: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Source(m.to_string()));
        if !(self.amplitude_hpa >= 0.0 && self.amplitude_hpa.is_finite()) {
            return bad("amplitude_hpa must be >= 0");
        }
        if !(self.external_attenuation > 0.0 && self.external_attenuation <= 1.0) {
            return bad("external_attenuation must be in (0, 1]");
        }
        for (f, a) in self.kind.components() {
            if !(f > 0.0 && f.is_finite()) {
                return bad("tone frequencies must be positive");
            }
            if !a.is_finite() {
                return bad("relative amplitudes must be finite");
            }
        }
        Ok(())
    }

    fn effective_amplitude(&self) -> f64 {
        if self.external {
            self.amplitude_hpa * self.external_attenuation
        } else {
            self.amplitude_hpa
        }
    }
}

/// Exact vent relaxation over `dt`: `p_ext + (p_int - p_ext) * exp(-dt / tau)`.
///
/// Panics if `dt` or `tau` is not positive or any input is non-finite.
pub fn step_pressure(p_int: f64, p_ext: f64, dt: f64, tau: f64) -> f64 {
    assert!(
        p_int.is_finite() && p_ext.is_finite() && dt.is_finite() && tau.is_finite(),
        "step_pressure: non-finite input"
    );
    assert!(dt > 0.0 && tau > 0.0, "step_pressure: dt and tau must be > 0");
    p_ext + (p_int - p_ext) * (-dt / tau).exp()
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn output_len(config: &SimulatorConfig, duration_s: f64) -> Result<usize, SimError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(SimError::TooShort { duration_s });
    }
    let n = (duration_s * config.output_rate_hz as f64 + 1e-9).floor() as usize;
    if n == 0 {
        return Err(SimError::TooShort { duration_s });
    }
    Ok(n)
}

/// Runs the channel for `n_out` output samples. `forcing` maps time (s) to the
/// forcing level; the internal pressure offset receives every change of that
/// level as an instantaneous increment.
fn run_channel<F>(config: &SimulatorConfig, n_out: usize, forcing: F) -> PressureTrace
where
    F: Fn(f64) -> f64,
{
    let block = config.samples_per_output();
    let dt = 1.0 / config.internal_rate_hz as f64;
    let decay = (-dt / config.effective_tau_s()).exp();

    let mut offset = 0.0;
    let mut level = 0.0;
    let mut out = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let mut acc = 0.0;
        for b in 0..block {
            let k = o * block + b;
            let next = forcing(k as f64 * dt);
            offset = offset * decay + (next - level);
            level = next;
            acc += offset;
        }
        out.push(config.ambient_hpa + acc / block as f64);
    }

    if config.noise_std_hpa > 0.0 {
        let normal = Normal::new(0.0, config.noise_std_hpa).expect("validated std");
        let mut rng = stream_rng(config.seed, NOISE_STREAM);
        for v in &mut out {
            *v += normal.sample(&mut rng);
        }
    }
    if config.quant_step_hpa > 0.0 {
        let q = config.quant_step_hpa;
        for v in &mut out {
            *v = (*v / q).round() * q;
        }
    }
    PressureTrace::new(config.output_rate_hz as f64, 0, out).expect("finite by construction")
}

/// A trace with no forcing: ambient pressure plus sensor noise and quantization.
pub fn simulate_idle(config: &SimulatorConfig, duration_s: f64) -> Result<PressureTrace, SimError> {
    config.validate()?;
    let n = output_len(config, duration_s)?;
    Ok(run_channel(config, n, |_| 0.0))
}

/// Contact duration (ms) that [`simulate_tap`] draws for this seed and profile.
pub fn contact_duration_ms(seed: u64, profile: &TapProfile) -> f64 {
    let mut rng = stream_rng(seed, EVENT_STREAM);
    draw_contact_ms(&mut rng, profile)
}

fn draw_contact_ms(rng: &mut ChaCha8Rng, profile: &TapProfile) -> f64 {
    if profile.contact_ms_max <= profile.contact_ms_min {
        return profile.contact_ms_min;
    }
    Triangular::new(
        profile.contact_ms_min,
        profile.contact_ms_max,
        profile.contact_ms_mean,
    )
    .expect("validated bounds")
    .sample(rng)
}

/// Flex gain and effective undershoot ratio for a profile under `config`.
fn tap_shape(config: &SimulatorConfig, profile: &TapProfile) -> (f64, f64) {
    match profile.key {
        Some(k) => {
            let i = (k - 1) as usize;
            (
                config.key_flex_gain[i],
                profile.recovery_undershoot_ratio + config.key_undershoot_offset[i],
            )
        }
        None => (1.0, profile.recovery_undershoot_ratio),
    }
}

/// A single finger tap starting at `tap_time_s`.
///
/// At contact the internal pressure jumps by `gain * delta_p` (screen flex
/// compresses the sealed volume) and bleeds toward ambient while the finger
/// stays down. At release the flex is undone and the rebounding screen adds a
/// further `undershoot_ratio * delta_p` vacuum, so the pressure drops below
/// ambient and then equalizes.
pub fn simulate_tap(
    config: &SimulatorConfig,
    profile: &TapProfile,
    tap_time_s: f64,
    duration_s: f64,
) -> Result<PressureTrace, SimError> {
    config.validate()?;
    profile.validate()?;
    let n = output_len(config, duration_s)?;
    let contact_s = contact_duration_ms(config.seed, profile) / 1000.0;
    let release_s = tap_time_s + contact_s;
    if !(tap_time_s > 0.0 && release_s < duration_s) {
        return Err(SimError::TapOutOfBounds {
            start_s: tap_time_s,
            end_s: release_s,
            duration_s,
        });
    }
    let (gain, ratio) = tap_shape(config, profile);
    let flex = gain * profile.delta_p_hpa;
    let after = -ratio * profile.delta_p_hpa;
    Ok(run_channel(config, n, |t| {
        if t < tap_time_s {
            0.0
        } else if t < release_s {
            flex
        } else {
            after
        }
    }))
}

/// Speaker playing `source` for the whole trace.
pub fn simulate_speaker(
    config: &SimulatorConfig,
    source: &SpeakerSource,
    duration_s: f64,
) -> Result<PressureTrace, SimError> {
    simulate_speaker_session(config, source, &[(0.0, duration_s)], duration_s)
}

/// Speaker playing `source` during each `[start_s, end_s)` interval; the tone
/// restarts at phase zero at every interval start.
pub fn simulate_speaker_session(
    config: &SimulatorConfig,
    source: &SpeakerSource,
    active: &[(f64, f64)],
    duration_s: f64,
) -> Result<PressureTrace, SimError> {
    config.validate()?;
    source.validate()?;
    let n = output_len(config, duration_s)?;
    let amp = source.effective_amplitude();
    let comps: Vec<(f64, f64)> = source
        .kind
        .components()
        .into_iter()
        .map(|(f, a)| (2.0 * PI * f, amp * a))
        .collect();
    if amp == 0.0 || comps.is_empty() {
        return Ok(run_channel(config, n, |_| 0.0));
    }
    let mut intervals = active.to_vec();
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(run_channel(config, n, |t| {
        let idx = intervals.partition_point(|(s, _)| *s <= t);
        let start = idx
            .checked_sub(1)
            .map(|i| intervals[i])
            .filter(|(_, e)| t < *e)
            .map(|(s, _)| s);
        match start {
            Some(s) => {
                let tl = t - s;
                comps.iter().map(|(w, a)| a * (w * tl).sin()).sum()
            }
            None => 0.0,
        }
    }))
}

/// Corpus kinds the generator knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "b-sad-internal")]
    BSadInternal,
    #[serde(rename = "b-sad-external")]
    BSadExternal,
    #[serde(rename = "tap-detect")]
    TapDetect,
    #[serde(rename = "key-position")]
    KeyPosition,
}

impl Task {
    pub fn classes(self) -> Vec<Label> {
        match self {
            Task::BSadInternal | Task::BSadExternal => {
                vec![Label::SpeakerActive, Label::SpeakerInactive]
            }
            Task::TapDetect => vec![Label::Tap, Label::NoTap],
            Task::KeyPosition => (1..=9).map(Label::Key).collect(),
        }
    }

    /// Default per-class record counts.
    pub fn default_per_class(self) -> usize {
        match self {
            Task::BSadInternal => 225,
            Task::BSadExternal => 135,
            Task::TapDetect => 50,
            Task::KeyPosition => 124,
        }
    }

    pub fn default_window_len(self) -> usize {
        match self {
            Task::BSadInternal | Task::BSadExternal => 250,
            Task::TapDetect | Task::KeyPosition => 50,
        }
    }

    pub fn is_speaker(self) -> bool {
        matches!(self, Task::BSadInternal | Task::BSadExternal)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::BSadInternal => "b-sad-internal",
            Task::BSadExternal => "b-sad-external",
            Task::TapDetect => "tap-detect",
            Task::KeyPosition => "key-position",
        })
    }
}

impl FromStr for Task {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "b-sad-internal" => Ok(Task::BSadInternal),
            "b-sad-external" => Ok(Task::BSadExternal),
            "tap-detect" => Ok(Task::TapDetect),
            "key-position" => Ok(Task::KeyPosition),
            other => Err(SimError::UnknownTask(other.to_string())),
        }
    }
}

/// What corpus to build: task, per-class counts (class-set order), window
/// length, and the forcing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub task: Task,
    pub counts: Vec<usize>,
    pub window_len: usize,
    pub tap: TapProfile,
    pub speaker: SpeakerSource,
    /// Gap between speaker blocks during which the vent equalizes.
    pub rest_s: f64,
}

impl GenerationSpec {
    pub fn new(task: Task) -> Self {
        let speaker = match task {
            Task::BSadExternal => SpeakerSource::external(),
            _ => SpeakerSource::default(),
        };
        Self {
            task,
            counts: vec![task.default_per_class(); task.classes().len()],
            window_len: task.default_window_len(),
            tap: TapProfile::default(),
            speaker,
            rest_s: 2.0,
        }
    }

    pub fn per_class(mut self, n: usize) -> Self {
        self.counts = vec![n; self.task.classes().len()];
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.task.classes().len();
        if self.counts.len() != k {
            return Err(SimError::CountArity {
                expected: k,
                found: self.counts.len(),
            });
        }
        if self.counts.contains(&0) {
            return Err(SimError::ZeroCount);
        }
        if self.window_len < 2 {
            return Err(SimError::WindowLen {
                window_len: self.window_len,
            });
        }
        if !(self.rest_s >= 0.0 && self.rest_s.is_finite()) {
            return Err(SimError::Config("rest_s must be >= 0".into()));
        }
        self.tap.validate()?;
        self.speaker.validate()
    }
}

/// A generated corpus together with the raw traces it was cut from.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dataset: Dataset,
    pub traces: Vec<(String, PressureTrace)>,
}

/// Builds a labeled dataset for `spec.task`. Deterministic in `config.seed`.
pub fn synth_dataset(config: &SimulatorConfig, spec: &GenerationSpec) -> Result<Dataset, SimError> {
    Ok(synth_corpus(config, spec)?.dataset)
}

pub fn synth_corpus(config: &SimulatorConfig, spec: &GenerationSpec) -> Result<Corpus, SimError> {
    config.validate()?;
    spec.validate()?;
    if spec.task.is_speaker() {
        speaker_corpus(config, spec)
    } else {
        tap_corpus(config, spec)
    }
}

fn base_meta(task: Task) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("task".to_string(), task.to_string());
    m.insert("source".to_string(), "sim".to_string());
    m
}

/// Alternating speaker-on / speaker-off blocks separated by rest gaps, recorded
/// as one continuous session and cut into one record per block.
fn speaker_corpus(config: &SimulatorConfig, spec: &GenerationSpec) -> Result<Corpus, SimError> {
    let rate = config.output_rate_hz as f64;
    let block_s = spec.window_len as f64 / rate;
    let period = block_s + spec.rest_s;
    let classes = spec.task.classes();

    let (mut left_on, mut left_off) = (spec.counts[0], spec.counts[1]);
    let mut schedule: Vec<(f64, Label)> = Vec::with_capacity(left_on + left_off);
    let mut next_on = true;
    while left_on + left_off > 0 {
        let on = if left_on == 0 {
            false
        } else if left_off == 0 {
            true
        } else {
            next_on
        };
        let t = schedule.len() as f64 * period;
        if on {
            schedule.push((t, classes[0]));
            left_on -= 1;
        } else {
            schedule.push((t, classes[1]));
            left_off -= 1;
        }
        next_on = !on;
    }
    let active: Vec<(f64, f64)> = schedule
        .iter()
        .filter(|(_, l)| *l == Label::SpeakerActive)
        .map(|(t, _)| (*t, t + block_s))
        .collect();
    let duration = schedule.len() as f64 * period;
    let trace = simulate_speaker_session(config, &spec.speaker, &active, duration)?;

    let protocol = SegmentationProtocol::alternating_blocks(block_s, spec.rest_s);
    let seg = segment(&trace, &protocol, &schedule)?;
    debug_assert_eq!(seg.dropped, 0);
    let meta = base_meta(spec.task);
    let records = seg
        .records
        .into_iter()
        .map(|mut r| {
            r.meta.extend(meta.clone());
            r.meta.insert("seed".into(), config.seed.to_string());
            r.meta.insert("trace".into(), "session".into());
            r
        })
        .collect();
    let dataset = Dataset::new(classes, spec.window_len, records)?;
    Ok(Corpus {
        dataset,
        traces: vec![("session".to_string(), trace)],
    })
}

/// One short trace per record; each record is the event window around a
/// tap (or around an equivalent instant of an idle trace).
fn tap_corpus(config: &SimulatorConfig, spec: &GenerationSpec) -> Result<Corpus, SimError> {
    let rate = config.output_rate_hz as f64;
    let window_s = spec.window_len as f64 / rate;
    let pre_event_s = window_s / 2.0;
    let margin_s = 0.5;
    let duration = window_s + 2.0 * margin_s;
    let protocol = SegmentationProtocol::event_window(pre_event_s, window_s);
    let classes = spec.task.classes();

    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut index: u64 = 0;
    for (class, &count) in classes.iter().zip(&spec.counts) {
        for _ in 0..count {
            let seed = config.seed ^ index;
            let cfg = config.with_seed(seed);
            let jitter: f64 = stream_rng(seed, LAYOUT_STREAM).random::<f64>() / rate;
            let event_s = margin_s + pre_event_s + jitter;
            let trace = match class {
                Label::NoTap => simulate_idle(&cfg, duration)?,
                Label::Key(k) => simulate_tap(
                    &cfg,
                    &TapProfile {
                        key: Some(*k),
                        ..spec.tap.clone()
                    },
                    event_s,
                    duration,
                )?,
                _ => simulate_tap(&cfg, &spec.tap, event_s, duration)?,
            };
            let mut seg = segment(&trace, &protocol, &[(event_s, *class)])?;
            let mut rec = seg.records.pop().expect("margin keeps the window in bounds");
            rec.meta.extend(base_meta(spec.task));
            rec.meta.insert("seed".into(), seed.to_string());
            rec.meta.insert("trace".into(), format!("record-{index:05}"));
            records.push(rec);
            traces.push((format!("record-{index:05}"), trace));
            index += 1;
        }
    }
    let dataset = Dataset::new(classes, spec.window_len, records)?;
    Ok(Corpus { dataset, traces })
}

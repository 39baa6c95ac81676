//! Deterministic slot-based link simulation.
//!
//! Each slot: due HARQ feedback is delivered to the adapter, the adapter picks
//! an MCS from its (stale) estimate, the outcome is drawn from the true SINR
//! with the unclipped BLER curve, and the feedback is queued `delay` slots
//! ahead. Channel draws come from their own RNG stream and one uniform is
//! consumed per slot whether or not a transmission happens, so adapters run
//! on the same seed see the same channel.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blermodel::{BlerTable, Mcs, McsTable};
use crate::error::{Error, Result};
use crate::illa::{IllaDecision, Selector};
use crate::olla::{OllaConfig, OllaState};
use crate::salad::{DistillEvent, SaladAdapter, SaladConfig, SlotContext};

const CHANNEL_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

/// ACK/NACK for a past transmission, with the MCS and TBS it used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HarqFeedback {
    pub tx_slot: u64,
    pub mcs: Mcs,
    pub tbs: u32,
    pub nack: bool,
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Constant,
    Step,
    MultiStep,
    Chirp,
    FileTrace,
}

/// `[channel]` section as written in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels_db: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_slots: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_db: Option<f64>,
    /// Chirp start frequency in cycles per slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Period of reported-SINR (CQI) updates in slots; absent means no reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cqi_period: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cqi_delay: Option<u64>,
}

/// True-SINR trajectory in dB.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelTrajectory {
    Constant { level_db: f64 },
    /// `levels_db[i]` holds from `switch_slots[i - 1]` (slot 0 for `i = 0`).
    Steps { levels_db: Vec<f64>, switch_slots: Vec<u64> },
    Chirp { center_db: f64, amplitude_db: f64, freq_start: f64, freq_end: f64, horizon: u64 },
    Trace { values: Vec<f64> },
}

impl ChannelTrajectory {
    pub fn sinr(&self, slot: u64) -> f64 {
        match self {
            ChannelTrajectory::Constant { level_db } => *level_db,
            ChannelTrajectory::Steps { levels_db, switch_slots } => {
                levels_db[switch_slots.partition_point(|&s| s <= slot)]
            }
            ChannelTrajectory::Chirp { center_db, amplitude_db, freq_start, freq_end, horizon } => {
                let t = slot as f64;
                let n = (*horizon).max(1) as f64;
                let phase = freq_start * t + (freq_end - freq_start) * t * t / (2.0 * n);
                center_db + amplitude_db * (2.0 * std::f64::consts::PI * phase).sin()
            }
            ChannelTrajectory::Trace { values } => values[slot as usize],
        }
    }

    pub fn switch_slots(&self) -> &[u64] {
        match self {
            ChannelTrajectory::Steps { switch_slots, .. } => switch_slots,
            _ => &[],
        }
    }
}

impl ChannelSection {
    pub fn constant(level_db: f64) -> Self {
        ChannelSection { level_db: Some(level_db), ..Self::empty(ChannelKind::Constant) }
    }

    pub fn steps(levels_db: Vec<f64>, switch_slots: Vec<u64>) -> Self {
        let kind = if levels_db.len() == 2 { ChannelKind::Step } else { ChannelKind::MultiStep };
        ChannelSection { levels_db: Some(levels_db), switch_slots: Some(switch_slots), ..Self::empty(kind) }
    }

    pub fn chirp(center_db: f64, amplitude_db: f64, freq_start: f64, freq_end: f64) -> Self {
        ChannelSection {
            center_db: Some(center_db),
            amplitude_db: Some(amplitude_db),
            freq_start: Some(freq_start),
            freq_end: Some(freq_end),
            ..Self::empty(ChannelKind::Chirp)
        }
    }

    fn empty(kind: ChannelKind) -> Self {
        ChannelSection {
            kind,
            level_db: None,
            levels_db: None,
            switch_slots: None,
            center_db: None,
            amplitude_db: None,
            freq_start: None,
            freq_end: None,
            path: None,
            cqi_period: None,
            cqi_delay: None,
        }
    }

    /// Resolves the section into a trajectory covering `slots` slots.
    pub fn trajectory(&self, slots: u64, base_dir: &Path) -> Result<ChannelTrajectory> {
        let need = |v: Option<f64>, key: &str| v.ok_or_else(|| Error::Config(format!("channel: missing key '{key}'")));
        let allowed: &[&str] = match self.kind {
            ChannelKind::Constant => &["level_db"],
            ChannelKind::Step | ChannelKind::MultiStep => &["levels_db", "switch_slots"],
            ChannelKind::Chirp => &["center_db", "amplitude_db", "freq_start", "freq_end"],
            ChannelKind::FileTrace => &["path"],
        };
        let present = [
            ("level_db", self.level_db.is_some()),
            ("levels_db", self.levels_db.is_some()),
            ("switch_slots", self.switch_slots.is_some()),
            ("center_db", self.center_db.is_some()),
            ("amplitude_db", self.amplitude_db.is_some()),
            ("freq_start", self.freq_start.is_some()),
            ("freq_end", self.freq_end.is_some()),
            ("path", self.path.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(Error::Config(format!("channel: key '{key}' does not apply to kind {:?}", self.kind)));
            }
        }
        let traj = match self.kind {
            ChannelKind::Constant => ChannelTrajectory::Constant { level_db: need(self.level_db, "level_db")? },
            ChannelKind::Step | ChannelKind::MultiStep => {
                let levels = self.levels_db.clone().ok_or_else(|| Error::Config("channel: missing key 'levels_db'".into()))?;
                let switches = self.switch_slots.clone().ok_or_else(|| Error::Config("channel: missing key 'switch_slots'".into()))?;
                if levels.len() != switches.len() + 1 {
                    return Err(Error::Config(format!(
                        "channel: {} levels need {} switch slots, got {}",
                        levels.len(),
                        levels.len().saturating_sub(1),
                        switches.len()
                    )));
                }
                if self.kind == ChannelKind::Step && levels.len() != 2 {
                    return Err(Error::Config("channel: kind 'step' takes exactly two levels".into()));
                }
                if switches.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("channel: switch_slots must be strictly increasing".into()));
                }
                ChannelTrajectory::Steps { levels_db: levels, switch_slots: switches }
            }
            ChannelKind::Chirp => ChannelTrajectory::Chirp {
                center_db: need(self.center_db, "center_db")?,
                amplitude_db: need(self.amplitude_db, "amplitude_db")?,
                freq_start: need(self.freq_start, "freq_start")?,
                freq_end: need(self.freq_end, "freq_end")?,
                horizon: slots,
            },
            ChannelKind::FileTrace => {
                let rel = self.path.as_ref().ok_or_else(|| Error::Config("channel: missing key 'path'".into()))?;
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut values = Vec::new();
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let field = line.split(',').next_back().unwrap_or(line).trim();
                    match field.parse::<f64>() {
                        Ok(v) if v.is_finite() => values.push(v),
                        _ if values.is_empty() && field.chars().any(|c| c.is_alphabetic()) => {} // header
                        _ => return Err(Error::Parse { path: path.clone(), line: i + 1, msg: format!("bad SINR value '{field}'") }),
                    }
                }
                if (values.len() as u64) < slots {
                    return Err(Error::Config(format!("{}: trace has {} values, scenario needs {slots}", path.display(), values.len())));
                }
                ChannelTrajectory::Trace { values }
            }
        };
        Ok(traj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbs_list: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offered_load_mbps: Option<f64>,
    #[serde(default = "default_slot_ms")]
    pub slot_duration_ms: f64,
}

fn default_slot_ms() -> f64 {
    0.5
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection { tbs: None, tbs_list: None, offered_load_mbps: None, slot_duration_ms: default_slot_ms() }
    }
}

pub const DEFAULT_TBS: u32 = 2000;

#[derive(Debug, Clone, PartialEq)]
pub enum TbsModel {
    Constant(u32),
    PerSlot(Vec<u32>),
}

impl TbsModel {
    pub fn at(&self, slot: u64) -> u32 {
        match self {
            TbsModel::Constant(b) => *b,
            TbsModel::PerSlot(v) => v[slot as usize % v.len()],
        }
    }
}

impl TrafficSection {
    pub fn model(&self) -> Result<TbsModel> {
        let set = [self.tbs.is_some(), self.tbs_list.is_some(), self.offered_load_mbps.is_some()];
        if set.iter().filter(|s| **s).count() > 1 {
            return Err(Error::Config("traffic: set only one of tbs, tbs_list, offered_load_mbps".into()));
        }
        let model = if let Some(list) = &self.tbs_list {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::Config("traffic: tbs_list must be non-empty with positive entries".into()));
            }
            TbsModel::PerSlot(list.clone())
        } else if let Some(mbps) = self.offered_load_mbps {
            if !(mbps > 0.0 && self.slot_duration_ms > 0.0) {
                return Err(Error::Config("traffic: offered load and slot duration must be positive".into()));
            }
            TbsModel::Constant(((mbps * 1e3 * self.slot_duration_ms).round() as u32).max(1))
        } else {
            let b = self.tbs.unwrap_or(DEFAULT_TBS);
            if b == 0 {
                return Err(Error::Config("traffic: tbs must be positive".into()));
            }
            TbsModel::Constant(b)
        };
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarqSection {
    #[serde(default = "default_delay")]
    pub delay: u64,
    /// Repeating pattern; `D` marks a schedulable slot, any other letter an unschedulable one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_mask: Option<String>,
}

fn default_delay() -> u64 {
    5
}

impl Default for HarqSection {
    fn default() -> Self {
        HarqSection { delay: default_delay(), slot_mask: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Olla,
    Salad,
    Oracle,
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "olla" => Ok(AdapterKind::Olla),
            "salad" => Ok(AdapterKind::Salad),
            "oracle" => Ok(AdapterKind::Oracle),
            other => Err(Error::Config(format!("unknown adapter '{other}' (expected olla, salad or oracle)"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Olla => "olla",
            AdapterKind::Salad => "salad",
            AdapterKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OllaSection {
    #[serde(default = "default_delta_nack")]
    pub delta_nack: f64,
}

fn default_delta_nack() -> f64 {
    1.0
}

impl Default for OllaSection {
    fn default() -> Self {
        OllaSection { delta_nack: default_delta_nack() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: AdapterKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub selector: Selector,
    /// Initial SINR estimate in dB (OLLA reported SINR, SALAD student estimate).
    #[serde(default)]
    pub initial_estimate_db: f64,
    #[serde(default)]
    pub olla: OllaSection,
    #[serde(default)]
    pub salad: SaladConfig,
}

fn default_tau() -> f64 {
    0.1
}

impl AdapterSection {
    pub fn new(kind: AdapterKind) -> Self {
        AdapterSection {
            kind,
            tau: default_tau(),
            selector: Selector::Illa,
            initial_estimate_db: 0.0,
            olla: OllaSection::default(),
            salad: SaladConfig::default(),
        }
    }

    pub fn olla_config(&self) -> OllaConfig {
        OllaConfig { tau: self.tau, delta_nack: self.olla.delta_nack }
    }

    pub fn salad_config(&self) -> SaladConfig {
        SaladConfig { tau: self.tau, ..self.salad.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_window")]
    pub sliding_window: usize,
    #[serde(default = "default_threshold")]
    pub adaptation_threshold_db: f64,
}

fn default_window() -> usize {
    50
}

fn default_threshold() -> f64 {
    1.0
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { sliding_window: default_window(), adaptation_threshold_db: default_threshold() }
    }
}

/// One deterministic run: channel, traffic, HARQ timing, adapter and metric settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub slots: u64,
    #[serde(default)]
    pub seed: u64,
    pub channel: ChannelSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub harq: HarqSection,
    pub adapter: AdapterSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    /// Directory that relative paths in the scenario resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn new(slots: u64, seed: u64, channel: ChannelSection, adapter: AdapterKind) -> Self {
        Scenario {
            slots,
            seed,
            channel,
            traffic: TrafficSection::default(),
            harq: HarqSection::default(),
            adapter: AdapterSection::new(adapter),
            metrics: MetricsSection::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_toml_value(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?, base_dir)
    }

    pub fn from_toml_value(value: toml::Table, base_dir: &Path) -> Result<Self> {
        let mut s: Scenario = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file, applying dotted `key=value` overrides first.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_toml_value(table, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.trajectory(self.slots, &self.base_dir)?;
        self.traffic.model()?;
        self.slot_mask()?;
        match self.adapter.kind {
            AdapterKind::Olla => self.adapter.olla_config().validate()?,
            AdapterKind::Salad => self.adapter.salad_config().validate()?,
            AdapterKind::Oracle => {
                if !(0.0..=1.0).contains(&self.adapter.tau) {
                    return Err(Error::Config(format!("adapter tau must be in [0, 1], got {}", self.adapter.tau)));
                }
            }
        }
        if self.metrics.sliding_window == 0 {
            return Err(Error::Config("metrics: sliding_window must be >= 1".into()));
        }
        if self.channel.cqi_period == Some(0) {
            return Err(Error::Config("channel: cqi_period must be >= 1".into()));
        }
        Ok(())
    }

    fn slot_mask(&self) -> Result<Option<Vec<bool>>> {
        match &self.harq.slot_mask {
            None => Ok(None),
            Some(p) if p.is_empty() => Err(Error::Config("harq: empty slot_mask".into())),
            Some(p) => {
                let mask: Vec<bool> = p.chars().map(|c| c == 'D').collect();
                if !mask.iter().any(|m| *m) {
                    return Err(Error::Config("harq: slot_mask has no schedulable slot".into()));
                }
                Ok(Some(mask))
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// HARQ
// ---------------------------------------------------------------------------

/// FIFO of in-flight feedback with a fixed delay.
#[derive(Debug, Clone, Default)]
pub struct HarqQueue {
    delay: u64,
    pending: VecDeque<(u64, HarqFeedback)>,
}

impl HarqQueue {
    pub fn new(delay: u64) -> Self {
        HarqQueue { delay, pending: VecDeque::new() }
    }

    pub fn push(&mut self, fb: HarqFeedback) {
        self.pending.push_back((fb.tx_slot + self.delay, fb));
    }

    /// Removes everything due at or before `slot`, in FIFO order.
    pub fn deliver(&mut self, slot: u64, out: &mut Vec<HarqFeedback>) {
        while self.pending.front().is_some_and(|(due, _)| *due <= slot) {
            out.push(self.pending.pop_front().expect("front exists").1);
        }
    }

    pub fn drain(&mut self, out: &mut Vec<HarqFeedback>) {
        out.extend(self.pending.drain(..).map(|(_, fb)| fb));
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Bernoulli NACK draw from the unclipped BLER at the true SINR.
pub fn draw_outcome<R: RngCore + ?Sized>(table: &BlerTable, mcs: Mcs, gamma_true: f64, tbs: u32, rng: &mut R) -> Result<bool> {
    let p = table.bler(mcs, gamma_true, tbs)?;
    Ok(rng.random::<f64>() < p)
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Adapter {
    Olla { cfg: OllaConfig, state: OllaState, selector: Selector, table: Arc<BlerTable> },
    Salad(Box<SaladAdapter>),
    Oracle { tau: f64, selector: Selector, table: Arc<BlerTable> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterOutput {
    pub illa: IllaDecision,
    pub estimate: f64,
    pub instant_target: f64,
    pub bias_ratio: Option<f64>,
    pub probing: Option<bool>,
}

impl Adapter {
    pub fn from_section(section: &AdapterSection, table: Arc<BlerTable>, seed: u64) -> Result<Self> {
        Ok(match section.kind {
            AdapterKind::Olla => {
                let cfg = section.olla_config();
                cfg.validate()?;
                let state = OllaState { offset: 0.0, reported_sinr: section.initial_estimate_db };
                Adapter::Olla { cfg, state, selector: section.selector, table }
            }
            AdapterKind::Salad => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(PROBE_STREAM);
                let a = SaladAdapter::new(section.salad_config(), table, rng, section.initial_estimate_db)?
                    .with_selector(section.selector);
                Adapter::Salad(Box::new(a))
            }
            AdapterKind::Oracle => Adapter::Oracle { tau: section.tau, selector: section.selector, table },
        })
    }

    fn step(&mut self, ctx: &SlotContext<'_>, true_sinr: f64) -> Result<Option<AdapterOutput>> {
        match self {
            Adapter::Olla { cfg, state, selector, table } => {
                if let Some(r) = ctx.reported_sinr {
                    state.ingest_report(r);
                }
                for fb in ctx.feedback {
                    state.on_feedback(cfg, fb.nack);
                }
                if !ctx.scheduled {
                    return Ok(None);
                }
                let estimate = state.estimate();
                let illa = selector.select(table, estimate, cfg.tau, ctx.tbs)?;
                Ok(Some(AdapterOutput { illa, estimate, instant_target: cfg.tau, bias_ratio: None, probing: None }))
            }
            Adapter::Salad(a) => Ok(a.step(ctx)?.map(|d| AdapterOutput {
                illa: d.illa,
                estimate: d.estimate,
                instant_target: d.instant_target,
                bias_ratio: d.bias_ratio,
                probing: Some(d.probing),
            })),
            Adapter::Oracle { tau, selector, table } => {
                if !ctx.scheduled {
                    return Ok(None);
                }
                let illa = selector.select(table, true_sinr, *tau, ctx.tbs)?;
                Ok(Some(AdapterOutput { illa, estimate: true_sinr, instant_target: *tau, bias_ratio: None, probing: None }))
            }
        }
    }

    fn absorb(&mut self, feedback: &[HarqFeedback]) -> Result<()> {
        match self {
            Adapter::Olla { cfg, state, .. } => {
                for fb in feedback {
                    state.on_feedback(cfg, fb.nack);
                }
            }
            Adapter::Salad(a) => a.absorb(feedback)?,
            Adapter::Oracle { .. } => {}
        }
        Ok(())
    }

    fn estimate(&self, true_sinr: f64) -> f64 {
        match self {
            Adapter::Olla { state, .. } => state.estimate(),
            Adapter::Salad(a) => a.state().estimate(),
            Adapter::Oracle { .. } => true_sinr,
        }
    }

    fn integral_error(&self) -> Option<f64> {
        match self {
            Adapter::Salad(a) => Some(a.state().integral_error),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Trace and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotTrace {
    pub slot: u64,
    pub true_sinr_db: f64,
    pub est_sinr_db: Option<f64>,
    pub mcs: Option<Mcs>,
    pub tbs: Option<u32>,
    pub nack: Option<bool>,
    pub instant_target: Option<f64>,
    pub bias_ratio: Option<f64>,
    pub probe_flag: Option<bool>,
    pub integral_error: Option<f64>,
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "slot",
    "true_sinr_db",
    "est_sinr_db",
    "mcs",
    "tbs",
    "nack",
    "instant_target",
    "bias_ratio",
    "probe_flag",
    "integral_error",
];

/// Formats a float with 9 significant digits, `%g`-style.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let mantissa = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        format!("{mantissa}e{e}")
    };
    if s == "-0" { "0".into() } else { s }
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

pub fn write_trace<W: Write>(mut w: W, trace: &[SlotTrace]) -> std::io::Result<()> {
    writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.slot,
            fmt_sig9(r.true_sinr_db),
            opt(r.est_sinr_db, fmt_sig9),
            opt(r.mcs, |m| m.to_string()),
            opt(r.tbs, |b| b.to_string()),
            opt(r.nack, |n| u8::from(n).to_string()),
            opt(r.instant_target, fmt_sig9),
            opt(r.bias_ratio, fmt_sig9),
            opt(r.probe_flag, |p| u8::from(p).to_string()),
            opt(r.integral_error, fmt_sig9),
        )?;
    }
    Ok(())
}

/// Parses a trace CSV written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<Vec<SlotTrace>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line, rec) in crate::blermodel::read_rows(f, path, &TRACE_COLUMNS)? {
        let err = |col: &str| Error::Parse { path: path.into(), line, msg: format!("bad value in column {col}") };
        fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, ()> {
            if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| ()) }
        }
        let flag = |s: &str, col: &str| -> Result<Option<bool>> {
            match s {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                _ => Err(err(col)),
            }
        };
        out.push(SlotTrace {
            slot: parse(&rec[0]).map_err(|_| err("slot"))?.ok_or_else(|| err("slot"))?,
            true_sinr_db: parse(&rec[1]).map_err(|_| err("true_sinr_db"))?.ok_or_else(|| err("true_sinr_db"))?,
            est_sinr_db: parse(&rec[2]).map_err(|_| err("est_sinr_db"))?,
            mcs: parse::<u8>(&rec[3]).map_err(|_| err("mcs"))?.map(Mcs),
            tbs: parse(&rec[4]).map_err(|_| err("tbs"))?,
            nack: flag(&rec[5], "nack")?,
            instant_target: parse(&rec[6]).map_err(|_| err("instant_target"))?,
            bias_ratio: parse(&rec[7]).map_err(|_| err("bias_ratio"))?,
            probe_flag: flag(&rec[8], "probe_flag")?,
            integral_error: parse(&rec[9]).map_err(|_| err("integral_error"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub slots: u64,
    pub scheduled: u64,
    pub feedbacks: u64,
    pub nacks: u64,
    pub long_term_bler: f64,
    /// First-round throughput in bits per slot.
    pub tp_first_round: f64,
    pub mean_se: f64,
    pub normalized_tp: f64,
    /// Mean of `(sliding_bler - tau)^2` over the sliding-BLER series.
    pub bler_msd: f64,
    pub sliding_window: usize,
    pub adaptation_time: Option<u64>,
    pub adaptation_times: Vec<Option<u64>>,
    pub final_estimate_db: Option<f64>,
    pub final_integral_error: Option<f64>,
    pub final_epsilon: Option<f64>,
    pub distill_events: Vec<DistillEvent>,
    #[serde(skip)]
    pub sliding_bler: Vec<(u64, f64)>,
}

/// `TP_1st-round * SE_sched / SE_min`, with throughput in bits per slot.
pub fn normalized_tp(trace: &[SlotTrace], mcs: &McsTable) -> Result<f64> {
    let (tp, se) = first_round_tp_and_se(trace, mcs)?;
    Ok(tp * se / mcs.min_se())
}

fn first_round_tp_and_se(trace: &[SlotTrace], mcs: &McsTable) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut bits, mut se_sum, mut n) = (0.0, 0.0, 0u64);
    for r in trace {
        if let (Some(u), Some(b)) = (r.mcs, r.tbs) {
            se_sum += mcs.se(u)?;
            n += 1;
            if r.nack == Some(false) {
                bits += f64::from(b);
            }
        }
    }
    let se = if n == 0 { 0.0 } else { se_sum / n as f64 };
    Ok((bits / trace.len() as f64, se))
}

/// NACK fraction over the last `window` slots.
///
/// Points start once the window is full; a trace shorter than the window
/// yields a single point covering all of it. Windows without feedback are skipped.
pub fn sliding_bler(trace: &[SlotTrace], window: usize) -> Vec<(u64, f64)> {
    assert!(window >= 1, "window must be >= 1");
    if trace.is_empty() {
        return Vec::new();
    }
    let point = |rows: &[SlotTrace]| -> Option<f64> {
        let (n, k) = rows.iter().filter_map(|r| r.nack).fold((0u64, 0u64), |(n, k), x| (n + 1, k + u64::from(x)));
        (n > 0).then(|| k as f64 / n as f64)
    };
    if trace.len() < window {
        return point(trace).map(|b| vec![(trace[trace.len() - 1].slot, b)]).unwrap_or_default();
    }
    let (mut n, mut k) = (0u64, 0u64);
    let mut out = Vec::with_capacity(trace.len() - window + 1);
    for (i, r) in trace.iter().enumerate() {
        if let Some(x) = r.nack {
            n += 1;
            k += u64::from(x);
        }
        if i >= window {
            if let Some(x) = trace[i - window].nack {
                n -= 1;
                k -= u64::from(x);
            }
        }
        if i + 1 >= window && n > 0 {
            out.push((r.slot, k as f64 / n as f64));
        }
    }
    out
}

/// Slots from each switch until the estimate first lies within `threshold_db` of the truth.
pub fn adaptation_times(trace: &[SlotTrace], switch_slots: &[u64], threshold_db: f64) -> Vec<Option<u64>> {
    switch_slots
        .iter()
        .map(|&s| {
            trace
                .iter()
                .skip_while(|r| r.slot < s)
                .find(|r| r.est_sinr_db.is_some_and(|e| (e - r.true_sinr_db).abs() < threshold_db))
                .map(|r| r.slot - s)
        })
        .collect()
}

pub fn compute_metrics(trace: &[SlotTrace], scenario: &Scenario, table: &BlerTable) -> Result<Metrics> {
    let tau = scenario.adapter.tau;
    let scheduled = trace.iter().filter(|r| r.mcs.is_some()).count() as u64;
    let feedbacks = trace.iter().filter(|r| r.nack.is_some()).count() as u64;
    let nacks = trace.iter().filter(|r| r.nack == Some(true)).count() as u64;
    let (tp, se) = first_round_tp_and_se(trace, table.mcs_table())?;
    let sliding = if trace.is_empty() { Vec::new() } else { sliding_bler(trace, scenario.metrics.sliding_window) };
    let bler_msd = if sliding.is_empty() {
        0.0
    } else {
        sliding.iter().map(|(_, b)| (b - tau).powi(2)).sum::<f64>() / sliding.len() as f64
    };
    let traj = scenario.channel.trajectory(scenario.slots, &scenario.base_dir)?;
    let times = adaptation_times(trace, traj.switch_slots(), scenario.metrics.adaptation_threshold_db);
    Ok(Metrics {
        slots: trace.len() as u64,
        scheduled,
        feedbacks,
        nacks,
        long_term_bler: if feedbacks == 0 { 0.0 } else { nacks as f64 / feedbacks as f64 },
        tp_first_round: tp,
        mean_se: se,
        normalized_tp: if trace.is_empty() { 0.0 } else { tp * se / table.mcs_table().min_se() },
        bler_msd,
        sliding_window: scenario.metrics.sliding_window,
        adaptation_time: times.first().copied().flatten(),
        adaptation_times: times,
        final_estimate_db: None,
        final_integral_error: None,
        final_epsilon: None,
        distill_events: Vec::new(),
        sliding_bler: sliding,
    })
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<SlotTrace>,
    pub metrics: Metrics,
    /// Adapter after the run, including the drained feedback.
    pub adapter: Adapter,
}

/// Runs `scenario` with its configured adapter.
pub fn run_scenario(scenario: &Scenario, table: Arc<BlerTable>) -> Result<RunOutput> {
    scenario.validate()?;
    let traj = scenario.channel.trajectory(scenario.slots, &scenario.base_dir)?;
    let tbs_model = scenario.traffic.model()?;
    let mask = scenario.slot_mask()?;
    let mut adapter = Adapter::from_section(&scenario.adapter, table.clone(), scenario.seed)?;
    let mut channel_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    channel_rng.set_stream(CHANNEL_STREAM);

    let mut queue = HarqQueue::new(scenario.harq.delay);
    let mut delivered = Vec::new();
    let mut trace = Vec::with_capacity(scenario.slots as usize);
    let cqi = scenario.channel.cqi_period.map(|p| (p, scenario.channel.cqi_delay.unwrap_or(0)));

    for slot in 0..scenario.slots {
        let gamma = traj.sinr(slot);
        let schedulable = mask.as_ref().is_none_or(|m| m[slot as usize % m.len()]);
        delivered.clear();
        if schedulable {
            queue.deliver(slot, &mut delivered);
        }
        let reported_sinr = cqi.and_then(|(period, delay)| {
            (slot % period == 0 && slot >= delay).then(|| traj.sinr(slot - delay))
        });
        let tbs = tbs_model.at(slot);
        let ctx = SlotContext { slot, scheduled: schedulable, tbs, feedback: &delivered, reported_sinr };
        let out = adapter.step(&ctx, gamma)?;
        let u: f64 = channel_rng.random();
        let row = match out {
            Some(o) => {
                let nack = u < table.bler(o.illa.mcs, gamma, tbs)?;
                queue.push(HarqFeedback { tx_slot: slot, mcs: o.illa.mcs, tbs, nack });
                SlotTrace {
                    slot,
                    true_sinr_db: gamma,
                    est_sinr_db: Some(o.estimate),
                    mcs: Some(o.illa.mcs),
                    tbs: Some(tbs),
                    nack: Some(nack),
                    instant_target: Some(o.instant_target),
                    bias_ratio: o.bias_ratio,
                    probe_flag: o.probing,
                    integral_error: adapter.integral_error(),
                }
            }
            None => SlotTrace {
                slot,
                true_sinr_db: gamma,
                est_sinr_db: None,
                mcs: None,
                tbs: None,
                nack: None,
                instant_target: None,
                bias_ratio: None,
                probe_flag: None,
                integral_error: adapter.integral_error(),
            },
        };
        trace.push(row);
    }

    delivered.clear();
    queue.drain(&mut delivered);
    adapter.absorb(&delivered)?;

    let mut metrics = compute_metrics(&trace, scenario, &table)?;
    let last_gamma = if scenario.slots > 0 { traj.sinr(scenario.slots - 1) } else { 0.0 };
    if scenario.slots > 0 {
        metrics.final_estimate_db = Some(adapter.estimate(last_gamma));
    }
    metrics.final_integral_error = adapter.integral_error();
    if let Adapter::Salad(a) = &adapter {
        metrics.final_epsilon = Some(a.state().epsilon);
        metrics.distill_events = a.distill_events().to_vec();
    }
    Ok(RunOutput { trace, metrics, adapter })
}

/// Same scenario with a different adapter kind.
pub fn with_adapter(scenario: &Scenario, kind: AdapterKind) -> Scenario {
    let mut s = scenario.clone();
    s.adapter.kind = kind;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(slot: u64, mcs: Option<u8>, nack: Option<bool>) -> SlotTrace {
        SlotTrace {
            slot,
            true_sinr_db: 0.0,
            est_sinr_db: None,
            mcs: mcs.map(Mcs),
            tbs: mcs.map(|_| 100),
            nack,
            instant_target: None,
            bias_ratio: None,
            probe_flag: None,
            integral_error: None,
        }
    }

    #[test]
    fn fmt_sig9_examples() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.1), "0.1");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-12.345678912), "-12.3456789");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig9(2.0e12), "2e12");
    }

    #[test]
    fn outcome_saturation_and_replay() {
        let t = BlerTable::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| !draw_outcome(&t, Mcs(27), 1e6, 2000, &mut rng).unwrap()));
        let draws = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| draw_outcome(&t, Mcs(10), 9.0, 2000, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draws(3), draws(3));
    }

    #[test]
    fn outcome_at_center_is_fair_coin() {
        let t = BlerTable::bundled();
        let e = *t.entry(Mcs(14), 2000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let k = (0..n).filter(|_| draw_outcome(&t, Mcs(14), e.center, 2000, &mut rng).unwrap()).count();
        assert!((k as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn harq_queue_fifo_and_delay() {
        let mut q = HarqQueue::new(3);
        for s in 0..5 {
            q.push(HarqFeedback { tx_slot: s, mcs: Mcs(0), tbs: 1, nack: false });
        }
        let mut out = Vec::new();
        q.deliver(2, &mut out);
        assert!(out.is_empty());
        q.deliver(4, &mut out);
        assert_eq!(out.iter().map(|f| f.tx_slot).collect::<Vec<_>>(), vec![0, 1]);
        out.clear();
        q.drain(&mut out);
        assert_eq!(out.len(), 3);
        assert!(q.is_empty());
    }

    #[test]
    fn normalized_tp_examples() {
        let m = McsTable::nr_table2();
        assert_eq!(normalized_tp(&[row(0, Some(3), Some(true)), row(1, Some(5), Some(true))], &m).unwrap(), 0.0);
        assert!((normalized_tp(&[row(0, Some(0), Some(false))], &m).unwrap() - 100.0).abs() < 1e-9);
        let lo = normalized_tp(&[row(0, Some(2), Some(false)), row(1, Some(2), Some(true))], &m).unwrap();
        let hi = normalized_tp(&[row(0, Some(4), Some(false)), row(1, Some(4), Some(true))], &m).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn sliding_bler_examples() {
        let acks: Vec<SlotTrace> = (0..20).map(|s| row(s, Some(1), Some(false))).collect();
        assert!(sliding_bler(&acks, 5).iter().all(|(_, b)| *b == 0.0));

        let alt: Vec<SlotTrace> = (0..40).map(|s| row(s, Some(1), Some(s % 2 == 1))).collect();
        let series = sliding_bler(&alt, 10);
        assert_eq!(series.len(), 31);
        assert!(series.iter().all(|(_, b)| *b == 0.5));

        let short: Vec<SlotTrace> = (0..7).map(|s| row(s, Some(1), Some(s < 2))).collect();
        assert_eq!(sliding_bler(&short, 50), vec![(6, 2.0 / 7.0)]);

        let idle: Vec<SlotTrace> = (0..10).map(|s| row(s, None, None)).collect();
        assert!(sliding_bler(&idle, 3).is_empty());
    }

    #[test]
    fn channel_shapes() {
        let base = Path::new(".");
        let s = ChannelSection::steps(vec![1.0, 5.0, 2.0], vec![10, 20]).trajectory(30, base).unwrap();
        assert_eq!((s.sinr(0), s.sinr(9), s.sinr(10), s.sinr(19), s.sinr(20)), (1.0, 1.0, 5.0, 5.0, 2.0));
        let c = ChannelSection::chirp(10.0, 5.0, 0.0, 0.0).trajectory(100, base).unwrap();
        assert_eq!(c.sinr(37), 10.0);
        let c = ChannelSection::chirp(0.0, 1.0, 0.25, 0.25).trajectory(100, base).unwrap();
        assert!((c.sinr(1) - 1.0).abs() < 1e-12);
        assert!(ChannelSection::steps(vec![1.0, 2.0], vec![]).trajectory(10, base).is_err());
        let mut bad = ChannelSection::constant(1.0);
        bad.freq_end = Some(0.5);
        assert!(bad.trajectory(10, base).is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "slots = 10\n[channel]\nkind = \"constant\"\nlevel_db = 3.0\n[adapter]\nkind = \"olla\"\n[harq]\ndelay = 2\nfoo = 1\n";
        assert!(Scenario::from_toml_str(text, Path::new(".")).is_err());
        let ok = text.replace("foo = 1\n", "");
        assert!(Scenario::from_toml_str(&ok, Path::new(".")).is_ok());
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut t: toml::Table = toml::from_str("[adapter]\nkind = \"olla\"\n").unwrap();
        apply_override(&mut t, "adapter.olla.delta_nack=0.5").unwrap();
        apply_override(&mut t, "adapter.kind=salad").unwrap();
        assert_eq!(t["adapter"]["olla"]["delta_nack"].as_float(), Some(0.5));
        assert_eq!(t["adapter"]["kind"].as_str(), Some("salad"));
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn zero_slot_run() {
        let s = Scenario::new(0, 1, ChannelSection::constant(5.0), AdapterKind::Salad);
        let out = run_scenario(&s, Arc::new(BlerTable::bundled())).unwrap();
        assert!(out.trace.is_empty());
        let m = out.metrics;
        assert_eq!((m.slots, m.scheduled, m.feedbacks, m.nacks), (0, 0, 0, 0));
        assert_eq!((m.long_term_bler, m.normalized_tp, m.mean_se), (0.0, 0.0, 0.0));
        assert!(m.adaptation_time.is_none() && m.final_estimate_db.is_none());
    }

    #[test]
    fn slot_mask_defers_feedback() {
        let mut s = Scenario::new(40, 3, ChannelSection::constant(10.0), AdapterKind::Olla);
        s.harq.delay = 1;
        s.harq.slot_mask = Some("DDDSU".into());
        let out = run_scenario(&s, Arc::new(BlerTable::bundled())).unwrap();
        for r in &out.trace {
            assert_eq!(r.mcs.is_some(), r.slot % 5 < 3, "slot {}", r.slot);
        }
        assert_eq!(out.metrics.scheduled, 24);
    }

    #[test]
    fn salad_integral_error_matches_nack_count() {
        let s = Scenario::new(3000, 8, ChannelSection::constant(12.0), AdapterKind::Salad);
        let out = run_scenario(&s, Arc::new(BlerTable::bundled())).unwrap();
        let m = &out.metrics;
        let e = m.final_integral_error.unwrap();
        assert!((m.nacks as f64 - (0.1 * m.feedbacks as f64 - e)).abs() < 1e-6);
    }

    #[test]
    fn cqi_reports_shift_olla_estimate() {
        let mut s = Scenario::new(10, 0, ChannelSection::constant(7.0), AdapterKind::Olla);
        s.channel.cqi_period = Some(4);
        s.channel.cqi_delay = Some(0);
        s.harq.delay = 100;
        let out = run_scenario(&s, Arc::new(BlerTable::bundled())).unwrap();
        assert!(out.trace.iter().all(|r| r.est_sinr_db == Some(7.0)));
    }
}

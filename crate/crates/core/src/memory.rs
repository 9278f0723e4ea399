//! Skip-connection memory accounting.
//!
//! Only feature maps held alive for a later decoder stage are counted;
//! parameters and transient activations are excluded. Sizes are
//! `elements * bits / 8` bytes and a megabyte is 2^20 bytes.
//!
//! Phases are sampled at the end of every encoder stage `E1..EN` and then at
//! the end of every decoder stage `D(N-1)..D1`. A skip buffer consumed by
//! decoder stage `k` is freed at the end of that stage.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ModelConfig, SkipMode};
use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Phase {
    /// End of encoder stage `n` (1-based).
    Encoder(usize),
    /// End of decoder stage `n` (1-based).
    Decoder(usize),
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Encoder(n) => write!(f, "E{n}"),
            Phase::Decoder(n) => write!(f, "D{n}"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad phase label `{s}`"));
        let (kind, n) = s.split_at(1.min(s.len()));
        let n: usize = n.parse().map_err(|_| bad())?;
        match kind {
            "E" => Ok(Phase::Encoder(n)),
            "D" => Ok(Phase::Decoder(n)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryEvent {
    pub phase: Phase,
    pub delta_bytes: i64,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MemoryTimeline {
    pub samples: Vec<(Phase, u64)>,
    pub events: Vec<MemoryEvent>,
}

impl MemoryTimeline {
    pub fn peak(&self) -> u64 {
        self.samples.iter().map(|s| s.1).max().unwrap_or(0)
    }

    pub fn live_at(&self, phase: Phase) -> Option<u64> {
        self.samples.iter().find(|s| s.0 == phase).map(|s| s.1)
    }

    /// Sum of all allocation and free deltas; zero for a complete pass.
    pub fn net_bytes(&self) -> i64 {
        self.events.iter().map(|e| e.delta_bytes).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
        w.write_record(["phase", "live_bytes"]).map_err(io)?;
        for (phase, bytes) in &self.samples {
            w.write_record([phase.to_string(), bytes.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<(Phase, u64)>> {
        let fail = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
        let headers = r.headers().map_err(|e| fail(e.to_string()))?.clone();
        if headers != vec!["phase", "live_bytes"] {
            return Err(fail(format!("unexpected header {headers:?}")));
        }
        r.records()
            .map(|rec| {
                let rec = rec.map_err(|e| fail(e.to_string()))?;
                let phase = rec[0].parse()?;
                let bytes = rec[1].parse().map_err(|e| fail(format!("{e}")))?;
                Ok((phase, bytes))
            })
            .collect()
    }
}

/// Bytes of a `c x h x w` feature map at `bits` per element.
pub fn feature_bytes(c: usize, h: usize, w: usize, bits: u32) -> u64 {
    (c * h * w) as u64 * bits as u64 / 8
}

fn shape_bytes(shape: Shape, bits: u32) -> u64 {
    shape.numel() as u64 * bits as u64 / 8
}

/// Collects skip-buffer allocation and free events and samples the live total
/// at every phase boundary. Used both by the symbolic model and as the hook
/// the instrumented forward pass reports to.
#[derive(Debug)]
pub struct TraceRecorder {
    bits: u32,
    live: BTreeMap<String, u64>,
    pending: Vec<(String, i64)>,
    timeline: MemoryTimeline,
}

impl TraceRecorder {
    pub fn new(bits: u32) -> Self {
        TraceRecorder { bits, live: BTreeMap::new(), pending: Vec::new(), timeline: MemoryTimeline::default() }
    }

    /// A buffer of `shape` becomes resident under `tag`.
    pub fn alloc(&mut self, tag: &str, shape: Shape) {
        let bytes = shape_bytes(shape, self.bits);
        let previous = self.live.insert(tag.to_string(), bytes);
        debug_assert!(previous.is_none(), "buffer `{tag}` allocated twice");
        self.pending.push((tag.to_string(), bytes as i64));
    }

    pub fn free(&mut self, tag: &str) {
        let bytes = self.live.remove(tag).unwrap_or_else(|| panic!("free of unknown buffer `{tag}`"));
        self.pending.push((tag.to_string(), -(bytes as i64)));
    }

    pub fn end_phase(&mut self, phase: Phase) {
        for (tag, delta_bytes) in self.pending.drain(..) {
            self.timeline.events.push(MemoryEvent { phase, delta_bytes, tag });
        }
        self.timeline.samples.push((phase, self.live.values().sum()));
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.values().sum()
    }

    pub fn finish(self) -> MemoryTimeline {
        self.timeline
    }
}

/// Predicts the skip-memory timeline of one forward pass from the
/// configuration alone.
pub fn skip_timeline(cfg: &ModelConfig, input: Shape) -> Result<MemoryTimeline> {
    cfg.validate()?;
    cfg.validate_input(input)?;
    let n_stages = cfg.num_stages;
    let bits = cfg.accounting_bits;
    let stage_shape = |n: usize| cfg.stage_shape(input, n);
    let mut rec = TraceRecorder::new(bits);
    let mut reduced_tags = Vec::new();
    for n in 1..=n_stages {
        if n < n_stages {
            match cfg.skip_mode {
                SkipMode::Full => rec.alloc(&format!("E{n}"), stage_shape(n)),
                SkipMode::SingleAt(k) if k == n => rec.alloc(&format!("E{n}"), stage_shape(n)),
                SkipMode::MsiamIem => {
                    let s = stage_shape(n);
                    let reduced = Shape { c: cfg.reduced_channels(n)?, ..s };
                    let tag = format!("R{n}");
                    rec.alloc(&tag, reduced);
                    reduced_tags.push(tag);
                    if n == n_stages - 1 {
                        for tag in reduced_tags.drain(..) {
                            rec.free(&tag);
                        }
                        rec.alloc("E'", cfg.aggregated_shape(input)?);
                    }
                }
                _ => {}
            }
        }
        rec.end_phase(Phase::Encoder(n));
    }
    for k in (1..n_stages).rev() {
        match cfg.skip_mode {
            SkipMode::Full => rec.free(&format!("E{k}")),
            SkipMode::SingleAt(j) if j == k => rec.free(&format!("E{k}")),
            SkipMode::MsiamIem if k == 1 => rec.free("E'"),
            _ => {}
        }
        rec.end_phase(Phase::Decoder(k));
    }
    Ok(rec.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub candidate: String,
    pub baseline_peak_bytes: u64,
    pub candidate_peak_bytes: u64,
    /// `(1 - candidate/baseline) * 100`, rounded to one decimal.
    pub reduction_pct: f64,
}

/// Megabytes with at most two decimals and no trailing zeros: `3.75`, `7.5`, `0`.
pub fn format_mb(bytes: u64) -> String {
    let s = format!("{:.2}", bytes as f64 / MIB);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        format!(
            "skip-connection memory (peak)\n  {:<10} {:>10} bytes  {} MB\n  {:<10} {:>10} bytes  {} MB\n  reduction  {:.1}%\n",
            self.baseline,
            self.baseline_peak_bytes,
            format_mb(self.baseline_peak_bytes),
            self.candidate,
            self.candidate_peak_bytes,
            format_mb(self.candidate_peak_bytes),
            self.reduction_pct
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
        w.write_record(["baseline", "candidate", "baseline_peak_bytes", "candidate_peak_bytes", "reduction_pct"])
            .map_err(io)?;
        w.write_record([
            self.baseline.clone(),
            self.candidate.clone(),
            self.baseline_peak_bytes.to_string(),
            self.candidate_peak_bytes.to_string(),
            format!("{:.1}", self.reduction_pct),
        ])
        .map_err(io)?;
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn reduction_pct(baseline: u64, candidate: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    let pct = (1.0 - candidate as f64 / baseline as f64) * 100.0;
    (pct * 10.0).round() / 10.0
}

/// Peak skip memory of `a` (baseline) against `b`.
pub fn compare(a: &ModelConfig, b: &ModelConfig, input: Shape) -> Result<ComparisonReport> {
    let pa = skip_timeline(a, input)?.peak();
    let pb = skip_timeline(b, input)?.peak();
    Ok(ComparisonReport {
        baseline: a.skip_mode.to_string(),
        candidate: b.skip_mode.to_string(),
        baseline_peak_bytes: pa,
        candidate_peak_bytes: pb,
        reduction_pct: reduction_pct(pa, pb),
    })
}

/// Every skip mode's timeline for one configuration, plus the headline
/// comparison of `Full` against `MsiamIem`.
#[derive(Clone, Debug)]
pub struct MemoryAnalysis {
    pub timelines: Vec<(SkipMode, MemoryTimeline)>,
    pub report: ComparisonReport,
}

pub fn analyze(cfg: &ModelConfig, input: Shape) -> Result<MemoryAnalysis> {
    let n = cfg.num_stages;
    let mut modes = vec![SkipMode::Full, SkipMode::None];
    modes.extend((1..n).map(SkipMode::SingleAt));
    modes.push(SkipMode::MsiamIem);
    let timelines = modes
        .into_iter()
        .map(|m| Ok((m, skip_timeline(&cfg.with_skip_mode(m), input)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = compare(&cfg.with_skip_mode(SkipMode::Full), &cfg.with_skip_mode(SkipMode::MsiamIem), input)?;
    Ok(MemoryAnalysis { timelines, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_bytes_examples() {
        assert_eq!(feature_bytes(32, 256, 256, 8), 2_097_152);
        assert_eq!(feature_bytes(64, 128, 128, 8), 1_048_576);
        assert_eq!(feature_bytes(1, 1, 1, 8), 1);
        assert_eq!(feature_bytes(1, 2, 2, 32), 16);
    }

    #[test]
    fn mb_formatting() {
        assert_eq!(format_mb(3_932_160), "3.75");
        assert_eq!(format_mb(262_144), "0.25");
        assert_eq!(format_mb(7_864_320), "7.5");
        assert_eq!(format_mb(0), "0");
    }

    #[test]
    fn reduction_rounding() {
        assert_eq!(reduction_pct(3_932_160, 262_144), 93.3);
        assert_eq!(reduction_pct(100, 100), 0.0);
        assert_eq!(reduction_pct(0, 0), 0.0);
    }

    #[test]
    fn phase_labels_round_trip() {
        for p in [Phase::Encoder(1), Phase::Encoder(5), Phase::Decoder(4)] {
            assert_eq!(p.to_string().parse::<Phase>().unwrap(), p);
        }
        assert!("X1".parse::<Phase>().is_err());
        assert!("E".parse::<Phase>().is_err());
    }

    #[test]
    fn recorder_tracks_live_bytes() {
        let mut rec = TraceRecorder::new(8);
        rec.alloc("a", Shape::new(1, 2, 2, 2).unwrap());
        rec.end_phase(Phase::Encoder(1));
        rec.alloc("b", Shape::new(1, 1, 2, 2).unwrap());
        rec.end_phase(Phase::Encoder(2));
        rec.free("a");
        rec.free("b");
        rec.end_phase(Phase::Decoder(1));
        let t = rec.finish();
        assert_eq!(t.samples, vec![(Phase::Encoder(1), 8), (Phase::Encoder(2), 12), (Phase::Decoder(1), 0)]);
        assert_eq!(t.net_bytes(), 0);
        assert_eq!(t.events.len(), 4);
    }

    fn reference_input() -> Shape {
        Shape::new(1, 3, 256, 256).unwrap()
    }

    #[test]
    fn default_config_peaks() {
        let cfg = ModelConfig::default();
        let full = skip_timeline(&cfg.with_skip_mode(SkipMode::Full), reference_input()).unwrap();
        let ours = skip_timeline(&cfg, reference_input()).unwrap();
        assert_eq!(full.peak(), 3_932_160);
        assert_eq!(ours.peak(), 262_144);
        assert_eq!(full.live_at(Phase::Encoder(4)), Some(3_932_160));
        assert_eq!(full.live_at(Phase::Decoder(1)), Some(0));
        assert_eq!(ours.live_at(Phase::Decoder(2)), Some(262_144));
        assert_eq!(ours.live_at(Phase::Decoder(1)), Some(0));
        assert_eq!(skip_timeline(&cfg.with_skip_mode(SkipMode::None), reference_input()).unwrap().peak(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let t = skip_timeline(&ModelConfig::default(), reference_input()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("timeline.csv");
        t.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("phase,live_bytes\n"));
        assert_eq!(MemoryTimeline::read_csv(&path).unwrap(), t.samples);
    }
}

//! Trace parsing, timestamp-to-slot mapping, one-pass streaming into a
//! sketch or oracle target, and a seeded synthetic generator with planted
//! ground-truth correlations.
//!
//! Trace format: a header line `#mpu-trace v1 mode=slot` (or `mode=ts`),
//! then CSV lines `slot_or_ts,flow_id[,group_id][,src_key]`. Text was
//! chosen over a binary format for diffability; the sketch file format
//! carries the performance burden instead.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;
use std::time::Instant;

use serde::Serialize;

use crate::estimator::MpuEnsemble;
use crate::hashing::{digest_key, HashSeed};
use crate::oracle::ExactTracker;
use crate::{Error, Result};

/// Default tolerated fraction of malformed lines before a file-level
/// abort.
pub const DEFAULT_MAX_ERROR_RATE: f64 = 0.05;

/// Malformed-line rate is only enforced after this many data lines, so a
/// handful of bad lines at the top of a file cannot abort it.
const ERROR_RATE_WARMUP: u64 = 100;

/// How the first column of a trace is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// First column is already a slot index.
    Slot,
    /// First column is a timestamp mapped through [`SlotConfig`].
    Ts,
}

/// Epoch geometry and the timestamp-to-slot mapping
/// `slot = floor((ts - epoch_start) / slot_width)`.
#[derive(Debug, Clone, Copy)]
pub struct SlotConfig {
    pub slot_width: u64,
    pub epoch_start: u64,
    pub epoch_len: u64,
}

impl SlotConfig {
    pub fn new(slot_width: u64, epoch_start: u64, epoch_len: u64) -> Result<Self> {
        if slot_width == 0 || epoch_len == 0 {
            return Err(Error::InvalidParams(format!(
                "slot_width {slot_width} and epoch_len {epoch_len} must be >= 1"
            )));
        }
        Ok(Self {
            slot_width,
            epoch_start,
            epoch_len,
        })
    }

    /// Slots over a pure-slot trace: identity, bounded by the epoch.
    pub fn slots_only(epoch_len: u64) -> Result<Self> {
        Self::new(1, 0, epoch_len)
    }

    /// Maps a timestamp to its slot; `None` when it falls outside the
    /// epoch.
    pub fn slot_of_ts(&self, ts: u64) -> Option<u64> {
        let slot = ts.checked_sub(self.epoch_start)? / self.slot_width;
        (slot < self.epoch_len).then_some(slot)
    }
}

/// One parsed trace event, already slotted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub line: u64,
    pub slot: u64,
    pub flow: String,
    pub group: Option<String>,
    pub src: Option<String>,
}

impl TraceRecord {
    /// Digest of the key the sketch should see: the group when present,
    /// the flow otherwise.
    pub fn key_digest(&self) -> u64 {
        digest_key(self.group.as_deref().unwrap_or(&self.flow).as_bytes())
    }
}

/// Running parse tallies, exposed after (or during) a pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseStats {
    pub data_lines: u64,
    pub parsed: u64,
    pub skipped_out_of_epoch: u64,
    pub malformed: u64,
}

/// Streaming trace parser. Malformed lines are tallied, not fatal, up to
/// a configurable error-rate threshold; out-of-epoch events are counted
/// and skipped.
pub struct TraceParser<R: BufRead> {
    reader: R,
    cfg: SlotConfig,
    mode: TraceMode,
    max_error_rate: f64,
    line_no: u64,
    stats: ParseStats,
    aborted: bool,
}

impl<R: BufRead> TraceParser<R> {
    /// Reads and validates the header line.
    pub fn new(mut reader: R, cfg: SlotConfig, max_error_rate: f64) -> Result<Self> {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mode = match header.trim_end() {
            "#mpu-trace v1 mode=slot" => TraceMode::Slot,
            "#mpu-trace v1 mode=ts" => TraceMode::Ts,
            other => {
                return Err(Error::Parse(format!(
                    "missing or bad trace header (got {other:?})"
                )))
            }
        };
        Ok(Self {
            reader,
            cfg,
            mode,
            max_error_rate,
            line_no: 1,
            stats: ParseStats::default(),
            aborted: false,
        })
    }

    pub fn mode(&self) -> TraceMode {
        self.mode
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }

    fn parse_line(&self, line: &str) -> Result<(u64, String, Option<String>, Option<String>)> {
        let mut fields = line.split(',');
        let first = fields.next().unwrap_or("");
        let raw: u64 = first
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad slot/ts field {first:?}")))?;
        let flow = fields
            .next()
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::Parse("empty flow_id".to_string()))?
            .to_string();
        let group = fields
            .next()
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_string);
        let src = fields
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        if fields.next().is_some() {
            return Err(Error::Parse("too many fields".to_string()));
        }
        Ok((raw, flow, group, src))
    }

    /// Next valid record; `None` at end of input. Comment and blank lines
    /// are ignored; malformed lines are tallied and skipped unless the
    /// error rate crosses the threshold, which surfaces as a fatal error.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Option<Result<TraceRecord>> {
        if self.aborted {
            return None;
        }
        loop {
            let mut line = String::new();
            match self.reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.aborted = true;
                    return Some(Err(e.into()));
                }
            }
            self.line_no += 1;
            let trimmed = line.trim_end();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            self.stats.data_lines += 1;
            match self.parse_line(trimmed) {
                Ok((raw, flow, group, src)) => {
                    let slot = match self.mode {
                        TraceMode::Slot => (raw < self.cfg.epoch_len).then_some(raw),
                        TraceMode::Ts => self.cfg.slot_of_ts(raw),
                    };
                    let Some(slot) = slot else {
                        self.stats.skipped_out_of_epoch += 1;
                        continue;
                    };
                    self.stats.parsed += 1;
                    return Some(Ok(TraceRecord {
                        line: self.line_no,
                        slot,
                        flow,
                        group,
                        src,
                    }));
                }
                Err(e) => {
                    self.stats.malformed += 1;
                    if self.stats.data_lines >= ERROR_RATE_WARMUP
                        && self.stats.malformed as f64
                            > self.max_error_rate * self.stats.data_lines as f64
                    {
                        self.aborted = true;
                        return Some(Err(Error::At {
                            line: self.line_no,
                            source: Box::new(Error::Parse(format!(
                                "error rate {}/{} above threshold {}: {e}",
                                self.stats.malformed, self.stats.data_lines, self.max_error_rate
                            ))),
                        }));
                    }
                }
            }
        }
    }
}

impl<R: BufRead> Iterator for TraceParser<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        TraceParser::next(self)
    }
}

/// Anything a parsed trace can stream into.
pub trait EventSink {
    fn consume(&mut self, rec: &TraceRecord) -> Result<()>;
}

impl EventSink for MpuEnsemble {
    fn consume(&mut self, rec: &TraceRecord) -> Result<()> {
        self.update(rec.key_digest(), rec.slot)
    }
}

impl EventSink for ExactTracker {
    fn consume(&mut self, rec: &TraceRecord) -> Result<()> {
        self.record(rec.key_digest(), rec.slot)
    }
}

/// Outcome of one streaming pass, serialized as JSON by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub events: u64,
    pub skipped: u64,
    pub errors: u64,
    pub wall_ms: f64,
    pub events_per_sec: f64,
}

/// Single forward pass: parse, hand each record to the sink, report.
/// Sink errors abort and carry the offending line number.
pub fn stream_into<R: BufRead, S: EventSink>(
    parser: &mut TraceParser<R>,
    sink: &mut S,
) -> Result<IngestReport> {
    let start = Instant::now();
    while let Some(item) = parser.next() {
        let rec = item?;
        sink.consume(&rec).map_err(|e| Error::At {
            line: rec.line,
            source: Box::new(e),
        })?;
    }
    let stats = parser.stats();
    let wall = start.elapsed().as_secs_f64();
    Ok(IngestReport {
        events: stats.parsed,
        skipped: stats.skipped_out_of_epoch,
        errors: stats.malformed,
        wall_ms: wall * 1e3,
        events_per_sec: if wall > 0.0 {
            stats.parsed as f64 / wall
        } else {
            0.0
        },
    })
}

/// One planted correlated pair: flows `i` and `j` forced co-active in
/// exactly `shared` designated slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedPair {
    pub i: u64,
    pub j: u64,
    pub shared: u64,
}

/// Synthetic trace recipe. Background activity is i.i.d. per (flow, slot)
/// with probability `q` on top of the planted slots.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub flow_count: u64,
    pub epoch_len: u64,
    pub q: f64,
    pub pairs: Vec<PlantedPair>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.flow_count == 0 || self.epoch_len == 0 {
            return Err(Error::InfeasibleSpec(
                "flow_count and epoch_len must be >= 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InfeasibleSpec(format!("q {} outside [0, 1]", self.q)));
        }
        for pair in &self.pairs {
            if pair.i >= self.flow_count || pair.j >= self.flow_count || pair.i == pair.j {
                return Err(Error::InfeasibleSpec(format!(
                    "pair ({}, {}) invalid for {} flows",
                    pair.i, pair.j, self.flow_count
                )));
            }
            if pair.shared > self.epoch_len {
                return Err(Error::InfeasibleSpec(format!(
                    "shared {} exceeds epoch length {}",
                    pair.shared, self.epoch_len
                )));
            }
        }
        Ok(())
    }
}

/// Canonical synthetic flow name for index `i`.
pub fn flow_name(i: u64) -> String {
    format!("f{i}")
}

/// One exact-truth row emitted next to a synthetic trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthRow {
    pub flow_i: String,
    pub flow_j: String,
    pub cor: u64,
}

/// Parses a truth table produced by [`generate`].
pub fn parse_truth(text: &str) -> Result<Vec<TruthRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split('\t');
        let (Some(i), Some(j), Some(cor), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(Error::Parse(format!("bad truth row {line:?}")));
        };
        rows.push(TruthRow {
            flow_i: i.to_string(),
            flow_j: j.to_string(),
            cor: cor
                .parse()
                .map_err(|_| Error::Parse(format!("bad truth cor {cor:?}")))?,
        });
    }
    Ok(rows)
}

/// Counter-mode splitmix stream; the only randomness in generation and
/// in the accuracy harness.
pub(crate) struct Rng {
    seed: HashSeed,
    idx: u64,
}

impl Rng {
    pub(crate) fn new(seed: HashSeed) -> Self {
        Self { seed, idx: 0 }
    }

    pub(crate) fn next(&mut self) -> u64 {
        let v = self.seed.derive(self.idx);
        self.idx += 1;
        v
    }
}

/// Floyd's sampling: `count` distinct values from `0..domain`.
pub(crate) fn sample_distinct(rng: &mut Rng, domain: u64, count: u64) -> BTreeSet<u64> {
    let mut picked = BTreeSet::new();
    for j in domain - count..domain {
        let r = rng.next() % (j + 1);
        if !picked.insert(r) {
            picked.insert(j);
        }
    }
    picked
}

/// Builds a deterministic synthetic trace and its exact ground-truth
/// table. Returns `(trace_text, truth_tsv)`.
///
/// The truth table records the EXACT correlation of each planted pair in
/// the realized trace — planted slots plus whatever background
/// coincidences landed on top.
pub fn generate(spec: &SynthSpec) -> Result<(String, String)> {
    spec.validate()?;
    let mut rng = Rng::new(HashSeed(spec.seed));

    let mut activity: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); spec.flow_count as usize];
    for pair in &spec.pairs {
        let slots = sample_distinct(&mut rng, spec.epoch_len, pair.shared);
        activity[pair.i as usize].extend(slots.iter().copied());
        activity[pair.j as usize].extend(slots.iter().copied());
    }
    if spec.q > 0.0 {
        // Threshold comparison keeps the draw exact for q = 0 and q = 1.
        let threshold = (spec.q * 18_446_744_073_709_551_616.0) as u128;
        for flow in activity.iter_mut() {
            for t in 0..spec.epoch_len {
                if !flow.contains(&t) && (rng.next() as u128) < threshold {
                    flow.insert(t);
                }
            }
        }
    }

    let mut trace = String::from("#mpu-trace v1 mode=slot\n");
    for t in 0..spec.epoch_len {
        for (f, slots) in activity.iter().enumerate() {
            if slots.contains(&t) {
                let _ = writeln!(trace, "{t},{}", flow_name(f as u64));
            }
        }
    }

    let mut truth = String::from("#flow_i\tflow_j\tcor\n");
    for pair in &spec.pairs {
        let cor = activity[pair.i as usize]
            .intersection(&activity[pair.j as usize])
            .count();
        let _ = writeln!(truth, "{}\t{}\t{cor}", flow_name(pair.i), flow_name(pair.j));
    }
    Ok((trace, truth))
}

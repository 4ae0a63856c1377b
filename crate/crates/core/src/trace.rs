//! Synthetic multi-period traces with exact ground truth.
//!
//! Every flow gets a persistent element set, emitted in each of the `t`
//! periods, plus fresh per-period transient sets sized by the period's
//! signal-to-noise ratio `SNR_j = n*/(n_j - n*)`. Transients are drawn
//! without replacement within a period and disjoint from the persistent set;
//! collisions *across* periods are allowed and measured exactly. All draws
//! are keyed by (master seed, flow, period), so the trace and its ground
//! truth are reproducible record for record.
//!
//! Trace file format: a `#spread-trace v1 t=<t>` header, then one record per
//! line as `period<TAB>flow<TAB>element`, periods contiguous ascending.
//! Ground-truth sidecar: `flow<TAB>n_star<TAB>n_1,...,n_t`.

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::hash::Rng;

const STREAM_PERSISTENT: u64 = 0x7065_7273;
const STREAM_TRANSIENT: u64 = 0x7472_616e;
const STREAM_SHUFFLE: u64 = 0x7368_7566;
const STREAM_SPREADS: u64 = 0x7370_7264;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace spec: {0}")]
    BadSpec(String),
    #[error("element domain of 2^{bits} cannot hold {needed} distinct elements per flow-period")]
    InfeasibleDomain { bits: u32, needed: u64 },
    #[error("metrics need at least one pair")]
    EmptyMetrics,
    #[error("metrics input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all truths were zero; no ratios to aggregate")]
    AllTruthsZero,
    #[error("trace line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("missing or malformed trace header")]
    BadHeader,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How per-flow persistent-spread targets are assigned.
#[derive(Debug, Clone, PartialEq)]
pub enum PopulationGroup {
    /// One flow per listed target.
    Explicit { spreads: Vec<u64> },
    /// `flows` flows with targets drawn from a truncated power law
    /// `P(n) ~ n^-exponent` on `[min_spread, max_spread]`.
    PowerLaw {
        flows: u64,
        exponent: f64,
        min_spread: u64,
        max_spread: u64,
    },
}

/// Parameters of a synthetic trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpec {
    pub periods: u32,
    /// One entry per period, or a single entry broadcast to all periods.
    pub snr: Vec<f64>,
    /// Element identifiers are drawn uniformly from `[0, 2^element_bits)`.
    pub element_bits: u32,
    pub master_seed: u64,
    pub population: Vec<PopulationGroup>,
}

impl TraceSpec {
    pub fn snr_for(&self, period: u32) -> f64 {
        if self.snr.len() == 1 {
            self.snr[0]
        } else {
            self.snr[(period - 1) as usize]
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        if self.periods == 0 {
            return Err(TraceError::BadSpec("need at least one period".into()));
        }
        if self.snr.is_empty() || (self.snr.len() != 1 && self.snr.len() != self.periods as usize)
        {
            return Err(TraceError::BadSpec(format!(
                "snr schedule must have 1 or {} entries, got {}",
                self.periods,
                self.snr.len()
            )));
        }
        if !self.snr.iter().all(|&v| v > 0.0) {
            return Err(TraceError::BadSpec("snr values must be positive".into()));
        }
        if self.element_bits == 0 || self.element_bits > 64 {
            return Err(TraceError::BadSpec(format!(
                "element_bits {} out of range 1..=64",
                self.element_bits
            )));
        }
        if self.population.is_empty() {
            return Err(TraceError::BadSpec("population is empty".into()));
        }
        for group in &self.population {
            match group {
                PopulationGroup::Explicit { spreads } => {
                    if spreads.is_empty() {
                        return Err(TraceError::BadSpec("empty explicit group".into()));
                    }
                }
                PopulationGroup::PowerLaw {
                    flows,
                    exponent,
                    min_spread,
                    max_spread,
                } => {
                    if *flows == 0 {
                        return Err(TraceError::BadSpec("power-law group with zero flows".into()));
                    }
                    if !exponent.is_finite() || *exponent <= 0.0 {
                        return Err(TraceError::BadSpec("power-law exponent must be > 0".into()));
                    }
                    if min_spread > max_spread {
                        return Err(TraceError::BadSpec(format!(
                            "power-law range [{min_spread}, {max_spread}] is empty"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One trace line: an element observed for a flow in a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub period: u32,
    pub flow: u32,
    pub element: u64,
}

/// Synthetic address label for a flow index.
pub fn flow_label(flow: u32) -> String {
    format!(
        "10.{}.{}.{}",
        (flow >> 16) & 0xff,
        (flow >> 8) & 0xff,
        flow & 0xff
    )
}

pub fn parse_flow_label(label: &str) -> Option<u32> {
    let mut parts = label.split('.');
    let first: u32 = parts.next()?.parse().ok()?;
    if first != 10 {
        return None;
    }
    let a: u32 = parts.next()?.parse().ok()?;
    let b: u32 = parts.next()?.parse().ok()?;
    let c: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || a > 255 || b > 255 || c > 255 {
        return None;
    }
    Some((a << 16) | (b << 8) | c)
}

/// A flow's exact element sets, regenerable on demand.
#[derive(Debug, Clone)]
pub struct FlowSets {
    pub persistent: Vec<u64>,
    /// One transient set per period, disjoint from `persistent`.
    pub transients: Vec<Vec<u64>>,
}

/// Exact per-flow truth: the realized persistent spread (including any
/// transient elements that happened to recur in every period) and the exact
/// per-period distinct counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTruth {
    pub flow: u32,
    pub n_star: u64,
    pub per_period: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub flows: Vec<FlowTruth>,
}

impl GroundTruth {
    pub fn get(&self, flow: u32) -> Option<&FlowTruth> {
        self.flows.iter().find(|f| f.flow == flow)
    }
}

/// Deterministic trace generator for a validated spec.
pub struct TraceGenerator {
    spec: TraceSpec,
    targets: Vec<u64>,
}

impl TraceGenerator {
    pub fn new(spec: TraceSpec) -> Result<Self, TraceError> {
        spec.validate()?;
        let mut targets = Vec::new();
        for (group_idx, group) in spec.population.iter().enumerate() {
            match group {
                PopulationGroup::Explicit { spreads } => targets.extend_from_slice(spreads),
                PopulationGroup::PowerLaw {
                    flows,
                    exponent,
                    min_spread,
                    max_spread,
                } => {
                    let mut rng =
                        Rng::derive(spec.master_seed, STREAM_SPREADS, group_idx as u64);
                    for _ in 0..*flows {
                        targets.push(sample_power_law(
                            &mut rng,
                            *exponent,
                            *min_spread,
                            *max_spread,
                        ));
                    }
                }
            }
        }
        if targets.len() > u32::MAX as usize {
            return Err(TraceError::BadSpec("too many flows".into()));
        }

        // Feasibility: the largest per-period set must fit the domain with
        // room for rejection sampling.
        let min_snr = spec.snr.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_target = targets.iter().cloned().max().unwrap_or(0);
        let needed = max_target + transient_count(max_target, min_snr);
        let capacity = if spec.element_bits == 64 {
            u64::MAX
        } else {
            1u64 << spec.element_bits
        };
        if needed > capacity / 2 {
            return Err(TraceError::InfeasibleDomain {
                bits: spec.element_bits,
                needed,
            });
        }

        Ok(TraceGenerator { spec, targets })
    }

    pub fn spec(&self) -> &TraceSpec {
        &self.spec
    }

    pub fn flow_count(&self) -> u32 {
        self.targets.len() as u32
    }

    /// The configured persistent-spread target of a flow (the realized value
    /// in `ground_truth` can exceed it if transients recur by chance).
    pub fn spread_target(&self, flow: u32) -> u64 {
        self.targets[flow as usize]
    }

    fn domain(&self) -> u64 {
        if self.spec.element_bits == 64 {
            u64::MAX
        } else {
            1u64 << self.spec.element_bits
        }
    }

    fn draw_distinct(&self, rng: &mut Rng, count: u64, exclude: &HashSet<u64>) -> Vec<u64> {
        let domain = self.domain();
        let mut out = Vec::with_capacity(count as usize);
        let mut seen = HashSet::with_capacity(count as usize);
        while (out.len() as u64) < count {
            let e = if domain == u64::MAX {
                rng.next_u64()
            } else {
                rng.below(domain)
            };
            if !exclude.contains(&e) && seen.insert(e) {
                out.push(e);
            }
        }
        out
    }

    fn persistent_set(&self, flow: u32) -> Vec<u64> {
        let mut rng = Rng::derive(self.spec.master_seed, STREAM_PERSISTENT, flow as u64);
        self.draw_distinct(&mut rng, self.targets[flow as usize], &HashSet::new())
    }

    fn transient_set(&self, flow: u32, period: u32, persistent: &HashSet<u64>) -> Vec<u64> {
        let n_star = self.targets[flow as usize];
        let count = transient_count(n_star, self.spec.snr_for(period));
        let mut rng = Rng::derive(
            self.spec.master_seed,
            STREAM_TRANSIENT ^ ((period as u64) << 32),
            flow as u64,
        );
        self.draw_distinct(&mut rng, count, persistent)
    }

    /// Regenerates one flow's exact element sets for all periods.
    pub fn flow_sets(&self, flow: u32) -> FlowSets {
        let persistent = self.persistent_set(flow);
        let lookup: HashSet<u64> = persistent.iter().cloned().collect();
        let transients = (1..=self.spec.periods)
            .map(|p| self.transient_set(flow, p, &lookup))
            .collect();
        FlowSets {
            persistent,
            transients,
        }
    }

    /// All records of one period, in a seeded shuffled order.
    pub fn period_records(&self, period: u32) -> Vec<TraceRecord> {
        let mut records = Vec::new();
        for flow in 0..self.flow_count() {
            let persistent = self.persistent_set(flow);
            let lookup: HashSet<u64> = persistent.iter().cloned().collect();
            let transient = self.transient_set(flow, period, &lookup);
            for element in persistent.into_iter().chain(transient) {
                records.push(TraceRecord {
                    period,
                    flow,
                    element,
                });
            }
        }
        let mut rng = Rng::derive(self.spec.master_seed, STREAM_SHUFFLE, period as u64);
        rng.shuffle(&mut records);
        records
    }

    /// Streams every record, periods ascending.
    pub fn for_each_record<F: FnMut(TraceRecord)>(&self, mut f: F) {
        for period in 1..=self.spec.periods {
            for record in self.period_records(period) {
                f(record);
            }
        }
    }

    /// Exact ground truth for every flow, computed from the realized sets:
    /// `n*` is the size of the persistent set plus any transients that
    /// recurred in all periods; `n_j` are exact distinct counts.
    pub fn ground_truth(&self) -> GroundTruth {
        let flows = (0..self.flow_count())
            .map(|flow| {
                let sets = self.flow_sets(flow);
                let per_period: Vec<u64> = sets
                    .transients
                    .iter()
                    .map(|t| sets.persistent.len() as u64 + t.len() as u64)
                    .collect();
                let mut recurring: HashSet<u64> =
                    sets.transients[0].iter().cloned().collect();
                for t in &sets.transients[1..] {
                    let next: HashSet<u64> = t.iter().cloned().collect();
                    recurring.retain(|e| next.contains(e));
                    if recurring.is_empty() {
                        break;
                    }
                }
                FlowTruth {
                    flow,
                    n_star: sets.persistent.len() as u64 + recurring.len() as u64,
                    per_period,
                }
            })
            .collect();
        GroundTruth { flows }
    }
}

fn transient_count(n_star: u64, snr: f64) -> u64 {
    (n_star as f64 / snr).round() as u64
}

/// Parses a population description of `;`-separated groups:
/// `explicit:<spread>[x<count>],...` and
/// `powerlaw:flows=<n>,exponent=<a>,min=<lo>,max=<hi>`.
///
/// Example: `explicit:500x4,20000;powerlaw:flows=5000,exponent=1.6,min=1,max=30`.
pub fn parse_population_spec(spec: &str) -> Result<Vec<PopulationGroup>, TraceError> {
    let bad = |msg: String| TraceError::BadSpec(msg);
    let mut groups = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (kind, body) = part
            .split_once(':')
            .ok_or_else(|| bad(format!("group `{part}` is missing `:`")))?;
        match kind {
            "explicit" => {
                let mut spreads = Vec::new();
                for entry in body.split(',') {
                    let (value, count) = match entry.split_once('x') {
                        Some((v, c)) => (
                            v.parse::<u64>()
                                .map_err(|_| bad(format!("bad spread `{v}`")))?,
                            c.parse::<u64>()
                                .map_err(|_| bad(format!("bad count `{c}`")))?,
                        ),
                        None => (
                            entry
                                .parse::<u64>()
                                .map_err(|_| bad(format!("bad spread `{entry}`")))?,
                            1,
                        ),
                    };
                    spreads.extend(std::iter::repeat_n(value, count as usize));
                }
                groups.push(PopulationGroup::Explicit { spreads });
            }
            "powerlaw" => {
                let (mut flows, mut exponent, mut min, mut max) = (None, None, None, None);
                for entry in body.split(',') {
                    let (key, value) = entry
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad power-law field `{entry}`")))?;
                    match key {
                        "flows" => {
                            flows = Some(
                                value
                                    .parse::<u64>()
                                    .map_err(|_| bad(format!("bad flows `{value}`")))?,
                            )
                        }
                        "exponent" => {
                            exponent = Some(
                                value
                                    .parse::<f64>()
                                    .map_err(|_| bad(format!("bad exponent `{value}`")))?,
                            )
                        }
                        "min" => {
                            min = Some(
                                value
                                    .parse::<u64>()
                                    .map_err(|_| bad(format!("bad min `{value}`")))?,
                            )
                        }
                        "max" => {
                            max = Some(
                                value
                                    .parse::<u64>()
                                    .map_err(|_| bad(format!("bad max `{value}`")))?,
                            )
                        }
                        other => return Err(bad(format!("unknown power-law field `{other}`"))),
                    }
                }
                groups.push(PopulationGroup::PowerLaw {
                    flows: flows.ok_or_else(|| bad("powerlaw needs flows=".into()))?,
                    exponent: exponent.ok_or_else(|| bad("powerlaw needs exponent=".into()))?,
                    min_spread: min.ok_or_else(|| bad("powerlaw needs min=".into()))?,
                    max_spread: max.ok_or_else(|| bad("powerlaw needs max=".into()))?,
                });
            }
            other => return Err(bad(format!("unknown group kind `{other}`"))),
        }
    }
    if groups.is_empty() {
        return Err(bad("population spec is empty".into()));
    }
    Ok(groups)
}

fn sample_power_law(rng: &mut Rng, exponent: f64, min: u64, max: u64) -> u64 {
    if min == max {
        return min;
    }
    let (lo, hi) = (min as f64, max as f64 + 1.0);
    let u = rng.next_f64();
    let x = if (exponent - 1.0).abs() < 1e-9 {
        lo * (hi / lo).powf(u)
    } else {
        let a = 1.0 - exponent;
        (lo.powf(a) + u * (hi.powf(a) - lo.powf(a))).powf(1.0 / a)
    };
    (x.floor() as u64).clamp(min, max)
}

/// Exact persistent spread of one flow from raw records: the size of the
/// intersection of its per-period element sets.
pub fn exact_persistent_spread<'a, I>(records: I, flow: u32, periods: u32) -> u64
where
    I: IntoIterator<Item = &'a TraceRecord>,
{
    let mut sets: Vec<HashSet<u64>> = vec![HashSet::new(); periods as usize];
    for r in records {
        if r.flow == flow && r.period >= 1 && r.period <= periods {
            sets[(r.period - 1) as usize].insert(r.element);
        }
    }
    let (first, rest) = match sets.split_first() {
        Some(split) => split,
        None => return 0,
    };
    first
        .iter()
        .filter(|e| rest.iter().all(|s| s.contains(*e)))
        .count() as u64
}

/// Accuracy of paired estimates against truths, in ratio space: `bias` is
/// the mean of `estimate/truth` minus one, `stderr` the sample standard
/// deviation of the ratios. Zero-truth pairs are excluded and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioStats {
    pub bias: f64,
    pub stderr: f64,
    pub used: usize,
    pub excluded_zero_truth: usize,
}

pub fn ratio_stats(estimates: &[f64], truths: &[f64]) -> Result<RatioStats, TraceError> {
    if estimates.len() != truths.len() {
        return Err(TraceError::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Err(TraceError::EmptyMetrics);
    }
    let ratios: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&e, &t)| e / t)
        .collect();
    if ratios.is_empty() {
        return Err(TraceError::AllTruthsZero);
    }
    Ok(RatioStats {
        bias: crate::math::mean(&ratios) - 1.0,
        stderr: crate::math::sample_std(&ratios),
        used: ratios.len(),
        excluded_zero_truth: estimates.len() - ratios.len(),
    })
}

pub fn relative_bias(estimates: &[f64], truths: &[f64]) -> Result<f64, TraceError> {
    ratio_stats(estimates, truths).map(|s| s.bias)
}

pub fn relative_stderr(estimates: &[f64], truths: &[f64]) -> Result<f64, TraceError> {
    ratio_stats(estimates, truths).map(|s| s.stderr)
}

/// Writes the trace in the line format, periods ascending.
pub fn write_trace<W: Write>(generator: &TraceGenerator, out: &mut W) -> io::Result<()> {
    writeln!(out, "#spread-trace v1 t={}", generator.spec().periods)?;
    for period in 1..=generator.spec().periods {
        for r in generator.period_records(period) {
            writeln!(out, "{}\t{}\t{}", r.period, flow_label(r.flow), r.element)?;
        }
    }
    Ok(())
}

/// Writes the ground-truth sidecar.
pub fn write_ground_truth<W: Write>(truth: &GroundTruth, out: &mut W) -> io::Result<()> {
    for f in &truth.flows {
        let per_period: Vec<String> = f.per_period.iter().map(|n| n.to_string()).collect();
        writeln!(
            out,
            "{}\t{}\t{}",
            flow_label(f.flow),
            f.n_star,
            per_period.join(",")
        )?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> Result<GroundTruth, TraceError> {
    let mut flows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| TraceError::BadRecord {
            line: idx + 1,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let flow = fields
            .next()
            .and_then(parse_flow_label)
            .ok_or_else(|| bad("bad flow label"))?;
        let n_star: u64 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad n_star"))?;
        let per_period = fields
            .next()
            .ok_or_else(|| bad("missing per-period counts"))?
            .split(',')
            .map(|v| v.parse::<u64>())
            .collect::<Result<Vec<u64>, _>>()
            .map_err(|_| bad("bad per-period count"))?;
        flows.push(FlowTruth {
            flow,
            n_star,
            per_period,
        });
    }
    Ok(GroundTruth { flows })
}

/// Streaming reader for the trace line format.
pub struct TraceReader<R: BufRead> {
    lines: std::iter::Enumerate<io::Lines<R>>,
    periods: u32,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R) -> Result<Self, TraceError> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(line))) => line,
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(TraceError::BadHeader),
        };
        let periods = header
            .strip_prefix("#spread-trace v1 t=")
            .and_then(|t| t.parse().ok())
            .ok_or(TraceError::BadHeader)?;
        Ok(TraceReader { lines, periods })
    }

    pub fn periods(&self) -> u32 {
        self.periods
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (idx, line) = self.lines.next()?;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.is_empty() {
                continue;
            }
            let bad = |message: &str| TraceError::BadRecord {
                line: idx + 1,
                message: message.to_string(),
            };
            let mut fields = line.split('\t');
            let parsed = (|| {
                let period: u32 = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad period"))?;
                let flow = fields
                    .next()
                    .and_then(parse_flow_label)
                    .ok_or_else(|| bad("bad flow label"))?;
                let element: u64 = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad element"))?;
                Ok(TraceRecord {
                    period,
                    flow,
                    element,
                })
            })();
            return Some(parsed);
        }
    }
}

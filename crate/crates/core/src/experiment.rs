//! End-to-end harness: stream a trace into per-period shared arrays, offload
//! and reload snapshots, query flows, and aggregate accuracy per true-spread
//! bucket. Used by the CLI and the validation suites.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::hll::HllSketch;
use crate::persistent::{
    mle_estimate, union_baseline_estimate, EstimatorError, IntersectionModel, PersistentEstimate,
};
use crate::snapshot::{self, ExperimentManifest, Snapshot, StoreError};
use crate::trace::{RatioStats, TraceError, TraceGenerator, TraceRecord};
use crate::vsketch::{
    HashScheme, PhysicalRegisterArray, SeedTable, ViEstimator, VirtualError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("record for period {period} outside 1..={periods}")]
    PeriodOutOfRange { period: u32, periods: u32 },
    #[error("seed digest mismatch: manifest {manifest:#x}, snapshots {snapshot:#x}")]
    SeedDigestMismatch { manifest: u64, snapshot: u64 },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Virtual(#[from] VirtualError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Geometry and seeding of the recording side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingConfig {
    /// Memory budget for one period's array, in bits.
    pub memory_bits: u64,
    /// Virtual sketch size `s`.
    pub sketch_registers: usize,
    /// Register width `h` in bits.
    pub width: u32,
    pub master_seed: u64,
}

impl RecordingConfig {
    /// Registers per period array: `m = floor(M / h)`.
    pub fn register_count(&self) -> usize {
        (self.memory_bits / self.width as u64) as usize
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.width == 0 || self.width > 8 {
            return Err(ExperimentError::BadConfig(format!(
                "register width {} out of range",
                self.width
            )));
        }
        let m = self.register_count();
        if m <= self.sketch_registers {
            return Err(ExperimentError::BadConfig(format!(
                "memory budget of {} bits gives m={} registers, not above s={}",
                self.memory_bits, m, self.sketch_registers
            )));
        }
        if m < 128 {
            return Err(ExperimentError::BadConfig(format!(
                "m={m} is below the 128-register minimum"
            )));
        }
        if !self.sketch_registers.is_power_of_two() || self.sketch_registers < 16 {
            return Err(ExperimentError::BadConfig(format!(
                "s={} is not a power of two >= 16",
                self.sketch_registers
            )));
        }
        Ok(())
    }
}

/// Per-period arrays plus the hashing state queries need.
pub struct RecordedExperiment {
    pub arrays: Vec<PhysicalRegisterArray>,
    pub seeds: SeedTable,
    pub scheme: HashScheme,
}

/// One pass over a record stream, filling one array per period. Flow
/// fingerprints are cached, so each record costs two hashes.
pub fn record_stream<I>(
    records: I,
    periods: u32,
    config: &RecordingConfig,
) -> Result<RecordedExperiment, ExperimentError>
where
    I: IntoIterator<Item = Result<TraceRecord, TraceError>>,
{
    config.validate()?;
    let scheme = HashScheme::from_master_seed(config.master_seed);
    let seeds = SeedTable::generate(config.sketch_registers, config.master_seed)?;
    let m = config.register_count();
    let mut arrays: Vec<PhysicalRegisterArray> = (1..=periods)
        .map(|p| PhysicalRegisterArray::new(m, config.width, p))
        .collect::<Result<_, _>>()?;
    let mut fingerprints: HashMap<u32, u64> = HashMap::new();

    for record in records {
        let record = record?;
        if record.period < 1 || record.period > periods {
            return Err(ExperimentError::PeriodOutOfRange {
                period: record.period,
                periods,
            });
        }
        let fp = *fingerprints
            .entry(record.flow)
            .or_insert_with(|| scheme.fingerprint(crate::trace::flow_label(record.flow).as_bytes()));
        arrays[(record.period - 1) as usize].record_fingerprinted(
            &scheme,
            &seeds,
            fp,
            record.element,
        );
    }
    Ok(RecordedExperiment {
        arrays,
        seeds,
        scheme,
    })
}

/// Streams trace records into per-period arrays, offloading each period's
/// snapshot as soon as its records end and holding a single array in memory.
/// Requires the trace's period order (contiguous ascending); the recording
/// side never keeps more than one period's registers plus constants.
pub fn record_stream_offloading<I>(
    records: I,
    periods: u32,
    config: &RecordingConfig,
    dir: &Path,
) -> Result<ExperimentManifest, ExperimentError>
where
    I: IntoIterator<Item = Result<TraceRecord, TraceError>>,
{
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(StoreError::Io)?;
    let scheme = HashScheme::from_master_seed(config.master_seed);
    let seeds = SeedTable::generate(config.sketch_registers, config.master_seed)?;
    let digest = seeds.digest();
    let m = config.register_count();

    let mut manifest_periods = Vec::new();
    let mut offload = |array: &PhysicalRegisterArray| -> Result<(), ExperimentError> {
        let name = format!("period_{:03}.snap", array.period_id());
        let path = dir.join(&name);
        snapshot::save(&Snapshot::of_array(array, digest), &path)?;
        manifest_periods.push((array.period_id(), path));
        Ok(())
    };

    let mut current = PhysicalRegisterArray::new(m, config.width, 1)?;
    for record in records {
        let record = record?;
        if record.period < 1 || record.period > periods {
            return Err(ExperimentError::PeriodOutOfRange {
                period: record.period,
                periods,
            });
        }
        if record.period < current.period_id() {
            return Err(ExperimentError::BadConfig(format!(
                "trace periods must be contiguous ascending; saw {} after {}",
                record.period,
                current.period_id()
            )));
        }
        while record.period > current.period_id() {
            offload(&current)?;
            current = PhysicalRegisterArray::new(m, config.width, current.period_id() + 1)?;
        }
        let fp = scheme.fingerprint(crate::trace::flow_label(record.flow).as_bytes());
        current.record_fingerprinted(&scheme, &seeds, fp, record.element);
    }
    while current.period_id() <= periods {
        offload(&current)?;
        if current.period_id() == periods {
            break;
        }
        current = PhysicalRegisterArray::new(m, config.width, current.period_id() + 1)?;
    }

    let manifest = ExperimentManifest {
        registers: m as u64,
        width: config.width as u8,
        sketch_registers: config.sketch_registers as u64,
        master_seed: config.master_seed,
        seed_digest: digest,
        periods: manifest_periods,
    };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Records a generator's trace directly, without the file round trip.
pub fn record_generated(
    generator: &TraceGenerator,
    config: &RecordingConfig,
) -> Result<RecordedExperiment, ExperimentError> {
    let mut result: Option<ExperimentError> = None;
    let mut experiment = {
        config.validate()?;
        let scheme = HashScheme::from_master_seed(config.master_seed);
        let seeds = SeedTable::generate(config.sketch_registers, config.master_seed)?;
        let m = config.register_count();
        let arrays: Vec<PhysicalRegisterArray> = (1..=generator.spec().periods)
            .map(|p| PhysicalRegisterArray::new(m, config.width, p))
            .collect::<Result<_, _>>()?;
        RecordedExperiment {
            arrays,
            seeds,
            scheme,
        }
    };
    let mut fingerprints: HashMap<u32, u64> = HashMap::new();
    generator.for_each_record(|record| {
        if result.is_some() {
            return;
        }
        if record.period < 1 || record.period > generator.spec().periods {
            result = Some(ExperimentError::PeriodOutOfRange {
                period: record.period,
                periods: generator.spec().periods,
            });
            return;
        }
        let fp = *fingerprints.entry(record.flow).or_insert_with(|| {
            experiment
                .scheme
                .fingerprint(crate::trace::flow_label(record.flow).as_bytes())
        });
        experiment.arrays[(record.period - 1) as usize].record_fingerprinted(
            &experiment.scheme,
            &experiment.seeds,
            fp,
            record.element,
        );
    });
    match result {
        Some(err) => Err(err),
        None => Ok(experiment),
    }
}

/// Offloads per-period arrays as snapshot files and writes the manifest.
pub fn save_experiment(
    experiment: &RecordedExperiment,
    config: &RecordingConfig,
    dir: &Path,
) -> Result<ExperimentManifest, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(StoreError::Io)?;
    let digest = experiment.seeds.digest();
    let mut periods = Vec::new();
    for array in &experiment.arrays {
        let name = format!("period_{:03}.snap", array.period_id());
        let path = dir.join(&name);
        snapshot::save(&Snapshot::of_array(array, digest), &path)?;
        periods.push((array.period_id(), path));
    }
    let manifest = ExperimentManifest {
        registers: experiment.arrays[0].m() as u64,
        width: config.width as u8,
        sketch_registers: config.sketch_registers as u64,
        master_seed: config.master_seed,
        seed_digest: digest,
        periods,
    };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Reloads an experiment from its manifest, verifying seed digests.
pub fn load_experiment(
    manifest: &ExperimentManifest,
) -> Result<RecordedExperiment, ExperimentError> {
    let scheme = HashScheme::from_master_seed(manifest.master_seed);
    let seeds = SeedTable::generate(manifest.sketch_registers as usize, manifest.master_seed)?;
    if seeds.digest() != manifest.seed_digest {
        return Err(ExperimentError::SeedDigestMismatch {
            manifest: manifest.seed_digest,
            snapshot: seeds.digest(),
        });
    }
    let mut arrays = Vec::new();
    for (_, path) in &manifest.periods {
        let snap = snapshot::load(path)?;
        if snap.seed_digest != manifest.seed_digest {
            return Err(ExperimentError::SeedDigestMismatch {
                manifest: manifest.seed_digest,
                snapshot: snap.seed_digest,
            });
        }
        arrays.push(snap.into_array()?);
    }
    arrays.sort_by_key(|a| a.period_id());
    Ok(RecordedExperiment {
        arrays,
        seeds,
        scheme,
    })
}

/// Which estimator a sweep point runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    ViHll,
    IHllDedicated,
    UnionBaseline,
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vi-hll" => Ok(EstimatorKind::ViHll),
            "i-hll-dedicated" => Ok(EstimatorKind::IHllDedicated),
            "union-baseline" => Ok(EstimatorKind::UnionBaseline),
            other => Err(format!(
                "unknown estimator `{other}` (expected vi-hll, i-hll-dedicated or union-baseline)"
            )),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::ViHll => "vi-hll",
            EstimatorKind::IHllDedicated => "i-hll-dedicated",
            EstimatorKind::UnionBaseline => "union-baseline",
        })
    }
}

/// Builds one flow's dedicated per-period sketches straight from the
/// generator's element sets (recording order does not matter).
pub fn dedicated_sketches(
    generator: &TraceGenerator,
    scheme: &HashScheme,
    s: usize,
    width: u32,
    flow: u32,
) -> Result<Vec<HllSketch>, ExperimentError> {
    let hasher = scheme.element_hasher();
    let sets = generator.flow_sets(flow);
    let mut sketches = Vec::new();
    for transient in &sets.transients {
        let mut sk = HllSketch::new(s, width)
            .map_err(|e| ExperimentError::BadConfig(e.to_string()))?;
        for &e in &sets.persistent {
            sk.record_u64(&hasher, e);
        }
        for &e in transient {
            sk.record_u64(&hasher, e);
        }
        sketches.push(sk);
    }
    Ok(sketches)
}

/// Runs the selected estimator over one flow's dedicated sketches.
pub fn dedicated_estimate(
    sketches: &[HllSketch],
    kind: EstimatorKind,
) -> Result<f64, ExperimentError> {
    let per_period: Vec<f64> = sketches.iter().map(|sk| sk.estimate()).collect();
    match kind {
        EstimatorKind::IHllDedicated => {
            let model =
                IntersectionModel::new(sketches[0].s(), sketches[0].cap(), per_period)?;
            let intersection = HllSketch::intersect(sketches)
                .map_err(|e| ExperimentError::BadConfig(e.to_string()))?;
            Ok(mle_estimate(&model, &intersection)?.n_star_hat)
        }
        EstimatorKind::UnionBaseline => Ok(union_baseline_estimate(sketches, &per_period)?),
        EstimatorKind::ViHll => Err(ExperimentError::BadConfig(
            "vi-hll runs on shared arrays, not dedicated sketches".into(),
        )),
    }
}

/// (true spread, estimate) pairs for the evaluated flows under a given
/// estimator. `eval_flows = None` evaluates every flow with nonzero truth.
pub fn run_point(
    generator: &TraceGenerator,
    config: &RecordingConfig,
    kind: EstimatorKind,
    eval_flows: Option<&[u32]>,
) -> Result<Vec<(u32, u64, PersistentEstimate)>, ExperimentError> {
    let truth = generator.ground_truth();
    let flows: Vec<u32> = match eval_flows {
        Some(list) => list.to_vec(),
        None => truth
            .flows
            .iter()
            .filter(|f| f.n_star > 0)
            .map(|f| f.flow)
            .collect(),
    };

    let mut out = Vec::with_capacity(flows.len());
    match kind {
        EstimatorKind::ViHll => {
            let recorded = record_generated(generator, config)?;
            let engine = ViEstimator::new(&recorded.arrays, recorded.scheme, &recorded.seeds)?;
            for flow in flows {
                let label = crate::trace::flow_label(flow);
                let estimate = engine.estimate(label.as_bytes())?;
                let n_star = truth.get(flow).map(|f| f.n_star).unwrap_or(0);
                out.push((flow, n_star, estimate));
            }
        }
        EstimatorKind::IHllDedicated | EstimatorKind::UnionBaseline => {
            let scheme = HashScheme::from_master_seed(config.master_seed);
            for flow in flows {
                let sketches = dedicated_sketches(
                    generator,
                    &scheme,
                    config.sketch_registers,
                    config.width,
                    flow,
                )?;
                let value = dedicated_estimate(&sketches, kind)?;
                let n_star = truth.get(flow).map(|f| f.n_star).unwrap_or(0);
                out.push((flow, n_star, synthetic_estimate(value)));
            }
        }
    }
    Ok(out)
}

/// Wraps a bare point estimate (baseline estimators carry no error model).
fn synthetic_estimate(value: f64) -> PersistentEstimate {
    PersistentEstimate {
        n_star_hat: value,
        stderr: f64::NAN,
        ci_low: value,
        ci_high: value,
        diagnostics: crate::persistent::Diagnostics {
            iterations: 0,
            bracket: (0.0, 0.0),
            boundary: false,
            clamped: false,
            noise: false,
            stderr_valid: false,
        },
    }
}

/// Accuracy aggregated over flows sharing a true-spread bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketMetrics {
    /// Inclusive bucket bounds on the true spread.
    pub lo: u64,
    pub hi: u64,
    pub stats: RatioStats,
}

/// Groups (truth, estimate) pairs into buckets and aggregates ratio
/// statistics. Exact-value buckets when few distinct truths occur (the
/// synthetic target groups), powers-of-two ranges otherwise. Zero-truth
/// pairs are excluded and counted.
pub fn bucket_metrics(pairs: &[(u64, f64)]) -> (Vec<BucketMetrics>, usize) {
    let mut excluded = 0usize;
    let nonzero: Vec<(u64, f64)> = pairs
        .iter()
        .filter(|(t, _)| {
            if *t == 0 {
                excluded += 1;
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();

    let mut distinct: Vec<u64> = nonzero.iter().map(|(t, _)| *t).collect();
    distinct.sort_unstable();
    distinct.dedup();

    let mut groups: HashMap<(u64, u64), (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (truth, estimate) in &nonzero {
        let key = if distinct.len() <= 32 {
            (*truth, *truth)
        } else {
            let lo = 1u64 << truth.ilog2();
            (lo, lo * 2 - 1)
        };
        let entry = groups.entry(key).or_default();
        entry.0.push(*estimate);
        entry.1.push(*truth as f64);
    }

    let mut buckets: Vec<BucketMetrics> = groups
        .into_iter()
        .map(|((lo, hi), (estimates, truths))| BucketMetrics {
            lo,
            hi,
            stats: crate::trace::ratio_stats(&estimates, &truths)
                .expect("bucket contains only nonzero truths"),
        })
        .collect();
    buckets.sort_by_key(|b| b.lo);
    (buckets, excluded)
}

//! Memory-shared virtual sketches.
//!
//! All flows of one measurement period share a single physical array of `m`
//! registers. A flow's virtual sketch is the `s` physical registers selected
//! by seeded hashing of its label, so recording costs two hashes per element
//! and no per-flow state. Querying reconstructs the virtual sketches from
//! the stored per-period arrays, runs the intersection estimator at sketch
//! scale and at whole-array scale, and cancels the noise other flows leaked
//! into the shared registers.

use thiserror::Error;

use crate::hash::{hash_bytes, hash_u64, mix64, Rng};
use crate::hll::{estimate_registers, ElementHasher, HllSketch, SketchError};
use crate::math::normal_quantile;
use crate::persistent::{
    mle_from_histogram, psi_squared, Diagnostics, EstimatorError, IntersectionModel,
    PersistentEstimate, RegisterHistogram,
};

#[derive(Debug, Error)]
pub enum VirtualError {
    #[error("physical array needs at least 128 registers, got {0}")]
    ArrayTooSmall(usize),
    #[error("register width {0} must be between 1 and 8 bits")]
    BadRegisterWidth(u32),
    #[error("virtual sketch size {s} must leave headroom in the array of {m} registers")]
    MemoryTooSmall { m: usize, s: usize },
    #[error("seed table size {0} is not a power of two >= 16")]
    BadSeedCount(usize),
    #[error("need at least two periods, got {0}")]
    TooFewPeriods(usize),
    #[error("arrays disagree: {0}")]
    MismatchedArrays(String),
    #[error("error model invalid: negative radicand {0}")]
    ModelInvalid(f64),
    #[error("parameter out of range: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

/// The three hash roles of a deployment, all derived from one master seed:
/// element hashing (register index + rank), flow fingerprinting, and the
/// master mapping hash that places virtual registers in the physical array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashScheme {
    element_seed: u64,
    fingerprint_seed: u64,
    map_seed: u64,
}

impl HashScheme {
    pub fn from_master_seed(master_seed: u64) -> Self {
        HashScheme {
            element_seed: mix64(master_seed ^ 0x5354_4e45_4d45_4c45),
            fingerprint_seed: mix64(master_seed ^ 0x5250_5245_474e_4946),
            map_seed: mix64(master_seed ^ 0x2020_2050_414d_2020),
        }
    }

    pub fn element_hasher(&self) -> ElementHasher {
        ElementHasher::new(self.element_seed)
    }

    /// 64-bit fingerprint of a flow label; virtual placement depends on the
    /// label only through this value.
    #[inline]
    pub fn fingerprint(&self, flow: &[u8]) -> u64 {
        hash_bytes(flow, self.fingerprint_seed)
    }

    /// Physical slot of virtual register `i`, given the flow fingerprint and
    /// the seed `R[i]`.
    #[inline]
    pub fn slot(&self, fingerprint: u64, seed: u64, m: usize) -> usize {
        (hash_u64(fingerprint ^ seed, self.map_seed) % m as u64) as usize
    }
}

/// Fixed table of `s` pairwise-distinct seeds, shared by all periods and all
/// flows of a deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedTable {
    seeds: Vec<u64>,
}

impl SeedTable {
    pub fn generate(s: usize, master_seed: u64) -> Result<Self, VirtualError> {
        if s < 16 || !s.is_power_of_two() {
            return Err(VirtualError::BadSeedCount(s));
        }
        let mut rng = Rng::derive(master_seed, 0x5345_4544, 0);
        let mut seen = std::collections::HashSet::with_capacity(s);
        let mut seeds = Vec::with_capacity(s);
        while seeds.len() < s {
            let v = rng.next_u64();
            if seen.insert(v) {
                seeds.push(v);
            }
        }
        Ok(SeedTable { seeds })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn index_bits(&self) -> u32 {
        self.seeds.len().trailing_zeros()
    }

    /// Order-sensitive digest used to verify that the query side holds the
    /// same table the recorder used.
    pub fn digest(&self) -> u64 {
        let mut acc = 0x6469_6765_7374_u64;
        for &s in &self.seeds {
            acc = mix64(acc ^ s);
        }
        acc
    }
}

/// A flow's view into the physical array: the `s` slots its virtual sketch
/// occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualSketchView {
    pub fingerprint: u64,
    pub indices: Vec<usize>,
}

/// Physical slot indices of a flow's virtual registers.
pub fn virtual_indices(
    scheme: &HashScheme,
    seeds: &SeedTable,
    m: usize,
    flow: &[u8],
) -> VirtualSketchView {
    let fingerprint = scheme.fingerprint(flow);
    let indices = seeds
        .seeds()
        .iter()
        .map(|&r| scheme.slot(fingerprint, r, m))
        .collect();
    VirtualSketchView {
        fingerprint,
        indices,
    }
}

/// Physical slot an element of a flow lands in: the element hash picks the
/// virtual register `p`, the flow fingerprint and `R[p]` place it.
pub fn element_slot(
    scheme: &HashScheme,
    seeds: &SeedTable,
    m: usize,
    flow: &[u8],
    element: u64,
) -> usize {
    let split = scheme
        .element_hasher()
        .split_u64(element, seeds.index_bits());
    scheme.slot(scheme.fingerprint(flow), seeds.seeds()[split.index], m)
}

/// One measurement period's pool of shared registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysicalRegisterArray {
    width: u32,
    period_id: u32,
    registers: Vec<u8>,
}

impl PhysicalRegisterArray {
    pub fn new(m: usize, width: u32, period_id: u32) -> Result<Self, VirtualError> {
        if m < 128 {
            return Err(VirtualError::ArrayTooSmall(m));
        }
        if width == 0 || width > 8 {
            return Err(VirtualError::BadRegisterWidth(width));
        }
        Ok(PhysicalRegisterArray {
            width,
            period_id,
            registers: vec![0; m],
        })
    }

    pub fn from_registers(
        registers: Vec<u8>,
        width: u32,
        period_id: u32,
    ) -> Result<Self, VirtualError> {
        let mut array = PhysicalRegisterArray::new(registers.len(), width, period_id)?;
        let cap = array.cap();
        if let Some(&v) = registers.iter().find(|&&v| v > cap) {
            return Err(VirtualError::MismatchedArrays(format!(
                "register value {v} exceeds cap {cap}"
            )));
        }
        array.registers = registers;
        Ok(array)
    }

    pub fn m(&self) -> usize {
        self.registers.len()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn cap(&self) -> u8 {
        ((1u16 << self.width) - 1) as u8
    }

    pub fn period_id(&self) -> u32 {
        self.period_id
    }

    pub fn registers(&self) -> &[u8] {
        &self.registers
    }

    /// Records one element of a flow: the element hash picks virtual
    /// register `p` and the rank, the flow mapping picks the physical slot,
    /// and the slot takes the max.
    pub fn record(&mut self, scheme: &HashScheme, seeds: &SeedTable, flow: &[u8], element: &[u8]) {
        let split = scheme.element_hasher().split(element, seeds.index_bits());
        let slot = scheme.slot(scheme.fingerprint(flow), seeds.seeds()[split.index], self.m());
        self.bump(slot, split.tail, split.tail_bits);
    }

    /// `record` for numeric elements, with the fingerprint precomputed by
    /// the caller (the recording hot path caches fingerprints per flow).
    #[inline]
    pub fn record_fingerprinted(
        &mut self,
        scheme: &HashScheme,
        seeds: &SeedTable,
        fingerprint: u64,
        element: u64,
    ) {
        let split = scheme
            .element_hasher()
            .split_u64(element, seeds.index_bits());
        let slot = scheme.slot(fingerprint, seeds.seeds()[split.index], self.m());
        self.bump(slot, split.tail, split.tail_bits);
    }

    #[inline]
    fn bump(&mut self, slot: usize, tail: u64, tail_bits: u32) {
        let rank = crate::hll::rho(tail, tail_bits).min(self.cap() as u32) as u8;
        let r = &mut self.registers[slot];
        if *r < rank {
            *r = rank;
        }
    }

    /// Rebuilds the flow's virtual sketch: register `i` reads the physical
    /// slot the seed table maps it to. Read-only.
    pub fn extract_virtual(
        &self,
        scheme: &HashScheme,
        seeds: &SeedTable,
        flow: &[u8],
    ) -> HllSketch {
        let view = virtual_indices(scheme, seeds, self.m(), flow);
        let registers = view.indices.iter().map(|&i| self.registers[i]).collect();
        HllSketch::from_registers(registers, self.width)
            .expect("extracted registers inherit the array cap")
    }

    /// Cardinality estimate of everything recorded this period, treating the
    /// whole array as one sketch of `m` registers.
    pub fn estimate_total(&self) -> f64 {
        estimate_registers(&self.registers).expect("arrays have >= 128 registers")
    }

    fn check_consistent(arrays: &[PhysicalRegisterArray]) -> Result<(), VirtualError> {
        let first = arrays
            .first()
            .ok_or_else(|| VirtualError::MismatchedArrays("no arrays".into()))?;
        for a in &arrays[1..] {
            if a.m() != first.m() || a.width != first.width {
                return Err(VirtualError::MismatchedArrays(format!(
                    "expected m={} width={}, found m={} width={}",
                    first.m(),
                    first.width,
                    a.m(),
                    a.width
                )));
            }
        }
        Ok(())
    }

    /// Register-wise minimum across periods.
    pub fn intersect_registers(arrays: &[PhysicalRegisterArray]) -> Result<Vec<u8>, VirtualError> {
        Self::check_consistent(arrays)?;
        let mut out = arrays[0].registers.clone();
        for a in &arrays[1..] {
            for (o, &r) in out.iter_mut().zip(&a.registers) {
                if *o > r {
                    *o = r;
                }
            }
        }
        Ok(out)
    }
}

/// Noise-corrected estimate of one flow's cardinality in a single period:
/// the raw virtual-sketch estimate per register, minus the array-wide
/// density, rescaled. Clamped at zero.
pub fn per_period_flow_cardinality(
    array: &PhysicalRegisterArray,
    scheme: &HashScheme,
    seeds: &SeedTable,
    flow: &[u8],
) -> f64 {
    let m = array.m() as f64;
    let s = seeds.len() as f64;
    let virtual_est = array.extract_virtual(scheme, seeds, flow).estimate();
    let total_est = array.estimate_total();
    let corrected = (m * s / (m - s)) * (virtual_est / s - total_est / m);
    corrected.max(0.0)
}

/// Shared state for querying many flows against one set of per-period
/// arrays: the whole-array intersection estimate is flow-independent and
/// computed once.
pub struct ViEstimator<'a> {
    arrays: &'a [PhysicalRegisterArray],
    scheme: HashScheme,
    seeds: &'a SeedTable,
    array_model: IntersectionModel,
    array_estimate: PersistentEstimate,
}

impl<'a> ViEstimator<'a> {
    pub fn new(
        arrays: &'a [PhysicalRegisterArray],
        scheme: HashScheme,
        seeds: &'a SeedTable,
    ) -> Result<Self, VirtualError> {
        if arrays.len() < 2 {
            return Err(VirtualError::TooFewPeriods(arrays.len()));
        }
        PhysicalRegisterArray::check_consistent(arrays)?;
        let m = arrays[0].m();
        let s = seeds.len();
        if m <= s {
            return Err(VirtualError::MemoryTooSmall { m, s });
        }
        let cap = arrays[0].cap();

        let per_period_totals: Vec<f64> = arrays.iter().map(|a| a.estimate_total()).collect();
        let array_model = IntersectionModel::new(m, cap, per_period_totals)?;
        let intersected = PhysicalRegisterArray::intersect_registers(arrays)?;
        let hist = RegisterHistogram::from_registers(&intersected, cap)?;
        let array_estimate = mle_from_histogram(&array_model, &hist)?;

        Ok(ViEstimator {
            arrays,
            scheme,
            seeds,
            array_model,
            array_estimate,
        })
    }

    /// Persistent elements recorded anywhere in the shared arrays.
    pub fn array_persistent_estimate(&self) -> &PersistentEstimate {
        &self.array_estimate
    }

    /// Noise-cancelled persistent-spread estimate for one flow.
    pub fn estimate(&self, flow: &[u8]) -> Result<PersistentEstimate, VirtualError> {
        let m = self.arrays[0].m() as f64;
        let s = self.seeds.len() as f64;
        let cap = self.arrays[0].cap();

        let virtuals: Vec<HllSketch> = self
            .arrays
            .iter()
            .map(|a| a.extract_virtual(&self.scheme, self.seeds, flow))
            .collect();
        let per_period: Vec<f64> = virtuals.iter().map(|v| v.estimate()).collect();
        let sketch_model = IntersectionModel::new(self.seeds.len(), cap, per_period)?;
        let intersection = HllSketch::intersect(&virtuals)?;
        let sketch_estimate =
            mle_from_histogram(&sketch_model, &RegisterHistogram::from_sketch(&intersection))?;

        let n_s = sketch_estimate.n_star_hat;
        let n_u = self.array_estimate.n_star_hat;
        let raw = (m * s / (m - s)) * (n_s / s - n_u / m);
        let clamped = raw < 0.0;
        let n_hat = raw.max(0.0);

        // Error model with plug-in values; psi at each scale needs a
        // positive operating point.
        let mut stderr_valid = true;
        let absolute_sd = if n_s > 0.0 && n_u > 0.0 {
            let psi_s2 = psi_squared(&sketch_model, n_s);
            let psi_m2 = psi_squared(&self.array_model, n_u);
            match vi_radicand(m, s, n_hat, n_u, psi_s2, psi_m2) {
                r if r >= 0.0 && psi_s2 > 0.0 && psi_m2 > 0.0 => (m / (m - s)) * r.sqrt(),
                _ => {
                    stderr_valid = false;
                    f64::INFINITY
                }
            }
        } else {
            stderr_valid = false;
            f64::INFINITY
        };

        let stderr = if n_hat > 0.0 {
            absolute_sd / n_hat
        } else {
            f64::INFINITY
        };
        let noise = !absolute_sd.is_finite() || n_hat <= 1.645 * absolute_sd;
        let z = normal_quantile(0.975);
        let (ci_low, ci_high) = if absolute_sd.is_finite() {
            ((n_hat - z * absolute_sd).max(0.0), n_hat + z * absolute_sd)
        } else {
            (n_hat, n_hat)
        };

        Ok(PersistentEstimate {
            n_star_hat: n_hat,
            stderr,
            ci_low,
            ci_high,
            diagnostics: Diagnostics {
                iterations: sketch_estimate.diagnostics.iterations
                    + self.array_estimate.diagnostics.iterations,
                bracket: sketch_estimate.diagnostics.bracket,
                boundary: sketch_estimate.diagnostics.boundary,
                clamped,
                noise,
                stderr_valid,
            },
        })
    }
}

/// One-shot form of the estimator for a single flow.
pub fn vi_hll_estimate(
    arrays: &[PhysicalRegisterArray],
    scheme: &HashScheme,
    seeds: &SeedTable,
    flow: &[u8],
) -> Result<PersistentEstimate, VirtualError> {
    ViEstimator::new(arrays, *scheme, seeds)?.estimate(flow)
}

fn vi_radicand(m: f64, s: f64, n_star: f64, n_u_star: f64, psi_s2: f64, psi_m2: f64) -> f64 {
    let inflated = n_star + s * (n_u_star - n_star) / m;
    let noise_var = (s * (n_u_star - n_star) / m) * (1.0 - s / m);
    (inflated * inflated) / (s * psi_s2)
        + (1.0 / (s * psi_s2) + 1.0) * noise_var
        - (s / m) * (s / m) * n_u_star * n_u_star / (m * psi_m2)
}

/// Closed-form relative standard error of the noise-cancelled estimate.
///
/// Negative radicands (possible in corner configurations where the
/// subtracted array-scale term dominates) are reported as model-invalid
/// rather than silently clamped.
pub fn vi_hll_theoretical_stderr(
    m: usize,
    s: usize,
    n_star: f64,
    n_u_star: f64,
    psi_s: f64,
    psi_m: f64,
) -> Result<f64, VirtualError> {
    if m <= s {
        return Err(VirtualError::MemoryTooSmall { m, s });
    }
    if n_star <= 0.0 || psi_s <= 0.0 || psi_m <= 0.0 {
        return Err(VirtualError::BadParameter(format!(
            "need n*>0, psi_s>0, psi_m>0 (got {n_star}, {psi_s}, {psi_m})"
        )));
    }
    let (m_f, s_f) = (m as f64, s as f64);
    let radicand = vi_radicand(m_f, s_f, n_star, n_u_star, psi_s * psi_s, psi_m * psi_m);
    if radicand < 0.0 {
        return Err(VirtualError::ModelInvalid(radicand));
    }
    Ok(m_f / ((m_f - s_f) * n_star) * radicand.sqrt())
}

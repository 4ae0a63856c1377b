//! Interactive demos of persistent-spread estimation, compiled to wasm for a
//! static browser page (see `www/index.html`). Everything is seeded and
//! synchronous; each exported function returns a JSON payload the page plots
//! on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use spread_core::experiment::{record_generated, RecordingConfig};
use spread_core::hash::Rng;
use spread_core::hll::{ElementHasher, HllSketch};
use spread_core::persistent::{
    log_likelihood, mle_estimate, register_pmf, IntersectionModel, RegisterHistogram,
};
use spread_core::trace::{flow_label, PopulationGroup, TraceGenerator, TraceSpec};
use spread_core::vsketch::ViEstimator;

const WIDTH: u32 = 5;
const CAP: u8 = 31;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo payloads serialize")
}

#[derive(Serialize)]
struct PmfCurves {
    /// P(register = k) for k = 0..=31 at the chosen spread.
    pmf: Vec<f64>,
    /// Same distribution with zero persistent spread, for contrast.
    pmf_noise_only: Vec<f64>,
    /// Grid of candidate spreads and the matching expected log-likelihood
    /// per register (relative to its maximum).
    spread_grid: Vec<f64>,
    expected_log_likelihood: Vec<f64>,
}

/// Distribution of an intersected register value for `t` periods of
/// per-period cardinality `n_per_period`, at persistent spread `n_star`,
/// plus the expected log-likelihood curve the estimator climbs.
#[wasm_bindgen]
pub fn pmf_curves(s: u32, t: u32, n_per_period: f64, n_star: f64) -> String {
    let s = (s.max(16) as usize).next_power_of_two();
    let t = t.clamp(1, 16) as usize;
    let n_star = n_star.clamp(0.0, n_per_period);
    let model = IntersectionModel::new(s, CAP, vec![n_per_period; t]).expect("valid model");

    let pmf = register_pmf(&model, n_star);
    let pmf_noise_only = register_pmf(&model, 0.0);

    // expected log-likelihood over candidates: sum_k pmf_true[k] ln pmf_c[k]
    let upper = (n_per_period - 1.0).max(1.0);
    let points = 120;
    let mut spread_grid = Vec::with_capacity(points);
    let mut expected = Vec::with_capacity(points);
    for i in 0..points {
        let candidate = upper * i as f64 / (points - 1) as f64;
        let pmf_c = register_pmf(&model, candidate);
        let mut ell = 0.0;
        for (p_true, p_c) in pmf.iter().zip(&pmf_c) {
            if *p_true > 0.0 && *p_c > 0.0 {
                ell += p_true * p_c.ln();
            }
        }
        spread_grid.push(candidate);
        expected.push(ell);
    }
    let best = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut expected {
        *v -= best;
    }

    to_json(&PmfCurves {
        pmf,
        pmf_noise_only,
        spread_grid,
        expected_log_likelihood: expected,
    })
}

#[derive(Serialize)]
struct IhllDemo {
    true_spread: u64,
    estimate: f64,
    stderr: f64,
    ci_low: f64,
    ci_high: f64,
    per_period_estimates: Vec<f64>,
    /// Histogram N_k of the intersected sketch.
    intersection_histogram: Vec<u64>,
    /// Log-likelihood over candidate spreads, shifted so the peak is 0.
    spread_grid: Vec<f64>,
    log_likelihood: Vec<f64>,
}

/// One seeded dedicated-sketch experiment: `t` periods of a single flow with
/// `n_star` persistent elements and `n_star / snr` fresh transients per
/// period, intersected and fed to the estimator.
#[wasm_bindgen]
pub fn ihll_demo(s: u32, t: u32, n_star: u32, snr: f64, seed: u32) -> String {
    let s = (s.max(16) as usize).next_power_of_two();
    let t = t.clamp(2, 16) as usize;
    let n_star = n_star.clamp(1, 200_000) as u64;
    let snr = snr.clamp(0.05, 1e6);
    let transients = (n_star as f64 / snr).round() as u64;

    let hasher = ElementHasher::new(0xDE11);
    let mut rng = Rng::derive(seed as u64, 0x11, 1);
    let persistent: Vec<u64> = (0..n_star).map(|_| rng.next_u64()).collect();
    let mut periods = Vec::with_capacity(t);
    for _ in 0..t {
        let mut sk = HllSketch::new(s, WIDTH).unwrap();
        for &e in &persistent {
            sk.record_u64(&hasher, e);
        }
        for _ in 0..transients {
            sk.record_u64(&hasher, rng.next_u64());
        }
        periods.push(sk);
    }
    let per_period: Vec<f64> = periods.iter().map(|p| p.estimate()).collect();
    let model = IntersectionModel::new(s, CAP, per_period.clone()).unwrap();
    let intersection = HllSketch::intersect(&periods).unwrap();
    let est = mle_estimate(&model, &intersection).unwrap();
    let hist = RegisterHistogram::from_sketch(&intersection);

    let upper = (model.min_per_period() - 1.0).max(1.0);
    let points = 160;
    let mut spread_grid = Vec::with_capacity(points);
    let mut ll = Vec::with_capacity(points);
    for i in 0..points {
        let candidate = upper * i as f64 / (points - 1) as f64;
        spread_grid.push(candidate);
        ll.push(log_likelihood(&model, &hist, candidate));
    }
    let peak = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut ll {
        *v -= peak;
    }

    to_json(&IhllDemo {
        true_spread: n_star,
        estimate: est.n_star_hat,
        stderr: est.stderr,
        ci_low: est.ci_low,
        ci_high: est.ci_high,
        per_period_estimates: per_period,
        intersection_histogram: hist.counts().to_vec(),
        spread_grid,
        log_likelihood: ll,
    })
}

#[derive(Serialize)]
struct ScatterPoint {
    truth: u64,
    estimate: f64,
}

#[derive(Serialize)]
struct VihllScatter {
    m: usize,
    s: usize,
    flows: u32,
    elements_per_period: u64,
    points: Vec<ScatterPoint>,
}

/// A miniature shared-array deployment: a few hundred flows with power-law
/// spreads plus a handful of large ones, recorded into one physical array
/// per period and queried back. Returns (truth, estimate) scatter points.
#[wasm_bindgen]
pub fn vihll_scatter(memory_kbits: u32, s: u32, t: u32, snr: f64, seed: u32) -> String {
    let s = (s.clamp(16, 2048) as usize).next_power_of_two();
    let t = t.clamp(2, 12);
    let snr = snr.clamp(0.1, 100.0);
    let memory_bits = (memory_kbits.clamp(40, 4_096) as u64) * 1_000;

    let spec = TraceSpec {
        periods: t,
        snr: vec![snr],
        element_bits: 64,
        master_seed: seed as u64,
        population: vec![
            PopulationGroup::Explicit {
                spreads: vec![200, 400, 800, 1_500, 3_000, 6_000],
            },
            PopulationGroup::PowerLaw {
                flows: 400,
                exponent: 1.6,
                min_spread: 1,
                max_spread: 120,
            },
        ],
    };
    let generator = TraceGenerator::new(spec).expect("demo spec is valid");
    let config = RecordingConfig {
        memory_bits,
        sketch_registers: s,
        width: WIDTH,
        master_seed: seed as u64 ^ 0x5EED,
    };
    config.validate().expect("demo configuration is valid");
    let recorded = record_generated(&generator, &config).expect("recording succeeds");
    let engine =
        ViEstimator::new(&recorded.arrays, recorded.scheme, &recorded.seeds).expect("engine");

    let truth = generator.ground_truth();
    let mut points = Vec::new();
    let mut elements = 0u64;
    for f in &truth.flows {
        elements += f.per_period[0];
        if f.n_star < 20 {
            continue;
        }
        let est = engine
            .estimate(flow_label(f.flow).as_bytes())
            .expect("query succeeds");
        points.push(ScatterPoint {
            truth: f.n_star,
            estimate: est.n_star_hat,
        });
    }
    to_json(&VihllScatter {
        m: config.register_count(),
        s,
        flows: generator.flow_count(),
        elements_per_period: elements,
        points,
    })
}

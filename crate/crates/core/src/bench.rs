//! Timing and memory measurement for mixers.
//!
//! Time is wall-clock over `reps` runs after `warmup` runs, median first.
//! Memory is the high-water mark of live scalars from [`crate::meter`],
//! taken over one extra untimed run, so it counts only what the library
//! allocates and never process RSS.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::circulant::{CatOptions, ExecPath};
use crate::error::{Error, Result};
use crate::meter;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::variants::{attention_coefficients, Mechanism, MixerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Forward,
    ForwardBackward,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Forward => "forward",
            Measure::ForwardBackward => "forward_backward",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Measure::Forward),
            "forward_backward" | "forward-backward" => Ok(Measure::ForwardBackward),
            _ => Err(Error::invalid(format!("unknown measure '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::invalid(format!("unknown precision '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub mechanism: Mechanism,
    pub path: ExecPath,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub precision: Precision,
    pub reps: usize,
    pub warmup: usize,
    pub measure: Measure,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(mechanism: Mechanism, path: ExecPath, n: usize, d: usize, heads: usize) -> Self {
        Self {
            mechanism,
            path,
            n,
            d,
            heads,
            precision: Precision::F64,
            reps: 10,
            warmup: 1,
            measure: Measure::Forward,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 || self.warmup < 1 {
            return Err(Error::invalid("bench needs reps >= 3 and warmup >= 1"));
        }
        check_combo(self.mechanism, self.path)
    }
}

/// Quadratic mixers have only the explicit path.
pub fn check_combo(mechanism: Mechanism, path: ExecPath) -> Result<()> {
    match mechanism {
        Mechanism::Attention | Mechanism::Gqa { .. } if path != ExecPath::Explicit => Err(Error::Unsupported(
            format!("{mechanism} has no {path} path; use explicit"),
        )),
        Mechanism::CatAlter => Err(Error::Unsupported("cat_alter is a schedule, not a layer".into())),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ns: f64,
    pub median_ns: f64,
    pub min_ns: u64,
}

/// Times `f` over `reps` runs after `warmup` runs.
pub fn time_fn(reps: usize, warmup: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut ns: Vec<u64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    ns.sort_unstable();
    let k = ns.len();
    let median_ns = if k % 2 == 1 {
        ns[k / 2] as f64
    } else {
        (ns[k / 2 - 1] as f64 + ns[k / 2] as f64) / 2.0
    };
    Timing {
        mean_ns: ns.iter().map(|&x| x as f64).sum::<f64>() / k as f64,
        median_ns,
        min_ns: ns[0],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub case: BenchCase,
    pub timing: Timing,
    pub peak_scalars: usize,
    pub largest_alloc: usize,
    pub attn_coeffs: u64,
}

fn run_typed<T: Scalar>(case: &BenchCase) -> Result<BenchResult> {
    let mut rng = SeededRng::new(case.seed);
    let params = MixerParams::<Tensor>::init(case.mechanism, case.d, case.heads, case.n, &mut rng)?;
    let params: MixerParams<Tensor<T>> = params.map(|t| t.cast());
    let x: Tensor<T> = Tensor::randn(Shape::matrix(case.n, case.d)?, 1.0, &mut rng);
    let cot: Tensor<T> = Tensor::randn(Shape::matrix(case.n, case.d)?, 1.0, &mut rng);
    let opts = CatOptions::with_path(case.path);
    let once = || -> Result<()> {
        let tape = Tape::<T>::new();
        let track = case.measure == Measure::ForwardBackward;
        let xv = if track { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
        let p = params.map(|t| if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) });
        let out = tape.mixer(xv, &p, &opts)?;
        if track {
            let r = tape.constant(cot.clone());
            let l = tape.sum(tape.mul(out, r)?)?;
            std::hint::black_box(tape.backward(l)?);
        } else {
            std::hint::black_box(tape.value(out));
        }
        Ok(())
    };
    let (res, usage) = meter::measure(once);
    res?;
    let timing = time_fn(case.reps, case.warmup, || once().expect("validated case"));
    Ok(BenchResult {
        case: case.clone(),
        timing,
        peak_scalars: usage.peak_scalars,
        largest_alloc: usage.largest_alloc,
        attn_coeffs: attention_coefficients(case.mechanism, case.n as u64, case.heads as u64, case.d as u64),
    })
}

pub fn run_bench(case: &BenchCase) -> Result<BenchResult> {
    case.validate()?;
    match case.precision {
        Precision::F64 => run_typed::<f64>(case),
        Precision::F32 => run_typed::<f32>(case),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrowthRatio {
    pub n_from: usize,
    pub n_to: usize,
    /// Median time ratio `T(n_to) / T(n_from)`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub results: Vec<BenchResult>,
    pub ratios: Vec<GrowthRatio>,
}

/// Runs `template` at every `n` (ascending) and reports consecutive median
/// ratios; for doubling lists these are `T(2N)/T(N)`.
pub fn scaling_sweep(template: &BenchCase, ns: &[usize]) -> Result<Sweep> {
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sweep N list must be strictly ascending"));
    }
    let mut results = Vec::with_capacity(ns.len());
    for &n in ns {
        let case = BenchCase { n, ..template.clone() };
        results.push(run_bench(&case)?);
    }
    let ratios = growth_ratios(&results);
    Ok(Sweep { results, ratios })
}

pub fn growth_ratios(results: &[BenchResult]) -> Vec<GrowthRatio> {
    results
        .windows(2)
        .map(|w| GrowthRatio {
            n_from: w[0].case.n,
            n_to: w[1].case.n,
            ratio: w[1].timing.median_ns / w[0].timing.median_ns,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProjectionCost {
    pub gqa_inner: f64,
    pub cat_inner: f64,
    pub gqa_flops: f64,
    pub cat_flops: f64,
    pub ratio: f64,
    pub regime: Regime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `2DK > H`: grouped-query projections cost more.
    GqaCostlier,
    Boundary,
    CatCostlier,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::GqaCostlier => "2DK > H: GQA projections cost more",
            Regime::Boundary => "boundary: 2DK = H, equal cost",
            Regime::CatCostlier => "2DK < H: CAT projections cost more",
        })
    }
}

/// Projection FLOPs per layer: GQA `2ND(D + 2DK)`, CAT `2ND(D + H)`.
pub fn projection_cost(n: f64, d: f64, h: f64, k: f64) -> Result<ProjectionCost> {
    if !(n > 0.0 && d > 0.0 && h > 0.0) || !(k > 0.0 && k <= 1.0) {
        return Err(Error::invalid("projection_cost needs positive N, D, H and 0 < K <= 1"));
    }
    let gqa_inner = d + 2.0 * d * k;
    let cat_inner = d + h;
    let two_dk = 2.0 * d * k;
    let regime = if (two_dk - h).abs() <= 1e-12 * h {
        Regime::Boundary
    } else if two_dk > h {
        Regime::GqaCostlier
    } else {
        Regime::CatCostlier
    };
    Ok(ProjectionCost {
        gqa_inner,
        cat_inner,
        gqa_flops: 2.0 * n * d * gqa_inner,
        cat_flops: 2.0 * n * d * cat_inner,
        ratio: gqa_inner / cat_inner,
        regime,
    })
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: String,
    pub path: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub precision: String,
    pub measure: String,
    pub reps: usize,
    pub time_mean_ns: f64,
    pub time_median_ns: f64,
    pub time_min_ns: u64,
    pub peak_scalars: usize,
    pub attn_coeffs: u64,
}

pub const CSV_HEADER: &str = "mechanism,path,N,D,H,precision,measure,reps,time_mean_ns,time_median_ns,time_min_ns,peak_scalars,attn_coeffs";

impl From<&BenchResult> for BenchRow {
    fn from(r: &BenchResult) -> Self {
        Self {
            mechanism: r.case.mechanism.to_string(),
            path: r.case.path.to_string(),
            n: r.case.n,
            d: r.case.d,
            h: r.case.heads,
            precision: r.case.precision.to_string(),
            measure: r.case.measure.to_string(),
            reps: r.case.reps,
            time_mean_ns: r.timing.mean_ns,
            time_median_ns: r.timing.median_ns,
            time_min_ns: r.timing.min_ns,
            peak_scalars: r.peak_scalars,
            attn_coeffs: r.attn_coeffs,
        }
    }
}

pub fn write_csv(results: &[BenchResult], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(CSV_HEADER.split(','))?;
    for r in results {
        w.serialize(BenchRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::invalid(format!("{}: unexpected CSV header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mech: Mechanism, path: ExecPath, n: usize) -> BenchCase {
        BenchCase {
            reps: 3,
            ..BenchCase::new(mech, path, n, 4, 1)
        }
    }

    #[test]
    fn projection_cost_examples() {
        let c = projection_cost(256.0, 1024.0, 16.0, 0.25).unwrap();
        assert_eq!(c.gqa_inner, 1536.0);
        assert_eq!(c.cat_inner, 1040.0);
        assert!((c.ratio - 1536.0 / 1040.0).abs() < 1e-15);
        assert!((c.ratio - 1.477).abs() < 5e-4);
        assert_eq!(c.regime, Regime::GqaCostlier);

        let c = projection_cost(256.0, 1024.0, 16.0, 16.0 / 2048.0).unwrap();
        assert_eq!(c.ratio, 1.0);
        assert_eq!(c.regime, Regime::Boundary);

        let c = projection_cost(10.0, 64.0, 64.0, 0.5).unwrap();
        assert_eq!(c.cat_inner, 128.0);
        assert_eq!(c.gqa_inner, c.cat_inner);

        let a = projection_cost(1.0, 1024.0, 16.0, 0.25).unwrap();
        assert_eq!(a.ratio, projection_cost(4096.0, 1024.0, 16.0, 0.25).unwrap().ratio);
        assert!(projection_cost(1.0, 1.0, 1.0, 0.0).is_err());
        assert!(projection_cost(1.0, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn unsupported_combos() {
        assert!(matches!(
            run_bench(&quick(Mechanism::Attention, ExecPath::Fft, 8)),
            Err(Error::Unsupported(_))
        ));
        let mut c = quick(Mechanism::Cat, ExecPath::Fft, 8);
        c.reps = 2;
        assert!(run_bench(&c).is_err());
    }

    #[test]
    fn memory_audit() {
        let n = 256;
        let explicit = run_bench(&BenchCase {
            d: 1,
            ..quick(Mechanism::Cat, ExecPath::Explicit, n)
        })
        .unwrap();
        assert!(explicit.peak_scalars >= n * n);
        for path in [ExecPath::Fft, ExecPath::Gather] {
            let r = run_bench(&BenchCase {
                d: 1,
                ..quick(Mechanism::Cat, path, n)
            })
            .unwrap();
            assert!(r.largest_alloc < 10 * n, "{path}: {r:?}");
            assert!(r.peak_scalars < n * n);
        }
        let attn = run_bench(&quick(Mechanism::Attention, ExecPath::Explicit, n)).unwrap();
        assert!(attn.largest_alloc >= n * n);
        assert_eq!(attn.attn_coeffs, (n * n) as u64);
    }

    #[test]
    fn backward_costs_more_and_stats_are_ordered() {
        for (mech, path) in [(Mechanism::Cat, ExecPath::Fft), (Mechanism::Attention, ExecPath::Explicit)] {
            let fwd = run_bench(&quick(mech, path, 128)).unwrap();
            let both = run_bench(&BenchCase {
                measure: Measure::ForwardBackward,
                ..quick(mech, path, 128)
            })
            .unwrap();
            assert!(both.timing.median_ns > fwd.timing.median_ns);
            assert!(fwd.timing.min_ns as f64 <= fwd.timing.median_ns);
            assert!(fwd.timing.min_ns as f64 <= fwd.timing.mean_ns);
        }
        let r = run_bench(&BenchCase {
            precision: Precision::F32,
            ..quick(Mechanism::VOnly, ExecPath::Gather, 16)
        })
        .unwrap();
        assert_eq!(r.attn_coeffs, 4 * 16);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        write_csv(&[], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(read_csv(&empty).unwrap().is_empty());

        let sweep = scaling_sweep(&quick(Mechanism::Cat, ExecPath::Gather, 0), &[8, 16, 32]).unwrap();
        assert_eq!(sweep.ratios.len(), 2);
        let path = dir.path().join("b.csv");
        write_csv(&sweep.results, &path).unwrap();
        let rows = read_csv(&path).unwrap();
        let want: Vec<BenchRow> = sweep.results.iter().map(BenchRow::from).collect();
        assert_eq!(rows, want);
        assert!(scaling_sweep(&quick(Mechanism::Cat, ExecPath::Gather, 0), &[16, 8]).is_err());
    }

    #[test]
    fn harness_overhead_is_negligible() {
        let empty = time_fn(10, 1, || {
            std::hint::black_box(0);
        });
        let real = run_bench(&quick(Mechanism::Cat, ExecPath::Fft, 256)).unwrap();
        assert!(empty.median_ns < 0.01 * real.timing.median_ns, "{empty:?} vs {:?}", real.timing);
    }
}

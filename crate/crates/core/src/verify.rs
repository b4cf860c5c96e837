//! Property suites behind `circat verify`.
//!
//! Every check compares the library against an oracle or an identity and
//! reports the worst error seen next to its tolerance. Reports contain no
//! timings, so the same seed gives byte-identical JSON.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::circulant::{
    mix, mix_causal_logits, mix_causal_weights, materialize, CatOptions, ExecPath, Orientation,
};
use crate::error::{Error, Result};
use crate::fft::{circular_convolve, circular_correlate, fft_forward, fft_inverse, plan, ComplexVector};
use crate::gradcheck::{check_gradients, GradCheck};
use crate::model::{causal_targets, example_loss, forward_tape, Example, Input, InputKind, Model, ModelConfig, Objective};
use crate::oracle;
use crate::rng::SeededRng;
use crate::tensor::{max_rel_err, rel_err_slices, Shape, Tensor};
use crate::variants::{mixer_forward, param_count, Mechanism, MixerParams};

/// Sequence lengths used by the circulant checks.
pub const GRID_N: [usize; 13] = [1, 2, 3, 4, 5, 7, 8, 12, 16, 100, 196, 256, 257];
pub const GRID_DH: [usize; 2] = [1, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Fft,
    Circulant,
    Variants,
    Gradients,
    Causal,
    Symmetry,
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["all", "fft", "circulant", "variants", "gradients", "causal", "symmetry"];

    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![
                Suite::Fft,
                Suite::Circulant,
                Suite::Variants,
                Suite::Gradients,
                Suite::Causal,
                Suite::Symmetry,
            ],
            s => vec![s],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(Suite::NAMES[i])
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "fft" => Suite::Fft,
            "circulant" => Suite::Circulant,
            "variants" => Suite::Variants,
            "gradients" => Suite::Gradients,
            "causal" => Suite::Causal,
            "symmetry" => Suite::Symmetry,
            _ => return Err(Error::invalid(format!("unknown suite '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub property: String,
    pub tolerance: f64,
    pub worst_error: f64,
    pub cases: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

struct Recorder {
    suite: Suite,
    checks: Vec<Check>,
}

impl Recorder {
    fn push(&mut self, property: &str, tolerance: f64, errors: impl IntoIterator<Item = f64>) {
        let mut worst = 0.0f64;
        let mut cases = 0;
        let mut nan = false;
        for e in errors {
            nan |= e.is_nan();
            worst = worst.max(e);
            cases += 1;
        }
        self.checks.push(Check {
            suite: self.suite,
            property: property.to_string(),
            tolerance,
            worst_error: worst,
            cases,
            passed: !nan && worst <= tolerance,
        });
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Report> {
    let mut checks = Vec::new();
    for part in suite.parts() {
        let mut rec = Recorder {
            suite: part,
            checks: Vec::new(),
        };
        let mut rng = SeededRng::new(seed ^ (part as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        match part {
            Suite::Fft => fft_suite(&mut rec, &mut rng)?,
            Suite::Circulant => circulant_suite(&mut rec, &mut rng)?,
            Suite::Variants => variants_suite(&mut rec, &mut rng)?,
            Suite::Gradients => gradients_suite(&mut rec, &mut rng)?,
            Suite::Causal => causal_suite(&mut rec, &mut rng)?,
            Suite::Symmetry => symmetry_suite(&mut rec, &mut rng)?,
            Suite::All => unreachable!(),
        }
        checks.extend(rec.checks);
    }
    Ok(Report {
        suite,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn randm(r: usize, c: usize, rng: &mut SeededRng) -> Result<Tensor> {
    Ok(Tensor::randn(Shape::matrix(r, c)?, 1.0, rng))
}

fn randv(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mut w = z.to_vec();
    crate::tensor::softmax_in_place(&mut w);
    w
}

fn complex_rel(a: &ComplexVector<f64>, b: &ComplexVector<f64>) -> f64 {
    let scale = b.norm_sqr().sqrt().max(1e-300);
    let diff: f64 = a
        .re
        .iter()
        .zip(&b.re)
        .chain(a.im.iter().zip(&b.im))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    diff.sqrt() / scale
}

const FFT_LENGTHS: [usize; 14] = [1, 2, 3, 4, 5, 7, 8, 12, 16, 100, 196, 256, 257, 1000];

fn fft_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let mut dft = Vec::new();
    let mut round = Vec::new();
    let mut parseval = Vec::new();
    let mut conv = Vec::new();
    let mut corr = Vec::new();
    for &n in &FFT_LENGTHS {
        let x = ComplexVector::new(randv(n, rng), randv(n, rng))?;
        let p = plan::<f64>(n)?;
        let fx = fft_forward(&p, &x)?;
        if n <= 257 {
            dft.push(complex_rel(&fx, &oracle::naive_dft(&x, false)));
        }
        round.push(complex_rel(&fft_inverse(&p, &fx)?, &x));
        let ex = x.norm_sqr();
        parseval.push((fx.norm_sqr() / n as f64 - ex).abs() / ex);
        let (z, v) = (randv(n, rng), randv(n, rng));
        conv.push(rel_err_slices(&circular_convolve(&z, &v)?, &oracle::circular_convolve_naive(&z, &v), 1e-3));
        corr.push(rel_err_slices(&circular_correlate(&z, &v)?, &oracle::circular_correlate_naive(&z, &v), 1e-3));
    }
    rec.push("forward transform matches the O(L^2) DFT", 1e-10, dft);
    rec.push("inverse(forward(x)) = x", 1e-12, round);
    rec.push("Parseval: sum|X|^2 / L = sum|x|^2", 1e-12, parseval);
    rec.push("convolution theorem: FFT convolution matches direct sum", 1e-10, conv);
    rec.push("FFT correlation matches direct sum", 1e-10, corr);
    Ok(())
}

/// Pairwise path agreement, softmax/circulant commutation, row sums and the
/// causal construction over the full grid.
fn circulant_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let mut paths = Vec::new();
    let mut defn = Vec::new();
    let mut commute = Vec::new();
    let mut rows = Vec::new();
    let mut causal = Vec::new();
    for &n in &GRID_N {
        for &dh in &GRID_DH {
            for o in Orientation::ALL {
                let z = randv(n, rng);
                let w = softmax(&z);
                let v = randm(n, dh, rng)?;
                let outs: Vec<Tensor> = ExecPath::ALL
                    .iter()
                    .map(|&p| mix(&w, &v, o, p))
                    .collect::<Result<_>>()?;
                for a in 0..3 {
                    for b in a + 1..3 {
                        paths.push(max_rel_err(&outs[a], &outs[b], 1e-12));
                    }
                }
                let m = materialize(&w, o)?;
                let by_def = oracle::circulant_by_definition(&w, o == Orientation::RowShift);
                defn.push(m.sub(&by_def)?.max_abs());
                let raw = materialize(&z, o)?;
                commute.push(raw.softmax_rows()?.sub(&m)?.max_abs());
                rows.extend((0..n).map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs()));
                let from_logits = mix_causal_logits(&z, &v, o)?;
                let from_weights = mix_causal_weights(&w, &v, o)?;
                causal.push(from_logits.sub(&from_weights)?.max_abs());
            }
        }
    }
    rec.push("explicit, gather and fft paths agree pairwise (rel)", 1e-8, paths);
    rec.push("materialised matrix follows the index rule exactly", 0.0, defn);
    rec.push("row softmax of raw circulant = circulant of softmax", 1e-10, commute);
    rec.push("circulant maps are row-stochastic", 1e-10, rows);
    rec.push("causal from logits = mask and renormalise", 1e-10, causal);
    Ok(())
}

fn variants_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let mut counts = Vec::new();
    let grid = [(4, 1, 1), (8, 2, 4), (12, 3, 7), (16, 4, 16), (32, 8, 9)];
    for &(d, h, n) in &grid {
        let mut mechs = Mechanism::LAYERS.to_vec();
        mechs.push(Mechanism::Gqa { kv_groups: 1 });
        mechs.push(Mechanism::Gqa { kv_groups: h });
        for m in mechs {
            let p = MixerParams::<Tensor>::init(m, d, h, n, rng)?;
            let want = param_count(m, d as u64, h as u64, n as u64)?;
            counts.push((p.num_scalars() as f64 - want as f64).abs());
        }
    }
    for &(d, h, n) in &[(768u64, 12u64, 196u64), (1024, 16, 256)] {
        let a = param_count(Mechanism::Attention, d, h, n)?;
        let c = param_count(Mechanism::Cat, d, h, n)?;
        let alt = param_count(Mechanism::CatAlter, d, h, n)?;
        counts.push((a as f64 - 3.0 * (d * d) as f64).abs());
        counts.push((c as f64 - ((d + h) * d) as f64).abs());
        counts.push(((a + c) as f64 - 2.0 * alt as f64).abs());
    }
    rec.push("instantiated parameter counts equal the closed forms", 0.0, counts);

    let (n, d, h) = (7, 8, 2);
    let x = randm(n, d, rng)?;
    let p = MixerParams::<Tensor>::init(Mechanism::Cat, d, h, n, rng)?;
    let MixerParams::Cat { heads } = &p else { unreachable!() };
    let mut bits = Vec::new();
    for path in ExecPath::ALL {
        let a = crate::variants::variant_forward(&x, &p, path)?;
        let b = crate::circulant::multihead_cat_forward(&x, heads, path, Orientation::ColShift)?;
        bits.push(if a.data() == b.data() { 0.0 } else { 1.0 });
    }
    rec.push("cat variant is bit-identical to multi-head CAT", 0.0, bits);

    let mut oracle_errs = Vec::new();
    let mut gqa = Vec::new();
    for causal in [false, true] {
        let (n, d, h) = (5, 4, 2);
        let x = randm(n, d, rng)?;
        let (wq, wk, wv) = (randm(d, d, rng)?, randm(d, d, rng)?, randm(d, d, rng)?);
        let got = crate::variants::standard_attention_forward(&x, &wq, &wk, &wv, h, causal)?;
        oracle_errs.push(max_rel_err(&got, &oracle::attention_loops(&x, &wq, &wk, &wv, h, causal), 1e-12));
        let g = MixerParams::Gqa {
            w_q: wq,
            w_k: wk,
            w_v: wv,
            heads: h,
            kv_groups: h,
        };
        let opts = CatOptions {
            causal,
            ..CatOptions::default()
        };
        gqa.push(max_rel_err(&mixer_forward(&x, &g, &opts)?, &got, 1e-12));
    }
    rec.push("attention matches the per-element loop oracle (rel)", 1e-10, oracle_errs);
    rec.push("GQA without reduction equals attention (rel)", 1e-10, gqa);
    Ok(())
}

/// Central differences at step 1e-5 for every mixer and a two-block model.
fn gradients_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let (n, d, h) = (6, 4, 2);
    let mut cases: Vec<(Mechanism, ExecPath)> = ExecPath::ALL.iter().map(|&p| (Mechanism::Cat, p)).collect();
    for m in [Mechanism::Attention, Mechanism::AvgKey, Mechanism::QOnly, Mechanism::VOnly, Mechanism::Gqa { kv_groups: 1 }] {
        cases.push((m, ExecPath::Fft));
    }
    for (m, path) in cases {
        let mut errs = Vec::new();
        for _ in 0..3 {
            let x = randm(n, d, rng)?;
            let p = MixerParams::<Tensor>::init(m, d, h, n, rng)?;
            let mut inputs = vec![x];
            inputs.extend(p.named().iter().map(|(_, t)| (*t).clone()));
            let seed = rng.next_u64();
            let r = check_gradients(
                |t, vars| {
                    let mut it = vars[1..].iter();
                    let params = p.map(|_| *it.next().expect("one var per tensor"));
                    t.mixer(vars[0], &params, &CatOptions::with_path(path))
                },
                &inputs,
                &GradCheck::weighted(seed),
            )?;
            errs.push(r.max_rel_err);
        }
        rec.push(&format!("{m} ({path}) gradients match central differences"), 1e-4, errs);
    }

    let mut errs = Vec::new();
    for (sched, objective) in [
        (vec![Mechanism::Attention, Mechanism::Cat], Objective::MaskedLm),
        (vec![Mechanism::Cat, Mechanism::Attention], Objective::CausalLm),
    ] {
        let mut cfg = ModelConfig::new(sched, d, h, n, objective, InputKind::Tokens { vocab: 5 }, 5);
        cfg.mlp_mult = 2;
        let model = Model::new(cfg.clone(), rng.next_u64())?;
        let tokens: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
        let ex = Example {
            input: Input::Tokens(tokens.clone()),
            targets: causal_targets(&tokens),
        };
        let inputs: Vec<Tensor> = model.params.flat().into_iter().cloned().collect();
        let r = check_gradients(
            |t, vars| {
                let p = model.params.rebuild(vars.iter().copied());
                let logits = forward_tape(t, &cfg, &p, &ex.input, None)?;
                example_loss(t, logits, &ex.targets)
            },
            &inputs,
            &GradCheck::default(),
        )?;
        errs.push(r.max_rel_err);
    }
    rec.push("two-block model gradients match central differences", 1e-4, errs);
    Ok(())
}

/// Perturbs every suffix and measures the largest change in earlier rows.
fn causal_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let (n, d, h) = (8, 4, 2);
    let opts = CatOptions {
        causal: true,
        ..CatOptions::default()
    };
    for m in [Mechanism::Attention, Mechanism::Cat, Mechanism::QOnly, Mechanism::VOnly, Mechanism::Gqa { kv_groups: 1 }] {
        let p = MixerParams::<Tensor>::init(m, d, h, n, rng)?;
        let x = randm(n, d, rng)?;
        let base = mixer_forward(&x, &p, &opts)?;
        let mut errs = Vec::new();
        for j in 1..n {
            let mut data = x.to_vec();
            for v in &mut data[j * d..] {
                *v += rng.normal();
            }
            let out = mixer_forward(&Tensor::matrix(n, d, data)?, &p, &opts)?;
            errs.push(prefix_change(&base, &out, j));
        }
        rec.push(&format!("{m} layer: earlier outputs unchanged by suffix edits"), 0.0, errs);
    }

    let cfg = ModelConfig::new(
        crate::model::build_cat_alter_schedule(3),
        d,
        h,
        n,
        Objective::CausalLm,
        InputKind::Tokens { vocab: 6 },
        6,
    );
    let model = Model::new(cfg, rng.next_u64())?;
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
    let base = model.forward(&Input::Tokens(tokens.clone()))?;
    let mut errs = Vec::new();
    for j in 1..n {
        let mut t = tokens.clone();
        for v in &mut t[j..] {
            *v = (*v + 1 + rng.below(5)) % 6;
        }
        errs.push(prefix_change(&base, &model.forward(&Input::Tokens(t))?, j));
    }
    rec.push("causal model: earlier logits unchanged by suffix edits", 0.0, errs);
    Ok(())
}

fn prefix_change(a: &Tensor, b: &Tensor, rows: usize) -> f64 {
    let c = a.cols();
    a.data()[..rows * c]
        .iter()
        .zip(&b.data()[..rows * c])
        .map(|(x, y)| if x.to_bits() == y.to_bits() { 0.0 } else { (x - y).abs().max(f64::MIN_POSITIVE) })
        .fold(0.0, f64::max)
}

fn symmetry_suite(rec: &mut Recorder, rng: &mut SeededRng) -> Result<()> {
    let mut row = Vec::new();
    let mut col = Vec::new();
    for &n in &[3usize, 8, 12, 100, 257] {
        for s in [1isize, 2, 5] {
            let w = softmax(&randv(n, rng));
            let v = randm(n, 3, rng)?;
            let ws = roll(&w, s);
            let vs = v.roll_rows(s)?;
            for path in ExecPath::ALL {
                let base = mix(&w, &v, Orientation::RowShift, path)?;
                let shifted = mix(&ws, &vs, Orientation::RowShift, path)?;
                row.push(shifted.sub(&base)?.max_abs());
                let base = mix(&w, &v, Orientation::ColShift, path)?;
                let shifted = mix(&ws, &vs, Orientation::ColShift, path)?;
                col.push(shifted.sub(&base.roll_rows(2 * s)?)?.max_abs());
            }
        }
    }
    rec.push("row-shift CAT invariant under joint kernel/value shift", 1e-10, row);
    rec.push("col-shift CAT output rolls by 2s under joint shift", 1e-10, col);

    let (n, d, h) = (9, 6, 3);
    let mut perm_err = Vec::new();
    for _ in 0..5 {
        let p = MixerParams::<Tensor>::init(Mechanism::Attention, d, h, n, rng)?;
        let x = randm(n, d, rng)?;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())?;
        let y = mixer_forward(&x, &p, &CatOptions::default())?;
        let py = mixer_forward(&px, &p, &CatOptions::default())?;
        let want = Tensor::from_rows(&perm.iter().map(|&i| y.row(i).to_vec()).collect::<Vec<_>>())?;
        perm_err.push(py.sub(&want)?.max_abs());
    }
    rec.push("attention without positions is permutation-equivariant", 1e-12, perm_err);
    Ok(())
}

fn roll(w: &[f64], s: isize) -> Vec<f64> {
    let n = w.len() as isize;
    (0..n).map(|i| w[(i - s).rem_euclid(n) as usize]).collect()
}

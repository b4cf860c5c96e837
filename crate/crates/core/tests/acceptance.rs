//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p circat --test acceptance`. The process exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use circat::bench::{projection_cost, run_bench, scaling_sweep, BenchCase, Measure, Regime};
use circat::circulant::{materialize, mix, CatOptions, ExecPath, Orientation};
use circat::gradcheck::{check_gradients, GradCheck};
use circat::maps::{export_maps, is_circulant, Gray};
use circat::model::{
    build_cat_alter_schedule, causal_targets, example_loss, forward_tape, train_toy, Example, Input, InputKind, Model,
    ModelConfig, Objective, TrainConfig,
};
use circat::rng::SeededRng;
use circat::serialize::read_container;
use circat::tensor::max_rel_err;
use circat::variants::{attention_coefficients, mixer_forward, param_count, Mechanism, MixerParams};
use circat::{Result, Shape, Tensor};

const GRID_N: [usize; 13] = [1, 2, 3, 4, 5, 7, 8, 12, 16, 100, 196, 256, 257];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn randm(r: usize, c: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(Shape::matrix(r, c).unwrap(), 1.0, rng)
}

fn randv(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    Tensor::matrix(1, z.len(), z.to_vec()).unwrap().softmax_rows().unwrap().to_vec()
}

fn path_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        for &n in &GRID_N {
            for dh in [1, 4] {
                for o in Orientation::ALL {
                    let w = softmax(&randv(n, &mut rng));
                    let v = randm(n, dh, &mut rng);
                    let outs: Vec<Tensor> = ExecPath::ALL.iter().map(|&p| mix(&w, &v, o, p)).collect::<Result<_>>()?;
                    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                        worst = worst.max(max_rel_err(&outs[a], &outs[b], 1e-12));
                        cases += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 30.0,
        format!("{cases} pairs, worst rel err {worst:.2e} (tol 1e-8), {secs:.2}s (limit 30s)"),
    )
}

fn commutation() -> Result<Outcome> {
    let mut rng = SeededRng::new(1);
    let mut worst = 0.0f64;
    for &n in GRID_N.iter().filter(|&&n| n <= 256) {
        for o in Orientation::ALL {
            let z: Vec<f64> = randv(n, &mut rng).iter().map(|x| 3.0 * x).collect();
            let lhs = materialize(&z, o)?.softmax_rows()?;
            let rhs = materialize(&softmax(&z), o)?;
            worst = worst.max(lhs.sub(&rhs)?.max_abs());
        }
    }
    outcome(worst <= 1e-10, format!("worst elementwise diff {worst:.2e} (tol 1e-10)"))
}

fn row_stochastic() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut rows = 0;
    for seed in 0..5 {
        let mut rng = SeededRng::new(100 + seed);
        for &n in &GRID_N {
            for o in Orientation::ALL {
                let m = materialize(&softmax(&randv(n, &mut rng)), o)?;
                for i in 0..n {
                    worst = worst.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("{rows} rows, worst |sum - 1| {worst:.2e} (tol 1e-10)"))
}

fn gradients() -> Result<Outcome> {
    let (n, d, h) = (8, 8, 2);
    let mut cases: Vec<(Mechanism, ExecPath)> = ExecPath::ALL.iter().map(|&p| (Mechanism::Cat, p)).collect();
    cases.extend([
        (Mechanism::Attention, ExecPath::Explicit),
        (Mechanism::AvgKey, ExecPath::Fft),
        (Mechanism::QOnly, ExecPath::Fft),
        (Mechanism::VOnly, ExecPath::Fft),
        (Mechanism::Gqa { kv_groups: 1 }, ExecPath::Explicit),
    ]);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checks = 0;
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(1000 + seed);
        for &(m, path) in &cases {
            let x = randm(n, d, &mut rng);
            let p = MixerParams::<Tensor>::init(m, d, h, n, &mut rng)?;
            let mut inputs = vec![x];
            inputs.extend(p.named().iter().map(|(_, t)| (*t).clone()));
            let r = check_gradients(
                |t, vars| {
                    let mut it = vars[1..].iter();
                    let params = p.map(|_| *it.next().expect("one var per tensor"));
                    t.mixer(vars[0], &params, &CatOptions::with_path(path))
                },
                &inputs,
                &GradCheck::weighted(rng.next_u64()),
            )?;
            if r.max_rel_err > worst {
                worst = r.max_rel_err;
                worst_at = format!("{m}/{path}");
            }
            checks += 1;
        }
        for schedule in [vec![Mechanism::Cat, Mechanism::Attention], build_cat_alter_schedule(2)] {
            let mut cfg =
                ModelConfig::new(schedule, d, h, n, Objective::CausalLm, InputKind::Tokens { vocab: 6 }, 6);
            cfg.mlp_mult = 2;
            let model = Model::new(cfg.clone(), rng.next_u64())?;
            let tokens: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
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
            if r.max_rel_err > worst {
                worst = r.max_rel_err;
                worst_at = "2-block model".into();
            }
            checks += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{checks} checks over 3 seeds, worst rel err {worst:.2e} at {worst_at} (tol 1e-4, step 1e-5)"),
    )
}

fn closed_form(m: Mechanism, d: u64, h: u64, n: u64) -> u64 {
    match m {
        Mechanism::Attention | Mechanism::AvgKey => 3 * d * d,
        Mechanism::Cat => (d + h) * d,
        Mechanism::QOnly => (n + h) * d,
        Mechanism::VOnly => (n + d) * d,
        Mechanism::Gqa { kv_groups } => d * d + 2 * d * (kv_groups as u64 * d / h),
        Mechanism::CatAlter => (2 * d + h / 2) * d,
    }
}

fn parameter_audit() -> Result<Outcome> {
    let mut rng = SeededRng::new(3);
    let grid = [(768, 12, 196), (1024, 16, 256), (64, 4, 32), (96, 6, 50), (8, 2, 5)];
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for &(d, h, n) in &grid {
        let mut mechs = Mechanism::LAYERS.to_vec();
        mechs.extend([Mechanism::Gqa { kv_groups: 1 }, Mechanism::Gqa { kv_groups: h / 2 }]);
        for m in mechs {
            let built = MixerParams::<Tensor>::init(m, d, h, n, &mut rng)?.num_scalars() as u64;
            let (d, h, n) = (d as u64, h as u64, n as u64);
            let want = closed_form(m, d, h, n);
            if built != want || param_count(m, d, h, n)? != want {
                mismatches.push(format!("{m}@({d},{h},{n})"));
            }
            cases += 1;
        }
        let (d, h, n) = (d as u64, h as u64, n as u64);
        let pair = param_count(Mechanism::Attention, d, h, n)? + param_count(Mechanism::Cat, d, h, n)?;
        if pair != 2 * param_count(Mechanism::CatAlter, d, h, n)? || pair != (4 * d + h) * d {
            mismatches.push(format!("cat_alter pair@({d},{h},{n})"));
        }
        cases += 1;
    }
    outcome(
        mismatches.is_empty(),
        format!("{cases} exact comparisons, mismatches: {mismatches:?}"),
    )
}

fn allocation_audit() -> Result<Outcome> {
    let (d, h) = (64, 4);
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for n in [256, 512, 1024] {
        let nn = n * n;
        for path in [ExecPath::Gather, ExecPath::Fft] {
            for measure in [Measure::Forward, Measure::ForwardBackward] {
                let mut case = BenchCase::new(Mechanism::Cat, path, n, d, h);
                case.reps = 3;
                case.measure = measure;
                let r = run_bench(&case)?;
                if r.largest_alloc >= nn {
                    problems.push(format!("cat/{path}/{measure} N={n} largest {}", r.largest_alloc));
                }
                if r.attn_coeffs != (h * n) as u64 {
                    problems.push(format!("cat N={n} coeffs {}", r.attn_coeffs));
                }
            }
        }
        let mut case = BenchCase::new(Mechanism::Attention, ExecPath::Explicit, n, d, h);
        case.reps = 3;
        let r = run_bench(&case)?;
        if r.largest_alloc < nn {
            problems.push(format!("attention N={n} largest {} < N^2", r.largest_alloc));
        }
        if r.attn_coeffs != (h * nn) as u64 || attention_coefficients(Mechanism::Cat, n as u64, h as u64, d as u64) != (h * n) as u64 {
            problems.push(format!("attention N={n} coeffs {}", r.attn_coeffs));
        }
        summary.push(format!("N={n}: attention largest {} ({}xN^2)", r.largest_alloc, r.largest_alloc / nn));
    }
    outcome(
        problems.is_empty(),
        format!("gather/fft CAT largest alloc < N^2, {}; problems: {problems:?}", summary.join(", ")),
    )
}

fn prefix_unchanged(a: &Tensor, b: &Tensor, rows: usize) -> bool {
    let c = a.cols();
    a.data()[..rows * c].iter().zip(&b.data()[..rows * c]).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn causal() -> Result<Outcome> {
    let (n, d, h) = (10, 8, 2);
    let mut rng = SeededRng::new(5);
    let opts = CatOptions {
        causal: true,
        ..CatOptions::default()
    };
    let mut leaks = Vec::new();
    let mut cases = 0;
    for m in [Mechanism::Attention, Mechanism::Cat, Mechanism::QOnly, Mechanism::VOnly, Mechanism::Gqa { kv_groups: 1 }] {
        let p = MixerParams::<Tensor>::init(m, d, h, n, &mut rng)?;
        let x = randm(n, d, &mut rng);
        let base = mixer_forward(&x, &p, &opts)?;
        for j in 1..n {
            let mut data = x.to_vec();
            for v in &mut data[j * d..] {
                *v += 10.0 * rng.normal();
            }
            let out = mixer_forward(&Tensor::matrix(n, d, data)?, &p, &opts)?;
            if !prefix_unchanged(&base, &out, j) {
                leaks.push(format!("{m} suffix {j}"));
            }
            cases += 1;
        }
    }
    for schedule in [build_cat_alter_schedule(4), vec![Mechanism::Cat; 2]] {
        let cfg = ModelConfig::new(schedule, d, h, n, Objective::CausalLm, InputKind::Tokens { vocab: 7 }, 7);
        let model = Model::new(cfg, rng.next_u64())?;
        let tokens: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
        let base = model.forward(&Input::Tokens(tokens.clone()))?;
        for j in 1..n {
            let mut t = tokens.clone();
            for v in &mut t[j..] {
                *v = (*v + 1 + rng.below(6)) % 7;
            }
            if !prefix_unchanged(&base, &model.forward(&Input::Tokens(t))?, j) {
                leaks.push(format!("model suffix {j}"));
            }
            cases += 1;
        }
    }
    outcome(leaks.is_empty(), format!("{cases} suffix perturbations, bitwise prefix changes: {leaks:?}"))
}

fn shift_symmetry() -> Result<Outcome> {
    let mut rng = SeededRng::new(8);
    let (mut row, mut col) = (0.0f64, 0.0f64);
    for &n in &[1usize, 3, 8, 12, 100, 257] {
        for s in [1isize, 2, 5, -3, 17] {
            let z = randv(n, &mut rng);
            let zs: Vec<f64> = (0..n as isize).map(|i| z[(i - s).rem_euclid(n as isize) as usize]).collect();
            let v = randm(n, 4, &mut rng);
            let vs = v.roll_rows(s)?;
            let (w, ws) = (softmax(&z), softmax(&zs));
            for path in ExecPath::ALL {
                let a = mix(&ws, &vs, Orientation::RowShift, path)?;
                row = row.max(a.sub(&mix(&w, &v, Orientation::RowShift, path)?)?.max_abs());
                let b = mix(&ws, &vs, Orientation::ColShift, path)?;
                col = col.max(b.sub(&mix(&w, &v, Orientation::ColShift, path)?.roll_rows(2 * s)?)?.max_abs());
            }
        }
    }
    // permutation equivariance of attention without positions
    let (n, d, h) = (12, 8, 2);
    let mut perm_worst = 0.0f64;
    for _ in 0..10 {
        let p = MixerParams::<Tensor>::init(Mechanism::Attention, d, h, n, &mut rng)?;
        let x = randm(n, d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
        let y = mixer_forward(&x, &p, &CatOptions::default())?;
        let py = mixer_forward(&permute(&x)?, &p, &CatOptions::default())?;
        perm_worst = perm_worst.max(py.sub(&permute(&y)?)?.max_abs());
    }
    // permuting rows reorders floating-point sums, so "exact" is taken as 1e-12
    outcome(
        row <= 1e-10 && col <= 1e-10 && perm_worst <= 1e-12,
        format!(
            "row-shift invariance {row:.2e}, col-shift 2s roll {col:.2e} (tol 1e-10); S_N equivariance {perm_worst:.2e} (tol 1e-12)"
        ),
    )
}

fn fft_scaling() -> Result<Outcome> {
    let start = Instant::now();
    let mut fft = BenchCase::new(Mechanism::Cat, ExecPath::Fft, 4096, 64, 4);
    fft.reps = 7;
    let fft_sweep = scaling_sweep(&fft, &[4096, 8192, 16384, 32768])?;
    let mut explicit = BenchCase::new(Mechanism::Cat, ExecPath::Explicit, 1024, 64, 4);
    explicit.reps = 5;
    let explicit_sweep = scaling_sweep(&explicit, &[1024, 2048, 4096])?;
    let secs = start.elapsed().as_secs_f64();
    let fmt = |s: &circat::bench::Sweep| {
        s.ratios.iter().map(|g| format!("{}->{}: {:.2}", g.n_from, g.n_to, g.ratio)).collect::<Vec<_>>().join(", ")
    };
    let fft_ok = fft_sweep.ratios.iter().all(|g| g.ratio <= 3.0);
    let explicit_ok = explicit_sweep.ratios.iter().all(|g| g.ratio >= 3.0);
    outcome(
        fft_ok && explicit_ok && secs < 300.0,
        format!(
            "fft [{}] (<= 3.0); explicit [{}] (>= 3.0); {secs:.1}s (limit 300s)",
            fmt(&fft_sweep),
            fmt(&explicit_sweep)
        ),
    )
}

fn cost_model() -> Result<Outcome> {
    let c = projection_cost(256.0, 1024.0, 16.0, 0.25)?;
    let (d, h, k, n) = (1024.0f64, 16.0f64, 0.25f64, 256.0f64);
    let gqa = 2.0 * n * d * (d + 2.0 * d * k);
    let cat = 2.0 * n * d * (d + h);
    let exact = c.gqa_flops == gqa && c.cat_flops == cat && c.ratio == gqa / cat;
    let near = (c.ratio - 1.477).abs() < 5e-4;
    let b = projection_cost(256.0, 1024.0, 16.0, 16.0 / 2048.0)?;
    let boundary = b.ratio == 1.0 && b.regime == Regime::Boundary;
    outcome(
        exact && near && boundary && c.regime == Regime::GqaCostlier,
        format!("ratio {:.6} (closed form {:.6}), boundary ratio {} [{}]", c.ratio, gqa / cat, b.ratio, b.regime),
    )
}

fn toy_training() -> Result<Outcome> {
    let start = Instant::now();
    let threshold = 0.5 * 16f64.ln();
    let mut parts = Vec::new();
    let mut ok = true;
    for mixer in [Mechanism::Attention, Mechanism::Cat, Mechanism::CatAlter] {
        let cfg = TrainConfig {
            mixer,
            ..TrainConfig::default()
        };
        let out = train_toy(&cfg, |_| {})?;
        ok &= out.final_eval_loss < threshold;
        // determinism: a shorter rerun must reproduce the logged curve bit for bit
        let short = TrainConfig {
            steps: 60,
            log_every: 10,
            ..cfg.clone()
        };
        let a = train_toy(&short, |_| {})?;
        let b = train_toy(&short, |_| {})?;
        let same = a.log.len() == b.log.len()
            && a.log.iter().zip(&b.log).all(|(x, y)| x.train_loss.to_bits() == y.train_loss.to_bits())
            && a.final_eval_loss.to_bits() == b.final_eval_loss.to_bits()
            && a.state.model.params.flat().iter().zip(b.state.model.params.flat()).all(|(x, y)| x.data() == y.data());
        ok &= same;
        parts.push(format!("{mixer} {:.3}{}", out.final_eval_loss, if same { "" } else { " (non-deterministic)" }));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    outcome(ok, format!("{} after 2000 steps (< {threshold:.3}); {secs:.1}s (limit 600s)", parts.join(", ")))
}

fn map_export() -> Result<Outcome> {
    let (n, d, h, layers) = (16, 16, 4, 4);
    let cfg = ModelConfig::new(
        build_cat_alter_schedule(layers),
        d,
        h,
        n,
        Objective::MaskedLm,
        InputKind::Tokens { vocab: 9 },
        9,
    );
    let schedule = cfg.schedule.clone();
    let model = Model::new(cfg, 21)?;
    let mut rng = SeededRng::new(4);
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(9)).collect();
    let maps = model.attention_maps(&Input::Tokens(tokens))?;
    let dir = tempfile::tempdir().expect("temporary directory");
    let report = export_maps(&maps, dir.path(), 512)?;
    let raw = read_container(&report.raw)?;
    let mut bad = Vec::new();
    for (l, mech) in schedule.iter().enumerate() {
        for hh in 0..h {
            let name = format!("layer{l}.head{hh}");
            let m = &raw.iter().find(|(k, _)| *k == name).expect("every map is stored").1;
            if *mech == Mechanism::Cat && !is_circulant(m) {
                bad.push(name);
            }
        }
    }
    let mosaic = Gray::decode_pgm(&std::fs::read(&report.mosaic).expect("mosaic was written"))?;
    let dims = (mosaic.width, mosaic.height) == (h * n, layers * n);
    outcome(
        bad.is_empty() && dims && report.files.len() == h * layers,
        format!(
            "{} CAT maps exactly circulant (failures {bad:?}); mosaic {}x{} for {h} heads x {layers} layers of {n}x{n}",
            schedule.iter().filter(|m| **m == Mechanism::Cat).count() * h,
            mosaic.width,
            mosaic.height
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 12] = [
        ("path equivalence", path_equivalence),
        ("softmax-circulant commutation", commutation),
        ("row-stochasticity", row_stochastic),
        ("gradient correctness", gradients),
        ("parameter-count audit", parameter_audit),
        ("attention-coefficient reduction", allocation_audit),
        ("causal correctness", causal),
        ("shift symmetry", shift_symmetry),
        ("fft scaling", fft_scaling),
        ("cost model", cost_model),
        ("toy training", toy_training),
        ("map export", map_export),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

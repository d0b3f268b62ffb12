//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use renyi::autodiff::{Activation, Tape, Tensor, Var};
use renyi::fairtrain::{self, EvalConfig, FairTrainConfig, Metric};
use renyi::harness::{emit_reports, run_experiment, ExperimentConfig, ExperimentReport, RunStatus};
use renyi::linalg::quantile;
use renyi::metrics::{self, HgrNnConfig, DEFAULT_KDE_BINS, DEFAULT_RDC_K, DEFAULT_RDC_S};
use renyi::nn::Mlp;
use renyi::rng::SeededRng;
use renyi::synthetic::{
    gen_arctan, gen_symmetric_bias, oracle_conditional_expectation, oracle_mc_simplified_hgr,
    oracle_simplified_hgr_bounds, ArctanScenarioParams, SymmetricBiasParams,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = (bool, String);

fn normals(n: usize, seed: u64) -> Array1<f64> {
    let mut rng = SeededRng::new(seed);
    Array1::from_shape_simple_fn(n, || rng.normal())
}

fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let a = normals(n, seed);
    let b = normals(n, seed ^ 0x9e37_79b9);
    let v = &a * rho + &b * (1.0 - rho * rho).sqrt();
    (a.insert_axis(Axis(1)), v.insert_axis(Axis(1)))
}

fn column(x: Array1<f64>) -> Array2<f64> {
    x.insert_axis(Axis(1))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn nn_cfg(seed: u64, n: usize) -> HgrNnConfig {
    let base = HgrNnConfig::default().with_seed(seed);
    HgrNnConfig {
        batch_size: base.batch_size.min(n),
        ..base
    }
}

fn hgr_nn(u: ArrayView2<f64>, v: ArrayView2<f64>, seed: u64) -> f64 {
    metrics::hgr_nn(u, v, &nn_cfg(seed, u.nrows())).unwrap().estimate
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", cells.join(", "))
}

// ---------------------------------------------------------------- 1

/// Compares tape gradients of `build` against central differences at
/// `coords` random parameter entries. Returns the worst relative error.
fn grad_check(params: &[Tensor], coords: usize, seed: u64, build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut rng = SeededRng::new(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = (rng.uniform() * params.len() as f64) as usize;
        let (r, c) = (
            (rng.uniform() * params[k].nrows() as f64) as usize,
            (rng.uniform() * params[k].ncols() as f64) as usize,
        );
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        plus[k][[r, c]] += h;
        minus[k][[r, c]] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = grads.get(vars[k]).unwrap()[[r, c]];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

fn random(rng: &mut SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(lo, hi))
}

/// Entries bounded away from zero so ±h never crosses a ReLU kink.
fn off_zero(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || {
        let m = rng.uniform_range(0.05, 2.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let dim = tape.value(out).dim();
    let mut rng = SeededRng::new(seed);
    let w = tape.input(random(&mut rng, dim.0, dim.1, -1.0, 1.0));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn criterion_1() -> Outcome {
    const COORDS: usize = 20;
    let mut rng = SeededRng::new(1);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor>, build: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        results.push((name, grad_check(&params, COORDS, results.len() as u64 + 100, build)));
    };

    check("matmul", vec![random(&mut rng, 5, 3, -1.0, 1.0), random(&mut rng, 3, 4, -1.0, 1.0)], &|t, v| {
        let o = t.matmul(v[0], v[1]).unwrap();
        weighted(t, o, 1)
    });
    check("add_bias", vec![random(&mut rng, 5, 3, -1.0, 1.0), random(&mut rng, 1, 3, -1.0, 1.0)], &|t, v| {
        let o = t.add_bias(v[0], v[1]).unwrap();
        weighted(t, o, 2)
    });
    check("add", vec![random(&mut rng, 4, 3, -1.0, 1.0), random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let o = t.add(v[0], v[1]).unwrap();
        weighted(t, o, 3)
    });
    check("sub", vec![random(&mut rng, 4, 3, -1.0, 1.0), random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let o = t.sub(v[0], v[1]).unwrap();
        weighted(t, o, 4)
    });
    check("mul", vec![random(&mut rng, 4, 3, -1.0, 1.0), random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let o = t.mul(v[0], v[1]).unwrap();
        weighted(t, o, 5)
    });
    check("scale", vec![random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let o = t.scale(v[0], -1.7);
        weighted(t, o, 6)
    });
    for (name, kind) in [
        ("identity", Activation::Identity),
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
        ("softmax_rows", Activation::SoftmaxRows),
    ] {
        check(name, vec![off_zero(&mut rng, 6, 3)], &move |t, v| {
            let o = t.activation(v[0], kind).unwrap();
            weighted(t, o, 7)
        });
    }
    check("standardize", vec![random(&mut rng, 7, 3, -2.0, 2.0)], &|t, v| {
        let o = t.standardize(v[0], 1e-8).unwrap();
        weighted(t, o, 8)
    });
    check("sum", vec![random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.sum(sq)
    });
    check("mean", vec![random(&mut rng, 4, 3, -1.0, 1.0)], &|t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.mean(sq)
    });
    check("concat_cols", vec![random(&mut rng, 5, 2, -1.0, 1.0), random(&mut rng, 5, 3, -1.0, 1.0)], &|t, v| {
        let o = t.concat_cols(v[0], v[1]).unwrap();
        weighted(t, o, 9)
    });
    check("mse", vec![random(&mut rng, 6, 2, -1.0, 1.0), random(&mut rng, 6, 2, -1.0, 1.0)], &|t, v| {
        t.mse(v[0], v[1]).unwrap()
    });
    let labels01 = Array2::from_shape_fn((8, 1), |(i, _)| (i % 2) as f64);
    check("bce", vec![random(&mut rng, 8, 1, 0.1, 0.9)], &|t, v| {
        let target = t.input(labels01.clone());
        t.bce(v[0], target).unwrap()
    });
    let classes = Array2::from_shape_fn((6, 1), |(i, _)| (i % 3) as f64);
    check("cross_entropy", vec![random(&mut rng, 6, 3, 0.1, 0.9)], &|t, v| {
        let labels = t.input(classes.clone());
        t.cross_entropy(v[0], labels).unwrap()
    });
    check("log_mean_exp", vec![random(&mut rng, 6, 2, -2.0, 2.0)], &|t, v| t.log_mean_exp(v[0]));

    // Full 3-layer network through the Mlp binding.
    let mlp = Mlp::new(&"FC:6 T, FC:4 R, FC:1 Sig".parse().unwrap(), 3, 5).unwrap();
    let x = random(&mut rng, 10, 3, -2.0, 2.0);
    let y = Array2::from_shape_fn((10, 1), |(i, _)| (i % 2) as f64);
    let params: Vec<Tensor> = mlp.params().cloned().collect();
    let build = |t: &mut Tape, v: &[Var]| -> Var {
        let mut h = t.input(x.clone());
        for (layer, spec) in mlp.architecture().layers().iter().enumerate() {
            let a = t.matmul(h, v[2 * layer]).unwrap();
            let b = t.add_bias(a, v[2 * layer + 1]).unwrap();
            h = t.activation(b, spec.activation).unwrap();
        }
        let target = t.input(y.clone());
        t.bce(h, target).unwrap()
    };
    let mlp_err = grad_check(&params, COORDS, 999, &build);
    // The hand-unrolled graph must agree with the library's own forward pass.
    let same = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let p = mlp.predict(&x).unwrap();
        let direct = p
            .iter()
            .zip(y.iter())
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / p.len() as f64;
        (tape.scalar(loss) - direct).abs() < 1e-12
    };
    results.push(("mlp_3_layer", mlp_err));

    let worst = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = same && results.iter().all(|(_, e)| *e < 1e-5);
    (
        pass,
        format!(
            "{} checks x {COORDS} coordinates, worst relative error {:.2e} ({}), mlp forward consistent: {same}",
            results.len(),
            worst.1,
            worst.0
        ),
    )
}

// ---------------------------------------------------------------- 2

const NULL_SHUFFLES: usize = 100;

fn criterion_2() -> Outcome {
    let n = 5000;
    let seeds = [1u64, 2, 3];
    let mut self_dep = Vec::new();
    let mut indep = Vec::new();
    let mut arctan = Vec::new();
    for &seed in &seeds {
        let x = column(normals(n, seed));
        self_dep.push(hgr_nn(x.view(), x.view(), seed));

        let (a, b) = (column(normals(n, 100 + seed)), column(normals(n, 200 + seed)));
        indep.push(hgr_nn(a.view(), b.view(), seed));

        let (x, y) = gen_arctan(ArctanScenarioParams { mu: 0.0, sigma: 1.0, n, seed: 300 + seed }).unwrap();
        arctan.push(hgr_nn(column(x).view(), column(y).view(), seed));
    }
    let (a, b) = (column(normals(n, 101)), column(normals(n, 201)));
    let null = metrics::permutation_null(a.view(), b.view(), NULL_SHUFFLES, 7, |u, v| {
        Ok(hgr_nn(u, v, 1))
    })
    .unwrap();
    let p99 = quantile(Array1::from(null).view(), 0.99);
    let indep_max = indep.iter().copied().fold(0.0, f64::max);
    let pass = self_dep.iter().all(|&v| v >= 0.95)
        && indep_max <= 0.15
        && indep_max <= p99 + 0.02
        && arctan.iter().all(|&v| v >= 0.90);
    (
        pass,
        format!(
            "self {} (≥0.95), independent {} (≤0.15 and ≤ null p99 {p99:.3} + 0.02 over {NULL_SHUFFLES} shuffles), arctan {} (≥0.90)",
            fmt(&self_dep),
            fmt(&indep),
            fmt(&arctan)
        ),
    )
}

// ---------------------------------------------------------------- 3

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Maximal correlation of a standard bivariate Gaussian discretized on a
/// `bins × bins` grid over [-6, 6]²: the second singular value of
/// `P_ij / sqrt(p_i q_j)`, by power iteration orthogonal to the known top
/// singular vector `sqrt(q)`.
fn discretized_gaussian_oracle(rho: f64, bins: usize) -> f64 {
    let (lo, hi) = (-6.0, 6.0);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let s = (1.0 - rho * rho).sqrt();
    let sub = 16;
    let mut p = Array2::<f64>::zeros((bins, bins));
    for i in 0..bins {
        // Simpson over x in cell i of φ(x)·P(Y ∈ cell j | x).
        let hx = width / sub as f64;
        for k in 0..=sub {
            let x = edges[i] + k as f64 * hx;
            let wk = if k == 0 || k == sub {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let base = wk * hx / 3.0 * normal_pdf(x);
            for j in 0..bins {
                let cond = normal_cdf((edges[j + 1] - rho * x) / s) - normal_cdf((edges[j] - rho * x) / s);
                p[[i, j]] += base * cond;
            }
        }
    }
    let total = p.sum();
    p /= total;
    let pi = p.sum_axis(Axis(1));
    let qj = p.sum_axis(Axis(0));
    let q = Array2::from_shape_fn((bins, bins), |(i, j)| {
        let d = (pi[i] * qj[j]).sqrt();
        if d > 0.0 {
            p[[i, j]] / d
        } else {
            0.0
        }
    });
    let top = qj.mapv(f64::sqrt);
    let mut v = Array1::from_shape_fn(bins, |j| ((j * 7919) % 13) as f64 - 6.0);
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let proj = v.dot(&top);
        v = &v - &(&top * proj);
        let w = q.t().dot(&q.dot(&v));
        let norm = w.dot(&w).sqrt();
        let next = (norm / v.dot(&v).sqrt()).sqrt();
        v = w / norm;
        if (next - sigma).abs() < 1e-14 {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

fn criterion_3() -> Outcome {
    let n = 20000;
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, &rho) in [0.3, 0.7].iter().enumerate() {
        let oracle = discretized_gaussian_oracle(rho, 128);
        let (u, v) = gaussian_pair(n, rho, 40 + k as u64);
        let nn = hgr_nn(u.view(), v.view(), 1);
        let kde = metrics::hgr_kde(u.column(0), v.column(0), DEFAULT_KDE_BINS).unwrap().estimate;
        let rdc = metrics::hgr_rdc(u.view(), v.view(), DEFAULT_RDC_K, DEFAULT_RDC_S, 1).unwrap().estimate;
        let ok_oracle = (oracle - rho).abs() < 0.01;
        let ok = [nn, kde, rdc].iter().all(|e| (e - rho).abs() <= 0.07);
        pass &= ok && ok_oracle;
        parts.push(format!("rho={rho}: oracle {oracle:.4}, nn {nn:.3}, kde {kde:.3}, rdc {rdc:.3}"));
    }
    (pass, format!("{} (each within ±0.07)", parts.join("; ")))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let sizes = [500usize, 2000, 8000];
    let mut medians = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let errs: Vec<f64> = (1..=5u64)
            .map(|seed| {
                let (u, v) = gaussian_pair(n, 0.5, 1000 * k as u64 + seed);
                (hgr_nn(u.view(), v.view(), seed) - 0.5).abs()
            })
            .collect();
        medians.push(median(errs));
    }
    let pass = medians.windows(2).all(|w| w[1] <= w[0]);
    (pass, format!("median |hgr_nn − 0.5| at n={sizes:?}: {} (non-increasing)", fmt(&medians)))
}

// ---------------------------------------------------------------- 5, 6

fn simplified(alpha: f64, n: usize, epochs: usize, seed: u64) -> (f64, Array1<f64>, Array1<f64>) {
    let (x, y) = gen_arctan(ArctanScenarioParams { mu: alpha, sigma: 1.0, n, seed }).unwrap();
    let cfg = HgrNnConfig { epochs, ..nn_cfg(seed, n) };
    let (est, fx) = metrics::hgr_nn_simplified(x.view(), y.view(), &cfg).unwrap();
    (est, fx, x)
}

fn criterion_5() -> Outcome {
    let (_, fx, x) = simplified(1.0, 5000, HgrNnConfig::default().epochs, 5);
    let cond = oracle_conditional_expectation(x.view(), 1.0, 1.0).unwrap();
    let r = metrics::pearson(fx.view(), cond.view()).unwrap().abs();
    (r >= 0.98, format!("|pearson(f(X), E(Y|X))| = {r:.4} (≥0.98)"))
}

fn criterion_6() -> Outcome {
    let n_mc = 100_000;
    let tol = 2.0 / (n_mc as f64).sqrt();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, &alpha) in [0.0, 0.5, 1.0, 2.0, 3.0].iter().enumerate() {
        let (lower, upper) = oracle_simplified_hgr_bounds(alpha);
        // For large α, x = atan(y²) is squeezed against π/2 and f needs a
        // longer fit; the larger sample keeps the α = 0 bias under 0.05.
        let (est, _, _) = simplified(alpha, 50_000, 80, 60 + k as u64);
        let mc = oracle_mc_simplified_hgr(alpha, n_mc, 70 + k as u64).unwrap();
        let ok = est >= lower - 0.05 && est <= upper + 0.05 && mc > lower - tol && mc < upper + tol;
        pass &= ok;
        parts.push(format!("α={alpha}: [{lower:.3}, {upper:.3}] est {est:.3} mc {mc:.4}"));
    }
    (pass, parts.join("; "))
}

// ---------------------------------------------------------------- 7, 8

fn toy_report() -> ExperimentReport {
    let text = "preset = \"toy-unbiased\"\nlambdas = [0.0, 1.0, 13.0]\nseeds = [1, 2, 3, 4, 5]\n";
    let cfg = ExperimentConfig::from_toml_str(text, "acceptance-toy").unwrap();
    run_experiment(&cfg).unwrap()
}

fn toy_metric(report: &ExperimentReport, lambda: f64, seeds: &[u64], pick: fn(&fairtrain::FinalMetrics) -> Option<f64>) -> Vec<f64> {
    report
        .records
        .iter()
        .filter(|r| r.lambda == lambda && seeds.contains(&r.seed) && r.status == RunStatus::Ok)
        .map(|r| pick(r.result.final_metrics.as_ref().unwrap()).unwrap())
        .collect()
}

fn criterion_7(report: &ExperimentReport) -> Outcome {
    let seeds = [1, 2, 3];
    let med = |lambda, pick| median(toy_metric(report, lambda, &seeds, pick));
    let acc0 = med(0.0, |m| m.accuracy);
    let y0 = med(0.0, |m| m.hgr_nn_yhat);
    let z13 = med(13.0, |m| m.hgr_nn_z);
    let y13 = med(13.0, |m| m.hgr_nn_yhat);
    let acc13 = med(13.0, |m| m.accuracy);
    let fq13 = med(13.0, |m| m.fairquant);
    let checks = [
        ("λ=0 accuracy ∈ [0.74, 0.84]", acc0, (0.74..=0.84).contains(&acc0)),
        ("λ=0 hgr(Ŷ,S) ∈ [0.20, 0.45]", y0, (0.20..=0.45).contains(&y0)),
        ("λ=13 hgr(Z,S) ≤ 0.15", z13, z13 <= 0.15),
        ("λ=13 hgr(Ŷ,S) ≤ 0.10", y13, y13 <= 0.10),
        ("λ=13 accuracy ≥ 0.62", acc13, acc13 >= 0.62),
        ("λ=13 fairquant ≤ 0.05", fq13, fq13 <= 0.05),
    ];
    let pass = checks.iter().all(|c| c.2);
    let parts: Vec<String> = checks
        .iter()
        .map(|(name, v, ok)| format!("{name}: {v:.3} {}", if *ok { "ok" } else { "MISS" }))
        .collect();
    (pass, format!("medians over 3 seeds; {}", parts.join("; ")))
}

fn criterion_8(report: &ExperimentReport) -> Outcome {
    let seeds = [1, 2, 3, 4, 5];
    let lambdas = [0.0, 1.0, 13.0];
    let medians: Vec<f64> = lambdas
        .iter()
        .map(|&l| median(toy_metric(report, l, &seeds, |m| m.hgr_nn_yhat)))
        .collect();
    let pass = report.failures() == 0 && medians.windows(2).all(|w| w[1] <= w[0]);
    (pass, format!("median hgr(Ŷ,S) at λ={lambdas:?}: {} (non-increasing)", fmt(&medians)))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let eval = EvalConfig {
        metrics: vec![Metric::HgrNnYhat],
        ..EvalConfig::default()
    };
    let mut parts = Vec::new();
    // First λ of the grid at which both sides hold.
    for lambda in [5.0, 13.0, 25.0] {
        let mut simple = Vec::new();
        let mut fair = Vec::new();
        for seed in 1..=5u64 {
            let data = gen_symmetric_bias(SymmetricBiasParams { n: 10000, seed: 900 + seed });
            let (train, test) = data.split(0.2, seed);
            let cfg = FairTrainConfig {
                lambda,
                epochs: 100,
                batch_size: 512,
                seed,
                ..FairTrainConfig::default()
            };
            let (m, _) = fairtrain::train_simple_adversary(&train, &cfg).unwrap();
            simple.push(fairtrain::evaluate(&m, &test, cfg.loss, &eval, seed).unwrap().hgr_nn_yhat.unwrap());
            let (m, _) = fairtrain::train_fair_prediction(&train, &cfg).unwrap();
            fair.push(fairtrain::evaluate(&m, &test, cfg.loss, &eval, seed).unwrap().hgr_nn_yhat.unwrap());
        }
        let (ms, mf) = (median(simple.clone()), median(fair.clone()));
        parts.push(format!(
            "λ={lambda}: simple adversary {ms:.3} {} (≥0.3), hgr adversary {mf:.3} {} (≤0.15)",
            fmt(&simple),
            fmt(&fair)
        ));
        if ms >= 0.3 && mf <= 0.15 {
            return (true, parts.join("; "));
        }
    }
    (false, format!("median hgr(Ŷ,S) per λ: {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let n = 20000;
    let cfg = EvalConfig::default().mine.with_seed(1);
    let (u, v) = gaussian_pair(n, 0.9, 11);
    let dep = metrics::mine_mi(u.view(), v.view(), &cfg).unwrap().estimate;
    let (a, b) = (column(normals(n, 12)), column(normals(n, 13)));
    let ind = metrics::mine_mi(a.view(), b.view(), &cfg).unwrap().estimate;
    let exact = -0.5 * (1.0 - 0.81f64).ln();
    let pass = (dep - exact).abs() <= 0.15 && ind <= 0.05;
    (pass, format!("ρ=0.9: {dep:.3} nats (closed form {exact:.3} ± 0.15); independent: {ind:.4} nats (≤0.05)"))
}

// ---------------------------------------------------------------- 11

const TINY: &str = r#"
scenario = "toy"
n = 1500
lambdas = [0.0, 2.0]
seeds = [1, 2, 3]

[train]
epochs = 3
batch_size = 256
adversary_f_arch = "FC:16 R, FC:1"
adversary_g_arch = "FC:16 R, FC:1"

[eval.hgr]
epochs = 3
batch_size = 128

[eval.mine]
epochs = 3
batch_size = 128
"#;

fn criterion_11() -> Outcome {
    let cfg = ExperimentConfig::from_toml_str(TINY, "acceptance-determinism").unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        emit_reports(&run_experiment(&cfg).unwrap(), dir.path()).unwrap();
    }
    let read = |k: usize, name: &str| fs::read(dirs[k].path().join(name)).unwrap();
    let identical = read(0, "runs.csv") == read(1, "runs.csv") && read(0, "summary.json") == read(1, "summary.json");

    // Recompute per-λ mean and sample std from runs.csv alone.
    let runs = read(0, "runs.csv");
    let mut reader = csv::Reader::from_reader(&runs[..]);
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        if &rec[col("status")] != "ok" {
            continue;
        }
        for key in fairtrain::FinalMetrics::KEYS {
            let cell = &rec[col(key)];
            if !cell.is_empty() {
                values
                    .entry((rec[col("lambda")].to_string(), key.to_string()))
                    .or_default()
                    .push(cell.parse().unwrap());
            }
        }
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(0, "summary.json")).unwrap();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut complete = true;
    for agg in summary["aggregates"].as_array().unwrap() {
        let lambda = renyi::harness::format_g6(agg["lambda"].as_f64().unwrap());
        for key in fairtrain::FinalMetrics::KEYS {
            let stat = &agg["metrics"][key];
            match values.get(&(lambda.clone(), key.to_string())) {
                None => complete &= stat.is_null(),
                Some(v) => {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                    worst = worst.max((mean - stat["mean"].as_f64().unwrap()).abs());
                    worst = worst.max((std - stat["std"].as_f64().unwrap()).abs());
                    compared += 1;
                }
            }
        }
    }
    let pass = identical && complete && compared > 0 && worst <= 1e-9;
    (
        pass,
        format!("byte-identical reports: {identical}; {compared} aggregates recomputed, max deviation {worst:.1e} (≤1e-9)"),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut toy: Option<ExperimentReport> = None;

    let names = [
        "gradient correctness",
        "estimator sanity",
        "gaussian oracle agreement",
        "consistency in n",
        "simplified estimator recovers E(Y|X)",
        "simplified estimator bounds",
        "toy scenario reproduction",
        "monotone fairness knob",
        "simple adversary contrast",
        "mine sanity",
        "determinism and reporting",
    ];
    let mut failed = 0;
    let start_all = Instant::now();
    for (i, name) in names.iter().enumerate() {
        let k = i + 1;
        if !wanted(k) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 | 8 => {
                let report = toy.get_or_insert_with(toy_report);
                if k == 7 {
                    criterion_7(report)
                } else {
                    criterion_8(report)
                }
            }
            9 => criterion_9(),
            10 => criterion_10(),
            _ => criterion_11(),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {k:>2} {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed, total {:.1}s", start_all.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

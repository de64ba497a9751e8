//! Acceptance run: one PASS/FAIL line per criterion, each with its wall-clock
//! budget. Criteria 1 and 5 do not hold as stated (see README, "Acceptance");
//! they are reported as FAIL and the process only exits nonzero when a
//! verdict differs from that expectation.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedgain_core::data::Purpose;
use fedgain_core::experiment::{
    default_lambda_grid, gain_compare, log_grid, matched_budgets, policy_sweep, random_diagonal_problem,
    reference_problem, run_stats,
};
use fedgain_core::regression::{objective, stochastic_gradient, true_gradient};
use fedgain_core::sim::RunConfig;
use fedgain_core::stats::{mean, spearman, standard_error};
use fedgain_core::theory::{
    appendix_discrete, verify_appendix_inequality, verify_theorem1, verify_theorem2_ensemble, GainSource, VerifyOptions,
};
use fedgain_core::{
    draw_batch, exact_gain, replay_check, run, GradientMode, PolicyKind, ProblemSpec, RngStream, StreamConfig,
    WeightVector,
};

/// Criteria whose statement is contradicted by the model itself.
const EXPECTED_FAIL: &[usize] = &[1, 5];

type Criterion = (usize, &'static str, u64, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn reference(policy: PolicyKind, eps: f64, batch: usize, k: usize, seed: u64) -> RunConfig {
    let stream = StreamConfig::new(reference_problem(1.0).unwrap(), batch, 2, seed).unwrap();
    RunConfig::new(stream, policy, eps, k, WeightVector::zeros(2)).unwrap()
}

fn excess_ratio_error(path: &[f64], jstar: f64, rho: f64) -> f64 {
    let e0 = path[0] - jstar;
    path.iter()
        .enumerate()
        .map(|(k, j)| {
            let want = rho.powi(k as i32) * e0;
            ((j - jstar) - want).abs() / want
        })
        .fold(0.0, f64::max)
}

fn c1_exact_contraction() -> Verdict {
    let cfg = reference(PolicyKind::Always, 0.1, 5, 50, 0).with_gradient_mode(GradientMode::Exact);
    let jstar = cfg.spec().optimal_objective();
    let path = run(&cfg).unwrap().objective_path();
    let stated = excess_ratio_error(&path, jstar, 0.81);
    // per-eigendirection prediction for w0 = 0: 13.5·0.49^k + 12.5·0.81^k
    let modal = path
        .iter()
        .enumerate()
        .map(|(k, j)| {
            let want = 13.5 * 0.49f64.powi(k as i32) + 12.5 * 0.81f64.powi(k as i32);
            ((j - jstar) - want).abs() / want
        })
        .fold(0.0, f64::max);
    let below = path
        .iter()
        .enumerate()
        .all(|(k, j)| j - jstar <= 0.81f64.powi(k as i32) * (path[0] - jstar) * (1.0 + 1e-12));
    let mut slow = cfg.clone();
    slow.initial_weights = WeightVector(vec![3.0, 0.0]);
    let slow_err = excess_ratio_error(&run(&slow).unwrap().objective_path(), jstar, 0.81);
    Verdict {
        pass: stated <= 1e-9,
        detail: format!(
            "w0=0: max rel dev from 0.81^K law {stated:.3e} (tol 1e-9); modal law dev {modal:.1e}; \
             0.81^K is an upper bound: {below}; slow-eigvector start w0=(3,0) dev {slow_err:.1e}"
        ),
    }
}

fn c2_theorem2() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for &lambda in &[0.1, 0.5, 1.0] {
        let cfg = reference(PolicyKind::OracleGain { lambda }, 0.1, 5, 10, 0);
        let (rep, violations) = verify_theorem2_ensemble(&cfg, 10_000).unwrap();
        // a horizon longer than every bound
        let long = cfg.with_iterations(300);
        let (rep_long, violations_long) = verify_theorem2_ensemble(&long, 1_000).unwrap();
        pass &= violations == 0 && violations_long == 0 && rep.pass && rep_long.pass;
        parts.push(format!(
            "lambda={lambda}: bound {} worst {} viol {violations}/10000, K=300 worst {} viol {violations_long}/1000",
            rep.bound_value, rep.observed_value, rep_long.observed_value
        ));
    }
    Verdict {
        pass,
        detail: parts.join("; "),
    }
}

fn c3_theorem1() -> Verdict {
    let cfg = reference(PolicyKind::OracleGain { lambda: 0.1 }, 0.1, 5, 10, 0);
    let rep = verify_theorem1(&cfg, 10_000, &VerifyOptions::default()).unwrap();
    Verdict {
        pass: rep.pass,
        detail: format!(
            "mean J(w_10) {:.5} (se {:.2e}) vs bound {:.5}",
            rep.observed_value, rep.standard_error, rep.bound_value
        ),
    }
}

fn c4_appendix() -> Verdict {
    let spec = reference_problem(1.0).unwrap();
    let points = [[0.0, 0.0], [1.5, 2.5], [2.0, 1.0], [4.0, 6.0], [3.0, 4.0]];
    let mut passed = 0;
    let mut total = 0;
    let mut estimated_pass = 0;
    let mut worst = f64::INFINITY;
    for (i, w) in points.iter().enumerate() {
        for (j, &lambda) in [0.0, 0.5].iter().enumerate() {
            let seed = 100 + 2 * i as u64 + j as u64;
            let rep = verify_appendix_inequality(&spec, w, 0.1, lambda, 5, 100_000, seed, GainSource::Exact).unwrap();
            let est =
                verify_appendix_inequality(&spec, w, 0.1, lambda, 5, 100_000, seed, GainSource::Estimated).unwrap();
            total += 1;
            passed += rep.pass as usize;
            estimated_pass += est.pass as usize;
            if rep.standard_error > 0.0 {
                worst = worst.min(rep.margin / rep.standard_error);
            }
        }
    }
    // J(w) = ½w², w = 1, ε = 0.5, outcomes g = +1 (p = 0.3) and g = -1:
    // J after the step is 0.125 and 1.125, gains -0.375 and +0.625, so at
    // λ = 0.1 only g = +1 fires. E[αJ] = 0.3·0.125, E[α]E[J] = 0.3·0.825.
    let one = ProblemSpec::diagonal(vec![0.0], &[1.0], 0.0).unwrap();
    let (lhs, rhs) = appendix_discrete(&one, &[1.0], 0.5, 0.1, &[(0.3, vec![1.0]), (0.7, vec![-1.0])]).unwrap();
    let exact = (lhs - 0.0375).abs() <= 1e-15 && (rhs - 0.2475).abs() <= 1e-15;
    Verdict {
        pass: passed == total && total >= 5 && exact,
        detail: format!(
            "{passed}/{total} (w, lambda) points pass at 1e5 samples, tightest margin {worst:.1} se; \
             two-point oracle lhs {lhs} rhs {rhs} exact={exact}; estimated-gain variant (report only) {estimated_pass}/{total}"
        ),
    }
}

fn tradeoff(lambdas: &[f64]) -> (bool, f64, Vec<f64>, Vec<f64>) {
    let base = reference(PolicyKind::EstimatedGain { lambda: 0.1 }, 0.1, 5, 10, 0);
    let stats: Vec<_> = lambdas
        .iter()
        .map(|&l| run_stats(&base.with_policy(PolicyKind::EstimatedGain { lambda: l }), 500, 0).unwrap())
        .collect();
    let comm: Vec<f64> = stats.iter().map(|s| s.mean_comm_total).collect();
    let finals: Vec<f64> = stats.iter().map(|s| s.mean_final_objective).collect();
    let decreasing = comm.windows(2).all(|w| w[1] < w[0]);
    (decreasing, spearman(lambdas, &finals), comm, finals)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn c5_tradeoff() -> Verdict {
    let grid = default_lambda_grid();
    let (dec, rho, comm, finals) = tradeoff(&grid);
    let wide = log_grid(0.3, 30.0, 8);
    let (wdec, wrho, _, _) = tradeoff(&wide);
    Verdict {
        pass: dec && rho >= 0.9,
        detail: format!(
            "grid log[1e-3,1]: comm strictly decreasing={dec} [{}], spearman(lambda, J)={rho:.3} (need >= 0.9), J [{}]; \
             grid log[0.3,30]: decreasing={wdec} spearman={wrho:.3}",
            fmt_list(&comm),
            fmt_list(&finals)
        ),
    }
}

fn c6_agreement() -> Verdict {
    let cfg = reference(PolicyKind::EstimatedGain { lambda: 0.1 }, 0.2, 5, 1, 0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, grid) in [
        ("log[1e-3,1]", default_lambda_grid()),
        ("log[0.3,30]", log_grid(0.3, 30.0, 8)),
    ] {
        let pts = gain_compare(&cfg, &grid, 10_000, 0).unwrap();
        let (lo, at) = pts
            .iter()
            .map(|p| (p.agreement, p.lambda))
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        pass &= pts.iter().all(|p| p.agreement > 0.8);
        parts.push(format!("{name}: min agreement {lo:.4} at lambda={at:.3}"));
    }
    Verdict {
        pass,
        detail: parts.join("; ") + " (need > 0.8 everywhere, 1e4 single steps x 2 agents per lambda)",
    }
}

fn c7_policy_comparison() -> Verdict {
    let spec = random_diagonal_problem(10, 7, 0.1, 9.0, 1.0).unwrap();
    let jstar = spec.optimal_objective();
    let stream = StreamConfig::new(spec, 20, 2, 0).unwrap();
    let base = RunConfig::new(stream, PolicyKind::Always, 0.2, 10, WeightVector::zeros(10)).unwrap();
    let curve = |policies: Vec<PolicyKind>| -> Vec<(f64, f64)> {
        policy_sweep(&base, &policies, 500, 0)
            .unwrap()
            .iter()
            .map(|(_, s)| (s.mean_comm_total, s.mean_final_objective - jstar))
            .collect()
    };
    let est = curve(
        log_grid(0.3, 30.0, 8)
            .into_iter()
            .map(|lambda| PolicyKind::EstimatedGain { lambda })
            .collect(),
    );
    let gn = curve(
        log_grid(1.0, 1000.0, 8)
            .into_iter()
            .map(|mu| PolicyKind::GradNorm { mu })
            .collect(),
    );
    let matched = matched_budgets(&est, &gn, 10).unwrap();
    let no_worse = matched.iter().all(|m| m.first <= m.second);
    let better = matched.iter().filter(|m| m.relative_gain() >= 0.05).count();
    let min_gain = matched.iter().map(|m| m.relative_gain()).fold(f64::INFINITY, f64::min);
    Verdict {
        pass: no_worse && 2 * better >= matched.len(),
        detail: format!(
            "{} matched budgets over [{:.3}, {:.3}] transmissions: no worse at all={no_worse}, \
             >=5% lower excess at {better}, smallest relative gain {min_gain:.3}",
            matched.len(),
            matched[0].budget,
            matched[matched.len() - 1].budget
        ),
    }
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    use rand::RngCore;
    lo + (hi - lo) * (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn c8_estimators() -> Verdict {
    let mut rng = RngStream::keyed(8, 0, 0, Purpose::Problem);
    let mut gain_err = 0.0f64;
    for i in 0..10_000u64 {
        let dim = 1 + (i % 10) as usize;
        let spec = random_diagonal_problem(dim, i, 0.1, 9.0, 1.0).unwrap();
        let w: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -5.0, 5.0)).collect();
        let g: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -5.0, 5.0)).collect();
        let eps = uniform(&mut rng, 0.0, 2.0 / spec.lambda_max());
        let gain = exact_gain(&spec, &w, &g, eps).unwrap();
        let diff = objective(&spec, &WeightVector(w.clone()).stepped(eps, &g)).unwrap() - objective(&spec, &w).unwrap();
        gain_err = gain_err.max((gain - diff).abs());
    }

    let mut worst_z = 0.0f64;
    for (spec, w) in [
        (reference_problem(1.0).unwrap(), vec![1.0, -2.0]),
        (random_diagonal_problem(5, 3, 0.1, 9.0, 1.0).unwrap(), vec![0.5; 5]),
    ] {
        let stream = StreamConfig::new(spec.clone(), 5, 1, 77).unwrap();
        let truth = true_gradient(&spec, &w).unwrap();
        let grads: Vec<Vec<f64>> = (0..100_000)
            .map(|it| stochastic_gradient(&draw_batch(&stream, 0, it).unwrap(), &w).unwrap())
            .collect();
        for (d, t) in truth.iter().enumerate() {
            let comp: Vec<f64> = grads.iter().map(|g| g[d]).collect();
            worst_z = worst_z.max((mean(&comp) - t).abs() / standard_error(&comp));
        }
    }

    let mut fd_err = 0.0f64;
    for i in 0..1_000u64 {
        let dim = 1 + (i % 8) as usize;
        let spec = random_diagonal_problem(dim, 5000 + i, 0.1, 9.0, 1.0).unwrap();
        let w: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -5.0, 5.0)).collect();
        let g = true_gradient(&spec, &w).unwrap();
        let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        for d in 0..dim {
            let h = 1e-5;
            let (mut a, mut b) = (w.clone(), w.clone());
            a[d] += h;
            b[d] -= h;
            let fd = (objective(&spec, &a).unwrap() - objective(&spec, &b).unwrap()) / (2.0 * h);
            fd_err = fd_err.max((fd - g[d]).abs() / scale);
        }
    }
    Verdict {
        pass: gain_err <= 1e-12 && worst_z <= 3.0 && fd_err <= 1e-6,
        detail: format!(
            "exact_gain vs objective difference max abs err {gain_err:.2e} over 1e4 inputs (tol 1e-12); \
             gradient mean worst |z| {worst_z:.2} at 1e5 batches (tol 3); finite differences rel err {fd_err:.2e} (tol 1e-6)"
        ),
    }
}

fn fedgain(cmd: &str, cfg: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_fedgain"))
        .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn c9_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let jobs = [
        (
            "run",
            "policy.lambda = 0.5\nrun.seed = 4\n",
            vec!["summary.csv", "trace.log"],
        ),
        (
            "sweep",
            "sweep.policy.lambda = 0.1, 1, 10\ncompare.policy.kind = grad_norm\ncompare.sweep.policy.mu = 5, 50, 500\n\
             experiment.replications = 50\n",
            vec!["sweep.csv", "sweep_runs.csv", "matched.csv"],
        ),
        (
            "gain-compare",
            "run.eps = 0.2\nrun.num_iterations = 1\nexperiment.replications = 200\n",
            vec!["gain_compare.csv"],
        ),
        (
            "verify",
            "policy.kind = oracle_gain\npolicy.lambda = 0.3\nexperiment.replications = 100\nverify.g_samples = 2000\n\
             verify.appendix_samples = 10000\nverify.limsup_iterations = 60\nverify.burn_in = 30\n",
            vec!["verify.csv"],
        ),
    ];
    let mut identical = 0;
    let mut files = 0;
    let mut codes_ok = true;
    for (i, (cmd, body, outputs)) in jobs.iter().enumerate() {
        let cfg = tmp.path().join(format!("{i}.cfg"));
        fs::write(&cfg, body).unwrap();
        let (a, b) = (tmp.path().join(format!("{i}a")), tmp.path().join(format!("{i}b")));
        codes_ok &= fedgain(cmd, &cfg, &a) == 0 && fedgain(cmd, &cfg, &b) == 0;
        for f in outputs {
            files += 1;
            identical += (fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok() && a.join(f).exists()) as usize;
        }
    }
    let policies = [
        PolicyKind::OracleGain { lambda: 0.5 },
        PolicyKind::EstimatedGain { lambda: 0.5 },
        PolicyKind::GradNorm { mu: 10.0 },
        PolicyKind::Always,
        PolicyKind::Never,
        PolicyKind::Random { p: 0.4 },
    ];
    let mut replayed = 0;
    let mut traces = 0;
    for p in policies {
        for seed in 0..100 {
            let cfg = reference(p, 0.1, 5, 10, seed);
            traces += 1;
            replayed += replay_check(&run(&cfg).unwrap(), &cfg) as usize;
        }
    }
    Verdict {
        pass: codes_ok && identical == files && replayed == traces,
        detail: format!(
            "{identical}/{files} CSV/log outputs byte-identical across reruns (exit codes ok={codes_ok}); \
             replay_check {replayed}/{traces} traces over 6 policies"
        ),
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "exact contraction", 1, c1_exact_contraction),
        (2, "theorem 2 almost-sure budget", 60, c2_theorem2),
        (3, "theorem 1 expectation bound", 120, c3_theorem1),
        (4, "appendix inequality", 60, c4_appendix),
        (5, "tradeoff monotonicity", 120, c5_tradeoff),
        (6, "oracle vs estimated agreement", 30, c6_agreement),
        (7, "policy comparison n=10", 300, c7_policy_comparison),
        (8, "estimator identities", 30, c8_estimators),
        (9, "determinism", u64::MAX, c9_determinism),
    ];
    let mut unexpected = Vec::new();
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let pass = v.pass && in_time;
        let budget = if limit == u64::MAX {
            "no limit".to_string()
        } else {
            format!("limit {limit}s")
        };
        println!(
            "criterion {n} [{name}]: {} ({:.2}s, {budget}{}) {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
            v.detail
        );
        if pass == EXPECTED_FAIL.contains(&n) {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("acceptance verdicts differ from the documented expectation for criteria {unexpected:?}");
        std::process::exit(1);
    }
}

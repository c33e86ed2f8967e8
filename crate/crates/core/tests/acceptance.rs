//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in the output.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dfedavgm::engine::{closed_form_bits, Engine};
use dfedavgm::problems::{Logistic, LogisticSpec, Problem, QuadraticSpec};
use dfedavgm::rng::StreamKey;
use dfedavgm::runner::presets::{run_preset, Preset};
use dfedavgm::theory::{self, CommSavingInputs, TheoryConstants, TheoryInputs};
use dfedavgm::topology::{Graph, MixingMatrix};
use dfedavgm::{run_experiment, Algorithm, LocalTrainerConfig, QuantizerSpec, RunConfig, RunOutput};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(cfg: RunConfig, problem: &dyn Problem) -> RunOutput {
    run_experiment(cfg, problem).unwrap_or_else(|e| panic!("run aborted: {}", e.error))
}

fn trainer(eta: f64, theta: f64, k: usize) -> LocalTrainerConfig {
    LocalTrainerConfig::new(eta, theta, k).unwrap()
}

/// Theory constants with `sigma_l` declared by the problem and `sigma_g`, `B`
/// maximized over the points the run visited.
fn measured_constants(problem: &dyn Problem, out: &RunOutput, tr: LocalTrainerConfig, lambda: f64) -> TheoryConstants {
    let declared = problem.declared();
    let mut tracker = out.tracker.clone();
    tracker.observe(problem, &problem.initial_point());
    theory::rate_constants(TheoryInputs {
        local_steps: tr.local_steps,
        eta: tr.eta,
        theta: tr.theta,
        smoothness: declared.smoothness.unwrap(),
        sigma_l: declared.noise_sigma.unwrap(),
        sigma_g: tracker.sigma_g(),
        grad_bound: tracker.grad_bound(),
        lambda,
    })
    .unwrap()
}

fn c1_contraction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::NEG_INFINITY;
    for g in 0..50u64 {
        let m = rng.random_range(4..=64);
        let p = rng.random_range(0.05..0.5);
        let graph = Graph::random_connected(m, p, 1000 + g).unwrap();
        let w = MixingMatrix::metropolis_hastings(&graph).unwrap();
        for pt in w.contraction_check(20) {
            worst = worst.max(pt.op_norm - pt.bound);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs < 10.0, format!("max(||W^k-P|| - lambda^k) = {worst:.3e}, {secs:.2}s"))
}

fn c2_quantizer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Deterministic floor identity.
    let mut floor_bad = 0;
    for _ in 0..100_000 {
        let s = 10f64.powf(rng.random_range(-4.0..0.0));
        let qz = QuantizerSpec::deterministic(s, 16).unwrap();
        let (lo, hi) = qz.range();
        let a = rng.random_range(lo..hi);
        let k = qz.quantize_scalar(a, 0.0).unwrap();
        if !((k as f64) * s <= a && a < ((k + 1) as f64) * s) {
            floor_bad += 1;
        }
    }
    // Stochastic unbiasedness.
    let n = 1_000_000u64;
    let s = 0.25;
    let qz = QuantizerSpec::stochastic(s, 8, 0).unwrap();
    let mut worst_bias = 0.0f64;
    for j in 0..20 {
        let a = -3.0 + 6.0 * (j as f64 + 0.37) / 20.0;
        let key = StreamKey::new(77).child(j);
        let sum: i64 = (0..n).map(|c| qz.quantize_scalar(a, key.uniform(c)).unwrap()).sum();
        let mean = sum as f64 * s / n as f64;
        worst_bias = worst_bias.max((mean - a).abs() / (4.0 * s / (n as f64).sqrt()));
    }
    // Mean squared error at d = 1000.
    let d = 1000;
    let s = 0.01;
    let qz = QuantizerSpec::stochastic(s, 12, 5).unwrap();
    let mut det_err = 0.0;
    let mut sto_err = 0.0;
    let det = QuantizerSpec::deterministic(s, 12).unwrap();
    for v in 0..1000u64 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let qx = qz.quantize_with_key(&x, StreamKey::new(v)).unwrap().dequantize();
        sto_err += x.iter().zip(qx.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let qd = det.quantize_with_key(&x, StreamKey::new(v)).unwrap().dequantize();
        det_err += x.iter().zip(qd.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let limit = d as f64 * s * s / 4.0;
    let sto_ratio = sto_err / 1000.0 / limit;
    let det_ratio = det_err / 1000.0 / limit;
    let secs = start.elapsed().as_secs_f64();
    let pass = floor_bad == 0 && worst_bias <= 1.0 && sto_ratio <= 1.05 && secs < 30.0;
    outcome(
        pass,
        format!(
            "floor violations {floor_bad}/100000, max |mean-a|/(4s/sqrt N) = {worst_bias:.3}, \
             stochastic E||Q(x)-x||^2/(ds^2/4) = {sto_ratio:.4} (deterministic floor: {det_ratio:.4}), {secs:.2}s"
        ),
    )
}

fn c3_reductions() -> Outcome {
    let start = Instant::now();
    let problem = Logistic::generate(&LogisticSpec::new(8, 12, 40, 3)).unwrap();
    let ring = MixingMatrix::metropolis_hastings(&Graph::ring(8).unwrap()).unwrap();
    let t = 200;
    let dsgd = run(RunConfig::new(Algorithm::Dsgd, t, trainer(0.3, 0.0, 1), 9).with_mixing(ring.clone()), &problem);
    let dfed = run(RunConfig::new(Algorithm::Dfedavgm, t, trainer(0.3, 0.0, 1), 9).with_mixing(ring), &problem);
    let tr = trainer(0.2, 0.9, 4);
    let fedavg = run(RunConfig::new(Algorithm::Fedavg, t, tr, 10), &problem);
    let avg = run(RunConfig::new(Algorithm::Dfedavgm, t, tr, 10).with_mixing(MixingMatrix::averaging(8).unwrap()), &problem);
    let same_models = |a: &RunOutput, b: &RunOutput| {
        a.final_models.iter().zip(&b.final_models).all(|(x, y)| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
    };
    let same_records = |a: &RunOutput, b: &RunOutput| {
        a.records.iter().zip(&b.records).all(|(x, y)| {
            x.f_avg.to_bits() == y.f_avg.to_bits()
                && x.grad_norm_sq.to_bits() == y.grad_norm_sq.to_bits()
                && x.consensus.to_bits() == y.consensus.to_bits()
        })
    };
    let r1 = same_models(&dsgd, &dfed) && same_records(&dsgd, &dfed);
    let r2 = same_models(&fedavg, &avg) && same_records(&fedavg, &avg);
    let secs = start.elapsed().as_secs_f64();
    outcome(r1 && r2 && secs < 20.0, format!("DSGD == DFedAvgM(K=1,theta=0): {r1}; FedAvg == DFedAvgM(W=P): {r2}; {secs:.2}s"))
}

fn c4_small_step() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { heterogeneity: 0.5, noise_sigma: 0.5, ..QuadraticSpec::new(8, 10, 4) });
    let tr = trainer(2e-4, 0.5, 2);
    let qz = QuantizerSpec::stochastic(1e-12, 32, 1).unwrap();
    let mut plain = Engine::new(RunConfig::new(Algorithm::Dfedavgm, 100, tr, 5).with_mixing(w.clone()), &problem).unwrap();
    let mut quant = Engine::new(
        RunConfig::new(Algorithm::DfedavgmQuantized, 100, tr, 5).with_mixing(w).with_quantizer(qz),
        &problem,
    )
    .unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        plain.step().unwrap();
        quant.step().unwrap();
        for (a, b) in plain.states().iter().zip(quant.states()) {
            worst = worst.max(a.x.dist_sq(&b.x).sqrt());
        }
    }
    outcome(worst <= 1e-6, format!("max per-round ||x_q(i) - x(i)|| = {worst:.3e} over 100 rounds"))
}

fn steady_consensus(problem: &dyn Problem, w: &MixingMatrix, tr: LocalTrainerConfig, t: u64, seed: u64) -> (f64, RunOutput) {
    let out = run(RunConfig::new(Algorithm::Dfedavgm, t, tr, seed).with_mixing(w.clone()).tracking_constants(), problem);
    let tail: Vec<f64> = out.records.iter().filter(|r| r.t > t / 2).map(|r| r.consensus).collect();
    (mean(&tail), out)
}

fn c5_consensus_scaling() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { heterogeneity: 0.5, noise_sigma: 0.5, ..QuadraticSpec::new(8, 10, 5) });
    let lambda = w.spectral_constant();
    let (eta, theta, k, t) = (0.02, 0.5, 2, 2000);
    let mut big = Vec::new();
    let mut small = Vec::new();
    let mut worst_vs_bound = 0.0f64;
    for seed in 0..10 {
        let (c, out) = steady_consensus(&problem, &w, trainer(eta, theta, k), t, seed);
        let bound = measured_constants(&problem, &out, trainer(eta, theta, k), lambda).consensus_bound();
        worst_vs_bound = worst_vs_bound.max(c / bound);
        big.push(c);
        let (c, out) = steady_consensus(&problem, &w, trainer(eta / 2.0, theta, k), t, seed);
        let bound = measured_constants(&problem, &out, trainer(eta / 2.0, theta, k), lambda).consensus_bound();
        worst_vs_bound = worst_vs_bound.max(c / bound);
        small.push(c);
    }
    let ratio = mean(&big) / mean(&small);
    outcome(
        (2.6..=6.0).contains(&ratio) && worst_vs_bound <= 1.0,
        format!("lambda = {lambda:.4}, consensus(eta)/consensus(eta/2) = {ratio:.3}, max measured/bound = {worst_vs_bound:.3e}"),
    )
}

fn c6_nonconvex_bound() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { heterogeneity: 0.5, noise_sigma: 0.5, ..QuadraticSpec::new(8, 10, 6) });
    let lambda = w.spectral_constant();
    let l = problem.declared().smoothness.unwrap();
    let min_f = problem.declared().min_value.unwrap();
    let t = 2000;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for k in [1usize, 5] {
        for theta in [0.0, 0.9] {
            let tr = trainer(1.0 / (100.0 * l * k as f64), theta, k);
            for seed in 0..10 {
                let out = run(RunConfig::new(Algorithm::Dfedavgm, t, tr, seed).with_mixing(w.clone()).tracking_constants(), &problem);
                let c = measured_constants(&problem, &out, tr, lambda);
                assert!(c.eta_le_inv_8lk);
                let bound = theory::nonconvex_bound(&c, out.records[1].f_avg, min_f, t).unwrap();
                let emp = out.records[1..].iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min);
                worst = worst.max(emp / bound);
                cases += 1;
            }
        }
    }
    outcome(worst <= 1.0, format!("{cases} runs, max min_t ||grad f||^2 / bound = {worst:.3e}"))
}

fn final_gap(problem: &dyn Problem, w: &MixingMatrix, tr: LocalTrainerConfig, t: u64, seed: u64) -> (f64, RunOutput) {
    let min_f = problem.declared().min_value.unwrap();
    let out = run(RunConfig::new(Algorithm::Dfedavgm, t, tr, seed).with_mixing(w.clone()).tracking_constants(), problem);
    (out.records.last().unwrap().f_avg - min_f, out)
}

fn c7_pl_trend() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { noise_sigma: 1.0, offset: 0.0, ..QuadraticSpec::new(8, 10, 7) });
    let lambda = w.spectral_constant();
    let nu = problem.declared().pl.unwrap();
    let min_f = problem.declared().min_value.unwrap();
    let f_x0 = problem.loss(&problem.initial_point());
    let (k, theta, t) = (2usize, 0.5, 500u64);
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        for (rounds, acc) in [(t, &mut g1), (2 * t, &mut g2)] {
            let eta = theory::optimal_stepsize_pl(nu, k, rounds as f64).unwrap();
            let tr = trainer(eta, theta, k);
            let (gap, out) = final_gap(&problem, &w, tr, rounds, seed);
            let c = measured_constants(&problem, &out, tr, lambda);
            let bound = theory::pl_bound(&c, nu, f_x0, min_f, rounds).unwrap();
            worst = worst.max(gap / bound);
            acc.push(gap);
        }
    }
    let ratio = mean(&g2) / mean(&g1);
    outcome(
        ratio <= 0.75 && worst <= 1.0,
        format!("gap(T)={:.3e}, gap(2T)={:.3e}, ratio = {ratio:.3}, max gap/pl_bound = {worst:.3e}", mean(&g1), mean(&g2)),
    )
}

fn c8_rate_trend() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { heterogeneity: 0.3, noise_sigma: 1.0, ..QuadraticSpec::new(8, 10, 8) });
    let l = problem.declared().smoothness.unwrap();
    let (k, theta, c, t) = (2usize, 0.5, 1.0, 2000u64);
    let mut m1 = Vec::new();
    let mut m4 = Vec::new();
    for seed in 0..10 {
        for (rounds, acc) in [(t, &mut m1), (4 * t, &mut m4)] {
            let eta = c / (l * k as f64 * (rounds as f64).sqrt());
            let out = run(RunConfig::new(Algorithm::Dfedavgm, rounds, trainer(eta, theta, k), seed).with_mixing(w.clone()), &problem);
            acc.push(out.records[1..].iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min));
        }
    }
    let ratio = mean(&m1) / mean(&m4);
    outcome(
        (1.5..=3.5).contains(&ratio),
        format!("min ||grad||^2: T -> {:.3e}, 4T -> {:.3e}, shrink factor {ratio:.3}", mean(&m1), mean(&m4)),
    )
}

fn c9_bits() -> Outcome {
    let (problem, w) = ring_quadratic(QuadraticSpec { heterogeneity: 0.3, noise_sigma: 0.1, ..QuadraticSpec::new(6, 5, 9) });
    let (d, m, edges, t) = (5u64, 6u64, 6u64, 37u64);
    let qz = QuantizerSpec::stochastic(1e-3, 10, 0).unwrap();
    let mut mismatches = Vec::new();
    for alg in Algorithm::ALL {
        let tr = if alg == Algorithm::Dsgd { trainer(0.05, 0.0, 1) } else { trainer(0.05, 0.3, 3) };
        let mut cfg = RunConfig::new(alg, t, tr, 1);
        if alg.is_decentralized() {
            cfg = cfg.with_mixing(w.clone());
        }
        if alg == Algorithm::DfedavgmQuantized {
            cfg = cfg.with_quantizer(qz);
        }
        let got = run(cfg, &problem).records.last().unwrap().bits_total;
        let want = closed_form_bits(alg, d, m, edges, tr.local_steps as u64, qz.bits, t);
        if got != want {
            mismatches.push(format!("{alg}: {got} != {want}"));
        }
    }
    // One round at d = 10^4 on a logistic instance.
    let big = Logistic::generate(&LogisticSpec::new(4, 10_000, 4, 2)).unwrap();
    let ring4 = MixingMatrix::metropolis_hastings(&Graph::ring(4).unwrap()).unwrap();
    let tr = trainer(0.01, 0.0, 1);
    let qz = QuantizerSpec::stochastic(1e-3, 8, 0).unwrap();
    let qbits = run(RunConfig::new(Algorithm::DfedavgmQuantized, 1, tr, 0).with_mixing(ring4.clone()).with_quantizer(qz), &big)
        .records[1]
        .bits_total;
    let ubits = run(RunConfig::new(Algorithm::Dfedavgm, 1, tr, 0).with_mixing(ring4), &big).records[1].bits_total;
    let ratio = qbits as f64 / ubits as f64;
    outcome(
        mismatches.is_empty() && ratio < 0.26,
        format!("closed-form mismatches: {mismatches:?}; d=1e4, b=8 per-round ratio = {ratio:.5}"),
    )
}

fn c10_algo_compare() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = run_preset(Preset::AlgoCompare, dir.path()).unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let ours = report.entry("dfedavgm", seed).and_then(|e| e.bits_to_target);
        let fed = report.entry("fedavg", seed).and_then(|e| e.bits_to_target);
        if let (Some(a), Some(b)) = (ours, fed) {
            if a < b {
                wins += 1;
            }
        }
        lines.push(format!("seed {seed}: {ours:?} vs {fed:?}"));
    }
    outcome(wins == 3, format!("bits to gap {:.3e}, DFedAvgM vs FedAvg: {}", report.target_gap, lines.join("; ")))
}

fn c11_transcription() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut flips = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=10usize);
        let l = rng.random_range(0.1..10.0);
        let theta = rng.random_range(0.0..0.95);
        let eta = rng.random_range(0.01..1.0) / (200.0 * l * k as f64);
        let (sl, sg, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let lambda = rng.random_range(0.0..0.99);
        let c = theory::rate_constants(TheoryInputs {
            local_steps: k,
            eta,
            theta,
            smoothness: l,
            sigma_l: sl,
            sigma_g: sg,
            grad_bound: b,
            lambda,
        })
        .unwrap();
        let e = exact_constants(k, eta, theta, l, sl, sg, b, lambda);
        for (got, want) in [(c.gamma, &e.gamma), (c.alpha, &e.alpha), (c.beta, &e.beta), (c.c1, &e.c1), (c.c2, &e.c2)] {
            worst = worst.max(rel_err(got, want));
        }
        let (f1, min_f) = (rng.random_range(0.0..5.0), rng.random_range(-1.0..0.0));
        let t = rng.random_range(1..200u64);
        let got = theory::nonconvex_bound(&c, f1, min_f, t).unwrap();
        worst = worst.max(rel_err(got, &exact_nonconvex_bound(&e, f1, min_f, t)));
        let nu = rng.random_range(0.01..1.0) / c.gamma;
        let t = rng.random_range(0..60u32);
        let got = theory::pl_bound(&c, nu, f1, min_f, t as u64).unwrap();
        worst = worst.max(rel_err(got, &exact_pl_bound(&e, nu, f1, min_f, t)));
        let d = rng.random_range(1..100_000usize);
        let bits = rng.random_range(1..=32u32);
        let s = 10f64.powf(rng.random_range(-6.0..0.0));
        let gap = rng.random_range(0.0..10.0);
        let eps = rng.random_range(0.0..10.0);
        let cs = theory::comm_saving_check(CommSavingInputs {
            bits,
            dim: d,
            epsilon: eps,
            theta,
            smoothness: l,
            grad_bound: b,
            step: s,
            sigma_l: sl,
            sigma_g: sg,
            local_steps: k,
            initial_gap: gap,
        });
        worst = worst.max(floor_rel_err(cs.epsilon_floor, &exact_floor_pow4(d, theta, l, b, s, sl, sg, k, gap)));
        if cs.bits_ok != exact_bits_ok(bits, d) {
            flips += 1;
        }
    }
    outcome(worst <= 1e-12 && flips == 0, format!("max relative error {worst:.3e} over 100 tuples, bit-condition disagreements {flips}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("mixing-matrix contraction", c1_contraction),
        ("quantizer contracts", c2_quantizer),
        ("reduction oracles", c3_reductions),
        ("quantized to unquantized consistency", c4_small_step),
        ("consensus scaling with eta", c5_consensus_scaling),
        ("nonconvex bound end to end", c6_nonconvex_bound),
        ("PL stepsize trend", c7_pl_trend),
        ("1/sqrt(T) rate trend", c8_rate_trend),
        ("communication accounting", c9_bits),
        ("algo_compare bits to target", c10_algo_compare),
        ("formula transcription", c11_transcription),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}: {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {label} | {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

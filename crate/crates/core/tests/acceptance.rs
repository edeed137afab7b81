//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use eisopt::design::{run_reduced, AdjustmentTrace, DesignConfig};
use eisopt::estimation::{estimate, monte_carlo, FitOptions};
use eisopt::frequency::time_fraction;
use eisopt::measurement::noiseless;
use eisopt::params::*;
use eisopt::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn full_decade() -> FrequencyGrid {
    FrequencyGrid::decade_spaced(1e4, 0.01, 10).unwrap()
}

fn ratios(state: CellState, threshold: f64, ppd: u32) -> [f64; N_PARAMS] {
    let theta = state.parameters();
    let err = ErrorStructure::default();
    let base = crlb(&fisher(&theta, &full_decade(), &err, true)).unwrap();
    let red = full_decade().reduce_ppd(threshold, ppd).unwrap();
    let c = crlb(&fisher(&theta, &red, &err, true)).unwrap();
    std::array::from_fn(|k| c[k] / base[k])
}

fn within_pp(ratio: f64, target_pct: f64) -> bool {
    (100.0 * (ratio - 1.0) - target_pct).abs() <= 5.0
}

fn c1_grid_and_time() -> Outcome {
    let formula = FrequencyGrid::log_spaced(1e4, 0.01, 10).unwrap();
    let decade = full_decade();
    let n_ok = formula.len() == 61;
    let lowest = time_fraction(&formula, 0.01, 0.1);
    let next = time_fraction(&formula, 0.1, 1.0);
    let split_ok = (lowest - 0.90).abs() <= 0.01 && (next - 0.09).abs() <= 0.01;
    let t_formula = total_time(&formula, 5).unwrap() / 60.0;
    let t_decade = total_time(&decade, 5).unwrap() / 60.0;
    let t_ok = (t_formula - 40.5176).abs() < 1e-3 && (t_decade - 36.9).abs() < 0.05;
    outcome(
        n_ok && split_ok && t_ok,
        format!(
            "N = {}, lowest decade {:.3}, next {:.3}, t_tot {:.3} min (formula grid, authoritative); \
             {:.3} min on the {}-point decade-inclusive grid matches the quoted 36.9",
            formula.len(),
            lowest,
            next,
            t_formula,
            t_decade,
            decade.len()
        ),
    )
}

fn hf_max(r: &[f64; N_PARAMS]) -> f64 {
    [R_S, Q_HF, PHI_HF].iter().map(|&k| r[k] - 1.0).fold(f64::NEG_INFINITY, f64::max)
}

fn c2_state_a_case_i() -> Outcome {
    let r = ratios(CellState::StateA, 0.1, 5);
    let pass = within_pp(r[Q_LF], 49.2) && within_pp(r[PHI_LF], 55.0) && hf_max(&r) < 0.02;
    outcome(
        pass,
        format!(
            "Q_LF {:+.1}% (49.2), phi_LF {:+.1}% (55.0), max HF {:+.2}% (< 2)",
            100.0 * (r[Q_LF] - 1.0),
            100.0 * (r[PHI_LF] - 1.0),
            100.0 * hf_max(&r)
        ),
    )
}

fn c3_state_a_case_ii() -> Outcome {
    let r = ratios(CellState::StateA, 1.0, 5);
    let pass = within_pp(r[Q_LF], 68.1) && within_pp(r[PHI_LF], 67.3) && hf_max(&r) < 0.02;
    outcome(
        pass,
        format!(
            "Q_LF {:+.1}% (68.1), phi_LF {:+.1}% (67.3), max HF {:+.2}%",
            100.0 * (r[Q_LF] - 1.0),
            100.0 * (r[PHI_LF] - 1.0),
            100.0 * hf_max(&r)
        ),
    )
}

fn c4_state_b() -> Outcome {
    let a = ratios(CellState::StateB, 0.1, 5);
    let b = ratios(CellState::StateB, 1.0, 5);
    let pass = within_pp(a[R_2], 8.8) && within_pp(a[PHI_2], 7.5) && within_pp(b[R_2], 32.9) && within_pp(b[PHI_2], 40.7);
    outcome(
        pass,
        format!(
            "case i R_2 {:+.1}% (8.8), phi_2 {:+.1}% (7.5); case ii R_2 {:+.1}% (32.9), phi_2 {:+.1}% (40.7)",
            100.0 * (a[R_2] - 1.0),
            100.0 * (a[PHI_2] - 1.0),
            100.0 * (b[R_2] - 1.0),
            100.0 * (b[PHI_2] - 1.0)
        ),
    )
}

fn perturbed(state: CellState, rng: &mut ChaCha8Rng) -> ParameterVector {
    let mut t = *state.parameters().as_array();
    for k in POSITIVE {
        t[k] *= 10f64.powf(rng.random_range(-0.15..0.15));
    }
    for k in [PHI_HF, PHI_1, PHI_2, PHI_LF] {
        t[k] = (t[k] + rng.random_range(-0.05..0.05)).clamp(-0.99, 0.99);
    }
    ParameterVector::new(t).unwrap()
}

fn c5_monotonicity() -> Outcome {
    let err = ErrorStructure::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ppd_violations = 0;
    let mut add_violations = 0;
    for case in 0..100 {
        let state = if case % 2 == 0 { CellState::StateA } else { CellState::StateB };
        let theta = perturbed(state, &mut rng);
        let spacing = if case % 4 < 2 { Spacing::DecadeInclusive } else { Spacing::Uniform };
        let threshold = [0.1, 1.0, 10.0, 100.0, 1000.0][rng.random_range(0..5)];
        let full = FrequencyGrid::spaced(1e4, 0.01, 10, spacing).unwrap();
        let mut prev: Option<[f64; N_PARAMS]> = None;
        for ppd in (2..=10).rev() {
            let c = crlb(&fisher(&theta, &full.reduce_ppd(threshold, ppd).unwrap(), &err, true)).unwrap();
            if let Some(p) = prev {
                ppd_violations += (0..N_PARAMS).filter(|&k| c[k] < p[k]).count();
            }
            prev = Some(c);
        }

        let n = rng.random_range(25..60);
        let mut freqs: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-2.0..4.0))).collect();
        freqs.sort_by(|a, b| b.total_cmp(a));
        freqs.dedup_by(|a, b| (a.log10() - b.log10()).abs() < 1e-6);
        let grid = FrequencyGrid::from_frequencies(freqs.clone()).unwrap();
        let extra = 10f64.powf(rng.random_range(-2.0..4.0));
        if grid.position(extra).is_some() {
            continue;
        }
        freqs.push(extra);
        freqs.sort_by(|a, b| b.total_cmp(a));
        let bigger = FrequencyGrid::from_frequencies(freqs).unwrap();
        let (Ok(c0), Ok(c1)) = (crlb(&fisher(&theta, &grid, &err, true)), crlb(&fisher(&theta, &bigger, &err, true))) else {
            continue;
        };
        add_violations += (0..N_PARAMS).filter(|&k| c1[k] > c0[k] * (1.0 + 1e-9)).count();
    }
    outcome(
        ppd_violations == 0 && add_violations == 0,
        format!("100 random (theta, spacing, threshold) PPD chains: {ppd_violations} violations; 100 point additions: {add_violations} violations"),
    )
}

fn design_runs(ppd: u32) -> Vec<AdjustmentTrace> {
    let theta = CellState::StateA.parameters();
    let err = ErrorStructure::default();
    let grid = full_decade().reduce_ppd(0.1, ppd).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    Execution::default().map(&seeds, |&s| {
        let cfg = DesignConfig { max_iterations: 60, seed: 1000 + s, ..Default::default() };
        run_reduced(&theta, &grid, &err, s, &cfg).unwrap()
    })
}

fn c6_design_loop(runs: &[(u32, Vec<AdjustmentTrace>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (ppd, traces) in runs {
        let crossed = traces.iter().filter(|t| t.records.iter().any(|r| r.normalized_volume < 1.0)).count();
        let monotone = traces.iter().all(|t| {
            t.records.iter().all(|r| r.adjustment.is_none_or(|a| a.lambda_after >= a.lambda_before))
        });
        pass &= crossed >= 8 && monotone;
        parts.push(format!("PPD {ppd}: {crossed}/10 below 1 p.u., lambda_min monotone {monotone}"));
    }
    outcome(pass, parts.join("; "))
}

fn c7_joint_improvement(traces: &[AdjustmentTrace]) -> Outcome {
    let both = traces
        .iter()
        .filter(|t| {
            let s = t.summary();
            s.delta_volume_pct < 0.0 && s.delta_time_pct < 0.0
        })
        .count();
    let mean_dv = traces.iter().map(|t| t.summary().delta_volume_pct).sum::<f64>() / traces.len() as f64;
    let mean_dt = traces.iter().map(|t| t.summary().delta_time_pct).sum::<f64>() / traces.len() as f64;
    outcome(
        both > traces.len() / 2,
        format!("{both}/10 seeds with dV < 0 and dt < 0 (mean dV {mean_dv:+.1}%, dt {mean_dt:+.1}%)"),
    )
}

fn c8_estimator() -> Outcome {
    let err = ErrorStructure::default();
    let grid = FrequencyGrid::log_spaced(1e4, 0.01, 10).unwrap();
    let mut worst: f64 = 0.0;
    for state in [CellState::StateA, CellState::StateB] {
        let theta = state.parameters();
        for g in [&grid, &full_decade()] {
            let spec = noiseless(&theta, g, &err).unwrap();
            let fit = estimate(&spec, &FitOptions::default()).unwrap();
            worst = worst.max(fit.theta.max_rel_diff(&theta));
        }
    }
    let mc = monte_carlo(&CellState::StateA.parameters(), &grid, &err, 0, 500, Execution::default()).unwrap();
    let m = (mc.replicas - mc.failures) as f64;
    let crit = ChiSquared::new(m - 1.0).unwrap().inverse_cdf(0.01);
    let below: Vec<&str> = (0..N_PARAMS)
        .filter(|&k| (m - 1.0) * mc.variance[k] / mc.crlb[k] < crit)
        .map(|k| PARAM_NAMES[k])
        .collect();
    let min_ratio = (0..N_PARAMS).map(|k| mc.variance[k] / mc.crlb[k]).fold(f64::INFINITY, f64::min);
    outcome(
        worst < 1e-3 && below.is_empty() && mc.failures == 0,
        format!(
            "noiseless max rel error {worst:.1e}; Monte Carlo {} fits, {} failures, min var/CRLB {min_ratio:.3}, rejected {:?}",
            mc.replicas, mc.failures, below
        ),
    )
}

fn model_rho_phi(theta: &ParameterVector, f: f64) -> (f64, f64) {
    let z = ecm_impedance(theta, 2.0 * PI * f).unwrap();
    (z.magnitude(), z.phase())
}

/// `(ρ(a) − ρ(b), φ(a) − φ(b))` where `a` and `b` differ only in parameter `k`.
fn block_difference(a: &ParameterVector, b: &ParameterVector, k: usize, f: f64) -> (f64, f64) {
    let omega = 2.0 * PI * f;
    let (ba, bb) = (circuit::blocks(a, omega).unwrap(), circuit::blocks(b, omega).unwrap());
    let pick = |x: &circuit::Blocks| match k {
        R_S => x.series,
        Q_HF | PHI_HF => x.hf,
        R_1 | Q_1 | PHI_1 => x.zarc1,
        R_2 | Q_2 | PHI_2 => x.zarc2,
        _ => x.lf,
    };
    let d = pick(&ba).0 - pick(&bb).0;
    let (za, zb) = (ba.total().0, bb.total().0);
    let d_rho = (d * (za + zb).conj()).re / (za.norm() + zb.norm());
    let w = d / zb;
    (d_rho, w.im.atan2(1.0 + w.re))
}

fn c9_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_j: f64 = 0.0;
    for i in 0..10 {
        let state = if i % 2 == 0 { CellState::StateA } else { CellState::StateB };
        let theta = perturbed(state, &mut rng);
        let mut freqs: Vec<f64> = (0..20).map(|_| 10f64.powf(rng.random_range(-2.0..4.0))).collect();
        freqs.sort_by(|a, b| b.total_cmp(a));
        let grid = FrequencyGrid::from_frequencies(freqs.clone()).unwrap();
        let j = jacobian(&theta, &grid).unwrap();
        // Fourth-order stencil on block differences: some entries sit nine
        // decades below the magnitude they perturb, so differencing the total
        // impedance would lose them to roundoff.
        for k in 0..N_PARAMS {
            let h = 1e-3 * theta[k].abs();
            let at = |m: f64| theta.with(k, theta[k] + m * h);
            for (n, &f) in freqs.iter().enumerate() {
                let diff = |a: f64, b: f64| block_difference(&at(a), &at(b), k, f);
                let (r1, p1) = diff(1.0, -1.0);
                let (r2, p2) = diff(2.0, -2.0);
                let fd = [(8.0 * r1 - r2) / (12.0 * h), (8.0 * p1 - p2) / (12.0 * h)];
                let an = [j[(n, k)], j[(freqs.len() + n, k)]];
                for c in 0..2 {
                    worst_j = worst_j.max((an[c] - fd[c]).abs() / an[c].abs());
                }
            }
        }
    }

    let theta = CellState::StateA.parameters();
    let err = ErrorStructure::default();
    let grid = FrequencyGrid::log_spaced(1e4, 0.01, 10).unwrap();
    let x0 = theta.to_internal();
    let truth: Vec<(f64, f64)> = grid.frequencies().iter().map(|&f| model_rho_phi(&theta, f)).collect();
    let (s, sp) = (err.rel_sigma(), err.sigma_phase());
    let nll = |x: &[f64; N_PARAMS]| -> f64 {
        let t = ParameterVector::from_internal(x);
        grid.frequencies()
            .iter()
            .zip(&truth)
            .map(|(&f, &(r0, p0))| {
                let (r, p) = model_rho_phi(&t, f);
                let (sr, sr0) = (s * r, s * r0);
                sr.ln() + (sr0 * sr0 + (r - r0).powi(2)) / (2.0 * sr * sr) + (p - p0).powi(2) / (2.0 * sp * sp)
            })
            .sum()
    };
    let h = 1e-4;
    let shifted = |k: usize, dk: f64, l: usize, dl: f64| {
        let mut x = x0;
        x[k] += dk;
        x[l] += dl;
        nll(&x)
    };
    let fim = fisher(&theta, &grid, &err, true).in_coordinates(Coordinates::Log);
    let mut worst_f: f64 = 0.0;
    for k in 0..N_PARAMS {
        for l in k..N_PARAMS {
            let hess = (shifted(k, h, l, h) - shifted(k, h, l, -h) - shifted(k, -h, l, h) + shifted(k, -h, l, -h)) / (4.0 * h * h);
            let scale = (fim[(k, k)] * fim[(l, l)]).sqrt();
            worst_f = worst_f.max((hess - fim[(k, l)]).abs() / scale);
        }
    }
    outcome(
        worst_j < 1e-5 && worst_f < 1e-4,
        format!("Jacobian max rel error {worst_j:.1e} (10 theta x 20 f); FIM vs expected-NLL Hessian max scaled error {worst_f:.1e}"),
    )
}

fn report(n: usize, o: &Outcome, secs: f64) -> bool {
    println!("criterion {n}: {} ({secs:.1} s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let mut all = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    for (n, f) in [
        (1, &c1_grid_and_time as &dyn Fn() -> Outcome),
        (2, &c2_state_a_case_i),
        (3, &c3_state_a_case_ii),
        (4, &c4_state_b),
        (5, &c5_monotonicity),
    ] {
        let (o, s) = timed(f);
        all &= report(n, &o, s);
    }

    let t = Instant::now();
    let runs: Vec<(u32, Vec<AdjustmentTrace>)> = [7, 8, 9].into_iter().map(|p| (p, design_runs(p))).collect();
    let secs = t.elapsed().as_secs_f64();
    all &= report(6, &c6_design_loop(&runs), secs);
    all &= report(7, &c7_joint_improvement(&runs[0].1), 0.0);

    let (o, s) = timed(&c8_estimator);
    all &= report(8, &o, s);
    let (o, s) = timed(&c9_oracles);
    all &= report(9, &o, s);

    if !all {
        std::process::exit(1);
    }
}

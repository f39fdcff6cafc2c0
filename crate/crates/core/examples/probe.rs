//! Scratch timing probe for study-scale fits; not part of the public surface.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use viraldyn_core::bspline::{make_spec, ControlSpacing};
use viraldyn_core::data::ObservationSet;
use viraldyn_core::hiv::{integrate, ConstantParams, EtaFunction, StateVector};
use viraldyn_core::mssb::{run_mssb_with, MssbSettings};
use viraldyn_core::optim::{local_refine, DeConfig, HybridConfig, RefineConfig, ScatterConfig};
use viraldyn_core::param::ParamName;
use viraldyn_core::snls::{
    fit_snls, SnlsProblem, SnlsSettings, SolverSettings, ThetaLayout, ThetaVector, WarmStart,
    PENALTY_FLOOR,
};

fn cosine_eta() -> EtaFunction {
    EtaFunction::callable("forced cosine", (0.0, 20.0), |t| {
        9e-5 * (1.0 - 0.9 * (std::f64::consts::PI * t / 1000.0).cos())
    })
}

fn dataset(n: usize, s1sq: f64, s2sq: f64, seed: u64) -> ObservationSet {
    let times: Vec<f64> = (1..=n).map(|j| 20.0 * j as f64 / n as f64).collect();
    let mut grid = vec![0.0];
    grid.extend(&times);
    let params = ConstantParams::new(36.0, 0.108, 1000.0, 0.5, 3.0).unwrap();
    let sol = integrate(
        StateVector::new(600.0, 30.0, 1e5),
        &params,
        &cosine_eta(),
        &grid,
        0.01,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_t = Normal::new(0.0, s1sq.sqrt()).unwrap();
    let noise_v = Normal::new(0.0, s2sq.sqrt()).unwrap();
    let totals: Vec<f64> = sol.totals()[1..]
        .iter()
        .map(|&y| y + noise_t.sample(&mut rng))
        .collect();
    let viral: Vec<f64> = sol.viral()[1..]
        .iter()
        .map(|&y| y + noise_v.sample(&mut rng))
        .collect();
    ObservationSet::new(times.clone(), totals, times, viral).unwrap()
}

fn heavy_config(seed: u64, pop: usize, gens: usize, epochs: usize) -> HybridConfig {
    HybridConfig {
        de: DeConfig {
            population_size: pop,
            max_generations: gens,
            ..DeConfig::for_dim(8, 0)
        },
        scatter: ScatterConfig {
            elite_count: 10,
            first_population: 40,
            max_passes: 4,
            ..ScatterConfig::for_dim(8, 0)
        },
        refine: RefineConfig {
            max_iterations: 120,
            max_evaluations: 2_500,
            ..RefineConfig::default()
        },
        epochs,
        max_evaluations: 120_000,
        target_value: None,
        seed,
    }
}

fn coldbox_sweep() {
    // Mirrors the cold-box unit test: noiseless spline-truth data, wide box,
    // quick budget, across seeds.
    let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
    let coeffs = vec![5e-5, 1.2e-4, 8e-5];
    let eta = EtaFunction::spline(spec.clone(), coeffs.clone()).unwrap();
    let times: Vec<f64> = (1..=60).map(|j| 20.0 * j as f64 / 60.0).collect();
    let mut grid = vec![0.0];
    grid.extend(&times);
    let params = ConstantParams::new(36.0, 0.108, 1000.0, 0.5, 3.0).unwrap();
    let sol = integrate(StateVector::new(600.0, 30.0, 1e5), &params, &eta, &grid, 0.02).unwrap();
    let obs = ObservationSet::new(
        times.clone(),
        sol.totals()[1..].to_vec(),
        times,
        sol.viral()[1..].to_vec(),
    )
    .unwrap();

    let truth = [36.0, 0.108, 1000.0, 0.5, 3.0];
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for &t in &truth {
        lower.push(t / 3.0);
        upper.push(t * 3.0);
    }
    for _ in 0..3 {
        lower.push(0.0);
        upper.push(5e-4);
    }
    for &t in &[600.0, 30.0, 1e5] {
        lower.push(t / 3.0);
        upper.push(t * 3.0);
    }
    let bounds = viraldyn_core::optim::SearchBox::new(lower, upper).unwrap();

    let arg = |i: usize, d: usize| -> usize {
        std::env::args()
            .nth(i)
            .and_then(|a| a.parse().ok())
            .unwrap_or(d)
    };
    let (pop, gens, epochs) = (arg(2, 24), arg(3, 60), arg(4, 2));
    for seed in 0..10u64 {
        let quick = HybridConfig {
            de: DeConfig {
                population_size: pop,
                max_generations: gens,
                ..DeConfig::for_dim(8, 0)
            },
            scatter: ScatterConfig {
                elite_count: 6,
                first_population: 24,
                max_passes: 2,
                ..ScatterConfig::for_dim(8, 0)
            },
            refine: RefineConfig {
                max_evaluations: 800,
                ..RefineConfig::default()
            },
            epochs,
            max_evaluations: 60_000,
            target_value: Some(1e-10),
            seed: 0,
        };
        let settings = SnlsSettings {
            solver: SolverSettings {
                step: 0.02,
                ..SolverSettings::default()
            },
            optimizer: Some(quick),
            seed,
            fixed: vec![
                (ParamName::TU0, 600.0),
                (ParamName::TI0, 30.0),
                (ParamName::V0, 1e5),
            ],
            ..SnlsSettings::default()
        };
        let t = Instant::now();
        match fit_snls(&obs, &spec, &WarmStart::Bounds(bounds.clone()), &settings) {
            Ok(fit) => println!(
                "seed {seed}: rss {:.3e} evals {} term {:?} {:.2?}",
                fit.rss,
                fit.evaluations,
                fit.termination,
                t.elapsed()
            ),
            Err(e) => println!("seed {seed}: failed: {e}"),
        }
    }
}

fn main() {
    if std::env::args().nth(1).as_deref() == Some("coldbox") {
        coldbox_sweep();
        return;
    }
    let truth = [36.0, 0.108, 1000.0, 0.5, 3.0];
    let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(200);
    let (s1, s2) = if n >= 100 { (20.0, 100.0) } else { (400.0, 2500.0) };
    let runs: usize = std::env::args()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .unwrap_or(3);
    let heavy = std::env::args().nth(3).as_deref() == Some("heavy");

    for run in 0..runs as u64 {
        let obs = dataset(n, s1, s2, 1000 + run);
        let solver = SolverSettings {
            step: 0.05,
            ..SolverSettings::default()
        };

        // Noise floor: the objective at the generating truth, exact rate.
        let layout = ThetaLayout::new(3, true).unwrap();
        let problem = SnlsProblem::new(&obs, spec.clone(), layout, None, solver).unwrap();
        let mut truth_full = truth.to_vec();
        truth_full.extend([9e-6, 9e-6, 9e-6]); // placeholder coefficients; oracle ignores them
        truth_full.extend([600.0, 30.0, 1e5]);
        let floor = problem.try_rss_with_eta(&truth_full, &cosine_eta()).unwrap();

        let t0 = Instant::now();
        let est = match run_mssb_with(&obs, &spec, &MssbSettings::default()) {
            Ok(est) => est,
            Err(e) => {
                println!("run {run}: mssb failed: {e}");
                continue;
            }
        };

        if std::env::args().nth(3).as_deref() == Some("repair") {
            // Repair the warm point before any global search: freeze the
            // stage-two quantities (lambda, rho, c) at their estimates and
            // refine only the ill-determined stage-three block (N, delta,
            // coefficients), then release everything for a full local
            // refine. Measures whether the repaired point lands in the
            // global basin deterministically.
            let bounds = est.search_ranges.to_search_box(true).unwrap();
            let mut warm_point = est.constants.as_array().to_vec();
            warm_point.extend(est.eta_coeffs.clone());
            warm_point.extend([600.0, 30.0, 1e5]);
            let warm_point = bounds.clamp(&warm_point);
            let mut theta = ThetaVector::new(layout, warm_point.clone(), bounds.clone()).unwrap();
            for (name, v) in [
                (ParamName::TU0, 600.0),
                (ParamName::TI0, 30.0),
                (ParamName::V0, 1e5),
                (ParamName::Lambda, warm_point[0]),
                (ParamName::Rho, warm_point[1]),
                (ParamName::Clearance, warm_point[4]),
            ] {
                theta.fix(name, v).unwrap();
            }
            // Refine in log coordinates, mirroring what the fitting pipeline
            // does internally: u = ln(x + shift), shift lifting a zero floor.
            let log_refine = |theta: &ThetaVector, config: &RefineConfig| {
                let free_idx = theta.free_indices();
                let template = theta.values().to_vec();
                let free_box = theta.free_box().unwrap();
                let shifts: Vec<f64> = free_box
                    .lower()
                    .iter()
                    .zip(free_box.upper())
                    .map(|(&lo, &hi)| if lo > 0.0 { 0.0 } else { hi * 1e-3 })
                    .collect();
                let u_box = viraldyn_core::optim::SearchBox::new(
                    free_box
                        .lower()
                        .iter()
                        .zip(&shifts)
                        .map(|(&lo, &s)| (lo + s).ln())
                        .collect(),
                    free_box
                        .upper()
                        .iter()
                        .zip(&shifts)
                        .map(|(&hi, &s)| (hi + s).ln())
                        .collect(),
                )
                .unwrap();
                let to_x = |u: &[f64]| -> Vec<f64> {
                    u.iter()
                        .zip(&shifts)
                        .zip(free_box.lower().iter().zip(free_box.upper()))
                        .map(|((&ui, &s), (&lo, &hi))| (ui.exp() - s).clamp(lo, hi))
                        .collect()
                };
                let objective = |u: &[f64]| {
                    let mut full = template.clone();
                    for (&slot, v) in free_idx.iter().zip(to_x(u)) {
                        full[slot] = v;
                    }
                    problem.penalized_rss(&full, &bounds)
                };
                let u0: Vec<f64> = theta
                    .free_values()
                    .iter()
                    .zip(&shifts)
                    .map(|(&x, &s)| (x + s).ln())
                    .collect();
                let out = local_refine(&objective, &u_box, &u_box.clamp(&u0), config).unwrap();
                (to_x(&out.best_point), out.best_value, out.evaluations)
            };
            let config = RefineConfig {
                max_iterations: 600,
                max_evaluations: 12_000,
                ..RefineConfig::default()
            };
            let t = Instant::now();
            let (repaired_free, rss_a, evals_a) = log_refine(&theta, &config);
            // Release everything except the initial state and refine again.
            let mut repaired = theta.values().to_vec();
            for (&slot, &v) in theta.free_indices().iter().zip(&repaired_free) {
                repaired[slot] = v;
            }
            let mut theta_b = ThetaVector::new(layout, repaired, bounds.clone()).unwrap();
            for (name, v) in [
                (ParamName::TU0, 600.0),
                (ParamName::TI0, 30.0),
                (ParamName::V0, 1e5),
            ] {
                theta_b.fix(name, v).unwrap();
            }
            let (_, rss_b, evals_b) = log_refine(&theta_b, &config);
            println!(
                "run {run}: repair rss {rss_a:.4e} -> full rss {rss_b:.4e} | floor {floor:.4e} | {evals_a} + {evals_b} evals | {:.2?}",
                t.elapsed()
            );
            continue;
        }
        if std::env::args().nth(3).as_deref() == Some("refine") {
            // Polish directly from the warm point and from truth, bypassing
            // the global stages, to see what the local surface allows.
            let bounds = est.search_ranges.to_search_box(true).unwrap();
            let mut warm_point = est.constants.as_array().to_vec();
            warm_point.extend(est.eta_coeffs.clone());
            warm_point.extend([600.0, 30.0, 1e5]);
            let warm_point = bounds.clamp(&warm_point);
            let mut theta = ThetaVector::new(layout, warm_point, bounds.clone()).unwrap();
            for (name, v) in [
                (ParamName::TU0, 600.0),
                (ParamName::TI0, 30.0),
                (ParamName::V0, 1e5),
            ] {
                theta.fix(name, v).unwrap();
            }
            let free_idx = theta.free_indices();
            let template = theta.values().to_vec();
            let objective = |free: &[f64]| {
                let mut full = template.clone();
                for (&slot, &v) in free_idx.iter().zip(free) {
                    full[slot] = v;
                }
                problem.penalized_rss(&full, &bounds)
            };
            let config = RefineConfig {
                max_iterations: 600,
                max_evaluations: 12_000,
                ..RefineConfig::default()
            };
            let free_box = theta.free_box().unwrap();
            let t = Instant::now();
            let from_warm =
                local_refine(&objective, &free_box, &theta.free_values(), &config).unwrap();
            let mut truth_start = truth.to_vec();
            truth_start.extend([9.0e-6, 9.04e-6, 9.16e-6]);
            let truth_free: Vec<f64> = free_idx.iter().map(|&i| truth_start[i]).collect();
            let from_truth =
                local_refine(&objective, &free_box, &free_box.clamp(&truth_free), &config)
                    .unwrap();
            println!(
                "run {run}: refine-from-warm rss {:.4e} ({} evals, {:?}) | refine-from-truth rss {:.4e} ({} evals, {:?}) | floor {floor:.4e} | {:.2?}",
                from_warm.best_value,
                from_warm.evaluations,
                from_warm.termination,
                from_truth.best_value,
                from_truth.evaluations,
                from_truth.termination,
                t.elapsed()
            );
            let _ = PENALTY_FLOOR;
            continue;
        }
        let t_mssb = t0.elapsed();
        let mssb_err: Vec<f64> = est
            .constants
            .as_array()
            .iter()
            .zip(truth)
            .map(|(e, t)| 100.0 * (e - t).abs() / t)
            .collect();
        let fmt_r = |r: &[f64; 2]| format!("[{:.2e}, {:.2e}]", r[0], r[1]);
        println!(
            "run {run}: coeff est {:?} ranges {:?} delta range {} n range {}",
            est.eta_coeffs
                .iter()
                .map(|a| format!("{a:.2e}"))
                .collect::<Vec<_>>(),
            est.search_ranges
                .eta_coeffs
                .iter()
                .map(fmt_r)
                .collect::<Vec<_>>(),
            fmt_r(&est.search_ranges.delta),
            fmt_r(&est.search_ranges.n_virions)
        );

        let t1 = Instant::now();
        let mut settings = SnlsSettings {
            solver,
            seed: 7000 + run,
            fixed: vec![
                (ParamName::TU0, 600.0),
                (ParamName::TI0, 30.0),
                (ParamName::V0, 1e5),
            ],
            ..SnlsSettings::default()
        };
        if heavy {
            let arg = |i: usize, d: usize| -> usize {
                std::env::args()
                    .nth(i)
                    .and_then(|a| a.parse().ok())
                    .unwrap_or(d)
            };
            settings.optimizer = Some(heavy_config(0, arg(4, 48), arg(5, 160), arg(6, 4)));
        }
        if std::env::var("MULTISTART").is_ok() {
            // Emulates independent restarts of the whole global stage: same
            // warm start, different optimizer seeds, keep the best.
            for k in 0..3u64 {
                let mut s = settings.clone();
                s.seed = 7000 + run + 1000 * k;
                let t = Instant::now();
                match fit_snls(&obs, &spec, &WarmStart::Mssb(&est), &s) {
                    Ok(fit) => println!(
                        "  start {k}: rss {:.4e} (floor {floor:.4e}) err% {:.2?} ({} evals, {:.2?})",
                        fit.rss,
                        fit.theta_hat.values()[..5]
                            .iter()
                            .zip(truth)
                            .map(|(e, t)| 100.0 * (e - t).abs() / t)
                            .collect::<Vec<_>>(),
                        fit.evaluations,
                        t.elapsed()
                    ),
                    Err(e) => println!("  start {k}: failed: {e}"),
                }
            }
            continue;
        }
        match fit_snls(&obs, &spec, &WarmStart::Mssb(&est), &settings) {
            Ok(fit) => {
                let t_snls = t1.elapsed();
                let snls_err: Vec<f64> = fit.theta_hat.values()[..5]
                    .iter()
                    .zip(truth)
                    .map(|(e, t)| 100.0 * (e - t).abs() / t)
                    .collect();
                println!(
                    "run {run}: mssb {t_mssb:.2?} snls {t_snls:.2?} ({} evals, term {:?})",
                    fit.evaluations, fit.termination
                );
                println!("  mssb err% {mssb_err:.2?}");
                println!(
                    "  snls err% {snls_err:.2?}  rss {:.4e} (floor {floor:.4e})",
                    fit.rss
                );
                if std::env::var("POLISH").is_ok() && fit.rss > 100.0 * floor {
                    // How far does a huge local polish descend from the
                    // stalled point? Distinguishes a true local minimum from
                    // a slow curved valley the budget gave up on.
                    let bounds = est.search_ranges.to_search_box(true).unwrap();
                    let mut point = fit.theta_hat.values().to_vec();
                    point = bounds.clamp(&point);
                    let mut theta = ThetaVector::new(layout, point, bounds.clone()).unwrap();
                    for (name, v) in [
                        (ParamName::TU0, 600.0),
                        (ParamName::TI0, 30.0),
                        (ParamName::V0, 1e5),
                    ] {
                        theta.fix(name, v).unwrap();
                    }
                    let free_idx = theta.free_indices();
                    let template = theta.values().to_vec();
                    let objective = |free: &[f64]| {
                        let mut full = template.clone();
                        for (&slot, &v) in free_idx.iter().zip(free) {
                            full[slot] = v;
                        }
                        problem.penalized_rss(&full, &bounds)
                    };
                    let config = RefineConfig {
                        max_iterations: 5_000,
                        max_evaluations: 50_000,
                        ..RefineConfig::default()
                    };
                    let free_box = theta.free_box().unwrap();
                    let t = Instant::now();
                    let polished =
                        local_refine(&objective, &free_box, &theta.free_values(), &config)
                            .unwrap();
                    println!(
                        "  big polish: rss {:.4e} ({} evals, {:?}, {:.2?})",
                        polished.best_value,
                        polished.evaluations,
                        polished.termination,
                        t.elapsed()
                    );
                }
            }
            Err(e) => println!("run {run}: snls failed: {e}"),
        }
    }
}

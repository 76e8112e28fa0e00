// Scratch probe: Monte Carlo magnitudes for the fixed instance.
use fastslow::averaged::{
    average_field_auto, cycle_occupation_measure, detect_limit_cycle, find_equilibria,
    Classification, CycleOptions,
};
use fastslow::experiments::{
    closeness_probability, convergence_sweep, exit_time_experiment, ExitSpec, RegimeCase,
    RegimeSpec, SweepOptions,
};
use fastslow::hybrid::{Scheme, SimParams};
use fastslow::models::paper_example_model;
use std::time::Instant;

fn main() {
    let model = paper_example_model();
    let field = average_field_auto(&model).unwrap();
    let eqs = find_equilibria(&field, &[0.0, 0.0], &[6.0, 6.0], 7, 1e-9).unwrap();
    let cycle =
        detect_limit_cycle(&field, &[1.0, 1.0], 300.0, None, &eqs, &CycleOptions::default())
            .unwrap();
    let mu0 = cycle_occupation_measure(&cycle, 4096).unwrap();
    println!("cycle period {:.4}", cycle.period);

    // --- sweep, small seed count to gauge magnitudes/time ---
    let t0 = Instant::now();
    let template = SimParams::new(1.0, 1.0, 1e-4, 200.0, 2024)
        .with_scheme(Scheme::LogEuler)
        .with_burn_in(50.0);
    let regimes = RegimeSpec {
        pairs: vec![(1e-2, 1e-2), (1e-3, 1e-3), (5e-5, 5e-5)],
        case: RegimeCase::Case1,
    };
    let rep = convergence_sweep(
        &model,
        &template,
        &[1.0, 1.0],
        0,
        &regimes,
        3,
        &cycle,
        &mu0,
        &SweepOptions::default(),
    )
    .unwrap();
    for c in &rep.cells {
        println!(
            "sweep ({:.0e},{:.0e}): mean {:.4} sd {:.4} CI [{:.4},{:.4}] x1 {:?}",
            c.eps, c.delta, c.mean_distance, c.sd_distance, c.ci_lo, c.ci_hi, c.functional_x1
        );
    }
    println!("ref x1 {:.4} norm2 {:.4}", rep.reference_x1, rep.reference_norm2);
    println!("sweep 3 seeds x 3 cells: {:?}", t0.elapsed());

    // --- closeness, small N ---
    let t0 = Instant::now();
    let regimes_cl = RegimeSpec {
        pairs: vec![(1e-1, 1e-1), (1e-2, 1e-2), (1e-3, 1e-3)],
        case: RegimeCase::Case1,
    };
    let template_cl = SimParams::new(1.0, 1.0, 1e-4, 10.0, 777).with_scheme(Scheme::LogEuler);
    let rep = closeness_probability(
        &model,
        &template_cl,
        &[1.0, 1.0],
        0,
        0.5,
        10.0,
        &regimes_cl,
        200,
    )
    .unwrap();
    for c in &rep.cells {
        println!(
            "closeness ({:.0e},{:.0e}): p {:.3} CI [{:.3},{:.3}] nonfinite {}",
            c.eps, c.delta, c.p_hat, c.interval.lo, c.interval.hi, c.n_nonfinite
        );
    }
    println!("closeness 200 paths x 3 cells: {:?}", t0.elapsed());

    // --- exit at the prey-only saddle ---
    let t0 = Instant::now();
    let saddle = eqs
        .iter()
        .find(|e| e.classification == Classification::Saddle && e.location[0] > 1.0)
        .unwrap()
        .clone();
    let spec = ExitSpec {
        equilibrium: saddle,
        theta1: 0.05,
        theta3: 0.25,
        horizon: 20.0,
        n_paths: 500,
        ball_radius: 50.0,
        delta_exponent: 1.0,
    };
    let template_ex = SimParams::new(1.0, 1.0, 1e-4, 20.0, 31).with_scheme(Scheme::LogEuler);
    for case in [RegimeCase::Case1, RegimeCase::Case2, RegimeCase::Case3] {
        let regimes_ex = RegimeSpec {
            pairs: vec![(1e-2, 1e-2)],
            case,
        };
        match exit_time_experiment(&model, &template_ex, &spec, case, &regimes_ex) {
            Ok(rep) => {
                let c = &rep.cells[0];
                println!(
                    "exit {case:?}: witness {:?} p {:.4} CI lo {:.4} bound {:.3e} passes {}",
                    rep.witness, c.p_hat, c.interval.lo, c.bound_eps_delta, c.passes_bound
                );
            }
            Err(e) => println!("exit {case:?}: {e}"),
        }
    }
    println!("exit 500 paths x 3 cases: {:?}", t0.elapsed());
}

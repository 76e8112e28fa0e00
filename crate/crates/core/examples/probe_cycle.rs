// Scratch probe: geometry of the fixed instance's averaged cycle.
use fastslow::averaged::{
    average_field_auto, cycle_occupation_measure, detect_limit_cycle, find_equilibria,
    CycleOptions, Section, VectorField,
};
use fastslow::measures::sliced_wasserstein;
use fastslow::models::paper_example_model;
use std::time::Instant;

fn main() {
    let model = paper_example_model();
    let field = average_field_auto(&model).unwrap();
    let eqs = find_equilibria(&field, &[0.0, 0.0], &[6.0, 6.0], 7, 1e-9).unwrap();
    for eq in &eqs {
        println!(
            "eq at ({:.6}, {:.6}) class {:?} eigs {:?} residual {:.2e}",
            eq.location[0], eq.location[1], eq.classification, eq.eigenvalues, eq.residual
        );
        if let Some(b) = &eq.stable_normal {
            println!("   beta = ({:.4}, {:.4})", b[0], b[1]);
        }
    }

    for burn in [100.0, 300.0, 600.0] {
        let t0 = Instant::now();
        let r = detect_limit_cycle(&field, &[1.0, 1.0], burn, None, &eqs, &CycleOptions::default());
        match &r {
            Ok(c) => {
                let ext = (0..c.n_samples()).fold((9e9f64, -9e9f64, 9e9f64, -9e9f64), |a, k| {
                    let p = c.sample(k);
                    (a.0.min(p[0]), a.1.max(p[0]), a.2.min(p[1]), a.3.max(p[1]))
                });
                println!(
                    "burn {burn}: period {:.6} bbox x [{:.3},{:.3}] y [{:.3},{:.3}] ({:?})",
                    c.period, ext.0, ext.1, ext.2, ext.3, t0.elapsed()
                );
            }
            Err(e) => println!("burn {burn}: FAILED {e} ({:?})", t0.elapsed()),
        }
    }

    // Two seeds / two sections for the self-consistency criterion.
    let t0 = Instant::now();
    let a = detect_limit_cycle(&field, &[1.0, 1.0], 300.0, None, &eqs, &CycleOptions::default());
    let mut f = vec![0.0; 2];
    field.eval(&[3.0, 2.0], &mut f);
    let b = detect_limit_cycle(
        &field,
        &[3.0, 2.0],
        350.0,
        Some(Section {
            anchor: vec![2.0, 2.0],
            normal: vec![0.0, 1.0],
        }),
        &eqs,
        &CycleOptions::default(),
    );
    match (&a, &b) {
        (Ok(ca), Ok(cb)) => {
            println!(
                "periods {:.8} vs {:.8} (rel diff {:.2e}) elapsed {:?}",
                ca.period,
                cb.period,
                (ca.period - cb.period).abs() / ca.period,
                t0.elapsed()
            );
            for k in [4096usize, 16384, 32768] {
                let ma = cycle_occupation_measure(ca, k).unwrap();
                let mb = cycle_occupation_measure(cb, k).unwrap();
                let t1 = Instant::now();
                let d = sliced_wasserstein(&ma, &mb, 256, 42).unwrap();
                println!("K = {k}: SW = {d:.3e} ({:?})", t1.elapsed());
            }
        }
        _ => println!("cycle detection failed: {a:?} / {b:?}"),
    }
}

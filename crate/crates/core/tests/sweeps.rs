//! Parameter sweeps at the default desk scale.

use fpauth::experiment::{
    run_experiment, spearman, write_rows, ExperimentRow, ExperimentSpec, SweepAxis,
};

fn series(rows: &[ExperimentRow]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let x = rows.iter().map(|r| r.axis_value.parse().unwrap()).collect();
    let tpr = rows.iter().map(|r| r.tpr.unwrap()).collect();
    let fpr = rows.iter().map(|r| r.fpr.unwrap()).collect();
    (x, tpr, fpr)
}

#[test]
fn used_num_sweep_trends() {
    let spec = ExperimentSpec::default();
    let rows = run_experiment(&spec, &SweepAxis::UsedNum((1..=10).collect())).unwrap();
    let (x, tpr, fpr) = series(&rows);
    println!("usedNum tpr {tpr:?}\nusedNum fpr {fpr:?}");
    assert!(
        spearman(&x, &fpr) <= -0.8,
        "fpr trend {}",
        spearman(&x, &fpr)
    );
    // TPR sits at its ceiling for most of the sweep, so ties make rank
    // correlation uninformative; check it never drops beyond sampling noise
    let n = spec.trials as f64;
    for w in tpr.windows(2) {
        let se = (w[0] * (1.0 - w[0]) / n + w[1] * (1.0 - w[1]) / n)
            .sqrt()
            .max(1.0 / n);
        assert!(w[1] >= w[0] - 3.0 * se, "tpr dropped {tpr:?}");
    }
    assert!(tpr.last().unwrap() > tpr.first().unwrap());
}

#[test]
fn accept_num_sweep_trends() {
    let spec = ExperimentSpec::default();
    let rows = run_experiment(&spec, &SweepAxis::AcceptNum((1..=5).collect())).unwrap();
    let (x, tpr, fpr) = series(&rows);
    println!("acceptNum tpr {tpr:?}\nacceptNum fpr {fpr:?}");
    assert!(
        spearman(&x, &tpr) <= -0.8,
        "tpr trend {}",
        spearman(&x, &tpr)
    );
    assert!(
        spearman(&x, &fpr) <= -0.8,
        "fpr trend {}",
        spearman(&x, &fpr)
    );
}

#[test]
fn same_spec_gives_identical_csv() {
    let spec = ExperimentSpec {
        trials: 100,
        ..Default::default()
    };
    let axis = SweepAxis::Noise(vec![0.0, 0.1]);
    let csv = |rows: &[ExperimentRow]| {
        let mut buf = Vec::new();
        write_rows(&mut buf, rows).unwrap();
        buf
    };
    let a = csv(&run_experiment(&spec, &axis).unwrap());
    let b = csv(&run_experiment(&spec, &axis).unwrap());
    assert_eq!(a, b);
}

#[test]
fn tamper_curve_rows() {
    let spec = ExperimentSpec {
        trials: 2000,
        ..Default::default()
    };
    let rows = run_experiment(
        &spec,
        &SweepAxis::TamperBudget {
            d: 50,
            budgets: vec![10, 100],
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 2 * 5);
    let rate = |budget: &str, attack: &str| {
        rows.iter()
            .find(|r| r.axis_value == budget && r.attack == attack)
            .unwrap()
            .attack_rate
            .unwrap()
    };
    for budget in ["10", "100"] {
        assert!(rate(budget, "tamper-full") <= rate(budget, "tamper-h1-only"));
        assert!(rate(budget, "tamper-full") <= rate(budget, "tamper-h1-h2") + 0.02);
    }
    assert!(rate("100", "tamper-full") >= rate("10", "tamper-full"));
}

use arith_core::analysis::{
    ablation_csv, ablation_grid, eval_plane, plane_basis, run_adamtrace, run_bench, run_plane, sweep_csv,
    sweep_steps, AblationConfig, AdamTraceConfig, BenchConfig, MeanSd, PlaneConfig, PlaneRanges, SweepConfig,
};
use arith_core::{ParamVector, Result};
use proptest::prelude::*;
use serde_json::json;

fn anchors_strategy() -> impl Strategy<Value = [Vec<f64>; 3]> {
    (2usize..=12).prop_flat_map(|dim| {
        let v = || prop::collection::vec(-4.0f64..4.0, dim);
        (v(), v(), v()).prop_map(|(a, b, c)| [a, b, c])
    })
}

proptest! {
    #[test]
    fn plane_frame_is_orthonormal_and_reproduces_anchors(anchors in anchors_strategy()) {
        let [a, b, c] = anchors.map(ParamVector::new);
        // nearly collinear draws are rejected, which is the documented behaviour
        if let Ok(basis) = plane_basis(&a, &b, &c) {
            prop_assert!((basis.u.norm() - 1.0).abs() <= 1e-12);
            prop_assert!((basis.v.norm() - 1.0).abs() <= 1e-12);
            prop_assert!(basis.u.dot(&basis.v).abs() <= 1e-12);
            for (anchor, (x, y)) in [&a, &b, &c].into_iter().zip(basis.anchors) {
                prop_assert!(basis.point(x, y).max_abs_diff(anchor) <= 1e-9);
            }
        }
    }
}

#[test]
fn collinear_anchors_are_rejected() {
    let a = ParamVector::new(vec![0.0, 0.0, 0.0]);
    let b = ParamVector::new(vec![1.0, 2.0, 3.0]);
    let c = ParamVector::new(vec![2.0, 4.0, 6.0]);
    assert!(plane_basis(&a, &b, &c).is_err());
    assert!(plane_basis(&a, &a, &c).is_err());
}

fn toy_losses() -> Vec<impl Fn(&ParamVector) -> Result<f64> + Sync> {
    (0..2)
        .map(|d| {
            move |p: &ParamVector| -> Result<f64> {
                Ok(p.iter().enumerate().map(|(i, x)| (x - (i + d) as f64).powi(2)).sum::<f64>().sqrt())
            }
        })
        .collect()
}

#[test]
fn grid_is_a_pure_function_of_its_inputs() {
    let basis = plane_basis(
        &ParamVector::new(vec![0.1, 0.2, 0.3, 0.4]),
        &ParamVector::new(vec![1.0, -1.0, 0.5, 0.0]),
        &ParamVector::new(vec![-0.5, 0.7, 2.0, 1.0]),
    )
    .unwrap();
    let ranges = PlaneRanges::around_anchors(&basis, 0.3);
    let first = eval_plane(&basis, &toy_losses(), ranges, 17).unwrap().to_csv();
    let second = eval_plane(&basis, &toy_losses(), ranges, 17).unwrap().to_csv();
    assert_eq!(first.as_str().as_bytes(), second.as_str().as_bytes());
}

#[test]
fn anchor_cells_do_not_depend_on_resolution() {
    let basis = plane_basis(
        &ParamVector::new(vec![0.0, 1.0, 0.0]),
        &ParamVector::new(vec![2.0, 0.0, 1.0]),
        &ParamVector::new(vec![-1.0, 3.0, 0.5]),
    )
    .unwrap();
    let ranges = PlaneRanges::around_anchors(&basis, 0.25);
    let coarse = eval_plane(&basis, &toy_losses(), ranges, 11).unwrap();
    let fine = eval_plane(&basis, &toy_losses(), ranges, 21).unwrap();
    for (a, b) in basis.anchors {
        let (ca, cb) = coarse.cell_of(a, b).unwrap();
        let (fa, fb) = fine.cell_of(a, b).unwrap();
        for d in 0..2 {
            assert_eq!(coarse.value(d, ca, cb), fine.value(d, fa, fb));
        }
    }
    assert!(fine.a_values.len() >= 21 && fine.a_values.len() <= 24);
}

fn small_base(iterations: usize) -> serde_json::Value {
    json!({
        "network": {"layer_sizes": [2, 8, 2], "activation": "tanh", "loss": "softmax_cross_entropy"},
        "scheme": {"arithmetic": 3.0},
        "k": 1,
        "inner_lr": 0.1,
        "outer": {"adam": {"learning_rate": 0.01}},
        "iterations": iterations,
        "batch_size": 16,
        "shuffle_domains": true,
        "seed": 0
    })
}

fn small_suite() -> serde_json::Value {
    json!({
        "kind": "rotated_moons",
        "source_angles": [0.0, 30.0, 60.0],
        "target_angles": [90.0],
        "n_per_domain": 80,
        "noise_sd": 0.1,
        "val_fraction": 0.25,
        "seed": 0
    })
}

#[test]
fn sweep_has_one_row_per_scheme_and_step_count() {
    let config: SweepConfig = serde_json::from_value(json!({
        "base": small_base(5),
        "suite": small_suite(),
        "k_values": [1, 2, 3],
        "seeds": [0, 1]
    }))
    .unwrap();
    let rows = sweep_steps(&config).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.seeds == 2));
    let again = sweep_steps(&config).unwrap();
    assert_eq!(sweep_csv(&rows).as_str(), sweep_csv(&again).as_str());
    assert!(sweep_csv(&rows)
        .as_str()
        .lines()
        .any(|l| l == "scheme,k,target_acc_mean,target_acc_sd,n_seeds"));
}

#[test]
fn ablation_grid_covers_the_cartesian_product() {
    let mut config: AblationConfig = serde_json::from_value(json!({
        "base": small_base(4),
        "suite": small_suite(),
        "seeds": [0],
    }))
    .unwrap();
    assert_eq!(ablation_grid(&config).unwrap().len(), 1);

    config.axes.scaled = vec![false, true];
    config.axes.momentum_in_inner = vec![false, true];
    config.axes.domain_specific_sampling = vec![true, false];
    let rows = ablation_grid(&config).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(ablation_csv(&rows).as_str().lines().filter(|l| !l.starts_with('#')).count(), 9);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.val_acc.mean), "{r:?}");
    }
}

#[test]
fn adam_outer_cannot_tell_scaled_from_normalized_weights() {
    let mut config: AblationConfig = serde_json::from_value(json!({
        "base": small_base(6),
        "suite": small_suite(),
        "seeds": [0],
    }))
    .unwrap();
    config.axes.scaled = vec![false, true];
    let rows = ablation_grid(&config).unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].target_acc.mean - rows[1].target_acc.mean).abs() <= 1e-12);
}

#[test]
fn bench_reports_every_method_and_the_averaged_variants() {
    let mut base = small_base(8);
    base["swa"] = json!({"burn_in_fraction": 0.5});
    let config: BenchConfig = serde_json::from_value(json!({
        "base": base,
        "suite": small_suite(),
        "seeds": [0, 1]
    }))
    .unwrap();
    let report = run_bench(&config).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    for m in ["ERM", "Fish", "Arith", "ERM+SWA", "Fish+SWA", "Arith+SWA"] {
        assert!(names.contains(&m), "missing {m} in {names:?}");
    }
    assert_eq!(report.target_ids, vec![3]);
    let csv = report.to_csv();
    let header = csv.as_str().lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        "method,val_acc_mean,val_acc_sd,domain3_mean,domain3_sd,avg_mean,avg_sd"
    );
    let arith = report.row("Arith").unwrap();
    let per_seed: Vec<f64> = report
        .runs
        .iter()
        .filter(|r| r.method == "Arith")
        .map(|r| r.target_accs[0])
        .collect();
    assert_eq!(arith.target_avg, MeanSd::of(&per_seed));
}

#[test]
fn plane_run_is_deterministic() {
    let config: PlaneConfig = serde_json::from_value(json!({
        "network": {"layer_sizes": [2, 6, 2], "activation": "tanh", "loss": "softmax_cross_entropy"},
        "suite": small_suite(),
        "seed": 3,
        "inner_lr": 0.1,
        "batch_size": 16,
        "pretrain_steps": 20,
        "anchor_steps": 5,
        "resolution": 9
    }))
    .unwrap();
    let a = run_plane(&config).unwrap();
    let b = run_plane(&config).unwrap();
    assert_eq!(a.grid.to_csv().as_str(), b.grid.to_csv().as_str());
    assert_eq!(a.domain_ids, vec![0, 1, 2, 3]);
    assert_eq!(a.grid.values.len(), 4);
}

#[test]
fn network_momentum_trace_has_one_row_per_step() {
    let config: AdamTraceConfig = serde_json::from_value(json!({
        "steps": 12,
        "beta1": 0.9,
        "source": {
            "kind": "network",
            "network": {"layer_sizes": [2, 4, 2], "activation": "tanh", "loss": "softmax_cross_entropy"},
            "suite": small_suite(),
            "batch_size": 8,
            "learning_rate": 0.01,
            "seed": 0
        }
    }))
    .unwrap();
    let trace = run_adamtrace(&config).unwrap();
    assert_eq!(trace.rows.len(), 12);
    for row in &trace.rows {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

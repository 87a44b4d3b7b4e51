//! Save/load round trips and graph-level invariants.

use proptest::prelude::*;

use eqquant::equalize::{factorize_pair, one_step_equalize, two_step_equalize, TwoStepMode};
use eqquant::fixture::{make_fixture, FixtureSpec, Topology};
use eqquant::model_io::{load_annotated, load_model, save_model, Dtype, ModelPaths, Sidecar, FORMAT_VERSION};
use eqquant::quant::calibrate;
use eqquant::{ActivationKind, BitWidths, Graph, Tensor};

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn outputs_match(a: &Graph, b: &Graph, xs: &[Tensor], tol: f64) {
    for x in xs {
        let (ya, yb) = (a.run(x).unwrap(), b.run(x).unwrap());
        assert!(max_abs_diff(&ya, &yb) <= tol * ya.abs_max().max(1.0));
    }
}

#[test]
fn equalized_model_survives_save_and_load() {
    let spec = FixtureSpec {
        topology: Topology::Residual,
        imbalance: 40.0,
        seed: 5,
        ..FixtureSpec::default()
    };
    let g = make_fixture(&spec).unwrap();
    let xs = spec.samples().batch(0, 16);
    let cal = calibrate(&g, xs.clone(), 16, BitWidths::default()).unwrap();
    let eq = two_step_equalize(&g, &cal, 16.0, TwoStepMode::Standard).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::new(dir.path(), "eq");
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        scales: eq.scales.clone(),
        eligibility: Some(eq.report.clone()),
        quant: Default::default(),
    };
    save_model(&eq.graph, &paths, Dtype::F64, "test", Some(&sidecar)).unwrap();
    let (loaded, side) = load_annotated(&paths, true).unwrap();
    assert_eq!(loaded, eq.graph);
    assert_eq!(side.unwrap().scales, eq.scales);
    outputs_match(&g, &loaded, &xs, 1e-10);
}

#[test]
fn f32_weights_stay_close() {
    let spec = FixtureSpec {
        topology: Topology::DepthwiseChain,
        seed: 2,
        ..FixtureSpec::default()
    };
    let g = make_fixture(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::new(dir.path(), "m");
    save_model(&g, &paths, Dtype::F32, "test", None).unwrap();
    assert!(!paths.sidecar.exists());
    let loaded = load_model(&paths.manifest, &paths.weights, true).unwrap();
    outputs_match(&g, &loaded, &spec.samples().batch(0, 4), 1e-5);
}

#[test]
fn corrupted_weights_are_rejected() {
    let g = make_fixture(&FixtureSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::new(dir.path(), "m");
    save_model(&g, &paths, Dtype::F64, "test", None).unwrap();
    let mut bytes = std::fs::read(&paths.weights).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&paths.weights, bytes).unwrap();
    assert!(load_model(&paths.manifest, &paths.weights, true).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn factorization_preserves_function(
        seed in 0u64..1000,
        layers in 3usize..6,
        raw in proptest::collection::vec(0.25f64..4.0, 8),
        depthwise in any::<bool>(),
        prelu in any::<bool>(),
    ) {
        let spec = FixtureSpec {
            layers,
            seed,
            input_hw: 5,
            topology: if depthwise { Topology::DepthwiseChain } else { Topology::Chain },
            activation: if prelu { ActivationKind::Prelu { slopes: Vec::new() } } else { ActivationKind::Relu },
            ..FixtureSpec::default()
        };
        let g = make_fixture(&spec).unwrap();
        let first = g.layer_ids()[0].clone();
        let h = factorize_pair(&g, &first, &raw).unwrap();
        for x in spec.samples().batch(0, 2) {
            let (a, b) = (g.run(&x).unwrap(), h.run(&x).unwrap());
            prop_assert!(max_abs_diff(&a, &b) <= 1e-10 * a.abs_max().max(1.0));
        }
    }

    #[test]
    fn one_step_keeps_function_and_bounds(seed in 0u64..1000, imbalance in 1.0f64..200.0) {
        let spec = FixtureSpec { imbalance, seed, input_hw: 5, ..FixtureSpec::default() };
        let g = make_fixture(&spec).unwrap();
        let xs = spec.samples().batch(0, 8);
        let cal = calibrate(&g, xs.clone(), 8, BitWidths::default()).unwrap();
        let eq = one_step_equalize(&g, &cal, 16.0).unwrap();
        for s in &eq.scales {
            prop_assert!(s.factors.iter().all(|&c| (1.0..=16.0).contains(&c)));
        }
        for x in &xs {
            let (a, b) = (g.run(x).unwrap(), eq.graph.run(x).unwrap());
            prop_assert!(max_abs_diff(&a, &b) <= 1e-10 * a.abs_max().max(1.0));
        }
    }
}

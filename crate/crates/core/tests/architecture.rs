mod common;

use ctdense::model::{feature_map_plan, DenseNetConfig, StageKind};

#[test]
fn layer_connection_and_parameter_accounting() {
    eprintln!("{}", common::check_accounting().unwrap());
}

#[test]
fn probed_shapes_follow_the_plan() {
    eprintln!("{}", common::check_shape_plan().unwrap());
}

#[test]
fn single_linear_layer_count() {
    // A 1024 → 2 classifier alone: 2·1024 weights + 2 biases.
    let cfg = DenseNetConfig::densenet121();
    let full = common::densenet_param_oracle(&cfg);
    let without_head = full - (1024 * 2 + 2);
    assert_eq!(full - without_head, 2050);
}

#[test]
fn reduced_plan_matches_oracle_and_probe() {
    let cfg = DenseNetConfig::reduced();
    let model = ctdense::DenseNetModel::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(model.count_params(), common::densenet_param_oracle(&cfg));
    let plan = feature_map_plan(&cfg).unwrap();
    assert_eq!(plan.iter().filter(|s| s.kind == StageKind::DenseBlock).count(), 4);
    assert_eq!(plan.last().unwrap().channels, 2);
}

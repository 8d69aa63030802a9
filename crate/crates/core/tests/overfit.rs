mod common;

#[test]
fn reduced_model_memorizes_32_synthetic_studies() {
    let summary = common::check_overfit().unwrap();
    eprintln!("{summary}");
}

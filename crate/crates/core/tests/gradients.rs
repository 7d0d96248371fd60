use shapeconv::gradcheck::{check_network, run_gradcheck, GradCheckConfig};
use shapeconv::net::LayerKind;

#[test]
fn every_gradient_matches_central_differences() {
    let report = run_gradcheck(&GradCheckConfig::default()).unwrap();
    println!("{}", report.to_table());
    assert!(report.passed());
    let groups: Vec<&str> = report.rows.iter().map(|r| r.check.as_str()).collect();
    for needed in [
        "shapeconv.input",
        "shapeconv.kernel",
        "shapeconv.base_weight",
        "shapeconv.shape_weight",
        "shapeconv.bias",
        "net.shapeconv.shape_weight",
        "net.vanilla.kernel",
    ] {
        assert!(groups.contains(&needed), "missing {needed}");
    }
}

#[test]
fn kinks_are_rare_in_the_network_check() {
    for kind in [LayerKind::Conv, LayerKind::ShapeConv] {
        for row in check_network(&GradCheckConfig::default(), kind).unwrap() {
            assert!(row.skipped * 20 <= row.entries, "{row:?}");
        }
    }
}

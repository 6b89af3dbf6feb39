use channel_fsi::fsi::{exponent_experiment, FsiOptions, Side};
use channel_fsi::extension::InflowProfile;
use channel_fsi::geometry::{BodyShape, Channel, Placement};
use channel_fsi::ns_solver::FlowProblem;
use channel_fsi_cli::plot::{emit_plot, loglog_slope, Plot, PlotError, PlotKind, Series};

fn plot(kind: PlotKind, series: Vec<Series>) -> Plot {
    Plot {
        title: "a <test> & plot".into(),
        x_label: "x".into(),
        y_label: "y".into(),
        kind,
        series,
    }
}

fn slope_annotation(svg: &str) -> Option<f64> {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants()
        .find(|n| n.attribute("class") == Some("slope"))
        .and_then(|n| n.text())
        .and_then(|t| t.strip_prefix("slope = "))
        .map(|v| v.parse().unwrap())
}

#[test]
fn empty_table_is_an_error() {
    assert_eq!(emit_plot(&plot(PlotKind::Curve, vec![])), Err(PlotError::Empty));
    let empty = Series::new("e", vec![], vec![]);
    assert_eq!(emit_plot(&plot(PlotKind::Curve, vec![empty])), Err(PlotError::Empty));
    let bad = Series::new("m", vec![1.0, 2.0], vec![1.0]);
    assert!(matches!(emit_plot(&plot(PlotKind::Curve, vec![bad])), Err(PlotError::Mismatch(_))));
}

#[test]
fn single_series_parses_as_xml() {
    let s = Series::new("phi", vec![-0.4, -0.2, 0.0, 0.2, 0.4], vec![-3.0, -1.0, 0.0, 1.5, 4.0]);
    let svg = emit_plot(&plot(PlotKind::Curve, vec![s])).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("series")).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].attribute("points").unwrap().split(' ').count(), 5);
    assert!(doc.descendants().any(|n| n.text() == Some("a <test> & plot")));
    assert_eq!(slope_annotation(&svg), None);
}

#[test]
fn loglog_annotation_matches_the_exponent_fit() {
    let v = vec![0.75, 0.0, -0.75];
    let prof = InflowProfile::polynomial(1.0, 0.0, v.clone(), v).unwrap();
    let ch = Channel::new(3.0, 1.0).unwrap();
    let shape = BodyShape::ellipse(0.4, 0.2).unwrap();
    let pb = FlowProblem::new(1.0, 1.0, prof, ch, shape, Placement::default()).unwrap();
    let opts = FsiOptions::with_mesh_size(0.3);
    let fit = exponent_experiment(&pb, Side::Bottom, &[0.2, 0.1, 0.05, 0.025], &opts).unwrap();
    let series = Series::new("volume", fit.gaps.clone(), fit.lifts.clone());
    let slope = fit.slope.unwrap();
    assert!((loglog_slope(&series).unwrap() - slope).abs() <= 1e-12 * slope.abs().max(1.0));
    let svg = emit_plot(&plot(PlotKind::LogLog, vec![series])).unwrap();
    let shown = slope_annotation(&svg).unwrap();
    assert!((shown - slope).abs() <= 5e-7, "{shown} vs {slope}");
}

mod common;

use eeg_dcvit::analysis::*;
use eeg_dcvit::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn parse(svg: &str) -> roxmltree::Document<'_> {
    roxmltree::Document::parse(svg).expect("well-formed SVG")
}

#[test]
fn identity_confusion_for_perfect_predictions() {
    let ids: Vec<usize> = (0..250).map(|i| i % 25).collect();
    let cm = confusion_matrix(&ids, &ids, 25).unwrap();
    for i in 0..25 {
        assert_eq!(cm.row_sum(i), 10);
        for j in 0..25 {
            assert_eq!(cm.get(i, j), if i == j { 10 } else { 0 });
        }
    }
    assert_eq!(cm.total(), 250);
    let csv = cm.to_csv();
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn report_matches_hand_computation() {
    // truth: 0 0 0 1 1 2 ; pred: 0 0 1 1 2 2
    let cm = confusion_matrix(&[0, 0, 0, 1, 1, 2], &[0, 0, 1, 1, 2, 2], 3).unwrap();
    let r = class_report(&cm).unwrap();
    let want = [(1.0, 2.0 / 3.0, 0.8, 3), (0.5, 0.5, 0.5, 2), (0.5, 1.0, 2.0 / 3.0, 1)];
    for (c, (p, rec, f1, s)) in r.classes.iter().zip(want) {
        assert!((c.precision - p).abs() < 1e-12);
        assert!((c.recall - rec).abs() < 1e-12);
        assert!((c.f1 - f1).abs() < 1e-12);
        assert_eq!(c.support, s);
    }
    assert!(r.to_csv().starts_with("class,precision,recall,f1,support\n"));
}

#[test]
fn scatter_partition_and_xml() {
    let mut r = common::rng(3);
    let labels: Vec<[f64; 2]> = (0..300).map(|_| [r.gen_range(0.0..800.0), r.gen_range(0.0..600.0)]).collect();
    let preds: Vec<[f64; 2]> = labels.iter().map(|l| [l[0] + r.gen_range(-200.0..200.0), l[1] + r.gen_range(-150.0..150.0)]).collect();
    let s = error_scatter(&preds, &labels, 55.4, 2.0, Viewport::default()).unwrap();
    let blue = preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| ((p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)).sqrt() / 2.0 <= 55.4)
        .count();
    assert_eq!((s.blue, s.red), (blue, 300 - blue));
    let doc = parse(&s.svg);
    let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
    assert_eq!(circles.len(), 300);
    assert_eq!(circles.iter().filter(|c| c.attribute("fill") == Some(BLUE)).count(), blue);
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("line")).count(), 300);
    let rows: Vec<&str> = s.csv.lines().collect();
    assert_eq!(rows[0], "x,y,distance_mm,flag");
    assert_eq!(rows.iter().filter(|l| l.ends_with(",blue")).count(), blue);
}

#[test]
fn heatmap_is_valid_svg() {
    let sample: Vec<f64> = (0..8 * 40).map(|i| (i as f64 * 0.1).sin()).collect();
    let h = eeg_heatmap(&sample, 8, 40).unwrap();
    let doc = parse(&h.svg);
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("rect")).count(), 320);
    assert!(h.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(h.csv.lines().count(), 9);
}

#[test]
fn high_confidence_threshold() {
    let logits = Tensor::new(vec![3, 3], vec![5.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 2.2]).unwrap();
    let sel = high_confidence_select(&logits, 0.9).unwrap();
    // softmax maxima: 0.9867, 1/3, 0.8003
    assert_eq!(sel.len(), 1);
    assert_eq!((sel[0].index, sel[0].class), (0, 0));
}

proptest! {
    #[test]
    fn confusion_rows_sum_to_support(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion_matrix(&t, &p, 6).unwrap();
        prop_assert_eq!(cm.total() as usize, t.len());
        for c in 0..6 {
            prop_assert_eq!(cm.row_sum(c) as usize, t.iter().filter(|&&x| x == c).count());
        }
    }
}

use qbye::evaluate::{DetTable, TablePoint};
use qbye::plot::{legend_label, plot_det};
use qbye::profile::{format_table, profile_model, reference_rows};
use qbye_core::encoders::EncoderFamily;
use qbye_core::model::ModelConfig;

fn table(label: &str, frr: Option<f64>) -> DetTable {
    DetTable {
        label: label.into(),
        counting: "dedup".into(),
        negative_hours: 2.0,
        target_fa_per_hour: 0.3,
        frr_at_target: frr,
        points: vec![
            TablePoint {
                threshold: None,
                fa_per_hour: 0.0,
                frr: 1.0,
            },
            TablePoint {
                threshold: Some(0.2),
                fa_per_hour: 0.5,
                frr: 0.4,
            },
            TablePoint {
                threshold: Some(0.6),
                fa_per_hour: 2.0,
                frr: 0.0,
            },
        ],
    }
}

#[test]
fn legend_labels_come_from_table_metadata() {
    assert_eq!(
        legend_label(&table("liconet", Some(0.0198))),
        "liconet (dedup, FRR 1.98% @ 0.3 FA/hr)"
    );
    assert_eq!(legend_label(&table("conformer", None)), "conformer (dedup)");
}

#[test]
fn two_tables_give_a_two_curve_figure() {
    let dir = tempfile::tempdir().unwrap();
    let tables = [
        table("liconet-gap", Some(0.1)),
        table("ecapa_tdnn-asp", None),
    ];
    let paths: Vec<String> = tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p = dir.path().join(format!("t{i}.json"));
            std::fs::write(&p, serde_json::to_string(t).unwrap()).unwrap();
            p.to_str().unwrap().to_string()
        })
        .collect();
    let out = dir.path().join("det.svg");
    qbye::cli::run([
        "qbye",
        "plot-det",
        &paths[0],
        &paths[1],
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    let svg = std::fs::read_to_string(&out).unwrap();
    assert!(svg.starts_with("<svg"));
    for t in &tables {
        assert!(svg.contains(&legend_label(t)), "legend for {}", t.label);
    }
    // Each colour strokes its curve and its legend sample.
    for colour in ["#1F77B4", "#D62728"] {
        assert_eq!(
            svg.matches(&format!("stroke=\"{colour}\" stroke-width=\"2\""))
                .count(),
            2,
            "{colour}"
        );
    }
    assert!(plot_det(&[], &out, None).is_err());
}

#[test]
fn shipped_models_match_the_reference_sizes() {
    let rows = reference_rows().unwrap();
    assert_eq!(
        rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(),
        ["ecapa_tdnn", "conformer", "liconet"]
    );
    for r in &rows {
        assert_eq!(r.within_tolerance(), Some(true), "{r:?}");
    }
    let text = format_table(&rows);
    assert_eq!(
        text.lines().filter(|l| l.ends_with("yes")).count(),
        3,
        "{text}"
    );

    let small = ModelConfig::reference(EncoderFamily::Liconet).scaled(0.25);
    let (row, report) = profile_model("toy", &small, false).unwrap();
    assert_eq!((row.reference, row.within_tolerance()), (None, None));
    assert!(row.params < rows[2].params / 4);
    assert_eq!(report.flops(), row.flops);
}

//! Plain-text tables for `eval` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fewshot_core::eval::{FinalReport, Summary};

fn row(out: &mut String, cells: &[String], widths: &[usize]) {
    let line: Vec<String> = cells.iter().zip(widths).map(|(c, &w)| format!("{c:<w$}")).collect();
    let _ = writeln!(out, "{}", line.join("  ").trim_end());
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    row(out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>(), &widths);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    row(out, &rule, &widths);
    for r in rows {
        row(out, r, &widths);
    }
}

/// Mean ± std of a per-class F1 over the repeats that scored the class.
fn per_label_f1(report: &FinalReport, combos: bool) -> BTreeMap<String, Summary> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &report.repeats {
        let scores = if combos { &r.test.per_combination } else { &r.test.per_class };
        for (label, s) in scores {
            values.entry(label.clone()).or_default().push(s.f1);
        }
    }
    values.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect()
}

/// Overall scores per run, then F1 per class (or atomic label) and per label
/// combination.
pub fn render(reports: &[FinalReport]) -> String {
    let mut out = String::new();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.backbone.clone(),
                r.repeats.len().to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
            ]
        })
        .collect();
    table(&mut out, &["method", "backbone", "repeats", "precision", "recall", "F1"], &rows);

    for (title, combos) in [("F1 per label", false), ("F1 per label combination", true)] {
        let per: Vec<BTreeMap<String, Summary>> = reports.iter().map(|r| per_label_f1(r, combos)).collect();
        if per.iter().all(|m| m.is_empty()) {
            continue;
        }
        let mut labels: Vec<&String> = per.iter().flat_map(|m| m.keys()).collect();
        labels.sort();
        labels.dedup();
        let mut header = vec!["label".to_string()];
        header.extend(reports.iter().map(|r| format!("{}/{}", r.method, r.backbone)));
        let rows: Vec<Vec<String>> = labels
            .iter()
            .map(|l| {
                let mut cells = vec![l.to_string()];
                cells.extend(per.iter().map(|m| m.get(*l).map_or("-".into(), |s| s.to_string())));
                cells
            })
            .collect();
        let _ = writeln!(out, "\n{title}");
        table(&mut out, &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewshot_core::eval::{ClassScores, MetricsReport, Method, RepeatRecord, Scores};
    use fewshot_core::episodes::Mode;

    fn repeat(f1: f64) -> RepeatRecord {
        let cs = ClassScores {
            precision: f1,
            recall: f1,
            f1,
            support: 10,
        };
        RepeatRecord {
            seed: 0,
            best_epoch: 1,
            best_val_f1: f1,
            test: MetricsReport {
                mode: Mode::MultiClass,
                per_class: [("1".to_string(), cs)].into(),
                per_combination: BTreeMap::new(),
                weighted: Scores {
                    precision: f1,
                    recall: f1,
                    f1,
                },
                query_count: 10,
                episode_count: 1,
                skipped_query_count: 0,
            },
        }
    }

    #[test]
    fn renders_mean_and_std() {
        let report = FinalReport {
            method: Method::ProtoMulticlass,
            backbone: "cnn".into(),
            precision: Summary { mean: 0.5, std: 0.1 },
            recall: Summary { mean: 0.5, std: 0.1 },
            f1: Summary { mean: 0.5, std: 0.1 },
            repeats: vec![repeat(0.4), repeat(0.6)],
        };
        let text = render(&[report]);
        assert!(text.contains("proto_multiclass"), "{text}");
        assert!(text.contains("0.500 ± 0.100"), "{text}");
        assert!(text.contains("F1 per label\n"), "{text}");
        assert!(text.contains("0.500 ± 0.141"), "{text}");
        assert!(!text.contains("combination"), "{text}");
    }
}

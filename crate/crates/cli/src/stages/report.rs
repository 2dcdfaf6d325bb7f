use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use super::{
    Context, CBTS_TABLE, CORPUS_TABLE, ESTIMATOR_TABLE, FED_TABLE, FEWSHOT_TABLE, LABEL_TABLE,
    REPORT, TRUTHINF_TABLE,
};
use crate::error::{invalid, Result, Stage};
use crate::table::{read_input, write_file, Table};

const SECTIONS: [(&str, Stage, &str); 7] = [
    ("Corpus", Stage::Synth, CORPUS_TABLE),
    (
        "Per-phone estimators",
        Stage::TrainEstimators,
        ESTIMATOR_TABLE,
    ),
    ("Aggregator training", Stage::TrainCbts, CBTS_TABLE),
    (
        "Truth inference MAE (°C)",
        Stage::TruthinfBench,
        TRUTHINF_TABLE,
    ),
    ("Crowd-inferred labels", Stage::GenLabels, LABEL_TABLE),
    (
        "Few-shot adaptation MAE (°C)",
        Stage::Fewshot,
        FEWSHOT_TABLE,
    ),
    ("Federated rounds", Stage::Fed, FED_TABLE),
];

fn markdown(t: &Table) -> String {
    let mut s = format!(
        "| {} |\n|{}\n",
        t.columns.join(" | "),
        "---|".repeat(t.columns.len())
    );
    for r in &t.rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// First, best-validation and last epochs only.
fn cbts_digest(t: &Table) -> Table {
    let val = |r: &Vec<String>| r[2].parse::<f64>().unwrap_or(f64::INFINITY);
    let mut out = Table {
        columns: t.columns.clone(),
        rows: Vec::new(),
    };
    if let (Some(first), Some(last)) = (t.rows.first(), t.rows.last()) {
        let best = t
            .rows
            .iter()
            .min_by(|a, b| val(a).total_cmp(&val(b)))
            .expect("non-empty");
        for r in [first, best, last] {
            if !out.rows.contains(r) {
                out.rows.push(r.clone());
            }
        }
    }
    out
}

fn highlights(tables: &BTreeMap<Stage, Table>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(t) = tables.get(&Stage::TruthinfBench) {
        if let (Some(c), Some(m), Some(w)) = (
            t.get_f64("all", "CBTS"),
            t.get_f64("all", "Mean"),
            t.get_f64("all", "WA"),
        ) {
            out.push(format!(
                "CBTS all-groups MAE {c:.3} °C against Mean {m:.3} (ratio {:.2}) and WA {w:.3}.",
                c / m
            ));
        }
    }
    if let Some(t) = tables.get(&Stage::GenLabels) {
        if let Some(v) = t.get_f64("all", "label_mae") {
            out.push(format!(
                "Inferred labels deviate from true labels by {v:.3} °C on average."
            ));
        }
    }
    if let Some(t) = tables.get(&Stage::Fewshot) {
        if let (Some(d), Some(p), Some(m)) = (
            t.get_f64("all", "DT-TL"),
            t.get_f64("all", "PT-TL"),
            t.get_f64("all", "MAML-TL"),
        ) {
            out.push(format!("Few-shot MAE over all participants: DT {d:.3}, PT {p:.3}, MAML {m:.3} °C (MAML/PT {:.2}).", m / p));
        }
    }
    out
}

/// Collects every stage table into one markdown file. Fails, naming the
/// stage to run, when any table is missing.
pub fn run_report(ctx: &Context) -> Result<PathBuf> {
    let stage = Stage::Report;
    let mut parsed = Vec::new();
    for (title, producer, rel) in SECTIONS {
        let text = read_input(stage, &ctx.path(rel), producer)?;
        let (meta, table) =
            Table::parse(&text).map_err(|e| invalid(stage, format!("{rel}: {e}")))?;
        parsed.push((title, producer, rel, meta, table));
    }
    let mut s = String::from("# Experiment report\n\n");
    let _ = writeln!(s, "- config checksum: `{}`", ctx.checksum());
    let _ = writeln!(s, "- global seed: {}", ctx.config.seed);
    let _ = writeln!(s, "- output directory: `{}`\n", ctx.out.display());
    let tables: BTreeMap<Stage, Table> = parsed
        .iter()
        .map(|(_, st, _, _, t)| (*st, t.clone()))
        .collect();
    let notes = highlights(&tables);
    if !notes.is_empty() {
        s.push_str("## Highlights\n\n");
        for n in notes {
            let _ = writeln!(s, "- {n}");
        }
        s.push('\n');
    }
    for (title, producer, rel, meta, table) in &parsed {
        let _ = writeln!(s, "## {title}\n");
        let checksum = meta
            .get("config_checksum")
            .map(String::as_str)
            .unwrap_or("?");
        let stale = if checksum == ctx.checksum() {
            ""
        } else {
            " (differs from the current config)"
        };
        let _ = writeln!(
            s,
            "Source `{rel}` from stage `{producer}`, seed {}, config checksum `{checksum}`{stale}.\n",
            meta.get("seed").map(String::as_str).unwrap_or("?"),
        );
        let shown = if *producer == Stage::TrainCbts {
            cbts_digest(table)
        } else {
            table.clone()
        };
        s.push_str(&markdown(&shown));
        s.push('\n');
    }
    let path = ctx.path(REPORT);
    write_file(stage, &path, &s)?;
    Ok(path)
}

//! The report bundle: `report.json`, its schema and the figures drawn from it.

use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsem::metrics::{ChiSquareTest, CurvePoint, SpatiotemporalRates};
use tsem::{Error, Result};

use crate::io::write_text;
use crate::svg::{Chart, PALETTE};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA: &str = include_str!("../../../schema/report.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub instances: usize,
    pub n_features: usize,
    pub seq_length: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture: String,
    pub parameters: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub average_drop: f64,
    pub average_increase: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    /// Mean over instances at each step.
    pub deletion_curve: Vec<CurvePoint>,
    pub insertion_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Causality {
    pub feature_proportion: f64,
    pub time_proportion: f64,
    pub max_proportion: f64,
    pub pass: bool,
    pub chi_square: ChiSquareTest,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub instances: usize,
    pub faithfulness: Option<Faithfulness>,
    pub causality: Option<Causality>,
    pub spatiotemporality: Option<SpatiotemporalRates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub models: Vec<String>,
    pub n_datasets: usize,
    pub tie_policy: String,
    pub alpha: f64,
    pub average_ranks: Vec<f64>,
    pub wins_ties: Vec<usize>,
    /// Absent when fewer than two models are ranked.
    pub critical_difference: Option<f64>,
    pub q: Option<f64>,
    pub groups: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool: Tool,
    pub command: String,
    pub generated_unix: u64,
    /// The fully resolved command configuration.
    pub config: serde_json::Value,
    pub dataset: Option<DatasetInfo>,
    pub model: Option<ModelInfo>,
    pub accuracy: Option<f64>,
    pub methods: Vec<MethodReport>,
    pub ranking: Option<Ranking>,
}

impl Report {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: Tool {
                name: "tsem".into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            command: command.into(),
            generated_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            dataset: None,
            model: None,
            accuracy: None,
            methods: Vec::new(),
            ranking: None,
        }
    }
}

/// Checks a parsed report against the shipped schema.
pub fn validate(value: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value =
        serde_json::from_str(SCHEMA).expect("shipped schema is valid JSON");
    let validator = jsonschema::validator_for(&schema)
        .map_err(|e| Error::Config(format!("report schema: {e}")))?;
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| format!("{}: {e}", e.instance_path()))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "report does not match schema v{SCHEMA_VERSION}: {}",
            errors.join("; ")
        )))
    }
}

/// Every figure the report supports, written under `dir/figures/`.
pub fn render_figures(report: &Report, dir: &Path) -> Result<()> {
    let fig = dir.join("figures");
    let faith: Vec<(&str, &Faithfulness)> = report
        .methods
        .iter()
        .filter_map(|m| m.faithfulness.as_ref().map(|f| (m.method.as_str(), f)))
        .collect();
    if !faith.is_empty() {
        let max_ad = faith
            .iter()
            .map(|(_, f)| f.average_drop)
            .fold(0.0, f64::max);
        let max_ai = faith
            .iter()
            .map(|(_, f)| f.average_increase)
            .fold(0.0, f64::max);
        let mut c = Chart::new(
            "Average Drop - Average Increase",
            "Average Drop (%)",
            "Average Increase (%)",
            (0.0, (max_ad * 1.1).max(1.0)),
            (0.0, (max_ai * 1.1).max(1.0)),
        );
        for (i, (m, f)) in faith.iter().enumerate() {
            c.point(
                f.average_drop,
                f.average_increase,
                PALETTE[i % PALETTE.len()],
                m,
            );
        }
        write_text(&fig.join("ad_ai.svg"), &c.finish())?;

        for (m, f) in &faith {
            let mut c = Chart::new(
                &format!("Deletion / Insertion: {m}"),
                "fraction of cells",
                "class probability",
                (0.0, 1.0),
                (0.0, 1.0),
            );
            let pts = |v: &[CurvePoint]| v.iter().map(|p| (p.fraction, p.prob)).collect::<Vec<_>>();
            c.polyline(&pts(&f.deletion_curve), PALETTE[3], "deletion");
            c.polyline(&pts(&f.insertion_curve), PALETTE[2], "insertion");
            c.legend(&[
                (PALETTE[3], &format!("deletion AUC {:.3}", f.deletion_auc)),
                (PALETTE[2], &format!("insertion AUC {:.3}", f.insertion_auc)),
            ]);
            write_text(&fig.join(format!("curves_{m}.svg")), &c.finish())?;
        }
    }

    let caus: Vec<(&str, &Causality)> = report
        .methods
        .iter()
        .filter_map(|m| m.causality.as_ref().map(|c| (m.method.as_str(), c)))
        .collect();
    if !caus.is_empty() {
        let n = caus.len() as f64;
        let mut c = Chart::new(
            "Non-causal proportion",
            "",
            "proportion (%)",
            (0.0, n),
            (0.0, 100.0),
        );
        for (i, (m, k)) in caus.iter().enumerate() {
            let x = i as f64 + 0.5;
            c.bar(
                x - 0.18,
                0.34,
                100.0 * k.feature_proportion,
                PALETTE[0],
                &format!("{m} feature"),
            );
            c.bar(
                x + 0.18,
                0.34,
                100.0 * k.time_proportion,
                PALETTE[1],
                &format!("{m} time"),
            );
            c.xlabel_at(x, m);
        }
        let limit = caus[0].1.max_proportion * 100.0;
        c.hline(limit, "#d62728", &format!("{limit}%"));
        c.legend(&[(PALETTE[0], "feature axis"), (PALETTE[1], "time axis")]);
        write_text(&fig.join("causality.svg"), &c.finish())?;
    }

    if let Some(r) = &report.ranking {
        write_text(&fig.join("cd.svg"), &cd_diagram(r))?;
    }
    Ok(())
}

fn cd_diagram(r: &Ranking) -> String {
    let k = r.models.len().max(2) as f64;
    let title = match r.critical_difference {
        Some(cd) => format!("Average ranks (CD = {cd:.3}, alpha = {})", r.alpha),
        None => "Average ranks".to_string(),
    };
    let mut c = Chart::new(&title, "average rank", "", (1.0, k), (0.0, 1.0));
    let mut order: Vec<usize> = (0..r.models.len()).collect();
    order.sort_by(|&a, &b| r.average_ranks[a].total_cmp(&r.average_ranks[b]));
    for (slot, &m) in order.iter().enumerate() {
        let y = 0.9 - 0.8 * slot as f64 / order.len().max(1) as f64;
        c.point(
            r.average_ranks[m],
            y,
            PALETTE[slot % PALETTE.len()],
            &format!("{} ({:.2})", r.models[m], r.average_ranks[m]),
        );
    }
    if let Some(cd) = r.critical_difference {
        let (a, b) = (c.px(1.0), c.px(1.0 + cd));
        let y = c.py(0.97);
        c.raw(&format!(r#"<line x1="{a:.2}" y1="{y:.2}" x2="{b:.2}" y2="{y:.2}" stroke="black" stroke-width="3"/>"#));
    }
    for (g, members) in r.groups.iter().enumerate() {
        let ranks: Vec<f64> = members
            .iter()
            .filter_map(|n| {
                r.models
                    .iter()
                    .position(|m| m == n)
                    .map(|i| r.average_ranks[i])
            })
            .collect();
        let lo = ranks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ranks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = c.py(0.05 + 0.03 * g as f64);
        let (a, b) = (c.px(lo), c.px(hi));
        c.raw(&format!(r#"<line x1="{a:.2}" y1="{y:.2}" x2="{b:.2}" y2="{y:.2}" stroke="dimgray" stroke-width="4"/>"#));
    }
    c.finish()
}

/// Markdown summary of a report.
pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# tsem {} report\n", report.command);
    if let Some(d) = &report.dataset {
        let _ = writeln!(
            s,
            "dataset `{}`: {} instances, D = {}, T = {}, K = {}",
            d.name, d.instances, d.n_features, d.seq_length, d.n_classes
        );
    }
    if let Some(m) = &report.model {
        let _ = writeln!(s, "model: {} ({} parameters)", m.architecture, m.parameters);
    }
    if let Some(a) = report.accuracy {
        let _ = writeln!(s, "accuracy: {a:.4}");
    }
    if !report.methods.is_empty() {
        let _ = writeln!(
            s,
            "\n| method | AD % | AI % | deletion AUC | insertion AUC | non-causal feature | non-causal time | causal | spatiotemporal |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        for m in &report.methods {
            let f = m.faithfulness.as_ref();
            let c = m.causality.as_ref();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                m.method,
                opt(f.map(|f| f.average_drop), 2),
                opt(f.map(|f| f.average_increase), 2),
                opt(f.map(|f| f.deletion_auc), 4),
                opt(f.map(|f| f.insertion_auc), 4),
                opt(c.map(|c| c.feature_proportion), 3),
                opt(c.map(|c| c.time_proportion), 3),
                c.map_or("-".to_string(), |c| if c.pass {
                    "pass".into()
                } else {
                    "fail".into()
                }),
                opt(m.spatiotemporality.map(|r| r.spatiotemporality), 3),
            );
        }
    }
    if let Some(r) = &report.ranking {
        let _ = writeln!(s, "\n| model | average rank | wins/ties |\n|---|---|---|");
        for ((m, a), w) in r.models.iter().zip(&r.average_ranks).zip(&r.wins_ties) {
            let _ = writeln!(s, "| {m} | {a:.3} | {w} |");
        }
        if let (Some(cd), Some(q)) = (r.critical_difference, r.q) {
            let _ = writeln!(
                s,
                "\nCD = {cd:.6} (q = {q:.6}, alpha = {}, N = {})",
                r.alpha, r.n_datasets
            );
        }
        for g in &r.groups {
            let _ = writeln!(s, "- not significantly different: {}", g.join(", "));
        }
    }
    s
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tsem::attribution::stubs::{ConstantExplainer, InputExplainer};
use tsem::attribution::{
    CamContext, Explainer, ExplanationMap, Method, MethodExplainer, Normalization,
};
use tsem::data::{
    generate_synthetic, matrix_csv, save_csv, save_uea_text, split, z_normalize, MTSDataset,
    SyntheticSpec,
};
use tsem::metrics::{
    accuracy, average_drop, average_increase, bonferroni_dunn_q, causality_report,
    critical_difference, deletion_curve, insertion_curve, mask_by_explanation, rank_table,
    spatiotemporal_rates, CausalityConfig, Classifier, ConfusionCounts, Curve, CurvePoint,
    FaithfulnessSample, TiePolicy,
};
use tsem::models::{
    evaluate as eval_model, save_model, train as fit, Architecture, Model, ModelConfig, TrainConfig,
};
use tsem::optim::AdamConfig;
use tsem::{Error, Result, Tensor};

use crate::args::{
    CamArgs, DataFormat, EvaluateArgs, ExplainArgs, GenerateArgs, RankArgs, ReportArgs, Target,
    TieArg, TrainArgs, Which,
};
use crate::io::{
    load_dataset, load_model_dir, prepare, read_json, select_instances, sibling_test, write_json,
    write_text, Part, CHECKPOINT, NORMALIZATION, TRAIN_REPORT,
};
use crate::report::{
    render_figures, summary, validate, Causality, DatasetInfo, Faithfulness, MethodReport,
    ModelInfo, Ranking, Report,
};
use crate::svg;

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_features: a.n_features,
        seq_length: a.seq_length,
        n_classes: a.n_classes,
        n_per_class: a.n_per_class,
        bump_width: a.bump_width,
        amplitude: a.amplitude,
        noise: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    let (train, test) = split(&ds, a.train_ratio, a.seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "train ratio {} leaves one split empty",
            a.train_ratio
        )));
    }
    match a.format {
        DataFormat::Csv => {
            save_csv(&train, a.out.join("train"))?;
            save_csv(&test, a.out.join("test"))?;
        }
        DataFormat::Ts => {
            std::fs::create_dir_all(&a.out)?;
            save_uea_text(&train, a.out.join("train.ts"))?;
            save_uea_text(&test, a.out.join("test.ts"))?;
        }
    }
    write_json(
        &a.out.join("generator.json"),
        &serde_json::json!({ "config": a, "generator": spec }),
    )?;
    println!(
        "wrote {} train and {} test instances (D = {}, T = {}, K = {}) to {}",
        train.len(),
        test.len(),
        a.n_features,
        a.seq_length,
        a.n_classes,
        a.out.display()
    );
    Ok(())
}

fn same_classes(a: &MTSDataset, b: &MTSDataset) -> Result<()> {
    if a.class_names() != b.class_names()
        || a.n_features() != b.n_features()
        || a.seq_length() != b.seq_length()
    {
        return Err(Error::Dataset(format!(
            "train and test sets disagree: classes {:?} vs {:?}, shape {}x{} vs {}x{}",
            a.class_names(),
            b.class_names(),
            a.n_features(),
            a.seq_length(),
            b.n_features(),
            b.seq_length()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a TrainArgs,
    model: &'a ModelConfig,
    class_names: &'a [String],
    train: &'a tsem::models::TrainReport,
    train_accuracy: f64,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let arch: Architecture = a.arch.parse()?;
    let raw = load_dataset(&a.data, Part::Train)?;
    let test_path = a.test.clone().or_else(|| sibling_test(&a.data));
    let (train_ds, stats) = z_normalize(&raw)?;
    let test_ds = match &test_path {
        Some(p) => {
            let t = load_dataset(p, Part::Test)?;
            same_classes(&raw, &t)?;
            Some(stats.apply(&t)?)
        }
        None => None,
    };

    let mut cfg = ModelConfig::new(
        arch,
        train_ds.n_features(),
        train_ds.seq_length(),
        train_ds.n_classes(),
    );
    cfg.window_fraction = a.window_fraction;
    cfg.filters_2d = a.filters_2d;
    cfg.filters_1d = a.filters_1d;
    cfg.seed = a.seed;
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        seed: a.seed,
        patience: (a.patience > 0).then_some(a.patience),
    };
    let rep = fit(&mut model, &train_ds, None, &tc)?;
    let (_, train_accuracy) = eval_model(&model, &train_ds)?;
    let test = test_ds
        .as_ref()
        .map(|t| eval_model(&model, t))
        .transpose()?;

    std::fs::create_dir_all(&a.out)?;
    save_model(&model, a.out.join(CHECKPOINT))?;
    write_json(&a.out.join(NORMALIZATION), &stats)?;
    write_json(
        &a.out.join(TRAIN_REPORT),
        &TrainOutput {
            config: a,
            model: model.config(),
            class_names: train_ds.class_names(),
            train: &rep,
            train_accuracy,
            test_loss: test.map(|t| t.0),
            test_accuracy: test.map(|t| t.1),
        },
    )?;
    let mut line = format!(
        "{}: {} parameters, {} epochs, final loss {:.4}, train accuracy {:.4}",
        arch,
        model.param_count(),
        rep.epochs.len(),
        rep.final_stats().loss,
        train_accuracy
    );
    if let Some((_, acc)) = test {
        let _ = write!(line, ", test accuracy {acc:.4}");
    }
    println!("{line}");
    Ok(())
}

enum Choice {
    Cam(Method),
    Constant,
    Input,
}

fn parse_methods(list: &str) -> Result<Vec<Choice>> {
    if list.trim() == "all" {
        return Ok(Method::ALL.into_iter().map(Choice::Cam).collect());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(match name {
            "constant" => Choice::Constant,
            "input" => Choice::Input,
            _ => Choice::Cam(name.parse().map_err(|_| Error::UnknownMethod {
                name: name.to_string(),
                valid: format!("{}, constant, input", Method::valid_ids()),
            })?),
        });
    }
    if out.is_empty() {
        return Err(Error::Usage("no methods given".into()));
    }
    Ok(out)
}

/// Wraps stubs so they honour the requested normalization like CAM methods do.
struct Normalized<E> {
    inner: E,
    mode: Normalization,
}

impl<E: Explainer> Explainer for Normalized<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn explain_batch(
        &self,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ExplanationMap>> {
        Ok(self
            .inner
            .explain_batch(instances, classes)?
            .into_iter()
            .map(|m| m.normalized(self.mode))
            .collect())
    }
}

fn explainers<'m>(
    cam: &CamArgs,
    model: &'m Model,
    mode: Normalization,
) -> Result<Vec<Box<dyn Explainer + 'm>>> {
    let mut ctx = CamContext::new(model);
    ctx.activation = cam.activation.clone();
    ctx.samples = cam.samples;
    ctx.noise = cam.sigma;
    ctx.steps = cam.steps;
    ctx.seed = cam.seed;
    ctx.normalization = mode;
    ctx.validate()?;
    Ok(parse_methods(&cam.methods)?
        .into_iter()
        .map(|c| -> Box<dyn Explainer + 'm> {
            match c {
                Choice::Cam(m) => Box::new(MethodExplainer::new(m, ctx.clone())),
                Choice::Constant => Box::new(Normalized {
                    inner: ConstantExplainer,
                    mode,
                }),
                Choice::Input => Box::new(Normalized {
                    inner: InputExplainer,
                    mode,
                }),
            }
        })
        .collect())
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    let mode: Normalization = a.normalization.parse()?;
    let md = load_model_dir(&a.model)?;
    let ds = prepare(load_dataset(&a.data, Part::Test)?, &md)?;
    let idx = select_instances(&a.cam.instances, ds.len())?;
    let exps = explainers(&a.cam, &md.model, mode)?;
    let xs: Vec<Tensor> = idx.iter().map(|&i| ds.instance(i).clone()).collect();
    let classes = match a.target {
        Target::Predicted => md.model.predict_classes(&xs)?,
        Target::Label => idx.iter().map(|&i| ds.label(i)).collect(),
    };
    let width = ds.len().to_string().len().max(4);
    let mut written = Vec::new();
    for e in &exps {
        let id = e.id();
        let maps = e.explain_batch(&xs, &classes)?;
        for ((&i, x), m) in idx.iter().zip(&xs).zip(&maps) {
            let rel = format!("maps/{id}/{i:0width$}.csv");
            write_text(&a.out.join(&rel), &matrix_csv(&m.values))?;
            if !a.no_figures {
                let title = format!(
                    "{id}, instance {i}, class {}",
                    ds.class_names()[m.target_class]
                );
                write_text(
                    &a.out.join(format!("figures/{id}/{i:0width$}.svg")),
                    &svg::overlay(&title, x, &m.values),
                )?;
            }
        }
        written.push(id);
    }
    write_json(
        &a.out.join("explain.json"),
        &serde_json::json!({ "config": a, "instances": idx, "classes": classes, "methods": written }),
    )?;
    println!(
        "wrote {} maps for {} methods to {}",
        idx.len() * written.len(),
        written.len(),
        a.out.display()
    );
    Ok(())
}

fn mean_curve(curves: &[Curve]) -> Vec<CurvePoint> {
    let n = curves.len() as f64;
    curves[0]
        .points
        .iter()
        .enumerate()
        .map(|(j, p)| CurvePoint {
            fraction: p.fraction,
            prob: curves.iter().map(|c| c.points[j].prob).sum::<f64>() / n,
        })
        .collect()
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("fraction,prob\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.fraction, p.prob);
    }
    s
}

fn faithfulness(
    model: &Model,
    xs: &[Tensor],
    classes: &[usize],
    maps: &[ExplanationMap],
    step: f64,
) -> Result<Faithfulness> {
    let probs_of = |inputs: &[Tensor]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for (chunk, cs) in inputs.chunks(64).zip(classes.chunks(64)) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let p = model.predict_batch(&Tensor::stack(&refs)?)?;
            out.extend(cs.iter().enumerate().map(|(r, &c)| p.row(r)[c]));
        }
        Ok(out)
    };
    let masked: Vec<Tensor> = xs
        .iter()
        .zip(maps)
        .map(|(x, m)| mask_by_explanation(x, &m.values))
        .collect::<Result<_>>()?;
    let (y, o) = (probs_of(xs)?, probs_of(&masked)?);
    let samples: Vec<FaithfulnessSample> = y
        .iter()
        .zip(&o)
        .map(|(&y, &o)| FaithfulnessSample { y, o })
        .collect();
    let clf: &dyn Classifier = model;
    let curves: Vec<(Curve, Curve)> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            Ok((
                deletion_curve(clf, &xs[i], classes[i], &maps[i].values, step)?,
                insertion_curve(clf, &xs[i], classes[i], &maps[i].values, step)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (del, ins): (Vec<Curve>, Vec<Curve>) = curves.into_iter().unzip();
    let n = xs.len() as f64;
    Ok(Faithfulness {
        average_drop: average_drop(&samples),
        average_increase: average_increase(&samples),
        deletion_auc: del.iter().map(|c| c.auc).sum::<f64>() / n,
        insertion_auc: ins.iter().map(|c| c.auc).sum::<f64>() / n,
        deletion_curve: mean_curve(&del),
        insertion_curve: mean_curve(&ins),
    })
}

fn dataset_info(ds: &MTSDataset) -> DatasetInfo {
    DatasetInfo {
        name: ds.name().to_string(),
        instances: ds.len(),
        n_features: ds.n_features(),
        seq_length: ds.seq_length(),
        n_classes: ds.n_classes(),
    }
}

fn finish_report(report: &Report, out: &Path) -> Result<()> {
    let value = serde_json::to_value(report).map_err(|e| Error::Numeric(e.to_string()))?;
    validate(&value)?;
    write_json(&out.join("report.json"), &value)?;
    render_figures(report, out)?;
    let text = summary(report);
    write_text(&out.join("summary.md"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if !(a.step_fraction > 0.0 && a.step_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "step fraction {} outside (0, 0.5]",
            a.step_fraction
        )));
    }
    let md = load_model_dir(&a.model)?;
    let full = prepare(load_dataset(&a.data, Part::Test)?, &md)?;
    let idx = select_instances(&a.cam.instances, full.len())?;
    let ds = full.subset(&idx);
    let model = &md.model;
    let exps = explainers(&a.cam, model, Normalization::Raw)?;
    let xs = ds.instances();
    let predicted = model.predict_classes(xs)?;

    let mut report = Report::new("evaluate", a);
    report.dataset = Some(dataset_info(&ds));
    report.model = Some(ModelInfo {
        architecture: model.config().architecture.id().to_string(),
        parameters: model.param_count(),
        checksum: format!("{:016x}", model.params().checksum()),
    });
    report.accuracy = Some(accuracy(&ConfusionCounts::from_predictions(
        &predicted,
        ds.labels(),
    )?)?);

    let want = |w: Which| a.which == w || a.which == Which::All;
    for e in &exps {
        let id = e.id();
        let mut m = MethodReport {
            method: id.clone(),
            instances: ds.len(),
            faithfulness: None,
            causality: None,
            spatiotemporality: None,
        };
        if want(Which::Faithfulness) || want(Which::Spatiotemporality) {
            let maps = e.explain_batch(xs, &predicted)?;
            if want(Which::Faithfulness) {
                let f = faithfulness(model, xs, &predicted, &maps, a.step_fraction)?;
                write_text(
                    &a.out.join(format!("curves/{id}_deletion.csv")),
                    &curve_csv(&f.deletion_curve),
                )?;
                write_text(
                    &a.out.join(format!("curves/{id}_insertion.csv")),
                    &curve_csv(&f.insertion_curve),
                )?;
                m.faithfulness = Some(f);
            }
            if want(Which::Spatiotemporality) {
                m.spatiotemporality = Some(spatiotemporal_rates(maps.iter().map(|m| &m.values)));
            }
        }
        if want(Which::Causality) {
            let cfg = CausalityConfig {
                threshold: a.threshold,
                max_proportion: a.max_proportion,
                seed: a.cam.seed,
            };
            let rep = causality_report(model, e.as_ref(), &ds, &cfg)?;
            let mut csv = String::from("instance,axis,step,r,degenerate,non_causal\n");
            for r in &rep.records {
                let axis = if r.axis == tsem::metrics::Axis::Feature {
                    "feature"
                } else {
                    "time"
                };
                let _ = writeln!(
                    csv,
                    "{},{axis},{},{},{},{}",
                    idx[r.instance], r.step, r.r, r.degenerate, r.non_causal
                );
            }
            write_text(&a.out.join(format!("causality/{id}.csv")), &csv)?;
            m.causality = Some(Causality {
                feature_proportion: rep.feature_proportion,
                time_proportion: rep.time_proportion,
                max_proportion: a.max_proportion,
                pass: rep.pass,
                chi_square: rep.chi_square,
                records: rep.records.len(),
            });
        }
        report.methods.push(m);
    }
    finish_report(&report, &a.out)
}

/// Model names, dataset names and accuracies[dataset][model].
pub type AccuracyTable = (Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>);

/// Reads an accuracy table: a header `dataset,<model>,...` and one row per
/// dataset; empty cells are missing.
pub fn read_accuracy_table(path: &Path) -> Result<AccuracyTable> {
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "accuracy table {} does not exist",
            path.display()
        )));
    }
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(1, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let models: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if models.is_empty() {
        return Err(parse_err(
            1,
            "expected `dataset` followed by at least one model column".into(),
        ));
    }
    let (mut datasets, mut rows) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != models.len() + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", models.len() + 1, rec.len()),
            ));
        }
        datasets.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                if v.is_empty() {
                    Ok(None)
                } else {
                    v.parse::<f64>()
                        .map(Some)
                        .map_err(|_| parse_err(line, format!("`{v}` is not a number")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has no datasets",
            path.display()
        )));
    }
    Ok((models, datasets, rows))
}

pub fn rank(a: &RankArgs) -> Result<()> {
    bonferroni_dunn_q(2, a.alpha)?;
    let (models, _datasets, rows) = read_accuracy_table(&a.input)?;
    let policy = match a.tie_policy {
        TieArg::Average => TiePolicy::Average,
        TieArg::Min => TiePolicy::Min,
    };
    let table = rank_table(&models, &rows, policy)?;
    if let Some(m) = table.average_ranks.iter().position(|r| r.is_nan()) {
        return Err(Error::Dataset(format!(
            "model `{}` has no results",
            models[m]
        )));
    }
    let cd = (models.len() >= 2)
        .then(|| critical_difference(&table.average_ranks, rows.len(), a.alpha))
        .transpose()?;
    let mut csv = String::from("model,average_rank,wins_ties\n");
    for ((m, r), w) in models
        .iter()
        .zip(&table.average_ranks)
        .zip(&table.wins_ties)
    {
        let _ = writeln!(csv, "{m},{r},{w}");
    }
    write_text(&a.out.join("ranks.csv"), &csv)?;
    let mut report = Report::new("rank", a);
    report.ranking = Some(Ranking {
        models: models.clone(),
        n_datasets: rows.len(),
        tie_policy: serde_json::to_value(a.tie_policy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        alpha: a.alpha,
        average_ranks: table.average_ranks.clone(),
        wins_ties: table.wins_ties.clone(),
        critical_difference: cd.as_ref().map(|c| c.cd),
        q: cd.as_ref().map(|c| c.q),
        groups: cd
            .map(|c| {
                c.groups
                    .iter()
                    .map(|g| g.iter().map(|&i| models[i].clone()).collect())
                    .collect()
            })
            .unwrap_or_default(),
    });
    finish_report(&report, &a.out)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let path = if a.input.is_dir() {
        a.input.join("report.json")
    } else {
        a.input.clone()
    };
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "report {} does not exist",
            path.display()
        )));
    }
    let value: serde_json::Value = read_json(&path)?;
    validate(&value)?;
    let report: Report =
        serde_json::from_value(value).map_err(|e| Error::Dataset(e.to_string()))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    render_figures(&report, &out)?;
    let text = summary(&report);
    write_text(&out.join("summary.md"), &text)?;
    print!("{text}");
    Ok(())
}

//! Directory-of-CSV layout.
//!
//! ```text
//! dir/
//!   labels.csv        # header `instance_id,label`, one row per instance
//!   classes.txt       # optional: class names in id order, one per line
//!   <instance_id>.csv # D headerless rows of T comma-separated values
//! ```
//!
//! Without `classes.txt` class ids follow the sorted label strings (numeric
//! order when every label parses as an integer).

use std::fs;
use std::path::Path;

use super::MTSDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_csv(dir: impl AsRef<Path>) -> Result<MTSDataset> {
    let dir = dir.as_ref();
    let manifest = dir.join("labels.csv");
    if !manifest.is_file() {
        return Err(Error::Dataset(format!(
            "missing manifest {}",
            manifest.display()
        )));
    }
    let text = fs::read_to_string(&manifest)?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if no == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: manifest.clone(),
            line: no + 1,
            msg: "expected `instance_id,label`".into(),
        })?;
        rows.push((id.trim().to_string(), label.trim().to_string()));
    }

    let classes_path = dir.join("classes.txt");
    let class_names: Vec<String> = if classes_path.is_file() {
        fs::read_to_string(&classes_path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        let mut names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
        names.sort();
        names.dedup();
        if names.iter().all(|n| n.parse::<i64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<i64>().unwrap());
        }
        names
    };

    let mut instances = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (id, label) in &rows {
        let path = dir.join(format!("{id}.csv"));
        let content = fs::read_to_string(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let mut matrix = Vec::new();
        for (no, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            path: path.clone(),
                            line: no + 1,
                            msg: format!("`{}` is not a finite number", tok.trim()),
                        })
                })
                .collect();
            matrix.push(row?);
        }
        instances.push(Tensor::from_rows(&matrix)?);
        let class = class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Dataset(format!("instance {id}: unknown label `{label}`")))?;
        labels.push(class);
    }
    let name = dir
        .file_name()
        .map_or(String::new(), |s| s.to_string_lossy().into_owned());
    MTSDataset::new(name, instances, labels, class_names)
}

/// Writes the layout above, including `classes.txt`.
pub fn save_csv(ds: &MTSDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let width = ds.len().to_string().len().max(4);
    let mut manifest = String::from("instance_id,label\n");
    for (i, (x, &l)) in ds.instances().iter().zip(ds.labels()).enumerate() {
        let id = format!("{i:0width$}");
        manifest.push_str(&format!("{id},{}\n", ds.class_names()[l]));
        fs::write(dir.join(format!("{id}.csv")), matrix_csv(x))?;
    }
    fs::write(dir.join("labels.csv"), manifest)?;
    fs::write(dir.join("classes.txt"), ds.class_names().join("\n") + "\n")?;
    Ok(())
}

/// Headerless CSV of a (rows, cols) tensor in shortest round-trip form.
pub fn matrix_csv(x: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..x.shape()[0] {
        let row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

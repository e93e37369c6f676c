//! The UEA/UCR archive text layout (`.ts`).
//!
//! ```text
//! # comment
//! @problemName BasicMotions
//! @timeStamps false
//! @univariate false
//! @dimensions 2
//! @equalLength true
//! @seriesLength 4
//! @classLabel true walk run
//! @data
//! 0.1,0.2,0.3,0.4:1,2,3,4:walk
//! ```
//!
//! One instance per line after `@data`: channels separated by `:`, values by
//! `,`, the class label last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::MTSDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_uea_text(path: impl AsRef<Path>) -> Result<MTSDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_uea_text(&text, path)
}

#[derive(Default)]
struct Header {
    name: Option<String>,
    dimensions: Option<usize>,
    length: Option<usize>,
    labels: Option<Vec<String>>,
}

/// Parses `.ts` content; `origin` is only used in error messages.
pub fn parse_uea_text(text: &str, origin: &Path) -> Result<MTSDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        msg,
    };
    let mut header = Header::default();
    let mut in_data = false;
    let mut instances = Vec::new();
    let mut labels = Vec::new();

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(directive) = line.strip_prefix('@') else {
                return Err(err(
                    line_no,
                    format!("expected a @directive, found `{line}`"),
                ));
            };
            let mut parts = directive.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            let flag = |v: &[&str]| v.first().map(|s| s.eq_ignore_ascii_case("true"));
            match key.as_str() {
                "problemname" => header.name = rest.first().map(|s| s.to_string()),
                "dimensions" => {
                    header.dimensions = Some(parse_count(&rest, line_no, &err)?);
                }
                "serieslength" => header.length = Some(parse_count(&rest, line_no, &err)?),
                "classlabel" => {
                    if flag(&rest) != Some(true) {
                        return Err(err(
                            line_no,
                            "only labelled classification data is supported".into(),
                        ));
                    }
                    if rest.len() < 2 {
                        return Err(err(
                            line_no,
                            "@classLabel true needs at least one label".into(),
                        ));
                    }
                    header.labels = Some(rest[1..].iter().map(|s| s.to_string()).collect());
                }
                "missing" if flag(&rest) == Some(true) => {
                    return Err(err(
                        line_no,
                        "series with missing values are not supported".into(),
                    ));
                }
                "equallength" if flag(&rest) == Some(false) => {
                    return Err(err(
                        line_no,
                        "variable-length series are not supported".into(),
                    ));
                }
                "timestamps" if flag(&rest) == Some(true) => {
                    return Err(err(line_no, "timestamped series are not supported".into()));
                }
                "data" => {
                    if header.labels.is_none() {
                        return Err(err(line_no, "@data before @classLabel".into()));
                    }
                    in_data = true;
                }
                _ => {}
            }
            continue;
        }

        let class_names = header.labels.as_ref().unwrap();
        let (series, label) = line
            .rsplit_once(':')
            .ok_or_else(|| err(line_no, "missing `:label` suffix".into()))?;
        let label = label.trim();
        let class = class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| err(line_no, format!("unknown class label `{label}`")))?;

        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (d, channel) in series.split(':').enumerate() {
            let mut row = Vec::new();
            for tok in channel.split(',') {
                let tok = tok.trim();
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(line_no, format!("channel {d}: `{tok}` is not a number")))?;
                if !v.is_finite() {
                    return Err(err(
                        line_no,
                        format!("channel {d}: non-finite value `{tok}`"),
                    ));
                }
                row.push(v);
            }
            rows.push(row);
        }
        let dims = *header.dimensions.get_or_insert(rows.len());
        if rows.len() != dims {
            return Err(err(
                line_no,
                format!("{} channels, header declares {dims}", rows.len()),
            ));
        }
        let len = *header.length.get_or_insert(rows[0].len());
        if let Some((d, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != len) {
            return Err(err(
                line_no,
                format!("channel {d} has {} values, expected {len}", r.len()),
            ));
        }
        instances.push(Tensor::from_rows(&rows)?);
        labels.push(class);
    }

    if !in_data {
        return Err(err(text.lines().count(), "no @data section".into()));
    }
    let name = header.name.unwrap_or_else(|| {
        origin
            .file_stem()
            .map_or(String::new(), |s| s.to_string_lossy().into())
    });
    MTSDataset::new(name, instances, labels, header.labels.unwrap())
}

fn parse_count(rest: &[&str], line: usize, err: &impl Fn(usize, String) -> Error) -> Result<usize> {
    rest.first()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| err(line, format!("expected a positive count, got {rest:?}")))
}

/// Writes `ds` in `.ts` layout. Values use the shortest exact decimal form,
/// so loading the file back reproduces every value bit for bit.
pub fn save_uea_text(ds: &MTSDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let name = if ds.name().is_empty() {
        "dataset"
    } else {
        ds.name()
    };
    let _ = writeln!(
        out,
        "@problemName {}",
        name.replace(char::is_whitespace, "_")
    );
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", ds.n_features() == 1);
    let _ = writeln!(out, "@dimensions {}", ds.n_features());
    let _ = writeln!(out, "@equalLength true");
    let _ = writeln!(out, "@seriesLength {}", ds.seq_length());
    let _ = writeln!(out, "@classLabel true {}", ds.class_names().join(" "));
    let _ = writeln!(out, "@data");
    for (x, &l) in ds.instances().iter().zip(ds.labels()) {
        for d in 0..x.shape()[0] {
            let row: Vec<String> = x.row(d).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push(':');
        }
        out.push_str(&ds.class_names()[l]);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
# two instances, two channels, four steps
@problemName Tiny
@timeStamps false
@missing false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 4
@classLabel true up down
@data
1,2,3,4:0.5,0.25,0,-1:up
-1,-2,-3,-4:10,20,30,40:down
";

    fn parse(text: &str) -> Result<MTSDataset> {
        parse_uea_text(text, Path::new("fixture.ts"))
    }

    #[test]
    fn parses_fixture_exactly() {
        let ds = parse(FIXTURE).unwrap();
        assert_eq!(ds.name(), "Tiny");
        assert_eq!(
            (ds.len(), ds.n_features(), ds.seq_length(), ds.n_classes()),
            (2, 2, 4, 2)
        );
        assert_eq!(ds.instance(0).data(), &[1., 2., 3., 4., 0.5, 0.25, 0., -1.]);
        assert_eq!(ds.instance(1).row(1), &[10., 20., 30., 40.]);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn header_payload_mismatch_reports_first_bad_line() {
        let bad = FIXTURE.replace("-1,-2,-3,-4:10,20,30,40:down", "-1,-2,-3,-4:down");
        assert_eq!(line_of(parse(&bad).unwrap_err()), 12);
        let ragged = FIXTURE.replace("1,2,3,4:0.5", "1,2,3:0.5");
        assert_eq!(line_of(parse(&ragged).unwrap_err()), 11);
    }

    #[test]
    fn rejects_unknown_labels_and_nan() {
        let unknown = FIXTURE.replace(":down", ":sideways");
        assert_eq!(line_of(parse(&unknown).unwrap_err()), 12);
        let nan = FIXTURE.replace("0.25", "NaN");
        assert_eq!(line_of(parse(&nan).unwrap_err()), 11);
        let missing = FIXTURE.replace("0.25", "?");
        assert_eq!(line_of(parse(&missing).unwrap_err()), 11);
    }

    #[test]
    fn save_then_load_is_exact() {
        let ds = parse(FIXTURE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ts");
        save_uea_text(&ds, &path).unwrap();
        assert_eq!(load_uea_text(&path).unwrap(), ds);
    }
}

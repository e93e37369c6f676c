use serde::{Deserialize, Serialize};

use super::stats::{BONFERRONI_DUNN_005, BONFERRONI_DUNN_010};
use crate::error::{Error, Result};

/// How tied accuracies on one dataset share ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Tied models all get the mean of the positions they occupy.
    #[default]
    Average,
    /// Tied models all get the best position they occupy.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    /// ranks[dataset][model]; `None` where the accuracy is missing.
    pub ranks: Vec<Vec<Option<f64>>>,
    pub average_ranks: Vec<f64>,
    pub wins_ties: Vec<usize>,
}

/// Ranks models within each dataset (rank 1 = highest accuracy), averages
/// over datasets and counts the datasets on which each model attains the
/// best accuracy. Missing entries are left out of that dataset's ranking
/// and of the model's average.
pub fn rank_table(
    models: &[String],
    accuracies: &[Vec<Option<f64>>],
    policy: TiePolicy,
) -> Result<RankTable> {
    let k = models.len();
    if k == 0 || accuracies.is_empty() {
        return Err(Error::Usage(
            "rank table needs at least one model and one dataset".into(),
        ));
    }
    let mut ranks = Vec::with_capacity(accuracies.len());
    let mut wins_ties = vec![0; k];
    for (d, row) in accuracies.iter().enumerate() {
        if row.len() != k {
            return Err(Error::dim(
                "rank_table",
                format!("dataset {d} has {} entries for {k} models", row.len()),
            ));
        }
        if row.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "dataset {d} has a non-finite accuracy"
            )));
        }
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        let best = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r: Vec<Option<f64>> = row
            .iter()
            .map(|v| {
                v.map(|v| {
                    let better = present.iter().filter(|&&w| w > v).count() as f64;
                    let tied = present.iter().filter(|&&w| w == v).count() as f64;
                    match policy {
                        TiePolicy::Average => better + (tied + 1.0) / 2.0,
                        TiePolicy::Min => better + 1.0,
                    }
                })
            })
            .collect();
        for (m, v) in row.iter().enumerate() {
            if *v == Some(best) {
                wins_ties[m] += 1;
            }
        }
        ranks.push(r);
    }
    let average_ranks = (0..k)
        .map(|m| {
            let rs: Vec<f64> = ranks
                .iter()
                .filter_map(|r: &Vec<Option<f64>>| r[m])
                .collect();
            if rs.is_empty() {
                f64::NAN
            } else {
                rs.iter().sum::<f64>() / rs.len() as f64
            }
        })
        .collect();
    Ok(RankTable {
        models: models.to_vec(),
        ranks,
        average_ranks,
        wins_ties,
    })
}

/// Tabulated two-tailed Bonferroni-Dunn critical value for k compared
/// methods, alpha in {0.05, 0.1}, 2 <= k <= 20.
pub fn bonferroni_dunn_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if alpha == 0.05 {
        &BONFERRONI_DUNN_005
    } else if alpha == 0.1 {
        &BONFERRONI_DUNN_010
    } else {
        return Err(Error::Config(format!(
            "alpha {alpha} is not tabulated (0.05, 0.1)"
        )));
    };
    if !(2..=20).contains(&k) {
        return Err(Error::Config(format!(
            "k = {k} outside the tabulated range 2..=20"
        )));
    }
    Ok(table[k - 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalDifference {
    pub cd: f64,
    pub q: f64,
    /// Maximal runs of methods (indices, best rank first) whose rank spread
    /// is below the critical difference.
    pub groups: Vec<Vec<usize>>,
}

/// CD = q_alpha(k) sqrt(k (k + 1) / (6 N)) for k = `avg_ranks.len()` methods.
pub fn critical_difference(
    avg_ranks: &[f64],
    n_datasets: usize,
    alpha: f64,
) -> Result<CriticalDifference> {
    let k = avg_ranks.len();
    if n_datasets == 0 {
        return Err(Error::Usage(
            "critical difference needs at least one dataset".into(),
        ));
    }
    let q = bonferroni_dunn_q(k, alpha)?;
    let cd = q * ((k * (k + 1)) as f64 / (6.0 * n_datasets as f64)).sqrt();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| avg_ranks[a].total_cmp(&avg_ranks[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last_end = 0;
    for i in 0..k {
        let mut j = i;
        while j + 1 < k && avg_ranks[order[j + 1]] - avg_ranks[order[i]] < cd {
            j += 1;
        }
        if j > i && j > last_end {
            groups.push(order[i..=j].to_vec());
            last_end = j;
        }
    }
    Ok(CriticalDifference { cd, q, groups })
}

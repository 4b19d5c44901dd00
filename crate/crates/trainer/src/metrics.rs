//! Accuracy, mean average precision and the per-step metrics log.

use std::path::Path;

use serde::Serialize;

use mamlab_core::objectives::LossBreakdown;
use mamlab_core::tensor::Tensor;

use crate::error::{TrainError, TrainResult};

fn input_err<T>(msg: String) -> TrainResult<T> {
    Err(TrainError::Other(format!("input error: {msg}")))
}

/// Fraction of rows whose highest score (first on ties) is the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> TrainResult<f64> {
    if scores.rows() == 0 || scores.rows() != labels.len() {
        return input_err(format!("{} score rows for {} labels", scores.rows(), labels.len()));
    }
    let hits = (0..scores.rows())
        .filter(|&r| {
            let row = scores.row(r);
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == labels[r]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision of one ranking: the mean, over positives, of the
/// precision at that positive's rank. Ties keep the original order.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|p| **p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Macro average of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> TrainResult<f64> {
    if scores.shape() != labels.shape() || scores.shape().len() != 2 {
        return input_err(format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()));
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut aps = Vec::new();
    for c in 0..cols {
        let s: Vec<f64> = (0..rows).map(|r| scores.data()[r * cols + c]).collect();
        let p: Vec<bool> = (0..rows).map(|r| labels.data()[r * cols + c] > 0.5).collect();
        if let Some(ap) = average_precision(&s, &p) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return input_err("no class has a positive example".into());
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One CSV line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mode: String,
    pub target_term: Option<f64>,
    pub cls_term: Option<f64>,
    pub recon_term: Option<f64>,
    pub total: Option<f64>,
    pub acc: Option<f64>,
    pub map: Option<f64>,
    pub realized_gamma: Option<f64>,
    pub seconds: Option<f64>,
}

impl MetricsRow {
    pub fn from_breakdown(step: usize, mode: &str, b: &LossBreakdown, gamma: Option<f64>) -> Self {
        Self {
            step,
            mode: mode.to_string(),
            target_term: b.target_term,
            cls_term: b.cls_term,
            recon_term: b.recon_term,
            total: Some(b.total),
            realized_gamma: gamma,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    /// Single-label sets only.
    pub accuracy: Option<f64>,
    pub map: f64,
    pub samples: usize,
}

/// Everything a run reports besides its checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub breakdowns: Vec<LossBreakdown>,
    /// Objective on a fixed probe batch before the first and after the last step.
    pub probe_initial: Option<f64>,
    pub probe_final: Option<f64>,
    pub eval: Option<EvalMetrics>,
    pub train_accuracy: Option<f64>,
    pub realized_gamma: Option<f64>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn write_csv(&self, path: &Path) -> TrainResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranked_average_precision() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn perfect_scores_give_one() {
        let labels = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mean_average_precision(&labels, &labels).unwrap(), 1.0);
        let scores = Tensor::matrix(2, 3, vec![0.1, 0.7, 0.2, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(accuracy(&scores, &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&scores, &[1, 2]).unwrap(), 0.5);
        let none = Tensor::zeros(&[3, 2]);
        assert!(mean_average_precision(&none, &none).is_err());
    }

    #[test]
    fn csv_leaves_absent_terms_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let b = LossBreakdown { recon_term: Some(0.5), total: 0.5, ..LossBreakdown::default() };
        let report = MetricsReport { rows: vec![MetricsRow::from_breakdown(3, "mam", &b, Some(0.4))], ..Default::default() };
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "step,mode,target_term,cls_term,recon_term,total,acc,map,realized_gamma,seconds\n3,mam,,,0.5,0.5,,,0.4,\n"
        );
    }
}

use serde::{Deserialize, Serialize};

use super::bench::ThroughputReport;
use crate::bin2img::NUM_CLASSES;
use crate::cascade::CascadeModel;
use crate::data::{load_split, ClassIndex, Manifest, Split};
use crate::error::{Error, Result};

pub const PAPER_ACCURACY: f64 = 96.6;
pub const PAPER_IPS: f64 = 2370.0;

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub Vec<Vec<u64>>);

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self(vec![vec![0; NUM_CLASSES]; NUM_CLASSES])
    }
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.0[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.0[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.0.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub paper_accuracy: f64,
    pub paper_ips: f64,
}

impl Default for References {
    fn default() -> Self {
        Self {
            paper_accuracy: PAPER_ACCURACY,
            paper_ips: PAPER_IPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub throughput: Option<ThroughputReport>,
    pub references: References,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `(truth, predicted)` label pairs of the 26-class table.
pub fn score(pairs: &[(usize, usize)], classes: &ClassIndex) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut confusion = ConfusionMatrix::default();
    for &(t, p) in pairs {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::InvalidInput(format!("label pair ({t}, {p}) out of range")));
        }
        confusion.record(t, p);
    }
    let per_class = (0..NUM_CLASSES)
        .map(|c| ClassMetrics {
            name: classes.name(c).unwrap_or_default().to_string(),
            precision: ratio(confusion.0[c][c], confusion.col_sum(c)),
            recall: ratio(confusion.0[c][c], confusion.row_sum(c)),
            support: confusion.row_sum(c),
        })
        .collect();
    Ok(MetricsReport {
        accuracy: ratio(confusion.trace(), confusion.total()),
        per_class,
        confusion,
        throughput: None,
        references: References::default(),
    })
}

/// 26-way evaluation of the cascade on one split of a labelled manifest.
/// Malware the first stage calls benign is scored in the benign column.
pub fn evaluate(cascade: &CascadeModel, manifest: &Manifest, split: Option<Split>, workers: usize) -> Result<MetricsReport> {
    let data = load_split(manifest, split)?;
    let classes = cascade.class_index();
    let truth = data
        .labels
        .iter()
        .map(|&l| {
            let name = manifest.class_index.name(l).unwrap_or_default();
            classes
                .label_of(name)
                .ok_or_else(|| Error::Config(format!("class {name} is unknown to the cascade")))
        })
        .collect::<Result<Vec<_>>>()?;
    let verdicts = cascade.classify_batch(&data.images, workers)?;
    let pairs: Vec<(usize, usize)> = truth
        .into_iter()
        .zip(&verdicts)
        .map(|(t, v)| (t, v.label(classes)))
        .collect();
    score(&pairs, classes)
}

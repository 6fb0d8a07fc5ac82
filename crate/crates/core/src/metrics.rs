//! Overlap metrics between a predicted and a reference binary mask.
//!
//! When a metric's denominator is zero, the masks agree trivially (nothing
//! to find, nothing predicted) and the metric is reported as 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

const MODULE: &str = "metrics";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn scores(&self) -> Scores {
        Scores {
            precision: self.precision(),
            recall: self.recall(),
            iou: self.iou(),
            dice: self.dice(),
            accuracy: self.accuracy(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Voxelwise confusion counts of `pred` against `gt`.
pub fn confusion(pred: &Volume3D, gt: &Volume3D) -> Result<ConfusionCounts> {
    pred.grid().ensure_same(gt.grid(), "prediction and reference")?;
    pred.ensure_binary(MODULE, "prediction")?;
    gt.ensure_binary(MODULE, "reference")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
}

impl Scores {
    fn values(&self) -> [f64; 5] {
        [self.precision, self.recall, self.iou, self.dice, self.accuracy]
    }
}

/// Per-case scores plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub cases: Vec<(String, Scores)>,
    pub mean: Scores,
}

impl BatchReport {
    /// Tab-separated table with a header, one row per case and a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case\tprecision\trecall\tiou\tdice\taccuracy\n");
        let rows = self.cases.iter().map(|(n, s)| (n.as_str(), s));
        for (name, s) in rows.chain(std::iter::once(("mean", &self.mean))) {
            let _ = write!(out, "{name}");
            for v in s.values() {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every `(name, prediction, reference)` triple and macro-averages them.
pub fn evaluate_batch<'a, I>(pairs: I) -> Result<BatchReport>
where
    I: IntoIterator<Item = (String, &'a Volume3D, &'a Volume3D)>,
{
    let cases = pairs
        .into_iter()
        .map(|(name, pred, gt)| confusion(pred, gt).map(|c| (name, c.scores())))
        .collect::<Result<Vec<_>>>()?;
    if cases.is_empty() {
        return Err(Error::invalid(MODULE, "no cases to evaluate"));
    }
    let n = cases.len() as f64;
    let mut sums = [0.0; 5];
    for (_, s) in &cases {
        for (acc, v) in sums.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    let [precision, recall, iou, dice, accuracy] = sums.map(|v| v / n);
    Ok(BatchReport {
        cases,
        mean: Scores {
            precision,
            recall,
            iou,
            dice,
            accuracy,
        },
    })
}

//! Golden-set evaluation: confusion counts, precision/recall/F1, threshold
//! sweeps, Cohen's kappa for inter-rater reliability, and majority-vote
//! merging of rater labels into golden truths.
//!
//! Everything here is a pure function over immutable inputs. Metrics are kept
//! at full precision internally; text rendering rounds to 4 decimals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Annotation;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("label vectors differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {min} items, got {got}")]
    TooFewItems { min: usize, got: usize },
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("threshold must be in [0,1], got {value}")]
    ThresholdOutOfRange { value: f64 },
    #[error("golden items missing annotations: {}", ids.join(", "))]
    MissingAnnotations { ids: Vec<String> },
    #[error("golden item '{id}' has more than one annotation")]
    DuplicateAnnotation { id: String },
    #[error("annotations mix attributes: ({name_a}, v{ver_a}) and ({name_b}, v{ver_b})")]
    MixedAttributes {
        name_a: String,
        ver_a: u32,
        name_b: String,
        ver_b: u32,
    },
    #[error("need at least 2 raters, got {got}")]
    TooFewRaters { got: usize },
}

/// Binary confusion counts. `fn` is reserved in Rust, so the fields carry a
/// `c` suffix and serialize under the conventional names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(rename = "tp")]
    pub tpc: usize,
    #[serde(rename = "fp")]
    pub fpc: usize,
    #[serde(rename = "fn")]
    pub fnc: usize,
    #[serde(rename = "tn")]
    pub tnc: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tpc + self.fpc + self.fnc + self.tnc
    }
}

/// Counts prediction/truth agreement. The counts partition the items.
pub fn confusion(predicted: &[bool], truth: &[bool]) -> Result<ConfusionMatrix, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            a: predicted.len(),
            b: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::TooFewItems { min: 1, got: 0 });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => cm.tpc += 1,
            (true, false) => cm.fpc += 1,
            (false, true) => cm.fnc += 1,
            (false, false) => cm.tnc += 1,
        }
    }
    Ok(cm)
}

/// Precision and recall; each is `None` when its denominator is zero.
/// Undefined is reported as undefined, never coerced to 0 or 1.
pub fn precision_recall(cm: &ConfusionMatrix) -> Result<(Option<f64>, Option<f64>), EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let precision = if cm.tpc + cm.fpc > 0 {
        Some(cm.tpc as f64 / (cm.tpc + cm.fpc) as f64)
    } else {
        None
    };
    let recall = if cm.tpc + cm.fnc > 0 {
        Some(cm.tpc as f64 / (cm.tpc + cm.fnc) as f64)
    } else {
        None
    };
    Ok((precision, recall))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&precision));
    debug_assert!((0.0..=1.0).contains(&recall));
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Quality metrics for one annotation source against a golden set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub attribute_name: String,
    pub attribute_version: u32,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
    pub confusion: ConfusionMatrix,
    pub threshold_used: f64,
}

impl EvaluationReport {
    /// Structured text form, metrics at 4 decimals.
    pub fn render(&self) -> String {
        fn prob(v: Option<f64>) -> String {
            match v {
                Some(v) => format!("{v:.4}"),
                None => "undefined".to_string(),
            }
        }
        let c = &self.confusion;
        format!(
            "attribute  {} v{}\nthreshold  {:.4}\nsupport    {}\nconfusion  tp={} fp={} fn={} tn={}\nprecision  {}\nrecall     {}\nf1         {}",
            self.attribute_name,
            self.attribute_version,
            self.threshold_used,
            self.support,
            c.tpc,
            c.fpc,
            c.fnc,
            c.tnc,
            prob(self.precision),
            prob(self.recall),
            prob(self.f1),
        )
    }
}

/// Evaluates stored annotation scores against golden truths at a threshold.
/// Predicted label is `score >= threshold`. Annotations for ids outside the
/// golden set are ignored; a golden id with no annotation is an error.
pub fn evaluate_annotator(
    golden: &[(String, bool)],
    annotations: &[Annotation],
    threshold: f64,
) -> Result<EvaluationReport, EvalError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::ThresholdOutOfRange { value: threshold });
    }
    if golden.is_empty() {
        return Err(EvalError::TooFewItems { min: 1, got: 0 });
    }
    let mut attr: Option<(String, u32)> = None;
    let mut by_id: BTreeMap<&str, &Annotation> = BTreeMap::new();
    for a in annotations {
        match &attr {
            None => attr = Some((a.attribute_name.clone(), a.attribute_version)),
            Some((name, ver)) => {
                if *name != a.attribute_name || *ver != a.attribute_version {
                    return Err(EvalError::MixedAttributes {
                        name_a: name.clone(),
                        ver_a: *ver,
                        name_b: a.attribute_name.clone(),
                        ver_b: a.attribute_version,
                    });
                }
            }
        }
        if by_id.insert(a.video_id.as_str(), a).is_some() {
            return Err(EvalError::DuplicateAnnotation {
                id: a.video_id.clone(),
            });
        }
    }
    let missing: Vec<String> = golden
        .iter()
        .filter(|(id, _)| !by_id.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingAnnotations { ids: missing });
    }
    let mut predicted = Vec::with_capacity(golden.len());
    let mut truth = Vec::with_capacity(golden.len());
    for (id, t) in golden {
        predicted.push(by_id[id.as_str()].score >= threshold);
        truth.push(*t);
    }
    let cm = confusion(&predicted, &truth)?;
    let (precision, recall) = precision_recall(&cm)?;
    let f1_value = match (precision, recall) {
        (Some(p), Some(r)) => Some(f1(p, r)),
        _ => None,
    };
    let (attribute_name, attribute_version) = attr.expect("nonempty annotations");
    Ok(EvaluationReport {
        attribute_name,
        attribute_version,
        precision,
        recall,
        f1: f1_value,
        support: golden.len(),
        confusion: cm,
        threshold_used: threshold,
    })
}

/// One report per threshold, in the given order.
pub fn threshold_sweep(
    golden: &[(String, bool)],
    annotations: &[Annotation],
    thresholds: &[f64],
) -> Result<Vec<EvaluationReport>, EvalError> {
    thresholds
        .iter()
        .map(|&t| evaluate_annotator(golden, annotations, t))
        .collect()
}

/// Two-rater agreement via Cohen's kappa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterAgreementReport {
    pub n_items: usize,
    pub observed_agreement: f64,
    pub chance_agreement: f64,
    pub kappa: f64,
    /// Chance agreement was 1 (both raters constant and identical); kappa is
    /// reported as 1 by convention.
    pub degenerate: bool,
    /// Indices where the raters differ.
    pub disagreements: Vec<usize>,
}

/// Standard two-rater binary Cohen's kappa: (po - pe) / (1 - pe).
pub fn cohen_kappa(rater_a: &[bool], rater_b: &[bool]) -> Result<RaterAgreementReport, EvalError> {
    if rater_a.len() != rater_b.len() {
        return Err(EvalError::LengthMismatch {
            a: rater_a.len(),
            b: rater_b.len(),
        });
    }
    let n = rater_a.len();
    if n < 2 {
        return Err(EvalError::TooFewItems { min: 2, got: n });
    }
    let mut agree = 0usize;
    let mut a_yes = 0usize;
    let mut b_yes = 0usize;
    let mut disagreements = Vec::new();
    for (i, (&a, &b)) in rater_a.iter().zip(rater_b).enumerate() {
        if a == b {
            agree += 1;
        } else {
            disagreements.push(i);
        }
        a_yes += a as usize;
        b_yes += b as usize;
    }
    let nf = n as f64;
    let observed = agree as f64 / nf;
    let pa = a_yes as f64 / nf;
    let pb = b_yes as f64 / nf;
    let chance = pa * pb + (1.0 - pa) * (1.0 - pb);
    // pe = 1 exactly iff both raters are constant and identical.
    let degenerate = (a_yes == n && b_yes == n) || (a_yes == 0 && b_yes == 0);
    let kappa = if degenerate {
        1.0
    } else {
        (observed - chance) / (1.0 - chance)
    };
    Ok(RaterAgreementReport {
        n_items: n,
        observed_agreement: observed,
        chance_agreement: chance,
        kappa,
        degenerate,
        disagreements,
    })
}

/// Kappa for one rater pair within a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub rater_a: usize,
    pub rater_b: usize,
    pub kappa: f64,
}

/// Agreement for a panel of 2+ raters: mean of all pairwise kappas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelAgreementReport {
    pub n_raters: usize,
    pub n_items: usize,
    pub mean_kappa: f64,
    pub pairs: Vec<PairKappa>,
}

/// Reduces a multi-rater panel to the mean of pairwise Cohen's kappas.
pub fn pairwise_mean_kappa(raters: &[Vec<bool>]) -> Result<PanelAgreementReport, EvalError> {
    if raters.len() < 2 {
        return Err(EvalError::TooFewRaters { got: raters.len() });
    }
    let mut pairs = Vec::new();
    let mut sum = 0.0;
    for i in 0..raters.len() {
        for j in (i + 1)..raters.len() {
            let report = cohen_kappa(&raters[i], &raters[j])?;
            sum += report.kappa;
            pairs.push(PairKappa {
                rater_a: i,
                rater_b: j,
                kappa: report.kappa,
            });
        }
    }
    Ok(PanelAgreementReport {
        n_raters: raters.len(),
        n_items: raters[0].len(),
        mean_kappa: sum / pairs.len() as f64,
        pairs,
    })
}

/// Majority-vote merge of per-rater labels into golden truths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeOutcome {
    /// (item_id, majority label) for items with a strict majority.
    pub golden: Vec<(String, bool)>,
    /// Items with no majority, excluded from golden and queued for
    /// calibration. An item with zero labels counts as a tie.
    pub ties: Vec<String>,
}

/// Merges rater labels per item by strict majority; ties are never resolved.
pub fn merge_raters(items: &[(String, Vec<bool>)]) -> MergeOutcome {
    let mut outcome = MergeOutcome::default();
    for (id, labels) in items {
        let yes = labels.iter().filter(|&&l| l).count();
        let no = labels.len() - yes;
        if yes > no {
            outcome.golden.push((id.clone(), true));
        } else if no > yes {
            outcome.golden.push((id.clone(), false));
        } else {
            outcome.ties.push(id.clone());
        }
    }
    outcome
}

//! Detection metrics (AUC, average precision, prevalence-matched F1, KS
//! distance) and the evaluation report.

use std::cmp::Ordering;
use std::path::Path;

use crate::dataio::KeyValues;
use crate::discriminator::{GmmParams, ThresholdMethod, ThresholdResult};
use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Σ over positives of (#negatives below + ½ #negatives tied)
    let mut correct2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let tie = &order[i..j];
        let tie_pos = tie.iter().filter(|&&k| labels[k] == 1).count() as u64;
        let tie_neg = tie.len() as u64 - tie_pos;
        correct2 += tie_pos * (2 * neg_below + tie_neg);
        neg_below += tie_neg;
        i = j;
    }
    Ok(correct2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[k] => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
}

/// Step-wise area under the precision-recall curve, Σ P_k ΔR_k, with one
/// threshold per distinct score.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for g in descending_groups(scores) {
        let new_tp = g.iter().filter(|&&k| labels[k] == 1).count();
        seen += g.len();
        if new_tp > 0 {
            let prev_recall = tp as f64 / pos as f64;
            tp += new_tp;
            let precision = tp as f64 / seen as f64;
            let recall = tp as f64 / pos as f64;
            ap += precision * (recall - prev_recall);
        }
    }
    Ok(ap)
}

/// Top-`k` spot indices by score, equal scores ordered by lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// F1 after calling exactly as many spots positive as there are true
/// positives (the highest-scoring ones).
pub fn f1_at_prevalence(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("F1 needs at least one positive".into()));
    }
    let called = top_k(scores, pos);
    let tp = called.iter().filter(|&&k| labels[k] == 1).count();
    let fp = called.len() - tp;
    let fn_ = pos - tp;
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Score of the last spot called positive by [`f1_at_prevalence`].
pub fn prevalence_cut_score(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    top_k(scores, pos).last().map(|&k| scores[k])
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of an arbitrary binary call vector.
pub fn f1_of_calls(calls: &[u8], labels: &[u8]) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&c, &l) in calls.iter().zip(labels) {
        match (c, l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b|.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("KS distance needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

/// Context attached to a report besides the metrics themselves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportExtras {
    pub dataset_id: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub scores_path: String,
    pub gmm: Option<GmmParams>,
    pub threshold: Option<ThresholdResult>,
}

/// A metric value, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined(String),
}

impl MetricValue {
    fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(v) => MetricValue::Value(v),
            Err(e) => MetricValue::Undefined(e.to_string()),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub auc: MetricValue,
    pub ap: MetricValue,
    pub f1: MetricValue,
    pub ks: MetricValue,
    pub n_spots: usize,
    pub positive_fraction: f64,
    pub f1_threshold: Option<f64>,
    pub extras: ReportExtras,
}

/// Computes every metric; failures become `Undefined` entries with the
/// reason rather than aborting the report.
pub fn build_report(scores: &[f64], labels: &[u8], extras: ReportExtras) -> Result<ScoreReport> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let pos_scores: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] == 1).map(|i| scores[i]).collect();
    let neg_scores: Vec<f64> = (0..scores.len()).filter(|&i| labels[i] == 0).map(|i| scores[i]).collect();
    let ks = if pos == 0 || neg == 0 {
        Err(Error::UndefinedMetric(
            "KS distance needs scores from both classes".into(),
        ))
    } else {
        ks_distance(&pos_scores, &neg_scores)
    };
    Ok(ScoreReport {
        auc: MetricValue::from_result(auc(scores, labels)),
        ap: MetricValue::from_result(average_precision(scores, labels)),
        f1: MetricValue::from_result(f1_at_prevalence(scores, labels)),
        ks: MetricValue::from_result(ks),
        n_spots: scores.len(),
        positive_fraction: if scores.is_empty() {
            0.0
        } else {
            pos as f64 / scores.len() as f64
        },
        f1_threshold: if pos > 0 {
            prevalence_cut_score(scores, labels)
        } else {
            None
        },
        extras,
    })
}

impl ScoreReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("dataset_id", &self.extras.dataset_id);
        for (name, m) in [("auc", &self.auc), ("ap", &self.ap), ("f1", &self.f1), ("ks", &self.ks)] {
            match m {
                MetricValue::Value(v) => kv.set(name, v),
                MetricValue::Undefined(reason) => {
                    kv.set(name, "null");
                    kv.set(&format!("{name}_reason"), reason.replace('\n', " "));
                }
            }
        }
        kv.set("n_spots", self.n_spots);
        kv.set("positive_fraction", self.positive_fraction);
        kv.set(
            "f1_threshold",
            self.f1_threshold.map_or("null".to_string(), |v| v.to_string()),
        );
        if let Some(g) = &self.extras.gmm {
            kv.set("gmm_pi1", g.pi[0]);
            kv.set("gmm_pi2", g.pi[1]);
            kv.set("gmm_mu1", g.mu[0]);
            kv.set("gmm_mu2", g.mu[1]);
            kv.set("gmm_var1", g.var[0]);
            kv.set("gmm_var2", g.var[1]);
            kv.set("gmm_log_likelihood", g.log_likelihood);
            kv.set("gmm_converged", u8::from(g.converged));
            kv.set("gmm_iterations", g.iterations);
        }
        if let Some(t) = &self.extras.threshold {
            kv.set("threshold", t.theta);
            kv.set("threshold_method", t.method.as_str());
        }
        kv.set("seed", self.extras.seed);
        kv.set("config_fingerprint", &self.extras.config_fingerprint);
        kv.set("scores_path", &self.extras.scores_path);
        kv
    }

    pub fn from_key_values(kv: &KeyValues, origin: &Path) -> Result<Self> {
        let metric = |name: &str| -> Result<MetricValue> {
            let raw = kv.require(name, origin)?;
            if raw == "null" {
                Ok(MetricValue::Undefined(
                    kv.get(&format!("{name}_reason")).unwrap_or("").to_string(),
                ))
            } else {
                Ok(MetricValue::Value(kv.require_parsed(name, origin)?))
            }
        };
        let gmm = if kv.get("gmm_pi1").is_some() {
            Some(GmmParams {
                pi: [kv.require_parsed("gmm_pi1", origin)?, kv.require_parsed("gmm_pi2", origin)?],
                mu: [kv.require_parsed("gmm_mu1", origin)?, kv.require_parsed("gmm_mu2", origin)?],
                var: [kv.require_parsed("gmm_var1", origin)?, kv.require_parsed("gmm_var2", origin)?],
                log_likelihood: kv.require_parsed("gmm_log_likelihood", origin)?,
                converged: kv.require_parsed::<u8>("gmm_converged", origin)? == 1,
                iterations: kv.require_parsed("gmm_iterations", origin)?,
                log_likelihood_trace: Vec::new(),
            })
        } else {
            None
        };
        let threshold = match kv.get("threshold") {
            Some(_) => Some(ThresholdResult {
                theta: kv.require_parsed("threshold", origin)?,
                method: ThresholdMethod::parse(kv.require("threshold_method", origin)?)
                    .ok_or_else(|| Error::format(origin, "unknown threshold_method"))?,
                coefficients: None,
            }),
            None => None,
        };
        let f1_threshold = match kv.require("f1_threshold", origin)? {
            "null" => None,
            _ => Some(kv.require_parsed("f1_threshold", origin)?),
        };
        Ok(ScoreReport {
            auc: metric("auc")?,
            ap: metric("ap")?,
            f1: metric("f1")?,
            ks: metric("ks")?,
            n_spots: kv.require_parsed("n_spots", origin)?,
            positive_fraction: kv.require_parsed("positive_fraction", origin)?,
            f1_threshold,
            extras: ReportExtras {
                dataset_id: kv.require("dataset_id", origin)?.to_string(),
                seed: kv.require_parsed("seed", origin)?,
                config_fingerprint: kv.require("config_fingerprint", origin)?.to_string(),
                scores_path: kv.require("scores_path", origin)?.to_string(),
                gmm,
                threshold,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_key_values().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::read(path)?, path)
    }
}

impl PartialOrd for MetricValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.value()?.partial_cmp(&other.value()?)
    }
}

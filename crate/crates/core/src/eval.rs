//! Trial, unaveraged-trial and window accuracies, electrode discriminancy
//! scores, and the significance tests used to compare methods.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};
use thiserror::Error;

use crate::data::TrialSet;
use crate::linalg::Matrix;
use crate::model::{zero_electrode, ModelError, ModelState, Prediction};
use crate::train::multi_seed_aggregate;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate test: {0}")]
    Degenerate(String),
    #[error("channel {index} out of range for {count} channels")]
    ChannelIndex { index: usize, count: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

const ROW_TOL: f64 = 1e-6;

/// Per-window class probabilities of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPrediction {
    /// `N_w × classes`.
    pub probabilities: Matrix,
    pub label: usize,
}

impl TrialPrediction {
    pub fn new(probabilities: Matrix, label: usize) -> Result<Self, EvalError> {
        if probabilities.rows() == 0 || probabilities.cols() < 2 {
            return Err(EvalError::Shape("need at least one window and two classes".into()));
        }
        if label >= probabilities.cols() {
            return Err(EvalError::Shape(format!(
                "label {label} outside {} classes",
                probabilities.cols()
            )));
        }
        for j in 0..probabilities.rows() {
            let s: f64 = probabilities.row(j).iter().sum();
            if (s - 1.0).abs() > ROW_TOL || probabilities.row(j).iter().any(|p| *p < 0.0) {
                return Err(EvalError::Shape(format!("window {j} is not a probability row (sum {s})")));
            }
        }
        Ok(Self { probabilities, label })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: usize) -> Result<Self, EvalError> {
        Self::new(Matrix::from_rows(rows).map_err(|e| EvalError::Shape(e.to_string()))?, label)
    }

    pub fn from_prediction(p: &Prediction, label: usize) -> Result<Self, EvalError> {
        Self::new(p.probabilities.clone(), label)
    }

    pub fn windows(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let n = self.windows() as f64;
        (0..self.probabilities.cols())
            .map(|k| (0..self.windows()).map(|j| self.probabilities[(j, k)]).sum::<f64>() / n)
            .collect()
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Correct only if `label` is the unique maximum; any tie scores incorrect.
fn scores(row: &[f64], label: usize) -> bool {
    let top = row[label];
    row.iter().enumerate().all(|(k, &v)| k == label || v < top)
}

fn non_empty(preds: &[TrialPrediction]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Domain("no trials to score".into()));
    }
    Ok(())
}

/// Fraction of trials whose window-averaged probabilities pick the label.
pub fn trial_accuracy(preds: &[TrialPrediction]) -> Result<f64, EvalError> {
    non_empty(preds)?;
    let hits = preds.iter().filter(|p| scores(&p.mean_row(), p.label)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of trials whose per-window votes have the label as strict
/// majority winner.
pub fn unaveraged_trial_accuracy(preds: &[TrialPrediction]) -> Result<f64, EvalError> {
    non_empty(preds)?;
    let hits = preds
        .iter()
        .filter(|p| {
            let mut votes = vec![0.0; p.probabilities.cols()];
            for j in 0..p.windows() {
                votes[argmax(p.probabilities.row(j))] += 1.0;
            }
            scores(&votes, p.label)
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of all windows classified correctly, and the accuracy of each
/// window index across trials when every trial has the same window count.
pub fn window_accuracy(preds: &[TrialPrediction]) -> Result<(f64, Option<Vec<f64>>), EvalError> {
    non_empty(preds)?;
    let n_w = preds[0].windows();
    let uniform = preds.iter().all(|p| p.windows() == n_w);
    let mut curve = vec![0.0; n_w];
    let (mut hits, mut total) = (0usize, 0usize);
    for p in preds {
        for j in 0..p.windows() {
            let ok = scores(p.probabilities.row(j), p.label);
            hits += ok as usize;
            total += 1;
            if uniform && ok {
                curve[j] += 1.0;
            }
        }
    }
    let curve = uniform.then(|| curve.iter().map(|c| c / preds.len() as f64).collect());
    Ok((hits as f64 / total as f64, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tacc: f64,
    #[serde(rename = "utacc(majority)")]
    pub utacc: f64,
    pub wacc: f64,
    pub per_window_accuracy: Option<Vec<f64>>,
    pub n_trials: usize,
    pub n_windows: usize,
}

pub fn evaluate(preds: &[TrialPrediction]) -> Result<MetricReport, EvalError> {
    let (wacc, curve) = window_accuracy(preds)?;
    Ok(MetricReport {
        tacc: trial_accuracy(preds)?,
        utacc: unaveraged_trial_accuracy(preds)?,
        wacc,
        per_window_accuracy: curve,
        n_trials: preds.len(),
        n_windows: preds.iter().map(TrialPrediction::windows).sum(),
    })
}

/// Joint-decoding predictions of `model` for every trial of `set`.
pub fn predict_set(model: &ModelState<f32>, set: &TrialSet) -> Result<Vec<TrialPrediction>, EvalError> {
    set.trials
        .iter()
        .map(|t| TrialPrediction::from_prediction(&model.predict(&t.data)?, t.label))
        .collect()
}

/// TAcc drop when `channel` is zeroed, optionally restricted to trials of
/// one class. Negative values are kept.
pub fn eds_with(
    decode: &dyn Fn(&Matrix) -> Result<Prediction, EvalError>,
    set: &TrialSet,
    channel: usize,
    class: Option<usize>,
) -> Result<f64, EvalError> {
    let count = set.spec.channel_count();
    if channel >= count {
        return Err(EvalError::ChannelIndex { index: channel, count });
    }
    let trials: Vec<_> = set.trials.iter().filter(|t| class.is_none_or(|c| t.label == c)).collect();
    let mut original = Vec::with_capacity(trials.len());
    let mut dropped = Vec::with_capacity(trials.len());
    for t in trials {
        original.push(TrialPrediction::from_prediction(&decode(&t.data)?, t.label)?);
        let z = zero_electrode(&t.data, channel)?;
        dropped.push(TrialPrediction::from_prediction(&decode(&z)?, t.label)?);
    }
    Ok(trial_accuracy(&original)? - trial_accuracy(&dropped)?)
}

pub fn eds(model: &ModelState<f32>, set: &TrialSet, channel: usize) -> Result<f64, EvalError> {
    eds_with(&|x| Ok(model.predict(x)?), set, channel, None)
}

pub fn eds_per_class(model: &ModelState<f32>, set: &TrialSet, channel: usize, class: usize) -> Result<f64, EvalError> {
    eds_with(&|x| Ok(model.predict(x)?), set, channel, Some(class))
}

/// EDS of every channel.
pub fn eds_all(model: &ModelState<f32>, set: &TrialSet) -> Result<Vec<f64>, EvalError> {
    (0..set.spec.channel_count()).map(|c| eds(model, set, c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub df: usize,
}

/// One-sided paired t-test of `a > b`.
pub fn paired_ttest_onesided(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::Domain("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 1e-15 * (1.0 + mean.abs())) {
        if mean == 0.0 && d.iter().all(|v| *v == 0.0) {
            return Ok(TTest { t: 0.0, p: 0.5, n, df: n - 1 });
        }
        return Err(EvalError::Degenerate(format!(
            "differences have zero spread (all ≈ {mean})"
        )));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| EvalError::Domain(e.to_string()))?;
    Ok(TTest { t, p: dist.sf(t), n, df: n - 1 })
}

/// `P(X ≥ successes)` for `X ~ Binomial(trials, p0)`.
pub fn binomial_test_greater(successes: u64, trials: u64, p0: f64) -> Result<f64, EvalError> {
    if successes > trials {
        return Err(EvalError::Domain(format!("{successes} successes out of {trials} trials")));
    }
    let dist = Binomial::new(p0, trials).map_err(|e| EvalError::Domain(e.to_string()))?;
    Ok(if successes == 0 { 1.0 } else { dist.sf(successes - 1) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub tacc: f64,
    #[serde(rename = "utacc(majority)")]
    pub utacc: f64,
    pub wacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tacc: f64,
    #[serde(rename = "utacc(majority)")]
    pub utacc: f64,
    pub wacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_subject: Vec<SubjectMetrics>,
    pub mean: Summary,
    pub std: Summary,
    pub curve: Option<Vec<f64>>,
    pub eds: Option<Vec<f64>>,
}

impl EvalReport {
    /// Aggregates per-subject reports; the curve is the mean of the subject
    /// curves when all of them exist and agree in length.
    pub fn from_subjects(method: &str, subjects: &[(String, MetricReport)]) -> Result<Self, EvalError> {
        if subjects.is_empty() {
            return Err(EvalError::Domain("no subjects to report".into()));
        }
        let rows: Vec<Vec<f64>> = subjects.iter().map(|(_, r)| vec![r.tacc, r.utacc, r.wacc]).collect();
        let agg = multi_seed_aggregate(&rows).map_err(|e| EvalError::Shape(e.to_string()))?;
        let summary = |v: &[f64]| Summary {
            tacc: v[0],
            utacc: v[1],
            wacc: v[2],
        };
        let curves: Option<Vec<&Vec<f64>>> = subjects.iter().map(|(_, r)| r.per_window_accuracy.as_ref()).collect();
        let curve = curves.and_then(|cs| {
            let len = cs[0].len();
            cs.iter().all(|c| c.len() == len).then(|| {
                (0..len)
                    .map(|j| cs.iter().map(|c| c[j]).sum::<f64>() / cs.len() as f64)
                    .collect()
            })
        });
        Ok(Self {
            method: method.to_string(),
            per_subject: subjects
                .iter()
                .map(|(id, r)| SubjectMetrics {
                    id: id.clone(),
                    tacc: r.tacc,
                    utacc: r.utacc,
                    wacc: r.wacc,
                })
                .collect(),
            mean: summary(&agg.mean),
            std: summary(&agg.std),
            curve,
            eds: None,
        })
    }

    /// Table with percentages to one decimal.
    pub fn to_csv(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut out = String::from("method,id,tacc,utacc(majority),wacc\n");
        for s in &self.per_subject {
            out += &format!("{},{},{},{},{}\n", self.method, s.id, pct(s.tacc), pct(s.utacc), pct(s.wacc));
        }
        for (id, s) in [("mean", &self.mean), ("std", &self.std)] {
            out += &format!("{},{},{},{},{}\n", self.method, id, pct(s.tacc), pct(s.utacc), pct(s.wacc));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(p1: &[f64], label: usize) -> TrialPrediction {
        let rows: Vec<Vec<f64>> = p1.iter().map(|p| vec![1.0 - p, *p]).collect();
        TrialPrediction::from_rows(&rows, label).unwrap()
    }

    #[test]
    fn handcrafted_three_windows() {
        let t = [binary(&[0.6, 0.55, 0.2], 1)];
        assert_eq!(trial_accuracy(&t).unwrap(), 0.0);
        assert_eq!(unaveraged_trial_accuracy(&t).unwrap(), 1.0);
        let (wacc, curve) = window_accuracy(&t).unwrap();
        assert!((wacc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(curve.unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_score_incorrect() {
        assert_eq!(trial_accuracy(&[binary(&[0.5], 0)]).unwrap(), 0.0);
        assert_eq!(trial_accuracy(&[binary(&[0.5], 1)]).unwrap(), 0.0);
        assert_eq!(unaveraged_trial_accuracy(&[binary(&[0.9, 0.1], 1)]).unwrap(), 0.0);
        assert_eq!(trial_accuracy(&[binary(&[0.0, 0.0], 0)]).unwrap(), 1.0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn single_window_metrics_agree() {
        let preds: Vec<TrialPrediction> = [0.2, 0.7, 0.9, 0.4].iter().enumerate().map(|(i, p)| binary(&[*p], i % 2)).collect();
        let r = evaluate(&preds).unwrap();
        assert_eq!(r.tacc, r.utacc);
        assert_eq!(r.tacc, r.wacc);
    }

    #[test]
    fn ragged_trials_drop_curve() {
        let (w, curve) = window_accuracy(&[binary(&[0.9], 1), binary(&[0.9, 0.2], 1)]).unwrap();
        assert!((w - 2.0 / 3.0).abs() < 1e-15);
        assert!(curve.is_none());
        assert!(matches!(trial_accuracy(&[]), Err(EvalError::Domain(_))));
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(TrialPrediction::from_rows(&[vec![0.7, 0.7]], 0).is_err());
        assert!(TrialPrediction::from_rows(&[vec![0.5, 0.5]], 2).is_err());
    }

    #[test]
    fn ttest_cases() {
        let a = [0.7, 0.8, 0.6];
        let same = paired_ttest_onesided(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 0.5));
        let d = [0.1, 0.1, -0.05];
        let z = [0.0; 3];
        let r = paired_ttest_onesided(&d, &z).unwrap();
        assert!((r.t - 1.0).abs() < 1e-12);
        // df 2: P(T > t) = (1 − t/√(t²+2))/2
        let oracle = 0.5 * (1.0 - 1.0 / 3f64.sqrt());
        assert!((r.p - oracle).abs() < 1e-10, "{} vs {oracle}", r.p);
        let back = paired_ttest_onesided(&z, &d).unwrap();
        assert!((back.t + r.t).abs() < 1e-12 && (back.p + r.p - 1.0).abs() < 1e-12);
        assert!(matches!(
            paired_ttest_onesided(&[0.2, 0.3], &[0.1, 0.2]),
            Err(EvalError::Degenerate(_))
        ));
    }

    #[test]
    fn binomial_tail() {
        // P(X ≥ 9 | n 10, ½) = 11/1024
        assert!((binomial_test_greater(9, 10, 0.5).unwrap() - 11.0 / 1024.0).abs() < 1e-12);
        assert_eq!(binomial_test_greater(0, 10, 0.5).unwrap(), 1.0);
        assert!(binomial_test_greater(11, 10, 0.5).is_err());
    }

    #[test]
    fn report_labels_majority_utacc() {
        let r = evaluate(&[binary(&[0.9, 0.8], 1), binary(&[0.3, 0.1], 0)]).unwrap();
        let rep = EvalReport::from_subjects("none", &[("S01".into(), r.clone()), ("S02".into(), r)]).unwrap();
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["per_subject"][0]["utacc(majority)"], 1.0);
        assert_eq!(json["std"]["tacc"], 0.0);
        assert_eq!(rep.curve.as_ref().unwrap(), &vec![1.0, 1.0]);
        assert!(rep.to_csv().contains("none,mean,100.0,100.0,100.0"));
    }

    #[test]
    fn eds_of_ignored_channel_is_zero() {
        use crate::data::{generate_synth_cohort, SynthConfig};
        use crate::model::ModelConfig;
        use crate::rap::{plan_rap, OnlineTaskSpec};
        let synth = SynthConfig {
            subject_count: 1,
            trials_per_subject: 8,
            ..SynthConfig::default()
        };
        let set = generate_synth_cohort(&synth).unwrap().remove(0).online;
        let plan = plan_rap(128.0, &[4], &OnlineTaskSpec::new(1.0, 16.0, Some(4.75)).unwrap()).unwrap();
        let mut model = ModelState::<f32>::new(ModelConfig::compact(8, plan), 1).unwrap();
        let spatial = &mut model.params_mut()[crate::model::param::SPATIAL];
        let c = spatial.shape[1];
        for g in 0..spatial.shape[0] {
            spatial.data[g * c + 3] = 0.0;
        }
        assert_eq!(eds(&model, &set, 3).unwrap(), 0.0);
        assert!(matches!(eds(&model, &set, 8), Err(EvalError::ChannelIndex { .. })));
    }
}

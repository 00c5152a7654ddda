//! Logit-difference metrics: instance LD, dataset averages with a per-class
//! split and odds ratio, and circuit faithfulness.

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::SyllogismDataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// logit(correct) - logit(incorrect) at the final position of one prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitDiff {
    pub value: f32,
    pub correct_id: u32,
    pub incorrect_id: u32,
}

pub fn logit_diff(
    final_logits: ArrayView1<'_, f32>,
    correct_id: u32,
    incorrect_id: u32,
) -> Result<LogitDiff> {
    if correct_id == incorrect_id {
        return Err(Error::InvalidArgument(
            "correct and incorrect token ids are equal".into(),
        ));
    }
    for id in [correct_id, incorrect_id] {
        if id as usize >= final_logits.len() {
            return Err(Error::TokenOutOfRange { id, n_vocab: final_logits.len() });
        }
    }
    Ok(LogitDiff {
        value: final_logits[correct_id as usize] - final_logits[incorrect_id as usize],
        correct_id,
        incorrect_id,
    })
}

/// ALD split by gold-answer class; `None` when a class has no instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassAlds {
    pub positive: Option<f64>,
    pub negative: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalSummary {
    pub ald: f64,
    pub n: usize,
    pub per_class: ClassAlds,
    pub odds_ratio: f64,
    /// Sample standard deviation of instance LDs; 0 when n < 2.
    pub std_dev: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregates instance logit differences. `gold_positive[i]` says whether
/// instance i's correct answer is the pair's positive word.
pub fn summarize(lds: &[f64], gold_positive: &[bool]) -> Result<EvalSummary> {
    if lds.is_empty() {
        return Err(Error::EmptyInput);
    }
    if lds.len() != gold_positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit diffs but {} class labels",
            lds.len(),
            gold_positive.len()
        )));
    }
    let ald = mean(lds);
    let std_dev = if lds.len() < 2 {
        0.0
    } else {
        let ss: f64 = lds.iter().map(|x| (x - ald) * (x - ald)).sum();
        (ss / (lds.len() - 1) as f64).sqrt()
    };
    let class = |want: bool| {
        let vals: Vec<f64> = lds
            .iter()
            .zip(gold_positive)
            .filter(|(_, &g)| g == want)
            .map(|(&v, _)| v)
            .collect();
        if vals.is_empty() { None } else { Some(mean(&vals)) }
    };
    Ok(EvalSummary {
        ald,
        n: lds.len(),
        per_class: ClassAlds { positive: class(true), negative: class(false) },
        odds_ratio: ald.exp(),
        std_dev,
    })
}

/// Anything that turns a dataset into per-instance logit differences: the
/// full model, or a circuit-ablated evaluation.
pub trait LdRunner {
    fn logit_diffs(&self, dataset: &SyllogismDataset) -> Result<Vec<f64>>;
}

impl LdRunner for Model {
    fn logit_diffs(&self, dataset: &SyllogismDataset) -> Result<Vec<f64>> {
        dataset
            .instances
            .par_iter()
            .map(|inst| {
                let resid = self.forward_final_resid(&inst.clean_tokens)?;
                let (c, i) =
                    self.readout_pair(&resid.view(), (inst.correct_id, inst.incorrect_id))?;
                Ok((c - i) as f64)
            })
            .collect()
    }
}

pub fn average_logit_diff(
    runner: &impl LdRunner,
    dataset: &SyllogismDataset,
) -> Result<EvalSummary> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let lds = runner.logit_diffs(dataset)?;
    summarize(&lds, &dataset.gold_positive())
}

/// |ALD(model) - ALD(circuit)|; lower is more faithful.
pub fn faithfulness(ald_model: f64, ald_circuit: f64) -> f64 {
    (ald_model - ald_circuit).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn logit_diff_is_plain_subtraction() {
        let logits = Array1::from(vec![0.0f32, 2.0, 0.5, -1.0]);
        let ld = logit_diff(logits.view(), 1, 2).unwrap();
        assert_eq!(ld.value, 1.5);
        assert_eq!(logit_diff(logits.view(), 2, 1).unwrap().value, -1.5);
        assert_eq!(logit_diff(logits.view(), 0, 3).unwrap().value, 1.0);
        assert!(logit_diff(logits.view(), 1, 1).is_err());
        assert!(logit_diff(logits.view(), 1, 9).is_err());
    }

    #[test]
    fn logit_diff_ignores_constant_shifts() {
        let base = Array1::from(vec![0.3f32, 2.0, 0.5]);
        let shifted = &base + 7.25f32;
        let a = logit_diff(base.view(), 1, 2).unwrap().value;
        let b = logit_diff(shifted.view(), 1, 2).unwrap().value;
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn summarize_means_splits_and_exponentiates() {
        let lds = [1.0, 2.0, 3.0, 6.0];
        let gold = [true, false, true, false];
        let s = summarize(&lds, &gold).unwrap();
        assert_eq!(s.ald, 3.0);
        assert_eq!(s.n, 4);
        assert_eq!(s.per_class.positive, Some(2.0));
        assert_eq!(s.per_class.negative, Some(4.0));
        assert_eq!(s.odds_ratio, 3.0f64.exp());
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 3.0f64;
        assert!((s.std_dev - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summarize_single_instance() {
        let s = summarize(&[1.25], &[true]).unwrap();
        assert_eq!(s.ald, 1.25);
        assert_eq!(s.std_dev, 0.0);
        assert_eq!(s.per_class.positive, Some(1.25));
        assert_eq!(s.per_class.negative, None);
        assert!(summarize(&[], &[]).is_err());
        assert!(summarize(&[1.0], &[]).is_err());
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let lds = [0.5, -1.5, 2.0, 0.25, 1.0];
        let gold = [true, false, true, false, true];
        let a = summarize(&lds, &gold).unwrap();
        let perm = [2usize, 0, 4, 1, 3];
        let lds_p: Vec<f64> = perm.iter().map(|&i| lds[i]).collect();
        let gold_p: Vec<bool> = perm.iter().map(|&i| gold[i]).collect();
        let b = summarize(&lds_p, &gold_p).unwrap();
        assert!((a.ald - b.ald).abs() < 1e-12);
        assert!((a.std_dev - b.std_dev).abs() < 1e-12);
        assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn faithfulness_matches_reported_values() {
        assert!((faithfulness(1.8575, 1.9286) - 0.0711).abs() < 1e-12);
        assert!((faithfulness(1.2632, 1.3136) - 0.0504).abs() < 1e-12);
        assert_eq!(faithfulness(2.5, 2.5), 0.0);
    }
}

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::data::Dataset;
use super::model::Model;
use crate::error::{Error, Result};
use crate::metrics::{cosine_score, EvalReport, TrialList};

/// Embeds every utterance a trial references and scores the trials in list
/// order. Embeddings are extracted in parallel; scoring is sequential.
pub fn score_trials(model: &Model, dataset: &Dataset, trials: &TrialList) -> Result<Vec<f64>> {
    let index = dataset.index();
    let mut ids: Vec<&str> = Vec::new();
    for t in &trials.entries {
        for id in [t.enroll.as_str(), t.test.as_str()] {
            if !index.contains_key(id) {
                return Err(Error::Input(format!("trial references unknown utterance {id:?}")));
            }
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    let embeddings: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|id| model.embed(&index[id].features))
        .collect::<Result<_>>()?;
    let lookup: BTreeMap<&str, &Vec<f64>> = ids.iter().copied().zip(&embeddings).collect();
    trials
        .entries
        .iter()
        .map(|t| cosine_score(lookup[t.enroll.as_str()], lookup[t.test.as_str()]))
        .collect()
}

/// EER and minDCF at both target priors.
pub fn evaluate(model: &Model, dataset: &Dataset, trials: &TrialList) -> Result<EvalReport> {
    Ok(evaluate_scores(model, dataset, trials)?.1)
}

/// [`evaluate`] that also returns the per-trial scores.
pub fn evaluate_scores(model: &Model, dataset: &Dataset, trials: &TrialList) -> Result<(Vec<f64>, EvalReport)> {
    let scores = score_trials(model, dataset, trials)?;
    let report = EvalReport::from_scores(&scores, &trials.labels())?;
    Ok((scores, report))
}

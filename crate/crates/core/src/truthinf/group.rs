use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedAnswer {
    pub phone_id: String,
    pub answer: Answer,
}

/// Answers from distinct phones for one quantity, with the true value when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerGroup {
    pub answers: Vec<SourcedAnswer>,
    pub truth: Option<f64>,
}

impl AnswerGroup {
    pub fn new(answers: Vec<SourcedAnswer>, truth: Option<f64>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::contract("answer group is empty"));
        }
        let mut seen = BTreeSet::new();
        for a in &answers {
            if !seen.insert(a.phone_id.as_str()) {
                return Err(Error::contract(format!(
                    "phone `{}` answers twice in one group",
                    a.phone_id
                )));
            }
        }
        Ok(Self { answers, truth })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn mus(&self) -> Vec<f64> {
        self.answers.iter().map(|a| a.answer.mu).collect()
    }

    pub fn plain(&self) -> Vec<Answer> {
        self.answers.iter().map(|a| a.answer).collect()
    }
}

/// Groups re-indexed by phone for the iterative multi-group methods.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerMatrix {
    pub phones: Vec<String>,
    /// Per group, `(phone index, mu)` pairs.
    pub groups: Vec<Vec<(usize, f64)>>,
}

impl AnswerMatrix {
    pub fn from_groups(groups: &[AnswerGroup]) -> Self {
        let phones: Vec<String> = groups
            .iter()
            .flat_map(|g| g.answers.iter().map(|a| a.phone_id.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rows = groups
            .iter()
            .map(|g| {
                g.answers
                    .iter()
                    .map(|a| {
                        let i = phones.binary_search(&a.phone_id).expect("collected above");
                        (i, a.answer.mu)
                    })
                    .collect()
            })
            .collect();
        Self {
            phones,
            groups: rows,
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::contract(
                "answer matrix needs at least one non-empty group",
            ));
        }
        if self
            .groups
            .iter()
            .flatten()
            .any(|&(p, _)| p >= self.phones.len())
        {
            return Err(Error::contract("answer matrix refers to an unknown phone"));
        }
        Ok(())
    }
}

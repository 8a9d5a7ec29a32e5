//! Ranking metrics over relevance lists.

use crate::error::{Error, Result};

/// One query's ranked relevance flags and its total number of relevant candidates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRelevance {
    pub relevance: Vec<bool>,
    pub total_relevant: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecallVariant {
    /// A query counts as a hit when its top K holds any relevant item.
    #[default]
    AtLeastOne,
    /// Relevant items in the top K over all relevant items, averaged.
    Fraction,
}

impl RecallVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "at-least-one" => Ok(RecallVariant::AtLeastOne),
            "fraction" => Ok(RecallVariant::Fraction),
            other => Err(Error::Config(format!(
                "recall variant must be at-least-one or fraction, got {other:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecallVariant::AtLeastOne => "at-least-one",
            RecallVariant::Fraction => "fraction",
        }
    }
}

pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::contract(
            "average precision needs at least one relevant item",
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits > total_relevant {
        return Err(Error::contract(format!(
            "{hits} relevant items listed but total is {total_relevant}"
        )));
    }
    Ok(sum / total_relevant as f64)
}

fn non_empty(queries: &[QueryRelevance]) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::contract("no valid queries"));
    }
    Ok(())
}

pub fn mean_average_precision(queries: &[QueryRelevance]) -> Result<f64> {
    non_empty(queries)?;
    let mut sum = 0.0;
    for q in queries {
        sum += average_precision(&q.relevance, q.total_relevant)?;
    }
    Ok(sum / queries.len() as f64)
}

pub fn recall_at_k(queries: &[QueryRelevance], k: usize, variant: RecallVariant) -> Result<f64> {
    non_empty(queries)?;
    if k == 0 {
        return Err(Error::contract("recall needs k ≥ 1"));
    }
    let mut sum = 0.0;
    for q in queries {
        if q.total_relevant == 0 {
            return Err(Error::contract("query without relevant items"));
        }
        let found = q.relevance.iter().take(k).filter(|&&r| r).count();
        sum += match variant {
            RecallVariant::AtLeastOne => f64::from(u8::from(found > 0)),
            RecallVariant::Fraction => found as f64 / q.total_relevant as f64,
        };
    }
    Ok(sum / queries.len() as f64)
}

//! Public policies and their evaluation on health records.
//!
//! A policy is a disjunction of clauses; a record satisfies the policy if
//! any clause holds. Age boundaries are inclusive: an event exactly at the
//! limit still counts. A positive test voids every negative test taken at
//! or before its date.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::health::{HealthRecord, TestResult};

const SECS_PER_DAY: u64 = 86_400;
const SECS_PER_HOUR: u64 = 3_600;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClause {
    MaxVaccinationAgeDays(u64),
    MaxNegativeTestAgeHours(u64),
    MaxRecoveryAgeDays(u64),
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PublicPolicy {
    pub pp_id: String,
    pub clauses: Vec<PolicyClause>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy {0} has no clauses")]
    EmptyPolicy(String),
    #[error("duplicate policy id {0}")]
    DuplicateId(String),
    #[error("unknown policy id {0}")]
    UnknownId(String),
}

/// True iff any clause is satisfied at `now`.
pub fn policy_eval(record: &HealthRecord, policy: &PublicPolicy, now: u64) -> bool {
    policy.clauses.iter().any(|clause| clause_eval(record, *clause, now))
}

fn clause_eval(record: &HealthRecord, clause: PolicyClause, now: u64) -> bool {
    match clause {
        PolicyClause::MaxVaccinationAgeDays(days) => record
            .vaccinations
            .iter()
            .map(|v| v.date)
            .max()
            .is_some_and(|date| now.saturating_sub(date) <= days * SECS_PER_DAY),
        PolicyClause::MaxNegativeTestAgeHours(hours) => {
            let last_positive =
                record.tests.iter().filter(|t| t.result == TestResult::Positive).map(|t| t.date).max();
            record
                .tests
                .iter()
                .filter(|t| t.result == TestResult::Negative)
                .map(|t| t.date)
                // A later (or simultaneous) positive voids the negative.
                .filter(|date| last_positive.is_none_or(|p| p < *date))
                .max()
                .is_some_and(|date| now.saturating_sub(date) <= hours * SECS_PER_HOUR)
        }
        PolicyClause::MaxRecoveryAgeDays(days) => record
            .recoveries
            .iter()
            .map(|r| r.date)
            .max()
            .is_some_and(|date| now.saturating_sub(date) <= days * SECS_PER_DAY),
    }
}

/// Human-readable clause text, shown to the user before they consent to
/// revealing that they satisfy the policy.
pub fn render_policy(policy: &PublicPolicy) -> String {
    let clause_texts: Vec<String> = policy
        .clauses
        .iter()
        .map(|c| match c {
            PolicyClause::MaxVaccinationAgeDays(d) => {
                format!("vaccination no older than {d} days")
            }
            PolicyClause::MaxNegativeTestAgeHours(h) => {
                format!("negative test no older than {h} hours")
            }
            PolicyClause::MaxRecoveryAgeDays(d) => format!("recovery no older than {d} days"),
        })
        .collect();
    format!("policy {}: satisfy any of [{}]", policy.pp_id, clause_texts.join("; "))
}

/// The stock policy set a new deployment starts with: recent vaccination,
/// fresh negative test, and a venue-entry policy satisfied by any of the
/// three event kinds.
pub fn standard_policies() -> Vec<PublicPolicy> {
    vec![
        PublicPolicy {
            pp_id: "pp-vax-180".into(),
            clauses: vec![PolicyClause::MaxVaccinationAgeDays(180)],
        },
        PublicPolicy {
            pp_id: "pp-test-24".into(),
            clauses: vec![PolicyClause::MaxNegativeTestAgeHours(24)],
        },
        PublicPolicy {
            pp_id: "pp-entry".into(),
            clauses: vec![
                PolicyClause::MaxVaccinationAgeDays(180),
                PolicyClause::MaxNegativeTestAgeHours(48),
                PolicyClause::MaxRecoveryAgeDays(90),
            ],
        },
    ]
}

/// The set of policies a deployment issues tokens for.
#[derive(Clone, Debug)]
pub struct PolicyRegistry {
    policies: BTreeMap<String, PublicPolicy>,
}

impl PolicyRegistry {
    pub fn new(policies: Vec<PublicPolicy>) -> Result<PolicyRegistry, PolicyError> {
        let mut map = BTreeMap::new();
        for p in policies {
            if p.clauses.is_empty() {
                return Err(PolicyError::EmptyPolicy(p.pp_id));
            }
            if map.insert(p.pp_id.clone(), p.clone()).is_some() {
                return Err(PolicyError::DuplicateId(p.pp_id));
            }
        }
        Ok(PolicyRegistry { policies: map })
    }

    pub fn get(&self, pp_id: &str) -> Result<&PublicPolicy, PolicyError> {
        self.policies.get(pp_id).ok_or_else(|| PolicyError::UnknownId(pp_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.policies.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &PublicPolicy> {
        self.policies.values()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

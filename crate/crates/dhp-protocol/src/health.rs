//! Health records and their canonical byte form.
//!
//! The canonical form is what gets digested, secret-shared and scanned
//! for: an order-normalized, length-prefixed field sequence. Two records
//! with the same events in different order serialize identically, and the
//! serialization parses back losslessly so a server can reconstruct the
//! record from shares and evaluate a policy on it.

use dhp_core::canonical::{decode_tuple, TupleEncoder};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestResult {
    Negative,
    Positive,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Vaccination {
    pub date: u64,
    pub vaccine_type: String,
    pub dose: u32,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TestEvent {
    pub date: u64,
    pub result: TestResult,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Recovery {
    pub date: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct HealthRecord {
    pub vaccinations: Vec<Vaccination>,
    pub tests: Vec<TestEvent>,
    pub recoveries: Vec<Recovery>,
}

const FORMAT_TAG: &str = "health-record-v1";

impl HealthRecord {
    pub fn is_empty(&self) -> bool {
        self.vaccinations.is_empty() && self.tests.is_empty() && self.recoveries.is_empty()
    }

    /// Latest event date, for ingestion-time freshness checks.
    pub fn latest_date(&self) -> Option<u64> {
        self.vaccinations
            .iter()
            .map(|v| v.date)
            .chain(self.tests.iter().map(|t| t.date))
            .chain(self.recoveries.iter().map(|r| r.date))
            .max()
    }

    fn normalized(&self) -> HealthRecord {
        let mut r = self.clone();
        r.vaccinations.sort_by(|a, b| {
            (a.date, &a.vaccine_type, a.dose).cmp(&(b.date, &b.vaccine_type, b.dose))
        });
        r.tests.sort_by_key(|t| (t.date, t.result));
        r.recoveries.sort_by_key(|r| r.date);
        r
    }

    /// Order-normalized canonical bytes. This exact byte string is what
    /// the servers digest and share, and what must never appear in any
    /// server's persistence file.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let r = self.normalized();
        let mut enc = TupleEncoder::new()
            .push_str(FORMAT_TAG)
            .push_u64(r.vaccinations.len() as u64);
        for v in &r.vaccinations {
            enc = enc.push_u64(v.date).push_str(&v.vaccine_type).push(&v.dose.to_be_bytes());
        }
        enc = enc.push_u64(r.tests.len() as u64);
        for t in &r.tests {
            let result = match t.result {
                TestResult::Negative => "negative",
                TestResult::Positive => "positive",
            };
            enc = enc.push_u64(t.date).push_str(result);
        }
        enc = enc.push_u64(r.recoveries.len() as u64);
        for rec in &r.recoveries {
            enc = enc.push_u64(rec.date);
        }
        enc.finish()
    }

    /// Parse canonical bytes back into a record. `None` on any structural
    /// damage; a server reconstructing from shares treats that as
    /// tampering.
    pub fn from_canonical_bytes(bytes: &[u8]) -> Option<HealthRecord> {
        let fields = decode_tuple(bytes)?;
        let mut it = fields.into_iter();
        if it.next()? != FORMAT_TAG.as_bytes() {
            return None;
        }
        let next_u64 = |it: &mut std::vec::IntoIter<Vec<u8>>| -> Option<u64> {
            let f = it.next()?;
            Some(u64::from_be_bytes(f.try_into().ok()?))
        };

        let mut record = HealthRecord::default();
        let n_vacc = next_u64(&mut it)?;
        for _ in 0..n_vacc {
            let date = next_u64(&mut it)?;
            let vaccine_type = String::from_utf8(it.next()?).ok()?;
            let dose = u32::from_be_bytes(it.next()?.try_into().ok()?);
            record.vaccinations.push(Vaccination { date, vaccine_type, dose });
        }
        let n_tests = next_u64(&mut it)?;
        for _ in 0..n_tests {
            let date = next_u64(&mut it)?;
            let result = match it.next()?.as_slice() {
                b"negative" => TestResult::Negative,
                b"positive" => TestResult::Positive,
                _ => return None,
            };
            record.tests.push(TestEvent { date, result });
        }
        let n_rec = next_u64(&mut it)?;
        for _ in 0..n_rec {
            record.recoveries.push(Recovery { date: next_u64(&mut it)? });
        }
        if it.next().is_some() {
            return None;
        }
        Some(record)
    }
}

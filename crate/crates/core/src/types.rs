//! Domain types: employment states, covariates, and individual histories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One year of experience, expressed in decades.
pub const XP_STEP: f64 = 0.1;

pub const N_STATES: usize = 5;

/// Person-year labor-market status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum EmploymentState {
    NonEmployed = 0,
    PrivateFullTime = 1,
    PublicFullTime = 2,
    PrivatePartTime = 3,
    PublicPartTime = 4,
}

impl EmploymentState {
    pub const ALL: [EmploymentState; N_STATES] = [
        EmploymentState::NonEmployed,
        EmploymentState::PrivateFullTime,
        EmploymentState::PublicFullTime,
        EmploymentState::PrivatePartTime,
        EmploymentState::PublicPartTime,
    ];

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("employment state code {code} not in 0..=4")))
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn is_employed(self) -> bool {
        self != EmploymentState::NonEmployed
    }

    pub fn is_public(self) -> bool {
        matches!(
            self,
            EmploymentState::PublicFullTime | EmploymentState::PublicPartTime
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            EmploymentState::NonEmployed => "NE",
            EmploymentState::PrivateFullTime => "PvtFT",
            EmploymentState::PublicFullTime => "PubFT",
            EmploymentState::PrivatePartTime => "PvtPT",
            EmploymentState::PublicPartTime => "PubPT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Education {
    Low = 0,
    Medium = 1,
    High = 2,
}

impl Education {
    pub const ALL: [Education; 3] = [Education::Low, Education::Medium, Education::High];

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("education code {code} not in 0..=2")))
    }

    pub fn code(self) -> usize {
        self as usize
    }
}

/// Characteristics fixed over an individual's history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCovariates {
    pub female: bool,
    pub educ: Education,
    /// Experience at first observation, in decades.
    pub first_xp: f64,
}

impl FixedCovariates {
    pub fn new(female: bool, educ: Education, first_xp: f64) -> Result<Self> {
        let zf = Self {
            female,
            educ,
            first_xp,
        };
        zf.validate()?;
        Ok(zf)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.first_xp.is_finite() || self.first_xp < 0.0 {
            return Err(Error::invalid(format!(
                "first_xp must be finite and non-negative, got {}",
                self.first_xp
            )));
        }
        Ok(())
    }

    pub fn female_f(&self) -> f64 {
        if self.female {
            1.0
        } else {
            0.0
        }
    }
}

/// Experience covariates in force at the start of a year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeVaryingCovariates {
    pub xp: f64,
    pub xp_sq: f64,
}

impl TimeVaryingCovariates {
    pub fn new(xp: f64) -> Self {
        Self { xp, xp_sq: xp * xp }
    }

    /// Experience after `employed_years` employed years since first observation.
    pub fn after(first_xp: f64, employed_years: usize) -> Self {
        Self::new(first_xp + employed_years as f64 * XP_STEP)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearRecord {
    pub year: i32,
    pub state: EmploymentState,
    pub log_wage: Option<f64>,
    pub zv: TimeVaryingCovariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualHistory {
    pub id: u64,
    pub zf: FixedCovariates,
    pub years: Vec<YearRecord>,
}

impl IndividualHistory {
    /// Builds a history from `(year, state, log_wage)` triples, deriving experience
    /// by the accrual rule (+0.1 after every employed year).
    pub fn from_spells(
        id: u64,
        zf: FixedCovariates,
        spells: impl IntoIterator<Item = (i32, EmploymentState, Option<f64>)>,
    ) -> Self {
        let mut years: Vec<YearRecord> = spells
            .into_iter()
            .map(|(year, state, log_wage)| YearRecord {
                year,
                state,
                log_wage,
                zv: TimeVaryingCovariates::new(0.0),
            })
            .collect();
        years.sort_by_key(|r| r.year);
        let mut h = Self { id, zf, years };
        h.recompute_experience();
        h
    }

    /// Re-derives every year's experience from `first_xp` and the employed years before it.
    pub fn recompute_experience(&mut self) {
        let mut employed = 0usize;
        for r in self.years.iter_mut() {
            r.zv = TimeVaryingCovariates::after(self.zf.first_xp, employed);
            if r.state.is_employed() {
                employed += 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn first_year(&self) -> Option<i32> {
        self.years.first().map(|r| r.year)
    }

    pub fn last_year(&self) -> Option<i32> {
        self.years.last().map(|r| r.year)
    }

    /// Checks the structural invariants: wage iff employed, finite wages,
    /// strictly increasing years.
    pub fn validate(&self) -> Result<()> {
        self.zf.validate()?;
        for r in &self.years {
            match (r.state.is_employed(), r.log_wage) {
                (true, None) => {
                    return Err(Error::Validation(format!(
                        "person {} year {}: employed without a wage",
                        self.id, r.year
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Validation(format!(
                        "person {} year {}: wage present in non-employment",
                        self.id, r.year
                    )))
                }
                (true, Some(w)) if !w.is_finite() => {
                    return Err(Error::Validation(format!(
                        "person {} year {}: non-finite wage",
                        self.id, r.year
                    )))
                }
                _ => {}
            }
        }
        for w in self.years.windows(2) {
            if w[1].year <= w[0].year {
                return Err(Error::Validation(format!(
                    "person {}: years not strictly increasing at {}",
                    self.id, w[1].year
                )));
            }
        }
        Ok(())
    }

    pub fn is_contiguous(&self) -> bool {
        self.years.windows(2).all(|w| w[1].year == w[0].year + 1)
    }
}

/// A (transition class, income class) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassPair {
    pub km: usize,
    pub ky: usize,
}

//! Parameter containers for the mobility and income blocks, plus run configuration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::math::log_softmax_in_place;
use crate::types::N_STATES;

/// Multinomial-logit coefficients: one row per outcome, row 0 is the base and
/// stays identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCoefs {
    n_outcomes: usize,
    n_features: usize,
    data: Vec<f64>,
}

impl LogitCoefs {
    pub fn zeros(n_outcomes: usize, n_features: usize) -> Self {
        Self {
            n_outcomes,
            n_features,
            data: vec![0.0; n_outcomes * n_features],
        }
    }

    /// Builds from the non-base rows (outcomes 1..n).
    pub fn from_rows(n_features: usize, non_base: &[Vec<f64>]) -> Result<Self> {
        let mut c = Self::zeros(non_base.len() + 1, n_features);
        for (j, row) in non_base.iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::invalid(format!(
                    "logit row {} has {} coefficients, expected {}",
                    j + 1,
                    row.len(),
                    n_features
                )));
            }
            c.row_mut(j + 1).copy_from_slice(row);
        }
        Ok(c)
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_features..(j + 1) * self.n_features]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_features..(j + 1) * self.n_features]
    }

    /// Full row-major matrix including the zero base row.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn set_from_slice(&mut self, full: &[f64]) {
        assert_eq!(full.len(), self.data.len());
        self.data.copy_from_slice(full);
        self.row_mut(0).fill(0.0);
    }

    pub fn non_base(&self) -> &[f64] {
        &self.data[self.n_features..]
    }

    #[inline]
    pub fn scores_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_features);
        for (j, o) in out.iter_mut().enumerate().take(self.n_outcomes) {
            *o = dot(self.row(j), x);
        }
    }

    /// Log-probabilities of every outcome; `out` has `n_outcomes` entries.
    #[inline]
    pub fn log_probs_into(&self, x: &[f64], out: &mut [f64]) {
        self.scores_into(x, out);
        log_softmax_in_place(&mut out[..self.n_outcomes]);
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_outcomes];
        self.log_probs_into(x, &mut out);
        out.iter_mut().for_each(|v| *v = v.exp());
        out
    }

    fn validate(&self, block: &str) -> Result<()> {
        if self.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::ParamBlock {
                block: block.into(),
                message: "base outcome coefficients must be zero".into(),
            });
        }
        check_finite(block, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(block: &str, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::ParamBlock {
            block: block.into(),
            message: format!("non-finite coefficient at position {i}"),
        });
    }
    Ok(())
}

/// Θᵐ: class-membership logits, initial-state logits, transition logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityParams {
    pub design: Design,
    pub kappa_m: LogitCoefs,
    pub chi0: LogitCoefs,
    pub chi: LogitCoefs,
}

impl MobilityParams {
    pub fn zeros(design: Design) -> Self {
        Self {
            design,
            kappa_m: LogitCoefs::zeros(design.k_m, design.kappa_m_len()),
            chi0: LogitCoefs::zeros(N_STATES, design.chi0_len()),
            chi: LogitCoefs::zeros(N_STATES, design.chi_len()),
        }
    }

    /// Every non-base coefficient drawn uniform(−scale, scale).
    pub fn random<R: Rng + ?Sized>(design: Design, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(design);
        for block in [&mut p.kappa_m, &mut p.chi0, &mut p.chi] {
            for j in 1..block.n_outcomes() {
                for v in block.row_mut(j) {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.kappa_m.validate("kappa_m")?;
        self.chi0.validate("chi0")?;
        self.chi.validate("chi")
    }

    /// Concatenation of all free coefficients.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.kappa_m.non_base());
        v.extend_from_slice(self.chi0.non_base());
        v.extend_from_slice(self.chi.non_base());
        v
    }
}

/// Θʸ: income-class logits plus mean, log-variance and correlation-link coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct IncomeParams {
    pub design: Design,
    pub kappa_y: LogitCoefs,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub xi: Vec<f64>,
}

impl IncomeParams {
    pub fn zeros(design: Design) -> Self {
        Self {
            design,
            kappa_y: LogitCoefs::zeros(design.k_y, design.kappa_y_len()),
            mu: vec![0.0; design.mu_len()],
            sigma: vec![0.0; design.sigma_len()],
            xi: vec![0.0; design.xi_len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kappa_y.validate("kappa_y")?;
        let d = self.design;
        for (name, v, n) in [
            ("mu", &self.mu, d.mu_len()),
            ("sigma", &self.sigma, d.sigma_len()),
            ("xi", &self.xi, d.xi_len()),
        ] {
            if v.len() != n {
                return Err(Error::ParamBlock {
                    block: name.into(),
                    message: format!("expected {n} coefficients, found {}", v.len()),
                });
            }
            check_finite(name, v)?;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.kappa_y.non_base());
        v.extend_from_slice(&self.mu);
        v.extend_from_slice(&self.sigma);
        v.extend_from_slice(&self.xi);
        v
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// AR(1) coefficient used when simulating normalized wages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// ρ from the closed-form root in σ² and τ, innovation variance 1 − ρ².
    PaperFormula,
    /// ρ = τ with innovation variance 1 − τ².
    #[default]
    CorrelationConsistent,
}

/// Post-retirement replacement rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplacementRate {
    Uniform(f64),
    BySector { public: f64, private: f64 },
}

impl ReplacementRate {
    pub fn for_sector(&self, public: bool) -> f64 {
        match *self {
            ReplacementRate::Uniform(r) => r,
            ReplacementRate::BySector {
                public: p,
                private: q,
            } => {
                if public {
                    p
                } else {
                    q
                }
            }
        }
    }

    /// Named presets: `0.4`, `0.7`, or `sector` (0.75 public, 0.71 private).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sector" => Ok(ReplacementRate::BySector {
                public: 0.75,
                private: 0.71,
            }),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|r| r.is_finite() && *r >= 0.0)
                .map(ReplacementRate::Uniform)
                .ok_or_else(|| Error::invalid(format!("unknown replacement-rate preset `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ReplacementRate::Uniform(r) => format!("{r}"),
            ReplacementRate::BySector { public, private } => format!("pub{public}_pvt{private}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k_m: usize,
    pub k_y: usize,
    pub beta: f64,
    pub rr: ReplacementRate,
    pub retirement_age: u32,
    pub retirement_horizon_years: u32,
    pub em_tol: f64,
    pub kernel_tol: f64,
    pub em_max_iter: usize,
    pub kernel_max_iter: usize,
    pub rho_mode: RhoMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_m: 4,
            k_y: 3,
            beta: 0.95,
            rr: ReplacementRate::Uniform(0.4),
            retirement_age: 60,
            retirement_horizon_years: 22,
            em_tol: 1e-3,
            kernel_tol: 1e-8,
            em_max_iter: 500,
            kernel_max_iter: 200,
            rho_mode: RhoMode::CorrelationConsistent,
        }
    }
}

impl ModelConfig {
    pub fn design(&self) -> Design {
        Design::new(self.k_m, self.k_y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_m == 0 || self.k_y == 0 {
            return Err(Error::invalid("class counts must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0,1), got {}", self.beta)));
        }
        if !(self.em_tol > 0.0 && self.kernel_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

/// A complete parameter set: configuration plus both coefficient blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub mobility: MobilityParams,
    pub income: IncomeParams,
}

impl ParameterSet {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.design();
        if self.mobility.design != d || self.income.design != d {
            return Err(Error::invalid("coefficient blocks disagree with configured class counts"));
        }
        self.mobility.validate()?;
        self.income.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_init_keeps_base_rows_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = MobilityParams::random(Design::new(4, 3), 0.1, &mut rng);
        p.validate().unwrap();
        assert!(p.flatten().iter().all(|v| v.abs() < 0.1));
        assert!(p.chi.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rr_presets() {
        assert_eq!(ReplacementRate::preset("0.7").unwrap(), ReplacementRate::Uniform(0.7));
        let s = ReplacementRate::preset("sector").unwrap();
        assert_eq!(s.for_sector(true), 0.75);
        assert_eq!(s.for_sector(false), 0.71);
        assert!(ReplacementRate::preset("lots").is_err());
    }
}

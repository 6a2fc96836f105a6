//! Published coefficient estimates shipped as a parameter-file fixture.

use crate::params::ParameterSet;
use crate::params_io::parse_params;

const PUBLISHED_TOML: &str = include_str!("../fixtures/published_params.toml");

/// Raw text of the bundled published-estimates file.
pub fn published_params_toml() -> &'static str {
    PUBLISHED_TOML
}

/// The published estimates (K_m = 4, K_y = 3).
pub fn published_params() -> ParameterSet {
    parse_params(PUBLISHED_TOML).expect("bundled parameter fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_parses_with_expected_anchors() {
        let p = published_params();
        let d = p.config.design();
        let mu = d.mu_names();
        let at = |n: &str| p.income.mu[mu.iter().position(|x| x == n).unwrap()];
        assert_eq!(at("const"), 10.182);
        assert_eq!(at("s3"), -3.031);
        assert_eq!(*p.income.sigma.last().unwrap(), -3.524);
        assert_eq!(p.mobility.kappa_m.row(1)[2], -20.756);
        assert_eq!(p.mobility.chi.row(4)[17], -5.101);
    }
}

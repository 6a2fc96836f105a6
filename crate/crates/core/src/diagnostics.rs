//! Model-fit measurements: transition matrices, wage densities, and
//! latent-class composition.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmploymentState, IndividualHistory, N_STATES, XP_STEP};

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

/// Empirical one-year transition frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `counts[a][b]`: transitions from state a to state b.
    pub counts: [[u64; N_STATES]; N_STATES],
    /// Row-normalized counts; `None` for origins never observed.
    pub probs: [Option<[f64; N_STATES]>; N_STATES],
    /// State shares over every observation, including final years.
    pub occupancy: [f64; N_STATES],
    pub n_observations: u64,
}

impl TransitionMatrix {
    pub fn from_counts(counts: [[u64; N_STATES]; N_STATES], occ: [u64; N_STATES]) -> Self {
        let mut probs = [None; N_STATES];
        for (a, row) in counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n > 0 {
                let mut p = [0.0; N_STATES];
                for (b, c) in row.iter().enumerate() {
                    p[b] = *c as f64 / n as f64;
                }
                probs[a] = Some(p);
            }
        }
        let n_obs: u64 = occ.iter().sum();
        let mut occupancy = [0.0; N_STATES];
        if n_obs > 0 {
            for (o, c) in occupancy.iter_mut().zip(occ) {
                *o = c as f64 / n_obs as f64;
            }
        }
        Self {
            counts,
            probs,
            occupancy,
            n_observations: n_obs,
        }
    }

    /// True when no transition was counted.
    pub fn is_empty(&self) -> bool {
        self.probs.iter().all(Option::is_none)
    }

    pub fn prob(&self, from: EmploymentState, to: EmploymentState) -> Option<f64> {
        self.probs[from.code()].map(|r| r[to.code()])
    }

    /// `from,to,count,prob` rows then `occupancy,state,share` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("from,to,count,prob\n");
        for a in 0..N_STATES {
            for b in 0..N_STATES {
                let p = self.probs[a].map(|r| format!("{:?}", r[b])).unwrap_or_default();
                let _ = writeln!(s, "{a},{b},{},{p}", self.counts[a][b]);
            }
        }
        s.push_str("state,occupancy\n");
        for (k, o) in self.occupancy.iter().enumerate() {
            let _ = writeln!(s, "{k},{o:?}");
        }
        s
    }
}

/// Transition matrix over the given histories; only adjacent calendar years
/// count as transitions.
pub fn transition_matrix<'a, I>(histories: I) -> TransitionMatrix
where
    I: IntoIterator<Item = &'a IndividualHistory>,
{
    let mut counts = [[0u64; N_STATES]; N_STATES];
    let mut occ = [0u64; N_STATES];
    for h in histories {
        for r in &h.years {
            occ[r.state.code()] += 1;
        }
        for w in h.years.windows(2) {
            if w[1].year == w[0].year + 1 {
                counts[w[0].state.code()][w[1].state.code()] += 1;
            }
        }
    }
    TransitionMatrix::from_counts(counts, occ)
}

pub fn transition_matrix_where<F>(panel: &[IndividualHistory], filter: F) -> TransitionMatrix
where
    F: Fn(&IndividualHistory) -> bool,
{
    transition_matrix(panel.iter().filter(|h| filter(h)))
}

/// Largest absolute cell difference over origins present in both matrices.
pub fn matrix_distance(a: &TransitionMatrix, b: &TransitionMatrix) -> f64 {
    let mut d: f64 = 0.0;
    for (ra, rb) in a.probs.iter().zip(&b.probs) {
        if let (Some(ra), Some(rb)) = (ra, rb) {
            for (x, y) in ra.iter().zip(rb) {
                d = d.max((x - y).abs());
            }
        }
    }
    d
}

/// Histogram of log wages on the fixed grid `[k·width, (k+1)·width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WageHistogram {
    pub width: f64,
    /// Grid index of the first bin.
    pub first_bin: i64,
    pub counts: Vec<u64>,
    pub n: u64,
}

impl WageHistogram {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Density of bin `k` of `counts`: count / (n · width).
    pub fn density(&self, k: usize) -> f64 {
        self.counts[k] as f64 / (self.n as f64 * self.width)
    }

    pub fn bin_lower(&self, k: usize) -> f64 {
        (self.first_bin + k as i64) as f64 * self.width
    }

    fn density_at(&self, bin: i64) -> f64 {
        let k = bin - self.first_bin;
        if self.n == 0 || k < 0 || k as usize >= self.counts.len() {
            0.0
        } else {
            self.density(k as usize)
        }
    }
}

pub fn wage_histogram<I: IntoIterator<Item = f64>>(wages: I, width: f64) -> Result<WageHistogram> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid(format!("bin width must be positive, got {width}")));
    }
    let mut bins: BTreeMap<i64, u64> = BTreeMap::new();
    for y in wages {
        if !y.is_finite() {
            return Err(Error::invalid("non-finite wage in histogram input"));
        }
        *bins.entry((y / width).floor() as i64).or_default() += 1;
    }
    let (Some((&lo, _)), Some((&hi, _))) = (bins.first_key_value(), bins.last_key_value()) else {
        return Ok(WageHistogram {
            width,
            first_bin: 0,
            counts: Vec::new(),
            n: 0,
        });
    };
    let mut counts = vec![0; (hi - lo + 1) as usize];
    for (b, c) in &bins {
        counts[(b - lo) as usize] = *c;
    }
    Ok(WageHistogram {
        width,
        first_bin: lo,
        n: counts.iter().sum(),
        counts,
    })
}

/// ∫|f_a − f_b| over the common grid; `None` if widths differ or a side is empty.
pub fn histogram_l1(a: &WageHistogram, b: &WageHistogram) -> Option<f64> {
    if a.width != b.width || a.is_empty() || b.is_empty() {
        return None;
    }
    let lo = a.first_bin.min(b.first_bin);
    let hi = (a.first_bin + a.counts.len() as i64).max(b.first_bin + b.counts.len() as i64);
    Some((lo..hi).map(|k| (a.density_at(k) - b.density_at(k)).abs()).sum::<f64>() * a.width)
}

/// Partition used for per-group histograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramKey {
    All,
    State,
    /// Public vs private, pooling full and part time.
    Sector,
    Gender,
    /// Requires class labels.
    IncomeClass,
}

/// Histograms of employed log wages split by `key`. `income_classes`, when
/// given, is parallel to `panel`.
pub fn wage_histograms(
    panel: &[IndividualHistory],
    income_classes: Option<&[usize]>,
    width: f64,
    key: HistogramKey,
) -> Result<BTreeMap<String, WageHistogram>> {
    if key == HistogramKey::IncomeClass && income_classes.is_none_or(|c| c.len() != panel.len()) {
        return Err(Error::invalid("income-class histograms need one class label per individual"));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, h) in panel.iter().enumerate() {
        for r in &h.years {
            let (true, Some(y)) = (r.state.is_employed(), r.log_wage) else {
                continue;
            };
            let label = match key {
                HistogramKey::All => "all".to_string(),
                HistogramKey::State => r.state.label().to_string(),
                HistogramKey::Sector => if r.state.is_public() { "public" } else { "private" }.to_string(),
                HistogramKey::Gender => if h.zf.female { "women" } else { "men" }.to_string(),
                HistogramKey::IncomeClass => format!("ky{}", income_classes.unwrap()[i]),
            };
            groups.entry(label).or_default().push(y);
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, wage_histogram(v, width)?)))
        .collect()
}

pub fn histograms_csv(h: &BTreeMap<String, WageHistogram>) -> String {
    let mut s = String::from("group,bin_lower,bin_upper,count,density\n");
    for (g, hist) in h {
        for k in 0..hist.counts.len() {
            let lo = hist.bin_lower(k);
            let _ = writeln!(
                s,
                "{g},{lo:?},{:?},{},{:?}",
                lo + hist.width,
                hist.counts[k],
                hist.density(k)
            );
        }
    }
    s
}

/// Age bands at first observation: ≤30, 31–45, >45.
pub fn age_band(age: u32) -> usize {
    match age {
        0..=30 => 0,
        31..=45 => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub class: usize,
    pub count: usize,
    pub share: f64,
    pub female_share: f64,
    pub educ_shares: [f64; 3],
    pub age_band_shares: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub rows: Vec<CompositionRow>,
}

impl CompositionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "class,count,share,female_share,educ_low,educ_medium,educ_high,age_le30,age_31_45,age_gt45\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.class,
                r.count,
                r.share,
                r.female_share,
                r.educ_shares[0],
                r.educ_shares[1],
                r.educ_shares[2],
                r.age_band_shares[0],
                r.age_band_shares[1],
                r.age_band_shares[2]
            );
        }
        s
    }
}

/// Per-class shares of individuals and their covariate mix. `classes` is
/// parallel to `panel`; classes with no members are listed with zero shares.
pub fn composition_table(
    panel: &[IndividualHistory],
    classes: &[usize],
    n_classes: usize,
    entry_age_base: u32,
) -> Result<CompositionTable> {
    if classes.len() != panel.len() {
        return Err(Error::invalid("one class label per individual is required"));
    }
    if let Some(c) = classes.iter().find(|c| **c >= n_classes) {
        return Err(Error::invalid(format!("class label {c} out of range")));
    }
    let mut count = vec![0usize; n_classes];
    let mut female = vec![0usize; n_classes];
    let mut educ = vec![[0usize; 3]; n_classes];
    let mut age = vec![[0usize; 3]; n_classes];
    for (h, &c) in panel.iter().zip(classes) {
        count[c] += 1;
        female[c] += h.zf.female as usize;
        educ[c][h.zf.educ.code()] += 1;
        let a = entry_age_base + (h.zf.first_xp / XP_STEP).round() as u32;
        age[c][age_band(a)] += 1;
    }
    let total = panel.len().max(1) as f64;
    let frac = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let rows = (0..n_classes)
        .map(|c| CompositionRow {
            class: c,
            count: count[c],
            share: count[c] as f64 / total,
            female_share: frac(female[c], count[c]),
            educ_shares: educ[c].map(|x| frac(x, count[c])),
            age_band_shares: age[c].map(|x| frac(x, count[c])),
        })
        .collect();
    Ok(CompositionTable { rows })
}

/// Side-by-side fit of two panels.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub a: [TransitionMatrix; 3],
    pub b: [TransitionMatrix; 3],
    /// Aggregate, men, women.
    pub distance: [f64; 3],
    /// Per employed state, in state order.
    pub histogram_l1: BTreeMap<String, Option<f64>>,
}

pub fn compare_panels(a: &[IndividualHistory], b: &[IndividualHistory], width: f64) -> Result<CompareReport> {
    let three = |p: &[IndividualHistory]| {
        [
            transition_matrix(p),
            transition_matrix_where(p, |h| !h.zf.female),
            transition_matrix_where(p, |h| h.zf.female),
        ]
    };
    let (ma, mb) = (three(a), three(b));
    let distance = [0, 1, 2].map(|k| matrix_distance(&ma[k], &mb[k]));
    let ha = wage_histograms(a, None, width, HistogramKey::State)?;
    let hb = wage_histograms(b, None, width, HistogramKey::State)?;
    let mut l1 = BTreeMap::new();
    for s in &EmploymentState::ALL[1..] {
        let l = s.label().to_string();
        let d = match (ha.get(&l), hb.get(&l)) {
            (Some(x), Some(y)) => histogram_l1(x, y),
            _ => None,
        };
        l1.insert(l, d);
    }
    Ok(CompareReport {
        a: ma,
        b: mb,
        distance,
        histogram_l1: l1,
    })
}

impl CompareReport {
    /// One report: distances, L1 distances, then both sets of matrices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,group,value\n");
        for (g, d) in ["all", "men", "women"].iter().zip(self.distance) {
            let _ = writeln!(s, "matrix_distance,{g},{d:?}");
        }
        for (g, d) in &self.histogram_l1 {
            let v = d.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(s, "histogram_l1,{g},{v}");
        }
        s.push_str("panel,group,from,to,count,prob\n");
        for (name, set) in [("a", &self.a), ("b", &self.b)] {
            for (g, m) in ["all", "men", "women"].iter().zip(set.iter()) {
                for from in 0..N_STATES {
                    for to in 0..N_STATES {
                        let p = m.probs[from].map(|r| format!("{:?}", r[to])).unwrap_or_default();
                        let _ = writeln!(s, "{name},{g},{from},{to},{},{p}", m.counts[from][to]);
                    }
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Education, FixedCovariates};
    use EmploymentState::*;

    fn person(id: u64, states: &[EmploymentState]) -> IndividualHistory {
        let zf = FixedCovariates::new(false, Education::Low, 0.0).unwrap();
        IndividualHistory::from_spells(
            id,
            zf,
            states
                .iter()
                .enumerate()
                .map(|(t, s)| (2000 + t as i32, *s, s.is_employed().then_some(1.0))),
        )
    }

    #[test]
    fn alternating_states() {
        let m = transition_matrix(&[person(1, &[PrivateFullTime, PublicFullTime, PrivateFullTime, PublicFullTime])]);
        assert_eq!(m.prob(PrivateFullTime, PublicFullTime), Some(1.0));
        assert_eq!(m.prob(PublicFullTime, PrivateFullTime), Some(1.0));
        assert_eq!(m.prob(NonEmployed, NonEmployed), None);
        assert_eq!(m.occupancy[1], 0.5);
    }

    #[test]
    fn gaps_are_not_transitions() {
        let mut h = person(1, &[PrivateFullTime, PrivateFullTime]);
        h.years[1].year = 2005;
        assert!(transition_matrix(&[h]).is_empty());
    }

    #[test]
    fn distance_single_cell() {
        let a = transition_matrix(&[person(1, &[PrivateFullTime, PublicFullTime, PrivateFullTime])]);
        let mut b = a.clone();
        assert_eq!(matrix_distance(&a, &b), 0.0);
        let r = b.probs[1].as_mut().unwrap();
        r[2] -= 0.03;
        r[1] += 0.03;
        assert!((matrix_distance(&a, &b) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn histogram_single_value() {
        let h = wage_histogram([1.234], 0.05).unwrap();
        assert_eq!(h.counts, vec![1]);
        assert!((h.density(0) - 20.0).abs() < 1e-12);
        assert!(wage_histogram([1.0], 0.0).is_err());
        assert!(wage_histogram(std::iter::empty(), 0.05).unwrap().is_empty());
    }

    #[test]
    fn composition_single_class() {
        let p = vec![person(1, &[NonEmployed; 3]), person(2, &[NonEmployed; 3])];
        let t = composition_table(&p, &[0, 0], 1, 25).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].share, 1.0);
        assert_eq!(t.rows[0].age_band_shares, [1.0, 0.0, 0.0]);
    }
}

use std::collections::HashMap;

use crate::design::Design;
use crate::error::Result;
use crate::kernels::{fit_grouped_mlogit, GroupedLogitData, KernelOptions};
use crate::params::{LogitCoefs, MobilityParams};
use crate::types::{FixedCovariates, IndividualHistory, N_STATES};

use super::Posterior;

fn zf_key(zf: &FixedCovariates) -> (bool, usize, u64) {
    (zf.female, zf.educ.code(), zf.first_xp.to_bits())
}

/// Feature patterns of the three mobility logits, built once per panel.
/// Each class copy of a row maps to the pattern of its (features, class)
/// combination, so the weighted "K copies" data never exist row by row.
#[derive(Debug, Clone)]
pub struct MobilityLayout {
    design: Design,
    kappa: GroupedLogitData,
    chi0: GroupedLogitData,
    chi: GroupedLogitData,
    /// Per individual: zf pattern, first state.
    ind: Vec<(usize, usize)>,
    /// Per individual: range into `trans`.
    trans_range: Vec<(usize, usize)>,
    /// (class-free χ pattern, outcome state) for every transition.
    trans: Vec<(usize, usize)>,
}

impl MobilityLayout {
    pub fn new(panel: &[IndividualHistory], design: Design) -> Self {
        let km_count = design.k_m;
        let mut zf_ids: HashMap<(bool, usize, u64), usize> = HashMap::new();
        let mut zfs: Vec<FixedCovariates> = Vec::new();
        let mut chi_ids: HashMap<(usize, usize, u64), usize> = HashMap::new();
        let mut chi_keys: Vec<(usize, usize, u64)> = Vec::new();
        let mut ind = Vec::with_capacity(panel.len());
        let mut trans_range = Vec::with_capacity(panel.len());
        let mut trans = Vec::new();
        for h in panel {
            let zid = *zf_ids.entry(zf_key(&h.zf)).or_insert_with(|| {
                zfs.push(h.zf);
                zfs.len() - 1
            });
            ind.push((zid, h.years.first().map_or(0, |r| r.state.code())));
            let start = trans.len();
            for w in h.years.windows(2) {
                let key = (zid, w[0].state.code(), w[0].zv.xp.to_bits());
                let cid = *chi_ids.entry(key).or_insert_with(|| {
                    chi_keys.push(key);
                    chi_keys.len() - 1
                });
                trans.push((cid, w[1].state.code()));
            }
            trans_range.push((start, trans.len()));
        }

        let mut kappa = GroupedLogitData::new(design.kappa_m_len(), km_count);
        let mut row = vec![0.0; design.chi_len().max(design.chi0_len())];
        let zero_k = vec![0.0; km_count];
        let zero_s = vec![0.0; N_STATES];
        for zf in &zfs {
            design.kappa_m_row(zf, &mut row[..design.kappa_m_len()]);
            kappa.push(&row[..design.kappa_m_len()], &zero_k);
        }
        let mut chi0 = GroupedLogitData::new(design.chi0_len(), N_STATES);
        for zf in &zfs {
            for km in 0..km_count {
                design.chi0_row(zf, km, &mut row[..design.chi0_len()]);
                chi0.push(&row[..design.chi0_len()], &zero_s);
            }
        }
        let mut chi = GroupedLogitData::new(design.chi_len(), N_STATES);
        for &(zid, prev, xp_bits) in &chi_keys {
            let zv = crate::types::TimeVaryingCovariates::new(f64::from_bits(xp_bits));
            let prev = crate::types::EmploymentState::ALL[prev];
            for km in 0..km_count {
                design.chi_row(prev, &zv, &zfs[zid], km, &mut row[..design.chi_len()]);
                chi.push(&row[..design.chi_len()], &zero_s);
            }
        }
        Self {
            design,
            kappa,
            chi0,
            chi,
            ind,
            trans_range,
            trans,
        }
    }

    fn fill_counts(&mut self, post: &Posterior) {
        let k = self.design.k_m;
        self.kappa.counts.fill(0.0);
        self.chi0.counts.fill(0.0);
        self.chi.counts.fill(0.0);
        for (i, &(zid, s0)) in self.ind.iter().enumerate() {
            let p = post.row(i);
            let (a, b) = self.trans_range[i];
            for (km, &w) in p.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                self.kappa.counts[zid * k + km] += w;
                self.chi0.counts[(zid * k + km) * N_STATES + s0] += w;
                for &(cid, s) in &self.trans[a..b] {
                    self.chi.counts[(cid * k + km) * N_STATES + s] += w;
                }
            }
        }
    }
}

fn refit(
    data: &GroupedLogitData,
    current: &LogitCoefs,
    opts: &KernelOptions,
    warnings: &mut usize,
) -> Result<LogitCoefs> {
    let r = fit_grouped_mlogit(data, current.as_slice(), opts)?;
    if !r.converged {
        *warnings += 1;
    }
    let mut c = current.clone();
    c.set_from_slice(&r.coefficients);
    Ok(c)
}

/// Mobility M-step: weighted logits for κᵐ, χ⁰ and χ over the class-weighted
/// copies of the panel, each warm-started at `current`. Returns the new
/// parameters and the number of inner fits that did not meet the tolerance.
pub fn m_step_mobility(
    layout: &mut MobilityLayout,
    post: &Posterior,
    current: &MobilityParams,
    opts: &KernelOptions,
) -> Result<(MobilityParams, usize)> {
    layout.fill_counts(post);
    let mut warnings = 0;
    let mut next = current.clone();
    if layout.design.k_m > 1 {
        next.kappa_m = refit(&layout.kappa, &current.kappa_m, opts, &mut warnings)
            .map_err(|e| e.context("class-membership logit"))?;
    }
    next.chi0 = refit(&layout.chi0, &current.chi0, opts, &mut warnings)
        .map_err(|e| e.context("initial-state logit"))?;
    if !layout.trans.is_empty() {
        next.chi = refit(&layout.chi, &current.chi, opts, &mut warnings)
            .map_err(|e| e.context("transition logit"))?;
    }
    Ok((next, warnings))
}

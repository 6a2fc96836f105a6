//! Fixed design-matrix layouts for every coefficient block.
//!
//! Each block has a canonical feature order, mirrored one-to-one by the
//! parameter file. Class dummies depend on the number of classes, so layouts
//! are generated from a [`Design`] rather than hard-coded.

use crate::types::{EmploymentState, FixedCovariates, TimeVaryingCovariates};

/// Number of classes in each latent dimension; determines dummy counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Design {
    pub k_m: usize,
    pub k_y: usize,
}

struct Row<'a> {
    buf: &'a mut [f64],
    at: usize,
}

impl<'a> Row<'a> {
    fn new(buf: &'a mut [f64]) -> Self {
        Self { buf, at: 0 }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        self.buf[self.at] = v;
        self.at += 1;
    }

    #[inline]
    fn dummies(&mut self, index: usize, count: usize) {
        // dummies for levels 1..count; level 0 is the base
        for level in 1..count {
            self.push(if index == level { 1.0 } else { 0.0 });
        }
    }

    #[inline]
    fn zf(&mut self, zf: &FixedCovariates) {
        self.push(zf.female_f());
        self.push(if zf.educ.code() == 1 { 1.0 } else { 0.0 });
        self.push(if zf.educ.code() == 2 { 1.0 } else { 0.0 });
        self.push(zf.first_xp);
    }

    fn finish(self) {
        debug_assert_eq!(self.at, self.buf.len(), "design row length mismatch");
    }
}

#[inline]
fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

const ZF_NAMES: [&str; 4] = ["female", "educ_med", "educ_high", "first_xp"];

fn class_names(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..count).map(move |k| format!("{prefix}{k}"))
}

impl Design {
    pub fn new(k_m: usize, k_y: usize) -> Self {
        assert!(k_m >= 1 && k_y >= 1, "class counts must be positive");
        Self { k_m, k_y }
    }

    pub fn n_classes(&self) -> usize {
        self.k_m * self.k_y
    }

    // ---- class membership -------------------------------------------------

    pub fn kappa_m_names(&self) -> Vec<String> {
        ZF_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once("const".to_string()))
            .collect()
    }

    pub fn kappa_m_len(&self) -> usize {
        5
    }

    pub fn kappa_m_row(&self, zf: &FixedCovariates, out: &mut [f64]) {
        let mut r = Row::new(out);
        r.zf(zf);
        r.push(1.0);
        r.finish();
    }

    pub fn kappa_y_names(&self) -> Vec<String> {
        ZF_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(class_names("km", self.k_m))
            .chain(std::iter::once("const".to_string()))
            .collect()
    }

    pub fn kappa_y_len(&self) -> usize {
        4 + (self.k_m - 1) + 1
    }

    pub fn kappa_y_row(&self, zf: &FixedCovariates, km: usize, out: &mut [f64]) {
        let mut r = Row::new(out);
        r.zf(zf);
        r.dummies(km, self.k_m);
        r.push(1.0);
        r.finish();
    }

    // ---- state selection --------------------------------------------------

    pub fn chi0_names(&self) -> Vec<String> {
        self.kappa_y_names()
    }

    pub fn chi0_len(&self) -> usize {
        self.kappa_y_len()
    }

    pub fn chi0_row(&self, zf: &FixedCovariates, km: usize, out: &mut [f64]) {
        self.kappa_y_row(zf, km, out)
    }

    pub fn chi_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=4).map(|s| format!("prev{s}")).collect();
        v.push("xp_prev".into());
        v.extend((1..=4).map(|s| format!("xp_prev_x_prev{s}")));
        v.push("xp_prev_sq".into());
        v.extend(ZF_NAMES.iter().map(|s| s.to_string()));
        v.extend(class_names("km", self.k_m));
        v.push("const".into());
        v
    }

    pub fn chi_len(&self) -> usize {
        4 + 1 + 4 + 1 + 4 + (self.k_m - 1) + 1
    }

    pub fn chi_row(
        &self,
        prev: EmploymentState,
        zv_prev: &TimeVaryingCovariates,
        zf: &FixedCovariates,
        km: usize,
        out: &mut [f64],
    ) {
        let p = prev.code();
        let mut r = Row::new(out);
        for s in 1..=4 {
            r.push(ind(p == s));
        }
        r.push(zv_prev.xp);
        for s in 1..=4 {
            r.push(if p == s { zv_prev.xp } else { 0.0 });
        }
        r.push(zv_prev.xp_sq);
        r.zf(zf);
        r.dummies(km, self.k_m);
        r.push(1.0);
        r.finish();
    }

    // ---- income ---------------------------------------------------------

    fn state_by_ky_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for s in 1..=4 {
            for ky in 1..self.k_y {
                v.push(format!("s{s}_x_ky{ky}"));
            }
        }
        v
    }

    pub fn mu_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["s2", "s3", "s4", "xp", "xp_x_s2", "xp_x_s3", "xp_x_s4", "xp_sq"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(ZF_NAMES.iter().map(|s| s.to_string()));
        v.extend(self.state_by_ky_names());
        v.push("const".into());
        v
    }

    pub fn mu_len(&self) -> usize {
        8 + 4 + 4 * (self.k_y - 1) + 1
    }

    pub fn mu_row(
        &self,
        state: EmploymentState,
        zv: &TimeVaryingCovariates,
        zf: &FixedCovariates,
        ky: usize,
        out: &mut [f64],
    ) {
        let s = state.code();
        debug_assert!(s != 0);
        let mut r = Row::new(out);
        for k in 2..=4 {
            r.push(ind(s == k));
        }
        r.push(zv.xp);
        for k in 2..=4 {
            r.push(if s == k { zv.xp } else { 0.0 });
        }
        r.push(zv.xp_sq);
        r.zf(zf);
        for k in 1..=4 {
            for y in 1..self.k_y {
                r.push(ind(s == k && ky == y));
            }
        }
        r.push(1.0);
        r.finish();
    }

    pub fn sigma_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["s2", "s3", "s4", "xp", "xp_x_s2", "xp_x_s3", "xp_x_s4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((1..=4).map(|s| format!("xp_sq_x_s{s}")));
        v.extend(ZF_NAMES.iter().map(|s| s.to_string()));
        v.extend(class_names("km", self.k_m));
        v.extend(self.state_by_ky_names());
        v.push("const".into());
        v
    }

    pub fn sigma_len(&self) -> usize {
        7 + 4 + 4 + (self.k_m - 1) + 4 * (self.k_y - 1) + 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sigma_row(
        &self,
        state: EmploymentState,
        zv: &TimeVaryingCovariates,
        zf: &FixedCovariates,
        km: usize,
        ky: usize,
        out: &mut [f64],
    ) {
        let s = state.code();
        debug_assert!(s != 0);
        let mut r = Row::new(out);
        for k in 2..=4 {
            r.push(ind(s == k));
        }
        r.push(zv.xp);
        for k in 2..=4 {
            r.push(if s == k { zv.xp } else { 0.0 });
        }
        for k in 1..=4 {
            r.push(if s == k { zv.xp_sq } else { 0.0 });
        }
        r.zf(zf);
        r.dummies(km, self.k_m);
        for k in 1..=4 {
            for y in 1..self.k_y {
                r.push(ind(s == k && ky == y));
            }
        }
        r.push(1.0);
        r.finish();
    }

    pub fn xi_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["cur2", "cur3", "cur4"].iter().map(|s| s.to_string()).collect();
        v.extend((1..=4).map(|s| format!("prev{s}")));
        v.push("xp".into());
        v.push("xp_sq".into());
        v.push("xp_prev".into());
        v.extend((1..=4).map(|s| format!("xp_prev_x_prev{s}")));
        v.extend(class_names("ky", self.k_y));
        v.extend(class_names("km", self.k_m));
        for y in 1..self.k_y {
            for s in 2..=4 {
                v.push(format!("ky{y}_x_cur{s}"));
            }
        }
        v.push("const".into());
        v
    }

    pub fn xi_len(&self) -> usize {
        3 + 4 + 3 + 4 + (self.k_y - 1) + (self.k_m - 1) + 3 * (self.k_y - 1) + 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn xi_row(
        &self,
        cur: EmploymentState,
        prev: EmploymentState,
        zv: &TimeVaryingCovariates,
        zv_prev: &TimeVaryingCovariates,
        km: usize,
        ky: usize,
        out: &mut [f64],
    ) {
        let c = cur.code();
        let p = prev.code();
        let mut r = Row::new(out);
        for s in 2..=4 {
            r.push(ind(c == s));
        }
        for s in 1..=4 {
            r.push(ind(p == s));
        }
        r.push(zv.xp);
        r.push(zv.xp_sq);
        r.push(zv_prev.xp);
        for s in 1..=4 {
            r.push(if p == s { zv_prev.xp } else { 0.0 });
        }
        r.dummies(ky, self.k_y);
        r.dummies(km, self.k_m);
        for y in 1..self.k_y {
            for s in 2..=4 {
                r.push(ind(ky == y && c == s));
            }
        }
        r.push(1.0);
        r.finish();
    }
}

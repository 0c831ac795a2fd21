//! Stacked estimating equations, the empirical sandwich variance, Wald
//! intervals for VE, and the trial-effect homogeneity test.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use thiserror::Error;

use crate::cohort::Panel;
use crate::linalg::{dependent_columns, dot, Lu, Matrix};
use crate::math::{expit, expm1, fabs, normal_cdf, normal_quantile, sqrt};
use crate::msm::{log_rr, CellSums, GridCell, ModelSpec, MsmError, VESurface};
use crate::weights::{censoring_groups, CensoringGroups, CensoringSpec, PropensitySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarianceError {
    #[error("bread matrix is singular; block ranks: {}", format_ranks(.0))]
    Singular(Vec<BlockRank>),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Msm(#[from] MsmError),
    #[error("cell (j = {j}, k = {k}) is not in the variance grid")]
    MissingCell { j: u32, k: u32 },
    #[error("the homogeneity test needs at least two trials")]
    SingleTrial,
    #[error("k_max = {k_max} exceeds the follow-up of the last trial ({available} weeks)")]
    KMax { k_max: u32, available: u32 },
}

fn format_ranks(r: &[BlockRank]) -> String {
    let parts: Vec<String> = r.iter().map(|b| alloc::format!("{} {}/{}", b.name, b.rank, b.size)).collect();
    parts.join(", ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRank {
    pub name: String,
    pub size: usize,
    pub rank: usize,
}

/// A system `sum_i psi(O_i; theta) = 0` over independent units.
pub trait StackedEquations {
    fn dim(&self) -> usize;

    fn units(&self) -> usize;

    /// Named index ranges used for diagnostics.
    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        vec![("theta".into(), 0..self.dim())]
    }

    /// `psi(O_i; theta)` for every unit, `units x dim`.
    fn contributions(&self, theta: &[f64]) -> Matrix;

    /// `sum_i psi(O_i; theta)`.
    fn total(&self, theta: &[f64]) -> Vec<f64>;

    /// `d/d theta` of [`total`](Self::total); central differences by default.
    fn jacobian(&self, theta: &[f64]) -> Matrix {
        fd_jacobian(self, theta)
    }
}

/// Central-difference Jacobian of `eq.total` using [`fd_step`].
pub fn fd_jacobian<E: StackedEquations + ?Sized>(eq: &E, theta: &[f64]) -> Matrix {
    let p = eq.dim();
    let mut jac = Matrix::zeros(p, p);
    let mut t = theta.to_vec();
    for d in 0..p {
        let h = fd_step(theta[d]);
        t[d] = theta[d] + h;
        let up = eq.total(&t);
        t[d] = theta[d] - h;
        let dn = eq.total(&t);
        t[d] = theta[d];
        for r in 0..p {
            jac[(r, d)] = (up[r] - dn[r]) / (2.0 * h);
        }
    }
    jac
}

#[inline]
pub fn fd_step(x: f64) -> f64 {
    (1e-6 * fabs(x)).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SandwichDiagnostics {
    /// `||A||_inf ||A^-1||_inf`.
    pub condition_estimate: f64,
    /// Largest `|V - V'|` before symmetrization, relative to `max |V|`.
    pub asymmetry: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SandwichOutput {
    /// `A = -(1/n) sum_i d psi_i / d theta`.
    pub bread: Matrix,
    /// `B = (1/n) sum_i psi_i psi_i'`.
    pub meat: Matrix,
    /// `V = A^-1 B A^-T`; `Var(theta_hat) ~ V / n`.
    pub variance: Matrix,
    pub n: usize,
    pub diagnostics: SandwichDiagnostics,
}

impl SandwichOutput {
    /// `V[a, a] / n`.
    pub fn var(&self, a: usize) -> f64 {
        self.variance[(a, a)] / self.n as f64
    }
}

fn inf_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| m.row(i).iter().map(|v| fabs(*v)).sum::<f64>()).fold(0.0, f64::max)
}

/// Empirical sandwich variance at `theta` (normally the joint root).
pub fn sandwich_variance<E: StackedEquations + ?Sized>(eq: &E, theta: &[f64]) -> Result<SandwichOutput, VarianceError> {
    let p = eq.dim();
    if theta.len() != p {
        return Err(VarianceError::Layout(alloc::format!("theta has {} entries, system has {p}", theta.len())));
    }
    let n = eq.units();
    let nf = n as f64;
    let mut bread = eq.jacobian(theta);
    bread.scale(-1.0 / nf);

    let psi = eq.contributions(theta);
    let mut meat = Matrix::zeros(p, p);
    for i in 0..psi.rows() {
        let row = psi.row(i);
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            let ra = row[a];
            let m = meat.row_mut(a);
            for b in a..p {
                m[b] += ra * row[b];
            }
        }
    }
    meat.symmetrize_from_upper();
    meat.scale(1.0 / nf);

    let Some(lu) = Lu::new(&bread, 1e-13) else {
        return Err(VarianceError::Singular(block_ranks(&bread, &eq.blocks())));
    };
    let inv = lu.inverse();
    let mut variance = inv.matmul(&meat).matmul(&inv.transpose());
    let scale = variance.max_abs().max(f64::MIN_POSITIVE);
    let mut asym: f64 = 0.0;
    for a in 0..p {
        for b in a + 1..p {
            asym = asym.max(fabs(variance[(a, b)] - variance[(b, a)]));
        }
    }
    for a in 0..p {
        for b in a + 1..p {
            let m = 0.5 * (variance[(a, b)] + variance[(b, a)]);
            variance[(a, b)] = m;
            variance[(b, a)] = m;
        }
    }
    let diagnostics = SandwichDiagnostics {
        condition_estimate: inf_norm(&bread) * inf_norm(&inv),
        asymmetry: asym / scale,
    };
    Ok(SandwichOutput { bread, meat, variance, n, diagnostics })
}

fn block_ranks(bread: &Matrix, blocks: &[(String, Range<usize>)]) -> Vec<BlockRank> {
    blocks
        .iter()
        .map(|(name, r)| {
            let b = bread.block(r.start, r.end, r.start, r.end);
            let gram = b.transpose().matmul(&b);
            let size = r.len();
            BlockRank { name: name.clone(), size, rank: size - dependent_columns(&gram, 1e-12).len() }
        })
        .collect()
}

/// Outcome model entering the stack: its MSM, the `rho` grid, and the
/// `k_max` of the homogeneity test when one is requested.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutcomeModel {
    pub spec: ModelSpec,
    pub grid: Vec<GridCell>,
    pub teh_k_max: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelLayout {
    pub alpha: Range<usize>,
    pub rho: Range<usize>,
    /// `(beta0, beta)`.
    pub beta: Option<Range<usize>>,
}

/// Flat index map of the stacked parameter `(zeta, kappa, [alpha, rho, beta]...)`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThetaLayout {
    pub zeta: Range<usize>,
    pub kappa: Range<usize>,
    pub models: Vec<ModelLayout>,
    pub dim: usize,
}

/// One outcome model's view of the stacked estimate.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThetaHat {
    pub zeta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: Vec<f64>,
    pub grid: Vec<GridCell>,
    pub beta: Option<(f64, f64)>,
    pub k_max: Option<u32>,
    pub zeta_index: Range<usize>,
    pub kappa_index: Range<usize>,
    pub layout: ModelLayout,
}

impl ThetaHat {
    /// Flat index of the `rho` entry for `(j, k)`.
    pub fn rho_index(&self, j: u32, k: u32) -> Option<usize> {
        self.grid.iter().position(|g| g.j == j && g.k == k).map(|a| self.layout.rho.start + a)
    }
}

/// `AUC_j = sum_{k=1..k_max} VE_j(k)` for `j = 0..=max_trial`.
pub fn auc_by_trial(alpha: &[f64], spec: &ModelSpec, k_max: u32) -> Result<Vec<f64>, MsmError> {
    (0..=spec.max_trial)
        .map(|j| (1..=k_max).map(|k| log_rr(alpha, j, k, spec).map(|r| -expm1(r))).sum())
        .collect()
}

/// Least-squares `(intercept, slope)` of `values[j]` on `j`.
pub fn ls_slope(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let xbar = (n - 1.0) / 2.0;
    let ybar = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (j, v) in values.iter().enumerate() {
        let dx = j as f64 - xbar;
        sxy += dx * (v - ybar);
        sxx += dx * dx;
    }
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (ybar - b * xbar, b)
}

/// Stacked equations of the full estimator: pooled propensity score,
/// censoring score, weighted outcome scores with weights recomputed from
/// `(zeta, kappa)`, plug-in `rho` residuals and optional homogeneity-test
/// normal equations. Units are persons.
pub struct NteStack<'a> {
    panel: &'a Panel,
    models: &'a [OutcomeModel],
    layout: ThetaLayout,
    /// Fixed `(lower, upper)` caps applied to the weights.
    clamp: Option<(f64, f64)>,
    g_design: Matrix,
    pt_of_row: Vec<u32>,
    /// Censoring groups; rows map through `group_of_row`.
    h: Option<CensoringGroups>,
    cell_of_row: Vec<u32>,
    /// Per model: MSM design for every dense cell index.
    cell_design: Vec<Matrix>,
    cell_spec: ModelSpec,
    person_rows: Vec<Range<usize>>,
}

const NONE: u32 = u32::MAX;

struct Nuisance {
    e: Vec<f64>,
    d: Vec<f64>,
}

impl<'a> NteStack<'a> {
    pub fn new(
        panel: &'a Panel,
        spec_g: &'a PropensitySpec,
        spec_h: Option<&'a CensoringSpec>,
        models: &'a [OutcomeModel],
        clamp: Option<(f64, f64)>,
    ) -> Result<Self, VarianceError> {
        let Some(first) = models.first() else {
            return Err(VarianceError::Layout("no outcome model".into()));
        };
        if models.iter().any(|m| m.spec.max_trial != first.spec.max_trial || m.spec.tau != first.spec.tau) {
            return Err(VarianceError::Layout("outcome models disagree on the study window".into()));
        }
        let mut at = 0;
        let mut take = |w: usize| {
            let r = at..at + w;
            at += w;
            r
        };
        let zeta = take(spec_g.width());
        let kappa = take(spec_h.map_or(0, |s| s.width()));
        let mut model_layouts = Vec::new();
        for m in models {
            let alpha = take(m.spec.width());
            let rho = take(m.grid.len());
            let beta = m.teh_k_max.map(|_| take(2));
            model_layouts.push(ModelLayout { alpha, rho, beta });
        }
        let layout = ThetaLayout { zeta, kappa, models: model_layouts, dim: at };

        let rows = &panel.rows;
        let mut pt_of_row = vec![NONE; rows.len()];
        let mut cell_of_row = vec![NONE; rows.len()];
        let n_pt = rows.iter().filter(|r| r.k == 0).count();
        let mut g_design = Matrix::zeros(n_pt, spec_g.width());
        let h = spec_h.map(|s| censoring_groups(panel, s));
        let mut pt = 0usize;
        let cell_spec = first.spec.clone();
        for (i, r) in rows.iter().enumerate() {
            if r.k == 0 {
                spec_g.write_row(r.j, panel.x(r.person), g_design.row_mut(pt));
                pt += 1;
            }
            if pt == 0 {
                return Err(VarianceError::Layout("panel rows must start each person-trial at k = 0".into()));
            }
            pt_of_row[i] = (pt - 1) as u32;
            if r.at_risk && r.r {
                if !cell_spec.contains(r.j, r.k) {
                    return Err(MsmError::Domain { j: r.j, k: r.k }.into());
                }
                cell_of_row[i] = cell_spec.cell_index(r.j, r.k, r.z) as u32;
            }
        }
        let mut cell_design = Vec::new();
        for m in models {
            let mut d = Matrix::zeros(cell_spec.num_cells(), m.spec.width());
            for j in 0..=cell_spec.max_trial {
                for k in 1..=cell_spec.tau - j {
                    for z in [false, true] {
                        m.spec.write_design(j, k, z, d.row_mut(cell_spec.cell_index(j, k, z)))?;
                    }
                }
            }
            cell_design.push(d);
        }
        for m in models {
            if let Some(k_max) = m.teh_k_max {
                if m.spec.max_trial == 0 {
                    return Err(VarianceError::SingleTrial);
                }
                let available = m.spec.tau - m.spec.max_trial;
                if k_max == 0 || k_max > available {
                    return Err(VarianceError::KMax { k_max, available });
                }
            }
        }
        Ok(NteStack {
            panel,
            models,
            layout,
            clamp,
            g_design,
            pt_of_row,
            h,
            cell_of_row,
            cell_design,
            cell_spec,
            person_rows: panel.person_ranges(),
        })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    /// Flat `theta` from fitted nuisance and outcome coefficients, with
    /// `rho` and `beta` set to their plug-in roots.
    pub fn assemble(&self, zeta: &[f64], kappa: &[f64], alphas: &[&[f64]]) -> Result<Vec<f64>, VarianceError> {
        let l = &self.layout;
        if zeta.len() != l.zeta.len() || kappa.len() != l.kappa.len() || alphas.len() != self.models.len() {
            return Err(VarianceError::Layout("coefficient block sizes do not match the specs".into()));
        }
        let mut theta = vec![0.0; l.dim];
        theta[l.zeta.clone()].copy_from_slice(zeta);
        theta[l.kappa.clone()].copy_from_slice(kappa);
        for ((m, ml), alpha) in self.models.iter().zip(&l.models).zip(alphas) {
            if alpha.len() != ml.alpha.len() {
                return Err(VarianceError::Layout("alpha length does not match its model".into()));
            }
            theta[ml.alpha.clone()].copy_from_slice(alpha);
            let nu = self.nu(m, alpha)?;
            theta[ml.rho.clone()].copy_from_slice(&nu);
            if let (Some(b), Some(k_max)) = (&ml.beta, m.teh_k_max) {
                let (b0, b1) = ls_slope(&auc_by_trial(alpha, &m.spec, k_max)?);
                theta[b.start] = b0;
                theta[b.start + 1] = b1;
            }
        }
        Ok(theta)
    }

    /// Splits a flat `theta` into one [`ThetaHat`] per outcome model.
    pub fn theta_hats(&self, theta: &[f64]) -> Vec<ThetaHat> {
        let l = &self.layout;
        self.models
            .iter()
            .zip(&l.models)
            .map(|(m, ml)| ThetaHat {
                zeta: theta[l.zeta.clone()].to_vec(),
                kappa: theta[l.kappa.clone()].to_vec(),
                alpha: theta[ml.alpha.clone()].to_vec(),
                rho: theta[ml.rho.clone()].to_vec(),
                grid: m.grid.clone(),
                beta: ml.beta.as_ref().map(|b| (theta[b.start], theta[b.start + 1])),
                k_max: m.teh_k_max,
                zeta_index: l.zeta.clone(),
                kappa_index: l.kappa.clone(),
                layout: ml.clone(),
            })
            .collect()
    }

    fn nu(&self, m: &OutcomeModel, alpha: &[f64]) -> Result<Vec<f64>, MsmError> {
        m.grid.iter().map(|g| log_rr(alpha, g.j, g.k, &m.spec)).collect()
    }

    fn e_values(&self, zeta: &[f64]) -> Vec<f64> {
        (0..self.g_design.rows()).map(|p| expit(dot(self.g_design.row(p), zeta))).collect()
    }

    fn d_values(&self, kappa: &[f64]) -> Vec<f64> {
        self.h.as_ref().map_or_else(Vec::new, |h| {
            (0..h.design.rows()).map(|g| expit(dot(h.design.row(g), kappa))).collect()
        })
    }

    #[inline]
    fn group_of_row(&self, i: usize) -> u32 {
        self.h.as_ref().map_or(NONE, |h| h.group_of_row[i])
    }

    fn nuisance(&self, theta: &[f64]) -> Nuisance {
        Nuisance {
            e: self.e_values(&theta[self.layout.zeta.clone()]),
            d: self.d_values(&theta[self.layout.kappa.clone()]),
        }
    }

    /// Weight of every panel row.
    fn row_weights(&self, nu: &Nuisance) -> Vec<f64> {
        let mut out = vec![0.0; self.panel.rows.len()];
        let mut cum = 1.0;
        for (i, r) in self.panel.rows.iter().enumerate() {
            if r.k == 0 {
                cum = 1.0;
            }
            let g = self.group_of_row(i);
            if g != NONE {
                cum *= nu.d[g as usize];
            }
            let e = nu.e[self.pt_of_row[i] as usize];
            let treat = if r.z { 1.0 / e } else { 1.0 / (1.0 - e) };
            let w = treat / cum;
            out[i] = match self.clamp {
                Some((lo, hi)) => w.clamp(lo, hi),
                None => w,
            };
        }
        out
    }

    fn cell_sums(&self, w: &[f64]) -> CellSums {
        let n = self.cell_spec.num_cells();
        let mut sums = CellSums { weight: vec![0.0; n], weighted_events: vec![0.0; n] };
        for (i, r) in self.panel.rows.iter().enumerate() {
            let c = self.cell_of_row[i];
            if c != NONE {
                sums.weight[c as usize] += w[i];
                if r.y {
                    sums.weighted_events[c as usize] += w[i];
                }
            }
        }
        sums
    }

    fn psi_zeta_total(&self, e: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut p = 0;
        for r in self.panel.rows.iter().filter(|r| r.k == 0) {
            let resid = if r.z { 1.0 } else { 0.0 } - e[p];
            for (o, g) in out.iter_mut().zip(self.g_design.row(p)) {
                *o += resid * g;
            }
            p += 1;
        }
    }

    fn psi_kappa_total(&self, d: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let Some(h) = &self.h else { return };
        for g in 0..h.design.rows() {
            let resid = h.uncensored[g] - h.count[g] * d[g];
            for (o, x) in out.iter_mut().zip(h.design.row(g)) {
                *o += resid * x;
            }
        }
    }

    fn cell_hazards(&self, m: usize, alpha: &[f64]) -> Vec<f64> {
        let design = &self.cell_design[m];
        (0..design.rows()).map(|c| expit(dot(design.row(c), alpha))).collect()
    }

    fn psi_alpha_total(&self, m: usize, sums: &CellSums, alpha: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let design = &self.cell_design[m];
        for c in 0..design.rows() {
            let w = sums.weight[c];
            if w == 0.0 {
                continue;
            }
            let resid = sums.weighted_events[c] - w * expit(dot(design.row(c), alpha));
            for (o, f) in out.iter_mut().zip(design.row(c)) {
                *o += resid * f;
            }
        }
    }

    /// Per-person `rho` and `beta` residuals for model `m`.
    fn plug_in_residuals(&self, m: usize, theta: &[f64], out: &mut [f64]) {
        let model = &self.models[m];
        let ml = &self.layout.models[m];
        let alpha = &theta[ml.alpha.clone()];
        for (a, g) in model.grid.iter().enumerate() {
            let nu = log_rr(alpha, g.j, g.k, &model.spec).unwrap_or(f64::NAN);
            out[ml.rho.start + a] = theta[ml.rho.start + a] - nu;
        }
        if let (Some(b), Some(k_max)) = (&ml.beta, model.teh_k_max) {
            let auc = auc_by_trial(alpha, &model.spec, k_max).unwrap_or_else(|_| vec![f64::NAN; model.spec.max_trial as usize + 1]);
            let (b0, b1) = (theta[b.start], theta[b.start + 1]);
            let (mut s0, mut s1) = (0.0, 0.0);
            for (j, v) in auc.iter().enumerate() {
                let res = v - b0 - b1 * j as f64;
                s0 += res;
                s1 += j as f64 * res;
            }
            out[b.start] = s0;
            out[b.start + 1] = s1;
        }
    }

    fn alpha_block_totals(&self, theta: &[f64], sums: &CellSums, out: &mut [f64]) {
        for (m, ml) in self.layout.models.iter().enumerate() {
            let alpha = &theta[ml.alpha.clone()];
            self.psi_alpha_total(m, sums, alpha, &mut out[ml.alpha.clone()]);
        }
    }
}

impl StackedEquations for NteStack<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn units(&self) -> usize {
        self.panel.num_persons()
    }

    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let l = &self.layout;
        let mut out = vec![("zeta".into(), l.zeta.clone()), ("kappa".into(), l.kappa.clone())];
        for (m, ml) in l.models.iter().enumerate() {
            out.push((alloc::format!("alpha[{m}]"), ml.alpha.clone()));
            out.push((alloc::format!("rho[{m}]"), ml.rho.clone()));
            if let Some(b) = &ml.beta {
                out.push((alloc::format!("beta[{m}]"), b.clone()));
            }
        }
        out.retain(|(_, r)| !r.is_empty());
        out
    }

    fn total(&self, theta: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut out = vec![0.0; l.dim];
        let nu = self.nuisance(theta);
        self.psi_zeta_total(&nu.e, &mut out[l.zeta.clone()]);
        self.psi_kappa_total(&nu.d, &mut out[l.kappa.clone()]);
        let sums = self.cell_sums(&self.row_weights(&nu));
        self.alpha_block_totals(theta, &sums, &mut out);
        let mut per_person = vec![0.0; l.dim];
        for m in 0..self.models.len() {
            self.plug_in_residuals(m, theta, &mut per_person);
        }
        let n = self.units() as f64;
        for ml in &l.models {
            for a in ml.rho.clone().chain(ml.beta.clone().unwrap_or(0..0)) {
                out[a] = n * per_person[a];
            }
        }
        out
    }

    /// Analytic in the nuisance coordinates: the `zeta` and `kappa` blocks
    /// are minus the logistic information, and their effect on each `alpha`
    /// score goes through `dW/d(zeta, kappa)`, which is zero where a clamp
    /// is active. `alpha` columns use central differences on the cell
    /// sums; `rho`/`beta` columns are exact.
    fn jacobian(&self, theta: &[f64]) -> Matrix {
        let l = &self.layout;
        let p = l.dim;
        let n = self.units() as f64;
        let mut jac = Matrix::zeros(p, p);
        let base = self.nuisance(theta);
        let (mut up, mut dn) = (vec![0.0; p], vec![0.0; p]);
        let mut t = theta.to_vec();

        for pt in 0..self.g_design.rows() {
            let g = self.g_design.row(pt);
            let v = base.e[pt] * (1.0 - base.e[pt]);
            for (a, ga) in g.iter().enumerate() {
                for (b, gb) in g.iter().enumerate() {
                    jac[(l.zeta.start + a, l.zeta.start + b)] -= v * ga * gb;
                }
            }
        }
        if let Some(h) = &self.h {
            for grp in 0..h.design.rows() {
                let x = h.design.row(grp);
                let v = h.count[grp] * base.d[grp] * (1.0 - base.d[grp]);
                for (a, xa) in x.iter().enumerate() {
                    for (b, xb) in x.iter().enumerate() {
                        jac[(l.kappa.start + a, l.kappa.start + b)] -= v * xa * xb;
                    }
                }
            }
        }

        // d(cell sums)/d(zeta, kappa), one row of length qz + qk per cell.
        let (qz, qk) = (l.zeta.len(), l.kappa.len());
        let q = qz + qk;
        let cells = self.cell_spec.num_cells();
        let mut d_w = vec![0.0; cells * q];
        let mut d_wy = vec![0.0; cells * q];
        let mut score = vec![0.0; q];
        let mut cum = 1.0;
        for (i, r) in self.panel.rows.iter().enumerate() {
            let pt = self.pt_of_row[i] as usize;
            let e = base.e[pt];
            if r.k == 0 {
                cum = 1.0;
                let c = if r.z { -(1.0 - e) } else { e };
                for (s, g) in score[..qz].iter_mut().zip(self.g_design.row(pt)) {
                    *s = c * g;
                }
                score[qz..].fill(0.0);
            }
            let grp = self.group_of_row(i);
            if let (true, Some(h)) = (grp != NONE, &self.h) {
                let d = base.d[grp as usize];
                cum *= d;
                for (s, x) in score[qz..].iter_mut().zip(h.design.row(grp as usize)) {
                    *s -= (1.0 - d) * x;
                }
            }
            let c = self.cell_of_row[i];
            if c == NONE {
                continue;
            }
            let w = if r.z { 1.0 / e } else { 1.0 / (1.0 - e) } / cum;
            if let Some((lo, hi)) = self.clamp {
                if w < lo || w > hi {
                    continue;
                }
            }
            let at = c as usize * q;
            for (o, s) in d_w[at..at + q].iter_mut().zip(&score) {
                *o += w * s;
            }
            if r.y {
                for (o, s) in d_wy[at..at + q].iter_mut().zip(&score) {
                    *o += w * s;
                }
            }
        }
        for (m, ml) in l.models.iter().enumerate() {
            let design = &self.cell_design[m];
            let lambda = self.cell_hazards(m, &theta[ml.alpha.clone()]);
            for c in 0..cells {
                let at = c * q;
                for (a, f) in design.row(c).iter().enumerate() {
                    if *f == 0.0 {
                        continue;
                    }
                    for b in 0..q {
                        let v = f * (d_wy[at + b] - lambda[c] * d_w[at + b]);
                        let col = if b < qz { l.zeta.start + b } else { l.kappa.start + b - qz };
                        jac[(ml.alpha.start + a, col)] += v;
                    }
                }
            }
        }

        let sums = self.cell_sums(&self.row_weights(&base));
        for (m, ml) in l.models.iter().enumerate() {
            for d in ml.alpha.clone() {
                let h = fd_step(theta[d]);
                for (sign, out) in [(1.0, &mut up), (-1.0, &mut dn)] {
                    t[d] = theta[d] + sign * h;
                    self.psi_alpha_total(m, &sums, &t[ml.alpha.clone()], &mut out[ml.alpha.clone()]);
                    self.plug_in_residuals(m, &t, out);
                }
                t[d] = theta[d];
                for r in ml.alpha.clone() {
                    jac[(r, d)] = (up[r] - dn[r]) / (2.0 * h);
                }
                for r in ml.rho.clone().chain(ml.beta.clone().unwrap_or(0..0)) {
                    jac[(r, d)] = n * (up[r] - dn[r]) / (2.0 * h);
                }
            }
            for a in ml.rho.clone() {
                jac[(a, a)] = n;
            }
            if let Some(b) = &ml.beta {
                let jt = self.models[m].spec.max_trial as usize + 1;
                let s1: f64 = (0..jt).map(|j| j as f64).sum();
                let s2: f64 = (0..jt).map(|j| (j * j) as f64).sum();
                jac[(b.start, b.start)] = -n * jt as f64;
                jac[(b.start, b.start + 1)] = -n * s1;
                jac[(b.start + 1, b.start)] = -n * s1;
                jac[(b.start + 1, b.start + 1)] = -n * s2;
            }
        }
        jac
    }

    fn contributions(&self, theta: &[f64]) -> Matrix {
        let l = &self.layout;
        let nu = self.nuisance(theta);
        let w = self.row_weights(&nu);
        let hazards: Vec<Vec<f64>> = l
            .models
            .iter()
            .enumerate()
            .map(|(m, ml)| self.cell_hazards(m, &theta[ml.alpha.clone()]))
            .collect();
        let mut shared = vec![0.0; l.dim];
        for m in 0..self.models.len() {
            self.plug_in_residuals(m, theta, &mut shared);
        }
        let mut out = Matrix::zeros(self.units(), l.dim);
        for (person, range) in self.person_rows.iter().enumerate() {
            let psi = out.row_mut(person);
            for ml in &l.models {
                for a in ml.rho.clone().chain(ml.beta.clone().unwrap_or(0..0)) {
                    psi[a] = shared[a];
                }
            }
            for i in range.clone() {
                let r = &self.panel.rows[i];
                if r.k == 0 {
                    let p = self.pt_of_row[i] as usize;
                    let resid = if r.z { 1.0 } else { 0.0 } - nu.e[p];
                    for (o, g) in psi[l.zeta.clone()].iter_mut().zip(self.g_design.row(p)) {
                        *o += resid * g;
                    }
                }
                let g = self.group_of_row(i);
                if let (true, Some(h)) = (g != NONE, &self.h) {
                    let resid = if r.r { 1.0 } else { 0.0 } - nu.d[g as usize];
                    for (o, x) in psi[l.kappa.clone()].iter_mut().zip(h.design.row(g as usize)) {
                        *o += resid * x;
                    }
                }
                let c = self.cell_of_row[i];
                if c != NONE {
                    let y = if r.y { 1.0 } else { 0.0 };
                    for (m, ml) in l.models.iter().enumerate() {
                        let resid = w[i] * (y - hazards[m][c as usize]);
                        let f = self.cell_design[m].row(c as usize);
                        for (o, x) in psi[ml.alpha.clone()].iter_mut().zip(f) {
                            *o += resid * x;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Fills standard errors and `(1 - gamma)` Wald intervals on the VE scale:
/// `1 - exp(rho -/+ z_{1 - gamma/2} sqrt(V[a, a] / n))`.
pub fn ve_ci(
    surface: &VESurface,
    sandwich: &SandwichOutput,
    theta: &ThetaHat,
    gamma: f64,
) -> Result<VESurface, VarianceError> {
    let z = normal_quantile(1.0 - gamma / 2.0);
    let mut out = surface.clone();
    for cell in out.cells.iter_mut() {
        let a = theta.rho_index(cell.j, cell.k).ok_or(VarianceError::MissingCell { j: cell.j, k: cell.k })?;
        let se = sqrt(sandwich.var(a).max(0.0));
        cell.se_log_rr = Some(se);
        cell.ci = Some((-expm1(cell.log_rr + z * se), -expm1(cell.log_rr - z * se)));
    }
    out.gamma = Some(gamma);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TehResult {
    pub auc: Vec<f64>,
    pub beta0: f64,
    pub beta: f64,
    pub se_beta: f64,
    pub u_beta: f64,
    /// `Phi(U)`: small when VE decreases across trials.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub k_max: u32,
}

/// Generalized Wald test of a linear trend in `AUC_j` across trials.
pub fn teh_test(theta: &ThetaHat, spec: &ModelSpec, sandwich: &SandwichOutput) -> Result<TehResult, VarianceError> {
    let (Some(b), Some(k_max)) = (&theta.layout.beta, theta.k_max) else {
        return Err(VarianceError::Layout("the stack was built without the homogeneity test".into()));
    };
    if spec.max_trial == 0 {
        return Err(VarianceError::SingleTrial);
    }
    let auc = auc_by_trial(&theta.alpha, spec, k_max)?;
    let (beta0, beta) = ls_slope(&auc);
    let se_beta = sqrt(sandwich.var(b.start + 1).max(0.0));
    Ok(teh_from_estimate(auc, beta0, beta, se_beta, k_max))
}

/// Assembles a [`TehResult`] from a slope and its standard error.
pub fn teh_from_estimate(auc: Vec<f64>, beta0: f64, beta: f64, se_beta: f64, k_max: u32) -> TehResult {
    let u_beta = if se_beta > 0.0 {
        beta / se_beta
    } else if beta == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(beta)
    };
    TehResult {
        auc,
        beta0,
        beta,
        se_beta,
        u_beta,
        p_one_sided: normal_cdf(u_beta),
        p_two_sided: (2.0 * normal_cdf(-fabs(u_beta))).min(1.0),
        k_max,
    }
}

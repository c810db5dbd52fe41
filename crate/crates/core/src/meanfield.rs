//! Mean-field inference for the fully connected pairwise CRF.
//!
//! One update replaces every row of Q with
//!
//! ```text
//! Q_i(l) ∝ exp{ -ψ_u(i, l) - Σ_{j≠i} Σ_{l'} μ(l, l') k(f_i, f_j) Q_j(l') }
//! ```
//!
//! The double sum can be taken in either order. [`SummationOrder::KernelFirst`]
//! filters Q with the kernel and then mixes labels through μ;
//! [`SummationOrder::CompatibilityFirst`] mixes labels first (the "value"
//! of an attention layer) and then aggregates over neighbours with the
//! kernel as attention weight. Both give the same update up to rounding.
//!
//! The parallel schedule updates all rows from the previous Q. The
//! sequential schedule updates rows in ascending order against the freshest
//! Q, which is coordinate descent on KL(Q || P) when μ is symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{
    distribution_from_potentials, softmax_neg_into, CrfModel, Labeling, MarginalField,
    PotentialField,
};
use crate::oracle::EnergyTable;
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummationOrder {
    #[default]
    KernelFirst,
    CompatibilityFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanFieldConfig {
    pub max_iter: usize,
    /// Convergence threshold on the L∞ change of Q between iterations.
    pub tol: f64,
    pub schedule: Schedule,
    pub order: SummationOrder,
    /// Stop as soon as the change drops below `tol`. When false, exactly
    /// `max_iter` updates run.
    pub early_stop: bool,
    /// Record KL(Q || P) after every iteration when enumeration is feasible.
    pub track_kl: bool,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            schedule: Schedule::Parallel,
            order: SummationOrder::KernelFirst,
            early_stop: true,
            track_kl: false,
        }
    }
}

impl MeanFieldConfig {
    /// Exactly `m` compatibility-first parallel updates, no early exit.
    pub fn fixed(m: usize) -> Self {
        Self {
            max_iter: m,
            order: SummationOrder::CompatibilityFirst,
            early_stop: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(CrfError::invalid("max_iter must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(CrfError::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldDiagnostics {
    pub iterations_run: usize,
    pub converged: bool,
    pub linf_trace: Vec<f64>,
    pub kl_trace: Option<Vec<f64>>,
}

/// Q⁰ = softmax(-ψ_u).
pub fn init_marginals(model: &CrfModel) -> MarginalField {
    distribution_from_potentials(&PotentialField::from(model.unary()))
}

/// Pairwise messages B (N×K): kernel aggregation first, then μ.
fn messages_kernel_first(q: &Table, model: &CrfModel) -> Table {
    let (n, k) = q.shape();
    let alpha = model.affinity();
    let mu = model.compatibility();
    let mut b = Table::zeros(n, k);
    let mut a = vec![0.0; k];
    for i in 0..n {
        a.iter_mut().for_each(|v| *v = 0.0);
        for j in (0..n).filter(|&j| j != i) {
            let w = alpha.get(i, j);
            for (av, qv) in a.iter_mut().zip(q.row(j)) {
                *av += w * qv;
            }
        }
        for (l, out) in b.row_mut(i).iter_mut().enumerate() {
            *out = a.iter().enumerate().map(|(lp, av)| mu.get(l, lp) * av).sum();
        }
    }
    b
}

/// V = Q μᵀ, i.e. V_{j,l} = Σ_{l'} μ(l, l') Q_j(l').
pub(crate) fn compatibility_transform(q: &Table, mu: &Table) -> Table {
    let (n, k) = q.shape();
    Table::from_fn(n, k, |j, l| {
        q.row(j)
            .iter()
            .enumerate()
            .map(|(lp, qv)| mu.get(l, lp) * qv)
            .sum()
    })
}

/// R = α V with the diagonal of α skipped.
pub(crate) fn attend(alpha: &Table, v: &Table) -> Table {
    let (n, k) = v.shape();
    let mut r = Table::zeros(n, k);
    for i in 0..n {
        let out = r.row_mut(i);
        for j in (0..n).filter(|&j| j != i) {
            let w = alpha.get(i, j);
            for (o, vv) in out.iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
    }
    r
}

fn messages_compat_first(q: &Table, model: &CrfModel) -> Table {
    let v = compatibility_transform(q, model.compatibility().table());
    attend(model.affinity(), &v)
}

fn normalize_update(unary: &Table, b: &Table) -> MarginalField {
    let (n, k) = unary.shape();
    let mut out = Table::zeros(n, k);
    let mut psi = vec![0.0; k];
    for i in 0..n {
        for ((p, u), bv) in psi.iter_mut().zip(unary.row(i)).zip(b.row(i)) {
            *p = u + bv;
        }
        softmax_neg_into(&psi, out.row_mut(i));
    }
    MarginalField::from_table_unchecked(out)
}

/// Parallel update, kernel aggregation first.
pub fn mf_step_kernel_first(q: &MarginalField, model: &CrfModel) -> Result<MarginalField> {
    model.check_field(q.table())?;
    let b = messages_kernel_first(q.table(), model);
    Ok(normalize_update(model.unary().table(), &b))
}

/// Parallel update, label compatibility first.
pub fn mf_step_compat_first(q: &MarginalField, model: &CrfModel) -> Result<MarginalField> {
    model.check_field(q.table())?;
    let b = messages_compat_first(q.table(), model);
    Ok(normalize_update(model.unary().table(), &b))
}

pub fn mf_step(q: &MarginalField, model: &CrfModel, order: SummationOrder) -> Result<MarginalField> {
    match order {
        SummationOrder::KernelFirst => mf_step_kernel_first(q, model),
        SummationOrder::CompatibilityFirst => mf_step_compat_first(q, model),
    }
}

/// Replaces row `i` of `q` in place using the current values of all other rows.
pub fn update_node(
    q: &mut MarginalField,
    model: &CrfModel,
    i: usize,
    order: SummationOrder,
) -> Result<()> {
    model.check_field(q.table())?;
    if i >= model.nodes() {
        return Err(CrfError::shape(format!(
            "node {} out of range 1..={}",
            i + 1,
            model.nodes()
        )));
    }
    let k = model.labels();
    let alpha = model.affinity();
    let mu = model.compatibility();
    let table = q.table();
    let mut b = vec![0.0; k];
    match order {
        SummationOrder::KernelFirst => {
            let mut a = vec![0.0; k];
            for j in (0..model.nodes()).filter(|&j| j != i) {
                let w = alpha.get(i, j);
                for (av, qv) in a.iter_mut().zip(table.row(j)) {
                    *av += w * qv;
                }
            }
            for (l, bv) in b.iter_mut().enumerate() {
                *bv = a.iter().enumerate().map(|(lp, av)| mu.get(l, lp) * av).sum();
            }
        }
        SummationOrder::CompatibilityFirst => {
            for j in (0..model.nodes()).filter(|&j| j != i) {
                let w = alpha.get(i, j);
                let qj = table.row(j);
                for (l, bv) in b.iter_mut().enumerate() {
                    let v: f64 = qj.iter().enumerate().map(|(lp, qv)| mu.get(l, lp) * qv).sum();
                    *bv += w * v;
                }
            }
        }
    }
    let mut psi = vec![0.0; k];
    for ((p, u), bv) in psi.iter_mut().zip(model.unary().table().row(i)).zip(&b) {
        *p = u + bv;
    }
    softmax_neg_into(&psi, q.table_mut().row_mut(i));
    Ok(())
}

/// One sequential sweep over nodes in ascending order.
pub fn mf_step_sequential(
    q: &MarginalField,
    model: &CrfModel,
    order: SummationOrder,
) -> Result<MarginalField> {
    let mut out = q.clone();
    for i in 0..model.nodes() {
        update_node(&mut out, model, i, order)?;
    }
    Ok(out)
}

fn step(q: &MarginalField, model: &CrfModel, cfg: &MeanFieldConfig) -> Result<MarginalField> {
    match cfg.schedule {
        Schedule::Parallel => mf_step(q, model, cfg.order),
        Schedule::Sequential => mf_step_sequential(q, model, cfg.order),
    }
}

/// Iterates from [`init_marginals`] until the L∞ change falls below `tol`
/// or `max_iter` updates have run.
pub fn run_mean_field(
    model: &CrfModel,
    cfg: &MeanFieldConfig,
) -> Result<(MarginalField, MeanFieldDiagnostics)> {
    cfg.validate()?;
    let energies = if cfg.track_kl {
        EnergyTable::new(model).ok()
    } else {
        None
    };
    let mut q = init_marginals(model);
    let mut diag = MeanFieldDiagnostics {
        iterations_run: 0,
        converged: false,
        linf_trace: Vec::new(),
        kl_trace: energies.as_ref().map(|_| Vec::new()),
    };
    for _ in 0..cfg.max_iter {
        let next = step(&q, model, cfg)?;
        let change = next.max_abs_diff(&q)?;
        q = next;
        diag.iterations_run += 1;
        diag.linf_trace.push(change);
        if let (Some(table), Some(trace)) = (&energies, diag.kl_trace.as_mut()) {
            trace.push(table.kl(&q)?);
        }
        diag.converged = change < cfg.tol;
        if cfg.early_stop && diag.converged {
            break;
        }
    }
    Ok((q, diag))
}

/// Per node, the label with the largest marginal; ties go to the smaller label.
pub fn decode_argmax(q: &MarginalField) -> Labeling {
    Labeling::from_zero_based(
        q.table()
            .iter_rows()
            .map(|row| {
                let mut best = 0;
                for (l, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect(),
    )
}

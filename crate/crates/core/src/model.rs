//! Model data types shared by every inference route, and the Gibbs energy.
//!
//! Labels are 0-based in memory and 1-based wherever they cross a file
//! boundary (see [`Labeling`]'s serde form).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::kernels::{kernel_matrix, validate_spec, KernelSpec};
use crate::table::Table;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Row sums of a [`MarginalField`] must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct LabelSpace {
    k: usize,
}

impl LabelSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(CrfError::invalid(format!("label count must be >= 2, got {k}")));
        }
        Ok(Self { k })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<usize> for LabelSpace {
    type Error = CrfError;
    fn try_from(k: usize) -> Result<Self> {
        LabelSpace::new(k)
    }
}

impl From<LabelSpace> for usize {
    fn from(l: LabelSpace) -> usize {
        l.k
    }
}

/// The feature f_i = (p_i, X_i) of one node.
#[derive(Debug, Clone, Copy)]
pub struct Feature<'a> {
    pub position: &'a [f64],
    pub observation: &'a [f64],
}

/// Node positions p (N×d_p) and observations X (N×d_x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SequenceRepr", into = "SequenceRepr")]
pub struct ObservedSequence {
    positions: Table,
    observations: Table,
}

#[derive(Serialize, Deserialize)]
struct SequenceRepr {
    positions: Table,
    observations: Table,
}

impl TryFrom<SequenceRepr> for ObservedSequence {
    type Error = CrfError;
    fn try_from(r: SequenceRepr) -> Result<Self> {
        ObservedSequence::new(r.positions, r.observations)
    }
}

impl From<ObservedSequence> for SequenceRepr {
    fn from(s: ObservedSequence) -> Self {
        SequenceRepr {
            positions: s.positions,
            observations: s.observations,
        }
    }
}

impl ObservedSequence {
    pub fn new(positions: Table, observations: Table) -> Result<Self> {
        if positions.rows() == 0 {
            return Err(CrfError::invalid("sequence needs at least one node"));
        }
        if positions.rows() != observations.rows() {
            return Err(CrfError::shape(format!(
                "{} positions but {} observations",
                positions.rows(),
                observations.rows()
            )));
        }
        if !positions.all_finite() || !observations.all_finite() {
            return Err(CrfError::invalid("sequence features must be finite"));
        }
        Ok(Self {
            positions,
            observations,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position_dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn observation_dim(&self) -> usize {
        self.observations.cols()
    }

    pub fn positions(&self) -> &Table {
        &self.positions
    }

    pub fn observations(&self) -> &Table {
        &self.observations
    }

    #[inline]
    pub fn feature(&self, i: usize) -> Feature<'_> {
        Feature {
            position: self.positions.row(i),
            observation: self.observations.row(i),
        }
    }
}

/// Per-node label costs ψ_u (N×K, nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Table", into = "Table")]
pub struct UnaryPotentials(Table);

impl UnaryPotentials {
    pub fn new(table: Table) -> Result<Self> {
        if !table.all_finite() {
            return Err(CrfError::invalid("unary potentials must be finite"));
        }
        Ok(Self(table))
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Self(Table::zeros(n, k))
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    pub fn nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn labels(&self) -> usize {
        self.0.cols()
    }
}

impl TryFrom<Table> for UnaryPotentials {
    type Error = CrfError;
    fn try_from(t: Table) -> Result<Self> {
        UnaryPotentials::new(t)
    }
}

impl From<UnaryPotentials> for Table {
    fn from(u: UnaryPotentials) -> Table {
        u.0
    }
}

/// Label compatibility μ(l, l').
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompatibilityRepr", into = "CompatibilityRepr")]
pub struct CompatibilityMatrix {
    mu: Table,
    symmetric: bool,
}

#[derive(Serialize, Deserialize)]
struct CompatibilityRepr {
    mu: Table,
    #[serde(default)]
    symmetric: bool,
}

impl TryFrom<CompatibilityRepr> for CompatibilityMatrix {
    type Error = CrfError;
    fn try_from(r: CompatibilityRepr) -> Result<Self> {
        CompatibilityMatrix::new(r.mu, r.symmetric)
    }
}

impl From<CompatibilityMatrix> for CompatibilityRepr {
    fn from(c: CompatibilityMatrix) -> Self {
        CompatibilityRepr {
            mu: c.mu,
            symmetric: c.symmetric,
        }
    }
}

impl CompatibilityMatrix {
    /// With `symmetric` set, `mu` must equal its transpose exactly.
    pub fn new(mu: Table, symmetric: bool) -> Result<Self> {
        if mu.rows() != mu.cols() {
            return Err(CrfError::shape(format!(
                "compatibility matrix must be square, got {:?}",
                mu.shape()
            )));
        }
        if !mu.all_finite() {
            return Err(CrfError::invalid("compatibility entries must be finite"));
        }
        if symmetric && mu != mu.transpose() {
            return Err(CrfError::invalid(
                "compatibility matrix flagged symmetric but is not",
            ));
        }
        Ok(Self { mu, symmetric })
    }

    /// μ(l, l') = 1 if l ≠ l' else 0.
    pub fn potts(k: usize) -> Self {
        Self {
            mu: Table::from_fn(k, k, |a, b| if a == b { 0.0 } else { 1.0 }),
            symmetric: true,
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            mu: Table::zeros(k, k),
            symmetric: true,
        }
    }

    /// Projects onto the symmetric matrices, (μ + μᵀ)/2.
    pub fn symmetrized(&self) -> Self {
        let k = self.labels();
        Self {
            mu: Table::from_fn(k, k, |a, b| 0.5 * (self.mu.get(a, b) + self.mu.get(b, a))),
            symmetric: true,
        }
    }

    #[inline]
    pub fn get(&self, l: usize, lp: usize) -> f64 {
        self.mu.get(l, lp)
    }

    pub fn table(&self) -> &Table {
        &self.mu
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn labels(&self) -> usize {
        self.mu.rows()
    }
}

/// A complete fully connected pairwise CRF instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CrfModelRepr", into = "CrfModelRepr")]
pub struct CrfModel {
    label_space: LabelSpace,
    sequence: ObservedSequence,
    unary: UnaryPotentials,
    compatibility: CompatibilityMatrix,
    kernel: KernelSpec,
    affinity: OnceLock<Table>,
}

impl PartialEq for CrfModel {
    fn eq(&self, other: &Self) -> bool {
        self.label_space == other.label_space
            && self.sequence == other.sequence
            && self.unary == other.unary
            && self.compatibility == other.compatibility
            && self.kernel == other.kernel
    }
}

#[derive(Serialize, Deserialize)]
struct CrfModelRepr {
    labels: LabelSpace,
    sequence: ObservedSequence,
    unary: UnaryPotentials,
    compatibility: CompatibilityMatrix,
    kernel: KernelSpec,
}

impl TryFrom<CrfModelRepr> for CrfModel {
    type Error = CrfError;
    fn try_from(r: CrfModelRepr) -> Result<Self> {
        CrfModel::new(r.labels, r.sequence, r.unary, r.compatibility, r.kernel)
    }
}

impl From<CrfModel> for CrfModelRepr {
    fn from(m: CrfModel) -> Self {
        CrfModelRepr {
            labels: m.label_space,
            sequence: m.sequence,
            unary: m.unary,
            compatibility: m.compatibility,
            kernel: m.kernel,
        }
    }
}

impl CrfModel {
    pub fn new(
        label_space: LabelSpace,
        sequence: ObservedSequence,
        unary: UnaryPotentials,
        compatibility: CompatibilityMatrix,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let n = sequence.len();
        let k = label_space.len();
        if unary.table().shape() != (n, k) {
            return Err(CrfError::shape(format!(
                "unary potentials are {:?}, expected ({n}, {k})",
                unary.table().shape()
            )));
        }
        if compatibility.labels() != k {
            return Err(CrfError::shape(format!(
                "compatibility matrix is {0}x{0}, expected {k}x{k}",
                compatibility.labels()
            )));
        }
        let report = validate_spec(&kernel, &sequence);
        if let Some(first) = report.first() {
            return Err(CrfError::invalid(format!("kernel spec: {first}")));
        }
        Ok(Self {
            label_space,
            sequence,
            unary,
            compatibility,
            kernel,
            affinity: OnceLock::new(),
        })
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn nodes(&self) -> usize {
        self.sequence.len()
    }

    pub fn labels(&self) -> usize {
        self.label_space.len()
    }

    pub fn sequence(&self) -> &ObservedSequence {
        &self.sequence
    }

    pub fn unary(&self) -> &UnaryPotentials {
        &self.unary
    }

    pub fn compatibility(&self) -> &CompatibilityMatrix {
        &self.compatibility
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// The N×N kernel matrix, computed once and cached.
    pub fn affinity(&self) -> &Table {
        self.affinity.get_or_init(|| {
            kernel_matrix(&self.sequence, &self.kernel)
                .expect("kernel validated at construction")
        })
    }

    pub fn with_kernel(&self, kernel: KernelSpec) -> Result<Self> {
        CrfModel::new(
            self.label_space,
            self.sequence.clone(),
            self.unary.clone(),
            self.compatibility.clone(),
            kernel,
        )
    }

    pub fn with_unary(&self, unary: UnaryPotentials) -> Result<Self> {
        CrfModel::new(
            self.label_space,
            self.sequence.clone(),
            unary,
            self.compatibility.clone(),
            self.kernel.clone(),
        )
    }

    pub fn with_compatibility(&self, compatibility: CompatibilityMatrix) -> Result<Self> {
        CrfModel::new(
            self.label_space,
            self.sequence.clone(),
            self.unary.clone(),
            compatibility,
            self.kernel.clone(),
        )
    }

    pub(crate) fn check_labeling(&self, y: &Labeling) -> Result<()> {
        if y.len() != self.nodes() {
            return Err(CrfError::shape(format!(
                "labeling has {} entries, model has {} nodes",
                y.len(),
                self.nodes()
            )));
        }
        if let Some(&bad) = y.as_slice().iter().find(|&&l| l >= self.labels()) {
            return Err(CrfError::invalid(format!(
                "label {} out of range 1..={}",
                bad + 1,
                self.labels()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_field(&self, t: &Table) -> Result<()> {
        if t.shape() != (self.nodes(), self.labels()) {
            return Err(CrfError::shape(format!(
                "field is {:?}, model is ({}, {})",
                t.shape(),
                self.nodes(),
                self.labels()
            )));
        }
        Ok(())
    }

    /// Energy of `y` given a precomputed kernel matrix; no validation.
    pub(crate) fn energy_unchecked(&self, y: &[usize]) -> f64 {
        let unary = self.unary.table();
        let alpha = self.affinity();
        let mut e = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            e += unary.get(i, yi);
        }
        for i in 0..y.len() {
            for j in (i + 1)..y.len() {
                e += self.compatibility.get(y[i], y[j]) * alpha.get(i, j);
            }
        }
        e
    }
}

/// A label per node, stored 0-based; serialized 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Labeling(Vec<usize>);

impl Labeling {
    pub fn from_zero_based(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn from_one_based(labels: &[usize]) -> Result<Self> {
        labels
            .iter()
            .map(|&l| {
                l.checked_sub(1)
                    .ok_or_else(|| CrfError::invalid("labels are 1-based; got 0"))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|l| l + 1).collect()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for Labeling {
    type Error = CrfError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Labeling::from_one_based(&v)
    }
}

impl From<Labeling> for Vec<usize> {
    fn from(l: Labeling) -> Vec<usize> {
        l.to_one_based()
    }
}

/// Row-stochastic N×K table of per-node label distributions Q_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Table", into = "Table")]
pub struct MarginalField(Table);

impl MarginalField {
    pub fn new(table: Table) -> Result<Self> {
        for (i, row) in table.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(CrfError::invalid(format!(
                    "row {} has entries outside [0, 1]",
                    i + 1
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(CrfError::invalid(format!(
                    "row {} sums to {s}, not 1",
                    i + 1
                )));
            }
        }
        Ok(Self(table))
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self(Table::filled(n, k, 1.0 / k as f64))
    }

    pub(crate) fn from_table_unchecked(table: Table) -> Self {
        Self(table)
    }

    pub(crate) fn table_mut(&mut self) -> &mut Table {
        &mut self.0
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn labels(&self) -> usize {
        self.0.cols()
    }

    pub fn max_abs_diff(&self, other: &MarginalField) -> Result<f64> {
        self.0.max_abs_diff(&other.0)
    }
}

impl TryFrom<Table> for MarginalField {
    type Error = CrfError;
    fn try_from(t: Table) -> Result<Self> {
        MarginalField::new(t)
    }
}

impl From<MarginalField> for Table {
    fn from(m: MarginalField) -> Table {
        m.0
    }
}

/// Accumulated potentials ψ (N×K, nats): the residual state of the
/// graph-attention forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Table", into = "Table")]
pub struct PotentialField(Table);

impl PotentialField {
    pub fn new(table: Table) -> Result<Self> {
        if !table.all_finite() {
            return Err(CrfError::invalid("potentials must be finite"));
        }
        Ok(Self(table))
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    pub fn into_table(self) -> Table {
        self.0
    }

    pub fn nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn labels(&self) -> usize {
        self.0.cols()
    }
}

impl From<&UnaryPotentials> for PotentialField {
    fn from(u: &UnaryPotentials) -> Self {
        PotentialField(u.table().clone())
    }
}

impl TryFrom<Table> for PotentialField {
    type Error = CrfError;
    fn try_from(t: Table) -> Result<Self> {
        PotentialField::new(t)
    }
}

impl From<PotentialField> for Table {
    fn from(p: PotentialField) -> Table {
        p.0
    }
}

/// E(y) = Σ_i ψ_u(y_i) + Σ_{i<j} μ(y_i, y_j) k(f_i, f_j).
///
/// Pairs are visited in ascending lexicographic (i, j) order.
pub fn gibbs_energy(y: &Labeling, model: &CrfModel) -> Result<f64> {
    model.check_labeling(y)?;
    Ok(model.energy_unchecked(y.as_slice()))
}

/// ψ_u = -log(max(p, ε)) with ε = [`PROB_CLAMP`].
pub fn unary_from_classifier(probs: &MarginalField) -> UnaryPotentials {
    UnaryPotentials(probs.table().map(|p| -p.max(PROB_CLAMP).ln()))
}

/// Row-wise softmax of -ψ, with max-subtraction.
pub fn distribution_from_potentials(psi: &PotentialField) -> MarginalField {
    let t = psi.table();
    let mut out = Table::zeros(t.rows(), t.cols());
    for i in 0..t.rows() {
        softmax_neg_into(t.row(i), out.row_mut(i));
    }
    MarginalField(out)
}

/// out = softmax(-row), stable.
#[inline]
pub(crate) fn softmax_neg_into(row: &[f64], out: &mut [f64]) {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (min - v).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

//! End-to-end training of CRF-GAT models by cross-entropy.
//!
//! Gradients are accumulated by hand, in reverse, through the unrolled
//! forward pass (classifier → softmax → values → attention → residual add).
//! [`grad_fd`] computes the same quantities by central differences and is
//! kept as an independent check.
//!
//! Trainable scalars, in flattening order, for each distinct layer:
//! μ (row-major), then for Gaussian kernels every ω, every σ_spatial and
//! every σ_appearance; then the classifier weight (row-major) and bias.
//! Tied models contribute one layer. Polynomial and precomputed kernels
//! have no trainable kernel parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::gat::{CrfGatModel, GatLayerParams};
use crate::kernels::{gaussian_bases, kernel_matrix, squared_distance, KernelSpec};
use crate::meanfield::{attend, compatibility_transform};
use crate::model::{
    softmax_neg_into, CompatibilityMatrix, LabelSpace, Labeling, MarginalField,
    ObservedSequence, PotentialField, UnaryPotentials,
};
use crate::table::Table;

/// Trained bandwidths are kept at or above this value.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Per-node linear-softmax classifier: p_i = softmax(Wᵀ X_i + b).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassifierRepr", into = "ClassifierRepr")]
pub struct UnaryClassifierParams {
    weight: Table,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierRepr {
    weight: Table,
    bias: Vec<f64>,
}

impl TryFrom<ClassifierRepr> for UnaryClassifierParams {
    type Error = CrfError;
    fn try_from(r: ClassifierRepr) -> Result<Self> {
        UnaryClassifierParams::new(r.weight, r.bias)
    }
}

impl From<UnaryClassifierParams> for ClassifierRepr {
    fn from(p: UnaryClassifierParams) -> Self {
        ClassifierRepr {
            weight: p.weight,
            bias: p.bias,
        }
    }
}

impl UnaryClassifierParams {
    /// `weight` is d_x × K, `bias` has K entries.
    pub fn new(weight: Table, bias: Vec<f64>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(CrfError::shape(format!(
                "classifier weight has {} columns, bias has {} entries",
                weight.cols(),
                bias.len()
            )));
        }
        if !weight.all_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(CrfError::invalid("classifier parameters must be finite"));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input_dim: usize, labels: usize) -> Self {
        Self {
            weight: Table::zeros(input_dim, labels),
            bias: vec![0.0; labels],
        }
    }

    pub fn weight(&self) -> &Table {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn labels(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, seq: &ObservedSequence) -> Result<Table> {
        let x = seq.observations();
        if x.cols() != self.input_dim() {
            return Err(CrfError::shape(format!(
                "observations have dimension {}, classifier expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let k = self.labels();
        Ok(Table::from_fn(x.rows(), k, |i, l| {
            self.bias[l]
                + x.row(i)
                    .iter()
                    .enumerate()
                    .map(|(d, xv)| xv * self.weight.get(d, l))
                    .sum::<f64>()
        }))
    }

    /// ψ_u = -log softmax(z), computed as logsumexp(z) - z.
    pub fn potentials(&self, seq: &ObservedSequence) -> Result<UnaryPotentials> {
        let z = self.logits(seq)?;
        let mut psi = z.clone();
        for i in 0..z.rows() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in psi.row_mut(i).iter_mut().zip(row) {
                *p = lse - v;
            }
        }
        UnaryPotentials::new(psi)
    }

    pub fn probabilities(&self, seq: &ObservedSequence) -> Result<MarginalField> {
        let psi = PotentialField::from(&self.potentials(seq)?);
        Ok(crate::model::distribution_from_potentials(&psi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seeds parameter initialization; training itself is deterministic.
    pub seed: u64,
    pub train_sigma: bool,
    pub symmetrize_mu: bool,
    pub fd_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 100,
            seed: 0,
            train_sigma: false,
            symmetrize_mu: true,
            fd_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CrfError::invalid(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(CrfError::invalid("fd_epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub sequence: ObservedSequence,
    pub gold: Labeling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct LabeledDataset {
    label_space: LabelSpace,
    items: Vec<LabeledItem>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    labels: LabelSpace,
    items: Vec<LabeledItem>,
}

impl TryFrom<DatasetRepr> for LabeledDataset {
    type Error = CrfError;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        LabeledDataset::new(r.labels, r.items)
    }
}

impl From<LabeledDataset> for DatasetRepr {
    fn from(d: LabeledDataset) -> Self {
        DatasetRepr {
            labels: d.label_space,
            items: d.items,
        }
    }
}

impl LabeledDataset {
    pub fn new(label_space: LabelSpace, items: Vec<LabeledItem>) -> Result<Self> {
        let dims = items
            .first()
            .map(|it| (it.sequence.position_dim(), it.sequence.observation_dim()));
        for (idx, item) in items.iter().enumerate() {
            let n = item.sequence.len();
            if item.gold.len() != n {
                return Err(CrfError::shape(format!(
                    "item {}: {} gold labels for {n} nodes",
                    idx + 1,
                    item.gold.len()
                )));
            }
            if item.gold.as_slice().iter().any(|&l| l >= label_space.len()) {
                return Err(CrfError::invalid(format!(
                    "item {}: gold label out of range 1..={}",
                    idx + 1,
                    label_space.len()
                )));
            }
            if Some((item.sequence.position_dim(), item.sequence.observation_dim())) != dims {
                return Err(CrfError::shape(format!(
                    "item {}: feature dimensions differ from item 1",
                    idx + 1
                )));
            }
            if let Some(g) = item.grid {
                if g.width * g.height != n {
                    return Err(CrfError::shape(format!(
                        "item {}: grid {}x{} does not cover {n} nodes",
                        idx + 1,
                        g.width,
                        g.height
                    )));
                }
            }
        }
        Ok(Self { label_space, items })
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn observation_dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.sequence.observation_dim())
    }

    /// Splits into the first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.items.len());
        (
            LabeledDataset {
                label_space: self.label_space,
                items: self.items[..n].to_vec(),
            },
            LabeledDataset {
                label_space: self.label_space,
                items: self.items[n..].to_vec(),
            },
        )
    }
}

/// Mean over nodes of -log softmax(-ψ)_{i, gold_i}.
pub fn cross_entropy(psi_final: &PotentialField, gold: &Labeling) -> Result<f64> {
    if psi_final.nodes() != gold.len() {
        return Err(CrfError::shape(format!(
            "{} potential rows for {} gold labels",
            psi_final.nodes(),
            gold.len()
        )));
    }
    if gold.as_slice().iter().any(|&g| g >= psi_final.labels()) {
        return Err(CrfError::invalid("gold label out of range"));
    }
    let t = psi_final.table();
    let total: f64 = gold
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &g)| node_nll(t.row(i), g))
        .sum();
    Ok(total / gold.len() as f64)
}

/// -log softmax(-row)_g = row_g - min + log Σ exp(min - row_l) >= 0.
fn node_nll(row: &[f64], g: usize) -> f64 {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = row.iter().map(|v| (min - v).exp()).sum();
    (row[g] - min) + s.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradients {
    pub compatibility: Table,
    pub omega: Vec<f64>,
    pub sigma_spatial: Vec<f64>,
    pub sigma_appearance: Vec<f64>,
}

/// Gradient of the mean batch loss, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub unary_weight: Table,
    pub unary_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_for(model: &CrfGatModel) -> Self {
        let k = model.labels();
        let layers = distinct_layers(model)
            .iter()
            .map(|layer| {
                let c = gaussian_count(&layer.kernel);
                LayerGradients {
                    compatibility: Table::zeros(k, k),
                    omega: vec![0.0; c],
                    sigma_spatial: vec![0.0; c],
                    sigma_appearance: vec![0.0; c],
                }
            })
            .collect();
        Self {
            layers,
            unary_weight: Table::zeros(model.unary().input_dim(), k),
            unary_bias: vec![0.0; k],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.compatibility.as_slice());
            out.extend_from_slice(&l.omega);
            out.extend_from_slice(&l.sigma_spatial);
            out.extend_from_slice(&l.sigma_appearance);
        }
        out.extend_from_slice(self.unary_weight.as_slice());
        out.extend_from_slice(&self.unary_bias);
        out
    }

    fn unflatten_like(template: &Gradients, flat: &[f64]) -> Gradients {
        let mut g = template.clone();
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().unwrap());
        for l in &mut g.layers {
            fill(l.compatibility.as_mut_slice());
            fill(&mut l.omega);
            fill(&mut l.sigma_spatial);
            fill(&mut l.sigma_appearance);
        }
        fill(g.unary_weight.as_mut_slice());
        fill(&mut g.unary_bias);
        g
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add_slice(a.compatibility.as_mut_slice(), b.compatibility.as_slice());
            add_slice(&mut a.omega, &b.omega);
            add_slice(&mut a.sigma_spatial, &b.sigma_spatial);
            add_slice(&mut a.sigma_appearance, &b.sigma_appearance);
        }
        add_slice(self.unary_weight.as_mut_slice(), other.unary_weight.as_slice());
        add_slice(&mut self.unary_bias, &other.unary_bias);
    }

    fn scale(&mut self, s: f64) {
        let flat: Vec<f64> = self.flatten().into_iter().map(|v| v * s).collect();
        *self = Gradients::unflatten_like(self, &flat);
    }

    /// max_p |a_p - b_p| / max(1e-8, |b_p|), with `reference` as b.
    pub fn max_relative_error(&self, reference: &Gradients) -> f64 {
        self.flatten()
            .iter()
            .zip(reference.flatten())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-8))
            .fold(0.0, f64::max)
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn gaussian_count(kernel: &KernelSpec) -> usize {
    match kernel {
        KernelSpec::GaussianBilateral { components } => components.len(),
        _ => 0,
    }
}

fn distinct_layers(model: &CrfGatModel) -> &[GatLayerParams] {
    let layers = model.layers();
    if model.share_parameters() && !layers.is_empty() {
        &layers[..1]
    } else {
        layers
    }
}

/// All trainable scalars in flattening order.
pub fn parameter_vector(model: &CrfGatModel) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in distinct_layers(model) {
        out.extend_from_slice(layer.compatibility.table().as_slice());
        if let KernelSpec::GaussianBilateral { components } = &layer.kernel {
            out.extend(components.iter().map(|c| c.omega));
            out.extend(components.iter().map(|c| c.sigma_spatial));
            out.extend(components.iter().map(|c| c.sigma_appearance));
        }
    }
    out.extend_from_slice(model.unary().weight().as_slice());
    out.extend_from_slice(model.unary().bias());
    out
}

/// Rebuilds `model` with the given flat parameters. A compatibility
/// matrix keeps its symmetric flag only while it stays symmetric.
pub fn with_parameters(model: &CrfGatModel, flat: &[f64]) -> Result<CrfGatModel> {
    let expected = parameter_vector(model).len();
    if flat.len() != expected {
        return Err(CrfError::shape(format!(
            "{} parameters given, model has {expected}",
            flat.len()
        )));
    }
    let k = model.labels();
    let mut it = flat.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let mut new_layers = Vec::new();
    for layer in distinct_layers(model) {
        let mu = Table::from_vec(k, k, take(k * k))?;
        let symmetric = layer.compatibility.is_symmetric() && mu == mu.transpose();
        let kernel = match &layer.kernel {
            KernelSpec::GaussianBilateral { components } => {
                let c = components.len();
                let (omega, ss, sa) = (take(c), take(c), take(c));
                KernelSpec::GaussianBilateral {
                    components: components
                        .iter()
                        .enumerate()
                        .map(|(idx, _)| crate::kernels::GaussianComponent {
                            omega: omega[idx],
                            sigma_spatial: ss[idx],
                            sigma_appearance: sa[idx],
                        })
                        .collect(),
                }
            }
            other => other.clone(),
        };
        new_layers.push(GatLayerParams {
            compatibility: CompatibilityMatrix::new(mu, symmetric)?,
            kernel,
        });
    }
    let unary = model.unary();
    let weight = Table::from_vec(unary.input_dim(), k, take(unary.input_dim() * k))?;
    let bias = take(k);
    let layers = if model.share_parameters() && !new_layers.is_empty() {
        vec![new_layers[0].clone(); model.depth()]
    } else {
        new_layers
    };
    CrfGatModel::new(
        model.label_space(),
        layers,
        UnaryClassifierParams::new(weight, bias)?,
        model.share_parameters(),
    )
}

/// Mean cross-entropy of the model's forward pass over the batch.
pub fn batch_loss(model: &CrfGatModel, batch: &LabeledDataset) -> Result<f64> {
    if batch.is_empty() {
        return Err(CrfError::invalid("empty batch"));
    }
    let losses = batch
        .items()
        .par_iter()
        .map(|item| {
            let psi = crate::gat::predict(model, &item.sequence)?;
            cross_entropy(&psi, &item.gold)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Central finite differences of [`batch_loss`] for every trainable scalar.
pub fn grad_fd(model: &CrfGatModel, batch: &LabeledDataset, eps: f64) -> Result<Gradients> {
    if !(eps > 0.0) {
        return Err(CrfError::invalid("finite-difference step must be > 0"));
    }
    let theta = parameter_vector(model);
    let mut flat = Vec::with_capacity(theta.len());
    for idx in 0..theta.len() {
        let mut plus = theta.clone();
        plus[idx] += eps;
        let mut minus = theta.clone();
        minus[idx] -= eps;
        let lp = batch_loss(&with_parameters(model, &plus)?, batch)?;
        let lm = batch_loss(&with_parameters(model, &minus)?, batch)?;
        flat.push((lp - lm) / (2.0 * eps));
    }
    Ok(Gradients::unflatten_like(&Gradients::zeros_for(model), &flat))
}

struct LayerTape {
    /// index into the distinct-layer gradient list
    slot: usize,
    p: Table,
    v: Table,
    alpha: Table,
    bases: Option<Vec<Table>>,
}

/// Loss and reverse-mode gradient for one item.
fn item_loss_and_grad(
    model: &CrfGatModel,
    seq: &ObservedSequence,
    gold: &Labeling,
) -> Result<(f64, Gradients)> {
    let n = seq.len();
    let k = model.labels();
    if gold.len() != n {
        return Err(CrfError::shape("gold labeling length differs from sequence"));
    }

    // forward
    let unary = model.unary();
    let z = unary.logits(seq)?;
    let psi0 = unary.potentials(seq)?;
    let mut psi = psi0.table().clone();
    let mut tape = Vec::with_capacity(model.depth());
    let mut shared: Option<(Table, Option<Vec<Table>>)> = None;
    for (m, layer) in model.layers().iter().enumerate() {
        let slot = if model.share_parameters() { 0 } else { m };
        let (alpha, bases) = match &shared {
            Some(cached) => cached.clone(),
            None => {
                let computed = layer_attention(seq, &layer.kernel)?;
                if model.share_parameters() {
                    shared = Some(computed.clone());
                }
                computed
            }
        };
        let mut p = Table::zeros(n, k);
        for i in 0..n {
            softmax_neg_into(psi.row(i), p.row_mut(i));
        }
        let v = compatibility_transform(&p, layer.compatibility.table());
        let r = attend(&alpha, &v);
        psi = psi.add(&r)?;
        tape.push(LayerTape {
            slot,
            p,
            v,
            alpha,
            bases,
        });
    }

    let loss = cross_entropy(&PotentialField::new(psi.clone())?, gold)?;

    // backward: G = dL/dψ
    let inv_n = 1.0 / n as f64;
    let mut g = Table::zeros(n, k);
    let mut pf = vec![0.0; k];
    for i in 0..n {
        softmax_neg_into(psi.row(i), &mut pf);
        let gi = gold.as_slice()[i];
        for (l, out) in g.row_mut(i).iter_mut().enumerate() {
            let delta = if l == gi { 1.0 } else { 0.0 };
            *out = (delta - pf[l]) * inv_n;
        }
    }

    let mut grads = Gradients::zeros_for(model);
    for (m, t) in tape.iter().enumerate().rev() {
        let layer = &model.layers()[m];
        let mu = layer.compatibility.table();

        // dV_j = Σ_{i≠j} α_ij G_i  (α symmetric is not assumed)
        let mut dv = Table::zeros(n, k);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let w = t.alpha.get(i, j);
                if w == 0.0 {
                    continue;
                }
                for (d, gv) in dv.row_mut(j).iter_mut().zip(g.row(i)) {
                    *d += w * gv;
                }
            }
        }

        if let (Some(bases), KernelSpec::GaussianBilateral { components }) = (&t.bases, &layer.kernel)
        {
            let lg = &mut grads.layers[t.slot];
            for i in 0..n {
                let fi = seq.feature(i);
                for j in (0..n).filter(|&j| j != i) {
                    // dα_ij = <G_i, V_j>
                    let da: f64 = g.row(i).iter().zip(t.v.row(j)).map(|(a, b)| a * b).sum();
                    let fj = seq.feature(j);
                    let ds = squared_distance(fi.position, fj.position);
                    let dx = squared_distance(fi.observation, fj.observation);
                    for (c, comp) in components.iter().enumerate() {
                        let b = bases[c].get(i, j);
                        lg.omega[c] += da * b;
                        let s = comp.sigma_spatial;
                        let a = comp.sigma_appearance;
                        lg.sigma_spatial[c] += da * comp.omega * b * ds / (s * s * s);
                        lg.sigma_appearance[c] += da * comp.omega * b * dx / (a * a * a);
                    }
                }
            }
        }

        // V = P μᵀ: dμ_{l,l'} = Σ_j dV_{j,l} P_{j,l'};  dP_{j,l'} = Σ_l dV_{j,l} μ_{l,l'}
        let dmu = &mut grads.layers[t.slot].compatibility;
        let mut dp = Table::zeros(n, k);
        for j in 0..n {
            let dvj = dv.row(j);
            let pj = t.p.row(j);
            for l in 0..k {
                for lp in 0..k {
                    dmu.set(l, lp, dmu.get(l, lp) + dvj[l] * pj[lp]);
                }
            }
            for (lp, out) in dp.row_mut(j).iter_mut().enumerate() {
                *out = (0..k).map(|l| dvj[l] * mu.get(l, lp)).sum();
            }
        }

        // residual path plus P = softmax(-ψ): dψ_k += -P_k (dP_k - <P, dP>)
        for i in 0..n {
            let pi = t.p.row(i);
            let dpi = dp.row(i);
            let inner: f64 = pi.iter().zip(dpi).map(|(a, b)| a * b).sum();
            for (l, out) in g.row_mut(i).iter_mut().enumerate() {
                *out -= pi[l] * (dpi[l] - inner);
            }
        }
    }

    // ψ_u = logsumexp(z) - z: dz_k = s_k Σ_l G_l - G_k
    let x = seq.observations();
    for i in 0..n {
        let zi = z.row(i);
        let max = zi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = zi.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let gsum: f64 = g.row(i).iter().sum();
        for l in 0..k {
            let dz = e[l] / total * gsum - g.get(i, l);
            grads.unary_bias[l] += dz;
            for (d, xv) in x.row(i).iter().enumerate() {
                let w = grads.unary_weight.get(d, l);
                grads.unary_weight.set(d, l, w + xv * dz);
            }
        }
    }

    Ok((loss, grads))
}

fn layer_attention(seq: &ObservedSequence, kernel: &KernelSpec) -> Result<(Table, Option<Vec<Table>>)> {
    match kernel {
        KernelSpec::GaussianBilateral { components } => {
            let bases = gaussian_bases(seq, components);
            let n = seq.len();
            let mut alpha = Table::zeros(n, n);
            for (c, b) in components.iter().zip(&bases) {
                for (a, bv) in alpha.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *a += c.omega * bv;
                }
            }
            Ok((alpha, Some(bases)))
        }
        _ => Ok((kernel_matrix(seq, kernel)?, None)),
    }
}

/// Mean batch loss and its exact gradient.
pub fn loss_and_grad(model: &CrfGatModel, batch: &LabeledDataset) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(CrfError::invalid("empty batch"));
    }
    let per_item = batch
        .items()
        .par_iter()
        .map(|item| item_loss_and_grad(model, &item.sequence, &item.gold))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros_for(model);
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

pub fn grad_analytic(model: &CrfGatModel, batch: &LabeledDataset) -> Result<Gradients> {
    loss_and_grad(model, batch).map(|(_, g)| g)
}

/// Full-batch gradient descent. Returns the trained model and the loss
/// before each update (one entry per epoch).
pub fn train(
    model: &CrfGatModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(CrfGatModel, Vec<f64>)> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // The input model evaluated at epoch 0, so later non-finite values
        // come from the updates.
        let (loss, grads) = match loss_and_grad(&current, data) {
            Err(CrfError::InvalidParameter(_)) if epoch > 0 => {
                return Err(CrfError::TrainingDiverged {
                    epoch,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(CrfError::TrainingDiverged { epoch, loss });
        }
        trace.push(loss);
        current = descend(&current, &grads, cfg, epoch)?;
    }
    Ok((current, trace))
}

fn descend(
    model: &CrfGatModel,
    grads: &Gradients,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<CrfGatModel> {
    let mut step = grads.clone();
    if !cfg.train_sigma {
        for l in &mut step.layers {
            l.sigma_spatial.iter_mut().for_each(|v| *v = 0.0);
            l.sigma_appearance.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let theta: Vec<f64> = parameter_vector(model)
        .iter()
        .zip(step.flatten())
        .map(|(p, g)| p - cfg.learning_rate * g)
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CrfError::TrainingDiverged {
            epoch: epoch + 1,
            loss: f64::NAN,
        });
    }
    let mut next = with_parameters(model, &theta)?;
    for layer in next.layers_mut().iter_mut() {
        if cfg.symmetrize_mu && layer.compatibility.table() != &layer.compatibility.table().transpose() {
            layer.compatibility = layer.compatibility.symmetrized();
        }
        if let KernelSpec::GaussianBilateral { components } = &mut layer.kernel {
            for c in components {
                c.sigma_spatial = c.sigma_spatial.max(SIGMA_FLOOR);
                c.sigma_appearance = c.sigma_appearance.max(SIGMA_FLOOR);
            }
        }
    }
    Ok(next)
}

/// Fresh parameters: μ = Potts + symmetric uniform noise in [-0.01, 0.01],
/// ω = 1 for every Gaussian component of `kernel`, classifier weights
/// N(0, 0.1²) and zero bias. `depth` 0 gives a classifier-only model.
pub fn init_model(
    label_space: LabelSpace,
    input_dim: usize,
    depth: usize,
    kernel: &KernelSpec,
    share_parameters: bool,
    seed: u64,
) -> Result<CrfGatModel> {
    let k = label_space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = match kernel {
        KernelSpec::GaussianBilateral { components } => KernelSpec::GaussianBilateral {
            components: components
                .iter()
                .map(|c| crate::kernels::GaussianComponent { omega: 1.0, ..*c })
                .collect(),
        },
        other => other.clone(),
    };
    let make_layer = |rng: &mut ChaCha8Rng| -> GatLayerParams {
        let mut mu = CompatibilityMatrix::potts(k).table().clone();
        for a in 0..k {
            for b in a..k {
                let v = mu.get(a, b) + rng.random_range(-0.01..=0.01);
                mu.set(a, b, v);
                mu.set(b, a, v);
            }
        }
        GatLayerParams {
            compatibility: CompatibilityMatrix::new(mu, true).expect("symmetric by construction"),
            kernel: kernel.clone(),
        }
    };
    let layers = if share_parameters {
        let layer = make_layer(&mut rng);
        vec![layer; depth]
    } else {
        (0..depth).map(|_| make_layer(&mut rng)).collect()
    };
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let weight = Table::from_fn(input_dim, k, |_, _| normal.sample(&mut rng));
    CrfGatModel::new(
        label_space,
        layers,
        UnaryClassifierParams::new(weight, vec![0.0; k])?,
        share_parameters,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::t1;
    use crate::gat::{gat_forward, gat_layer, predict};
    use crate::kernels::GaussianComponent;
    use std::f64::consts::LN_2;

    fn tiny_dataset(seed: u64, n: usize, k: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..2)
            .map(|_| LabeledItem {
                sequence: ObservedSequence::new(
                    Table::from_fn(n, 2, |_, _| rng.random_range(0.0..2.0)),
                    Table::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)),
                )
                .unwrap(),
                gold: Labeling::from_zero_based((0..n).map(|_| rng.random_range(0..k)).collect()),
                grid: None,
            })
            .collect();
        LabeledDataset::new(LabelSpace::new(k).unwrap(), items).unwrap()
    }

    fn tiny_model(seed: u64, k: usize, depth: usize) -> CrfGatModel {
        let kernel = KernelSpec::GaussianBilateral {
            components: vec![GaussianComponent::new(1.0, 1.2, 0.9)],
        };
        init_model(LabelSpace::new(k).unwrap(), 2, depth, &kernel, false, seed).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let psi = PotentialField::new(Table::zeros(3, 2)).unwrap();
        let gold = Labeling::from_zero_based(vec![0, 1, 1]);
        assert!((cross_entropy(&psi, &gold).unwrap() - LN_2).abs() < 1e-15);

        let psi = PotentialField::new(Table::from_rows(&[[0.0, 30.0], [30.0, 0.0]]).unwrap()).unwrap();
        let gold = Labeling::from_zero_based(vec![0, 1]);
        assert!(cross_entropy(&psi, &gold).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_t1_one_layer() {
        let m = t1();
        let layer = GatLayerParams {
            compatibility: m.compatibility().clone(),
            kernel: m.kernel().clone(),
        };
        let (psi, _) = gat_layer(&PotentialField::from(m.unary()), m.sequence(), &layer).unwrap();
        let gold = Labeling::from_one_based(&[1, 2]).unwrap();
        // both rows are (1/3, ln2 + 1/6) up to label swap, gold picks the 1/3 entry
        let a = (-1.0f64 / 3.0).exp();
        let b = (-LN_2 - 1.0 / 6.0).exp();
        let expected = -(a / (a + b)).ln();
        assert!((cross_entropy(&psi, &gold).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_shape_error() {
        let psi = PotentialField::new(Table::zeros(3, 2)).unwrap();
        assert!(cross_entropy(&psi, &Labeling::from_zero_based(vec![0])).is_err());
    }

    #[test]
    fn classifier_potentials_match_clamped_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = UnaryClassifierParams::new(
            Table::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0)),
            vec![0.1, -0.2, 0.0, 0.3],
        )
        .unwrap();
        let seq = ObservedSequence::new(
            Table::zeros(5, 1),
            Table::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0)),
        )
        .unwrap();
        let direct = params.potentials(&seq).unwrap();
        let via_probs = crate::model::unary_from_classifier(&params.probabilities(&seq).unwrap());
        assert!(direct.table().max_abs_diff(via_probs.table()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_kernel_has_zero_mu_gradient() {
        let data = tiny_dataset(1, 4, 3);
        let model = tiny_model(1, 3, 2);
        let theta = parameter_vector(&model);
        // ω at positions 9 and 9 + 9 + 3 = 21 (μ is 3x3, one component)
        let mut zeroed = theta.clone();
        zeroed[9] = 0.0;
        zeroed[21] = 0.0;
        let model = with_parameters(&model, &zeroed).unwrap();
        let fd = grad_fd(&model, &data, 1e-5).unwrap();
        let an = grad_analytic(&model, &data).unwrap();
        for g in [&fd, &an] {
            for l in &g.layers {
                assert!(l.compatibility.max_abs() < 1e-8);
            }
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let data = tiny_dataset(2, 3, 2);
        let single = LabeledDataset::new(data.label_space(), vec![data.items()[0].clone()]).unwrap();
        let double = LabeledDataset::new(
            data.label_space(),
            vec![data.items()[0].clone(), data.items()[0].clone()],
        )
        .unwrap();
        let model = tiny_model(3, 2, 2);
        let a = grad_fd(&model, &single, 1e-5).unwrap().flatten();
        let b = grad_fd(&model, &double, 1e-5).unwrap().flatten();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        let a = grad_analytic(&model, &single).unwrap().flatten();
        let b = grad_analytic(&model, &double).unwrap().flatten();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for seed in 0..10 {
            let data = tiny_dataset(seed, 4, 3);
            let model = tiny_model(seed + 100, 3, 2);
            let fd = grad_fd(&model, &data, 1e-5).unwrap();
            let an = grad_analytic(&model, &data).unwrap();
            let err = an.max_relative_error(&fd);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn tied_gradient_is_sum_of_untied() {
        let data = tiny_dataset(5, 4, 2);
        let kernel = KernelSpec::gaussian(0.8, 1.0, 1.0);
        let tied = init_model(LabelSpace::new(2).unwrap(), 2, 3, &kernel, true, 9).unwrap();
        let untied = CrfGatModel::new(
            tied.label_space(),
            tied.layers().to_vec(),
            tied.unary().clone(),
            false,
        )
        .unwrap();
        let g_tied = grad_analytic(&tied, &data).unwrap();
        let g_untied = grad_analytic(&untied, &data).unwrap();
        assert_eq!(g_tied.layers.len(), 1);
        assert_eq!(g_untied.layers.len(), 3);
        let mut summed = Table::zeros(2, 2);
        for l in &g_untied.layers {
            summed = summed.add(&l.compatibility).unwrap();
        }
        assert!(summed.max_abs_diff(&g_tied.layers[0].compatibility).unwrap() < 1e-14);
        let fd = grad_fd(&tied, &data, 1e-5).unwrap();
        assert!(g_tied.max_relative_error(&fd) < 1e-4);
    }

    #[test]
    fn forward_in_training_matches_gat_forward() {
        let data = tiny_dataset(6, 5, 3);
        let model = tiny_model(6, 3, 3);
        let item = &data.items()[0];
        let unary = model.unary_potentials(&item.sequence).unwrap();
        let (psi, _) = gat_forward(&model, &item.sequence, &unary).unwrap();
        let (loss, _) = item_loss_and_grad(&model, &item.sequence, &item.gold).unwrap();
        assert!((loss - cross_entropy(&psi, &item.gold).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_and_zero_epochs_leave_model() {
        let data = tiny_dataset(7, 4, 2);
        let model = tiny_model(7, 2, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let (trained, trace) = train(&model, &data, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(trace.len(), 5);
        assert!(trace.iter().all(|&l| l == trace[0]));

        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (trained, trace) = train(&model, &data, &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(trace.is_empty());
    }

    #[test]
    fn small_step_descends() {
        let data = tiny_dataset(8, 5, 3);
        let model = tiny_model(8, 3, 2);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            ..Default::default()
        };
        let before = batch_loss(&model, &data).unwrap();
        let (trained, _) = train(&model, &data, &cfg).unwrap();
        let after = batch_loss(&trained, &data).unwrap();
        assert!(after <= before + 1e-10);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_dataset(9, 4, 2);
        let model = tiny_model(9, 2, 1);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..Default::default()
        };
        assert!(matches!(
            train(&model, &data, &cfg),
            Err(CrfError::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn symmetrized_training_keeps_mu_symmetric() {
        let data = tiny_dataset(10, 4, 3);
        let model = tiny_model(10, 3, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (trained, _) = train(&model, &data, &cfg).unwrap();
        for layer in trained.layers() {
            assert!(layer.compatibility.is_symmetric());
            let mu = layer.compatibility.table();
            assert_eq!(mu, &mu.transpose());
        }
    }

    #[test]
    fn sigma_frozen_unless_requested() {
        let data = tiny_dataset(11, 4, 2);
        let model = tiny_model(11, 2, 1);
        let sigma = |m: &CrfGatModel| match &m.layers()[0].kernel {
            KernelSpec::GaussianBilateral { components } => components[0].sigma_spatial,
            _ => unreachable!(),
        };
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.5,
            ..Default::default()
        };
        let (frozen, _) = train(&model, &data, &cfg).unwrap();
        assert_eq!(sigma(&frozen), sigma(&model));
        let (moved, _) = train(
            &model,
            &data,
            &TrainConfig {
                train_sigma: true,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(sigma(&moved), sigma(&model));
    }

    #[test]
    fn init_is_seeded() {
        let kernel = KernelSpec::gaussian(0.3, 1.0, 1.0);
        let ls = LabelSpace::new(3).unwrap();
        let a = init_model(ls, 3, 2, &kernel, false, 4).unwrap();
        let b = init_model(ls, 3, 2, &kernel, false, 4).unwrap();
        let c = init_model(ls, 3, 2, &kernel, false, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers() {
            let mu = layer.compatibility.table();
            let potts = CompatibilityMatrix::potts(3);
            assert!(mu.max_abs_diff(potts.table()).unwrap() <= 0.01);
            assert!(matches!(&layer.kernel, KernelSpec::GaussianBilateral { components } if components[0].omega == 1.0));
        }
        let unary_only = init_model(ls, 3, 0, &kernel, false, 4).unwrap();
        assert_eq!(unary_only.depth(), 0);
    }

    #[test]
    fn predict_uses_classifier() {
        let data = tiny_dataset(12, 3, 2);
        let model = tiny_model(12, 2, 0);
        let seq = &data.items()[0].sequence;
        let psi = predict(&model, seq).unwrap();
        assert_eq!(psi.table(), model.unary_potentials(seq).unwrap().table());
    }

    #[test]
    fn dataset_validation() {
        let data = tiny_dataset(13, 3, 2);
        let mut item = data.items()[0].clone();
        item.gold = Labeling::from_zero_based(vec![0, 1]);
        assert!(LabeledDataset::new(data.label_space(), vec![item]).is_err());
        let mut item = data.items()[0].clone();
        item.gold = Labeling::from_zero_based(vec![0, 1, 2]);
        assert!(LabeledDataset::new(data.label_space(), vec![item]).is_err());
    }
}

//! Residual graph-attention forward pass (CRF-GAT).
//!
//! Each layer m turns the running potentials ψ into a distribution,
//! forms values through its own compatibility matrix, aggregates them over
//! all other nodes with its own (unnormalized) kernel as attention weight,
//! and adds the result back onto ψ:
//!
//! ```text
//! P = softmax(-ψ)
//! V = P μ⁽ᵐ⁾ᵀ
//! α = kernel⁽ᵐ⁾(f_i, f_j),  α_ii = 0
//! R = α V
//! ψ ← ψ + R
//! ```
//!
//! With one layer this is exactly one mean-field update; deeper stacks keep
//! accumulating residuals instead of rebuilding ψ_u + B.

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::kernels::{kernel_matrix, validate_spec, KernelSpec};
use crate::meanfield::{attend, compatibility_transform};
use crate::model::{
    distribution_from_potentials, CompatibilityMatrix, CrfModel, LabelSpace, Labeling,
    MarginalField, ObservedSequence, PotentialField, UnaryPotentials,
};
use crate::oracle::argmin_first;
use crate::table::Table;
use crate::training::UnaryClassifierParams;

/// Traces are kept by default only up to this many N·K entries.
pub const TRACE_RETENTION_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub compatibility: CompatibilityMatrix,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GatModelRepr", into = "GatModelRepr")]
pub struct CrfGatModel {
    label_space: LabelSpace,
    layers: Vec<GatLayerParams>,
    unary: UnaryClassifierParams,
    share_parameters: bool,
}

#[derive(Serialize, Deserialize)]
struct GatModelRepr {
    labels: LabelSpace,
    layers: Vec<GatLayerParams>,
    unary: UnaryClassifierParams,
    #[serde(default)]
    share_parameters: bool,
}

impl TryFrom<GatModelRepr> for CrfGatModel {
    type Error = CrfError;
    fn try_from(r: GatModelRepr) -> Result<Self> {
        CrfGatModel::new(r.labels, r.layers, r.unary, r.share_parameters)
    }
}

impl From<CrfGatModel> for GatModelRepr {
    fn from(m: CrfGatModel) -> Self {
        GatModelRepr {
            labels: m.label_space,
            layers: m.layers,
            unary: m.unary,
            share_parameters: m.share_parameters,
        }
    }
}

impl CrfGatModel {
    /// `layers` may be empty, which leaves only the unary classifier.
    /// With `share_parameters`, every layer must equal the first.
    pub fn new(
        label_space: LabelSpace,
        layers: Vec<GatLayerParams>,
        unary: UnaryClassifierParams,
        share_parameters: bool,
    ) -> Result<Self> {
        let k = label_space.len();
        if unary.labels() != k {
            return Err(CrfError::shape(format!(
                "unary classifier has {} labels, model has {k}",
                unary.labels()
            )));
        }
        for (m, layer) in layers.iter().enumerate() {
            if layer.compatibility.labels() != k {
                return Err(CrfError::shape(format!(
                    "layer {} compatibility is {1}x{1}, expected {k}x{k}",
                    m + 1,
                    layer.compatibility.labels()
                )));
            }
        }
        if share_parameters && layers.iter().any(|l| *l != layers[0]) {
            return Err(CrfError::invalid(
                "share_parameters is set but layers differ",
            ));
        }
        Ok(Self {
            label_space,
            layers,
            unary,
            share_parameters,
        })
    }

    /// M copies of one layer with tied parameters.
    pub fn shared(
        label_space: LabelSpace,
        layer: GatLayerParams,
        depth: usize,
        unary: UnaryClassifierParams,
    ) -> Result<Self> {
        Self::new(label_space, vec![layer; depth], unary, true)
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn labels(&self) -> usize {
        self.label_space.len()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GatLayerParams] {
        &self.layers
    }

    pub fn unary(&self) -> &UnaryClassifierParams {
        &self.unary
    }

    pub fn share_parameters(&self) -> bool {
        self.share_parameters
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<GatLayerParams> {
        &mut self.layers
    }

    /// Unary potentials of the built-in classifier for `seq`.
    pub fn unary_potentials(&self, seq: &ObservedSequence) -> Result<UnaryPotentials> {
        self.unary.potentials(seq)
    }

    /// The single-CRF view: the classifier's unary with layer 1's parameters.
    pub fn as_crf(&self, seq: &ObservedSequence) -> Result<CrfModel> {
        let layer = self
            .layers
            .first()
            .ok_or_else(|| CrfError::invalid("model has no attention layers"))?;
        CrfModel::new(
            self.label_space,
            seq.clone(),
            self.unary_potentials(seq)?,
            layer.compatibility.clone(),
            layer.kernel.clone(),
        )
    }

    fn check_sequence(&self, seq: &ObservedSequence) -> Result<()> {
        for (m, layer) in self.layers.iter().enumerate() {
            if let Some(v) = validate_spec(&layer.kernel, seq).first() {
                return Err(CrfError::invalid(format!("layer {} kernel: {v}", m + 1)));
            }
        }
        Ok(())
    }
}

/// Per-layer intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub distribution: MarginalField,
    pub residual: Table,
    pub potentials: PotentialField,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatTrace {
    pub layers: Vec<LayerSnapshot>,
}

/// Attention weights α of one layer, zero diagonal.
pub fn attention(seq: &ObservedSequence, params: &GatLayerParams) -> Result<Table> {
    kernel_matrix(seq, &params.kernel)
}

fn layer_with_alpha(
    psi: &PotentialField,
    alpha: &Table,
    params: &GatLayerParams,
) -> (MarginalField, Table, PotentialField) {
    let p = distribution_from_potentials(psi);
    let v = compatibility_transform(p.table(), params.compatibility.table());
    let r = attend(alpha, &v);
    let next = psi.table().add(&r).expect("residual has the potential's shape");
    (p, r, PotentialField::new(next).expect("finite residual"))
}

/// One attention layer: returns the updated potentials and the residual R.
pub fn gat_layer(
    psi: &PotentialField,
    seq: &ObservedSequence,
    params: &GatLayerParams,
) -> Result<(PotentialField, Table)> {
    if psi.nodes() != seq.len() || psi.labels() != params.compatibility.labels() {
        return Err(CrfError::shape(format!(
            "potentials are {}x{}, sequence has {} nodes and layer {} labels",
            psi.nodes(),
            psi.labels(),
            seq.len(),
            params.compatibility.labels()
        )));
    }
    let alpha = attention(seq, params)?;
    let (_, r, next) = layer_with_alpha(psi, &alpha, params);
    Ok((next, r))
}

/// Runs every layer from ψ = ψ_u. The trace is retained when N·K is at most
/// [`TRACE_RETENTION_LIMIT`].
pub fn gat_forward(
    model: &CrfGatModel,
    seq: &ObservedSequence,
    unary: &UnaryPotentials,
) -> Result<(PotentialField, GatTrace)> {
    let retain = seq.len() * model.labels() <= TRACE_RETENTION_LIMIT;
    gat_forward_traced(model, seq, unary, retain)
}

pub fn gat_forward_traced(
    model: &CrfGatModel,
    seq: &ObservedSequence,
    unary: &UnaryPotentials,
    retain_trace: bool,
) -> Result<(PotentialField, GatTrace)> {
    if unary.nodes() != seq.len() || unary.labels() != model.labels() {
        return Err(CrfError::shape(format!(
            "unary is {}x{}, expected {}x{}",
            unary.nodes(),
            unary.labels(),
            seq.len(),
            model.labels()
        )));
    }
    model.check_sequence(seq)?;
    let mut psi = PotentialField::from(unary);
    let mut trace = GatTrace::default();
    let mut shared_alpha: Option<Table> = None;
    for layer in model.layers() {
        let alpha = match (&shared_alpha, model.share_parameters()) {
            (Some(a), true) => a.clone(),
            _ => attention(seq, layer)?,
        };
        let (p, r, next) = layer_with_alpha(&psi, &alpha, layer);
        if model.share_parameters() {
            shared_alpha = Some(alpha);
        }
        if retain_trace {
            trace.layers.push(LayerSnapshot {
                distribution: p,
                residual: r,
                potentials: next.clone(),
            });
        }
        psi = next;
    }
    Ok((psi, trace))
}

/// Convenience: classifier unary followed by the attention stack.
pub fn predict(model: &CrfGatModel, seq: &ObservedSequence) -> Result<PotentialField> {
    let unary = model.unary_potentials(seq)?;
    gat_forward_traced(model, seq, &unary, false).map(|(psi, _)| psi)
}

/// Per node, the label with the smallest potential; ties go to the smaller label.
pub fn decode_argmin(psi: &PotentialField) -> Labeling {
    Labeling::from_zero_based(psi.table().iter_rows().map(argmin_first).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_compatibility, random_gaussian_kernel, random_model, t1};
    use crate::meanfield::{decode_argmax, init_marginals, mf_step_kernel_first};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn t1_layer() -> GatLayerParams {
        let m = t1();
        GatLayerParams {
            compatibility: m.compatibility().clone(),
            kernel: m.kernel().clone(),
        }
    }

    fn t1_gat(depth: usize) -> CrfGatModel {
        CrfGatModel::shared(
            LabelSpace::new(2).unwrap(),
            t1_layer(),
            depth,
            UnaryClassifierParams::zeros(1, 2),
        )
        .unwrap()
    }

    #[test]
    fn t1_layer_by_hand() {
        let m = t1();
        let psi = PotentialField::from(m.unary());
        let (next, r) = gat_layer(&psi, m.sequence(), &t1_layer()).unwrap();
        assert!((r.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.get(0, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((next.table().get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((next.table().get(0, 1) - (LN_2 + 1.0 / 6.0)).abs() < 1e-15);
        assert_eq!(decode_argmin(&next).as_slice()[0], 0);
    }

    #[test]
    fn zero_attention_or_compatibility_is_identity() {
        let m = random_model(5, 4, 3, true);
        let psi = PotentialField::from(m.unary());
        for params in [
            GatLayerParams {
                compatibility: m.compatibility().clone(),
                kernel: m.kernel().scaled(0.0).unwrap(),
            },
            GatLayerParams {
                compatibility: CompatibilityMatrix::zeros(3),
                kernel: m.kernel().clone(),
            },
        ] {
            let (next, r) = gat_layer(&psi, m.sequence(), &params).unwrap();
            assert_eq!(r, Table::zeros(4, 3));
            assert_eq!(next, psi);
        }
    }

    #[test]
    fn depth_one_matches_one_update() {
        let m = t1();
        let (psi, _) = gat_forward(&t1_gat(1), m.sequence(), m.unary()).unwrap();
        let via_gat = distribution_from_potentials(&psi);
        let via_mf = mf_step_kernel_first(&init_marginals(&m), &m).unwrap();
        assert!(via_gat.max_abs_diff(&via_mf).unwrap() < 1e-12);
    }

    #[test]
    fn two_layers_unrolled_by_hand() {
        let m = t1();
        let (psi, trace) = gat_forward(&t1_gat(2), m.sequence(), m.unary()).unwrap();
        // layer 1: R¹ row 1 = (1/3, 1/6), row 2 = (1/6, 1/3)
        let psi1 = [[1.0 / 3.0, LN_2 + 1.0 / 6.0], [LN_2 + 1.0 / 6.0, 1.0 / 3.0]];
        // layer 2: P = softmax(-ψ¹), V_j = (P_j(2), P_j(1)), R_i = 0.5 V_other
        let softmax = |row: [f64; 2]| {
            let a = (-row[0]).exp();
            let b = (-row[1]).exp();
            [a / (a + b), b / (a + b)]
        };
        let p = [softmax(psi1[0]), softmax(psi1[1])];
        let r2 = [[0.5 * p[1][1], 0.5 * p[1][0]], [0.5 * p[0][1], 0.5 * p[0][0]]];
        for i in 0..2 {
            for l in 0..2 {
                let expected = psi1[i][l] + r2[i][l];
                assert!((psi.table().get(i, l) - expected).abs() < 1e-15);
                assert!((trace.layers[1].residual.get(i, l) - r2[i][l]).abs() < 1e-15);
            }
        }
        assert_eq!(trace.layers.len(), 2);
    }

    #[test]
    fn empty_stack_returns_unary() {
        let m = random_model(1, 3, 2, true);
        let model = CrfGatModel::new(
            LabelSpace::new(2).unwrap(),
            vec![],
            UnaryClassifierParams::zeros(3, 2),
            false,
        )
        .unwrap();
        let (psi, trace) = gat_forward(&model, m.sequence(), m.unary()).unwrap();
        assert_eq!(psi.table(), m.unary().table());
        assert!(trace.layers.is_empty());
    }

    #[test]
    fn zero_kernel_layers_keep_unary() {
        let m = random_model(6, 5, 3, true);
        let layer = GatLayerParams {
            compatibility: m.compatibility().clone(),
            kernel: KernelSpec::zero(5),
        };
        let model = CrfGatModel::new(
            LabelSpace::new(3).unwrap(),
            vec![layer.clone(), layer.clone(), layer],
            UnaryClassifierParams::zeros(3, 3),
            false,
        )
        .unwrap();
        let (psi, _) = gat_forward(&model, m.sequence(), m.unary()).unwrap();
        assert_eq!(psi.table(), m.unary().table());
    }

    #[test]
    fn self_attention_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(7, 5, 3, false);
        let params = GatLayerParams {
            compatibility: random_compatibility(&mut rng, 3, false),
            kernel: random_gaussian_kernel(&mut rng),
        };
        let alpha = attention(m.sequence(), &params).unwrap();
        for i in 0..5 {
            assert_eq!(alpha.get(i, i), 0.0);
        }
        let psi = PotentialField::from(m.unary());
        let (_, r) = gat_layer(&psi, m.sequence(), &params).unwrap();
        let mut perturbed = psi.table().clone();
        for l in 0..3 {
            perturbed.set(2, l, perturbed.get(2, l) + rng.random_range(-3.0..3.0));
        }
        let (_, r2) = gat_layer(&PotentialField::new(perturbed).unwrap(), m.sequence(), &params).unwrap();
        for l in 0..3 {
            assert_eq!(r.get(2, l), r2.get(2, l));
        }
    }

    #[test]
    fn decode_examples() {
        let psi = PotentialField::new(
            Table::from_rows(&[[1.0 / 3.0, LN_2 + 1.0 / 6.0], [2.0, 2.0], [0.4, 0.1]]).unwrap(),
        )
        .unwrap();
        assert_eq!(decode_argmin(&psi).to_one_based(), vec![1, 1, 2]);
    }

    #[test]
    fn decode_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let psi = PotentialField::new(Table::from_fn(6, 4, |_, _| rng.random_range(-5.0..5.0)))
                .unwrap();
            assert_eq!(
                decode_argmin(&psi),
                decode_argmax(&distribution_from_potentials(&psi))
            );
        }
    }

    #[test]
    fn shape_errors() {
        let m = t1();
        let psi = PotentialField::new(Table::zeros(3, 2)).unwrap();
        assert!(matches!(
            gat_layer(&psi, m.sequence(), &t1_layer()),
            Err(CrfError::Shape(_))
        ));
        assert!(gat_forward(&t1_gat(1), m.sequence(), &UnaryPotentials::zeros(2, 3)).is_err());
    }

    #[test]
    fn shared_flag_rejects_distinct_layers() {
        let mut second = t1_layer();
        second.kernel = KernelSpec::constant(2, 0.7);
        assert!(CrfGatModel::new(
            LabelSpace::new(2).unwrap(),
            vec![t1_layer(), second],
            UnaryClassifierParams::zeros(1, 2),
            true
        )
        .is_err());
    }
}

//! Pairwise affinity kernels k(f_i, f_j).
//!
//! The kernel plays the role of an (unnormalized) attention weight between
//! node i (query) and node j (key). Three forms are supported:
//!
//! - [`KernelSpec::GaussianBilateral`]: a weighted mixture of Gaussians over
//!   spatial distance and appearance distance,
//!   `Σ_m ω_m exp(-|p_i - p_j|² / 2σ²_{m,s} - |X_i - X_j|² / 2σ²_{m,a})`.
//! - [`KernelSpec::Polynomial`]: `(scale·<f_i, f_j> + bias)^degree` on the
//!   concatenated feature vector `f = (p, X)`.
//! - [`KernelSpec::Precomputed`]: a stored N×N matrix.
//!
//! Kernel matrices are never row-normalized.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{Feature, ObservedSequence};
use crate::table::Table;

const PRECOMPUTED_SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub omega: f64,
    pub sigma_spatial: f64,
    pub sigma_appearance: f64,
}

impl GaussianComponent {
    pub fn new(omega: f64, sigma_spatial: f64, sigma_appearance: f64) -> Self {
        Self {
            omega,
            sigma_spatial,
            sigma_appearance,
        }
    }

    /// The unweighted Gaussian factor for the given squared distances.
    #[inline]
    pub fn basis(&self, spatial_sq: f64, appearance_sq: f64) -> f64 {
        let s = self.sigma_spatial;
        let a = self.sigma_appearance;
        (-spatial_sq / (2.0 * s * s) - appearance_sq / (2.0 * a * a)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum KernelSpec {
    GaussianBilateral { components: Vec<GaussianComponent> },
    Polynomial { scale: f64, bias: f64, degree: u32 },
    Precomputed { matrix: Table },
}

impl KernelSpec {
    pub fn gaussian(omega: f64, sigma_spatial: f64, sigma_appearance: f64) -> Self {
        KernelSpec::GaussianBilateral {
            components: vec![GaussianComponent::new(
                omega,
                sigma_spatial,
                sigma_appearance,
            )],
        }
    }

    /// A precomputed kernel with the same value `c` on every off-diagonal pair.
    pub fn constant(n: usize, c: f64) -> Self {
        KernelSpec::Precomputed {
            matrix: Table::from_fn(n, n, |i, j| if i == j { 0.0 } else { c }),
        }
    }

    /// A kernel that is identically zero for an N-node sequence.
    pub fn zero(n: usize) -> Self {
        KernelSpec::constant(n, 0.0)
    }

    /// Multiplies every kernel value by `t >= 0`.
    ///
    /// For polynomial kernels the factor is pushed inside the power, so
    /// `t` must be non-negative.
    pub fn scaled(&self, t: f64) -> Result<KernelSpec> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(CrfError::invalid(format!(
                "kernel scale factor must be finite and >= 0, got {t}"
            )));
        }
        Ok(match self {
            KernelSpec::GaussianBilateral { components } => KernelSpec::GaussianBilateral {
                components: components
                    .iter()
                    .map(|c| GaussianComponent {
                        omega: c.omega * t,
                        ..*c
                    })
                    .collect(),
            },
            KernelSpec::Polynomial {
                scale,
                bias,
                degree,
            } => {
                let root = t.powf(1.0 / f64::from(*degree));
                KernelSpec::Polynomial {
                    scale: scale * root,
                    bias: bias * root,
                    degree: *degree,
                }
            }
            KernelSpec::Precomputed { matrix } => KernelSpec::Precomputed {
                matrix: matrix.map(|v| v * t),
            },
        })
    }
}

/// Evaluates k(f_i, f_j) for feature-based kernels.
///
/// `Precomputed` kernels are indexed by node, not by feature, and are
/// rejected here; use [`kernel_matrix`] for those.
pub fn eval_kernel(fi: Feature<'_>, fj: Feature<'_>, spec: &KernelSpec) -> Result<f64> {
    if fi.position.len() != fj.position.len() || fi.observation.len() != fj.observation.len() {
        return Err(CrfError::shape(format!(
            "feature dimensions differ: ({}, {}) vs ({}, {})",
            fi.position.len(),
            fi.observation.len(),
            fj.position.len(),
            fj.observation.len()
        )));
    }
    match spec {
        KernelSpec::GaussianBilateral { components } => {
            let spatial = squared_distance(fi.position, fj.position);
            let appearance = squared_distance(fi.observation, fj.observation);
            Ok(components
                .iter()
                .map(|c| c.omega * c.basis(spatial, appearance))
                .sum())
        }
        KernelSpec::Polynomial {
            scale,
            bias,
            degree,
        } => {
            let dot = dot(fi.position, fj.position) + dot(fi.observation, fj.observation);
            Ok((scale * dot + bias).powi(*degree as i32))
        }
        KernelSpec::Precomputed { .. } => Err(CrfError::invalid(
            "precomputed kernels have no feature-space form; use kernel_matrix",
        )),
    }
}

/// Materializes the N×N attention-weight matrix with a zero diagonal.
///
/// Only the upper triangle is evaluated; the lower triangle is a copy, so
/// the result is exactly symmetric for feature kernels. Precomputed
/// matrices are returned verbatim.
pub fn kernel_matrix(seq: &ObservedSequence, spec: &KernelSpec) -> Result<Table> {
    let n = seq.len();
    if let KernelSpec::Precomputed { matrix } = spec {
        if matrix.shape() != (n, n) {
            return Err(CrfError::shape(format!(
                "precomputed kernel is {:?}, sequence has {n} nodes",
                matrix.shape()
            )));
        }
        return Ok(matrix.clone());
    }
    let mut out = Table::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = eval_kernel(seq.feature(i), seq.feature(j), spec)?;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Per-component Gaussian basis matrices (zero diagonal), used by the
/// gradient code. Summing `omega_c * basis_c` in component order reproduces
/// [`kernel_matrix`] bit for bit.
pub fn gaussian_bases(seq: &ObservedSequence, components: &[GaussianComponent]) -> Vec<Table> {
    let n = seq.len();
    let mut out = vec![Table::zeros(n, n); components.len()];
    for i in 0..n {
        let fi = seq.feature(i);
        for j in (i + 1)..n {
            let fj = seq.feature(j);
            let spatial = squared_distance(fi.position, fj.position);
            let appearance = squared_distance(fi.observation, fj.observation);
            for (c, basis) in components.iter().zip(out.iter_mut()) {
                let v = c.basis(spatial, appearance);
                basis.set(i, j, v);
                basis.set(j, i, v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelViolation {
    EmptyMixture,
    NonPositiveSigma {
        component: usize,
        which: &'static str,
        value: f64,
    },
    NonFiniteParameter(String),
    ZeroDegree,
    PrecomputedShape { expected: usize, found: (usize, usize) },
    PrecomputedAsymmetric { row: usize, col: usize, diff: f64 },
    PrecomputedDiagonal { node: usize, value: f64 },
    FeatureDimension(String),
}

impl fmt::Display for KernelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelViolation::EmptyMixture => write!(f, "gaussian kernel has no components"),
            KernelViolation::NonPositiveSigma {
                component,
                which,
                value,
            } => write!(f, "component {component}: {which} must be > 0, got {value}"),
            KernelViolation::NonFiniteParameter(what) => write!(f, "non-finite parameter: {what}"),
            KernelViolation::ZeroDegree => write!(f, "polynomial degree must be >= 1"),
            KernelViolation::PrecomputedShape { expected, found } => write!(
                f,
                "precomputed matrix is {}x{}, expected {expected}x{expected}",
                found.0, found.1
            ),
            KernelViolation::PrecomputedAsymmetric { row, col, diff } => write!(
                f,
                "precomputed matrix asymmetric at ({}, {}): |diff| = {diff:e}",
                row + 1,
                col + 1
            ),
            KernelViolation::PrecomputedDiagonal { node, value } => write!(
                f,
                "precomputed matrix has nonzero diagonal at ({0}, {0}): {value}",
                node + 1
            ),
            KernelViolation::FeatureDimension(msg) => write!(f, "feature dimension: {msg}"),
        }
    }
}

/// Lists every problem with `spec` for the given sequence. Empty means valid.
pub fn validate_spec(spec: &KernelSpec, seq: &ObservedSequence) -> Vec<KernelViolation> {
    let mut report = Vec::new();
    match spec {
        KernelSpec::GaussianBilateral { components } => {
            if components.is_empty() {
                report.push(KernelViolation::EmptyMixture);
            }
            for (idx, c) in components.iter().enumerate() {
                if !c.omega.is_finite() {
                    report.push(KernelViolation::NonFiniteParameter(format!(
                        "component {idx} omega"
                    )));
                }
                for (which, value) in [
                    ("sigma_spatial", c.sigma_spatial),
                    ("sigma_appearance", c.sigma_appearance),
                ] {
                    if !(value > 0.0) || !value.is_finite() {
                        report.push(KernelViolation::NonPositiveSigma {
                            component: idx,
                            which,
                            value,
                        });
                    }
                }
            }
        }
        KernelSpec::Polynomial {
            scale,
            bias,
            degree,
        } => {
            if !scale.is_finite() || !bias.is_finite() {
                report.push(KernelViolation::NonFiniteParameter(
                    "polynomial scale/bias".into(),
                ));
            }
            if *degree == 0 {
                report.push(KernelViolation::ZeroDegree);
            }
        }
        KernelSpec::Precomputed { matrix } => {
            let n = seq.len();
            if matrix.shape() != (n, n) {
                report.push(KernelViolation::PrecomputedShape {
                    expected: n,
                    found: matrix.shape(),
                });
                return report;
            }
            if !matrix.all_finite() {
                report.push(KernelViolation::NonFiniteParameter(
                    "precomputed matrix entry".into(),
                ));
            }
            for i in 0..n {
                let d = matrix.get(i, i);
                if d != 0.0 {
                    report.push(KernelViolation::PrecomputedDiagonal { node: i, value: d });
                }
                for j in (i + 1)..n {
                    let diff = (matrix.get(i, j) - matrix.get(j, i)).abs();
                    if diff > PRECOMPUTED_SYMMETRY_TOL {
                        report.push(KernelViolation::PrecomputedAsymmetric {
                            row: i,
                            col: j,
                            diff,
                        });
                    }
                }
            }
        }
    }
    report
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feat<'a>(p: &'a [f64], x: &'a [f64]) -> Feature<'a> {
        Feature {
            position: p,
            observation: x,
        }
    }

    fn seq_1d(positions: &[f64], observations: &[f64]) -> ObservedSequence {
        ObservedSequence::new(
            Table::from_vec(positions.len(), 1, positions.to_vec()).unwrap(),
            Table::from_vec(observations.len(), 1, observations.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_distance_returns_weight() {
        let p = [1.0, 2.0];
        let x = [0.3];
        let v = eval_kernel(feat(&p, &x), feat(&p, &x), &KernelSpec::gaussian(0.8, 1.0, 1.0))
            .unwrap();
        assert_eq!(v, 0.8);
    }

    #[test]
    fn unit_spatial_distance() {
        let v = eval_kernel(
            feat(&[0.0], &[0.5]),
            feat(&[1.0], &[0.5]),
            &KernelSpec::gaussian(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn two_components_sum_weights() {
        let spec = KernelSpec::GaussianBilateral {
            components: vec![
                GaussianComponent::new(0.5, 1.0, 2.0),
                GaussianComponent::new(0.5, 3.0, 0.5),
            ],
        };
        let p = [4.0];
        let x = [1.0, -1.0];
        assert_eq!(eval_kernel(feat(&p, &x), feat(&p, &x), &spec).unwrap(), 1.0);
    }

    #[test]
    fn polynomial_form() {
        let spec = KernelSpec::Polynomial {
            scale: 0.5,
            bias: 1.0,
            degree: 2,
        };
        // <(1,2),(3,4)> = 11 -> (5.5 + 1)^2
        let v = eval_kernel(feat(&[1.0], &[2.0]), feat(&[3.0], &[4.0]), &spec).unwrap();
        assert_eq!(v, 42.25);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let err = eval_kernel(
            feat(&[0.0], &[1.0]),
            feat(&[0.0, 1.0], &[1.0]),
            &KernelSpec::gaussian(1.0, 1.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, CrfError::Shape(_)));
    }

    #[test]
    fn single_node_matrix_is_zero() {
        let seq = seq_1d(&[0.0], &[0.0]);
        let k = kernel_matrix(&seq, &KernelSpec::gaussian(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(k, Table::zeros(1, 1));
    }

    #[test]
    fn two_node_matrix() {
        let seq = seq_1d(&[0.0, 1.0], &[0.0, 0.0]);
        let k = kernel_matrix(&seq, &KernelSpec::gaussian(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(k.get(0, 0), 0.0);
        assert_eq!(k.get(1, 1), 0.0);
        assert!((k.get(0, 1) - 0.6065).abs() < 1e-4);
        assert_eq!(k.get(0, 1), k.get(1, 0));
    }

    #[test]
    fn precomputed_passes_through() {
        let seq = seq_1d(&[0.0, 1.0], &[0.0, 0.0]);
        let m = Table::from_rows(&[[0.0, 0.25], [0.25, 0.0]]).unwrap();
        let k = kernel_matrix(&seq, &KernelSpec::Precomputed { matrix: m.clone() }).unwrap();
        assert_eq!(k, m);
        let wrong = KernelSpec::constant(3, 1.0);
        assert!(matches!(
            kernel_matrix(&seq, &wrong).unwrap_err(),
            CrfError::Shape(_)
        ));
    }

    #[test]
    fn validation_reports() {
        let seq = seq_1d(&[0.0, 1.0], &[0.0, 0.0]);
        assert!(validate_spec(&KernelSpec::gaussian(1.0, 2.0, 3.0), &seq).is_empty());

        let report = validate_spec(&KernelSpec::gaussian(1.0, 0.0, 3.0), &seq);
        assert_eq!(report.len(), 1);
        assert!(matches!(
            report[0],
            KernelViolation::NonPositiveSigma {
                component: 0,
                which: "sigma_spatial",
                ..
            }
        ));

        let m = Table::from_rows(&[[0.3, 0.25], [0.25, 0.0]]).unwrap();
        let report = validate_spec(&KernelSpec::Precomputed { matrix: m }, &seq);
        assert_eq!(
            report,
            vec![KernelViolation::PrecomputedDiagonal {
                node: 0,
                value: 0.3
            }]
        );
        assert!(report[0].to_string().contains("(1, 1)"));

        let m = Table::from_rows(&[[0.0, 0.25], [0.5, 0.0]]).unwrap();
        let report = validate_spec(&KernelSpec::Precomputed { matrix: m }, &seq);
        assert!(matches!(
            report[0],
            KernelViolation::PrecomputedAsymmetric { .. }
        ));
    }

    #[test]
    fn bases_reproduce_matrix_bitwise() {
        let seq = seq_1d(&[0.0, 1.0, 2.5, 4.0], &[0.1, -0.3, 0.7, 0.0]);
        let comps = vec![
            GaussianComponent::new(0.7, 1.3, 0.4),
            GaussianComponent::new(1.9, 3.0, 2.0),
        ];
        let bases = gaussian_bases(&seq, &comps);
        let k = kernel_matrix(
            &seq,
            &KernelSpec::GaussianBilateral {
                components: comps.clone(),
            },
        )
        .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for (c, b) in comps.iter().zip(&bases) {
                    acc += c.omega * b.get(i, j);
                }
                if i == j {
                    assert_eq!(k.get(i, j), 0.0);
                } else {
                    assert_eq!(acc.to_bits(), k.get(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn serde_uses_variant_tag() {
        let json = serde_json::to_string(&KernelSpec::gaussian(1.0, 2.0, 3.0)).unwrap();
        assert!(json.contains("\"variant\":\"GaussianBilateral\""));
        let back: KernelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, KernelSpec::gaussian(1.0, 2.0, 3.0));
    }

    proptest! {
        #[test]
        fn symmetric_in_arguments(
            p in proptest::collection::vec(-5.0f64..5.0, 4),
            x in proptest::collection::vec(-5.0f64..5.0, 6),
            omega in 0.0f64..3.0,
            ss in 0.1f64..4.0,
            sa in 0.1f64..4.0,
            scale in -2.0f64..2.0,
            bias in -2.0f64..2.0,
            degree in 1u32..4,
        ) {
            let (pi, pj) = p.split_at(2);
            let (xi, xj) = x.split_at(3);
            for spec in [
                KernelSpec::gaussian(omega, ss, sa),
                KernelSpec::Polynomial { scale, bias, degree },
            ] {
                let a = eval_kernel(feat(pi, xi), feat(pj, xj), &spec).unwrap();
                let b = eval_kernel(feat(pj, xj), feat(pi, xi), &spec).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn gaussian_entries_bounded(
            pos in proptest::collection::vec(-5.0f64..5.0, 2..8),
            w1 in 0.0f64..2.0,
            w2 in 0.0f64..2.0,
        ) {
            let n = pos.len();
            let obs: Vec<f64> = pos.iter().map(|p| (p * 1.7).sin()).collect();
            let seq = seq_1d(&pos, &obs);
            let spec = KernelSpec::GaussianBilateral {
                components: vec![
                    GaussianComponent::new(w1, 1.0, 0.5),
                    GaussianComponent::new(w2, 2.0, 2.0),
                ],
            };
            let k = kernel_matrix(&seq, &spec).unwrap();
            for i in 0..n {
                prop_assert_eq!(k.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert!(k.get(i, j) >= 0.0);
                    prop_assert!(k.get(i, j) <= w1 + w2);
                    prop_assert_eq!(k.get(i, j), k.get(j, i));
                }
            }
        }

        #[test]
        fn spatial_monotonicity(d1 in 0.0f64..6.0, gap in 1e-3f64..3.0, x in -2.0f64..2.0) {
            let spec = KernelSpec::gaussian(1.0, 2.0, 1.0);
            let near = eval_kernel(feat(&[0.0], &[x]), feat(&[d1], &[x]), &spec).unwrap();
            let far = eval_kernel(feat(&[0.0], &[x]), feat(&[d1 + gap], &[x]), &spec).unwrap();
            prop_assert!(far < near);
        }
    }
}

//! Ground truth by brute force, and an MCMC baseline.
//!
//! Enumeration visits all K^N labelings in lexicographic order (node 1 most
//! significant), so results are deterministic and the MAP tie-break falls
//! out of a strict `<` comparison. The sampler uses ChaCha8 seeded from a
//! `u64` (`rand_chacha::ChaCha8Rng::seed_from_u64`), whose output stream is
//! fixed across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{CrfModel, Labeling, MarginalField};
use crate::table::Table;

/// Largest K^N that the enumeration routines accept.
pub const ENUMERATION_CAP: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    pub log_z: f64,
    pub marginals: MarginalField,
    pub map_labeling: Labeling,
    pub map_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerVariant {
    Gibbs,
    Metropolis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub variant: SamplerVariant,
}

impl SamplerConfig {
    pub fn gibbs(sweeps: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            sweeps,
            burn_in,
            seed,
            variant: SamplerVariant::Gibbs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.sweeps <= self.burn_in {
            return Err(CrfError::invalid(format!(
                "sampler needs sweeps > burn_in, got sweeps={} burn_in={}",
                self.sweeps, self.burn_in
            )));
        }
        Ok(())
    }
}

/// Returns K^N, or an error when it exceeds [`ENUMERATION_CAP`].
pub fn configuration_count(model: &CrfModel) -> Result<u64> {
    let (k, n) = (model.labels(), model.nodes());
    let too_large = || CrfError::InstanceTooLarge {
        labels: k,
        nodes: n,
        cap: ENUMERATION_CAP,
    };
    let count = u32::try_from(n)
        .ok()
        .and_then(|n| (k as u64).checked_pow(n))
        .ok_or_else(too_large)?;
    if count > ENUMERATION_CAP {
        return Err(too_large());
    }
    Ok(count)
}

/// Lexicographic odometer over {0..k}^n.
struct Odometer {
    k: usize,
    y: Vec<usize>,
    started: bool,
}

impl Odometer {
    fn new(n: usize, k: usize) -> Self {
        Self {
            k,
            y: vec![0; n],
            started: false,
        }
    }

    fn advance(&mut self) -> Option<&[usize]> {
        if !self.started {
            self.started = true;
            return Some(&self.y);
        }
        for pos in (0..self.y.len()).rev() {
            self.y[pos] += 1;
            if self.y[pos] < self.k {
                return Some(&self.y);
            }
            self.y[pos] = 0;
        }
        None
    }
}

pub fn enumerate_exact(model: &CrfModel) -> Result<ExactResult> {
    configuration_count(model)?;
    let (n, k) = (model.nodes(), model.labels());

    let mut min_energy = f64::INFINITY;
    let mut map = vec![0; n];
    let mut odo = Odometer::new(n, k);
    while let Some(y) = odo.advance() {
        let e = model.energy_unchecked(y);
        if e < min_energy {
            min_energy = e;
            map.copy_from_slice(y);
        }
    }

    let mut total = 0.0;
    let mut marg = Table::zeros(n, k);
    let mut odo = Odometer::new(n, k);
    while let Some(y) = odo.advance() {
        let w = (min_energy - model.energy_unchecked(y)).exp();
        total += w;
        for (i, &yi) in y.iter().enumerate() {
            marg.set(i, yi, marg.get(i, yi) + w);
        }
    }
    marg.as_mut_slice().iter_mut().for_each(|v| *v /= total);

    Ok(ExactResult {
        log_z: total.ln() - min_energy,
        marginals: MarginalField::from_table_unchecked(marg),
        map_labeling: Labeling::from_zero_based(map),
        map_energy: min_energy,
    })
}

/// All K^N energies in lexicographic order, with log Z, for repeated KL
/// evaluations against the same model.
#[derive(Debug, Clone)]
pub struct EnergyTable {
    nodes: usize,
    labels: usize,
    energies: Vec<f64>,
    log_z: f64,
}

impl EnergyTable {
    pub fn new(model: &CrfModel) -> Result<Self> {
        let count = configuration_count(model)? as usize;
        let (n, k) = (model.nodes(), model.labels());
        let mut energies = Vec::with_capacity(count);
        let mut odo = Odometer::new(n, k);
        while let Some(y) = odo.advance() {
            energies.push(model.energy_unchecked(y));
        }
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let total: f64 = energies.iter().map(|e| (min - e).exp()).sum();
        Ok(Self {
            nodes: n,
            labels: k,
            energies,
            log_z: total.ln() - min,
        })
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// KL(Q || P) with Q(Y) = Π_i q_i(Y_i).
    pub fn kl(&self, q: &MarginalField) -> Result<f64> {
        if (q.nodes(), q.labels()) != (self.nodes, self.labels) {
            return Err(CrfError::shape(format!(
                "marginals are {}x{}, model is {}x{}",
                q.nodes(),
                q.labels(),
                self.nodes,
                self.labels
            )));
        }
        let logq = q.table().map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
        let mut kl = 0.0;
        let mut odo = Odometer::new(self.nodes, self.labels);
        let mut idx = 0;
        while let Some(y) = odo.advance() {
            let mut log_qy = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                log_qy += logq.get(i, yi);
            }
            if log_qy > f64::NEG_INFINITY {
                kl += log_qy.exp() * (log_qy + self.energies[idx] + self.log_z);
            }
            idx += 1;
        }
        Ok(kl)
    }
}

/// KL(Q || P) by enumeration, Q fully factorized.
pub fn exact_kl(q: &MarginalField, model: &CrfModel) -> Result<f64> {
    EnergyTable::new(model)?.kl(q)
}

/// Systematic-scan MCMC estimate of the node marginals.
pub fn gibbs_sample(model: &CrfModel, cfg: &SamplerConfig) -> Result<MarginalField> {
    cfg.validate()?;
    let (n, k) = (model.nodes(), model.labels());
    let unary = model.unary().table();
    let mu = model.compatibility();
    let alpha = model.affinity();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // start from the unary argmin
    let mut y: Vec<usize> = (0..n)
        .map(|i| argmin_first(unary.row(i)))
        .collect();
    let mut counts = Table::zeros(n, k);
    let mut cond = vec![0.0; k];

    for sweep in 0..cfg.sweeps {
        for i in 0..n {
            // pair (a, b) with a < b contributes μ(y_a, y_b) α_ab
            for (l, c) in cond.iter_mut().enumerate() {
                let mut e = unary.get(i, l);
                for (j, &yj) in y.iter().enumerate() {
                    if j < i {
                        e += mu.get(yj, l) * alpha.get(j, i);
                    } else if j > i {
                        e += mu.get(l, yj) * alpha.get(i, j);
                    }
                }
                *c = e;
            }
            y[i] = match cfg.variant {
                SamplerVariant::Gibbs => sample_boltzmann(&cond, rng.random::<f64>()),
                SamplerVariant::Metropolis => {
                    let proposal = rng.random_range(0..k);
                    let delta = cond[proposal] - cond[y[i]];
                    let u: f64 = rng.random();
                    if delta <= 0.0 || u < (-delta).exp() {
                        proposal
                    } else {
                        y[i]
                    }
                }
            };
        }
        if sweep >= cfg.burn_in {
            for (i, &yi) in y.iter().enumerate() {
                counts.set(i, yi, counts.get(i, yi) + 1.0);
            }
        }
    }
    let kept = (cfg.sweeps - cfg.burn_in) as f64;
    counts.as_mut_slice().iter_mut().for_each(|c| *c /= kept);
    Ok(MarginalField::from_table_unchecked(counts))
}

/// Draws l with probability ∝ exp(-energy[l]) using the uniform variate `u`.
fn sample_boltzmann(energy: &[f64], u: f64) -> usize {
    let min = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energy.iter().map(|e| (min - e).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (l, w) in weights.iter().enumerate() {
        if target < *w {
            return l;
        }
        target -= w;
    }
    weights.len() - 1
}

pub(crate) fn argmin_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = l;
        }
    }
    best
}

//! `crfgat`: synthetic data, inference, training and algorithm comparison.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crfgat_core::io::{
    load_dataset, load_labelings, load_model, pooled_accuracy, save_dataset, save_model,
    save_predictions, write_grid_csv, write_trace_csv, AnyModel,
};
use crfgat_core::oracle::configuration_count;
use crfgat_core::{
    decode_argmax, decode_argmin, distribution_from_potentials, enumerate_exact, gat_forward,
    gen_synthetic, gibbs_energy, gibbs_sample, init_model, run_mean_field, train, CrfGatModel,
    CrfModel, GatLayerParams, KernelSpec, LabelSpace, LabeledDataset, Labeling, MarginalField,
    MeanFieldConfig, ObservedSequence, SamplerConfig, Schedule, SyntheticSpec, TrainConfig,
    UnaryClassifierParams, UnaryPotentials,
};

#[derive(Parser)]
#[command(name = "crfgat", version, about = "Mean-field CRF inference and CRF-GAT training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Gen {
        /// SyntheticSpec as a JSON file path or an inline JSON object.
        #[arg(long)]
        spec: String,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Create an initial CRF-GAT model sized for a dataset.
    Init {
        /// Dataset that fixes the label count and observation dimension.
        #[arg(long)]
        data: PathBuf,
        /// Number of attention layers (0 gives a classifier-only model).
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Tie all layers to one parameter set.
        #[arg(long)]
        shared: bool,
        /// KernelSpec as a JSON file path or inline JSON object; default is
        /// one Gaussian component with sigma_spatial 2 and sigma_appearance 1.
        #[arg(long)]
        kernel: Option<String>,
        /// Seed for parameter initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one inference algorithm and write per-item predictions.
    Infer {
        /// Model file (crf_model or crf_gat_model).
        #[arg(long)]
        model: PathBuf,
        /// Dataset file; required for CRF-GAT models, gold labels only for CRF models.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Inference algorithm.
        #[arg(long, value_enum)]
        algo: Algo,
        /// Output predictions file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: InferOpts,
        /// Per-iteration trace of item 1 as `step,value` CSV: L∞ change for
        /// mean field, max |R| per layer for gat.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// KL(Q || P) after every mean-field iteration of item 1, as CSV.
        #[arg(long)]
        kl_trace: Option<PathBuf>,
        /// Decoded grid of item 1 as a CSV matrix (grid datasets only).
        #[arg(long)]
        labels_csv: Option<PathBuf>,
    },
    /// Train a CRF-GAT model by full-batch gradient descent.
    Train {
        /// Initial model file (crf_gat_model).
        #[arg(long)]
        model: PathBuf,
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig as a JSON file path or inline JSON object.
        #[arg(long)]
        config: String,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Loss before each epoch as `step,value` CSV.
        #[arg(long)]
        loss_trace: PathBuf,
    },
    /// Run several algorithms and report one CSV row per (item, algorithm).
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated algorithms, e.g. `mf,mf-seq,gat,exact,gibbs`.
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        algos: Vec<Algo>,
        /// Output CSV: item,algo,labeling,accuracy,energy,marginal_linf_error,wall_ms.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        opts: InferOpts,
    },
    /// Print the accuracy of predictions against gold labels.
    Eval {
        /// Predictions or dataset file.
        #[arg(long)]
        pred: PathBuf,
        /// Predictions or dataset file.
        #[arg(long)]
        gold: PathBuf,
    },
}

#[derive(clap::Args, Clone, Copy)]
struct InferOpts {
    /// Mean-field iteration cap; depth of the unrolled stack for gat on a CRF model.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Mean-field convergence threshold on the L∞ change.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Seed for the sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampler sweeps, including burn-in.
    #[arg(long, default_value_t = 20_000)]
    sweeps: usize,
    /// Sampler sweeps discarded before counting.
    #[arg(long, default_value_t = 1_000)]
    burn_in: usize,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum Algo {
    /// Parallel mean field.
    Mf,
    /// Sequential (single-node) mean field.
    MfSeq,
    /// CRF-GAT forward pass.
    Gat,
    /// Exact enumeration; decodes the MAP labeling.
    Exact,
    /// Gibbs sampler; decodes the argmax of sampled marginals.
    Gibbs,
}

impl Algo {
    fn name(self) -> &'static str {
        match self {
            Algo::Mf => "mf",
            Algo::MfSeq => "mf-seq",
            Algo::Gat => "gat",
            Algo::Exact => "exact",
            Algo::Gibbs => "gibbs",
        }
    }
}

/// One inference problem: a CRF view (absent for classifier-only models),
/// the stack the gat algorithm runs, and optional gold labels.
struct Instance {
    crf: Option<CrfModel>,
    gat: CrfGatModel,
    sequence: ObservedSequence,
    unary: UnaryPotentials,
    gold: Option<Labeling>,
    grid: Option<crfgat_core::GridShape>,
}

struct Outcome {
    labeling: Labeling,
    marginals: MarginalField,
    trace: Vec<f64>,
    kl_trace: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, out } => {
            let spec: SyntheticSpec = parse_json_arg(&spec, "spec")?;
            let data = gen_synthetic(&spec)?;
            save_dataset(&out, &data)?;
        }
        Command::Init {
            data,
            depth,
            shared,
            kernel,
            seed,
            out,
        } => {
            let data = load_dataset(&data)?;
            let input_dim = data
                .observation_dim()
                .context("dataset has no items to size the model from")?;
            let kernel = match kernel {
                Some(k) => parse_json_arg(&k, "kernel")?,
                None => KernelSpec::gaussian(1.0, 2.0, 1.0),
            };
            let model = init_model(data.label_space(), input_dim, depth, &kernel, shared, seed)?;
            save_model(&out, &AnyModel::Gat(model))?;
        }
        Command::Infer {
            model,
            data,
            algo,
            out,
            opts,
            trace,
            kl_trace,
            labels_csv,
        } => {
            let instances = load_instances(&model, data.as_deref(), opts.max_iter)?;
            let mut labelings = Vec::with_capacity(instances.len());
            let mut marginals = Vec::with_capacity(instances.len());
            for (idx, inst) in instances.iter().enumerate() {
                let outcome = infer(inst, algo, &opts, idx == 0 && kl_trace.is_some())
                    .with_context(|| format!("item {}", idx + 1))?;
                if idx == 0 {
                    if let Some(path) = &trace {
                        write_trace_csv(path, &outcome.trace, 1)?;
                    }
                    if let Some(path) = &kl_trace {
                        let values = outcome.kl_trace.as_deref().context(
                            "--kl-trace needs a mean-field algorithm on an instance under the enumeration cap",
                        )?;
                        write_trace_csv(path, values, 1)?;
                    }
                    if let Some(path) = &labels_csv {
                        let grid = inst.grid.context("--labels-csv needs a grid dataset")?;
                        write_grid_csv(path, &outcome.labeling, grid)?;
                    }
                }
                labelings.push(outcome.labeling);
                marginals.push(outcome.marginals);
            }
            save_predictions(&out, &labelings, Some(&marginals))?;
        }
        Command::Train {
            model,
            data,
            config,
            out,
            loss_trace,
        } => {
            let model = match load_model(&model)? {
                AnyModel::Gat(m) => m,
                AnyModel::Crf(_) => bail!("{}: training needs a crf_gat_model", model.display()),
            };
            let data = load_dataset(&data)?;
            let cfg: TrainConfig = parse_json_arg(&config, "config")?;
            let (trained, losses) = train(&model, &data, &cfg)?;
            write_trace_csv(&loss_trace, &losses, 0)?;
            save_model(&out, &AnyModel::Gat(trained))?;
        }
        Command::Compare {
            model,
            data,
            algos,
            report,
            opts,
        } => {
            let instances = load_instances(&model, data.as_deref(), opts.max_iter)?;
            let csv = compare(&instances, &algos, &opts)?;
            fs::write(&report, csv).with_context(|| report.display().to_string())?;
        }
        Command::Eval { pred, gold } => {
            let p = load_labelings(&pred)?;
            let g = load_labelings(&gold)?;
            println!("{:?}", pooled_accuracy(&p, &g)?);
        }
    }
    Ok(())
}

/// Reads `arg` as inline JSON when it starts with `{`, otherwise as a path.
fn parse_json_arg<T: serde::de::DeserializeOwned>(arg: &str, what: &str) -> Result<T> {
    let (text, origin) = if arg.trim_start().starts_with('{') {
        (arg.to_string(), "inline JSON".to_string())
    } else {
        let text = fs::read_to_string(arg).with_context(|| format!("{what}: {arg}"))?;
        (text, arg.to_string())
    };
    serde_json::from_str(&text).with_context(|| format!("{what}: cannot parse {origin}"))
}

fn load_instances(model: &Path, data: Option<&Path>, gat_depth: usize) -> Result<Vec<Instance>> {
    let data: Option<LabeledDataset> = data.map(load_dataset).transpose()?;
    match load_model(model)? {
        AnyModel::Crf(crf) => {
            let (gold, grid) = match &data {
                None => (None, None),
                Some(d) => {
                    let item = d
                        .items()
                        .first()
                        .context("dataset has no items")?;
                    if item.gold.len() != crf.nodes() {
                        bail!(
                            "dataset item 1 has {} nodes, model has {}",
                            item.gold.len(),
                            crf.nodes()
                        );
                    }
                    (Some(item.gold.clone()), item.grid)
                }
            };
            let seq = crf.sequence().clone();
            let layer = GatLayerParams {
                compatibility: crf.compatibility().clone(),
                kernel: crf.kernel().clone(),
            };
            let classifier = UnaryClassifierParams::zeros(seq.observation_dim(), crf.labels());
            let gat = CrfGatModel::shared(crf.label_space(), layer, gat_depth, classifier)?;
            Ok(vec![Instance {
                unary: crf.unary().clone(),
                crf: Some(crf),
                gat,
                sequence: seq,
                gold,
                grid,
            }])
        }
        AnyModel::Gat(gat) => {
            let data = data.context("a CRF-GAT model needs --data")?;
            check_labels(gat.label_space(), data.label_space())?;
            data.items()
                .iter()
                .map(|item| {
                    let crf = if gat.depth() > 0 {
                        Some(gat.as_crf(&item.sequence)?)
                    } else {
                        None
                    };
                    Ok(Instance {
                        crf,
                        unary: gat.unary_potentials(&item.sequence)?,
                        gat: gat.clone(),
                        sequence: item.sequence.clone(),
                        gold: Some(item.gold.clone()),
                        grid: item.grid,
                    })
                })
                .collect()
        }
    }
}

fn check_labels(model: LabelSpace, data: LabelSpace) -> Result<()> {
    if model != data {
        bail!("model has {} labels, dataset has {}", model.len(), data.len());
    }
    Ok(())
}

fn infer(inst: &Instance, algo: Algo, opts: &InferOpts, track_kl: bool) -> Result<Outcome> {
    if algo == Algo::Gat {
        let (psi, trace) = gat_forward(&inst.gat, &inst.sequence, &inst.unary)?;
        return Ok(Outcome {
            labeling: decode_argmin(&psi),
            marginals: distribution_from_potentials(&psi),
            trace: trace.layers.iter().map(|l| l.residual.max_abs()).collect(),
            kl_trace: None,
        });
    }
    let crf = inst
        .crf
        .as_ref()
        .with_context(|| format!("--algo {} needs at least one attention layer", algo.name()))?;
    match algo {
        Algo::Mf | Algo::MfSeq => {
            let cfg = MeanFieldConfig {
                max_iter: opts.max_iter,
                tol: opts.tol,
                schedule: if algo == Algo::Mf {
                    Schedule::Parallel
                } else {
                    Schedule::Sequential
                },
                track_kl,
                ..MeanFieldConfig::default()
            };
            let (q, diag) = run_mean_field(crf, &cfg)?;
            Ok(Outcome {
                labeling: decode_argmax(&q),
                marginals: q,
                trace: diag.linf_trace,
                kl_trace: diag.kl_trace,
            })
        }
        Algo::Exact => {
            let exact = enumerate_exact(crf)?;
            Ok(Outcome {
                labeling: exact.map_labeling,
                marginals: exact.marginals,
                trace: Vec::new(),
                kl_trace: None,
            })
        }
        Algo::Gibbs => {
            let cfg = SamplerConfig::gibbs(opts.sweeps, opts.burn_in, opts.seed);
            let q = gibbs_sample(crf, &cfg)?;
            Ok(Outcome {
                labeling: decode_argmax(&q),
                marginals: q,
                trace: Vec::new(),
                kl_trace: None,
            })
        }
        Algo::Gat => unreachable!("handled above"),
    }
}

fn compare(instances: &[Instance], algos: &[Algo], opts: &InferOpts) -> Result<String> {
    let mut csv = String::from("item,algo,labeling,accuracy,energy,marginal_linf_error,wall_ms\n");
    for (idx, inst) in instances.iter().enumerate() {
        let exact = match &inst.crf {
            Some(crf) if configuration_count(crf).is_ok() => Some(enumerate_exact(crf)?),
            _ => None,
        };
        for &algo in algos {
            let start = Instant::now();
            let outcome =
                infer(inst, algo, opts, false).with_context(|| format!("item {}", idx + 1))?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let labels: Vec<String> = outcome
                .labeling
                .to_one_based()
                .iter()
                .map(usize::to_string)
                .collect();
            let acc = match &inst.gold {
                Some(g) => crfgat_core::accuracy(&outcome.labeling, g)?.to_string(),
                None => String::new(),
            };
            let energy = match &inst.crf {
                Some(crf) => gibbs_energy(&outcome.labeling, crf)?.to_string(),
                None => String::new(),
            };
            let linf = match &exact {
                Some(e) => outcome.marginals.max_abs_diff(&e.marginals)?.to_string(),
                None => String::new(),
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{:.3}",
                idx + 1,
                algo.name(),
                labels.join(" "),
                acc,
                energy,
                linf,
                wall_ms
            )?;
        }
    }
    Ok(csv)
}

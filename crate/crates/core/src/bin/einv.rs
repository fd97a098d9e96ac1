//! Command-line front end: simulate datasets, run invariance tests, learn
//! zero-shot / few-shot policies, and drive the benchmark harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use einv::bench::{self, BenchConfig};
use einv::data::{
    export_csv, export_report, import_covariates_csv, ingest_csv, BehaviorMode, PolicySpec, Subset,
};
use einv::dr::{dr_einv_test, DrConfig, PropensityKind, RegressorKind};
use einv::few_shot::few_shot_fit;
use einv::synth::{sample_dataset, ScmConfig, ScmVariant};
use einv::wald::wald_einv_test;
use einv::zero_shot::{fit_pooled_cate, zero_shot_pipeline, CateEstimator, ZeroShotConfig};

#[derive(Parser)]
#[command(
    name = "einv",
    about = "Effect-invariance tests and invariance-based policy generalization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multi-environment dataset and write it as CSV.
    Simulate {
        /// One of: intro, example1_linear, example1_nl_main, example1_nl_effect.
        #[arg(long)]
        variant: String,
        /// Comma-separated environment labels; parameters are drawn
        /// Uniform[-3,3] per label from the seed.
        #[arg(long, default_value = "0,1")]
        envs: String,
        /// Rows per environment.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// `uniform` or `logistic:c0,c1,...,cd` (intercept first).
        #[arg(long, default_value = "uniform")]
        behavior: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path; the drawn parameters are written next to it
        /// with a `.params.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an e-invariance test on a CSV dataset and write a JSON report.
    Test {
        /// `wald` or `dr`.
        #[arg(long)]
        method: String,
        /// 1-based covariate indices, e.g. "2" for x2 or "1,3"; empty for
        /// the empty subset.
        #[arg(long, default_value = "")]
        subset: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Reference-policy treatment probability for the Wald test.
        #[arg(long, default_value_t = 0.5)]
        tilde_q: f64,
        /// DR outcome regressor: `knn` or `linear`.
        #[arg(long, default_value = "knn")]
        regressor: String,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Fit a pooled logistic behavior model instead of reading p_obs.
        #[arg(long)]
        fit_propensity: bool,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a policy for an unlabeled test environment.
    ZeroShot {
        #[arg(long)]
        train: PathBuf,
        /// CSV of test-environment covariates with header x1,...,xd.
        #[arg(long)]
        test_x: PathBuf,
        /// Gating test: `wald` or `dr`.
        #[arg(long, default_value = "wald")]
        method: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Pooled CATE estimator: `linear` or `knn`.
        #[arg(long, default_value = "linear")]
        estimator: String,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        fit_propensity: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pooled CATE to a small labeled test sample.
    FewShot {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Invariant subset carried over from training (1-based indices).
        #[arg(long)]
        subset: String,
        #[arg(long)]
        fit_propensity: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark experiment from a JSON config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the CSV/JSON/SVG report.
        #[arg(long)]
        out: PathBuf,
        /// Exit with code 2 if any acceptance threshold is violated.
        #[arg(long)]
        assert: bool,
    },
}

/// Parses "1,3" (1-based, matching the x1..xd CSV headers) into a Subset.
fn parse_subset(text: &str) -> Result<Subset, String> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(Subset::empty());
    }
    let mut indices = Vec::new();
    for part in text.split(',') {
        let v: usize = part
            .trim()
            .parse()
            .map_err(|_| format!("invalid subset index `{part}`"))?;
        if v == 0 {
            return Err("subset indices are 1-based".to_string());
        }
        indices.push(v - 1);
    }
    Ok(Subset::new(indices))
}

fn parse_behavior(text: &str, d: usize) -> Result<PolicySpec, String> {
    if text == "uniform" {
        return Ok(PolicySpec::Uniform { k: 2 });
    }
    if let Some(rest) = text.strip_prefix("logistic:") {
        let coef: Vec<f64> = rest
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("invalid logistic coefficient: {e}"))?;
        if coef.len() != d + 1 {
            return Err(format!(
                "logistic behavior needs {} coefficients (intercept plus one per covariate), got {}",
                d + 1,
                coef.len()
            ));
        }
        return Ok(PolicySpec::Logistic {
            subset: Subset::full(d),
            coef,
        });
    }
    Err(format!(
        "unknown behavior `{text}`; expected `uniform` or `logistic:c0,...,cd`"
    ))
}

fn behavior_mode(fit_propensity: bool) -> BehaviorMode {
    if fit_propensity {
        BehaviorMode::FitLogistic
    } else {
        BehaviorMode::Given
    }
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            variant,
            envs,
            n,
            behavior,
            seed,
            out,
        } => {
            let variant: ScmVariant = variant.parse().map_err(|e| format!("{e}"))?;
            let labels: Vec<String> = envs
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if labels.is_empty() {
                return Err("no environment labels given".to_string());
            }
            let behavior = parse_behavior(&behavior, variant.d())?;
            let cfg = ScmConfig::draw_uniform(variant, &labels, seed).map_err(|e| e.to_string())?;
            let ds =
                sample_dataset(&cfg, &labels, n, &behavior, seed).map_err(|e| e.to_string())?;
            export_csv(&ds, &out).map_err(|e| e.to_string())?;
            let params_path = out.with_extension("params.json");
            let json = serde_json::to_string_pretty(&cfg).map_err(|e| e.to_string())?;
            std::fs::write(&params_path, json).map_err(|e| e.to_string())?;
            eprintln!(
                "wrote {} rows to {} (parameters in {})",
                ds.n(),
                out.display(),
                params_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Test {
            method,
            subset,
            alpha,
            tilde_q,
            regressor,
            split_seed,
            fit_propensity,
            input,
            out,
        } => {
            let s = parse_subset(&subset)?;
            let ds = ingest_csv(&input, None, behavior_mode(fit_propensity))
                .map_err(|e| e.to_string())?;
            let report = match method.as_str() {
                "wald" => {
                    if !(0.0 < tilde_q && tilde_q < 1.0) {
                        return Err("--tilde-q must lie strictly in (0, 1)".to_string());
                    }
                    wald_einv_test(&ds, &s, alpha, &PolicySpec::bernoulli(tilde_q))
                        .map_err(|e| e.to_string())?
                }
                "dr" => {
                    let regressor = match regressor.as_str() {
                        "knn" => RegressorKind::Knn,
                        "linear" => RegressorKind::Linear,
                        other => return Err(format!("unknown regressor `{other}`")),
                    };
                    let config = DrConfig {
                        regressor,
                        propensity: if fit_propensity {
                            PropensityKind::Logistic
                        } else {
                            PropensityKind::Given
                        },
                    };
                    dr_einv_test(&ds, &s, alpha, split_seed, &config).map_err(|e| e.to_string())?
                }
                other => return Err(format!("unknown method `{other}`")),
            };
            export_report(&report, &out).map_err(|e| e.to_string())?;
            println!(
                "S={} statistic={:.4} dof={} p={:.4} reject={}",
                report.subset, report.statistic, report.dof, report.p_value, report.reject
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ZeroShot {
            train,
            test_x,
            method,
            alpha,
            estimator,
            split_seed,
            seed,
            fit_propensity,
            out,
        } => {
            let ds = ingest_csv(&train, None, behavior_mode(fit_propensity))
                .map_err(|e| e.to_string())?;
            let x_test = import_covariates_csv(&test_x).map_err(|e| e.to_string())?;
            let mut config = match method.as_str() {
                "wald" => ZeroShotConfig::wald(alpha, seed),
                "dr" => ZeroShotConfig::dr(alpha, split_seed, seed),
                other => return Err(format!("unknown method `{other}`")),
            };
            config.estimator = match estimator.as_str() {
                "linear" => CateEstimator::LinearWls,
                "knn" => CateEstimator::DrKnn,
                other => return Err(format!("unknown estimator `{other}`")),
            };
            let report = zero_shot_pipeline(&ds, &x_test, &config).map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
            std::fs::write(&out, json).map_err(|e| e.to_string())?;
            println!("selected S={} ({} accepted sets)", report.s_star, report.accepted_sets.len());
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::FewShot {
            train,
            test,
            subset,
            fit_propensity,
            out,
        } => {
            let s = parse_subset(&subset)?;
            let ds_train = ingest_csv(&train, None, behavior_mode(fit_propensity))
                .map_err(|e| e.to_string())?;
            let ds_test = ingest_csv(&test, None, behavior_mode(fit_propensity))
                .map_err(|e| e.to_string())?;
            let tau_tr = fit_pooled_cate(&ds_train, &s, CateEstimator::LinearWls)
                .map_err(|e| e.to_string())?;
            let model = few_shot_fit(&ds_test, &tau_tr, &s).map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&model).map_err(|e| e.to_string())?;
            std::fs::write(&out, json).map_err(|e| e.to_string())?;
            println!(
                "fitted few-shot model on S={} with {} free coefficient(s)",
                s,
                model.theta_n.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            config,
            out,
            assert,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| e.to_string())?;
            let cfg: BenchConfig = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let output = bench::run(&cfg).map_err(|e| e.to_string())?;
            let files = bench::write_report(&output, &out).map_err(|e| e.to_string())?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            if assert {
                let violations = bench::threshold_violations(&output, cfg.alpha);
                if !violations.is_empty() {
                    for v in &violations {
                        eprintln!("threshold violation: {v}");
                    }
                    return Ok(ExitCode::from(2));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

//! Multi-environment structural causal model simulator with ground-truth
//! oracles: closed-form conditional treatment effects where they exist, and
//! paired Monte Carlo policy values otherwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, PolicySpec, Subset};
use crate::error::{Error, Result};
use crate::seeding;

/// Generative model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmVariant {
    /// One covariate: X = eU + ε_X, Y = 2e + X + U + T(1 + X) + ε_Y.
    Intro,
    /// Three covariates: X³ = γ³U¹ + ε, X² = γ²U² + ε, X¹ = X² + γ¹U¹ + ε,
    /// Y = T(1 + 0.5X² + 0.5U¹) + μ_e + U¹ + U² + X² + X³ + ε.
    Example1Linear,
    /// As the linear variant with −0.5·X²·X³ added to the main effect.
    Example1NlMain,
    /// As the linear variant with treatment term 1 + 0.5(X²)² + 0.5(X²)³ + 0.5U¹.
    Example1NlEffect,
}

impl ScmVariant {
    pub fn d(self) -> usize {
        match self {
            ScmVariant::Intro => 1,
            _ => 3,
        }
    }

    pub fn is_example1(self) -> bool {
        !matches!(self, ScmVariant::Intro)
    }
}

impl std::fmt::Display for ScmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScmVariant::Intro => "intro",
            ScmVariant::Example1Linear => "example1_linear",
            ScmVariant::Example1NlMain => "example1_nl_main",
            ScmVariant::Example1NlEffect => "example1_nl_effect",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intro" => Ok(ScmVariant::Intro),
            "example1_linear" => Ok(ScmVariant::Example1Linear),
            "example1_nl_main" => Ok(ScmVariant::Example1NlMain),
            "example1_nl_effect" => Ok(ScmVariant::Example1NlEffect),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Per-environment structural parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnvParams {
    Intro { e: f64 },
    Example1 { gamma1: f64, gamma2: f64, gamma3: f64, mu: f64 },
}

impl EnvParams {
    fn is_finite(&self) -> bool {
        match self {
            EnvParams::Intro { e } => e.is_finite(),
            EnvParams::Example1 {
                gamma1,
                gamma2,
                gamma3,
                mu,
            } => [gamma1, gamma2, gamma3, mu].iter().all(|v| v.is_finite()),
        }
    }

    fn matches(&self, variant: ScmVariant) -> bool {
        matches!(
            (self, variant.is_example1()),
            (EnvParams::Intro { .. }, false) | (EnvParams::Example1 { .. }, true)
        )
    }

    /// Second moments of the covariate law; equal moments ⇔ equal law
    /// (jointly Gaussian with zero mean).
    fn covariate_moments(&self) -> Vec<f64> {
        match *self {
            EnvParams::Intro { e } => vec![e * e],
            EnvParams::Example1 {
                gamma1,
                gamma2,
                gamma3,
                ..
            } => vec![gamma1 * gamma1, gamma2 * gamma2, gamma3 * gamma3, gamma1 * gamma3],
        }
    }
}

/// Simulator configuration: variant plus the labelled environment table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScmConfig {
    pub variant: ScmVariant,
    pub env_params: Vec<(String, EnvParams)>,
    pub seed: u64,
}

/// RNG stream offset for parameter drawing, distinct from sampling streams.
const PARAM_DRAW_STREAM: u64 = 0xE17A_57A6;

impl ScmConfig {
    pub fn new(
        variant: ScmVariant,
        env_params: Vec<(String, EnvParams)>,
        seed: u64,
    ) -> Result<Self> {
        for (label, p) in &env_params {
            if !p.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite parameters for environment `{label}`"
                )));
            }
            if !p.matches(variant) {
                return Err(Error::Config(format!(
                    "parameter family for `{label}` does not match variant {variant}"
                )));
            }
        }
        let mut labels: Vec<&String> = env_params.iter().map(|(l, _)| l).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != env_params.len() {
            return Err(Error::Config("duplicate environment labels".to_string()));
        }
        Ok(ScmConfig {
            variant,
            env_params,
            seed,
        })
    }

    /// Draws every structural parameter independently Uniform[−3, 3] from a
    /// dedicated sub-stream of the seed.
    pub fn draw_uniform(variant: ScmVariant, labels: &[String], seed: u64) -> Result<Self> {
        let mut rng = seeding::stream_rng(seed, PARAM_DRAW_STREAM);
        let mut u = || rng.gen_range(-3.0..3.0);
        let env_params = labels
            .iter()
            .map(|l| {
                let p = if variant.is_example1() {
                    EnvParams::Example1 {
                        gamma1: u(),
                        gamma2: u(),
                        gamma3: u(),
                        mu: u(),
                    }
                } else {
                    EnvParams::Intro { e: u() }
                };
                (l.clone(), p)
            })
            .collect();
        ScmConfig::new(variant, env_params, seed)
    }

    pub fn labels(&self) -> Vec<String> {
        self.env_params.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn params_of(&self, label: &str) -> Result<&EnvParams> {
        self.env_params
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::UnknownEnvironment(label.to_string()))
    }
}

/// One latent draw: covariates plus the unobserved confounders.
pub(crate) struct Unit {
    pub x: Vec<f64>,
    pub u1: f64,
    pub u2: f64,
}

pub(crate) fn draw_unit(variant: ScmVariant, p: &EnvParams, rng: &mut ChaCha8Rng) -> Unit {
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    match (variant, p) {
        (ScmVariant::Intro, EnvParams::Intro { e }) => {
            let u = z();
            let x = e * u + z();
            Unit {
                x: vec![x],
                u1: u,
                u2: 0.0,
            }
        }
        (
            _,
            EnvParams::Example1 {
                gamma1,
                gamma2,
                gamma3,
                ..
            },
        ) => {
            let u1 = z();
            let u2 = z();
            let x3 = gamma3 * u1 + z();
            let x2 = gamma2 * u2 + z();
            let x1 = x2 + gamma1 * u1 + z();
            Unit {
                x: vec![x1, x2, x3],
                u1,
                u2,
            }
        }
        _ => unreachable!("parameter family validated at construction"),
    }
}

/// Treatment-effect term τ_f(x, u): Y gains t · τ_f under treatment t = 1.
pub(crate) fn effect_term(variant: ScmVariant, unit: &Unit) -> f64 {
    match variant {
        ScmVariant::Intro => 1.0 + unit.x[0],
        ScmVariant::Example1Linear | ScmVariant::Example1NlMain => {
            1.0 + 0.5 * unit.x[1] + 0.5 * unit.u1
        }
        ScmVariant::Example1NlEffect => {
            let x2 = unit.x[1];
            1.0 + 0.5 * x2 * x2 + 0.5 * x2 * x2 * x2 + 0.5 * unit.u1
        }
    }
}

/// Treatment-free part of the outcome (before the outcome noise).
pub(crate) fn main_term(variant: ScmVariant, p: &EnvParams, unit: &Unit) -> f64 {
    match (variant, p) {
        (ScmVariant::Intro, EnvParams::Intro { e }) => 2.0 * e + unit.x[0] + unit.u1,
        (_, EnvParams::Example1 { mu, .. }) => {
            let base = mu + unit.u1 + unit.u2 + unit.x[1] + unit.x[2];
            if variant == ScmVariant::Example1NlMain {
                base - 0.5 * unit.x[1] * unit.x[2]
            } else {
                base
            }
        }
        _ => unreachable!("parameter family validated at construction"),
    }
}

/// Samples `n_per_env` rows in each requested environment under the given
/// behavior policy. Behavior probabilities must be strictly positive; the
/// observed-treatment probability is stored exactly in `p_obs`. The
/// unobserved confounders are never exported.
pub fn sample_dataset(
    cfg: &ScmConfig,
    envs: &[String],
    n_per_env: usize,
    behavior: &PolicySpec,
    seed: u64,
) -> Result<Dataset> {
    let mut rows = Vec::with_capacity(envs.len() * n_per_env);
    for (env_idx, label) in envs.iter().enumerate() {
        let p = cfg.params_of(label)?;
        let mut rng = seeding::stream_rng(seed, env_idx as u64);
        for _ in 0..n_per_env {
            let unit = draw_unit(cfg.variant, p, &mut rng);
            let probs = behavior.probabilities(&unit.x)?;
            if probs.iter().any(|&q| q <= 0.0) {
                return Err(Error::DegeneratePolicy);
            }
            let t = behavior.sample(&unit.x, &mut rng)?;
            let noise: f64 = rng.sample(StandardNormal);
            let y = main_term(cfg.variant, p, &unit)
                + t as f64 * effect_term(cfg.variant, &unit)
                + noise;
            rows.push(Observation {
                env: env_idx,
                x: unit.x,
                t,
                y,
                p_obs: Some(probs[t]),
            });
        }
    }
    Dataset::new(rows, cfg.variant.d(), behavior.k(), envs.to_vec(), false)
}

/// Closed-form conditional average treatment effect τ^S_e(x, t) for the
/// subsets where one exists; other subsets must use Monte Carlo.
pub fn oracle_cate(
    cfg: &ScmConfig,
    env: &str,
    x_s: &[f64],
    s: &Subset,
    t: usize,
) -> Result<f64> {
    let p = cfg.params_of(env)?;
    if x_s.len() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: s.len(),
            got: x_s.len(),
        });
    }
    if t == 0 {
        return Ok(0.0);
    }
    if t != 1 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    match (cfg.variant, s.indices()) {
        (ScmVariant::Intro, []) => Ok(1.0),
        (ScmVariant::Intro, [0]) => Ok(1.0 + x_s[0]),
        (ScmVariant::Example1Linear | ScmVariant::Example1NlMain, []) => Ok(1.0),
        (ScmVariant::Example1Linear | ScmVariant::Example1NlMain, [1]) => Ok(1.0 + 0.5 * x_s[0]),
        (ScmVariant::Example1NlEffect, []) => {
            // E[(X²)²] = γ2² + 1 and E[(X²)³] = 0, while E[U¹ | ∅] = 0.
            let EnvParams::Example1 { gamma2, .. } = p else {
                unreachable!()
            };
            Ok(1.0 + 0.5 * (gamma2 * gamma2 + 1.0))
        }
        (ScmVariant::Example1NlEffect, [1]) => {
            let x2 = x_s[0];
            Ok(1.0 + 0.5 * x2 * x2 + 0.5 * x2 * x2 * x2)
        }
        _ => Err(Error::UnsupportedSubset),
    }
}

/// Relative policy value E^{e,π}[Y] − E^{e,π_{t₀}}[Y] by paired Monte Carlo
/// with the treatment averaged out analytically; returns (value, standard
/// error). The treatment-free part of Y cancels exactly.
pub fn oracle_value(
    cfg: &ScmConfig,
    env: &str,
    policy: &PolicySpec,
    mc_n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let p = cfg.params_of(env)?;
    assert!(mc_n >= 1, "mc_n must be positive");
    oracle_value_params(cfg.variant, p, policy, mc_n, seed)
}

fn oracle_value_params(
    variant: ScmVariant,
    p: &EnvParams,
    policy: &PolicySpec,
    mc_n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = seeding::stream_rng(seed, 0);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..mc_n {
        let unit = draw_unit(variant, p, &mut rng);
        let probs = policy.probabilities(&unit.x)?;
        // E_{t∼π}[t·τ_f] − E_{t∼π_{t₀}}[t·τ_f] = Σ_{t≥1} π(t|x)·t·τ_f.
        let mut v = 0.0;
        for (t, &q) in probs.iter().enumerate().skip(1) {
            v += q * t as f64 * effect_term(variant, &unit);
        }
        sum += v;
        sumsq += v * v;
    }
    let n = mc_n as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let se = if mc_n > 1 { (var / (n - 1.0)).sqrt() } else { 0.0 };
    Ok((mean, se))
}

/// A set of environments sharing one covariate law; the test-time
/// adversary picks among them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvClass {
    pub members: Vec<EnvParams>,
}

/// Worst-case (minimum) relative value of the policy over the class, with
/// the standard error at the minimizing member. All members are evaluated
/// on common random numbers.
pub fn worst_case_value(
    cfg: &ScmConfig,
    cls: &EnvClass,
    policy: &PolicySpec,
    mc_n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if cls.members.is_empty() {
        return Err(Error::EmptyClass);
    }
    let reference = cls.members[0].covariate_moments();
    for m in &cls.members {
        if !m.matches(cfg.variant) {
            return Err(Error::Config(
                "class member family does not match variant".to_string(),
            ));
        }
        let moments = m.covariate_moments();
        if moments
            .iter()
            .zip(&reference)
            .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::CovariateLawMismatch);
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for m in &cls.members {
        let (v, se) = oracle_value_params(cfg.variant, m, policy, mc_n, seed)?;
        if best.map(|(bv, _)| v < bv).unwrap_or(true) {
            best = Some((v, se));
        }
    }
    Ok(best.expect("nonempty class"))
}

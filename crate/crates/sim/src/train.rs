//! Cross-entropy policy search, evaluation tables and parameter files.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BirthMode, EnvConfig};
use crate::env::EnvError;
use crate::policy::{
    rollout, Method, PolicyConfig, PolicyParams, RolloutOptions, RolloutRecord, FEATURE_NAMES,
    N_FEATURES, N_PARAMS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite return at iteration {iteration}, candidate {candidate}")]
    NonFinite { iteration: usize, candidate: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("parameter file: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elite: usize,
    pub iterations: usize,
    pub init_std: f64,
    /// Floor on the sampling standard deviation.
    pub min_std: f64,
    /// Episodes per candidate per iteration; all candidates share seeds.
    pub episodes_per_candidate: usize,
    /// Episodes used to score the mean after each iteration.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 32,
            elite: 8,
            iterations: 60,
            init_std: 1.0,
            min_std: 0.05,
            episodes_per_candidate: 4,
            eval_episodes: 8,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.population == 0 || self.elite == 0 || self.elite > self.population {
            return Err(TrainError::Config("need 0 < elite <= population".into()));
        }
        if self.episodes_per_candidate == 0 || self.eval_episodes == 0 {
            return Err(TrainError::Config("episode counts must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.min_std >= 0.0) {
            return Err(TrainError::Config("standard deviations must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration optimizer statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_score: f64,
    pub elite_mean_score: f64,
    /// Score of the refitted mean on the evaluation batch.
    pub mean_params_score: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    pub best: Vec<f64>,
    pub best_score: f64,
    pub history: Vec<IterationStats>,
}

/// Seed of the `k`-th episode in a batch drawn for `(base, iteration)`.
pub fn batch_seed(base: u64, iteration: usize, k: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((iteration as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Maximise `score(theta, iteration, candidate)` with a diagonal-Gaussian cross-entropy
/// search. `eval(theta)` scores each refitted mean; the best mean is
/// returned. Candidates of one iteration are scored in parallel.
pub fn cem_optimize<S, E>(
    dim: usize,
    init_mean: &[f64],
    cfg: &CemConfig,
    score: S,
    eval: E,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<CemResult, TrainError>
where
    S: Fn(&[f64], usize, usize) -> Result<f64, TrainError> + Sync,
    E: Fn(&[f64]) -> Result<f64, TrainError>,
{
    cfg.validate()?;
    assert_eq!(init_mean.len(), dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = init_mean.to_vec();
    let mut std = vec![cfg.init_std; dim];
    let mut best = mean.clone();
    let mut best_score = eval(&mean)?;
    if !best_score.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: 0,
            candidate: 0,
        });
    }
    let mut history = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let population: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..dim)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean[i] + std[i] * z
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<f64> = population
            .par_iter()
            .enumerate()
            .map(|(c, theta)| score(theta, iteration, c))
            .collect::<Result<_, _>>()?;
        if let Some(candidate) = scores.iter().position(|s| !s.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration,
                candidate,
            });
        }
        let mut order: Vec<usize> = (0..cfg.population).collect();
        // stable: equal scores keep population order
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let elite = &order[..cfg.elite];
        let k = cfg.elite as f64;
        for i in 0..dim {
            let m = elite.iter().map(|&e| population[e][i]).sum::<f64>() / k;
            let v = elite
                .iter()
                .map(|&e| (population[e][i] - m).powi(2))
                .sum::<f64>()
                / k;
            mean[i] = m;
            std[i] = v.sqrt().max(cfg.min_std);
        }
        let mean_params_score = eval(&mean)?;
        if !mean_params_score.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                candidate: cfg.population,
            });
        }
        if mean_params_score > best_score {
            best_score = mean_params_score;
            best = mean.clone();
        }
        let stats = IterationStats {
            iteration,
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            elite_mean_score: elite.iter().map(|&e| scores[e]).sum::<f64>() / k,
            mean_params_score,
            mean_std: std.iter().sum::<f64>() / dim as f64,
        };
        on_iteration(&stats);
        history.push(stats);
    }
    Ok(CemResult {
        best,
        best_score,
        history,
    })
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_len: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub best_score: f64,
    pub curve: Vec<CurvePoint>,
    pub history: Vec<IterationStats>,
}

/// Train `method` with the cross-entropy search. Every training episode is
/// passed to `on_episode` in a deterministic order once its iteration ends.
pub fn train(
    env_cfg: &EnvConfig,
    pcfg: &PolicyConfig,
    method: Method,
    cem: &CemConfig,
    opts: RolloutOptions,
    mut on_episode: impl FnMut(&RolloutRecord),
) -> Result<TrainOutcome, TrainError> {
    if !method.is_learned() {
        return Ok(TrainOutcome {
            params: PolicyParams::zeros(),
            best_score: f64::NAN,
            curve: Vec::new(),
            history: Vec::new(),
        });
    }
    let eval_seeds: Vec<u64> = (0..cem.eval_episodes)
        .map(|k| batch_seed(cem.seed ^ 0x5eed, usize::MAX, k))
        .collect();
    let episodes = std::sync::Mutex::new(Vec::<(usize, RolloutRecord)>::new());

    let score = |theta: &[f64], iteration: usize, candidate: usize| -> Result<f64, TrainError> {
        let params = PolicyParams::from_slice(theta);
        let mut total = 0.0;
        for k in 0..cem.episodes_per_candidate {
            let seed = batch_seed(cem.seed, iteration, k);
            let rec = rollout(env_cfg, pcfg, method, &params, seed, opts)?;
            total += rec.discounted_return;
            episodes
                .lock()
                .expect("episode buffer")
                .push((candidate * cem.episodes_per_candidate + k, rec));
        }
        Ok(total / cem.episodes_per_candidate as f64)
    };
    let eval = |theta: &[f64]| -> Result<f64, TrainError> {
        let params = PolicyParams::from_slice(theta);
        let recs: Vec<RolloutRecord> = eval_seeds
            .par_iter()
            .map(|&s| rollout(env_cfg, pcfg, method, &params, s, RolloutOptions::default()))
            .collect::<Result<_, _>>()?;
        Ok(recs.iter().map(|r| r.discounted_return).sum::<f64>() / recs.len() as f64)
    };

    let mut curve = Vec::new();
    let result = cem_optimize(N_PARAMS, &vec![0.0; N_PARAMS], cem, score, eval, |stats| {
        let mut batch = std::mem::take(&mut *episodes.lock().expect("episode buffer"));
        batch.sort_by_key(|(i, _)| *i);
        let n = batch.len().max(1) as f64;
        curve.push(CurvePoint {
            iteration: stats.iteration,
            mean_len: batch.iter().map(|(_, r)| r.length as f64).sum::<f64>() / n,
            mean_reward: batch.iter().map(|(_, r)| r.discounted_return).sum::<f64>() / n,
        });
        log::info!(
            "{} iter {:>3}: len {:.1} reward {:.1} mean-params {:.1}",
            method.name(),
            stats.iteration,
            curve.last().expect("curve point").mean_len,
            curve.last().expect("curve point").mean_reward,
            stats.mean_params_score
        );
        for (_, rec) in &batch {
            on_episode(rec);
        }
    })?;
    Ok(TrainOutcome {
        params: PolicyParams::from_slice(&result.best),
        best_score: result.best_score,
        curve,
        history: result.history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub method: String,
    pub scenario: String,
    pub birth_mode: String,
    pub mean_len: f64,
    pub mean_reward: f64,
    pub success_pct: f64,
    #[serde(skip)]
    pub median_len: f64,
    #[serde(skip)]
    pub fallback_steps: usize,
    #[serde(skip)]
    pub total_steps: usize,
}

pub fn birth_mode_label(cfg: &EnvConfig) -> String {
    let m = |b: BirthMode| match b {
        BirthMode::Fixed => "fix",
        BirthMode::Random => "rand",
    };
    format!("{}-cam/{}-ee", m(cfg.camera.birth), m(cfg.ee.birth))
}

/// Aggregate rollouts into one table row.
pub fn metrics_from_records(
    records: &[RolloutRecord],
    method: &Method,
    cfg: &EnvConfig,
) -> EvalMetrics {
    let n = records.len().max(1) as f64;
    let mut lengths: Vec<f64> = records.iter().map(|r| r.length as f64).collect();
    lengths.sort_by(f64::total_cmp);
    let median_len = match lengths.len() {
        0 => f64::NAN,
        l if l % 2 == 1 => lengths[l / 2],
        l => 0.5 * (lengths[l / 2 - 1] + lengths[l / 2]),
    };
    EvalMetrics {
        method: method.name(),
        scenario: cfg.scenario.name().into(),
        birth_mode: birth_mode_label(cfg),
        mean_len: records.iter().map(|r| r.length as f64).sum::<f64>() / n,
        mean_reward: records.iter().map(|r| r.discounted_return).sum::<f64>() / n,
        success_pct: 100.0 * records.iter().filter(|r| r.success).count() as f64 / n,
        median_len,
        fallback_steps: records.iter().map(|r| r.fallback_steps).sum(),
        total_steps: records.iter().map(|r| r.length).sum(),
    }
}

/// Roll out `params` on every seed, in parallel, keeping seed order.
pub fn evaluate(
    env_cfg: &EnvConfig,
    pcfg: &PolicyConfig,
    method: Method,
    params: &PolicyParams,
    seeds: &[u64],
    opts: RolloutOptions,
) -> Result<(EvalMetrics, Vec<RolloutRecord>), TrainError> {
    let records: Vec<RolloutRecord> = seeds
        .par_iter()
        .map(|&s| rollout(env_cfg, pcfg, method, params, s, opts))
        .collect::<Result<_, _>>()?;
    Ok((metrics_from_records(&records, &method, env_cfg), records))
}

/// Evaluation seeds disjoint from training batches.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n).map(|k| base.wrapping_mul(1_000_003).wrapping_add(10_000 + k as u64)).collect()
}

pub fn write_metrics_csv<W: Write>(rows: &[EvalMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    iteration: usize,
    method: &'a str,
    scenario: &'a str,
    birth_mode: &'a str,
    mean_len: f64,
    mean_reward: f64,
}

pub fn write_curve_csv<W: Write>(
    curve: &[CurvePoint],
    method: &Method,
    cfg: &EnvConfig,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (name, birth) = (method.name(), birth_mode_label(cfg));
    for p in curve {
        w.serialize(CurveRow {
            iteration: p.iteration,
            method: &name,
            scenario: cfg.scenario.name(),
            birth_mode: &birth,
            mean_len: p.mean_len,
            mean_reward: p.mean_reward,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Hash of everything that shapes a trained policy's behaviour.
pub fn config_hash(env_cfg: &EnvConfig, pcfg: &PolicyConfig, method: &Method) -> String {
    let mut h = Sha256::new();
    h.update(env_cfg.to_toml_string());
    h.update(serde_json::to_string(pcfg).expect("policy config serializes"));
    h.update(serde_json::to_string(method).expect("method serializes"));
    hex::encode(h.finalize())
}

/// Serialized policy parameters: one named array per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub method: Method,
    pub features: Vec<String>,
    pub direction: Vec<f64>,
    pub step: Vec<f64>,
    pub ee_x: Vec<f64>,
    pub ee_y: Vec<f64>,
    pub ee_z: Vec<f64>,
    pub config_hash: String,
}

impl ParamsFile {
    pub fn new(params: &PolicyParams, method: Method, hash: String) -> Self {
        Self {
            method,
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            direction: params.direction_weights().to_vec(),
            step: params.step_weights().to_vec(),
            ee_x: params.ee_weights(0).to_vec(),
            ee_y: params.ee_weights(1).to_vec(),
            ee_z: params.ee_weights(2).to_vec(),
            config_hash: hash,
        }
    }

    pub fn params(&self) -> Result<PolicyParams, TrainError> {
        let heads = [&self.direction, &self.step, &self.ee_x, &self.ee_y, &self.ee_z];
        if heads.iter().any(|h| h.len() != N_FEATURES) {
            return Err(TrainError::Params(format!("every head needs {N_FEATURES} weights")));
        }
        let theta: Vec<f64> = heads.iter().flat_map(|h| h.iter().copied()).collect();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Params("non-finite weight".into()));
        }
        Ok(PolicyParams::from_slice(&theta))
    }
}

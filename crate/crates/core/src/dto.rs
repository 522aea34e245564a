//! Distance threshold calibration.
//!
//! For each level `k < N`, Hamming distances of same-identity ("relevant") and
//! different-identity ("non-relevant") pairs of a validation codebook are
//! modeled as two Gaussians. Passing every item within distance `t` to the
//! next stage then has an expected recall `R = CDF_r(t)` and precision
//! `P = CDF_r(t) / (CDF_r(t) + rho * CDF_n(t))`, where `rho` is the ratio of
//! sampled non-relevant to relevant pairs. The threshold `t_{k+1}` is the integer in
//! `0..=l_k` maximizing `F_beta = (1 + beta^2) P R / (beta^2 P + R)`; larger
//! `beta` favors recall (accuracy) over precision (speed).

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{MultiLevelCodebook, ThresholdSet, JUNK_PERSON_ID};
use crate::error::{Error, Result};
use crate::hamming::hamming_words;
use crate::par::*;
use crate::synth::mix_seed;

/// Lower bound on fitted standard deviations, in bits.
pub const SIGMA_FLOOR: f64 = 0.5;
/// Default per-class cap on sampled pairs.
pub const DEFAULT_MAX_PAIRS: usize = 1_000_000;
pub const DEFAULT_SEED: u64 = 20_200_817;

/// Pair distances at one level of a validation codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistanceSample {
    pub relevant: Vec<u32>,
    pub nonrelevant: Vec<u32>,
    pub level_length: usize,
    /// Pairs of each class available before sampling.
    pub relevant_total: u64,
    pub nonrelevant_total: u64,
}

/// Items sorted by identity, with per-position pair counts.
struct PairIndex {
    /// Item indices grouped by person id.
    items: Vec<usize>,
    /// Exclusive end (in `items`) of the group holding each position.
    group_end: Vec<usize>,
    /// `rel_prefix[p]` = relevant pairs whose first member sits before position `p`.
    rel_prefix: Vec<u64>,
    nonrel_prefix: Vec<u64>,
}

impl PairIndex {
    fn new(person_ids: &[u32]) -> Self {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in person_ids.iter().enumerate() {
            if id != JUNK_PERSON_ID {
                groups.entry(id).or_default().push(i);
            }
        }
        let n: usize = groups.values().map(Vec::len).sum();
        let mut items = Vec::with_capacity(n);
        let mut group_end = Vec::with_capacity(n);
        for g in groups.values() {
            items.extend_from_slice(g);
            let end = items.len();
            group_end.extend(std::iter::repeat_n(end, g.len()));
        }
        let mut rel_prefix = Vec::with_capacity(n + 1);
        let mut nonrel_prefix = Vec::with_capacity(n + 1);
        let (mut r, mut nr) = (0u64, 0u64);
        rel_prefix.push(0);
        nonrel_prefix.push(0);
        for (p, &end) in group_end.iter().enumerate() {
            r += (end - p - 1) as u64;
            nr += (n - end) as u64;
            rel_prefix.push(r);
            nonrel_prefix.push(nr);
        }
        Self {
            items,
            group_end,
            rel_prefix,
            nonrel_prefix,
        }
    }

    fn relevant_total(&self) -> u64 {
        *self.rel_prefix.last().unwrap()
    }

    fn nonrelevant_total(&self) -> u64 {
        *self.nonrel_prefix.last().unwrap()
    }

    /// The `idx`-th pair of a class: the first member is the position whose
    /// prefix range holds `idx`; the partner is `offset` steps into the range
    /// of eligible later positions (same group, or all later groups).
    fn pair(&self, prefix: &[u64], idx: u64, relevant: bool) -> (usize, usize) {
        let p = prefix.partition_point(|&c| c <= idx) - 1;
        let offset = (idx - prefix[p]) as usize;
        let partner = if relevant {
            p + 1 + offset
        } else {
            self.group_end[p] + offset
        };
        (self.items[p], self.items[partner])
    }

    fn sample(&self, relevant: bool, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
        let (prefix, total) = if relevant {
            (&self.rel_prefix, self.relevant_total())
        } else {
            (&self.nonrel_prefix, self.nonrelevant_total())
        };
        let picks: Vec<u64> = if total <= max_pairs as u64 {
            (0..total).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = usize::try_from(total).expect("pair count fits in usize");
            let mut v: Vec<u64> = index::sample(&mut rng, total, max_pairs)
                .into_iter()
                .map(|i| i as u64)
                .collect();
            v.sort_unstable();
            v
        };
        picks
            .into_iter()
            .map(|i| self.pair(prefix, i, relevant))
            .collect()
    }
}

/// Hamming distances of relevant and non-relevant pairs at 1-based `level`.
///
/// Each class uses all of its pairs when there are at most `max_pairs` of
/// them, otherwise `max_pairs` pairs drawn uniformly without replacement.
/// Items with the junk person id are ignored.
pub fn collect_pair_distances(
    cb: &MultiLevelCodebook,
    level: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<PairDistanceSample> {
    let levels = cb.schedule.levels();
    if level == 0 || level > levels {
        return Err(Error::LevelOutOfRange { level, levels });
    }
    let index = PairIndex::new(&cb.person_ids);
    if index.relevant_total() == 0 {
        return Err(Error::NoRelevantPairs);
    }
    if index.nonrelevant_total() == 0 {
        return Err(Error::NoNonRelevantPairs);
    }
    let m = cb.level(level);
    let distances = |pairs: Vec<(usize, usize)>| -> Vec<u32> {
        pairs
            .par_iter()
            .map(|&(a, b)| hamming_words(m.row(a), m.row(b)))
            .collect()
    };
    let relevant = distances(index.sample(true, max_pairs, mix_seed(seed, level as u64, 0)));
    let nonrelevant = distances(index.sample(false, max_pairs, mix_seed(seed, level as u64, 1)));
    Ok(PairDistanceSample {
        relevant,
        nonrelevant,
        level_length: m.length(),
        relevant_total: index.relevant_total(),
        nonrelevant_total: index.nonrelevant_total(),
    })
}

/// Maximum-likelihood Gaussian fit: sample mean and population standard
/// deviation, the latter floored at [`SIGMA_FLOOR`].
pub fn fit_gaussian(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt().max(SIGMA_FLOOR)))
}

/// Normal CDF `(1 + erf((t - u) / (sigma sqrt 2))) / 2`, evaluated through
/// `erfc` so the lower tail keeps its relative precision.
pub fn gaussian_cdf(t: f64, u: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma {sigma} must be > 0")));
    }
    Ok(normal_cdf(t, u, sigma))
}

#[inline]
fn normal_cdf(t: f64, u: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc(-(t - u) / (sigma * std::f64::consts::SQRT_2))
}

fn normal_sf(t: f64, u: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc((t - u) / (sigma * std::f64::consts::SQRT_2))
}

/// Gaussian models of relevant and non-relevant pair distances at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPairModel {
    pub u_r: f64,
    pub sigma_r: f64,
    pub u_n: f64,
    pub sigma_n: f64,
    pub n_r: usize,
    pub n_n: usize,
    /// Non-relevant to relevant pair ratio.
    pub rho: f64,
}

impl GaussianPairModel {
    pub fn new(u_r: f64, sigma_r: f64, u_n: f64, sigma_n: f64, rho: f64) -> Result<Self> {
        let m = Self {
            u_r,
            sigma_r,
            u_n,
            sigma_n,
            n_r: 0,
            n_n: 0,
            rho,
        };
        m.check()?;
        Ok(m)
    }

    /// Fits both classes. `rho` is `n_n / n_r`, the ratio of sampled pairs.
    pub fn fit(sample: &PairDistanceSample) -> Result<Self> {
        let as_f64 = |v: &[u32]| v.iter().map(|&d| d as f64).collect::<Vec<_>>();
        let (u_r, sigma_r) = fit_gaussian(&as_f64(&sample.relevant))?;
        let (u_n, sigma_n) = fit_gaussian(&as_f64(&sample.nonrelevant))?;
        let m = Self {
            u_r,
            sigma_r,
            u_n,
            sigma_n,
            n_r: sample.relevant.len(),
            n_n: sample.nonrelevant.len(),
            rho: sample.nonrelevant.len() as f64 / sample.relevant.len() as f64,
        };
        m.check()?;
        if m.u_r >= m.u_n {
            log::warn!(
                "relevant pairs are not closer than non-relevant ones (u_r = {:.2}, u_n = {:.2})",
                m.u_r,
                m.u_n
            );
        }
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let finite = [self.u_r, self.sigma_r, self.u_n, self.sigma_n, self.rho]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.sigma_r <= 0.0 || self.sigma_n <= 0.0 || self.rho <= 0.0 {
            return Err(Error::InvalidInput(format!("invalid pair model {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FormulaMode {
    /// F-beta from precision and recall with Gaussian CDF counts.
    #[default]
    Derived,
    /// `CDF_r (beta^2 + 1) / (CDF_n + CDF_r + beta^2 (1 - CDF_n + CDF_r))`,
    /// kept for comparison experiments. It does not reach 1 under perfect
    /// separation.
    PaperVerbatim,
}

/// How non-relevant pairs are weighted against relevant ones in precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Use the model's pair-count ratio `rho`.
    #[default]
    PairCounts,
    /// Treat both classes as equally frequent (`rho = 1`).
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FBetaConfig {
    pub beta: f64,
    pub formula_mode: FormulaMode,
    pub class_weighting: ClassWeighting,
}

impl Default for FBetaConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            formula_mode: FormulaMode::Derived,
            class_weighting: ClassWeighting::PairCounts,
        }
    }
}

impl FBetaConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "beta {} must be > 0",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Expected F-beta of passing every item within distance `t`.
pub fn f_beta_score(t: i64, model: &GaussianPairModel, cfg: &FBetaConfig) -> f64 {
    let key = score_key(t, model, cfg);
    let total = key.base + key.excess;
    match cfg.formula_mode {
        FormulaMode::Derived => 1.0 / (1.0 + total),
        FormulaMode::PaperVerbatim => 1.0 / total,
    }
}

/// A decreasing function of F-beta, split as `base + excess`.
///
/// Above the non-relevant mean both CDFs approach 1 and F flattens to its
/// limit, so there `base` is that limit and `excess` is the remainder written
/// in upper-tail probabilities, which keep their relative precision. Below
/// it `excess` is 0.
#[derive(Debug, Clone, Copy)]
struct ScoreKey {
    base: f64,
    excess: f64,
}

impl ScoreKey {
    fn better_than(&self, other: &ScoreKey) -> bool {
        if self.base == other.base {
            self.excess < other.excess
        } else {
            self.base + self.excess < other.base + other.excess
        }
    }
}

/// `1/F - 1` for the derived score and `1/F` for the verbatim one.
fn score_key(t: i64, model: &GaussianPairModel, cfg: &FBetaConfig) -> ScoreKey {
    let t = t as f64;
    let cdf_r = normal_cdf(t, model.u_r, model.sigma_r);
    if cdf_r <= 0.0 {
        return ScoreKey {
            base: f64::INFINITY,
            excess: 0.0,
        };
    }
    let tail_r = normal_sf(t, model.u_r, model.sigma_r);
    let cdf_n = normal_cdf(t, model.u_n, model.sigma_n);
    let tail_n = normal_sf(t, model.u_n, model.sigma_n);
    let upper = cdf_n >= 0.5;
    let b2 = cfg.beta * cfg.beta;
    match cfg.formula_mode {
        FormulaMode::Derived => {
            // 1/F - 1 = (b2 (1/R - 1) + (1/P - 1)) / (1 + b2)
            let rho = match cfg.class_weighting {
                ClassWeighting::PairCounts => model.rho,
                ClassWeighting::Equal => 1.0,
            };
            let k = 1.0 + b2;
            if upper {
                ScoreKey {
                    base: rho / k,
                    excess: ((b2 + rho) * tail_r - rho * tail_n) / (k * cdf_r),
                }
            } else {
                ScoreKey {
                    base: (b2 * tail_r + rho * cdf_n) / (k * cdf_r),
                    excess: 0.0,
                }
            }
        }
        FormulaMode::PaperVerbatim => {
            let k = b2 + 1.0;
            if upper {
                ScoreKey {
                    base: (2.0 + b2) / k,
                    excess: ((b2 - 1.0) * tail_n + tail_r) / (k * cdf_r),
                }
            } else {
                ScoreKey {
                    base: (cdf_n + cdf_r + b2 * (1.0 - cdf_n + cdf_r)) / (k * cdf_r),
                    excess: 0.0,
                }
            }
        }
    }
}

/// Integer threshold in `0..=level_length` with the highest F-beta; the
/// first (smallest) one wins ties.
pub fn optimize_threshold(
    model: &GaussianPairModel,
    cfg: &FBetaConfig,
    level_length: usize,
) -> usize {
    let mut best = (0usize, score_key(0, model, cfg));
    for t in 1..=level_length {
        let key = score_key(t as i64, model, cfg);
        if key.better_than(&best.1) {
            best = (t, key);
        }
    }
    best.0
}

/// Thresholds plus the per-level models they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: ThresholdSet,
    pub models: Vec<GaussianPairModel>,
}

/// Calibrates `t_2..t_N` on a validation codebook.
pub fn calibrate(
    validation: &MultiLevelCodebook,
    cfg: &FBetaConfig,
    max_pairs: usize,
    seed: u64,
) -> Result<ThresholdSet> {
    calibrate_detailed(validation, cfg, max_pairs, seed).map(|c| c.thresholds)
}

pub fn calibrate_detailed(
    validation: &MultiLevelCodebook,
    cfg: &FBetaConfig,
    max_pairs: usize,
    seed: u64,
) -> Result<Calibration> {
    cfg.check()?;
    let levels = validation.schedule.levels();
    if levels < 2 {
        return Err(Error::InvalidInput(
            "calibration needs at least two levels".into(),
        ));
    }
    let mut thresholds = Vec::with_capacity(levels - 1);
    let mut models = Vec::with_capacity(levels - 1);
    for k in 1..levels {
        let sample = collect_pair_distances(validation, k, max_pairs, seed)?;
        let model = GaussianPairModel::fit(&sample)?;
        let t = optimize_threshold(&model, cfg, sample.level_length);
        log::debug!("level {k}: {model:?} -> t_{} = {t}", k + 1);
        thresholds.push(t as i64);
        models.push(model);
    }
    Ok(Calibration {
        thresholds: ThresholdSet::new(&validation.schedule, thresholds, cfg.beta)?,
        models,
    })
}

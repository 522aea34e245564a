//! Retrieval accuracy (CMC, mAP) and query timing.
//!
//! Follows the single-query person re-identification protocol: gallery items
//! that share both identity and camera with the query are ignored, as are
//! junk items. A query with no remaining true match is skipped and counted.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{QueryCodes, RankedResult, SearchMode, SearchScratch};
use crate::codebook::{MultiLevelCodebook, ThresholdSet, JUNK_PERSON_ID};
use crate::error::{Error, Result};
use crate::par::*;

/// Queries run and discarded before timing starts.
pub const WARMUP_QUERIES: usize = 10;
/// Fewest timed queries for a reportable mean.
pub const MIN_TIMED_QUERIES: usize = 100;

/// Gallery items that count for a query.
pub fn valid_gallery_mask(
    query_id: u32,
    query_cam: u16,
    gallery_ids: &[u32],
    gallery_cams: &[u16],
) -> Result<Vec<bool>> {
    if gallery_ids.len() != gallery_cams.len() {
        return Err(Error::LengthMismatch {
            left: gallery_ids.len(),
            right: gallery_cams.len(),
        });
    }
    Ok(gallery_ids
        .iter()
        .zip(gallery_cams)
        .map(|(&id, &cam)| id != JUNK_PERSON_ID && !(id == query_id && cam == query_cam))
        .collect())
}

/// Mean of precision@rank over the relevant items of `order`.
pub fn average_precision(order: &[u32], relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &g) in order.iter().enumerate() {
        if relevance[g as usize] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevantItems);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rank1: f64,
    /// `cmc_curve[r]`: share of evaluated queries with a true match in the top `r + 1`.
    pub cmc_curve: Vec<f64>,
    pub map: f64,
    pub mean_query_time: Duration,
    pub per_stage_mean_times: Vec<Duration>,
    pub evaluated_queries: usize,
    /// Queries with no valid true match in the gallery.
    pub skipped_queries: usize,
}

struct QueryScore {
    first_hit: usize,
    ap: f64,
}

fn score_query(
    result: &RankedResult,
    gallery: &MultiLevelCodebook,
    query_id: u32,
    query_cam: u16,
) -> Result<Option<QueryScore>> {
    let mask = valid_gallery_mask(
        query_id,
        query_cam,
        &gallery.person_ids,
        &gallery.camera_ids,
    )?;
    let relevance: Vec<bool> = gallery
        .person_ids
        .iter()
        .zip(&mask)
        .map(|(&id, &ok)| ok && id == query_id)
        .collect();
    let kept: Vec<u32> = result
        .order
        .iter()
        .copied()
        .filter(|&g| mask[g as usize])
        .collect();
    let Some(first_hit) = kept.iter().position(|&g| relevance[g as usize]) else {
        return Ok(None);
    };
    let ap = average_precision(&kept, &relevance)?;
    Ok(Some(QueryScore { first_hit, ap }))
}

/// Aggregates accuracy and timing over one result per query.
pub fn evaluate(
    results: &[RankedResult],
    gallery: &MultiLevelCodebook,
    query_ids: &[u32],
    query_cams: &[u16],
) -> Result<EvalOutcome> {
    if results.len() != query_ids.len() || query_ids.len() != query_cams.len() {
        return Err(Error::InvalidInput(format!(
            "{} results for {} query ids and {} query cameras",
            results.len(),
            query_ids.len(),
            query_cams.len()
        )));
    }
    let n = gallery.n_items();
    if let Some(r) = results.iter().find(|r| r.order.len() != n) {
        return Err(Error::LengthMismatch {
            left: r.order.len(),
            right: n,
        });
    }
    let scores: Vec<Result<Option<QueryScore>>> = (0..results.len())
        .into_par_iter()
        .map(|i| score_query(&results[i], gallery, query_ids[i], query_cams[i]))
        .collect();
    let mut hits_at = vec![0usize; n.max(1)];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for s in scores {
        match s? {
            Some(s) => {
                hits_at[s.first_hit] += 1;
                ap_sum += s.ap;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    let mut cmc_curve = Vec::with_capacity(hits_at.len());
    let mut acc = 0usize;
    for h in hits_at {
        acc += h;
        cmc_curve.push(if evaluated == 0 {
            0.0
        } else {
            acc as f64 / evaluated as f64
        });
    }
    let map = if evaluated == 0 {
        0.0
    } else {
        ap_sum / evaluated as f64
    };

    let (mean_query_time, per_stage_mean_times) = mean_times(results);
    Ok(EvalOutcome {
        rank1: cmc_curve[0],
        cmc_curve,
        map,
        mean_query_time,
        per_stage_mean_times,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}

fn mean_times(results: &[RankedResult]) -> (Duration, Vec<Duration>) {
    if results.is_empty() {
        return (Duration::ZERO, Vec::new());
    }
    let total: Duration = results.iter().map(|r| r.total_time).sum();
    let stages = results
        .iter()
        .map(|r| r.stage_times.len())
        .max()
        .unwrap_or(0);
    let per_stage = (0..stages)
        .map(|k| {
            let times: Vec<Duration> = results
                .iter()
                .filter_map(|r| r.stage_times.get(k).copied())
                .collect();
            times.iter().sum::<Duration>() / times.len() as u32
        })
        .collect();
    (total / results.len() as u32, per_stage)
}

/// Runs every query on the calling thread, after discarding
/// [`WARMUP_QUERIES`] warm-up runs, so recorded timings are not skewed by
/// cold caches or by parallel workers.
pub fn timed_search(
    queries: &MultiLevelCodebook,
    gallery: &MultiLevelCodebook,
    mode: &SearchMode,
) -> Result<Vec<RankedResult>> {
    let n = queries.n_items();
    if n < MIN_TIMED_QUERIES {
        log::warn!("only {n} timed queries, fewer than {MIN_TIMED_QUERIES}");
    }
    let mut scratch = SearchScratch::new();
    for i in 0..WARMUP_QUERIES.min(n) {
        mode.run(
            &QueryCodes::from_codebook(queries, i),
            gallery,
            &mut scratch,
        )?;
    }
    (0..n)
        .map(|i| {
            mode.run(
                &QueryCodes::from_codebook(queries, i),
                gallery,
                &mut scratch,
            )
        })
        .collect()
}

/// Rounds used by [`paired_timing`] in the benchmark experiments.
pub const PAIRED_ROUNDS: usize = 5;

/// Mean per-query time of one search mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTiming {
    pub mean_query_time: Duration,
    pub per_stage_mean_times: Vec<Duration>,
}

/// Times several modes on the same queries for a fair comparison.
///
/// Each query runs every mode back to back, in a freshly shuffled order,
/// `rounds` times. A query's time under a mode is its median over the rounds, so
/// machine-wide slowdowns hit all modes alike. Single-threaded, with
/// [`WARMUP_QUERIES`] discarded warm-up queries per mode.
pub fn paired_timing(
    queries: &MultiLevelCodebook,
    gallery: &MultiLevelCodebook,
    modes: &[SearchMode],
    rounds: usize,
) -> Result<Vec<ModeTiming>> {
    let n = queries.n_items();
    if n < MIN_TIMED_QUERIES {
        log::warn!("only {n} timed queries, fewer than {MIN_TIMED_QUERIES}");
    }
    if modes.is_empty() || n == 0 {
        return Ok(vec![
            ModeTiming {
                mean_query_time: Duration::ZERO,
                per_stage_mean_times: Vec::new(),
            };
            modes.len()
        ]);
    }
    let rounds = rounds.max(1);
    let m = modes.len();
    let mut scratch = SearchScratch::new();
    for i in 0..WARMUP_QUERIES.min(n) {
        let q = QueryCodes::from_codebook(queries, i);
        for mode in modes {
            mode.run(&q, gallery, &mut scratch)?;
        }
    }
    // samples[mode][query][round] = (total, per stage)
    let mut samples = vec![vec![Vec::with_capacity(rounds); n]; m];
    // a fixed order would always put the same mode after the one that
    // evicts the cache
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a11);
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..rounds {
        for i in 0..n {
            let q = QueryCodes::from_codebook(queries, i);
            order.shuffle(&mut rng);
            for &mode in &order {
                let r = modes[mode].run(&q, gallery, &mut scratch)?;
                samples[mode][i].push((r.total_time, r.stage_times));
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|per_query| {
            let medians: Vec<RankedResult> = per_query
                .into_iter()
                .map(|mut runs| {
                    runs.sort_by_key(|r| r.0);
                    let (total_time, stage_times) = runs.swap_remove(runs.len() / 2);
                    RankedResult {
                        order: Vec::new(),
                        stage_candidate_counts: Vec::new(),
                        stage_times,
                        total_time,
                    }
                })
                .collect();
            let (mean_query_time, per_stage_mean_times) = mean_times(&medians);
            ModeTiming {
                mean_query_time,
                per_stage_mean_times,
            }
        })
        .collect())
}

/// JSON report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    /// CMC curve truncated to the first `cmc_depth` ranks.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub mean_query_time_s: f64,
    pub per_stage: Vec<f64>,
    pub gallery_size: usize,
    pub lengths: Vec<usize>,
    pub thresholds: Option<Vec<i64>>,
    pub beta: Option<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn new(
        outcome: &EvalOutcome,
        gallery: &MultiLevelCodebook,
        thresholds: Option<&ThresholdSet>,
        cmc_depth: usize,
    ) -> Self {
        Self {
            rank1: outcome.rank1,
            cmc: outcome.cmc_curve.iter().take(cmc_depth).copied().collect(),
            map: outcome.map,
            mean_query_time_s: outcome.mean_query_time.as_secs_f64(),
            per_stage: outcome
                .per_stage_mean_times
                .iter()
                .map(Duration::as_secs_f64)
                .collect(),
            gallery_size: gallery.n_items(),
            lengths: gallery.schedule.lengths().to_vec(),
            thresholds: thresholds.map(|t| t.thresholds.clone()),
            beta: thresholds.and_then(|t| t.beta),
            evaluated_queries: outcome.evaluated_queries,
            skipped_queries: outcome.skipped_queries,
        }
    }
}

//! Single-level ranking and coarse-to-fine search.
//!
//! `ctf_search` ranks the whole gallery with the shortest codes, keeps the
//! items whose distance is within `t_2`, re-ranks those with the next level,
//! keeps the ones within `t_3` of that ranking, and so on. The final list is
//! the last stage's ranking followed by the items each stage dropped, latest
//! stage first, each group in the order the dropping stage had them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codebook::{words_per_row, CodeLengthSchedule, MultiLevelCodebook, ThresholdSet};
use crate::error::{Error, Result};
use crate::hamming::{distances_all_into, distances_subset_into, CountingSortBuckets};
use crate::par::*;

/// Packed codes of one query at every level of the schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCodes {
    levels: Vec<Vec<u64>>,
}

impl QueryCodes {
    pub fn new(schedule: &CodeLengthSchedule, levels: Vec<Vec<u64>>) -> Result<Self> {
        if levels.len() != schedule.levels() {
            return Err(Error::ScheduleMismatch(format!(
                "query has {} levels, schedule has {}",
                levels.len(),
                schedule.levels()
            )));
        }
        for (k, (code, &l)) in levels.iter().zip(schedule.lengths()).enumerate() {
            if code.len() != words_per_row(l) {
                return Err(Error::ScheduleMismatch(format!(
                    "query level {} has {} words, length {l} needs {}",
                    k + 1,
                    code.len(),
                    words_per_row(l)
                )));
            }
        }
        Ok(Self { levels })
    }

    /// The codes of item `item` of a codebook.
    pub fn from_codebook(cb: &MultiLevelCodebook, item: usize) -> Self {
        Self {
            levels: cb.levels.iter().map(|m| m.row(item).to_vec()).collect(),
        }
    }

    pub fn level(&self, k: usize) -> &[u64] {
        &self.levels[k - 1]
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }
}

/// Ranking of the full gallery for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    /// Gallery indices, best first; a permutation of `0..n`.
    pub order: Vec<u32>,
    /// Items ranked at each stage (stage 1 ranks the whole gallery). Stages
    /// skipped because no candidate survived report 0.
    pub stage_candidate_counts: Vec<usize>,
    pub stage_times: Vec<Duration>,
    pub total_time: Duration,
}

/// Per-worker buffers reused across queries.
#[derive(Debug, Default)]
pub struct SearchScratch {
    distances: Vec<u32>,
    candidates: Vec<u32>,
    marks: Vec<u64>,
    stages: Vec<CountingSortBuckets>,
}

impl SearchScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_stages(&mut self, n: usize) {
        if self.stages.len() < n {
            self.stages.resize_with(n, CountingSortBuckets::new);
        }
    }
}

fn check_query(q: &QueryCodes, cb: &MultiLevelCodebook) -> Result<()> {
    if q.levels() != cb.schedule.levels() {
        return Err(Error::ScheduleMismatch(format!(
            "query has {} levels, codebook has {}",
            q.levels(),
            cb.schedule.levels()
        )));
    }
    for (k, m) in cb.levels.iter().enumerate() {
        if q.levels[k].len() != m.stride() {
            return Err(Error::ScheduleMismatch(format!(
                "query level {} has {} words, codebook rows have {}",
                k + 1,
                q.levels[k].len(),
                m.stride()
            )));
        }
    }
    Ok(())
}

/// Ranks the whole gallery with the codes of 1-based level `level` only.
pub fn full_rank(q: &QueryCodes, cb: &MultiLevelCodebook, level: usize) -> Result<RankedResult> {
    full_rank_with(q, cb, level, &mut SearchScratch::new())
}

pub fn full_rank_with(
    q: &QueryCodes,
    cb: &MultiLevelCodebook,
    level: usize,
    scratch: &mut SearchScratch,
) -> Result<RankedResult> {
    let levels = cb.schedule.levels();
    if level == 0 || level > levels {
        return Err(Error::LevelOutOfRange { level, levels });
    }
    check_query(q, cb)?;
    scratch.ensure_stages(1);
    let start = Instant::now();
    let m = cb.level(level);
    distances_all_into(q.level(level), m, &mut scratch.distances);
    let buckets = &mut scratch.stages[0];
    buckets.fill(&scratch.distances, m.length(), None);
    let order = buckets.flatten().to_vec();
    let elapsed = start.elapsed();
    Ok(RankedResult {
        order,
        stage_candidate_counts: vec![cb.n_items()],
        stage_times: vec![elapsed],
        total_time: elapsed,
    })
}

/// Coarse-to-fine search gated by `thresholds`.
///
/// Stage k re-ranks the items of stage k-1 within `t_k` of the query. The
/// result lists the last stage's ranking, then what each earlier stage cut,
/// latest stage first. Ties inside a stage go to the lower gallery index.
pub fn ctf_search(
    q: &QueryCodes,
    cb: &MultiLevelCodebook,
    thresholds: &ThresholdSet,
) -> Result<RankedResult> {
    ctf_search_with(q, cb, thresholds, &mut SearchScratch::new())
}

pub fn ctf_search_with(
    q: &QueryCodes,
    cb: &MultiLevelCodebook,
    thresholds: &ThresholdSet,
    scratch: &mut SearchScratch,
) -> Result<RankedResult> {
    check_query(q, cb)?;
    if thresholds.lengths != cb.schedule.lengths() {
        return Err(Error::ScheduleMismatch(format!(
            "thresholds were calibrated for {:?}, codebook uses {:?}",
            thresholds.lengths,
            cb.schedule.lengths()
        )));
    }
    let levels = cb.schedule.levels();
    if thresholds.thresholds.len() + 1 != levels {
        return Err(Error::ScheduleMismatch(format!(
            "{} thresholds for {levels} levels",
            thresholds.thresholds.len()
        )));
    }
    let t = &thresholds.thresholds;
    scratch.ensure_stages(levels);
    let mut counts = vec![0usize; levels];
    let mut times = vec![Duration::ZERO; levels];

    let start = Instant::now();
    let first = cb.level(1);
    distances_all_into(q.level(1), first, &mut scratch.distances);
    scratch.stages[0].fill(&scratch.distances, first.length(), None);
    counts[0] = cb.n_items();
    times[0] = start.elapsed();

    let mut executed = 1;
    for k in 2..=levels {
        let stage_start = Instant::now();
        let (done, rest) = scratch.stages.split_at_mut(k - 1);
        let prev = &done[k - 2];
        let kept = &prev.flatten()[..prev.count_within(t[k - 2])];
        counts[k - 1] = kept.len();
        if kept.is_empty() {
            break;
        }
        // index order, so ties at this level break the same way as full_rank
        let candidates = &mut scratch.candidates;
        index_order(kept, cb.n_items(), &mut scratch.marks, candidates);
        let m = cb.level(k);
        distances_subset_into(q.level(k), m, candidates, &mut scratch.distances);
        rest[0].fill(&scratch.distances, m.length(), Some(candidates));
        times[k - 1] = stage_start.elapsed();
        executed = k;
    }

    let mut order = Vec::with_capacity(cb.n_items());
    order.extend_from_slice(scratch.stages[executed - 1].flatten());
    for k in (1..executed).rev() {
        let stage = &scratch.stages[k - 1];
        order.extend_from_slice(&stage.flatten()[stage.count_within(t[k - 1])..]);
    }
    let total_time = start.elapsed();
    debug_assert_eq!(order.len(), cb.n_items());
    Ok(RankedResult {
        order,
        stage_candidate_counts: counts,
        stage_times: times,
        total_time,
    })
}

/// Writes `items` to `out` in ascending order. Large sets go through a
/// bitmap over `0..n`, small ones through a comparison sort.
fn index_order(items: &[u32], n: usize, marks: &mut Vec<u64>, out: &mut Vec<u32>) {
    out.clear();
    let m = items.len();
    let log_m = usize::BITS - m.leading_zeros();
    if m * log_m as usize * 16 < n {
        out.extend_from_slice(items);
        out.sort_unstable();
        return;
    }
    marks.clear();
    marks.resize(n.div_ceil(64), 0);
    for &i in items {
        marks[i as usize / 64] |= 1 << (i % 64);
    }
    for (w, &word) in marks.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            out.push((w * 64) as u32 + bits.trailing_zeros());
            bits &= bits - 1;
        }
    }
}

/// How each query of a batch is ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Full { level: usize },
    Cascade(ThresholdSet),
}

impl SearchMode {
    pub fn run(
        &self,
        q: &QueryCodes,
        cb: &MultiLevelCodebook,
        scratch: &mut SearchScratch,
    ) -> Result<RankedResult> {
        match self {
            SearchMode::Full { level } => full_rank_with(q, cb, *level, scratch),
            SearchMode::Cascade(t) => ctf_search_with(q, cb, t, scratch),
        }
    }
}

/// Runs every query of `queries` one after another on the calling thread.
pub fn search_sequential(
    queries: &MultiLevelCodebook,
    gallery: &MultiLevelCodebook,
    mode: &SearchMode,
) -> Result<Vec<RankedResult>> {
    let mut scratch = SearchScratch::new();
    (0..queries.n_items())
        .map(|i| {
            mode.run(
                &QueryCodes::from_codebook(queries, i),
                gallery,
                &mut scratch,
            )
        })
        .collect()
}

/// Rankings of a query batch as written by the `search` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub mode: SearchMode,
    pub gallery_size: usize,
    pub lengths: Vec<usize>,
    /// Whether queries ran on several workers; timings then include contention.
    pub parallel: bool,
    pub results: Vec<RankedResult>,
}

impl Rankings {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Checks that the rankings were produced for `queries` against `gallery`.
    pub fn check(&self, queries: &MultiLevelCodebook, gallery: &MultiLevelCodebook) -> Result<()> {
        if self.lengths != gallery.schedule.lengths() {
            return Err(Error::ScheduleMismatch(format!(
                "rankings use lengths {:?}, gallery has {:?}",
                self.lengths,
                gallery.schedule.lengths()
            )));
        }
        if self.gallery_size != gallery.n_items() {
            return Err(Error::LengthMismatch {
                left: self.gallery_size,
                right: gallery.n_items(),
            });
        }
        if self.results.len() != queries.n_items() {
            return Err(Error::LengthMismatch {
                left: self.results.len(),
                right: queries.n_items(),
            });
        }
        Ok(())
    }
}

const QUERIES_PER_TASK: usize = 16;

/// Runs the queries across workers; each worker reuses one scratch per task.
/// Per-query timings are still recorded but include contention effects.
pub fn search_parallel(
    queries: &MultiLevelCodebook,
    gallery: &MultiLevelCodebook,
    mode: &SearchMode,
) -> Result<Vec<RankedResult>> {
    let n = queries.n_items();
    let tasks: Vec<Result<Vec<RankedResult>>> = (0..n.div_ceil(QUERIES_PER_TASK))
        .into_par_iter()
        .map(|task| {
            let mut scratch = SearchScratch::new();
            let lo = task * QUERIES_PER_TASK;
            (lo..(lo + QUERIES_PER_TASK).min(n))
                .map(|i| {
                    mode.run(
                        &QueryCodes::from_codebook(queries, i),
                        gallery,
                        &mut scratch,
                    )
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for t in tasks {
        out.extend(t?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{pack_codes, PackedCodeMatrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn index_order_sorts_both_paths(
            n in 1usize..3000,
            picks in proptest::collection::vec(any::<u32>(), 0..1500),
        ) {
            let mut items: Vec<u32> = picks.iter().map(|&p| p % n as u32).collect();
            items.sort_unstable();
            items.dedup();
            let mut shuffled = items.clone();
            shuffled.reverse();
            let (mut marks, mut out) = (Vec::new(), Vec::new());
            index_order(&shuffled, n, &mut marks, &mut out);
            prop_assert_eq!(&out, &items);
        }
    }

    fn random_codebook(seed: u64, lengths: &[usize], n: usize) -> MultiLevelCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedule = CodeLengthSchedule::new(lengths.to_vec()).unwrap();
        let levels = lengths
            .iter()
            .map(|&l| {
                let bits: Vec<u8> = (0..n * l).map(|_| rng.gen_range(0..2)).collect();
                pack_codes(&bits, l).unwrap()
            })
            .collect();
        MultiLevelCodebook::new(schedule, levels, vec![0; n], vec![0; n]).unwrap()
    }

    #[test]
    fn single_item_gallery() {
        let cb = random_codebook(1, &[8, 16], 1);
        let q = QueryCodes::from_codebook(&cb, 0);
        assert_eq!(full_rank(&q, &cb, 2).unwrap().order, vec![0]);
        let t = ThresholdSet::pass_through(&cb.schedule);
        assert_eq!(ctf_search(&q, &cb, &t).unwrap().order, vec![0]);
    }

    #[test]
    fn exact_match_ranks_first() {
        let cb = random_codebook(2, &[32, 128], 50);
        let q = QueryCodes::from_codebook(&cb, 7);
        for level in 1..=2 {
            assert_eq!(full_rank(&q, &cb, level).unwrap().order[0], 7);
        }
    }

    #[test]
    fn level_out_of_range() {
        let cb = random_codebook(3, &[8, 16], 3);
        let q = QueryCodes::from_codebook(&cb, 0);
        assert!(matches!(
            full_rank(&q, &cb, 0),
            Err(Error::LevelOutOfRange {
                level: 0,
                levels: 2
            })
        ));
        assert!(full_rank(&q, &cb, 3).is_err());
    }

    #[test]
    fn schedule_mismatch_rejected() {
        let cb = random_codebook(4, &[8, 16], 3);
        let other = random_codebook(4, &[8, 16, 128], 3);
        let q = QueryCodes::from_codebook(&other, 0);
        assert!(matches!(
            full_rank(&q, &cb, 1),
            Err(Error::ScheduleMismatch(_))
        ));
        let q = QueryCodes::from_codebook(&cb, 0);
        let t = ThresholdSet::pass_through(&other.schedule);
        assert!(matches!(
            ctf_search(&q, &cb, &t),
            Err(Error::ScheduleMismatch(_))
        ));
        assert!(QueryCodes::new(&cb.schedule, vec![vec![0]]).is_err());
    }

    /// Cascade written directly from the stage description: unpacked bits,
    /// per-item naive distances, comparison sorts, explicit candidate sets.
    fn reference_cascade(
        gallery: &[Vec<Vec<u8>>],
        query: &[Vec<u8>],
        thresholds: &[i64],
    ) -> Vec<u32> {
        let levels = query.len();
        let dist = |k: usize, g: usize| -> i64 {
            query[k]
                .iter()
                .zip(&gallery[g][k])
                .filter(|(a, b)| a != b)
                .count() as i64
        };
        // ranked lists per executed stage; ties within a stage go to the
        // lower gallery index
        let mut ranked: Vec<Vec<usize>> = Vec::new();
        let mut candidates: Vec<usize> = (0..gallery.len()).collect();
        for k in 0..levels {
            if candidates.is_empty() {
                break;
            }
            let mut r = candidates.clone();
            r.sort_by_key(|&g| (dist(k, g), g));
            ranked.push(r);
            if k + 1 < levels {
                let last = ranked.last().unwrap();
                candidates = last
                    .iter()
                    .copied()
                    .filter(|&g| dist(k, g) <= thresholds[k])
                    .collect();
            }
        }
        let mut out: Vec<usize> = ranked.last().unwrap().clone();
        for k in (0..ranked.len() - 1).rev() {
            for &g in &ranked[k] {
                if dist(k, g) > thresholds[k] {
                    out.push(g);
                }
            }
        }
        out.into_iter().map(|g| g as u32).collect()
    }

    fn unpack_all(cb: &MultiLevelCodebook) -> Vec<Vec<Vec<u8>>> {
        let per_level: Vec<Vec<u8>> = cb.levels.iter().map(PackedCodeMatrix::unpack).collect();
        (0..cb.n_items())
            .map(|i| {
                cb.levels
                    .iter()
                    .zip(&per_level)
                    .map(|(m, bits)| bits[i * m.length()..(i + 1) * m.length()].to_vec())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matches_reference_cascade() {
        let cb = random_codebook(5, &[8, 16, 32], 300);
        let unpacked = unpack_all(&cb);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..40 {
            let qi = rng.gen_range(0..cb.n_items());
            let t = vec![rng.gen_range(-1..=8), rng.gen_range(-1..=16)];
            let ts = ThresholdSet::new(&cb.schedule, t.clone(), 1.0).unwrap();
            let got = ctf_search(&QueryCodes::from_codebook(&cb, qi), &cb, &ts).unwrap();
            assert_eq!(got.order, reference_cascade(&unpacked, &unpacked[qi], &t));
        }
    }

    #[test]
    fn empty_stage_skips_rest() {
        let cb = random_codebook(6, &[8, 16, 32], 20);
        let q = QueryCodes::from_codebook(&cb, 0);
        let t = ThresholdSet::new(&cb.schedule, vec![-1, 16], 1.0).unwrap();
        let r = ctf_search(&q, &cb, &t).unwrap();
        assert_eq!(r.stage_candidate_counts, vec![20, 0, 0]);
        assert_eq!(r.order, full_rank(&q, &cb, 1).unwrap().order);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let cb = random_codebook(7, &[32, 128], 400);
        let queries = cb.subset(&(0..40).collect::<Vec<_>>());
        let t = ThresholdSet::new(&cb.schedule, vec![14], 1.0).unwrap();
        let mode = SearchMode::Cascade(t);
        let a = search_sequential(&queries, &cb, &mode).unwrap();
        let b = search_parallel(&queries, &cb, &mode).unwrap();
        assert_eq!(a.len(), 40);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.order, y.order);
            assert_eq!(x.stage_candidate_counts, y.stage_candidate_counts);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn boundary_equivalences_and_permutation(
            seed in any::<u64>(),
            n in 1usize..120,
            raw_t in proptest::collection::vec(-1i64..200, 3),
        ) {
            let cb = random_codebook(seed, &[8, 24, 64, 128], n);
            let q = QueryCodes::from_codebook(&cb, (seed % n as u64) as usize);
            let fine = full_rank(&q, &cb, 4).unwrap();
            let coarse = full_rank(&q, &cb, 1).unwrap();
            let open = ctf_search(&q, &cb, &ThresholdSet::pass_through(&cb.schedule)).unwrap();
            let closed = ctf_search(&q, &cb, &ThresholdSet::coarse_only(&cb.schedule)).unwrap();
            prop_assert_eq!(&open.order, &fine.order);
            prop_assert_eq!(&closed.order, &coarse.order);

            let t: Vec<i64> = raw_t
                .iter()
                .zip(cb.schedule.lengths())
                .map(|(&t, &l)| t.min(l as i64))
                .collect();
            let r = ctf_search(&q, &cb, &ThresholdSet::new(&cb.schedule, t, 1.0).unwrap()).unwrap();
            let mut seen = vec![false; n];
            for &i in &r.order {
                prop_assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
            prop_assert!(r.stage_candidate_counts.windows(2).all(|w| w[0] >= w[1]));
            let work: usize = r.stage_candidate_counts.iter().sum();
            prop_assert!(work <= n * 4);
        }
    }
}

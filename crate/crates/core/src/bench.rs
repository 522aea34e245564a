//! Desk-scale timing experiments.
//!
//! Each experiment returns flat [`BenchmarkRecord`]s that serialize to one
//! stable CSV schema. All timed sections run on the calling thread.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::SearchMode;
use crate::codebook::{MultiLevelCodebook, PackedCodeMatrix, ThresholdSet};
use crate::dto::{calibrate, ClassWeighting, FBetaConfig, DEFAULT_MAX_PAIRS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, paired_timing, timed_search, EvalOutcome, PAIRED_ROUNDS};
use crate::hamming::{
    comparison_rank, distances_all_into, euclidean_distance, CountingSortBuckets,
};
use crate::synth::{generate, mix_seed, SynthSpec};

/// Default cap on packed gallery bytes (2 GiB).
pub const DEFAULT_MAX_GALLERY_BYTES: u64 = 2 << 30;

/// One measured value with the parameters needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub experiment: String,
    pub method: String,
    pub gallery_size: Option<usize>,
    pub length: Option<usize>,
    pub beta: Option<f64>,
    pub queries: Option<usize>,
    pub reps: Option<usize>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

impl BenchmarkRecord {
    fn new(
        experiment: &str,
        method: &str,
        metric: &str,
        value: f64,
        unit: &str,
        seed: u64,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            method: method.into(),
            gallery_size: None,
            length: None,
            beta: None,
            queries: None,
            reps: None,
            seed,
            metric: metric.into(),
            value,
            unit: unit.into(),
        }
    }

    fn size(mut self, n: usize) -> Self {
        self.gallery_size = Some(n);
        self
    }

    fn length(mut self, l: usize) -> Self {
        self.length = Some(l);
        self
    }

    fn beta(mut self, b: f64) -> Self {
        self.beta = Some(b);
        self
    }

    fn queries(mut self, q: usize) -> Self {
        self.queries = Some(q);
        self
    }

    fn reps(mut self, r: usize) -> Self {
        self.reps = Some(r);
        self
    }
}

pub fn write_csv(records: &[BenchmarkRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Rejects galleries whose packed codes would exceed `cap` bytes.
pub fn check_gallery_bytes(spec: &SynthSpec, cap: u64) -> Result<()> {
    let needed = MultiLevelCodebook::packed_bytes(&spec.schedule, spec.n_ids * spec.items_per_id);
    if needed > cap {
        return Err(Error::MemoryCap { needed, cap });
    }
    Ok(())
}

/// Median seconds per call of `op`, batching calls so each sample lasts at
/// least `min_sample`.
fn time_per_call(reps: usize, min_sample: Duration, op: impl FnMut()) -> f64 {
    let mut op = op;
    interleaved_per_call(reps, min_sample, &mut [&mut op])[0]
}

/// Like [`time_per_call`] for several operations, taking one sample of each
/// in turn so a slow stretch of the machine is spread over all of them.
fn interleaved_per_call(
    reps: usize,
    min_sample: Duration,
    ops: &mut [&mut dyn FnMut()],
) -> Vec<f64> {
    let batches: Vec<usize> = ops
        .iter_mut()
        .map(|op| {
            op();
            let start = Instant::now();
            op();
            let once = start.elapsed().max(Duration::from_nanos(50));
            (min_sample.as_secs_f64() / once.as_secs_f64())
                .ceil()
                .max(1.0) as usize
        })
        .collect();
    let mut samples = vec![Vec::with_capacity(reps.max(1)); ops.len()];
    for _ in 0..reps.max(1) {
        for (i, op) in ops.iter_mut().enumerate() {
            let start = Instant::now();
            for _ in 0..batches[i] {
                op();
            }
            samples[i].push(start.elapsed().as_secs_f64() / batches[i] as f64);
        }
    }
    samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortScaling {
    pub sizes: Vec<usize>,
    /// Seconds per ranking.
    pub counting: Vec<f64>,
    pub comparison: Vec<f64>,
    pub records: Vec<BenchmarkRecord>,
}

/// Ranking time per query for counting sort over integer distances and
/// comparison sort over real distances, across gallery sizes.
pub fn sort_scaling(sizes: &[usize], level_length: usize, reps: usize, seed: u64) -> SortScaling {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<u32>, Vec<f64>)> = sizes
        .iter()
        .map(|&n| {
            let ints = (0..n)
                .map(|_| rng.gen_range(0..=level_length as u32))
                .collect();
            let reals = (0..n).map(|_| rng.gen::<f64>()).collect();
            (ints, reals)
        })
        .collect();
    let mut buckets: Vec<CountingSortBuckets> =
        sizes.iter().map(|_| CountingSortBuckets::new()).collect();
    let mut ops: Vec<Box<dyn FnMut() + '_>> = Vec::new();
    for ((ints, reals), b) in inputs.iter().zip(buckets.iter_mut()) {
        ops.push(Box::new(move || {
            b.fill(black_box(ints), level_length, None);
            black_box(b.flatten());
        }));
        ops.push(Box::new(move || {
            black_box(comparison_rank(black_box(reals)));
        }));
    }
    let mut refs: Vec<&mut dyn FnMut()> = ops
        .iter_mut()
        .map(|op| &mut **op as &mut dyn FnMut())
        .collect();
    let times = interleaved_per_call(reps, Duration::from_millis(20), &mut refs);
    drop(refs);
    drop(ops);

    let mut counting = Vec::new();
    let mut comparison = Vec::new();
    let mut records = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let (c, q) = (times[2 * i], times[2 * i + 1]);
        for (method, v) in [("counting_sort", c), ("quick_sort", q)] {
            records.push(
                BenchmarkRecord::new("sort-scaling", method, "time_per_query", v, "s", seed)
                    .size(n)
                    .length(level_length)
                    .reps(reps),
            );
        }
        counting.push(c);
        comparison.push(q);
    }
    SortScaling {
        sizes: sizes.to_vec(),
        counting,
        comparison,
        records,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTiming {
    pub length: usize,
    /// Seconds per pair.
    pub hamming: f64,
    pub euclidean: f64,
}

impl KernelTiming {
    pub fn ratio(&self) -> f64 {
        self.euclidean / self.hamming
    }
}

/// Per-pair cost of packed Hamming distance versus `f64` Euclidean distance
/// at the same dimensionality.
pub fn distance_kernels(
    lengths: &[usize],
    n_items: usize,
    reps: usize,
    seed: u64,
) -> Result<(Vec<KernelTiming>, Vec<BenchmarkRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timings = Vec::new();
    let mut records = Vec::new();
    let min_sample = Duration::from_millis(20);
    for &l in lengths {
        let mut gallery = PackedCodeMatrix::zeroed(n_items, l)?;
        for i in 0..n_items {
            for j in 0..l {
                gallery.set_bit(i, j, rng.gen());
            }
        }
        let query = gallery.row(0).to_vec();
        let mut out = Vec::with_capacity(n_items);
        let ham = time_per_call(reps, min_sample, || {
            distances_all_into(black_box(&query), black_box(&gallery), &mut out);
            black_box(&out);
        }) / n_items as f64;

        let reals: Vec<Vec<f64>> = (0..n_items)
            .map(|_| (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rq: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dists = Vec::with_capacity(n_items);
        let euc = time_per_call(reps, min_sample, || {
            dists.clear();
            dists.extend(
                reals
                    .iter()
                    .map(|v| euclidean_distance(black_box(&rq), v).unwrap()),
            );
            black_box(&dists);
        }) / n_items as f64;

        let t = KernelTiming {
            length: l,
            hamming: ham,
            euclidean: euc,
        };
        for (method, metric, v, unit) in [
            ("hamming", "time_per_pair", ham, "s"),
            ("euclidean", "time_per_pair", euc, "s"),
            ("euclidean/hamming", "time_ratio", t.ratio(), "x"),
        ] {
            records.push(
                BenchmarkRecord::new("distance-kernels", method, metric, v, unit, seed)
                    .size(n_items)
                    .length(l)
                    .reps(reps),
            );
        }
        timings.push(t);
    }
    Ok((timings, records))
}

/// Synthetic gallery, held-out queries and a separate validation split.
pub struct SyntheticSetup {
    pub gallery: MultiLevelCodebook,
    pub queries: MultiLevelCodebook,
    pub validation: MultiLevelCodebook,
    pub seed: u64,
}

/// Identities in the validation split used for calibration.
pub const VALIDATION_IDS: usize = 1_000;
pub const ITEMS_PER_ID: usize = 10;

/// Whether two modes rank identically; calibration metadata is ignored.
fn same_search(a: &SearchMode, b: &SearchMode) -> bool {
    match (a, b) {
        (SearchMode::Full { level: x }, SearchMode::Full { level: y }) => x == y,
        (SearchMode::Cascade(x), SearchMode::Cascade(y)) => {
            x.lengths == y.lengths && x.thresholds == y.thresholds
        }
        _ => false,
    }
}

impl SyntheticSetup {
    /// Gallery of about `gallery_size` items (`ITEMS_PER_ID` per identity)
    /// and `n_queries` queries spread evenly over the identities.
    pub fn new(gallery_size: usize, n_queries: usize, seed: u64, max_bytes: u64) -> Result<Self> {
        let n_ids = (gallery_size / ITEMS_PER_ID).max(2);
        let spec = SynthSpec::standard(n_ids, ITEMS_PER_ID, seed);
        check_gallery_bytes(&spec, max_bytes)?;
        let (gallery, all_queries) = generate(&spec)?;
        let picks: Vec<usize> = (0..n_queries.min(n_ids))
            .map(|i| i * n_ids / n_queries.min(n_ids))
            .collect();
        let queries = all_queries.subset(&picks);
        let mut vspec = SynthSpec::standard(VALIDATION_IDS, ITEMS_PER_ID, mix_seed(seed, 7, 7));
        vspec.queries_per_id = 0;
        let (validation, _) = generate(&vspec)?;
        Ok(Self {
            gallery,
            queries,
            validation,
            seed,
        })
    }

    /// Calibrates on the validation split with both classes weighted
    /// equally, as in the unweighted F-beta the experiments reproduce.
    pub fn calibrate(&self, beta: f64) -> Result<ThresholdSet> {
        let cfg = FBetaConfig {
            class_weighting: ClassWeighting::Equal,
            ..FBetaConfig::with_beta(beta)
        };
        calibrate(&self.validation, &cfg, DEFAULT_MAX_PAIRS, self.seed)
    }

    /// Accuracy of each mode, with times from one [`paired_timing`] run over
    /// the distinct modes.
    pub fn run_paired(&self, modes: &[SearchMode]) -> Result<Vec<EvalOutcome>> {
        let mut distinct: Vec<SearchMode> = Vec::new();
        let slot: Vec<usize> = modes
            .iter()
            .map(|m| match distinct.iter().position(|d| same_search(d, m)) {
                Some(i) => i,
                None => {
                    distinct.push(m.clone());
                    distinct.len() - 1
                }
            })
            .collect();
        let timings = paired_timing(&self.queries, &self.gallery, &distinct, PAIRED_ROUNDS)?;
        let mut outcomes: Vec<EvalOutcome> = Vec::with_capacity(distinct.len());
        for (mode, timing) in distinct.iter().zip(timings) {
            let mut o = self.run(mode)?;
            o.mean_query_time = timing.mean_query_time;
            o.per_stage_mean_times = timing.per_stage_mean_times;
            outcomes.push(o);
        }
        Ok(slot.into_iter().map(|i| outcomes[i].clone()).collect())
    }

    pub fn run(&self, mode: &SearchMode) -> Result<EvalOutcome> {
        let results = timed_search(&self.queries, &self.gallery, mode)?;
        evaluate(
            &results,
            &self.gallery,
            &self.queries.person_ids,
            &self.queries.camera_ids,
        )
    }

    pub fn longest_level(&self) -> usize {
        self.gallery.schedule.levels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeComparison {
    pub gallery_size: usize,
    pub thresholds: ThresholdSet,
    pub cascade: EvalOutcome,
    pub full: EvalOutcome,
}

impl CascadeComparison {
    /// Full-ranking time over cascade time.
    pub fn speedup(&self) -> f64 {
        self.full.mean_query_time.as_secs_f64() / self.cascade.mean_query_time.as_secs_f64()
    }
}

fn outcome_records(
    out: &mut Vec<BenchmarkRecord>,
    experiment: &str,
    method: &str,
    o: &EvalOutcome,
    n: usize,
    q: usize,
    beta: Option<f64>,
    seed: u64,
) {
    for (metric, v, unit) in [
        ("mean_query_time", o.mean_query_time.as_secs_f64(), "s"),
        ("map", o.map, "fraction"),
        ("rank1", o.rank1, "fraction"),
    ] {
        let mut r = BenchmarkRecord::new(experiment, method, metric, v, unit, seed)
            .size(n)
            .queries(q);
        if let Some(b) = beta {
            r = r.beta(b);
        }
        out.push(r);
    }
}

/// Cascade search against full ranking at the longest level, across
/// gallery sizes, with thresholds calibrated at `beta`.
pub fn gallery_scaling(
    sizes: &[usize],
    n_queries: usize,
    beta: f64,
    seed: u64,
    max_bytes: u64,
) -> Result<(Vec<CascadeComparison>, Vec<BenchmarkRecord>)> {
    let mut comparisons = Vec::new();
    let mut records = Vec::new();
    for &size in sizes {
        let setup = SyntheticSetup::new(size, n_queries, seed, max_bytes)?;
        let cmp = compare(&setup, beta)?;
        let n = setup.gallery.n_items();
        let q = setup.queries.n_items();
        outcome_records(
            &mut records,
            "gallery-scaling",
            "ctf",
            &cmp.cascade,
            n,
            q,
            Some(beta),
            seed,
        );
        outcome_records(
            &mut records,
            "gallery-scaling",
            "full_longest",
            &cmp.full,
            n,
            q,
            None,
            seed,
        );
        records.push(
            BenchmarkRecord::new(
                "gallery-scaling",
                "ctf",
                "speedup",
                cmp.speedup(),
                "x",
                seed,
            )
            .size(n)
            .queries(q)
            .beta(beta),
        );
        comparisons.push(cmp);
    }
    Ok((comparisons, records))
}

/// Calibrates at `beta` and runs both search modes on one setup.
pub fn compare(setup: &SyntheticSetup, beta: f64) -> Result<CascadeComparison> {
    let thresholds = setup.calibrate(beta)?;
    let modes = [
        SearchMode::Cascade(thresholds.clone()),
        SearchMode::Full {
            level: setup.longest_level(),
        },
    ];
    let mut outcomes = setup.run_paired(&modes)?.into_iter();
    let cascade = outcomes.next().expect("two modes");
    let full = outcomes.next().expect("two modes");
    Ok(CascadeComparison {
        gallery_size: setup.gallery.n_items(),
        thresholds,
        cascade,
        full,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaPoint {
    pub beta: f64,
    pub thresholds: ThresholdSet,
    pub outcome: EvalOutcome,
}

/// Cascade accuracy and speed as the calibration weight `beta` varies.
pub fn beta_sweep(
    setup: &SyntheticSetup,
    betas: &[f64],
) -> Result<(Vec<BetaPoint>, Vec<BenchmarkRecord>)> {
    let mut points = Vec::new();
    let mut records = Vec::new();
    let n = setup.gallery.n_items();
    let q = setup.queries.n_items();
    let thresholds = betas
        .iter()
        .map(|&b| setup.calibrate(b))
        .collect::<Result<Vec<_>>>()?;
    let modes: Vec<SearchMode> = thresholds
        .iter()
        .cloned()
        .map(SearchMode::Cascade)
        .collect();
    let outcomes = setup.run_paired(&modes)?;
    for ((&beta, thresholds), outcome) in betas.iter().zip(thresholds).zip(outcomes) {
        outcome_records(
            &mut records,
            "beta-sweep",
            "ctf",
            &outcome,
            n,
            q,
            Some(beta),
            setup.seed,
        );
        for (k, &t) in thresholds.thresholds.iter().enumerate() {
            records.push(
                BenchmarkRecord::new(
                    "beta-sweep",
                    "ctf",
                    &format!("t_{}", k + 2),
                    t as f64,
                    "bits",
                    setup.seed,
                )
                .size(n)
                .beta(beta)
                .length(thresholds.lengths[k]),
            );
        }
        points.push(BetaPoint {
            beta,
            thresholds,
            outcome,
        });
    }
    Ok((points, records))
}

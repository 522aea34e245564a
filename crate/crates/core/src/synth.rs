//! Synthetic identity-structured codebooks.
//!
//! Every identity gets a random prototype at the longest level. An item's
//! longest code is the prototype with each bit flipped independently with
//! probability `p_N`. Each shorter level is a fixed random selection of bits
//! of the next longer level of the same item, with extra flips chosen so the
//! total flip rate against the (projected) prototype is exactly `p_k`. Pair
//! distances at level `k` are therefore Binomial(`l_k`, `2 p_k (1 - p_k)`)
//! within an identity and Binomial(`l_k`, 1/2) across identities.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{words_per_row, CodeLengthSchedule, MultiLevelCodebook, PackedCodeMatrix};
use crate::error::{Error, Result};
use crate::par::*;

/// SplitMix64 finalizer over a seed and two stream selectors.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_ids: usize,
    /// Gallery items per identity.
    pub items_per_id: usize,
    /// Held-out query items per identity.
    pub queries_per_id: usize,
    pub cams: usize,
    pub schedule: CodeLengthSchedule,
    /// Per-level bit flip probability against the identity prototype,
    /// shortest level first. Must be nonincreasing and in `[0, 0.5)`.
    pub flip_prob_per_level: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    /// Standard four-level schedule with flip rates used by the benchmarks.
    pub fn standard(n_ids: usize, items_per_id: usize, seed: u64) -> Self {
        Self {
            n_ids,
            items_per_id,
            queries_per_id: 1,
            cams: 6,
            schedule: CodeLengthSchedule::standard(),
            flip_prob_per_level: vec![0.08, 0.06, 0.04, 0.02],
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.n_ids < 2 {
            return bad(format!("need at least 2 identities, got {}", self.n_ids));
        }
        if self.n_ids > u32::MAX as usize - 1 {
            return bad(format!("too many identities: {}", self.n_ids));
        }
        if self.items_per_id == 0 {
            return bad("items_per_id must be positive".into());
        }
        if self.cams == 0 || self.cams > u16::MAX as usize + 1 {
            return bad(format!("camera count {} out of range", self.cams));
        }
        let p = &self.flip_prob_per_level;
        if p.len() != self.schedule.levels() {
            return bad(format!(
                "{} flip probabilities for {} levels",
                p.len(),
                self.schedule.levels()
            ));
        }
        if let Some(x) = p.iter().find(|x| !(0.0..0.5).contains(*x)) {
            return bad(format!("flip probability {x} outside [0, 0.5)"));
        }
        if p.windows(2).any(|w| w[0] < w[1]) {
            return bad(format!(
                "flip probabilities {p:?} must not increase with code length"
            ));
        }
        Ok(())
    }
}

/// Flips each of the first `length` bits with probability `q`, jumping
/// between flips with geometric gaps.
fn flip_bits(row: &mut [u64], length: usize, q: f64, rng: &mut impl Rng) {
    if q <= 0.0 {
        return;
    }
    let log_keep = (1.0 - q).ln();
    let mut pos = 0usize;
    loop {
        let u: f64 = rng.gen();
        let gap = ((1.0 - u).ln() / log_keep).floor();
        if gap >= (length - pos) as f64 {
            return;
        }
        pos += gap as usize;
        row[pos / 64] ^= 1 << (pos % 64);
        pos += 1;
        if pos >= length {
            return;
        }
    }
}

fn project(src: &[u64], select: &[u32], dst: &mut [u64]) {
    dst.fill(0);
    for (j, &s) in select.iter().enumerate() {
        let bit = src[s as usize / 64] >> (s % 64) & 1;
        dst[j / 64] |= bit << (j % 64);
    }
}

/// Generates `(gallery, queries)`. Output is a pure function of the spec,
/// independent of the number of workers.
pub fn generate(spec: &SynthSpec) -> Result<(MultiLevelCodebook, MultiLevelCodebook)> {
    spec.check()?;
    let lengths = spec.schedule.lengths();
    let levels = lengths.len();
    let p = &spec.flip_prob_per_level;

    // selections[k] picks the bits of level k (0-based) out of level k + 1
    let selections: Vec<Vec<u32>> = (0..levels - 1)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0, k as u64));
            index::sample(&mut rng, lengths[k + 1], lengths[k])
                .into_iter()
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    let extra_flip: Vec<f64> = (0..levels)
        .map(|k| {
            if k + 1 == levels {
                p[k]
            } else {
                (p[k] - p[k + 1]) / (1.0 - 2.0 * p[k + 1])
            }
        })
        .collect();
    let strides: Vec<usize> = lengths.iter().map(|&l| words_per_row(l)).collect();
    let per_id = spec.items_per_id + spec.queries_per_id;

    // one flat buffer per level per identity, rows in item order
    let blocks: Vec<Vec<Vec<u64>>> = (0..spec.n_ids)
        .into_par_iter()
        .map(|id| {
            let top = levels - 1;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1, id as u64));
            let mut proto = vec![0u64; strides[top]];
            for w in proto.iter_mut() {
                *w = rng.gen();
            }
            if !lengths[top].is_multiple_of(64) {
                proto[strides[top] - 1] &= (1u64 << (lengths[top] % 64)) - 1;
            }
            let mut out: Vec<Vec<u64>> = strides.iter().map(|s| vec![0; s * per_id]).collect();
            for item in 0..per_id {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2, (id * per_id + item) as u64));
                let row = &mut out[top][item * strides[top]..(item + 1) * strides[top]];
                row.copy_from_slice(&proto);
                flip_bits(row, lengths[top], extra_flip[top], &mut rng);
                for k in (0..top).rev() {
                    let (lower, upper) = out.split_at_mut(k + 1);
                    let src = &upper[0][item * strides[k + 1]..(item + 1) * strides[k + 1]];
                    let dst = &mut lower[k][item * strides[k]..(item + 1) * strides[k]];
                    project(src, &selections[k], dst);
                    flip_bits(dst, lengths[k], extra_flip[k], &mut rng);
                }
            }
            out
        })
        .collect();

    let assemble = |first: usize, count: usize| -> Result<MultiLevelCodebook> {
        let n = spec.n_ids * count;
        let mut mats = Vec::with_capacity(levels);
        for k in 0..levels {
            let s = strides[k];
            let mut words = Vec::with_capacity(n * s);
            for block in &blocks {
                words.extend_from_slice(&block[k][first * s..(first + count) * s]);
            }
            mats.push(PackedCodeMatrix::from_words(n, lengths[k], words)?);
        }
        let person_ids = (0..spec.n_ids)
            .flat_map(|id| std::iter::repeat_n(id as u32, count))
            .collect();
        let camera_ids = (0..spec.n_ids)
            .flat_map(|_| (first..first + count).map(|j| (j % spec.cams) as u16))
            .collect();
        MultiLevelCodebook::new(spec.schedule.clone(), mats, person_ids, camera_ids)
    };
    Ok((
        assemble(0, spec.items_per_id)?,
        assemble(spec.items_per_id, spec.queries_per_id)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::validate;
    use crate::hamming::hamming_words;

    fn spec(p: Vec<f64>, lengths: Vec<usize>) -> SynthSpec {
        SynthSpec {
            n_ids: 20,
            items_per_id: 4,
            queries_per_id: 2,
            cams: 3,
            schedule: CodeLengthSchedule::new(lengths).unwrap(),
            flip_prob_per_level: p,
            seed: 99,
        }
    }

    #[test]
    fn no_noise_means_identical_codes_per_identity() {
        let (g, q) = generate(&spec(vec![0.0; 3], vec![32, 128, 200])).unwrap();
        assert!(validate(&g).is_empty() && validate(&q).is_empty());
        assert_eq!(g.n_items(), 80);
        assert_eq!(q.n_items(), 40);
        for m in &g.levels {
            for i in 0..g.n_items() {
                for j in 0..g.n_items() {
                    if g.person_ids[i] == g.person_ids[j] {
                        assert_eq!(hamming_words(m.row(i), m.row(j)), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let s = spec(vec![0.2, 0.1], vec![32, 64]);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate(&s).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn labels_and_cameras() {
        let (g, q) = generate(&spec(vec![0.1, 0.1], vec![32, 64])).unwrap();
        assert_eq!(&g.person_ids[..5], &[0, 0, 0, 0, 1]);
        assert_eq!(&g.camera_ids[..5], &[0, 1, 2, 0, 0]);
        assert_eq!(&q.person_ids[..4], &[0, 0, 1, 1]);
        // queries continue the round-robin after the gallery items
        assert_eq!(&q.camera_ids[..4], &[1, 2, 1, 2]);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(vec![0.5, 0.1], vec![32, 64]);
        assert!(generate(&s).is_err());
        s.flip_prob_per_level = vec![0.1, 0.2];
        assert!(generate(&s).is_err());
        s.flip_prob_per_level = vec![0.1];
        assert!(generate(&s).is_err());
        s.flip_prob_per_level = vec![0.1, 0.1];
        s.n_ids = 1;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn flip_rate_matches_binomial_mean() {
        // relevant-pair distance at l = 512, p = 0.1 has mean 512 * 2 * 0.1 * 0.9
        let s = SynthSpec {
            n_ids: 100,
            items_per_id: 15,
            queries_per_id: 0,
            cams: 2,
            schedule: CodeLengthSchedule::new(vec![128, 512]).unwrap(),
            flip_prob_per_level: vec![0.1, 0.1],
            seed: 5,
        };
        let (g, _) = generate(&s).unwrap();
        let m = g.level(2);
        let mut ds = Vec::new();
        for id in 0..100 {
            for a in 0..15 {
                for b in a + 1..15 {
                    ds.push(hamming_words(m.row(id * 15 + a), m.row(id * 15 + b)) as f64);
                }
            }
        }
        assert!(ds.len() >= 10_000);
        let n = ds.len() as f64;
        let mean = ds.iter().sum::<f64>() / n;
        let q = 2.0 * 0.1 * 0.9;
        let se = (512.0 * q * (1.0 - q) / n).sqrt();
        assert!((mean - 92.16).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn flip_bits_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0u32;
        for _ in 0..200 {
            let mut row = vec![0u64; 32];
            flip_bits(&mut row, 2048, 0.05, &mut rng);
            total += row.iter().map(|w| w.count_ones()).sum::<u32>();
        }
        let mean = total as f64 / 200.0;
        let se = (2048.0 * 0.05 * 0.95 / 200.0f64).sqrt();
        assert!((mean - 102.4).abs() < 3.0 * se, "{mean}");
        let mut row = vec![0u64; 1];
        flip_bits(&mut row, 40, 0.3, &mut rng);
        assert_eq!(row[0] >> 40, 0);
    }
}

//! Distance kernels and linear-time ranking.
//!
//! Hamming distances are popcounts of XOR-ed packed words. Because a distance
//! at length `L` is an integer in `0..=L`, a gallery can be ranked with a
//! counting sort in `O(n + L)` instead of a comparison sort.

use crate::codebook::PackedCodeMatrix;
use crate::error::{Error, Result};

/// Popcount distance over whole words; callers guarantee equal lengths.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Hamming distance between two packed rows of the same length.
pub fn hamming_distance(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(hamming_words(a, b))
}

/// Per-gallery-item distances at one code length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceVector {
    pub values: Vec<u32>,
    pub level_length: usize,
}

fn check_query(query: &[u64], gallery: &PackedCodeMatrix) -> Result<()> {
    if query.len() != gallery.stride() {
        return Err(Error::LengthMismatch {
            left: query.len() * 64,
            right: gallery.stride() * 64,
        });
    }
    Ok(())
}

/// Distances from `query` to every row of `gallery`.
pub fn batch_distances(query: &[u64], gallery: &PackedCodeMatrix) -> Result<DistanceVector> {
    check_query(query, gallery)?;
    let mut values = Vec::with_capacity(gallery.n_items());
    distances_all_into(query, gallery, &mut values);
    Ok(DistanceVector {
        values,
        level_length: gallery.length(),
    })
}

/// Appends the distances to every gallery row onto `out` (cleared first).
pub(crate) fn distances_all_into(query: &[u64], gallery: &PackedCodeMatrix, out: &mut Vec<u32>) {
    out.clear();
    match gallery.stride() {
        1 => {
            let q = query[0];
            out.extend(gallery.words().iter().map(|w| (q ^ w).count_ones()));
        }
        2 => {
            let (q0, q1) = (query[0], query[1]);
            out.extend(
                gallery
                    .words()
                    .chunks_exact(2)
                    .map(|r| (q0 ^ r[0]).count_ones() + (q1 ^ r[1]).count_ones()),
            );
        }
        s => out.extend(
            gallery
                .words()
                .chunks_exact(s)
                .map(|r| hamming_words(query, r)),
        ),
    }
}

/// Distances to the listed gallery rows only, in list order.
pub(crate) fn distances_subset_into(
    query: &[u64],
    gallery: &PackedCodeMatrix,
    rows: &[u32],
    out: &mut Vec<u32>,
) {
    out.clear();
    out.extend(
        rows.iter()
            .map(|&r| hamming_words(query, gallery.row(r as usize))),
    );
}

/// Straight-line Euclidean distance; the real-valued baseline the binary
/// kernels are compared against.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Gallery indices grouped by distance, stored flat.
///
/// Bucket `d` is `order[offsets[d]..offsets[d + 1]]`; within a bucket indices
/// keep the order they were fed in, so ties resolve by input position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountingSortBuckets {
    offsets: Vec<usize>,
    order: Vec<u32>,
}

impl CountingSortBuckets {
    pub fn new() -> Self {
        Self::default()
    }

    /// Largest representable distance.
    pub fn level_length(&self) -> usize {
        self.offsets.len().saturating_sub(2)
    }

    pub fn bucket(&self, d: usize) -> &[u32] {
        &self.order[self.offsets[d]..self.offsets[d + 1]]
    }

    /// All indices, nearest first.
    pub fn flatten(&self) -> &[u32] {
        &self.order
    }

    /// Number of indices with distance at most `t`; `t < 0` gives 0.
    pub fn count_within(&self, t: i64) -> usize {
        if t < 0 {
            0
        } else {
            self.offsets[(t as usize + 1).min(self.offsets.len() - 1)]
        }
    }

    /// Sorts `values` (distances at most `level_length`) into buckets. Entry
    /// `p` is emitted as `keys[p]`, or as `p` itself when `keys` is `None`.
    pub(crate) fn fill(&mut self, values: &[u32], level_length: usize, keys: Option<&[u32]>) {
        self.offsets.clear();
        self.offsets.resize(level_length + 2, 0);
        for &v in values {
            self.offsets[v as usize + 1] += 1;
        }
        for d in 1..self.offsets.len() {
            self.offsets[d] += self.offsets[d - 1];
        }
        self.order.clear();
        self.order.resize(values.len(), 0);
        // scatter, using offsets[d] as the write cursor of bucket d
        let mut cursor = std::mem::take(&mut self.offsets);
        match keys {
            Some(keys) => {
                for (&v, &k) in values.iter().zip(keys) {
                    let c = &mut cursor[v as usize];
                    self.order[*c] = k;
                    *c += 1;
                }
            }
            None => {
                for (p, &v) in values.iter().enumerate() {
                    let c = &mut cursor[v as usize];
                    self.order[*c] = p as u32;
                    *c += 1;
                }
            }
        }
        // cursors now hold bucket ends; shift right to recover bucket starts
        cursor.rotate_right(1);
        cursor[0] = 0;
        self.offsets = cursor;
    }
}

/// Stable linear-time ranking of a distance vector.
pub fn counting_sort_rank(d: &DistanceVector) -> Result<CountingSortBuckets> {
    if let Some(&bad) = d.values.iter().find(|&&v| v as usize > d.level_length) {
        return Err(Error::InvalidInput(format!(
            "distance {bad} exceeds level length {}",
            d.level_length
        )));
    }
    let mut b = CountingSortBuckets::new();
    b.fill(&d.values, d.level_length, None);
    Ok(b)
}

/// Indices with distance at most `t`, nearest first. `t = -1` selects none.
pub fn select_within(buckets: &CountingSortBuckets, t: i64) -> Result<&[u32]> {
    if t < -1 || t > buckets.level_length() as i64 {
        return Err(Error::InvalidInput(format!(
            "threshold {t} outside [-1, {}]",
            buckets.level_length()
        )));
    }
    Ok(&buckets.order[..buckets.count_within(t)])
}

/// Comparison-sort ranking of real-valued distances (ties by index); the
/// baseline the counting sort is measured against.
pub fn comparison_rank(values: &[f64]) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32))
        .collect();
    keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::pack_codes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_distance(a: &[u8], b: &[u8]) -> u32 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
    }

    fn oracle_rank(values: &[u32]) -> Vec<u32> {
        let mut idx: Vec<u32> = (0..values.len() as u32).collect();
        idx.sort_by_key(|&i| (values[i as usize], i));
        idx
    }

    #[test]
    fn distance_identity_and_complement() {
        let x = [0xDEAD_BEEF_0123_4567u64];
        assert_eq!(hamming_distance(&x, &x).unwrap(), 0);
        assert_eq!(hamming_distance(&x, &[!x[0]]).unwrap(), 64);
    }

    #[test]
    fn distance_hand_example() {
        let a = pack_codes(&[1, 0, 1, 1, 0, 0, 1, 0], 8).unwrap();
        let b = pack_codes(&[0, 1, 1, 1, 0, 0, 0, 1], 8).unwrap();
        assert_eq!(hamming_distance(a.row(0), b.row(0)).unwrap(), 4);
    }

    #[test]
    fn distance_length_mismatch() {
        assert!(hamming_distance(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn batch_complement_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for length in [64usize, 128, 2048] {
            let x: Vec<u8> = (0..length).map(|_| rng.gen_range(0..2)).collect();
            let nx: Vec<u8> = x.iter().map(|b| 1 - b).collect();
            let g = pack_codes(&[x.clone(), nx, x.clone()].concat(), length).unwrap();
            let q = pack_codes(&x, length).unwrap();
            let d = batch_distances(q.row(0), &g).unwrap();
            assert_eq!(d.values, vec![0, length as u32, 0]);
        }
    }

    #[test]
    fn batch_empty_and_mismatch() {
        let g = PackedCodeMatrix::zeroed(0, 64).unwrap();
        assert!(batch_distances(&[0], &g).unwrap().values.is_empty());
        assert!(batch_distances(&[0, 0], &g).is_err());
    }

    #[test]
    fn batch_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for length in [32usize, 96, 128, 512] {
            let n = 1000;
            let bits: Vec<u8> = (0..n * length).map(|_| rng.gen_range(0..2)).collect();
            let qbits: Vec<u8> = (0..length).map(|_| rng.gen_range(0..2)).collect();
            let g = pack_codes(&bits, length).unwrap();
            let q = pack_codes(&qbits, length).unwrap();
            let d = batch_distances(q.row(0), &g).unwrap();
            for i in 0..n {
                assert_eq!(
                    d.values[i],
                    naive_distance(&qbits, &bits[i * length..(i + 1) * length])
                );
            }
        }
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_distance(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    /// Neumaier-compensated sum of squares as a high-precision reference.
    fn compensated_euclidean(a: &[f64], b: &[f64]) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(b) {
            let term = (x - y) * (x - y);
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        (sum + comp).sqrt()
    }

    #[test]
    fn euclidean_matches_compensated_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = euclidean_distance(&a, &b).unwrap();
            let want = compensated_euclidean(&a, &b);
            assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
            assert_eq!(got, euclidean_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn counting_sort_hand_example() {
        let d = DistanceVector {
            values: vec![3, 0, 2],
            level_length: 8,
        };
        assert_eq!(counting_sort_rank(&d).unwrap().flatten(), &[1, 2, 0]);
    }

    #[test]
    fn counting_sort_stable_on_ties() {
        let d = DistanceVector {
            values: vec![5; 7],
            level_length: 8,
        };
        let b = counting_sort_rank(&d).unwrap();
        assert_eq!(b.flatten(), &[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(b.bucket(5).len(), 7);
        assert!(b.bucket(4).is_empty());
    }

    #[test]
    fn counting_sort_rejects_out_of_range() {
        let d = DistanceVector {
            values: vec![9],
            level_length: 8,
        };
        assert!(counting_sort_rank(&d).is_err());
    }

    #[test]
    fn counting_sort_matches_comparison_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let values: Vec<u32> = (0..10_000).map(|_| rng.gen_range(0..=128)).collect();
        let d = DistanceVector {
            values: values.clone(),
            level_length: 128,
        };
        assert_eq!(
            counting_sort_rank(&d).unwrap().flatten(),
            &oracle_rank(&values)[..]
        );
    }

    #[test]
    fn select_within_examples() {
        let d = DistanceVector {
            values: vec![3, 0, 2, 1],
            level_length: 8,
        };
        let b = counting_sort_rank(&d).unwrap();
        assert_eq!(select_within(&b, 1).unwrap(), &[1, 3]);
        assert_eq!(select_within(&b, 8).unwrap(), b.flatten());
        assert!(select_within(&b, -1).unwrap().is_empty());
        assert!(select_within(&b, 9).is_err());
        assert!(select_within(&b, -2).is_err());
    }

    #[test]
    fn comparison_rank_ties_by_index() {
        assert_eq!(comparison_rank(&[2.0, 1.0, 2.0, 0.5]), vec![3, 1, 0, 2]);
    }

    proptest! {
        #[test]
        fn ranking_equivalence(values in proptest::collection::vec(0u32..=64, 0..500)) {
            let d = DistanceVector { values: values.clone(), level_length: 64 };
            let b = counting_sort_rank(&d).unwrap();
            prop_assert_eq!(b.flatten(), &oracle_rank(&values)[..]);
            for t in -1i64..=64 {
                let sel = select_within(&b, t).unwrap();
                prop_assert!(sel.iter().all(|&i| values[i as usize] as i64 <= t));
                prop_assert_eq!(sel.len(), values.iter().filter(|&&v| v as i64 <= t).count());
            }
        }

        #[test]
        fn packed_distance_equals_differing_entries(
            a in proptest::collection::vec(0u8..2, 200),
            b in proptest::collection::vec(0u8..2, 200),
        ) {
            let pa = pack_codes(&a, 200).unwrap();
            let pb = pack_codes(&b, 200).unwrap();
            let d = hamming_distance(pa.row(0), pb.row(0)).unwrap();
            prop_assert_eq!(d, naive_distance(&a, &b));
            prop_assert_eq!(d, hamming_distance(pb.row(0), pa.row(0)).unwrap());
        }
    }
}

//! Multi-length binary code galleries and their on-disk formats.
//!
//! Codes are stored one row per item, packed LSB-first into little-endian
//! `u64` words. Bit `j` of a code lives at bit `j % 64` of word `j / 64`.
//! A set bit stands for the code value `+1`, a clear bit for `-1`; Hamming
//! distance does not depend on this choice. Bits past the code length in the
//! last word of a row are always zero, so distance kernels can XOR whole words.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CTFC";
pub const FORMAT_VERSION: u16 = 1;

/// Person id reserved for junk gallery entries; never counted by evaluation.
pub const JUNK_PERSON_ID: u32 = u32::MAX;

/// Strictly increasing code lengths, in bits, each a multiple of 8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CodeLengthSchedule {
    lengths: Vec<usize>,
}

impl CodeLengthSchedule {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        let violations = schedule_violations(&lengths);
        if violations.is_empty() {
            Ok(Self { lengths })
        } else {
            Err(Error::Invalid(violations))
        }
    }

    /// The {32, 128, 512, 2048} schedule used by default throughout the tools.
    pub fn standard() -> Self {
        Self {
            lengths: vec![32, 128, 512, 2048],
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn levels(&self) -> usize {
        self.lengths.len()
    }

    /// Length of 1-based level `k`.
    pub fn length(&self, level: usize) -> usize {
        self.lengths[level - 1]
    }

    pub fn longest(&self) -> usize {
        *self.lengths.last().expect("schedule is never empty")
    }
}

impl TryFrom<Vec<usize>> for CodeLengthSchedule {
    type Error = Error;

    fn try_from(lengths: Vec<usize>) -> Result<Self> {
        Self::new(lengths)
    }
}

impl From<CodeLengthSchedule> for Vec<usize> {
    fn from(s: CodeLengthSchedule) -> Self {
        s.lengths
    }
}

fn schedule_violations(lengths: &[usize]) -> Vec<Violation> {
    let mut out = Vec::new();
    if lengths.is_empty() {
        out.push(Violation::EmptySchedule);
    }
    for (i, &l) in lengths.iter().enumerate() {
        if l == 0 || l % 8 != 0 {
            out.push(Violation::LengthNotByteMultiple {
                level: i + 1,
                length: l,
            });
        }
        if i > 0 && lengths[i - 1] >= l {
            out.push(Violation::ScheduleNotIncreasing {
                level: i + 1,
                previous: lengths[i - 1],
                length: l,
            });
        }
    }
    out
}

/// Number of `u64` words per packed row of `length` bits.
pub fn words_per_row(length: usize) -> usize {
    length.div_ceil(64)
}

/// Row-major bit-packed codes of a single length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodeMatrix {
    n_items: usize,
    length: usize,
    stride: usize,
    words: Vec<u64>,
}

impl PackedCodeMatrix {
    pub fn zeroed(n_items: usize, length: usize) -> Result<Self> {
        check_length(length)?;
        let stride = words_per_row(length);
        Ok(Self {
            n_items,
            length,
            stride,
            words: vec![0; n_items * stride],
        })
    }

    /// Wraps raw words. Padding bits are not checked here; see [`validate`].
    pub fn from_words(n_items: usize, length: usize, words: Vec<u64>) -> Result<Self> {
        check_length(length)?;
        let stride = words_per_row(length);
        if words.len() != n_items * stride {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: n_items * stride,
            });
        }
        Ok(Self {
            n_items,
            length,
            stride,
            words,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Words per row.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.stride..(i + 1) * self.stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.words[i * self.stride..(i + 1) * self.stride]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        debug_assert!(j < self.length);
        self.row(i)[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, j: usize, value: bool) {
        assert!(
            j < self.length,
            "bit {j} out of range for length {}",
            self.length
        );
        let w = &mut self.row_mut(i)[j / 64];
        if value {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    /// Unpacks into a flat row-major `n_items * length` matrix of 0/1 bytes.
    pub fn unpack(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_items * self.length);
        for i in 0..self.n_items {
            let row = self.row(i);
            out.extend((0..self.length).map(|j| (row[j / 64] >> (j % 64) & 1) as u8));
        }
        out
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut words = Vec::with_capacity(rows.len() * self.stride);
        for &r in rows {
            words.extend_from_slice(self.row(r));
        }
        Self {
            n_items: rows.len(),
            length: self.length,
            stride: self.stride,
            words,
        }
    }

    /// Mask of the valid bits in the last word of a row.
    fn tail_mask(&self) -> u64 {
        match self.length % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    /// Rows whose padding bits are not all zero.
    fn dirty_padding_rows(&self) -> Vec<usize> {
        let mask = self.tail_mask();
        if mask == u64::MAX {
            return Vec::new();
        }
        (0..self.n_items)
            .filter(|&i| self.row(i)[self.stride - 1] & !mask != 0)
            .collect()
    }
}

fn check_length(length: usize) -> Result<()> {
    if length == 0 || !length.is_multiple_of(8) {
        return Err(Error::InvalidInput(format!(
            "code length {length} is not a positive multiple of 8"
        )));
    }
    Ok(())
}

/// Packs a flat row-major matrix of 0/1 entries, `length` entries per row.
pub fn pack_codes(bits: &[u8], length: usize) -> Result<PackedCodeMatrix> {
    check_length(length)?;
    if !bits.len().is_multiple_of(length) {
        return Err(Error::InvalidInput(format!(
            "{} entries do not form rows of length {length}",
            bits.len()
        )));
    }
    let n_items = bits.len() / length;
    let mut m = PackedCodeMatrix::zeroed(n_items, length)?;
    for (i, code) in bits.chunks_exact(length).enumerate() {
        let row = m.row_mut(i);
        for (j, &b) in code.iter().enumerate() {
            match b {
                0 => {}
                1 => row[j / 64] |= 1 << (j % 64),
                other => {
                    return Err(Error::InvalidInput(format!(
                        "entry ({i}, {j}) is {other}, expected 0 or 1"
                    )))
                }
            }
        }
    }
    Ok(m)
}

/// Aligned code levels for one set of items, plus identity and camera labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLevelCodebook {
    pub schedule: CodeLengthSchedule,
    pub levels: Vec<PackedCodeMatrix>,
    pub person_ids: Vec<u32>,
    pub camera_ids: Vec<u16>,
}

impl MultiLevelCodebook {
    /// Builds a codebook, rejecting it if any invariant fails.
    pub fn new(
        schedule: CodeLengthSchedule,
        levels: Vec<PackedCodeMatrix>,
        person_ids: Vec<u32>,
        camera_ids: Vec<u16>,
    ) -> Result<Self> {
        let cb = Self {
            schedule,
            levels,
            person_ids,
            camera_ids,
        };
        let violations = validate(&cb);
        if violations.is_empty() {
            Ok(cb)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    pub fn n_items(&self) -> usize {
        self.person_ids.len()
    }

    /// Code matrix of 1-based level `k`.
    pub fn level(&self, k: usize) -> &PackedCodeMatrix {
        &self.levels[k - 1]
    }

    /// Bytes taken by the packed codes of `n_items` items under `schedule`.
    pub fn packed_bytes(schedule: &CodeLengthSchedule, n_items: usize) -> u64 {
        let words: usize = schedule.lengths().iter().map(|&l| words_per_row(l)).sum();
        (words * 8) as u64 * n_items as u64
    }

    /// Keeps only the given items, in the given order.
    pub fn subset(&self, items: &[usize]) -> Self {
        Self {
            schedule: self.schedule.clone(),
            levels: self.levels.iter().map(|m| m.gather(items)).collect(),
            person_ids: items.iter().map(|&i| self.person_ids[i]).collect(),
            camera_ids: items.iter().map(|&i| self.camera_ids[i]).collect(),
        }
    }
}

/// One broken invariant of a codebook. Levels are 1-based, rows 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptySchedule,
    LengthNotByteMultiple {
        level: usize,
        length: usize,
    },
    ScheduleNotIncreasing {
        level: usize,
        previous: usize,
        length: usize,
    },
    LevelCountMismatch {
        schedule: usize,
        levels: usize,
    },
    LevelLengthMismatch {
        level: usize,
        expected: usize,
        found: usize,
    },
    ItemCountMismatch {
        level: usize,
        expected: usize,
        found: usize,
    },
    WordCountMismatch {
        level: usize,
        expected: usize,
        found: usize,
    },
    NonzeroPadding {
        level: usize,
        row: usize,
    },
    LabelCountMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySchedule => write!(f, "schedule has no levels"),
            Violation::LengthNotByteMultiple { level, length } => {
                write!(
                    f,
                    "level {level}: length {length} is not a positive multiple of 8"
                )
            }
            Violation::ScheduleNotIncreasing {
                level,
                previous,
                length,
            } => write!(
                f,
                "level {level}: length {length} does not exceed previous length {previous}"
            ),
            Violation::LevelCountMismatch { schedule, levels } => {
                write!(
                    f,
                    "schedule has {schedule} lengths but codebook has {levels} levels"
                )
            }
            Violation::LevelLengthMismatch {
                level,
                expected,
                found,
            } => write!(
                f,
                "level {level}: code length {found}, schedule says {expected}"
            ),
            Violation::ItemCountMismatch {
                level,
                expected,
                found,
            } => write!(f, "level {level}: {found} items, level 1 has {expected}"),
            Violation::WordCountMismatch {
                level,
                expected,
                found,
            } => write!(f, "level {level}: {found} words, expected {expected}"),
            Violation::NonzeroPadding { level, row } => {
                write!(f, "level {level}: row {row} has nonzero padding bits")
            }
            Violation::LabelCountMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field}: {found} labels for {expected} items"),
        }
    }
}

/// Lists every broken invariant; empty means the codebook is well formed.
pub fn validate(cb: &MultiLevelCodebook) -> Vec<Violation> {
    let mut out = schedule_violations(cb.schedule.lengths());
    let lengths = cb.schedule.lengths();
    if lengths.len() != cb.levels.len() {
        out.push(Violation::LevelCountMismatch {
            schedule: lengths.len(),
            levels: cb.levels.len(),
        });
    }
    let expected_items = cb.levels.first().map(|m| m.n_items);
    for (i, m) in cb.levels.iter().enumerate() {
        let level = i + 1;
        if let Some(&l) = lengths.get(i) {
            if m.length != l {
                out.push(Violation::LevelLengthMismatch {
                    level,
                    expected: l,
                    found: m.length,
                });
            }
        }
        if let Some(n) = expected_items {
            if m.n_items != n {
                out.push(Violation::ItemCountMismatch {
                    level,
                    expected: n,
                    found: m.n_items,
                });
            }
        }
        let want_words = m.n_items * words_per_row(m.length);
        if m.words.len() != want_words || m.stride != words_per_row(m.length) {
            out.push(Violation::WordCountMismatch {
                level,
                expected: want_words,
                found: m.words.len(),
            });
            continue;
        }
        out.extend(
            m.dirty_padding_rows()
                .into_iter()
                .map(|row| Violation::NonzeroPadding { level, row }),
        );
    }
    let n = expected_items.unwrap_or(cb.person_ids.len());
    if cb.person_ids.len() != n {
        out.push(Violation::LabelCountMismatch {
            field: "person_ids",
            expected: n,
            found: cb.person_ids.len(),
        });
    }
    if cb.camera_ids.len() != n {
        out.push(Violation::LabelCountMismatch {
            field: "camera_ids",
            expected: n,
            found: cb.camera_ids.len(),
        });
    }
    out
}

pub fn save_codebook(cb: &MultiLevelCodebook, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codebook(cb, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<MultiLevelCodebook> {
    read_codebook(BufReader::new(File::open(path)?))
}

/// Serializes a codebook in the `CTFC` container format.
pub fn write_codebook(cb: &MultiLevelCodebook, w: &mut impl Write) -> Result<()> {
    let violations = validate(cb);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let lengths = cb.schedule.lengths();
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(lengths.len() as u16).to_le_bytes())?;
    for &l in lengths {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.write_all(&(cb.n_items() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for m in &cb.levels {
        for chunk in m.words.chunks(1 << 16) {
            buf.clear();
            buf.extend(chunk.iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
    }
    buf.clear();
    buf.extend(cb.person_ids.iter().flat_map(|x| x.to_le_bytes()));
    w.write_all(&buf)?;
    buf.clear();
    buf.extend(cb.camera_ids.iter().flat_map(|x| x.to_le_bytes()));
    w.write_all(&buf)?;
    Ok(())
}

/// Reads exactly `len` bytes, growing the buffer only as data arrives so a
/// corrupt header cannot trigger a huge allocation up front.
fn read_section(r: &mut impl Read, len: usize, section: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len.min(1 << 20));
    let got = r.take(len as u64).read_to_end(&mut out)?;
    if got != len {
        return Err(Error::Truncated {
            section: section.to_string(),
        });
    }
    Ok(out)
}

pub fn read_codebook(mut r: impl Read) -> Result<MultiLevelCodebook> {
    let header = read_section(&mut r, 8, "header")?;
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_levels = u16::from_le_bytes([header[6], header[7]]) as usize;
    let raw = read_section(&mut r, 4 * n_levels, "lengths")?;
    let lengths: Vec<usize> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let schedule = CodeLengthSchedule::new(lengths)?;
    let raw = read_section(&mut r, 8, "item count")?;
    let n_items = u64::from_le_bytes(raw[..].try_into().unwrap());
    let n_items = usize::try_from(n_items)
        .map_err(|_| Error::InvalidInput(format!("item count {n_items} too large")))?;

    let mut levels = Vec::with_capacity(schedule.levels());
    for (i, &l) in schedule.lengths().iter().enumerate() {
        let n_words = n_items
            .checked_mul(words_per_row(l))
            .ok_or_else(|| Error::InvalidInput(format!("item count {n_items} too large")))?;
        let raw = read_section(&mut r, n_words * 8, &format!("level {}", i + 1))?;
        let words = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        levels.push(PackedCodeMatrix::from_words(n_items, l, words)?);
    }
    let raw = read_section(&mut r, n_items * 4, "person_ids")?;
    let person_ids = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let raw = read_section(&mut r, n_items * 2, "camera_ids")?;
    let camera_ids = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::InvalidInput(
            "trailing bytes after camera_ids".into(),
        ));
    }
    MultiLevelCodebook::new(schedule, levels, person_ids, camera_ids)
}

/// Calibrated distance thresholds `t_2..t_N`.
///
/// `thresholds[i]` gates distances measured at level `i + 1` (1-based) and
/// decides which items are re-ranked at level `i + 2`. A value of `-1`
/// selects nothing. `beta` is the F-beta weight used at calibration, absent
/// for hand-built sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub beta: Option<f64>,
    pub lengths: Vec<usize>,
    pub thresholds: Vec<i64>,
}

impl ThresholdSet {
    pub fn new(schedule: &CodeLengthSchedule, thresholds: Vec<i64>, beta: f64) -> Result<Self> {
        let t = Self {
            beta: Some(beta),
            lengths: schedule.lengths().to_vec(),
            thresholds,
        };
        t.check()?;
        Ok(t)
    }

    /// Thresholds equal to the gated lengths: nothing is ever filtered out.
    pub fn pass_through(schedule: &CodeLengthSchedule) -> Self {
        let l = schedule.lengths();
        Self {
            beta: None,
            lengths: l.to_vec(),
            thresholds: l[..l.len() - 1].iter().map(|&x| x as i64).collect(),
        }
    }

    /// Every threshold `-1`: only the first level ranks anything.
    pub fn coarse_only(schedule: &CodeLengthSchedule) -> Self {
        let l = schedule.lengths();
        Self {
            beta: None,
            lengths: l.to_vec(),
            thresholds: vec![-1; l.len() - 1],
        }
    }

    pub fn check(&self) -> Result<()> {
        let schedule = CodeLengthSchedule::new(self.lengths.clone())?;
        if schedule.levels() < 2 {
            return Err(Error::InvalidInput(
                "thresholds need a schedule of at least two levels".into(),
            ));
        }
        if self.thresholds.len() != schedule.levels() - 1 {
            return Err(Error::InvalidInput(format!(
                "{} thresholds for {} levels",
                self.thresholds.len(),
                schedule.levels()
            )));
        }
        for (i, (&t, &l)) in self.thresholds.iter().zip(&self.lengths).enumerate() {
            if t < -1 || t > l as i64 {
                return Err(Error::InvalidInput(format!(
                    "t_{} = {t} outside [-1, {l}]",
                    i + 2
                )));
            }
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::InvalidInput(format!("beta {beta} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let t: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        t.check()?;
        Ok(t)
    }
}

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerId, ModelConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPattern {
    Unstructured,
    /// Keep `n` of every aligned group of `m` input columns.
    NM {
        n: usize,
        m: usize,
    },
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPattern::Unstructured => f.write_str("unstructured"),
            MaskPattern::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl std::str::FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "unstructured" {
            return Ok(MaskPattern::Unstructured);
        }
        let bad = || Error::invalid(format!("bad mask pattern `{s}`"));
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        let n = n.parse().map_err(|_| bad())?;
        let m = m.parse().map_err(|_| bad())?;
        if n >= m || m == 0 {
            return Err(bad());
        }
        Ok(MaskPattern::NM { n, m })
    }
}

/// Which weights compete when an unstructured ratio is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    #[default]
    PerRow,
    PerLayer,
}

/// Binary keep/drop matrix, same shape as the weight it masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    pattern: MaskPattern,
}

impl Mask {
    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
            pattern: MaskPattern::Unstructured,
        }
    }

    pub fn from_keep(
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
        pattern: MaskPattern,
    ) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                len: keep.len(),
            });
        }
        Ok(Mask {
            rows,
            cols,
            keep,
            pattern,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_count() as f64 / self.keep.len().max(1) as f64
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            f32::from(u8::from(self.is_kept(i, j)))
        })
    }

    /// Checks the N:M group invariant when the pattern is N:M.
    pub fn satisfies_pattern(&self) -> bool {
        match self.pattern {
            MaskPattern::Unstructured => true,
            MaskPattern::NM { n, m } => {
                self.cols.is_multiple_of(m)
                    && (0..self.rows).all(|i| {
                        self.row(i)
                            .chunks(m)
                            .all(|g| g.iter().filter(|&&k| k).count() == n)
                    })
            }
        }
    }
}

/// Number of entries dropped from a group of `size` at ratio `s`.
pub(crate) fn drop_count(ratio: f64, size: usize) -> usize {
    ((ratio * size as f64) + 1e-9).floor() as usize
}

/// Drops the `⌊s · group⌋` lowest scores per comparison group; ties drop the
/// lower flat index first.
pub fn build_mask_unstructured(
    scores: &Matrix,
    ratio: f64,
    group: ComparisonGroup,
) -> Result<Mask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!(
            "sparsity ratio must be in [0, 1), got {ratio}"
        )));
    }
    let (rows, cols) = scores.shape();
    let mut keep = vec![true; rows * cols];
    let data = scores.data();
    let mut drop_lowest = |indices: &mut Vec<usize>, k: usize| {
        indices.sort_by(|&a, &b| data[a].total_cmp(&data[b]).then(a.cmp(&b)));
        for &i in indices.iter().take(k) {
            keep[i] = false;
        }
    };
    match group {
        ComparisonGroup::PerRow => {
            let k = drop_count(ratio, cols);
            for i in 0..rows {
                let mut idx: Vec<usize> = (i * cols..(i + 1) * cols).collect();
                drop_lowest(&mut idx, k);
            }
        }
        ComparisonGroup::PerLayer => {
            let mut idx: Vec<usize> = (0..rows * cols).collect();
            drop_lowest(&mut idx, drop_count(ratio, rows * cols));
        }
    }
    Mask::from_keep(rows, cols, keep, MaskPattern::Unstructured)
}

/// Keeps the `n` highest scores in each aligned group of `m` columns; ties
/// keep the lower column.
pub fn build_mask_nm(scores: &Matrix, n: usize, m: usize) -> Result<Mask> {
    if n >= m {
        return Err(Error::invalid(format!("N:M needs N < M, got {n}:{m}")));
    }
    let (rows, cols) = scores.shape();
    if cols % m != 0 {
        return Err(Error::invalid(format!(
            "{cols} columns are not divisible by M = {m}"
        )));
    }
    let mut keep = vec![false; rows * cols];
    for i in 0..rows {
        let row = scores.row(i);
        for g in (0..cols).step_by(m) {
            let mut idx: Vec<usize> = (g..g + m).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in &idx[..n] {
                keep[i * cols + j] = true;
            }
        }
    }
    Mask::from_keep(rows, cols, keep, MaskPattern::NM { n, m })
}

/// A mask bound to a prunable layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub layer: LayerId,
    pub mask: Mask,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    layer: String,
    pattern: String,
    shape: [usize; 2],
    /// Alternating run lengths in row-major order, starting with dropped.
    keep: Vec<usize>,
}

pub fn rle_encode(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(runs.iter().sum());
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    out
}

pub fn save_masks(masks: &[PruneMask], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pm in masks {
        let (r, c) = pm.mask.shape();
        let rec = MaskRecord {
            layer: pm.layer.to_string(),
            pattern: pm.mask.pattern().to_string(),
            shape: [r, c],
            keep: rle_encode(pm.mask.keep()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_masks(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Vec<PruneMask>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MaskRecord = serde_json::from_str(&line).map_err(|e| Error::JsonLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let layer = LayerId::parse(&rec.layer, cfg)?;
        let mask = Mask::from_keep(
            rec.shape[0],
            rec.shape[1],
            rle_decode(&rec.keep),
            rec.pattern.parse()?,
        )?;
        out.push(PruneMask { layer, mask });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_scores(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform() as f32)
    }

    #[test]
    fn unstructured_examples() {
        let s = Matrix::from_rows(&[vec![3.0, 2.0]]).unwrap();
        let m = build_mask_unstructured(&s, 0.5, ComparisonGroup::PerRow).unwrap();
        assert_eq!(m.keep(), &[true, false]);
        let m = build_mask_unstructured(&s, 0.0, ComparisonGroup::PerRow).unwrap();
        assert_eq!(m.kept_count(), 2);
        assert!(build_mask_unstructured(&s, 1.0, ComparisonGroup::PerRow).is_err());

        let mut rng = RngStream::new(0, 0);
        let s = random_scores(8, 8, &mut rng);
        let m = build_mask_unstructured(&s, 0.25, ComparisonGroup::PerRow).unwrap();
        for i in 0..8 {
            assert_eq!(m.row(i).iter().filter(|&&k| k).count(), 6);
        }
        let m = build_mask_unstructured(&s, 0.25, ComparisonGroup::PerLayer).unwrap();
        assert_eq!(m.kept_count(), 48);
    }

    #[test]
    fn unstructured_ties_drop_lower_index() {
        let s = Matrix::filled(1, 4, 1.0);
        let m = build_mask_unstructured(&s, 0.5, ComparisonGroup::PerRow).unwrap();
        assert_eq!(m.keep(), &[false, false, true, true]);
    }

    #[test]
    fn nm_examples() {
        let s = Matrix::from_rows(&[vec![4.0, 1.0, 3.0, 2.0]]).unwrap();
        assert_eq!(
            build_mask_nm(&s, 2, 4).unwrap().keep(),
            &[true, false, true, false]
        );
        let s = Matrix::filled(1, 8, 0.5);
        let m = build_mask_nm(&s, 4, 8).unwrap();
        assert_eq!(
            m.keep(),
            &[true, true, true, true, false, false, false, false]
        );
        assert!(build_mask_nm(&Matrix::zeros(1, 6), 2, 4).is_err());

        let mut rng = RngStream::new(1, 0);
        let s = random_scores(16, 16, &mut rng);
        for (n, m) in [(2, 4), (4, 8), (1, 4)] {
            let mask = build_mask_nm(&s, n, m).unwrap();
            assert!(mask.satisfies_pattern());
            assert_eq!(mask.sparsity(), 1.0 - n as f64 / m as f64);
        }
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(
            "2:4".parse::<MaskPattern>().unwrap(),
            MaskPattern::NM { n: 2, m: 4 }
        );
        assert_eq!(
            "unstructured".parse::<MaskPattern>().unwrap(),
            MaskPattern::Unstructured
        );
        assert!("4:2".parse::<MaskPattern>().is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in prop::collection::vec(any::<bool>(), 0..200)) {
            prop_assert_eq!(rle_decode(&rle_encode(&bits)), bits);
        }

        #[test]
        fn scaling_scores_keeps_masks(seed in any::<u64>(), c in 0.01f32..100.0, ratio in 0.0f64..0.9) {
            let mut rng = RngStream::new(seed, 0);
            let s = random_scores(4, 8, &mut rng);
            let scaled = s.scale(c);
            prop_assert_eq!(
                build_mask_unstructured(&s, ratio, ComparisonGroup::PerRow).unwrap(),
                build_mask_unstructured(&scaled, ratio, ComparisonGroup::PerRow).unwrap()
            );
            prop_assert_eq!(build_mask_nm(&s, 2, 4).unwrap(), build_mask_nm(&scaled, 2, 4).unwrap());
        }
    }
}

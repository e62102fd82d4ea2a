//! Absolute positions of feature-map cells in original-image pixels and the
//! position-matched pairs between the student and teacher maps.

use crate::augment::CropRecord;
use crate::config::PairMatching;
use crate::error::{CmidError, Result};

/// Cell-center positions `(l1, l2)` (horizontal, vertical) of an `H x W`
/// feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionField {
    pub rows: usize,
    pub cols: usize,
    pub positions: Vec<(f64, f64)>,
    pub source: CropRecord,
}

impl PositionField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position of the cell at 1-based column `u`, row `v`.
    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        self.positions[(v - 1) * self.cols + (u - 1)]
    }
}

/// Positions of every cell of a `grid = (H, W)` map computed from `crop`.
/// A flipped view mirrors the column index before mapping.
pub fn feature_positions(crop: &CropRecord, grid: (usize, usize)) -> PositionField {
    let (rows, cols) = grid;
    let (wf, hf) = (cols as f64, rows as f64);
    let mut positions = Vec::with_capacity(rows * cols);
    for v in 1..=rows {
        let l2 = crop.top + crop.height / (2.0 * hf) + crop.height / hf * (v as f64 - 1.0);
        for u in 1..=cols {
            let uu = if crop.hflip { cols + 1 - u } else { u };
            let l1 = crop.left + crop.width / (2.0 * wf) + crop.width / wf * (uu as f64 - 1.0);
            positions.push((l1, l2));
        }
    }
    PositionField {
        rows,
        cols,
        positions,
        source: *crop,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    /// Row-major cell index in the student map.
    pub student: usize,
    /// Row-major cell index in the teacher map.
    pub teacher: usize,
    pub distance: f64,
}

impl MatchedPair {
    /// 1-based `(u, v)` = (column, row) of the student cell.
    pub fn student_uv(&self, cols: usize) -> (usize, usize) {
        (self.student % cols + 1, self.student / cols + 1)
    }

    pub fn teacher_uv(&self, cols: usize) -> (usize, usize) {
        (self.teacher % cols + 1, self.teacher / cols + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPairs {
    pub pairs: Vec<MatchedPair>,
}

impl MatchedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn student_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.student).collect()
    }

    pub fn teacher_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.teacher).collect()
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// Selects `n` pairs of nearest cells. Ties are broken by the student
/// index, then the teacher index.
pub fn match_pairs(
    student: &PositionField,
    teacher: &PositionField,
    n: usize,
    matching: PairMatching,
) -> Result<MatchedPairs> {
    let available = match matching {
        PairMatching::GlobalTopN => student.len() * teacher.len(),
        PairMatching::Bipartite => student.len().min(teacher.len()),
    };
    if n > available {
        return Err(CmidError::Parameter(format!(
            "requested {n} matched pairs but only {available} are available"
        )));
    }
    let mut all: Vec<MatchedPair> = Vec::with_capacity(student.len() * teacher.len());
    for (si, &sp) in student.positions.iter().enumerate() {
        for (ti, &tp) in teacher.positions.iter().enumerate() {
            all.push(MatchedPair {
                student: si,
                teacher: ti,
                distance: distance(sp, tp),
            });
        }
    }
    let order = |a: &MatchedPair, b: &MatchedPair| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.student.cmp(&b.student))
            .then(a.teacher.cmp(&b.teacher))
    };
    let pairs = match matching {
        PairMatching::GlobalTopN => {
            if n < all.len() {
                all.select_nth_unstable_by(n, order);
                all.truncate(n);
            }
            all.sort_by(order);
            all
        }
        PairMatching::Bipartite => {
            all.sort_by(order);
            let mut used_s = vec![false; student.len()];
            let mut used_t = vec![false; teacher.len()];
            let mut out = Vec::with_capacity(n);
            for p in all {
                if out.len() == n {
                    break;
                }
                if !used_s[p.student] && !used_t[p.teacher] {
                    used_s[p.student] = true;
                    used_t[p.teacher] = true;
                    out.push(p);
                }
            }
            out
        }
    };
    Ok(MatchedPairs { pairs })
}

/// Intersection area of two crop rectangles in the original frame.
pub fn overlap_area(a: &CropRecord, b: &CropRecord) -> f64 {
    let w = (a.left + a.width).min(b.left + b.width) - a.left.max(b.left);
    let h = (a.top + a.height).min(b.top + b.height) - a.top.max(b.top);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(left: f64, top: f64, w: f64, h: f64) -> CropRecord {
        CropRecord {
            left,
            top,
            width: w,
            height: h,
            hflip: false,
            out_size: 64,
        }
    }

    #[test]
    fn unit_cells_have_half_integer_centers() {
        let f = feature_positions(&crop(0.0, 0.0, 8.0, 8.0), (8, 8));
        for u in 1..=8 {
            assert_eq!(f.at(u, 1).0, u as f64 - 0.5);
        }
    }

    #[test]
    fn offset_crop_centers() {
        let f = feature_positions(&crop(16.0, 0.0, 128.0, 128.0), (8, 8));
        let xs: Vec<f64> = (1..=8).map(|u| f.at(u, 1).0).collect();
        assert_eq!(xs, vec![24.0, 40.0, 56.0, 72.0, 88.0, 104.0, 120.0, 136.0]);
    }

    #[test]
    fn flip_mirrors_columns() {
        let mut c = crop(10.0, 5.0, 70.0, 40.0);
        let plain = feature_positions(&c, (4, 7));
        c.hflip = true;
        let flipped = feature_positions(&c, (4, 7));
        for v in 1..=4 {
            for u in 1..=7 {
                assert_eq!(flipped.at(u, v), plain.at(8 - u, v));
            }
        }
    }

    #[test]
    fn identical_crops_match_identically() {
        let c = crop(3.0, 7.0, 150.0, 120.0);
        let f = feature_positions(&c, (7, 7));
        let m = match_pairs(&f, &f, 20, PairMatching::GlobalTopN).unwrap();
        assert_eq!(m.len(), 20);
        for (k, p) in m.pairs.iter().enumerate() {
            assert_eq!(p.distance, 0.0);
            assert_eq!(p.student, p.teacher);
            assert_eq!(p.student, k);
        }
    }

    #[test]
    fn one_cell_shift() {
        // Teacher shifted right by one cell width (w / W = 16).
        let s = feature_positions(&crop(0.0, 0.0, 112.0, 112.0), (7, 7));
        let t = feature_positions(&crop(16.0, 0.0, 112.0, 112.0), (7, 7));
        let m = match_pairs(&s, &t, 42, PairMatching::GlobalTopN).unwrap();
        for p in &m.pairs {
            assert_eq!(p.distance, 0.0);
            let (su, sv) = p.student_uv(7);
            let (tu, tv) = p.teacher_uv(7);
            assert_eq!((su, sv), (tu + 1, tv));
        }
    }

    #[test]
    fn too_many_pairs_rejected() {
        let f = feature_positions(&crop(0.0, 0.0, 10.0, 10.0), (2, 2));
        assert!(match_pairs(&f, &f, 17, PairMatching::GlobalTopN).is_err());
        assert!(match_pairs(&f, &f, 16, PairMatching::GlobalTopN).is_ok());
        assert!(match_pairs(&f, &f, 5, PairMatching::Bipartite).is_err());
    }

    #[test]
    fn bipartite_has_no_repeats() {
        let s = feature_positions(&crop(0.0, 0.0, 100.0, 100.0), (5, 5));
        let t = feature_positions(&crop(30.0, 20.0, 60.0, 60.0), (5, 5));
        let m = match_pairs(&s, &t, 20, PairMatching::Bipartite).unwrap();
        let mut ss = m.student_indices();
        let mut ts = m.teacher_indices();
        ss.sort();
        ss.dedup();
        ts.sort();
        ts.dedup();
        assert_eq!(ss.len(), 20);
        assert_eq!(ts.len(), 20);
        assert!(m.pairs.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn overlap_cases() {
        let a = crop(2.0, 3.0, 10.0, 4.0);
        assert_eq!(overlap_area(&a, &a), 40.0);
        assert_eq!(overlap_area(&a, &crop(50.0, 50.0, 1.0, 1.0)), 0.0);
        assert_eq!(overlap_area(&crop(0.0, 0.0, 1.0, 1.0), &crop(0.5, 0.0, 1.0, 1.0)), 0.5);
    }
}

//! Axis-aligned pixel boxes and binary grids.
//!
//! Boxes are half-open: pixel `(row, col)` lies inside `(x0, y0, x1, y1)`
//! when `y0 <= row < y1` and `x0 <= col < x1`, so the area is exactly
//! `(x1 - x0) * (y1 - y0)`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(row, col)` pixel coordinate.
pub type Cell = (usize, usize);

/// Axis-aligned rectangle in pixel coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::input(format!(
                "box ({x0},{y0},{x1},{y1}) has non-positive area"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    #[inline]
    pub fn x0(&self) -> u32 {
        self.x0
    }

    #[inline]
    pub fn y0(&self) -> u32 {
        self.y0
    }

    #[inline]
    pub fn x1(&self) -> u32 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> u32 {
        self.y1
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    #[inline]
    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Centre and size as reals, `(cx, cy, w, h)`.
    pub fn center_size(&self) -> (f64, f64, f64, f64) {
        let w = f64::from(self.width());
        let h = f64::from(self.height());
        (
            f64::from(self.x0) + 0.5 * w,
            f64::from(self.y0) + 0.5 * h,
            w,
            h,
        )
    }

    pub fn contains_cell(&self, (row, col): Cell) -> bool {
        let (r, c) = (row as u64, col as u64);
        u64::from(self.y0) <= r && r < u64::from(self.y1) && u64::from(self.x0) <= c && c < u64::from(self.x1)
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// True when the box fits inside an `height` x `width` image.
    pub fn fits(&self, height: u32, width: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        u64::from(w) * u64::from(h)
    }

    /// Smallest box containing both.
    pub fn union_rect(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;

    fn try_from([x0, y0, x1, y1]: [u32; 4]) -> Result<Self> {
        BBox::new(x0, y0, x1, y1)
    }
}

/// Intersection over union under the half-open convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Clamp a possibly out-of-range rectangle to `[0, width] x [0, height]`.
///
/// Coordinates are signed so callers can pass intermediate results that
/// stick out past the top-left corner.
pub fn clip_box(x0: i64, y0: i64, x1: i64, y1: i64, height: u32, width: u32) -> Result<BBox> {
    if height == 0 || width == 0 {
        return Err(Error::input("image dimensions must be positive"));
    }
    let cx0 = x0.clamp(0, i64::from(width));
    let cx1 = x1.clamp(0, i64::from(width));
    let cy0 = y0.clamp(0, i64::from(height));
    let cy1 = y1.clamp(0, i64::from(height));
    if cx0 >= cx1 || cy0 >= cy1 {
        return Err(Error::input(format!(
            "box ({x0},{y0},{x1},{y1}) is empty inside a {height}x{width} image"
        )));
    }
    // All four values are within [0, u32::MAX] after clamping.
    BBox::new(cx0 as u32, cy0 as u32, cx1 as u32, cy1 as u32)
}

/// Greedy non-maximum suppression.
///
/// Returns retained indices ordered by descending score; equal scores keep
/// the lower index first. A box is suppressed when its IoU with an already
/// retained box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::input(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::input(format!(
            "nms: IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::input(format!("nms: score {i} is not finite")));
    }

    let order = descending_order(scores);
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[idx]) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    Ok(keep)
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::input(format!(
                "grid of {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Iterator over true cells in row-major order.
    pub fn true_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let w = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// 8-connected components of the true cells.
///
/// Components are emitted in row-major order of their first cell; cells in a
/// component are listed in breadth-first discovery order.
pub fn connected_components(grid: &BinaryGrid) -> Vec<Vec<Cell>> {
    let (h, w) = (grid.height, grid.width);
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..h * w {
        if !grid.cells[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            component.push((r, c));
            let r_lo = r.saturating_sub(1);
            let r_hi = (r + 1).min(h - 1);
            let c_lo = c.saturating_sub(1);
            let c_hi = (c + 1).min(w - 1);
            for nr in r_lo..=r_hi {
                for nc in c_lo..=c_hi {
                    let n = nr * w + nc;
                    if grid.cells[n] && !visited[n] {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        components.push(component);
    }
    components
}

/// Smallest box containing every cell.
pub fn min_bounding_rect(component: &[Cell]) -> Result<BBox> {
    let (&(r0, c0), rest) = component
        .split_first()
        .ok_or_else(|| Error::input("cannot bound an empty component"))?;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
    for &(r, c) in rest {
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::input(format!("cell coordinate {v} exceeds u32")))
    };
    BBox::new(
        to_u32(cmin)?,
        to_u32(rmin)?,
        to_u32(cmax + 1)?,
        to_u32(rmax + 1)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 5, 4, 2).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert_eq!(iou(&b(0, 0, 10, 10), &b(20, 20, 30, 30)), 0.0);
        // 5x5 intersection over 100 + 100 - 25.
        let v = iou(&b(0, 0, 10, 10), &b(5, 5, 15, 15));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(10, 0, 20, 10)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[b(0, 0, 4, 4)], &[0.3], 0.5).unwrap(), vec![0]);
        let same = [b(0, 0, 10, 10), b(0, 0, 10, 10)];
        assert_eq!(nms(&same, &[0.9, 0.8], 0.5).unwrap(), vec![0]);

        // box2 sits inside box0: 60 / 100 = 0.6.
        let boxes = [b(0, 0, 10, 10), b(50, 50, 60, 60), b(0, 0, 10, 6)];
        assert!((iou(&boxes[0], &boxes[2]) - 0.6).abs() < 1e-12);
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let boxes = [b(0, 0, 10, 10), b(0, 0, 10, 10), b(30, 30, 40, 40)];
        assert_eq!(nms(&boxes, &[0.5, 0.5, 0.5], 0.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_errors() {
        assert!(nms(&[b(0, 0, 1, 1)], &[0.1, 0.2], 0.5).is_err());
        assert!(nms(&[b(0, 0, 1, 1)], &[0.1], 1.0).is_err());
        assert!(nms(&[b(0, 0, 1, 1)], &[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn components_examples() {
        assert!(connected_components(&BinaryGrid::new(4, 4)).is_empty());

        let mut g = BinaryGrid::new(4, 4);
        g.set(2, 1, true);
        let comps = connected_components(&g);
        assert_eq!(comps, vec![vec![(2, 1)]]);

        let mut g = BinaryGrid::new(4, 4);
        g.set(0, 0, true);
        g.set(1, 1, true);
        assert_eq!(connected_components(&g).len(), 1);
    }

    #[test]
    fn components_are_ordered_by_first_cell() {
        let mut g = BinaryGrid::new(5, 5);
        g.set(4, 0, true);
        g.set(0, 4, true);
        g.set(1, 4, true);
        let comps = connected_components(&g);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0][0], (0, 4));
        assert_eq!(comps[1], vec![(4, 0)]);
    }

    #[test]
    fn bounding_rect_examples() {
        assert_eq!(min_bounding_rect(&[(3, 4)]).unwrap(), b(4, 3, 5, 4));
        assert_eq!(min_bounding_rect(&[(0, 0), (2, 2)]).unwrap(), b(0, 0, 3, 3));
        // L shape: vertical bar in col 2 for rows 1..=5, foot along row 5 to col 7.
        let mut l: Vec<Cell> = (1..=5).map(|r| (r, 2)).collect();
        l.extend((3..=7).map(|c| (5, c)));
        assert_eq!(min_bounding_rect(&l).unwrap(), b(2, 1, 8, 6));
        assert!(min_bounding_rect(&[]).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_box(0, 0, 10, 10, 100, 100).unwrap(), b(0, 0, 10, 10));
        assert_eq!(clip_box(-5, -5, 10, 10, 100, 100).unwrap(), b(0, 0, 10, 10));
        assert_eq!(clip_box(90, 90, 120, 130, 100, 100).unwrap(), b(90, 90, 100, 100));
        assert!(clip_box(120, 0, 130, 10, 100, 100).is_err());
        assert!(clip_box(-10, -10, 0, 5, 100, 100).is_err());
    }

    #[test]
    fn serde_as_array() {
        let s = serde_json::to_string(&b(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..50, 0u32..50, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    fn arb_grid() -> impl Strategy<Value = BinaryGrid> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(proptest::bool::weighted(0.4), h * w)
                .prop_map(move |cells| BinaryGrid::from_cells(h, w, cells).unwrap())
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn components_partition_true_cells(g in arb_grid()) {
            let comps = connected_components(&g);
            let mut seen = BinaryGrid::new(g.height(), g.width());
            for comp in &comps {
                for &(r, c) in comp {
                    prop_assert!(g.get(r, c));
                    prop_assert!(!seen.get(r, c), "cell in two components");
                    seen.set(r, c, true);
                }
            }
            prop_assert_eq!(seen, g);
        }

        #[test]
        fn bounding_rect_is_tight(g in arb_grid()) {
            for comp in connected_components(&g) {
                let rect = min_bounding_rect(&comp).unwrap();
                prop_assert!(comp.iter().all(|&cell| rect.contains_cell(cell)));
                // Every side touches at least one cell.
                prop_assert!(comp.iter().any(|&(r, _)| r as u32 == rect.y0()));
                prop_assert!(comp.iter().any(|&(r, _)| r as u32 + 1 == rect.y1()));
                prop_assert!(comp.iter().any(|&(_, c)| c as u32 == rect.x0()));
                prop_assert!(comp.iter().any(|&(_, c)| c as u32 + 1 == rect.x1()));
            }
        }

        #[test]
        fn nms_is_permutation_invariant(
            boxes in proptest::collection::vec(arb_box(), 1..15),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = boxes.len();
            // Distinct scores.
            let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / (n as f64 + 1.0)).collect();
            let base: Vec<(u32, u32, u32, u32, u64)> = nms(&boxes, &scores, 0.5)
                .unwrap()
                .into_iter()
                .map(|i| (boxes[i].x0, boxes[i].y0, boxes[i].x1, boxes[i].y1, scores[i].to_bits()))
                .collect();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let permuted: Vec<(u32, u32, u32, u32, u64)> = nms(&pb, &ps, 0.5)
                .unwrap()
                .into_iter()
                .map(|i| (pb[i].x0, pb[i].y0, pb[i].x1, pb[i].y1, ps[i].to_bits()))
                .collect();
            prop_assert_eq!(base, permuted);
        }
    }
}

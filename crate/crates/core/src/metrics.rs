//! Dice, IoU and HD95 on binary masks.

use crate::error::{Error, Result};
use crate::tensor::{to_f64, Real, Tensor};

/// Side length of the normalized coordinate domain used by HD95.
pub const HD_DOMAIN: f64 = 224.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Invalid(format!("{} cells for a {height}x{width} mask", cells.len())));
        }
        Ok(BinaryMask { height, width, cells })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, cells: vec![false; height * width] }
    }

    /// Thresholds probabilities at 0.5 (inclusive).
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p >= 0.5).collect())
    }

    /// Binarizes one `[1, H, W]` or `[H, W]` plane.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if t.numel() != h * w {
            return Err(Error::Invalid(format!("expected a single plane, got {s:?}")));
        }
        Self::new(h, w, t.data().iter().map(|&v| to_f64(v) >= 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.width + j] = v;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with at least one 4-neighbour in the background;
    /// outside the grid counts as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if !self.get(i, j) {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i + 1 == h
                    || j + 1 == w
                    || !self.get(i - 1, j)
                    || !self.get(i + 1, j)
                    || !self.get(i, j - 1)
                    || !self.get(i, j + 1);
                if edge {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Copy without 4-connected foreground components smaller than `min_area`.
    pub fn without_small_components(&self, min_area: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        let mut seen = vec![false; h * w];
        let mut stack = Vec::new();
        let mut component = Vec::new();
        for start in 0..h * w {
            if !self.cells[start] || seen[start] {
                continue;
            }
            component.clear();
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                component.push(idx);
                let (i, j) = (idx / w, idx % w);
                let mut visit = |n: usize| {
                    if self.cells[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                };
                if i > 0 {
                    visit(idx - w);
                }
                if i + 1 < h {
                    visit(idx + w);
                }
                if j > 0 {
                    visit(idx - 1);
                }
                if j + 1 < w {
                    visit(idx + 1);
                }
            }
            if component.len() < min_area {
                for &idx in &component {
                    out.cells[idx] = false;
                }
            }
        }
        out
    }
}

fn same_size(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Invalid(format!(
            "mask resolution mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `(dice, iou)`; two empty masks score `(1, 1)`.
pub fn dice_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    same_size(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.cells.iter().zip(&gt.cells) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdOptions {
    /// Components below this area are removed from both masks first.
    pub min_component_area: usize,
}

impl Default for HdOptions {
    fn default() -> Self {
        HdOptions { min_component_area: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    /// Set when either mask had no foreground after denoising; `value` is then
    /// the domain diagonal.
    pub empty: bool,
}

/// Index (0-based) of the nearest-rank 95th percentile in a sorted list of `n`.
pub fn percentile95_index(n: usize) -> usize {
    (95 * n).div_ceil(100).max(1) - 1
}

/// Squared distance in the normalized domain.
#[inline]
pub fn scaled_sq_distance(a: (usize, usize), b: (usize, usize), sy: f64, sx: f64) -> f64 {
    let dy = (a.0 as f64 - b.0 as f64) * sy;
    let dx = (a.1 as f64 - b.1 as f64) * sx;
    dy * dy + dx * dx
}

/// Distance from each point of `from` to its nearest point of `to`.
/// `to` is bucketed by row so the search can stop once the row gap alone
/// exceeds the best distance found.
fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)], rows: usize, sy: f64, sx: f64) -> Vec<f64> {
    let mut by_row: Vec<Vec<(usize, usize)>> = vec![Vec::new(); rows];
    for &p in to {
        by_row[p.0].push(p);
    }
    from.iter()
        .map(|&a| {
            let mut best = f64::INFINITY;
            for gap in 0..rows {
                let dy = gap as f64 * sy;
                if dy * dy > best {
                    break;
                }
                let mut scan = |r: usize| {
                    for &b in &by_row[r] {
                        best = best.min(scaled_sq_distance(a, b, sy, sx));
                    }
                };
                if a.0 >= gap {
                    scan(a.0 - gap);
                }
                if gap > 0 && a.0 + gap < rows {
                    scan(a.0 + gap);
                }
            }
            best.sqrt()
        })
        .collect()
}

pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Hd95> {
    hd95_with(pred, gt, HdOptions::default())
}

pub fn hd95_with(pred: &BinaryMask, gt: &BinaryMask, opts: HdOptions) -> Result<Hd95> {
    same_size(pred, gt)?;
    let a = pred.without_small_components(opts.min_component_area);
    let b = gt.without_small_components(opts.min_component_area);
    if a.is_empty() || b.is_empty() {
        return Ok(Hd95 { value: HD_DOMAIN * std::f64::consts::SQRT_2, empty: true });
    }
    let sy = HD_DOMAIN / a.height as f64;
    let sx = HD_DOMAIN / a.width as f64;
    let (ba, bb) = (a.boundary(), b.boundary());
    let mut d = nearest_distances(&ba, &bb, a.height, sy, sx);
    d.extend(nearest_distances(&bb, &ba, a.height, sy, sx));
    d.sort_by(f64::total_cmp);
    Ok(Hd95 { value: d[percentile95_index(d.len())], empty: false })
}

/// Mean Dice, IoU and HD95 over a set of prediction/target pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub empty_hd: usize,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>) -> Result<Self> {
        let mut s = MetricSummary::default();
        for (p, g) in pairs {
            let (d, i) = dice_iou(p, g)?;
            let h = hd95(p, g)?;
            s.dice += d;
            s.iou += i;
            s.hd95 += h.value;
            s.empty_hd += h.empty as usize;
            s.count += 1;
        }
        if s.count > 0 {
            let n = s.count as f64;
            s.dice /= n;
            s.iou /= n;
            s.hd95 /= n;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(h, w, rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect()).unwrap()
    }

    #[test]
    fn dice_iou_examples() {
        let a = mask(&["##..", "...."]);
        assert_eq!(dice_iou(&a, &a).unwrap(), (1.0, 1.0));
        let b = mask(&["..##", "...."]);
        assert_eq!(dice_iou(&a, &b).unwrap(), (0.0, 0.0));
        let c = mask(&[".##.", "...."]);
        let (d, i) = dice_iou(&a, &c).unwrap();
        assert_eq!(d, 0.5);
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(2, 4);
        assert_eq!(dice_iou(&e, &e).unwrap(), (1.0, 1.0));
        assert!(dice_iou(&a, &BinaryMask::empty(4, 2)).is_err());
    }

    #[test]
    fn percentile_index() {
        assert_eq!(percentile95_index(1), 0);
        assert_eq!(percentile95_index(20), 18);
        assert_eq!(percentile95_index(21), 19);
        assert_eq!(percentile95_index(100), 94);
    }

    #[test]
    fn two_points_at_distance_five() {
        let mut a = BinaryMask::empty(224, 224);
        let mut b = BinaryMask::empty(224, 224);
        a.set(10, 10, true);
        b.set(13, 14, true);
        let opts = HdOptions { min_component_area: 1 };
        let h = hd95_with(&a, &b, opts).unwrap();
        assert_eq!(h, Hd95 { value: 5.0, empty: false });
        // Same geometry at 16x16 is scaled by 14.
        let mut a = BinaryMask::empty(16, 16);
        let mut b = BinaryMask::empty(16, 16);
        a.set(1, 1, true);
        b.set(4, 5, true);
        assert_eq!(hd95_with(&a, &b, opts).unwrap().value, 70.0);
    }

    #[test]
    fn small_components_are_removed() {
        let m = mask(&["##...", "##..#", ".....", "#...."]);
        let d = m.without_small_components(3);
        assert_eq!(d, mask(&["##...", "##...", ".....", "....."]));
        let h = hd95(&m, &mask(&[".....", ".....", ".....", "....#"])).unwrap();
        assert!(h.empty);
        assert_eq!(h.value, 224.0 * 2f64.sqrt());
    }

    #[test]
    fn boundary_of_filled_square() {
        let m = mask(&["###", "###", "###"]);
        assert_eq!(m.boundary().len(), 8);
        assert!(!m.boundary().contains(&(1, 1)));
        let m = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        assert_eq!(m.boundary().len(), 8);
        assert_eq!(hd95(&m, &m).unwrap().value, 0.0);
    }
}

//! Horizontal partitioning of the patch grid into body regions.

use std::ops::Range;

use crate::error::{Error, Result};

/// Assignment of contiguous patch-grid rows to K top-to-bottom regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLayout {
    pub grid_rows: usize,
    pub row_ranges: Vec<Range<usize>>,
}

/// Split `grid_rows` rows into `k` contiguous regions as evenly as possible,
/// with earlier (upper) regions taking the extra row on uneven splits.
pub fn build_region_layout(grid_rows: usize, k: usize) -> Result<RegionLayout> {
    if k == 0 || k > grid_rows {
        return Err(Error::Layout(format!(
            "cannot split {grid_rows} grid rows into {k} regions"
        )));
    }
    let base = grid_rows / k;
    let extra = grid_rows % k;
    let mut row_ranges = Vec::with_capacity(k);
    let mut start = 0;
    for region in 0..k {
        let len = base + usize::from(region < extra);
        row_ranges.push(start..start + len);
        start += len;
    }
    Ok(RegionLayout {
        grid_rows,
        row_ranges,
    })
}

impl RegionLayout {
    pub fn k(&self) -> usize {
        self.row_ranges.len()
    }

    /// Region id owning the given grid row.
    pub fn region_of_row(&self, row: usize) -> usize {
        self.row_ranges
            .iter()
            .position(|r| r.contains(&row))
            .expect("row within grid")
    }

    /// Total mapping patch index -> region id for a `grid_rows x grid_cols`
    /// patch grid in row-major order.
    pub fn patch_to_region(&self, grid_cols: usize) -> Vec<usize> {
        (0..self.grid_rows * grid_cols)
            .map(|p| self.region_of_row(p / grid_cols))
            .collect()
    }

    /// Patch-index range for one region (row-major grid).
    pub fn patch_range(&self, region: usize, grid_cols: usize) -> Range<usize> {
        let rows = &self.row_ranges[region];
        rows.start * grid_cols..rows.end * grid_cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_split() {
        let layout = build_region_layout(16, 4).unwrap();
        assert_eq!(layout.row_ranges, vec![0..4, 4..8, 8..12, 12..16]);
    }

    #[test]
    fn single_region_covers_everything() {
        let layout = build_region_layout(16, 1).unwrap();
        assert_eq!(layout.row_ranges, vec![0..16]);
    }

    #[test]
    fn remainder_goes_to_upper_regions() {
        let layout = build_region_layout(10, 4).unwrap();
        assert_eq!(layout.row_ranges, vec![0..3, 3..6, 6..8, 8..10]);
        let covered: usize = layout.row_ranges.iter().map(|r| r.len()).sum();
        assert_eq!(covered, 10);
    }

    #[test]
    fn too_many_regions_rejected() {
        assert!(build_region_layout(3, 4).is_err());
        assert!(build_region_layout(3, 0).is_err());
    }

    #[test]
    fn patch_mapping_is_total_and_exhaustive() {
        let layout = build_region_layout(7, 3).unwrap();
        let map = layout.patch_to_region(5);
        assert_eq!(map.len(), 35);
        let mut counts = vec![0usize; 3];
        for r in &map {
            counts[*r] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 35);
        for (region, range) in layout.row_ranges.iter().enumerate() {
            assert_eq!(counts[region], range.len() * 5);
        }
    }
}

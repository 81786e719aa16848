//! Regular BEV cell lattice shared by observations, feature maps and query maps.

use serde::{Deserialize, Serialize};

use crate::geometry::Point;

/// `height x width` cells of side `cell_size`; `origin` is the outer corner of cell `(0, 0)`.
///
/// Rows advance along +y, columns along +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub origin: Point,
}

impl GridSpec {
    /// Grid centered on `center`.
    pub fn centered(height: usize, width: usize, cell_size: f64, center: Point) -> Self {
        GridSpec {
            height,
            width,
            cell_size,
            origin: Point::new(
                center.x - 0.5 * width as f64 * cell_size,
                center.y - 0.5 * height as f64 * cell_size,
            ),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size,
            self.origin.y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p.x - self.origin.x) / self.cell_size).floor();
        let r = ((p.y - self.origin.y) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Row-major iterator over `(row, col)`.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| (r, c)))
    }
}

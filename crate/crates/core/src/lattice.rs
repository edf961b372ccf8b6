//! Regular grid lattices and the stacked multivariate neighborhood structure.
//!
//! A [`GridLattice`] is an `nx × ny` rectangular grid with first-order (rook)
//! adjacency and free boundaries (no wraparound). Locations are numbered
//! row-major from the south-west corner: location `i = row·nx + col`.
//!
//! A [`StackedLattice`] layers `p` variables onto every location and owns the
//! flat indexing convention used by every downstream module: component
//! `(location i, variable j)` lives at flat index `i·p + j` (location-major,
//! variable-minor). Keeping a single ordering everywhere is deliberate — the
//! precision assembly, the spatial-effect vectors, and the archive layout all
//! share it, so there is no permutation to get wrong at module boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("grid dimensions must be positive, got {nx}x{ny}")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("variable count p must be positive")]
    ZeroVariables,
    #[error("index out of range: {what} = {got}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },
}

/// Neighborhood order of the lattice graph.
///
/// Only first-order rook adjacency (the four cardinal neighbors) is
/// implemented; the enum exists so higher-order neighborhoods can be added
/// without touching downstream code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyOrder {
    #[default]
    Rook,
}

/// A rectangular grid with symmetric first-order adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLattice {
    nx: usize,
    ny: usize,
    order: AdjacencyOrder,
    /// Per-location sorted lists of adjacent location indices.
    neighbor_lists: Vec<Vec<usize>>,
}

/// Builds the lattice graph for an `nx × ny` grid.
///
/// Row-major location numbering: location `i = row·nx + col`, with `col`
/// increasing eastward and `row` increasing northward.
pub fn build_grid_lattice(
    nx: usize,
    ny: usize,
    order: AdjacencyOrder,
) -> Result<GridLattice, LatticeError> {
    if nx == 0 || ny == 0 {
        return Err(LatticeError::EmptyGrid { nx, ny });
    }
    let n = nx * ny;
    let mut neighbor_lists = vec![Vec::new(); n];
    let AdjacencyOrder::Rook = order;
    for row in 0..ny {
        for col in 0..nx {
            let i = row * nx + col;
            let nb = &mut neighbor_lists[i];
            // Ascending order by construction: S, W, E, N.
            if row > 0 {
                nb.push(i - nx);
            }
            if col > 0 {
                nb.push(i - 1);
            }
            if col + 1 < nx {
                nb.push(i + 1);
            }
            if row + 1 < ny {
                nb.push(i + nx);
            }
        }
    }
    Ok(GridLattice {
        nx,
        ny,
        order,
        neighbor_lists,
    })
}

impl GridLattice {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Total number of locations, `nx·ny`.
    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn order(&self) -> AdjacencyOrder {
        self.order
    }

    /// Sorted adjacent location indices of location `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_lists[i]
    }

    /// Grid coordinates `(col, row)` of location `i`.
    pub fn grid_coords(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }

    /// Location index at grid coordinates `(col, row)`.
    pub fn location_at(&self, col: usize, row: usize) -> usize {
        row * self.nx + col
    }

    /// Every undirected adjacency exactly once, oriented `(i, k)` with
    /// `i > k`, sorted lexicographically.
    ///
    /// The orientation matters: the asymmetric cross-variable dependence
    /// block is attached to the `i > k` direction, so a deterministic edge
    /// order makes the assembled precision reproducible.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.edge_count());
        for (i, nbs) in self.neighbor_lists.iter().enumerate() {
            for &k in nbs {
                if k < i {
                    edges.push((i, k));
                }
            }
        }
        edges
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbor_lists.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// `p` variables stacked onto every location of a grid lattice, treated as a
/// single graph on `n·p` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedLattice {
    grid: GridLattice,
    p: usize,
}

impl StackedLattice {
    pub fn new(grid: GridLattice, p: usize) -> Result<Self, LatticeError> {
        if p == 0 {
            return Err(LatticeError::ZeroVariables);
        }
        Ok(StackedLattice { grid, p })
    }

    pub fn grid(&self) -> &GridLattice {
        &self.grid
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Flat dimension `n·p` of the stacked graph.
    pub fn dim(&self) -> usize {
        self.grid.n() * self.p
    }

    /// Checked flat index of `(location i, variable j)`.
    pub fn flat_index(&self, i: usize, j: usize) -> Result<usize, LatticeError> {
        if i >= self.n() {
            return Err(LatticeError::IndexOutOfRange {
                what: "location",
                got: i,
                limit: self.n(),
            });
        }
        if j >= self.p {
            return Err(LatticeError::IndexOutOfRange {
                what: "variable",
                got: j,
                limit: self.p,
            });
        }
        Ok(self.flat(i, j))
    }

    /// Unchecked-in-release flat index, for hot paths.
    #[inline]
    pub fn flat(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n() && j < self.p);
        i * self.p + j
    }

    /// Inverse of [`flat`](Self::flat): `(location, variable)` of a flat index.
    #[inline]
    pub fn unflatten(&self, a: usize) -> (usize, usize) {
        debug_assert!(a < self.dim());
        (a / self.p, a % self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_empty_grids() {
        assert!(build_grid_lattice(0, 3, AdjacencyOrder::Rook).is_err());
        assert!(build_grid_lattice(3, 0, AdjacencyOrder::Rook).is_err());
    }

    #[test]
    fn two_by_two_neighbors() {
        let g = build_grid_lattice(2, 2, AdjacencyOrder::Rook).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbors(1), &[0, 3]);
        assert_eq!(g.neighbors(2), &[0, 3]);
        assert_eq!(g.neighbors(3), &[1, 2]);
    }

    #[test]
    fn path_graph_neighbors() {
        let g = build_grid_lattice(3, 1, AdjacencyOrder::Rook).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn interior_edge_corner_degrees() {
        let g = build_grid_lattice(5, 4, AdjacencyOrder::Rook).unwrap();
        // corner, non-corner edge, interior
        assert_eq!(g.neighbors(0).len(), 2);
        assert_eq!(g.neighbors(2).len(), 3);
        assert_eq!(g.neighbors(g.location_at(2, 1)).len(), 4);
    }

    #[test]
    fn paper_scale_edge_count() {
        let g = build_grid_lattice(44, 56, AdjacencyOrder::Rook).unwrap();
        assert_eq!(g.n(), 2464);
        // nx*(ny-1) vertical + (nx-1)*ny horizontal adjacencies
        assert_eq!(g.edge_count(), 44 * 55 + 43 * 56);
        assert_eq!(g.edge_list().len(), 4828);
    }

    #[test]
    fn edge_list_two_by_two() {
        let g = build_grid_lattice(2, 2, AdjacencyOrder::Rook).unwrap();
        assert_eq!(g.edge_list(), vec![(1, 0), (2, 0), (3, 1), (3, 2)]);
    }

    #[test]
    fn edge_list_path() {
        let g = build_grid_lattice(3, 1, AdjacencyOrder::Rook).unwrap();
        assert_eq!(g.edge_list(), vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn flat_index_examples() {
        let g = build_grid_lattice(2, 2, AdjacencyOrder::Rook).unwrap();
        let s = StackedLattice::new(g, 2).unwrap();
        assert_eq!(s.flat_index(0, 0).unwrap(), 0);
        assert_eq!(s.flat_index(1, 0).unwrap(), 2);
        assert_eq!(s.flat_index(3, 1).unwrap(), 7);
        assert!(s.flat_index(4, 0).is_err());
        assert!(s.flat_index(0, 2).is_err());
    }

    proptest! {
        #[test]
        fn adjacency_is_symmetric(nx in 1usize..9, ny in 1usize..9) {
            let g = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).unwrap();
            for i in 0..g.n() {
                prop_assert!(!g.neighbors(i).contains(&i));
                for &k in g.neighbors(i) {
                    prop_assert!(k < g.n());
                    prop_assert!(g.neighbors(k).contains(&i));
                }
            }
        }

        #[test]
        fn edge_list_covers_each_adjacency_once(nx in 1usize..9, ny in 1usize..9) {
            let g = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).unwrap();
            let edges = g.edge_list();
            prop_assert_eq!(edges.len(), g.edge_count());
            let mut sorted = edges.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(&sorted, &edges); // sorted and duplicate-free
            for &(i, k) in &edges {
                prop_assert!(i > k);
                prop_assert!(g.neighbors(i).contains(&k));
            }
        }

        #[test]
        fn flat_index_round_trips(nx in 1usize..6, ny in 1usize..6, p in 1usize..4) {
            let g = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).unwrap();
            let s = StackedLattice::new(g, p).unwrap();
            for i in 0..s.n() {
                for j in 0..p {
                    let a = s.flat_index(i, j).unwrap();
                    prop_assert_eq!(a, i * p + j);
                    prop_assert_eq!(s.unflatten(a), (i, j));
                }
            }
        }

        #[test]
        fn grid_coords_round_trip(nx in 1usize..9, ny in 1usize..9) {
            let g = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).unwrap();
            for i in 0..g.n() {
                let (x, y) = g.grid_coords(i);
                prop_assert_eq!(g.location_at(x, y), i);
            }
        }
    }
}

//! Complete b-ary tree topology in breadth-first layout, regions (blocks,
//! subtrees, level forests) and boundary conditions on the children of the
//! leaves.

use alloc::string::String;
use alloc::{format, vec, vec::Vec};
use core::fmt;

use crate::model::Spin;

/// Errors from tree construction and region queries.
#[derive(Clone, Debug, PartialEq)]
pub enum TreeError {
    SizeOverflow(String),
    UnknownVertex(usize),
    BadRegion(String),
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::SizeOverflow(msg) => write!(f, "tree too large: {msg}"),
            TreeError::UnknownVertex(v) => write!(f, "unknown vertex id {v}"),
            TreeError::BadRegion(msg) => write!(f, "bad region: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TreeError {}

const MAX_TOTAL_VERTICES: usize = 1 << 31;

/// A complete b-ary tree of depth `m` stored in breadth-first order.
///
/// Interior vertices get ids `0..n` (root `0`, level by level); the boundary
/// vertices -- the children of the leaves -- follow at `n..n + b^(m+1)`.
/// With this layout the children of vertex `v` are the contiguous range
/// `b*v+1 ..= b*v+b`, and levels and blocks are index ranges.
#[derive(Clone, Debug)]
pub struct TreeTopology {
    b: usize,
    depth: usize,
    n: usize,
    boundary_count: usize,
    /// `level_start[l]` is the id of the first vertex on level `l`,
    /// for `l = 0..=m+1` (the last entry starts the boundary row).
    level_start: Vec<usize>,
}

impl TreeTopology {
    pub fn build(b: usize, depth: usize) -> Result<Self, TreeError> {
        if b < 2 {
            return Err(TreeError::BadRegion(format!("branching b = {b} < 2")));
        }
        let mut level_start = Vec::with_capacity(depth + 2);
        let mut first = 0usize;
        let mut width = 1usize;
        for _ in 0..=depth + 1 {
            level_start.push(first);
            first = first
                .checked_add(width)
                .ok_or_else(|| TreeError::SizeOverflow(format!("b={b} depth={depth}")))?;
            width = width
                .checked_mul(b)
                .ok_or_else(|| TreeError::SizeOverflow(format!("b={b} depth={depth}")))?;
            if first > MAX_TOTAL_VERTICES {
                return Err(TreeError::SizeOverflow(format!("b={b} depth={depth}")));
            }
        }
        let n = level_start[depth + 1];
        let boundary_count = first - n;
        Ok(TreeTopology {
            b,
            depth,
            n,
            boundary_count,
            level_start,
        })
    }

    pub fn branching(&self) -> usize {
        self.b
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of interior vertices, `(b^(m+1) - 1)/(b - 1)`.
    pub fn vertex_count(&self) -> usize {
        self.n
    }

    /// Number of boundary vertices, `b^(m+1)`.
    pub fn boundary_count(&self) -> usize {
        self.boundary_count
    }

    /// Interior plus boundary vertices.
    pub fn total_vertices(&self) -> usize {
        self.n + self.boundary_count
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        v >= self.n
    }

    pub fn root() -> usize {
        0
    }

    /// Level of a vertex; boundary vertices live on level `m+1`.
    pub fn level(&self, v: usize) -> usize {
        match self.level_start.binary_search(&v) {
            Ok(l) => l,
            Err(ins) => ins - 1,
        }
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        if v == 0 || v >= self.total_vertices() {
            None
        } else if v < self.n {
            Some((v - 1) / self.b)
        } else {
            Some(self.level_start[self.depth] + (v - self.n) / self.b)
        }
    }

    /// Children of a vertex; for leaves these are boundary ids.
    pub fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let (first, count) = if v >= self.n {
            (0, 0)
        } else if self.level(v) == self.depth {
            (self.n + (v - self.level_start[self.depth]) * self.b, self.b)
        } else {
            (self.b * v + 1, self.b)
        };
        (0..count).map(move |j| first + j)
    }

    /// All edges of `T` together with the boundary edges, as (parent, child).
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |v| self.children(v).map(move |c| (v, c)))
    }

    /// Ids of the level-`l` row, boundary row included for `l = m+1`.
    pub fn level_row(&self, l: usize) -> core::ops::Range<usize> {
        let start = self.level_start[l];
        let width = pow_usize(self.b, l);
        start..start + width
    }

    /// Interior sites at exactly `dist` levels below `x`, or the boundary
    /// row below `x` when the distance reaches `m+1 - level(x)`.
    pub fn row_below(&self, x: usize, dist: usize) -> Result<Vec<usize>, TreeError> {
        if x >= self.n {
            return Err(TreeError::UnknownVertex(x));
        }
        let lx = self.level(x);
        if lx + dist > self.depth + 1 {
            return Err(TreeError::BadRegion(format!(
                "distance {dist} below level {lx} leaves the tree"
            )));
        }
        let mut row = vec![x];
        for _ in 0..dist {
            let mut next = Vec::with_capacity(row.len() * self.b);
            for &v in &row {
                next.extend(self.children(v));
            }
            row = next;
        }
        Ok(row)
    }

    /// The subtree `T_x` as a vertex list (interior sites only).
    pub fn subtree(&self, x: usize) -> Result<Region, TreeError> {
        self.block(x, self.depth + 1 - self.level(x))
    }

    /// The block `B_{x,l}`: `min(l, levels below x)` levels rooted at `x`.
    pub fn block(&self, x: usize, l: usize) -> Result<Region, TreeError> {
        if x >= self.n {
            return Err(TreeError::UnknownVertex(x));
        }
        if l == 0 {
            return Err(TreeError::BadRegion("block needs at least one level".into()));
        }
        let levels = l.min(self.depth + 1 - self.level(x));
        let mut vertices = Vec::new();
        let mut row = vec![x];
        for _ in 0..levels {
            vertices.extend_from_slice(&row);
            let mut next = Vec::with_capacity(row.len() * self.b);
            for &v in &row {
                next.extend(self.children(v).filter(|&c| c < self.n));
            }
            row = next;
        }
        Ok(Region { vertices })
    }

    /// The forest `F_i` of the lowest `i` levels of `T`; `F_{m+1} = T`.
    pub fn level_forest(&self, i: usize) -> Result<Region, TreeError> {
        if i > self.depth + 1 {
            return Err(TreeError::BadRegion(format!(
                "forest of {i} levels in a tree of depth {}",
                self.depth
            )));
        }
        let first = self.level_start[self.depth + 1 - i];
        Ok(Region {
            vertices: (first..self.n).collect(),
        })
    }
}

fn pow_usize(b: usize, e: usize) -> usize {
    let mut r = 1usize;
    for _ in 0..e {
        r *= b;
    }
    r
}

/// A subset of interior vertices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub vertices: Vec<usize>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.vertices.contains(&v)
    }

    /// The inner boundary: neighbors of the region in `(T u dT) \ A`.
    pub fn boundary(&self, tree: &TreeTopology) -> Vec<usize> {
        let mut out = Vec::new();
        for &v in &self.vertices {
            if let Some(p) = tree.parent(v) {
                if !self.contains(p) && !out.contains(&p) {
                    out.push(p);
                }
            }
            for c in tree.children(v) {
                if !self.contains(c) && !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// A boundary condition: either free (no boundary factors at all) or a
/// fixed spin for every vertex of the boundary row, in breadth-first order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoundaryCondition {
    Free,
    Fixed(Vec<Spin>),
}

impl BoundaryCondition {
    pub fn all_constant(tree: &TreeTopology, s: Spin) -> Self {
        BoundaryCondition::Fixed(vec![s; tree.boundary_count()])
    }

    /// The restriction to the boundary row of the maximum-density hard-core
    /// configuration occupying every even level of the infinite tree.
    pub fn even_occupied(tree: &TreeTopology) -> Self {
        let occ = (tree.depth() + 1) % 2 == 0;
        Self::all_constant(tree, occ as Spin)
    }

    /// Complement of [`BoundaryCondition::even_occupied`].
    pub fn odd_occupied(tree: &TreeTopology) -> Self {
        let occ = (tree.depth() + 1) % 2 == 1;
        Self::all_constant(tree, occ as Spin)
    }

    pub fn fixed_spin(&self, boundary_index: usize) -> Option<Spin> {
        match self {
            BoundaryCondition::Free => None,
            BoundaryCondition::Fixed(v) => Some(v[boundary_index]),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, BoundaryCondition::Free)
    }
}

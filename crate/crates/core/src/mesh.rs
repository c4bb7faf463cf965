//! Forests of quadtrees (2D) and octrees (3D) over a tensor-product root grid.
//!
//! Every cell lives on a global integer lattice: a root spans `2^MAX_LEVEL`
//! lattice units per axis and a cell at level `ℓ` spans `2^(MAX_LEVEL-ℓ)`.
//! Physical coordinates are recovered per axis through the root breakpoints,
//! so roots may be graded while each cell stays an axis-aligned box.
//!
//! Leaves are kept in (root, Morton) order. Entities (vertices, edges, faces)
//! are numbered by first appearance in that order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{math, Error, Result, Vec3};

/// Deepest refinement level representable on the lattice.
pub const MAX_LEVEL: u8 = 20;
const ROOT: i64 = 1 << MAX_LEVEL;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn new(lo: Vec3, hi: Vec3) -> Self {
        Aabb { lo, hi }
    }

    pub fn contains(&self, p: &Vec3, dim: usize, tol: f64) -> bool {
        (0..dim).all(|a| p[a] >= self.lo[a] - tol && p[a] <= self.hi[a] + tol)
    }

    pub fn measure(&self, dim: usize) -> f64 {
        (0..dim).map(|a| self.hi[a] - self.lo[a]).product()
    }
}

/// Tensor-product grid of root cells, given by strictly increasing
/// breakpoints per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RootGrid {
    dim: usize,
    breaks: Vec<Vec<f64>>,
}

impl RootGrid {
    /// `divisions[a]` equal roots along each axis `a < dim`.
    pub fn uniform(domain: &Aabb, dim: usize, divisions: &[usize]) -> Result<Self> {
        check_dim(dim)?;
        if divisions.len() < dim {
            return Err(Error::InvalidGeometry(format!(
                "root grid needs {dim} divisions, got {}",
                divisions.len()
            )));
        }
        let mut breaks = Vec::with_capacity(dim);
        for a in 0..dim {
            let n = divisions[a];
            if n == 0 {
                return Err(Error::InvalidGeometry(format!("root grid division along axis {a} is zero")));
            }
            let (lo, hi) = (domain.lo[a], domain.hi[a]);
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "extent along axis {a} must be positive, got [{lo}, {hi}]"
                )));
            }
            breaks.push((0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect());
        }
        Ok(RootGrid { dim, breaks })
    }

    /// Explicit breakpoints, one strictly increasing list per axis.
    pub fn from_breaks(dim: usize, breaks: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(dim)?;
        if breaks.len() != dim {
            return Err(Error::InvalidGeometry(format!(
                "expected {dim} breakpoint lists, got {}",
                breaks.len()
            )));
        }
        for (a, b) in breaks.iter().enumerate() {
            if b.len() < 2 {
                return Err(Error::InvalidGeometry(format!("axis {a} needs at least two breakpoints")));
            }
            if b.iter().any(|x| !x.is_finite()) || b.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidGeometry(format!(
                    "breakpoints along axis {a} must be finite and strictly increasing"
                )));
            }
        }
        Ok(RootGrid { dim, breaks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn divisions(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.breaks[axis].len() - 1
        } else {
            1
        }
    }

    pub fn breaks(&self, axis: usize) -> &[f64] {
        &self.breaks[axis]
    }

    pub fn domain(&self) -> Aabb {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..self.dim {
            lo[a] = self.breaks[a][0];
            hi[a] = *self.breaks[a].last().unwrap();
        }
        Aabb { lo, hi }
    }

    fn extent(&self, axis: usize) -> i64 {
        if axis < self.dim {
            self.divisions(axis) as i64 * ROOT
        } else {
            0
        }
    }

    fn to_physical(&self, axis: usize, l: i64) -> f64 {
        if axis >= self.dim {
            return 0.0;
        }
        let b = &self.breaks[axis];
        let n = b.len() as i64 - 1;
        let i = (l / ROOT).min(n - 1);
        let t = (l - i * ROOT) as f64 / ROOT as f64;
        let i = i as usize;
        b[i] + t * (b[i + 1] - b[i])
    }

    /// Lattice cell index containing coordinate `x`, or `None` outside.
    fn to_lattice(&self, axis: usize, x: f64) -> Option<i64> {
        let b = &self.breaks[axis];
        let n = b.len() - 1;
        let span = b[n] - b[0];
        let tol = 1e-12 * span;
        if !(x >= b[0] - tol && x <= b[n] + tol) {
            return None;
        }
        let i = b.partition_point(|&v| v <= x).clamp(1, n) - 1;
        let t = (x - b[i]) / (b[i + 1] - b[i]);
        let off = (math::floor(t * ROOT as f64) as i64).clamp(0, ROOT - 1);
        Some(i as i64 * ROOT + off)
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidGeometry(format!("dimension must be 2 or 3, got {dim}")))
    }
}

/// A leaf cell: refinement level and lattice anchor (minimum corner).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub level: u8,
    pub anchor: [i64; 3],
}

impl Cell {
    /// Side length in lattice units.
    pub fn size(&self) -> i64 {
        ROOT >> self.level
    }

    fn contains_lattice(&self, p: &[i64; 3], dim: usize) -> bool {
        let s = self.size();
        (0..dim).all(|a| p[a] >= self.anchor[a] && p[a] < self.anchor[a] + s)
    }
}

/// Per-leaf refinement marks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementFlags {
    marks: Vec<bool>,
}

impl RefinementFlags {
    pub fn none(mesh: &TreeMesh) -> Self {
        RefinementFlags { marks: vec![false; mesh.num_cells()] }
    }

    pub fn all(mesh: &TreeMesh) -> Self {
        RefinementFlags { marks: vec![true; mesh.num_cells()] }
    }

    pub fn from_marks(marks: Vec<bool>) -> Self {
        RefinementFlags { marks }
    }

    pub fn mark(&mut self, cell: usize) {
        self.marks[cell] = true;
    }

    pub fn is_marked(&self, cell: usize) -> bool {
        self.marks[cell]
    }

    pub fn count(&self) -> usize {
        self.marks.iter().filter(|m| **m).count()
    }

    pub fn marks(&self) -> &[bool] {
        &self.marks
    }
}

/// Edge along `axis`, starting at lattice point `corner`, of lattice length `len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub axis: u8,
    pub corner: [i64; 3],
    pub len: i64,
}

/// Square face with normal `axis`, minimum corner `corner`, side `len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaceKey {
    pub axis: u8,
    pub corner: [i64; 3],
    pub len: i64,
}

impl FaceKey {
    /// The two in-plane axes in ascending order.
    pub fn tangent_axes(&self) -> [usize; 2] {
        in_plane_axes(self.axis as usize)
    }
}

/// In-plane axes of a face with normal `axis`, ascending.
pub fn in_plane_axes(axis: usize) -> [usize; 2] {
    match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Edge,
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: usize,
}

/// A hanging edge or face together with the coarse entity containing it.
///
/// `placement` is the sub-box of the owner's normalized parameter space
/// covered by the hanging entity: one interval for an edge owner, two (in
/// the owner face's tangent axes, ascending) for a face owner. An edge lying
/// on the midline of a coarse face has a degenerate interval in one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct HangingEntity {
    pub entity: EntityRef,
    pub owner: EntityRef,
    /// Coarse leaf cell that carries the owner entity.
    pub owner_cell: usize,
    pub placement_lo: [f64; 2],
    pub placement_hi: [f64; 2],
}

/// A hanging vertex, interpolated from the corners of the coarse entity
/// containing it.
#[derive(Debug, Clone, PartialEq)]
pub struct HangingVertex {
    pub vertex: usize,
    pub masters: Vec<(usize, f64)>,
}

/// Balanced leaf mesh with its entity tables. Immutable once built.
#[derive(Debug, Clone)]
pub struct TreeMesh {
    dim: usize,
    roots: RootGrid,
    leaves: Vec<Cell>,
    vertices: Vec<[i64; 3]>,
    edges: Vec<EdgeKey>,
    faces: Vec<FaceKey>,
    cell_vertices: Vec<usize>,
    cell_edges: Vec<usize>,
    cell_faces: Vec<usize>,
    edge_owner: Vec<usize>,
    face_owner: Vec<usize>,
    hanging: Vec<HangingEntity>,
    hanging_vertices: Vec<HangingVertex>,
    edge_hanging: Vec<bool>,
    face_hanging: Vec<bool>,
}

impl TreeMesh {
    /// Uniform level-0 mesh with `root_grid[a]` roots along axis `a`.
    pub fn new_uniform(domain: &Aabb, dim: usize, root_grid: &[usize]) -> Result<Self> {
        Self::from_roots(RootGrid::uniform(domain, dim, root_grid)?)
    }

    /// Level-0 mesh on an arbitrary tensor-product root grid.
    pub fn from_roots(roots: RootGrid) -> Result<Self> {
        let dim = roots.dim();
        let mut leaves = Vec::new();
        let n = [roots.divisions(0), roots.divisions(1), roots.divisions(2)];
        for k in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let anchor = [i as i64 * ROOT, j as i64 * ROOT, if dim == 3 { k as i64 * ROOT } else { 0 }];
                    leaves.push(Cell { level: 0, anchor });
                }
            }
        }
        let mut mesh = TreeMesh::empty(roots);
        leaves.sort_by_key(|c| mesh.key(&c.anchor));
        mesh.leaves = leaves;
        mesh.build_entities();
        Ok(mesh)
    }

    fn empty(roots: RootGrid) -> Self {
        TreeMesh {
            dim: roots.dim(),
            roots,
            leaves: Vec::new(),
            vertices: Vec::new(),
            edges: Vec::new(),
            faces: Vec::new(),
            cell_vertices: Vec::new(),
            cell_edges: Vec::new(),
            cell_faces: Vec::new(),
            edge_owner: Vec::new(),
            face_owner: Vec::new(),
            hanging: Vec::new(),
            hanging_vertices: Vec::new(),
            edge_hanging: Vec::new(),
            face_hanging: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn roots(&self) -> &RootGrid {
        &self.roots
    }

    pub fn domain(&self) -> Aabb {
        self.roots.domain()
    }

    pub fn num_cells(&self) -> usize {
        self.leaves.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.leaves
    }

    pub fn cell(&self, i: usize) -> &Cell {
        &self.leaves[i]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn edge(&self, id: usize) -> &EdgeKey {
        &self.edges[id]
    }

    pub fn face(&self, id: usize) -> &FaceKey {
        &self.faces[id]
    }

    pub fn vertex_lattice(&self, id: usize) -> &[i64; 3] {
        &self.vertices[id]
    }

    pub fn max_level(&self) -> u8 {
        self.leaves.iter().map(|c| c.level).max().unwrap_or(0)
    }

    /// Vertices per cell: 4 in 2D, 8 in 3D; corner `j` has offset bit `a` along axis `a`.
    pub fn vertices_per_cell(&self) -> usize {
        1 << self.dim
    }

    /// Edges per cell: 4 in 2D, 12 in 3D.
    pub fn edges_per_cell(&self) -> usize {
        if self.dim == 2 {
            4
        } else {
            12
        }
    }

    /// Faces per cell: 0 in 2D (the cell itself plays that role), 6 in 3D.
    pub fn faces_per_cell(&self) -> usize {
        if self.dim == 2 {
            0
        } else {
            6
        }
    }

    pub fn cell_vertices(&self, cell: usize) -> &[usize] {
        let n = self.vertices_per_cell();
        &self.cell_vertices[cell * n..(cell + 1) * n]
    }

    /// Global edge ids of a cell. For axis `a`, the cell's edges along `a`
    /// come as a block of `2^(dim-1)`, indexed by the offset bits of the
    /// remaining axes in ascending axis order.
    pub fn cell_edges(&self, cell: usize) -> &[usize] {
        let n = self.edges_per_cell();
        &self.cell_edges[cell * n..(cell + 1) * n]
    }

    /// Global face ids of a 3D cell, ordered x-, x+, y-, y+, z-, z+.
    pub fn cell_faces(&self, cell: usize) -> &[usize] {
        let n = self.faces_per_cell();
        &self.cell_faces[cell * n..(cell + 1) * n]
    }

    /// A leaf cell having this edge among its own edges.
    pub fn edge_owner_cell(&self, edge: usize) -> usize {
        self.edge_owner[edge]
    }

    pub fn face_owner_cell(&self, face: usize) -> usize {
        self.face_owner[face]
    }

    pub fn is_edge_hanging(&self, edge: usize) -> bool {
        self.edge_hanging[edge]
    }

    pub fn is_face_hanging(&self, face: usize) -> bool {
        self.face_hanging[face]
    }

    /// All hanging edges and faces with their coarse owners.
    pub fn hanging_entities(&self) -> &[HangingEntity] {
        &self.hanging
    }

    pub fn hanging_vertices(&self) -> &[HangingVertex] {
        &self.hanging_vertices
    }

    fn lattice_to_physical(&self, p: &[i64; 3]) -> Vec3 {
        [
            self.roots.to_physical(0, p[0]),
            self.roots.to_physical(1, p[1]),
            self.roots.to_physical(2, p[2]),
        ]
    }

    pub fn vertex_coords(&self, id: usize) -> Vec3 {
        self.lattice_to_physical(&self.vertices[id])
    }

    /// Physical bounding box of a leaf.
    pub fn cell_box(&self, cell: usize) -> Aabb {
        let c = &self.leaves[cell];
        let s = c.size();
        let mut hi = c.anchor;
        for a in 0..self.dim {
            hi[a] += s;
        }
        Aabb { lo: self.lattice_to_physical(&c.anchor), hi: self.lattice_to_physical(&hi) }
    }

    /// Physical side lengths of a leaf (zero beyond `dim`).
    pub fn cell_sizes(&self, cell: usize) -> Vec3 {
        let b = self.cell_box(cell);
        math::sub(&b.hi, &b.lo)
    }

    pub fn cell_center(&self, cell: usize) -> Vec3 {
        let b = self.cell_box(cell);
        [0.5 * (b.lo[0] + b.hi[0]), 0.5 * (b.lo[1] + b.hi[1]), 0.5 * (b.lo[2] + b.hi[2])]
    }

    /// Physical endpoints of an edge.
    pub fn edge_endpoints(&self, id: usize) -> (Vec3, Vec3) {
        let e = &self.edges[id];
        let mut end = e.corner;
        end[e.axis as usize] += e.len;
        (self.lattice_to_physical(&e.corner), self.lattice_to_physical(&end))
    }

    /// Physical box of a face (degenerate along its normal).
    pub fn face_box(&self, id: usize) -> Aabb {
        let f = &self.faces[id];
        let mut hi = f.corner;
        for t in f.tangent_axes() {
            hi[t] += f.len;
        }
        Aabb { lo: self.lattice_to_physical(&f.corner), hi: self.lattice_to_physical(&hi) }
    }

    pub fn is_edge_on_boundary(&self, id: usize) -> bool {
        let e = &self.edges[id];
        (0..self.dim)
            .filter(|&a| a != e.axis as usize)
            .any(|a| e.corner[a] == 0 || e.corner[a] == self.roots.extent(a))
    }

    pub fn is_face_on_boundary(&self, id: usize) -> bool {
        let f = &self.faces[id];
        let a = f.axis as usize;
        f.corner[a] == 0 || f.corner[a] == self.roots.extent(a)
    }

    pub fn is_vertex_on_boundary(&self, id: usize) -> bool {
        let v = &self.vertices[id];
        (0..self.dim).any(|a| v[a] == 0 || v[a] == self.roots.extent(a))
    }

    /// Map a physical point to (leaf index, reference coordinates in `[0,1]^dim`).
    pub fn locate(&self, p: &Vec3) -> Result<(usize, Vec3)> {
        let mut l = [0i64; 3];
        for a in 0..self.dim {
            l[a] = self.roots.to_lattice(a, p[a]).ok_or(Error::PointOutside(*p))?;
        }
        let cell = self.find_leaf(&l);
        Ok((cell, self.reference_coords(cell, p)))
    }

    /// Reference coordinates of `p` relative to a given leaf (not clamped).
    pub fn reference_coords(&self, cell: usize, p: &Vec3) -> Vec3 {
        let b = self.cell_box(cell);
        let mut r = [0.0; 3];
        for a in 0..self.dim {
            r[a] = (p[a] - b.lo[a]) / (b.hi[a] - b.lo[a]);
        }
        r
    }

    fn root_index(&self, p: &[i64; 3]) -> usize {
        let n0 = self.roots.divisions(0);
        let n1 = self.roots.divisions(1);
        let i = (p[0] / ROOT) as usize;
        let j = (p[1] / ROOT) as usize;
        let k = (p[2] / ROOT) as usize;
        i + n0 * (j + n1 * k)
    }

    fn key(&self, p: &[i64; 3]) -> (usize, u64) {
        let mut code = 0u64;
        for b in 0..MAX_LEVEL as u32 {
            for a in 0..self.dim {
                let bit = ((p[a] % ROOT) >> b) as u64 & 1;
                code |= bit << (b as usize * self.dim + a);
            }
        }
        (self.root_index(p), code)
    }

    /// Leaf containing the lattice point `p` (which must lie in the domain).
    fn find_leaf(&self, p: &[i64; 3]) -> usize {
        let k = self.key(p);
        let idx = self.leaves.partition_point(|c| self.key(&c.anchor) <= k) - 1;
        debug_assert!(self.leaves[idx].contains_lattice(p, self.dim));
        idx
    }

    fn lattice_inside(&self, p: &[i64; 3]) -> bool {
        (0..self.dim).all(|a| p[a] >= 0 && p[a] < self.roots.extent(a))
    }

    /// Refine every flagged leaf, then refine further until 2:1 balanced
    /// across vertices, edges and faces.
    pub fn refine_and_balance(&self, flags: &RefinementFlags) -> Result<TreeMesh> {
        if flags.marks.len() != self.leaves.len() {
            return Err(Error::InvalidFlags { expected: self.leaves.len(), found: flags.marks.len() });
        }
        let mut leaves = self.split(&self.leaves, |i| flags.marks[i])?;
        loop {
            let probe = TreeMesh { leaves, ..TreeMesh::empty(self.roots.clone()) };
            let coarse = probe.unbalanced_neighbors();
            leaves = probe.leaves;
            if coarse.is_empty() {
                break;
            }
            leaves = self.split(&leaves, |i| coarse.contains(&i))?;
        }
        let mut mesh = TreeMesh { leaves, ..TreeMesh::empty(self.roots.clone()) };
        mesh.build_entities();
        Ok(mesh)
    }

    /// Replace selected leaves by their children, preserving Morton order.
    fn split(&self, leaves: &[Cell], pick: impl Fn(usize) -> bool) -> Result<Vec<Cell>> {
        let mut out = Vec::with_capacity(leaves.len());
        for (i, c) in leaves.iter().enumerate() {
            if !pick(i) {
                out.push(*c);
                continue;
            }
            if c.level >= MAX_LEVEL {
                return Err(Error::OutOfRange(format!("refinement beyond level {MAX_LEVEL}")));
            }
            let h = c.size() / 2;
            for child in 0..(1usize << self.dim) {
                let mut anchor = c.anchor;
                for a in 0..self.dim {
                    if child >> a & 1 == 1 {
                        anchor[a] += h;
                    }
                }
                out.push(Cell { level: c.level + 1, anchor });
            }
        }
        Ok(out)
    }

    /// Leaves that are more than one level coarser than some neighbor.
    fn unbalanced_neighbors(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let dirs = neighbor_directions(self.dim);
        for c in &self.leaves {
            if c.level < 2 {
                continue;
            }
            let s = c.size();
            for d in &dirs {
                let mut q = c.anchor;
                for a in 0..self.dim {
                    q[a] += d[a] * s;
                }
                if !self.lattice_inside(&q) {
                    continue;
                }
                let j = self.find_leaf(&q);
                if self.leaves[j].level + 1 < c.level {
                    out.insert(j);
                }
            }
        }
        out
    }

    /// Cheap balance check via neighbor probing.
    pub fn is_balanced(&self) -> bool {
        self.unbalanced_neighbors().is_empty()
    }

    /// Exhaustive audit: the largest level difference over all leaf pairs
    /// whose closed boxes touch.
    pub fn max_neighbor_level_jump(&self) -> u8 {
        let dim = self.dim;
        let mut order: Vec<usize> = (0..self.leaves.len()).collect();
        order.sort_by_key(|&i| self.leaves[i].anchor[0]);
        let mut worst = 0u8;
        for (pos, &i) in order.iter().enumerate() {
            let a = &self.leaves[i];
            let a_hi0 = a.anchor[0] + a.size();
            for &j in &order[pos + 1..] {
                let b = &self.leaves[j];
                if b.anchor[0] > a_hi0 {
                    break;
                }
                let touch = (0..dim).all(|ax| {
                    a.anchor[ax] <= b.anchor[ax] + b.size() && b.anchor[ax] <= a.anchor[ax] + a.size()
                });
                if touch {
                    worst = worst.max(a.level.abs_diff(b.level));
                }
            }
        }
        worst
    }

    /// Flags driving the mesh toward `level_inside` on cells overlapping
    /// `region`, with the target level dropping by `decay` per band of
    /// cell-sized distance outside it.
    pub fn geometric_grading_flags(&self, region: &Aabb, level_inside: u8, decay: u8) -> Result<RefinementFlags> {
        if decay == 0 {
            return Err(Error::OutOfRange("grading decay must be at least 1".into()));
        }
        let dom = self.domain();
        let tol = 1e-12 * (0..self.dim).map(|a| dom.hi[a] - dom.lo[a]).fold(0.0, f64::max);
        let empty = (0..self.dim).any(|a| !(region.hi[a] > region.lo[a]));
        if empty {
            return Ok(RefinementFlags::none(self));
        }
        if !dom.contains(&region.lo, self.dim, tol) || !dom.contains(&region.hi, self.dim, tol) {
            return Err(Error::InvalidGeometry("refinement region is not inside the domain".into()));
        }
        let mut marks = vec![false; self.leaves.len()];
        for (i, c) in self.leaves.iter().enumerate() {
            let b = self.cell_box(i);
            let mut overlaps = true;
            let mut bands = 0i64;
            for a in 0..self.dim {
                let h = b.hi[a] - b.lo[a];
                let gap = (region.lo[a] - b.hi[a]).max(b.lo[a] - region.hi[a]);
                if gap >= -tol {
                    overlaps = false;
                }
                let g = gap.max(0.0);
                bands = bands.max(math::floor(g / h * (1.0 + 1e-12)) as i64);
            }
            let target = if overlaps {
                level_inside as i64
            } else {
                (level_inside as i64 - decay as i64 * (1 + bands)).max(0)
            };
            marks[i] = (c.level as i64) < target;
        }
        Ok(RefinementFlags { marks })
    }

    fn build_entities(&mut self) {
        let dim = self.dim;
        let mut vmap: BTreeMap<[i64; 3], usize> = BTreeMap::new();
        let mut emap: BTreeMap<EdgeKey, usize> = BTreeMap::new();
        let mut fmap: BTreeMap<FaceKey, usize> = BTreeMap::new();
        let nv = 1usize << dim;
        self.cell_vertices = Vec::with_capacity(self.leaves.len() * nv);
        self.cell_edges = Vec::with_capacity(self.leaves.len() * self.edges_per_cell());
        self.cell_faces = Vec::with_capacity(self.leaves.len() * self.faces_per_cell());
        for (ci, c) in self.leaves.iter().enumerate() {
            let s = c.size();
            for j in 0..nv {
                let mut p = c.anchor;
                for a in 0..dim {
                    if j >> a & 1 == 1 {
                        p[a] += s;
                    }
                }
                let next = self.vertices.len();
                let id = *vmap.entry(p).or_insert(next);
                if id == next {
                    self.vertices.push(p);
                }
                self.cell_vertices.push(id);
            }
            for key in local_edges(c, dim) {
                let next = self.edges.len();
                let id = *emap.entry(key).or_insert(next);
                if id == next {
                    self.edges.push(key);
                    self.edge_owner.push(ci);
                }
                self.cell_edges.push(id);
            }
            if dim == 3 {
                for key in local_faces(c) {
                    let next = self.faces.len();
                    let id = *fmap.entry(key).or_insert(next);
                    if id == next {
                        self.faces.push(key);
                        self.face_owner.push(ci);
                    }
                    self.cell_faces.push(id);
                }
            }
        }
        self.classify_hanging(&emap, &fmap, &vmap);
    }

    fn classify_hanging(
        &mut self,
        emap: &BTreeMap<EdgeKey, usize>,
        fmap: &BTreeMap<FaceKey, usize>,
        vmap: &BTreeMap<[i64; 3], usize>,
    ) {
        let dim = self.dim;
        self.edge_hanging = vec![false; self.edges.len()];
        self.face_hanging = vec![false; self.faces.len()];
        let mut hanging = Vec::new();
        for (id, e) in self.edges.iter().enumerate() {
            let a = e.axis as usize;
            let others: Vec<usize> = (0..dim).filter(|&o| o != a).collect();
            for q in 0..(1usize << others.len()) {
                let mut p = e.corner;
                for (bit, &o) in others.iter().enumerate() {
                    if q >> bit & 1 == 0 {
                        p[o] -= 1;
                    }
                }
                if !self.lattice_inside(&p) {
                    continue;
                }
                let n = self.find_leaf(&p);
                let big = &self.leaves[n];
                let sz = big.size();
                if sz <= e.len {
                    continue;
                }
                let t0 = (e.corner[a] - big.anchor[a]) as f64 / sz as f64;
                let t1 = t0 + e.len as f64 / sz as f64;
                let on_bdry: Vec<bool> = others
                    .iter()
                    .map(|&o| e.corner[o] == big.anchor[o] || e.corner[o] == big.anchor[o] + sz)
                    .collect();
                let (owner, lo, hi) = if on_bdry.iter().all(|b| *b) {
                    let mut corner = e.corner;
                    corner[a] = big.anchor[a];
                    let key = EdgeKey { axis: a as u8, corner, len: sz };
                    (EntityRef { kind: EntityKind::Edge, id: emap[&key] }, [t0, 0.0], [t1, 0.0])
                } else {
                    // midline of a coarse face: normal is the boundary axis
                    let normal = others[on_bdry.iter().position(|b| *b).unwrap()];
                    let mid = others[on_bdry.iter().position(|b| !*b).unwrap()];
                    let mut corner = big.anchor;
                    corner[normal] = e.corner[normal];
                    let key = FaceKey { axis: normal as u8, corner, len: sz };
                    let tm = (e.corner[mid] - big.anchor[mid]) as f64 / sz as f64;
                    let tang = in_plane_axes(normal);
                    let (mut lo, mut hi) = ([0.0; 2], [0.0; 2]);
                    for (slot, &t) in tang.iter().enumerate() {
                        if t == a {
                            lo[slot] = t0;
                            hi[slot] = t1;
                        } else {
                            lo[slot] = tm;
                            hi[slot] = tm;
                        }
                    }
                    (EntityRef { kind: EntityKind::Face, id: fmap[&key] }, lo, hi)
                };
                self.edge_hanging[id] = true;
                hanging.push(HangingEntity {
                    entity: EntityRef { kind: EntityKind::Edge, id },
                    owner,
                    owner_cell: n,
                    placement_lo: lo,
                    placement_hi: hi,
                });
                break;
            }
        }
        for (id, f) in self.faces.iter().enumerate() {
            let a = f.axis as usize;
            for side in 0..2 {
                let mut p = f.corner;
                if side == 0 {
                    p[a] -= 1;
                }
                if !self.lattice_inside(&p) {
                    continue;
                }
                let n = self.find_leaf(&p);
                let big = &self.leaves[n];
                let sz = big.size();
                if sz <= f.len {
                    continue;
                }
                let mut corner = big.anchor;
                corner[a] = f.corner[a];
                let key = FaceKey { axis: a as u8, corner, len: sz };
                let tang = in_plane_axes(a);
                let mut lo = [0.0; 2];
                let mut hi = [0.0; 2];
                for (slot, &t) in tang.iter().enumerate() {
                    lo[slot] = (f.corner[t] - big.anchor[t]) as f64 / sz as f64;
                    hi[slot] = lo[slot] + f.len as f64 / sz as f64;
                }
                self.face_hanging[id] = true;
                hanging.push(HangingEntity {
                    entity: EntityRef { kind: EntityKind::Face, id },
                    owner: EntityRef { kind: EntityKind::Face, id: fmap[&key] },
                    owner_cell: n,
                    placement_lo: lo,
                    placement_hi: hi,
                });
                break;
            }
        }
        self.hanging = hanging;

        let mut hv = Vec::new();
        for (id, v) in self.vertices.iter().enumerate() {
            for q in 0..(1usize << dim) {
                let mut p = *v;
                for a in 0..dim {
                    if q >> a & 1 == 0 {
                        p[a] -= 1;
                    }
                }
                if !self.lattice_inside(&p) {
                    continue;
                }
                let big = &self.leaves[self.find_leaf(&p)];
                let sz = big.size();
                let interior: Vec<usize> =
                    (0..dim).filter(|&a| v[a] != big.anchor[a] && v[a] != big.anchor[a] + sz).collect();
                if interior.is_empty() {
                    continue;
                }
                let mut masters = Vec::new();
                for bits in 0..(1usize << interior.len()) {
                    let mut corner = *v;
                    let mut w = 1.0;
                    for (k, &a) in interior.iter().enumerate() {
                        let t = (v[a] - big.anchor[a]) as f64 / sz as f64;
                        if bits >> k & 1 == 0 {
                            corner[a] = big.anchor[a];
                            w *= 1.0 - t;
                        } else {
                            corner[a] = big.anchor[a] + sz;
                            w *= t;
                        }
                    }
                    masters.push((vmap[&corner], w));
                }
                hv.push(HangingVertex { vertex: id, masters });
                break;
            }
        }
        self.hanging_vertices = hv;
    }
}

/// The `3^dim - 1` neighbor offsets.
fn neighbor_directions(dim: usize) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    let zr: &[i64] = if dim == 3 { &[-1, 0, 1] } else { &[0] };
    for &dz in zr {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

fn local_edges(c: &Cell, dim: usize) -> Vec<EdgeKey> {
    let s = c.size();
    let mut out = Vec::with_capacity(12);
    for a in 0..dim {
        let others: Vec<usize> = (0..dim).filter(|&o| o != a).collect();
        for j in 0..(1usize << others.len()) {
            let mut corner = c.anchor;
            for (bit, &o) in others.iter().enumerate() {
                if j >> bit & 1 == 1 {
                    corner[o] += s;
                }
            }
            out.push(EdgeKey { axis: a as u8, corner, len: s });
        }
    }
    out
}

fn local_faces(c: &Cell) -> Vec<FaceKey> {
    let s = c.size();
    let mut out = Vec::with_capacity(6);
    for a in 0..3 {
        for side in 0..2 {
            let mut corner = c.anchor;
            corner[a] += side * s;
            out.push(FaceKey { axis: a as u8, corner, len: s });
        }
    }
    out
}

//! Variance-driven spatial trees (quadtree in 2D, octree in 3D) and the
//! particle initializers built on them, plus the uniform random baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{AnisoParticle2D, IsoParticle2D};
use crate::image::ImageGrid;

/// Multi-channel samples on an `N`-dimensional integer lattice.
pub trait Raster<const N: usize> {
    fn dims(&self) -> [usize; N];
    fn channels(&self) -> usize;
    fn value(&self, index: [usize; N], channel: usize) -> f64;
}

impl Raster<2> for ImageGrid {
    fn dims(&self) -> [usize; 2] {
        [self.width(), self.height()]
    }

    fn channels(&self) -> usize {
        ImageGrid::channels(self)
    }

    fn value(&self, [x, y]: [usize; 2], channel: usize) -> f64 {
        self.get(x, y, channel)
    }
}

/// Dense `x`-fastest voxel volume, used by the octree.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn from_fn(dims: [usize; 3], channels: usize, mut f: impl FnMut([usize; 3], usize) -> f64) -> Result<Self> {
        if dims.contains(&0) || channels == 0 {
            return Err(Error::invalid("voxel grid", format!("{dims:?} x {channels} is empty")));
        }
        let mut data = Vec::with_capacity(dims.iter().product::<usize>() * channels);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    for c in 0..channels {
                        data.push(f([x, y, z], c));
                    }
                }
            }
        }
        Ok(Self { dims, channels, data })
    }
}

impl Raster<3> for VoxelGrid {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn value(&self, [x, y, z]: [usize; 3], channel: usize) -> f64 {
        self.data[((z * self.dims[1] + y) * self.dims[0] + x) * self.channels + channel]
    }
}

/// Axis-aligned box of lattice cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell<const N: usize> {
    pub origin: [usize; N],
    pub size: [usize; N],
}

impl<const N: usize> Cell<N> {
    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn center(&self) -> [f64; N] {
        std::array::from_fn(|i| self.origin[i] as f64 + self.size[i] as f64 / 2.0)
    }

    pub fn contains(&self, p: [usize; N]) -> bool {
        (0..N).all(|i| p[i] >= self.origin[i] && p[i] < self.origin[i] + self.size[i])
    }

    /// The `2^N` children; child `k` takes the upper half along axis `i` iff bit `i` of `k` is set.
    /// Odd sizes split into floor/ceil halves.
    pub fn children(&self) -> Vec<Cell<N>> {
        (0..1usize << N)
            .map(|k| {
                let mut origin = self.origin;
                let mut size = self.size;
                for i in 0..N {
                    let lo = self.size[i] / 2;
                    if k >> i & 1 == 1 {
                        origin[i] += lo;
                        size[i] -= lo;
                    } else {
                        size[i] = lo;
                    }
                }
                Cell { origin, size }
            })
            .collect()
    }

    fn for_each_index(&self, mut f: impl FnMut([usize; N])) {
        if self.volume() == 0 {
            return;
        }
        let mut idx = self.origin;
        loop {
            f(idx);
            let mut axis = 0;
            loop {
                if axis == N {
                    return;
                }
                idx[axis] += 1;
                if idx[axis] < self.origin[axis] + self.size[axis] {
                    break;
                }
                idx[axis] = self.origin[axis];
                axis += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<const N: usize> {
    pub cell: Cell<N>,
    pub depth: usize,
    /// Empty for leaves, otherwise `2^N` nodes partitioning `cell`.
    pub children: Vec<TreeNode<N>>,
    /// Per-channel mean over the cell.
    pub mean: Vec<f64>,
    /// Per-channel population variance over the cell.
    pub variance: Vec<f64>,
}

pub type QuadTreeNode = TreeNode<2>;
pub type OctreeNode = TreeNode<3>;

impl<const N: usize> TreeNode<N> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Leaves in depth-first child order.
    pub fn leaves(&self) -> Vec<&TreeNode<N>> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            if node.is_leaf() {
                out.push(node);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(TreeNode::leaf_count).sum()
        }
    }

    pub fn max_depth(&self) -> usize {
        self.children.iter().map(TreeNode::max_depth).max().unwrap_or(self.depth)
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::node_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitParams {
    /// Maximum subdivision depth `s`; the root has depth 0.
    pub max_depth: usize,
    /// A cell splits only if some channel's variance exceeds this.
    pub variance_threshold: f64,
    /// A cell splits only if every side is longer than this many pixels.
    pub min_cell_px: usize,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            max_depth: 7,
            variance_threshold: 1e-3,
            min_cell_px: 1,
        }
    }
}

impl InitParams {
    pub const MAX_DEPTH_LIMIT: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.max_depth > Self::MAX_DEPTH_LIMIT {
            return Err(Error::invalid(
                "tree depth",
                format!("must be at most {}, got {}", Self::MAX_DEPTH_LIMIT, self.max_depth),
            ));
        }
        if self.min_cell_px == 0 {
            return Err(Error::invalid("min cell size", "must be at least 1 pixel"));
        }
        if !(self.variance_threshold >= 0.0) || !self.variance_threshold.is_finite() {
            return Err(Error::invalid(
                "variance threshold",
                format!("must be finite and >= 0, got {}", self.variance_threshold),
            ));
        }
        Ok(())
    }
}

fn cell_stats<const N: usize, R: Raster<N>>(raster: &R, cell: &Cell<N>) -> (Vec<f64>, Vec<f64>) {
    let c = raster.channels();
    let n = cell.volume() as f64;
    let mut mean = vec![0.0; c];
    cell.for_each_index(|idx| {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += raster.value(idx, k);
        }
    });
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    cell.for_each_index(|idx| {
        for (k, v) in var.iter_mut().enumerate() {
            let d = raster.value(idx, k) - mean[k];
            *v += d * d;
        }
    });
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

struct ArenaNode<const N: usize> {
    cell: Cell<N>,
    depth: usize,
    mean: Vec<f64>,
    variance: Vec<f64>,
    children: Vec<usize>,
}

/// Split candidate ordered by max-channel variance, then by creation order.
struct Candidate {
    score: f64,
    seq: usize,
    node: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.seq.cmp(&self.seq))
    }
}

fn should_split<const N: usize>(node: &ArenaNode<N>, params: &InitParams) -> bool {
    let max_var = node.variance.iter().copied().fold(0.0, f64::max);
    max_var > params.variance_threshold
        && node.depth < params.max_depth
        && node.cell.size.iter().all(|&s| s > params.min_cell_px)
}

/// Builds the tree, splitting a node iff its max-channel variance exceeds the
/// threshold, its depth is below `max_depth`, and every side exceeds
/// `min_cell_px`.
pub fn build_tree<const N: usize, R: Raster<N>>(raster: &R, params: &InitParams) -> Result<TreeNode<N>> {
    build_tree_budgeted(raster, params, usize::MAX)
}

/// Like [`build_tree`] but stops once another split would push the leaf count
/// above `max_leaves`. Eligible cells are split highest-variance first, so
/// when the budget is not binding the result equals [`build_tree`].
pub fn build_tree_budgeted<const N: usize, R: Raster<N>>(
    raster: &R,
    params: &InitParams,
    max_leaves: usize,
) -> Result<TreeNode<N>> {
    params.validate()?;
    if max_leaves == 0 {
        return Err(Error::invalid("particle budget", "must be at least 1"));
    }
    let root_cell = Cell {
        origin: [0; N],
        size: raster.dims(),
    };
    let (mean, variance) = cell_stats(raster, &root_cell);
    let mut arena = vec![ArenaNode {
        cell: root_cell,
        depth: 0,
        mean,
        variance,
        children: Vec::new(),
    }];
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let push = |heap: &mut BinaryHeap<Candidate>, arena: &[ArenaNode<N>], node: usize, seq: &mut usize| {
        if should_split(&arena[node], params) {
            let score = arena[node].variance.iter().copied().fold(0.0, f64::max);
            heap.push(Candidate { score, seq: *seq, node });
            *seq += 1;
        }
    };
    push(&mut heap, &arena, 0, &mut seq);
    let growth = (1usize << N) - 1;
    let mut leaves = 1usize;
    while let Some(Candidate { node, .. }) = heap.pop() {
        if leaves.saturating_add(growth) > max_leaves {
            break;
        }
        leaves += growth;
        let depth = arena[node].depth + 1;
        for cell in arena[node].cell.children() {
            let (mean, variance) = cell_stats(raster, &cell);
            arena.push(ArenaNode {
                cell,
                depth,
                mean,
                variance,
                children: Vec::new(),
            });
            let id = arena.len() - 1;
            arena[node].children.push(id);
            push(&mut heap, &arena, id, &mut seq);
        }
    }
    Ok(assemble(&mut arena, 0))
}

fn assemble<const N: usize>(arena: &mut [ArenaNode<N>], id: usize) -> TreeNode<N> {
    let children = std::mem::take(&mut arena[id].children);
    let children = children.into_iter().map(|c| assemble(arena, c)).collect();
    let node = &mut arena[id];
    TreeNode {
        cell: node.cell,
        depth: node.depth,
        children,
        mean: std::mem::take(&mut node.mean),
        variance: std::mem::take(&mut node.variance),
    }
}

pub fn build_quadtree(image: &ImageGrid, params: &InitParams) -> Result<QuadTreeNode> {
    build_tree(image, params)
}

pub fn build_octree(volume: &VoxelGrid, params: &InitParams) -> Result<OctreeNode> {
    build_tree(volume, params)
}

/// One particle per leaf: centered in the cell, `sigma` = half the longer
/// side, amplitude = the cell mean.
pub fn init_particles_from_tree(tree: &QuadTreeNode) -> Vec<IsoParticle2D> {
    tree.leaves()
        .into_iter()
        .map(|leaf| IsoParticle2D {
            mu: leaf.cell.center(),
            sigma: leaf.cell.size.iter().copied().max().unwrap_or(1) as f64 / 2.0,
            amplitude: leaf.mean.clone(),
        })
        .collect()
}

/// Anisotropic counterpart of [`init_particles_from_tree`]: axis-aligned
/// kernels with the half side lengths as scales.
pub fn init_aniso_from_tree(tree: &QuadTreeNode) -> Vec<AnisoParticle2D> {
    tree.leaves()
        .into_iter()
        .map(|leaf| AnisoParticle2D {
            mu: leaf.cell.center(),
            theta: 0.0,
            s1: leaf.cell.size[0] as f64 / 2.0,
            s2: leaf.cell.size[1] as f64 / 2.0,
            amplitude: leaf.mean.clone(),
        })
        .collect()
}

/// Per-leaf seeds of an octree: `(center, sigma, mean)`.
pub fn seeds_from_octree(tree: &OctreeNode) -> Vec<([f64; 3], f64, Vec<f64>)> {
    tree.leaves()
        .into_iter()
        .map(|leaf| {
            let sigma = leaf.cell.size.iter().copied().max().unwrap_or(1) as f64 / 2.0;
            (leaf.cell.center(), sigma, leaf.mean.clone())
        })
        .collect()
}

fn check_sigma_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0) || !hi.is_finite() || lo > hi {
        return Err(Error::invalid(
            "sigma range",
            format!("needs 0 < min <= max < inf, got [{lo}, {hi}]"),
        ));
    }
    Ok(())
}

fn check_count(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("particle count K", "must be at least 1"))
    } else {
        Ok(())
    }
}

/// `K` isotropic particles: centers uniform over the image, `sigma` uniform in
/// `sigma_range`, amplitudes uniform in `[0, 1)`.
pub fn random_iso(
    k: usize,
    (width, height, channels): (usize, usize, usize),
    sigma_range: (f64, f64),
    seed: u64,
) -> Result<Vec<IsoParticle2D>> {
    check_count(k)?;
    check_sigma_range(sigma_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = sigma_range;
    Ok((0..k)
        .map(|_| {
            let mu = [rng.random::<f64>() * width as f64, rng.random::<f64>() * height as f64];
            let sigma = lo + rng.random::<f64>() * (hi - lo);
            let amplitude = (0..channels).map(|_| rng.random::<f64>()).collect();
            IsoParticle2D { mu, sigma, amplitude }
        })
        .collect())
}

/// `K` anisotropic particles; as [`random_iso`] with independent scales and
/// `theta` uniform in `[0, pi)`.
pub fn random_aniso(
    k: usize,
    (width, height, channels): (usize, usize, usize),
    sigma_range: (f64, f64),
    seed: u64,
) -> Result<Vec<AnisoParticle2D>> {
    check_count(k)?;
    check_sigma_range(sigma_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = sigma_range;
    Ok((0..k)
        .map(|_| {
            let mu = [rng.random::<f64>() * width as f64, rng.random::<f64>() * height as f64];
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let s1 = lo + rng.random::<f64>() * (hi - lo);
            let s2 = lo + rng.random::<f64>() * (hi - lo);
            let amplitude = (0..channels).map(|_| rng.random::<f64>()).collect();
            AnisoParticle2D {
                mu,
                theta,
                s1,
                s2,
                amplitude,
            }
        })
        .collect())
}

use std::path::PathBuf;

use clap::Args;
use isosplat_core::tree::{build_tree_budgeted, InitParams, QuadTreeNode};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::formats::{decode_png, ParticleSetFile};

/// Upper edges of the scale histogram bins; the last bin is open-ended.
pub const SCALE_BIN_EDGES: [f64; 8] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Particle set (binary or JSON) or a PNG image.
    pub path: PathBuf,
    /// Tree settings used when inspecting an image.
    #[arg(long, default_value_t = 7)]
    pub tree_depth: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub var_threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub min_cell: usize,
    /// Leaf budget for the image tree.
    #[arg(long)]
    pub k: Option<usize>,
    /// Leave the node-by-node tree dump out of image reports.
    #[arg(long)]
    pub no_tree: bool,
}

impl InspectArgs {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            tree_depth: 7,
            var_threshold: 1e-3,
            min_cell: 1,
            k: None,
            no_tree: false,
        }
    }
}

pub fn histogram(values: &[f64]) -> Value {
    let mut counts = vec![0usize; SCALE_BIN_EDGES.len() + 1];
    for &v in values {
        let bin = SCALE_BIN_EDGES.iter().position(|&e| v < e).unwrap_or(SCALE_BIN_EDGES.len());
        counts[bin] += 1;
    }
    let bins: Vec<Value> = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let lo = if i == 0 { 0.0 } else { SCALE_BIN_EDGES[i - 1] };
            let hi = SCALE_BIN_EDGES.get(i).copied();
            json!({ "lo": lo, "hi": hi, "count": count })
        })
        .collect();
    Value::Array(bins)
}

fn tree_json(node: &QuadTreeNode) -> Value {
    json!({
        "origin": node.cell.origin,
        "size": node.cell.size,
        "depth": node.depth,
        "mean": node.mean,
        "variance": node.variance,
        "children": node.children.iter().map(tree_json).collect::<Vec<_>>(),
    })
}

pub fn run(args: &InspectArgs) -> CliResult<Value> {
    let bytes = std::fs::read(&args.path).map_err(|e| CliError::input(&args.path, e))?;
    if bytes.is_empty() {
        return Ok(json!({
            "type": "particles",
            "count": 0,
            "geometric_dof_total": 0,
            "parameters_total": 0,
            "scale_histogram": histogram(&[]),
        }));
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = decode_png(&bytes).map_err(|e| CliError::input(&args.path, e))?;
        let params = InitParams {
            max_depth: args.tree_depth,
            variance_threshold: args.var_threshold,
            min_cell_px: args.min_cell,
        };
        let tree = build_tree_budgeted(&img, &params, args.k.unwrap_or(usize::MAX))?;
        let leaves = tree.leaves();
        let sigmas: Vec<f64> = leaves.iter().map(|l| l.cell.size[0].max(l.cell.size[1]) as f64 / 2.0).collect();
        let mut report = json!({
            "type": "image",
            "width": img.width(),
            "height": img.height(),
            "channels": img.channels(),
            "leaves": leaves.len(),
            "nodes": tree.node_count(),
            "max_depth": tree.max_depth(),
            "count": leaves.len(),
            "geometric_dof_total": leaves.len() * 3,
            "scale_histogram": histogram(&sigmas),
        });
        if !args.no_tree {
            report["tree"] = tree_json(&tree);
        }
        return Ok(report);
    }
    let file = ParticleSetFile::from_bytes(&bytes).map_err(|e| CliError::input(&args.path, e))?;
    let r = &file.records;
    let per_record = match r.dimension() {
        2 => r.geometric_dof_per_particle() + r.channels(),
        _ => r.geometric_dof_per_particle() + 4,
    };
    Ok(json!({
        "type": "particles",
        "kernel_kind": r.kind().as_str(),
        "dimension": r.dimension(),
        "channels": r.channels(),
        "count": r.len(),
        "geometric_dof_per_particle": r.geometric_dof_per_particle(),
        "geometric_dof_total": r.geometric_dof_total(),
        "parameters_total": r.len() * per_record,
        "scale_histogram": histogram(&r.scales()),
        "metadata": file.metadata,
    }))
}

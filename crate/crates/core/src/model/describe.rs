//! Human-readable summaries of models and checkpoints.

use std::fmt::Write;

use super::{build_faim, faim_graph, param_count, Checkpoint, FaimConfig, Model, REFERENCE_PARAM_COUNT};
use crate::autodiff::{Graph, OpKind, Tensor};
use crate::error::Result;
use crate::volume::Dims;

/// Operation counts of a recorded forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSummary {
    pub conv: usize,
    pub conv_transpose: usize,
    pub prelu: usize,
    pub add: usize,
    pub concat: usize,
    /// Always 0: downsampling is strided convolution.
    pub pooling: usize,
    pub output_channels: usize,
    /// The last op is a convolution with no activation after it.
    pub linear_head: bool,
    pub params: usize,
}

/// Records a forward pass on a zero input of `dims` and counts its ops.
pub fn graph_summary(cfg: &FaimConfig, dims: Dims) -> Result<GraphSummary> {
    let params = build_faim::<f32>(cfg, 0)?;
    let mut g = Graph::new();
    let vars = faim_graph(&mut g, cfg, &params, Tensor::zeros(&[2, dims.nz, dims.ny, dims.nx]), false)?;
    let counts = g.op_counts();
    let n = |k: OpKind| counts.get(&k).copied().unwrap_or(0);
    Ok(GraphSummary {
        conv: n(OpKind::Conv3d),
        conv_transpose: n(OpKind::ConvTranspose3d),
        prelu: n(OpKind::Prelu),
        add: n(OpKind::Add),
        concat: n(OpKind::Concat),
        pooling: 0,
        output_channels: g.value(vars.output).shape()[0],
        linear_head: g.op_kind(vars.output) == OpKind::Conv3d,
        params: param_count(&params),
    })
}

struct Row {
    name: String,
    op: &'static str,
    k: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
    extent: Dims,
    params: usize,
    note: &'static str,
}

fn conv_params(c_in: usize, c_out: usize, k: usize, slope: bool) -> usize {
    c_in * c_out * k * k * k + c_out + if slope { c_out } else { 0 }
}

/// Layer table, skip topology and parameter count for input `dims`.
pub fn describe_faim(cfg: &FaimConfig, dims: Dims) -> Result<String> {
    cfg.validate()?;
    let half = Dims::new(dims.nx / 2, dims.ny / 2, dims.nz / 2);
    let quarter = Dims::new(dims.nx / 4, dims.ny / 4, dims.nz / 4);
    let mut rows = Vec::new();
    for &k in &cfg.branch_kernels {
        rows.push(Row {
            name: format!("inception.k{k}"),
            op: "conv+prelu",
            k,
            stride: 1,
            c_in: 2,
            c_out: cfg.branch_channels,
            extent: dims,
            params: conv_params(2, cfg.branch_channels, k, true),
            note: "",
        });
    }
    let cat = cfg.branch_channels * cfg.branch_kernels.len();
    let mut push = |name: &str, op, k, stride, c_in, c_out, extent, slope, note| {
        rows.push(Row {
            name: name.to_string(),
            op,
            k,
            stride,
            c_in,
            c_out,
            extent,
            params: conv_params(c_in, c_out, k, slope),
            note,
        })
    };
    push("merge (L0)", "conv+prelu", 1, 1, cat, cfg.c0, dims, true, "concat of branches");
    push("down1 (L1)", "conv+prelu", 3, 2, cfg.c0, cfg.c1, half, true, "");
    push("down2 (L2)", "conv+prelu", 3, 2, cfg.c1, cfg.c2, quarter, true, "");
    push("bottleneck (L3)", "conv+add+prelu", 3, 1, cfg.c2, cfg.c2, quarter, true, "skip 1 from L2");
    push("up2 (U2)", "convT+add+prelu", 2, 2, cfg.c2, cfg.c1, half, true, "skip 2 from L1");
    push("up1 (U1)", "convT+add+prelu", 2, 2, cfg.c1, cfg.c0, dims, true, "skip 3 from L0");
    push("head", "conv (linear)", cfg.head_kernel, 1, cfg.c0, 3, dims, false, "displacement");

    let summary = graph_summary(cfg, Dims::cube(4))?;
    let mut s = String::new();
    writeln!(s, "network input: 2 x {dims}").unwrap();
    writeln!(
        s,
        "{:<17} {:<16} {:>2} {:>2} {:>9} {:>12} {:>8}  notes",
        "layer", "op", "k", "s", "channels", "extent", "params"
    )
    .unwrap();
    for r in &rows {
        writeln!(
            s,
            "{:<17} {:<16} {:>2} {:>2} {:>9} {:>12} {:>8}  {}",
            r.name,
            r.op,
            r.k,
            r.stride,
            format!("{}->{}", r.c_in, r.c_out),
            r.extent.to_string(),
            r.params,
            r.note
        )
        .unwrap();
    }
    writeln!(s, "skip connections: L2->L3, L1->U2, L0->U1 (elementwise add, {} total)", summary.add).unwrap();
    writeln!(s, "pooling layers: {}", summary.pooling).unwrap();
    writeln!(
        s,
        "output head: {}-channel {}",
        summary.output_channels,
        if summary.linear_head { "linear conv" } else { "activated conv" }
    )
    .unwrap();
    writeln!(s, "trainable parameters: {}", summary.params).unwrap();
    writeln!(s, "reference network parameters: {REFERENCE_PARAM_COUNT}").unwrap();
    Ok(s)
}

pub fn describe_checkpoint(ck: &Checkpoint) -> Result<String> {
    match &ck.model {
        Model::Faim { cfg, params } => {
            let mut s = describe_faim(cfg, ck.dims)?;
            writeln!(s, "checkpoint parameters: {}", param_count(params)).unwrap();
            if let Some(st) = ck.optim.first() {
                writeln!(s, "optimizer steps: {}", st.step).unwrap();
            }
            Ok(s)
        }
        Model::Direct { fields } => {
            let mut s = String::new();
            writeln!(s, "direct field model on {}", ck.dims).unwrap();
            for f in fields.iter() {
                writeln!(s, "{:<32} {:>10}", f.name, f.tensor.numel()).unwrap();
            }
            writeln!(s, "fields: {}", fields.len()).unwrap();
            writeln!(s, "trainable parameters: {}", param_count(fields)).unwrap();
            Ok(s)
        }
        Model::Identity => Ok(format!("identity model on {}\ntrainable parameters: 0\n", ck.dims)),
    }
}

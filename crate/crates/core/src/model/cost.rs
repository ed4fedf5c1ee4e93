//! Multiply-accumulate and parameter accounting.
//!
//! One MAC counts as one operation. Batch norm, ReLU, pooling, and additions
//! appear as rows with zero MACs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{LayerKind, LayerParams, Scalar, Shape};

use super::network::Network;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer_id: String,
    pub block: Option<usize>,
    pub kind: LayerKind,
    /// `[C, H, W]` of the layer output.
    pub output: [usize; 3],
    pub macs: u64,
    pub params: u64,
    /// Set on the convolution that heads a replaceable block.
    pub replaceable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub model: String,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_params: u64,
}

/// Output shape, MACs, and parameter count of one layer on a single sample.
pub fn layer_cost<T: Scalar>(layer: &LayerParams<T>, input: Shape) -> Result<(Shape, u64, u64)> {
    let out = layer.output_shape(Shape::new(1, input.c, input.h, input.w))?;
    let spatial = (out.h * out.w) as u64;
    let (cin, cout) = (layer.in_channels as u64, layer.out_channels as u64);
    let k2 = (layer.kind.kernel_size() * layer.kind.kernel_size()) as u64;
    let (macs, params) = match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::PointwiseConv => {
            (spatial * cout * cin * k2, cout * cin * k2)
        }
        LayerKind::DepthwiseConv3x3 => (spatial * cin * k2, cin * k2),
        LayerKind::Dense => (cin * cout, cin * cout + cout),
        LayerKind::BatchNorm => (0, 2 * cin),
        LayerKind::ReLU | LayerKind::GlobalAvgPool | LayerKind::Add => (0, 0),
    };
    Ok((out, macs, params))
}

/// Cost table of a network (teacher or student) on one input sample.
pub fn count_macs_params<T: Scalar>(net: &Network<T>, input_shape: [usize; 3]) -> Result<CostTable> {
    let replaceable = net.identify_replaceable();
    let [c, h, w] = input_shape;
    let mut shape = Shape::new(1, c, h, w);
    let mut rows = Vec::new();
    let mut push = |id: String, block: Option<usize>, layer: &LayerParams<T>, input: Shape, flag: bool| {
        let (out, macs, params) = layer_cost(layer, input)?;
        rows.push(CostRow {
            layer_id: id,
            block,
            kind: layer.kind,
            output: [out.c, out.h, out.w],
            macs,
            params,
            replaceable: flag,
        });
        Ok::<Shape, crate::Error>(out)
    };
    for (k, block) in net.blocks.iter().enumerate() {
        let name = net.block_name(k);
        let block_input = shape;
        let layers = block.layers();
        let n_main = match block {
            crate::model::Block::Replacement(r) => r.layers.len(),
            crate::model::Block::Teacher(l) => l.len(),
        };
        for (j, layer) in layers.iter().enumerate() {
            if j < n_main {
                let flag = j == 0 && replaceable.contains(&k) && !block.is_replacement();
                shape = push(format!("{name}.{j}.{}", layer.kind.name()), Some(k), layer, shape, flag)?;
            } else {
                push(format!("{name}.skip.{}", layer.kind.name()), Some(k), layer, block_input, false)?;
            }
        }
    }
    for (j, layer) in net.classifier.iter().enumerate() {
        shape = push(format!("classifier.{j}.{}", layer.kind.name()), None, layer, shape, false)?;
    }
    let total_macs = rows.iter().map(|r| r.macs).sum();
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(CostTable {
        model: net.name().to_string(),
        rows,
        total_macs,
        total_params,
    })
}

impl CostTable {
    pub fn replaceable_rows(&self) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(|r| r.replaceable)
    }

    /// Parameters held in convolution weights only.
    pub fn conv_params(&self) -> u64 {
        self.rows.iter().filter(|r| r.kind.is_conv()).map(|r| r.params).sum()
    }

    pub fn block_macs(&self, block: usize) -> u64 {
        self.rows.iter().filter(|r| r.block == Some(block)).map(|r| r.macs).sum()
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer_id.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:<18}  {:>14}  {:>14}  {:>12}  replaceable",
            "layer", "kind", "output", "MACs", "params"
        )?;
        for r in &self.rows {
            let out = format!("{}x{}x{}", r.output[0], r.output[1], r.output[2]);
            writeln!(
                f,
                "{:<width$}  {:<18}  {:>14}  {:>14}  {:>12}  {}",
                r.layer_id,
                r.kind.name(),
                out,
                r.macs,
                r.params,
                if r.replaceable { "yes" } else { "" }
            )?;
        }
        write!(
            f,
            "{:<width$}  {:<18}  {:>14}  {:>14}  {:>12}",
            "total", "", "", self.total_macs, self.total_params
        )
    }
}

//! The seven candidate operations of the cell search space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kernels::Conv2dGeom;
use super::tape::{BnStats, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
        }
    }

    fn kernel(self) -> usize {
        match self {
            OpKind::SepConv5x5 | OpKind::DilConv5x5 => 5,
            OpKind::Identity => 1,
            _ => 3,
        }
    }

    fn dilation(self) -> usize {
        match self {
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => 2,
            _ => 1,
        }
    }

    /// Number of depthwise+pointwise stages (separable convolutions are stacked twice).
    fn stages(self) -> usize {
        match self {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => 2,
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => 1,
            _ => 0,
        }
    }

    pub fn is_conv(self) -> bool {
        self.stages() > 0
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// A candidate operation instantiated on a particular edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
}

/// Shape and role of one parameter tensor of an operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// Convolution kernels are subject to weight masks; batch-norm affine terms are not.
    pub maskable: bool,
    /// Fan-in used to scale the initial draw; `None` for batch-norm affine terms.
    pub fan_in: Option<usize>,
}

impl OpSpec {
    pub fn new(kind: OpKind, channels: usize, stride: usize) -> Self {
        Self { kind, channels, stride }
    }

    /// Parameter tensors in the order [`op_forward`] consumes them.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let c = self.channels;
        let k = self.kind.kernel();
        let mut out = Vec::new();
        for s in 1..=self.kind.stages() {
            out.push(ParamShape {
                name: format!("dw{s}"),
                shape: vec![c, 1, k, k],
                maskable: true,
                fan_in: Some(k * k),
            });
            out.push(ParamShape {
                name: format!("pw{s}"),
                shape: vec![c, c, 1, 1],
                maskable: true,
                fan_in: Some(c),
            });
            out.push(ParamShape {
                name: format!("bn{s}.gamma"),
                shape: vec![c],
                maskable: false,
                fan_in: None,
            });
            out.push(ParamShape {
                name: format!("bn{s}.beta"),
                shape: vec![c],
                maskable: false,
                fan_in: None,
            });
        }
        out
    }

    /// Number of batch-norm layers (each owning a running-statistics buffer).
    pub fn num_bn(&self) -> usize {
        match self.kind {
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 1,
            OpKind::Identity => 0,
            k => k.stages(),
        }
    }
}

/// Output of an operation together with its batch-norm nodes (one per buffer, in order).
#[derive(Debug)]
pub struct OpOutput {
    pub out: Var,
    pub bn_nodes: Vec<Var>,
}

/// Applies an operation to `x` of shape `(B, C, H, W)`.
///
/// `params` must follow [`OpSpec::param_shapes`]; `bn` supplies one statistics
/// source per batch-norm layer ([`BnStats::Batch`] when training).
pub fn op_forward(tape: &mut Tape, spec: &OpSpec, x: Var, params: &[Var], bn: &[BnStats]) -> Result<OpOutput> {
    let (_, c, _, _) = tape.value(x).dims4(spec.kind.name())?;
    if c != spec.channels {
        return Err(Error::dim(spec.kind.name(), spec.channels, c));
    }
    let expected = spec.param_shapes();
    if params.len() != expected.len() {
        return Err(Error::dim("operation parameters", expected.len(), params.len()));
    }
    for (p, e) in params.iter().zip(&expected) {
        if tape.value(*p).shape() != e.shape.as_slice() {
            return Err(Error::dim("operation parameter", &e.shape, tape.value(*p).shape()));
        }
    }
    if bn.len() != spec.num_bn() {
        return Err(Error::dim("operation batch-norm stats", spec.num_bn(), bn.len()));
    }
    let mut bn_nodes = Vec::new();
    let out = match spec.kind {
        OpKind::Identity => {
            if spec.stride == 1 {
                x
            } else {
                tape.avg_pool(x, 1, spec.stride, 0)?
            }
        }
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => {
            let pooled = if spec.kind == OpKind::MaxPool3x3 {
                tape.max_pool(x, 3, spec.stride, 1)?
            } else {
                tape.avg_pool(x, 3, spec.stride, 1)?
            };
            let y = tape.batch_norm(pooled, None, None, bn[0].clone())?;
            bn_nodes.push(y);
            y
        }
        kind => {
            let k = kind.kernel();
            let d = kind.dilation();
            let pad = d * (k - 1) / 2;
            let mut h = x;
            for s in 0..kind.stages() {
                let p = &params[4 * s..4 * s + 4];
                let stride = if s == 0 { spec.stride } else { 1 };
                h = tape.relu(h)?;
                h = tape.conv2d(h, p[0], Conv2dGeom::new(stride, pad, d, spec.channels))?;
                h = tape.conv2d(h, p[1], Conv2dGeom::new(1, 0, 1, 1))?;
                h = tape.batch_norm(h, Some(p[2]), Some(p[3]), bn[s].clone())?;
                bn_nodes.push(h);
            }
            h
        }
    };
    Ok(OpOutput { out, bn_nodes })
}

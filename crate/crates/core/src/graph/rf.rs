//! Receptive-field analysis over a layer graph.
//!
//! Per node the recurrence is `rf_out = rf_in + (k_eff - 1) * jump` with
//! `k_eff = k + (k-1)(rate-1)`, and `jump` multiplying by the stride. At
//! fusion nodes (sum, concat) the receptive field is the maximum over
//! inputs: it answers "how far can any input pixel be that still reaches
//! this output pixel".
//!
//! Branches that compute global statistics (global average pooling,
//! squeeze-excitation gates) see the whole input by construction; they are
//! tracked by the `global_context` flag and deliberately excluded from the
//! pixel-footprint numbers, which describe the local convolutional
//! geometry only.

use super::{LayerKind, ModuleGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfState {
    /// Edge length in input pixels of the local footprint.
    pub receptive_field: usize,
    /// Distance in input pixels between adjacent output pixels.
    pub jump: usize,
    /// Some path into this node passes through a global statistic.
    pub global_context: bool,
}

impl RfState {
    fn input() -> Self {
        RfState {
            receptive_field: 1,
            jump: 1,
            global_context: false,
        }
    }
}

/// Effective kernel extent of a dilated kernel: `k + (k-1)(rate-1)`.
pub fn effective_kernel(k: usize, rate: usize) -> usize {
    k + (k - 1) * (rate - 1)
}

/// Per-node receptive-field states, indexed like `graph.nodes()`.
pub fn receptive_field(graph: &ModuleGraph) -> Result<Vec<RfState>> {
    let mut states: Vec<Option<RfState>> = vec![None; graph.nodes().len()];
    for (id, node) in graph.nodes().iter().enumerate() {
        let state = match &node.kind {
            LayerKind::Input { .. } => RfState::input(),
            kind => {
                let ins: Vec<RfState> = node
                    .inputs
                    .iter()
                    .map(|i| {
                        states[*i].ok_or_else(|| {
                            Error::InvalidArgument(format!("node {} reads unset node", node.name))
                        })
                    })
                    .collect::<Result<_>>()?;
                step(kind, &ins)?
            }
        };
        states[id] = Some(state);
    }
    Ok(states.into_iter().map(|s| s.unwrap()).collect())
}

fn step(kind: &LayerKind, ins: &[RfState]) -> Result<RfState> {
    let first = ins[0];
    Ok(match kind {
        LayerKind::Input { .. } => RfState::input(),
        LayerKind::Conv {
            kh, kw, stride, rate, ..
        } => {
            let k_eff = effective_kernel(*kh, rate.0).max(effective_kernel(*kw, rate.1));
            let s = stride.0.max(stride.1);
            RfState {
                receptive_field: first.receptive_field + (k_eff - 1) * first.jump,
                jump: first.jump * s,
                global_context: first.global_context,
            }
        }
        LayerKind::MaxPool { k, stride, .. } => RfState {
            receptive_field: first.receptive_field + (k - 1) * first.jump,
            jump: first.jump * stride,
            global_context: first.global_context,
        },
        LayerKind::GlobalAvgPool => RfState {
            receptive_field: 1,
            jump: first.jump,
            global_context: true,
        },
        LayerKind::SeGate { .. } => RfState {
            global_context: true,
            ..first
        },
        LayerKind::Bilinear { .. } => first,
        LayerKind::Concat | LayerKind::Sum => RfState {
            receptive_field: ins.iter().map(|s| s.receptive_field).max().unwrap(),
            jump: ins.iter().map(|s| s.jump).max().unwrap(),
            global_context: ins.iter().any(|s| s.global_context),
        },
        LayerKind::Relu
        | LayerKind::BatchNorm { .. }
        | LayerKind::Dropout { .. }
        | LayerKind::Split { .. }
        | LayerKind::Softmax => first,
    })
}

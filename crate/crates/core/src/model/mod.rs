//! Model descriptions, the toy separation network, the forward interpreter
//! and checkpoints.

mod checkpoint;
mod forward;
mod graph;
mod toy;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
pub use forward::{bind_params, forward_on_tape, BoundParams, GroupMasks};
pub use graph::{
    Component, DependencyGroup, Edge, GraphDescription, LayerKind, LayerSpec, ModelGraph, PortRef,
    PortSide, Source,
};
pub use toy::{build_toy_sepnet, init_params, toy_description, SepNetConfig};

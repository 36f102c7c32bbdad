//! Layers, architectures and the dual-head network.

mod arch;
mod layers;
mod network;
mod param;

pub use arch::{ArchSpec, Block, ClassifierHead, Family, Group};
pub use layers::{BatchNorm2d, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use network::{
    attach_merge, attach_second_head, build_network, AttachPoint, Census, DualHeadNetwork, Head,
    HeadInit, HeadMode, HeadView, SecondHead,
};
pub use param::{BnUpdate, Gradients, Init, Model, Module, Param, ParamKind, Pass, Region};

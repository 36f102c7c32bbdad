//! Residual, wide-residual and small convolutional classifiers, described
//! as a sequence of groups followed by a classifier head.
//!
//! Group 0 is always the initial convolution. Groups `1..=n` are the
//! repeated blocks; an attach point `g` splits the network after group
//! `g`, so the shared stem is groups `0..=g`.

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::param::{Init, Module, Param, Pass};
use crate::error::{arg_err, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Resnet,
    Wideresnet,
    Smallconv,
}

/// Architecture description.
///
/// * `wideresnet`: `depth` with `(depth - 4) % 6 == 0`, widths `16w, 32w, 64w`.
/// * `resnet`: basic-block groups of `group_sizes` at widths `64, 128, 256, 512`
///   (`group_sizes` may be omitted for depth 18 or 34).
/// * `smallconv`: `depth` conv-BN-ReLU layers (2 to 4) of widths
///   `4w, 8w, 8w, 16w`, then flatten and FC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    #[serde(default)]
    pub depth: usize,
    #[serde(default = "one")]
    pub widen_factor: usize,
    #[serde(default)]
    pub group_sizes: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

fn one() -> usize {
    1
}

impl ArchSpec {
    pub fn wideresnet(depth: usize, widen_factor: usize, num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Wideresnet,
            depth,
            widen_factor,
            group_sizes: Vec::new(),
            num_classes,
            input_channels: 3,
            input_size: 32,
        }
    }

    pub fn resnet(group_sizes: &[usize], num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Resnet,
            depth: 2 * group_sizes.iter().sum::<usize>() + 2,
            widen_factor: 1,
            group_sizes: group_sizes.to_vec(),
            num_classes,
            input_channels: 3,
            input_size: 32,
        }
    }

    pub fn smallconv(depth: usize, widen_factor: usize, num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Smallconv,
            depth,
            widen_factor,
            group_sizes: Vec::new(),
            num_classes,
            input_channels: 1,
            input_size: 28,
        }
    }

    pub fn with_input(mut self, channels: usize, size: usize) -> Self {
        self.input_channels = channels;
        self.input_size = size;
        self
    }

    fn resnet_groups(&self) -> Result<Vec<usize>> {
        if !self.group_sizes.is_empty() {
            return Ok(self.group_sizes.clone());
        }
        match self.depth {
            18 => Ok(vec![2, 2, 2, 2]),
            34 => Ok(vec![3, 4, 6, 3]),
            d => Err(arg_err!(
                "resnet depth {d} needs explicit group_sizes (only 18 and 34 are implied)"
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    /// Number of repeated groups after the initial convolution.
    pub fn num_groups(&self) -> Result<usize> {
        Ok(self.layout()?.groups.len() - 1)
    }

    pub(crate) fn layout(&self) -> Result<Layout> {
        if self.num_classes < 2 {
            return Err(arg_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(arg_err!("input channels and size must be positive"));
        }
        if self.widen_factor == 0 {
            return Err(arg_err!("widen_factor must be positive"));
        }
        let mut groups = Vec::new();
        let mut spatial = self.input_size;
        let mut push = |in_ch: usize, out_ch: usize, stride: usize, blocks: usize, groups: &mut Vec<GroupLayout>| {
            spatial = conv_extent(spatial, stride);
            groups.push(GroupLayout {
                in_ch,
                out_ch,
                stride,
                blocks,
                out_spatial: spatial,
            });
        };
        let head_in;
        match self.family {
            Family::Wideresnet => {
                if self.depth < 10 || !(self.depth - 4).is_multiple_of(6) {
                    return Err(arg_err!(
                        "wideresnet depth must satisfy (depth - 4) % 6 == 0 with depth >= 10, got {}",
                        self.depth
                    ));
                }
                let n = (self.depth - 4) / 6;
                let w = self.widen_factor;
                push(self.input_channels, 16, 1, 1, &mut groups);
                push(16, 16 * w, 1, n, &mut groups);
                push(16 * w, 32 * w, 2, n, &mut groups);
                push(32 * w, 64 * w, 2, n, &mut groups);
                head_in = 64 * w;
            }
            Family::Resnet => {
                let sizes = self.resnet_groups()?;
                if sizes.is_empty() || sizes.len() > 4 || sizes.contains(&0) {
                    return Err(arg_err!(
                        "resnet needs 1 to 4 non-empty groups, got {:?}",
                        sizes
                    ));
                }
                push(self.input_channels, 64, 1, 1, &mut groups);
                let widths = [64, 128, 256, 512];
                let mut prev = 64;
                for (i, &blocks) in sizes.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    push(prev, widths[i], stride, blocks, &mut groups);
                    prev = widths[i];
                }
                head_in = prev;
            }
            Family::Smallconv => {
                if !(2..=4).contains(&self.depth) {
                    return Err(arg_err!("smallconv depth must be 2..=4, got {}", self.depth));
                }
                let w = self.widen_factor;
                let widths = [4 * w, 8 * w, 8 * w, 16 * w];
                let strides = [1, 2, 2, 1];
                let mut prev = self.input_channels;
                for i in 0..self.depth {
                    push(prev, widths[i], strides[i], 1, &mut groups);
                    prev = widths[i];
                }
                head_in = 0;
            }
        }
        let last = groups.last().expect("at least one group");
        let head_in = if self.family == Family::Smallconv {
            last.out_ch * last.out_spatial * last.out_spatial
        } else {
            head_in
        };
        Ok(Layout { groups, head_in })
    }
}

/// Output extent of a 3x3/pad-1 (or 1x1/pad-0) convolution with `stride`.
fn conv_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

#[derive(Clone, Debug)]
pub(crate) struct GroupLayout {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub blocks: usize,
    pub out_spatial: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub groups: Vec<GroupLayout>,
    pub head_in: usize,
}

/// Pre-activation wide basic block: BN, ReLU, conv, BN, ReLU, conv.
#[derive(Clone, Debug)]
pub struct WideBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl WideBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, init: &mut Init) -> Self {
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            Conv2d::new(&format!("{name}.shortcut"), in_ch, out_ch, (1, 1), stride, 0, false, init)
        });
        WideBlock {
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), in_ch),
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, (3, 3), stride, 1, false, init),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, (3, 3), 1, 1, false, init),
            shortcut,
        }
    }

    fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let o = self.bn1.forward(pass, x)?;
        let o = pass.graph.relu(o)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(pass, o)?,
            None => x,
        };
        let h = self.conv1.forward(pass, o)?;
        let h = self.bn2.forward(pass, h)?;
        let h = pass.graph.relu(h)?;
        let h = self.conv2.forward(pass, h)?;
        pass.graph.add(skip, h)
    }
}

/// Post-activation basic block: conv, BN, ReLU, conv, BN, add, ReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, init: &mut Init) -> Self {
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv2d::new(&format!("{name}.shortcut"), in_ch, out_ch, (1, 1), stride, 0, false, init),
                BatchNorm2d::new(&format!("{name}.shortcut_bn"), out_ch),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, (3, 3), stride, 1, false, init),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, (3, 3), 1, 1, false, init),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            shortcut,
        }
    }

    fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(pass, x)?;
        let h = self.bn1.forward(pass, h)?;
        let h = pass.graph.relu(h)?;
        let h = self.conv2.forward(pass, h)?;
        let h = self.bn2.forward(pass, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(pass, x)?;
                bn.forward(pass, s)?
            }
            None => x,
        };
        let y = pass.graph.add(h, skip)?;
        pass.graph.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, init: &mut Init) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, (3, 3), stride, 1, false, init),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
        }
    }

    fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let h = self.conv.forward(pass, x)?;
        let h = self.bn.forward(pass, h)?;
        pass.graph.relu(h)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(Conv2d),
    ConvBnRelu(ConvBnRelu),
    Wide(WideBlock),
    Basic(BasicBlock),
}

impl Block {
    fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        match self {
            Block::Conv(c) => c.forward(pass, x),
            Block::ConvBnRelu(b) => b.forward(pass, x),
            Block::Wide(b) => b.forward(pass, x),
            Block::Basic(b) => b.forward(pass, x),
        }
    }
}

impl Module for Block {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        match self {
            Block::Conv(c) => c.visit(f),
            Block::ConvBnRelu(b) => {
                b.conv.visit(f);
                b.bn.visit(f);
            }
            Block::Wide(b) => {
                b.bn1.visit(f);
                b.conv1.visit(f);
                b.bn2.visit(f);
                b.conv2.visit(f);
                if let Some(sc) = &b.shortcut {
                    sc.visit(f);
                }
            }
            Block::Basic(b) => {
                b.conv1.visit(f);
                b.bn1.visit(f);
                b.conv2.visit(f);
                b.bn2.visit(f);
                if let Some((c, bn)) = &b.shortcut {
                    c.visit(f);
                    bn.visit(f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Block::Conv(c) => c.visit_mut(f),
            Block::ConvBnRelu(b) => {
                b.conv.visit_mut(f);
                b.bn.visit_mut(f);
            }
            Block::Wide(b) => {
                b.bn1.visit_mut(f);
                b.conv1.visit_mut(f);
                b.bn2.visit_mut(f);
                b.conv2.visit_mut(f);
                if let Some(sc) = &mut b.shortcut {
                    sc.visit_mut(f);
                }
            }
            Block::Basic(b) => {
                b.conv1.visit_mut(f);
                b.bn1.visit_mut(f);
                b.conv2.visit_mut(f);
                b.bn2.visit_mut(f);
                if let Some((c, bn)) = &mut b.shortcut {
                    c.visit_mut(f);
                    bn.visit_mut(f);
                }
            }
        }
    }
}

impl Block {
    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            Block::Conv(_) => vec![],
            Block::ConvBnRelu(b) => vec![&mut b.bn],
            Block::Wide(b) => vec![&mut b.bn1, &mut b.bn2],
            Block::Basic(b) => {
                let mut v = vec![&mut b.bn1, &mut b.bn2];
                if let Some((_, bn)) = &mut b.shortcut {
                    v.push(bn);
                }
                v
            }
        }
    }
}

/// A run of blocks sharing a filter arrangement.
#[derive(Clone, Debug)]
pub struct Group {
    pub(crate) blocks: Vec<Block>,
}

impl Group {
    pub(crate) fn forward<'a>(&'a self, pass: &mut Pass<'a>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(pass, x)?;
        }
        Ok(x)
    }
}

impl Module for Group {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

/// Final normalization (wide nets only), pooling and FC classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub(crate) bn: Option<BatchNorm2d>,
    pub(crate) global_pool: bool,
    pub(crate) fc: Linear,
}

impl ClassifierHead {
    pub(crate) fn forward<'a>(&'a self, pass: &mut Pass<'a>, mut x: Var) -> Result<Var> {
        if let Some(bn) = &self.bn {
            x = bn.forward(pass, x)?;
            x = pass.graph.relu(x)?;
        }
        if self.global_pool {
            let s = pass.graph.value(x).shape().to_vec();
            let hw = s[2] * s[3];
            x = pass.graph.reshape(x, &[s[0], s[1], hw])?;
            x = pass.graph.avg_pool(x, hw, hw, 2)?;
        }
        x = pass.graph.flatten(x)?;
        self.fc.forward(pass, x)
    }
}

impl Module for ClassifierHead {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
        self.fc.visit_mut(f);
    }
}

/// Builds groups `from..` and the classifier head, naming every parameter
/// under `prefix`.
pub(crate) fn build_from(
    spec: &ArchSpec,
    from: usize,
    prefix: &str,
    init: &mut Init,
) -> Result<(Vec<Group>, ClassifierHead)> {
    let layout = spec.layout()?;
    let mut groups = Vec::new();
    for (gi, g) in layout.groups.iter().enumerate().skip(from) {
        let mut blocks = Vec::with_capacity(g.blocks);
        for bi in 0..g.blocks {
            let name = format!("{prefix}g{gi}.b{bi}");
            let (in_ch, stride) = if bi == 0 { (g.in_ch, g.stride) } else { (g.out_ch, 1) };
            let block = match (spec.family, gi) {
                (Family::Wideresnet, 0) => Block::Conv(Conv2d::new(
                    &format!("{name}.conv"),
                    in_ch,
                    g.out_ch,
                    (3, 3),
                    1,
                    1,
                    false,
                    init,
                )),
                (Family::Wideresnet, _) => Block::Wide(WideBlock::new(&name, in_ch, g.out_ch, stride, init)),
                (Family::Resnet, 0) | (Family::Smallconv, _) => {
                    Block::ConvBnRelu(ConvBnRelu::new(&name, in_ch, g.out_ch, stride, init))
                }
                (Family::Resnet, _) => Block::Basic(BasicBlock::new(&name, in_ch, g.out_ch, stride, init)),
            };
            blocks.push(block);
        }
        groups.push(Group { blocks });
    }
    let head = ClassifierHead {
        bn: (spec.family == Family::Wideresnet)
            .then(|| BatchNorm2d::new(&format!("{prefix}head.bn"), layout.head_in)),
        global_pool: spec.family != Family::Smallconv,
        fc: Linear::new(&format!("{prefix}head.fc"), layout.head_in, spec.num_classes, init),
    };
    Ok((groups, head))
}

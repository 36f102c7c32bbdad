//! Logits-fusion CNN: stacks the two heads' logits, mixes them per class
//! with head-wise kernels, compares classes pairwise, pools, and classifies.

use crate::error::{arg_err, dim_err, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, Linear, Module, Param, Pass};
use crate::tensor::{Graph, Var};

pub const HEADWISE_KERNELS: usize = 8;
pub const PAIR_KERNELS: usize = 16;
const POOL_WINDOW: usize = 2;
const POOL_STRIDE: usize = 2;

/// All unordered class pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn enumerate_class_pairs(classes: usize) -> Result<Vec<(usize, usize)>> {
    if classes < 2 {
        return Err(arg_err!("need at least 2 classes to form pairs, got {classes}"));
    }
    Ok((0..classes)
        .flat_map(|i| (i + 1..classes).map(move |j| (i, j)))
        .collect())
}

/// Places two `N x C` logit batches side by side as `N x 1 x C x 2`.
pub fn stack_logits(g: &mut Graph<'_>, main: Var, second: Var) -> Result<Var> {
    let (sa, sb) = (g.value(main).shape().to_vec(), g.value(second).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(dim_err!("stack_logits: shapes {:?} and {:?} must be equal N x C", sa, sb));
    }
    let a = g.reshape(main, &[sa[0], 1, sa[1], 1])?;
    let b = g.reshape(second, &[sa[0], 1, sa[1], 1])?;
    g.concat(&[a, b], 3)
}

/// Intermediate tensors of one merge forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MergeTrace {
    pub stacked: Var,
    pub headwise: Var,
    pub pairwise: Var,
    pub pooled: Var,
    pub flat: Var,
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct MergeCnn {
    classes: usize,
    pairs: Vec<(usize, usize)>,
    pub headwise: Conv2d,
    pub headwise_bn: BatchNorm2d,
    pub pairwise: Conv2d,
    pub fc: Linear,
}

impl MergeCnn {
    pub fn new(classes: usize, init: &mut Init) -> Result<Self> {
        let pairs = enumerate_class_pairs(classes)?;
        let flat = POOL_WINDOW_OUT * HEADWISE_KERNELS * pairs.len();
        Ok(MergeCnn {
            classes,
            headwise: Conv2d::new("merge.headwise", 1, HEADWISE_KERNELS, (1, 2), 1, 0, true, init),
            headwise_bn: BatchNorm2d::new("merge.headwise_bn", HEADWISE_KERNELS),
            pairwise: Conv2d::new("merge.pairwise", 1, PAIR_KERNELS, (1, 2), 1, 0, true, init),
            fc: Linear::new("merge.fc", flat, classes, init),
            pairs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Width of the flattened pooled features, `64 * P`.
    pub fn flat_len(&self) -> usize {
        self.fc.in_features()
    }

    pub(crate) fn batch_norm_mut(&mut self) -> &mut BatchNorm2d {
        &mut self.headwise_bn
    }

    /// `N x 1 x C x 2` to `N x 8 x C x 1`, followed by BN and ReLU.
    pub fn headwise<'a>(&'a self, pass: &mut Pass<'a>, stacked: Var) -> Result<Var> {
        let s = pass.graph.value(stacked).shape().to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.classes || s[3] != 2 {
            return Err(dim_err!(
                "headwise input must be N x 1 x {} x 2, got {:?}",
                self.classes,
                s
            ));
        }
        let h = self.headwise.forward(pass, stacked)?;
        let h = self.headwise_bn.forward(pass, h)?;
        pass.graph.relu(h)
    }

    /// `N x 8 x C x 1` to `N x 16 x 8 x P`: each kernel combines the two
    /// classes of a pair within every head-wise channel.
    pub fn pairwise<'a>(&'a self, pass: &mut Pass<'a>, features: Var) -> Result<Var> {
        let s = pass.graph.value(features).shape().to_vec();
        let c = self.classes;
        if s.len() < 3 || s[1] != HEADWISE_KERNELS || s[2] != c || s[3..].iter().product::<usize>() != 1 {
            return Err(dim_err!(
                "pairwise input must be N x {HEADWISE_KERNELS} x {c} (x 1), got {:?}",
                s
            ));
        }
        let n = s[0];
        let p = self.pairs.len();
        let mut index = Vec::with_capacity(HEADWISE_KERNELS * p * 2);
        for k in 0..HEADWISE_KERNELS {
            for &(i, j) in &self.pairs {
                index.push(k * c + i);
                index.push(k * c + j);
            }
        }
        let gathered = pass.graph.gather(features, index, &[1, HEADWISE_KERNELS * p, 2])?;
        let out = self.pairwise.forward(pass, gathered)?;
        pass.graph.reshape(out, &[n, PAIR_KERNELS, HEADWISE_KERNELS, p])
    }

    /// Runs the full pipeline and returns every intermediate.
    pub fn trace<'a>(&'a self, pass: &mut Pass<'a>, main: Var, second: Var) -> Result<MergeTrace> {
        let c = pass.graph.value(main).shape().last().copied().unwrap_or(0);
        if c != self.classes {
            return Err(arg_err!(
                "merge CNN built for {} classes, logits have {c}",
                self.classes
            ));
        }
        let stacked = stack_logits(&mut pass.graph, main, second)?;
        let headwise = self.headwise(pass, stacked)?;
        let pairwise = self.pairwise(pass, headwise)?;
        let pooled = pass.graph.avg_pool(pairwise, POOL_WINDOW, POOL_STRIDE, 1)?;
        let flat = pass.graph.flatten(pooled)?;
        let scores = self.fc.forward(pass, flat)?;
        Ok(MergeTrace {
            stacked,
            headwise,
            pairwise,
            pooled,
            flat,
            scores,
        })
    }

    /// Pre-softmax class scores.
    pub fn scores<'a>(&'a self, pass: &mut Pass<'a>, main: Var, second: Var) -> Result<Var> {
        Ok(self.trace(pass, main, second)?.scores)
    }

    /// Class probabilities.
    pub fn forward<'a>(&'a self, pass: &mut Pass<'a>, main: Var, second: Var) -> Result<Var> {
        let z = self.scores(pass, main, second)?;
        pass.graph.softmax(z)
    }
}

const POOL_WINDOW_OUT: usize = (PAIR_KERNELS - POOL_WINDOW) / POOL_STRIDE + 1;

impl Module for MergeCnn {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        self.headwise.visit(f);
        self.headwise_bn.visit(f);
        self.pairwise.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.headwise.visit_mut(f);
        self.headwise_bn.visit_mut(f);
        self.pairwise.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

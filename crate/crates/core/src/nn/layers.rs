use super::param::{BnUpdate, Init, Module, Param, Pass};
use crate::tensor::{Real, Tensor, Var};
use crate::Result;

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut Init,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel.0, kernel.1];
        let weight = Param::weight(format!("{name}.weight"), init.kaiming(&shape));
        let bias = bias.then(|| {
            let fan_in = in_ch * kernel.0 * kernel.1;
            Param::weight(format!("{name}.bias"), init.uniform_fan_in(&[out_ch], fan_in))
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let w = pass.param(&self.weight);
        let b = self.bias.as_ref().map(|b| pass.param(b));
        pass.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Batch normalization over the channel axis.
///
/// A layer whose affine parameters are frozen always normalizes with its
/// running statistics and never updates them.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::weight(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let gamma = pass.param(&self.gamma);
        let beta = pass.param(&self.beta);
        if pass.is_training() && !self.gamma.frozen {
            let (y, stats) = pass.graph.batch_norm(x, gamma, beta, None, BN_EPS)?;
            if let Some((mean, var)) = stats {
                pass.record_bn(BnUpdate {
                    layer: self.name.clone(),
                    mean,
                    var,
                });
            }
            Ok(y)
        } else {
            let running = (self.running_mean.value.data(), self.running_var.value.data());
            let (y, _) = pass.graph.batch_norm(x, gamma, beta, Some(running), BN_EPS)?;
            Ok(y)
        }
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn apply_update(&mut self, update: &BnUpdate) {
        let m = BN_MOMENTUM;
        for (r, &v) in self.running_mean.value.data_mut().iter_mut().zip(&update.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&update.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

impl Module for BatchNorm2d {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Fully connected layer; the weight is stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, init: &mut Init) -> Self {
        Linear {
            weight: Param::weight(
                format!("{name}.weight"),
                init.uniform_fan_in(&[in_features, out_features], in_features),
            ),
            bias: Param::weight(
                format!("{name}.bias"),
                init.uniform_fan_in(&[out_features], in_features),
            ),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        let w = pass.param(&self.weight);
        let b = pass.param(&self.bias);
        let y = pass.graph.matmul(x, w)?;
        pass.graph.add_bias(y, b)
    }
}

impl Module for Linear {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

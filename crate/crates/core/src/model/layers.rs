//! Parameter-holding layer blocks with stable dotted paths.

use crate::error::{Error, Result};
use crate::nn::{self, BnMode, BnStatsUpdate, LstmWeights};
use crate::tensor::{Scalar, Tensor};

/// Uniform access to a block's named tensors.
///
/// Paths are dot-separated and relative to the block; containers prepend
/// their own prefix. `set_tensor` replaces a parameter or buffer by path,
/// enforcing shape equality.
pub trait ParamBlock<T: Scalar> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn set_slot<T: Scalar>(slot: &mut Tensor<T>, value: Tensor<T>, trainable: bool, path: &str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor '{path}' has shape {:?}, expected {:?}",
            value.shape(),
            slot.shape()
        )));
    }
    *slot = if trainable {
        Tensor::leaf(value.shape().to_vec(), value.data().to_vec(), true)
    } else {
        value.detach()
    };
    Ok(())
}

fn unknown<T>(path: &str, block: &str) -> Result<T> {
    Err(Error::Checkpoint(format!(
        "unknown tensor path '{path}' in {block}"
    )))
}

// ---------------------------------------------------------------------------

pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> ParamBlock<T> for Conv2dLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        match path {
            "weight" => set_slot(&mut self.weight, value, true, path),
            "bias" => match &mut self.bias {
                Some(b) => set_slot(b, value, true, path),
                None => unknown(path, "bias-free convolution"),
            },
            _ => unknown(path, "Conv2dLayer"),
        }
    }
}

pub struct Deconv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl<T: Scalar> Deconv2dLayer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::deconv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> ParamBlock<T> for Deconv2dLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        match path {
            "weight" => set_slot(&mut self.weight, value, true, path),
            "bias" => match &mut self.bias {
                Some(b) => set_slot(b, value, true, path),
                None => unknown(path, "bias-free deconvolution"),
            },
            _ => unknown(path, "Deconv2dLayer"),
        }
    }
}

pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::linear(x, &self.weight, self.bias.as_ref())
    }
}

impl<T: Scalar> ParamBlock<T> for LinearLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        match path {
            "weight" => set_slot(&mut self.weight, value, true, path),
            "bias" => match &mut self.bias {
                Some(b) => set_slot(b, value, true, path),
                None => unknown(path, "bias-free linear layer"),
            },
            _ => unknown(path, "LinearLayer"),
        }
    }
}

/// Batch-norm parameters plus running statistics. Forward passes stay pure;
/// train-mode statistic updates are returned to the caller, which commits
/// them through [`BatchNormLayer::apply_update`].
pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], T::one()).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum,
            eps,
        }
    }

    pub fn forward2d(&self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Option<BnStatsUpdate<T>>)> {
        nn::batchnorm2d(
            x,
            &self.gamma,
            &self.beta,
            self.running_mean.data(),
            self.running_var.data(),
            self.momentum,
            self.eps,
            mode,
        )
    }

    pub fn forward1d(&self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Option<BnStatsUpdate<T>>)> {
        nn::batchnorm1d(
            x,
            &self.gamma,
            &self.beta,
            self.running_mean.data(),
            self.running_var.data(),
            self.momentum,
            self.eps,
            mode,
        )
    }

    pub fn apply_update(&mut self, update: &BnStatsUpdate<T>) {
        let c = self.running_mean.numel();
        self.running_mean = Tensor::leaf(vec![c], update.running_mean.clone(), false);
        self.running_var = Tensor::leaf(vec![c], update.running_var.clone(), false);
    }
}

impl<T: Scalar> ParamBlock<T> for BatchNormLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        match path {
            "gamma" => set_slot(&mut self.gamma, value, true, path),
            "beta" => set_slot(&mut self.beta, value, true, path),
            "running_mean" => set_slot(&mut self.running_mean, value, false, path),
            "running_var" => set_slot(&mut self.running_var, value, false, path),
            _ => unknown(path, "BatchNormLayer"),
        }
    }
}

impl<T: Scalar> ParamBlock<T> for LstmWeights<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "w_ih"), self.w_ih.clone()));
        out.push((join(prefix, "w_hh"), self.w_hh.clone()));
        out.push((join(prefix, "b_ih"), self.b_ih.clone()));
        out.push((join(prefix, "b_hh"), self.b_hh.clone()));
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        match path {
            "w_ih" => set_slot(&mut self.w_ih, value, true, path),
            "w_hh" => set_slot(&mut self.w_hh, value, true, path),
            "b_ih" => set_slot(&mut self.b_ih, value, true, path),
            "b_hh" => set_slot(&mut self.b_hh, value, true, path),
            _ => unknown(path, "LstmWeights"),
        }
    }
}

/// Routes a dotted path to a child block by its leading segment.
pub(crate) fn dispatch<T: Scalar>(
    path: &str,
    children: &mut [(&str, &mut dyn ParamBlock<T>)],
    value: Tensor<T>,
    block: &str,
) -> Result<()> {
    if let Some((head, rest)) = path.split_once('.') {
        for (name, child) in children.iter_mut() {
            if *name == head {
                return child.set_tensor(rest, value);
            }
        }
    }
    unknown(path, block)
}

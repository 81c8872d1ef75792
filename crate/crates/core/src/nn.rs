//! Named parameter storage and the convolution layers built on it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters registered as leaves of one graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps vars already in a graph, in parameter-id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a graph leaf. With `trainable` false the
    /// leaves do not require gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t)
                    } else {
                        g.leaf(t.clone().with_requires_grad(false))
                    }
                })
                .collect(),
        )
    }

    /// Copies the gradients a backward pass left on the bound leaves into
    /// the stored tensors (adding to what is there).
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound.vars()) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the values of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: Vec<T>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if values.len() != t.numel() {
            return Err(invalid!(
                "parameter {} holds {} values, got {}",
                self.names[id.0],
                t.numel(),
                values.len()
            ));
        }
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    Normal(f64),
}

fn init_tensor<T: Element, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let std = match init {
        Init::HeNormal => (2.0 / fan_in.max(1) as f64).sqrt(),
        Init::Normal(s) => s,
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(normal.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&shape, in_channels * kernel * kernel, init, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::full([out_channels], T::from_f64_lossy(bias)),
        );
        Conv2dLayer {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }

    pub fn forward_relu<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.relu(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose2x2Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2Layer {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let shape = [in_channels, out_channels, 2, 2];
        // each output pixel sees exactly one tap per input channel
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&shape, in_channels, Init::HeNormal, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        ConvTranspose2x2Layer { weight, bias }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d_2x2(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

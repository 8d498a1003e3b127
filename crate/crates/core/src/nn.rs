//! Parameter storage and the handful of layer types the network is built from.

use std::collections::HashMap;

use crate::rng::SplitMix64;
use crate::tensor::{real, ConvGeometry, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id_of(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of learnable scalars, enumerated from the allocated tensors.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Records every parameter as a constant (inference without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles for one binding of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
fn fan_in_uniform<T: Real>(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| real(rng.uniform(-bound, bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let cin_g = in_channels / groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[out_channels, cin_g, kernel, kernel], fan_in));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out_channels], fan_in));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry { stride, padding: kernel / 2, groups },
        }
    }

    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 1, 1, 1)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Fully connected layer on `[B, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[out, inp], inp));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out], inp));
        Linear { weight, bias, in_features: inp, out_features: out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let x4 = tape.reshape(x, &[batch, self.in_features, 1, 1])?;
        let w4 = tape.reshape(p.var(self.weight), &[self.out_features, self.in_features, 1, 1])?;
        let y = tape.conv2d(x4, w4, Some(p.var(self.bias)), ConvGeometry::pointwise())?;
        tape.reshape(y, &[batch, self.out_features])
    }
}

/// 3×3 convolution → GroupNorm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm_groups: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride, 1),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, norm_groups),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(0);
        Conv2d::pointwise(&mut store, &mut rng, "c", 48, 64);
        assert_eq!(store.element_count(), 48 * 64 + 64);
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(3);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let y = lin.forward(&mut tape, &p, x).unwrap();
        let w = store.get(lin.weight);
        let b = store.get(lin.bias);
        for o in 0..2 {
            let expect = b.data()[o] + w.at(&[o, 0]) - 2.0 * w.at(&[o, 1]) + 0.5 * w.at(&[o, 2]);
            assert!((tape.value(y).data()[o] - expect).abs() < 1e-12);
        }
    }
}

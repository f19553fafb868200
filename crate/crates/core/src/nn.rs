//! Layers, named parameter storage and Glorot initialization.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Conv2dGeometry, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    /// Nearest upsampling by `factor` followed by a stride-1 convolution.
    DeconvBlock { factor: usize },
    /// Fully connected; weight stored as `(in, out)`.
    Fc,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub activation: Option<Activation>,
}

impl LayerSpec {
    /// Square convolution with "same" padding `dilation * (k - 1) / 2`
    /// (size preserving at stride 1, halving even extents at stride 2).
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (kernel.saturating_sub(1)) / 2;
        LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            dilation: (dilation, dilation),
            padding: (pad, pad),
            activation: None,
        }
    }

    pub fn deconv_block(in_channels: usize, out_channels: usize, kernel: usize, factor: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DeconvBlock { factor },
            ..Self::conv(in_channels, out_channels, kernel, 1, 1)
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Fc,
            in_channels: in_features,
            out_channels: out_features,
            kernel: (1, 1),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            activation: None,
        }
    }

    pub fn activation_only(kind: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Activation,
            in_channels: 0,
            out_channels: 0,
            kernel: (1, 1),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            activation: Some(kind),
        }
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry {
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        }
    }

    pub fn has_params(&self) -> bool {
        self.kind != LayerKind::Activation
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Fc => vec![self.in_channels, self.out_channels],
            _ => vec![self.out_channels, self.in_channels, self.kernel.0, self.kernel.1],
        }
    }

    /// `F * C * kh * kw + F` for convolutions, `in * out + out` for fc.
    pub fn param_count(&self) -> usize {
        if !self.has_params() {
            return 0;
        }
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LayerKind::Activation {
            return Ok(());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("layer channel counts must be positive"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("stride and dilation must be >= 1"));
        }
        if let LayerKind::DeconvBlock { factor: 0 } = self.kind {
            return Err(Error::invalid("upsampling factor must be >= 1"));
        }
        Ok(())
    }

    fn fans(&self) -> (usize, usize) {
        let taps = self.kernel.0 * self.kernel.1;
        (self.in_channels * taps, self.out_channels * taps)
    }
}

/// Parameters keyed by hierarchical name, e.g. `rgb_encoder.conv1.weight`.
/// Iteration is in name order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: BTreeMap::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Swaps in a new value for an existing parameter of the same shape.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("replace", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter tensors in name order.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Glorot-uniform weights with bound `sqrt(6 / (fan_in + fan_out))`, zero biases.
/// Returns `(weight, bias)` leaves, or `None` for parameter-free layers.
pub fn init_params<T: Element, R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
    spec.validate()?;
    if !spec.has_params() {
        return Ok(None);
    }
    let (fan_in, fan_out) = spec.fans();
    let bound = glorot_bound(fan_in, fan_out);
    let shape = spec.weight_shape();
    let n: usize = shape.iter().product();
    let w: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Ok(Some((
        Tensor::parameter(w, &shape)?,
        Tensor::parameter(vec![T::zero(); spec.out_channels], &[spec.out_channels])?,
    )))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Applies one layer whose parameters live at `{prefix}.weight` / `{prefix}.bias`.
/// Convolutions run before the activation.
pub fn layer_forward<T: Element>(spec: &LayerSpec, params: &ParamStore<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = match spec.kind {
        LayerKind::Activation => x.clone(),
        LayerKind::Conv | LayerKind::DeconvBlock { .. } => {
            if x.rank() != 4 || x.shape()[1] != spec.in_channels {
                return Err(Error::ShapeMismatch {
                    op: "layer_forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![spec.in_channels],
                });
            }
            let x = match spec.kind {
                LayerKind::DeconvBlock { factor } => x.upsample_nearest(factor)?,
                _ => x.clone(),
            };
            let w = params.get(&format!("{prefix}.weight"))?;
            let b = params.get(&format!("{prefix}.bias"))?;
            x.conv2d(w, Some(b), spec.geometry())?
        }
        LayerKind::Fc => {
            let batch = x.shape().first().copied().unwrap_or(1);
            if batch == 0 || x.numel() / batch != spec.in_channels {
                return Err(Error::ShapeMismatch {
                    op: "layer_forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![spec.in_channels],
                });
            }
            let flat = x.reshape(&[batch, spec.in_channels])?;
            let w = params.get(&format!("{prefix}.weight"))?;
            let b = params.get(&format!("{prefix}.bias"))?;
            flat.matmul(w)?.add(b)?
        }
    };
    Ok(match spec.activation {
        Some(a) => y.activation(a),
        None => y,
    })
}

/// A named layer inside a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Layer { name: name.into(), spec }
    }
}

/// An ordered chain of layers sharing a name prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub prefix: String,
    pub layers: Vec<Layer>,
}

impl Stage {
    pub fn new(prefix: impl Into<String>, layers: Vec<Layer>) -> Self {
        Stage {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn param_prefix(&self, layer: &Layer) -> String {
        format!("{}.{}", self.prefix, layer.name)
    }

    /// Initializes every layer's parameters into `store`.
    pub fn init<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for layer in &self.layers {
            if let Some((w, b)) = init_params::<T, R>(&layer.spec, rng)? {
                let p = self.param_prefix(layer);
                store.insert(format!("{p}.weight"), w)?;
                store.insert(format!("{p}.bias"), b)?;
            }
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer_forward(&layer.spec, store, &self.param_prefix(layer), &h)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(spec: &LayerSpec, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        Stage::new("s", vec![Layer::new("l", *spec)])
            .init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        store
    }

    #[test]
    fn biases_start_at_zero_and_weights_respect_bound() {
        let spec = LayerSpec::conv(3, 5, 3, 1, 1);
        let store = store_for(&spec, 1);
        assert!(store.get("s.l.bias").unwrap().data().iter().all(|v| *v == 0.0));
        let b = glorot_bound(27, 45);
        let w = store.get("s.l.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= b));
        assert!(w.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn pointwise_bound() {
        assert!((glorot_bound(1, 1) - 3f64.sqrt()).abs() < 1e-15);
        assert!((glorot_bound(1, 1) - 1.732).abs() < 1e-3);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = LayerSpec::conv(2, 4, 5, 2, 1);
        let a = store_for(&spec, 9);
        let b = store_for(&spec, 9);
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn activation_layer_equals_activation_op() {
        let x = Tensor::<f64>::from_f64s(&[-1.0, 0.5, 2.0, -0.1], &[1, 1, 2, 2]).unwrap();
        let spec = LayerSpec::activation_only(Activation::Elu(1.0));
        let y = layer_forward(&spec, &ParamStore::new(), "unused", &x).unwrap();
        assert_eq!(y.data(), x.elu(1.0).data());
    }

    #[test]
    fn stride_two_halves_even_extents() {
        let spec = LayerSpec::conv(2, 3, 3, 2, 1);
        let store = store_for(&spec, 2);
        let y = layer_forward(&spec, &store, "s.l", &Tensor::zeros(&[1, 2, 16, 12])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 6]);
    }

    #[test]
    fn same_padding_preserves_extent_for_every_dilation() {
        for d in [1, 2, 4, 8, 16] {
            let spec = LayerSpec::conv(1, 1, 3, 1, d);
            assert_eq!(spec.padding, (d, d));
            let store = store_for(&spec, 3);
            let y = layer_forward(&spec, &store, "s.l", &Tensor::zeros(&[1, 1, 20, 20])).unwrap();
            assert_eq!(y.shape(), &[1, 1, 20, 20]);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let spec = LayerSpec::conv(3, 2, 3, 1, 1);
        let store = store_for(&spec, 4);
        let err = layer_forward(&spec, &store, "s.l", &Tensor::zeros(&[1, 2, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "layer_forward", .. }));
    }

    #[test]
    fn registry_totals_match_formula() {
        let stage = Stage::new(
            "net",
            vec![
                Layer::new("a", LayerSpec::conv(4, 8, 5, 1, 1)),
                Layer::new("act", LayerSpec::activation_only(Activation::Relu)),
                Layer::new("b", LayerSpec::deconv_block(8, 3, 3, 2)),
                Layer::new("c", LayerSpec::fc(12, 1)),
            ],
        );
        let mut store = ParamStore::<f64>::new();
        stage.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected = (8 * 4 * 25 + 8) + (3 * 8 * 9 + 3) + (12 + 1);
        assert_eq!(stage.param_count(), expected);
        assert_eq!(store.total_elements(), expected);
        assert_eq!(store.len(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[1])).is_err());
    }
}

//! Network topologies, parameter storage, and whole-net forward/backward.
//!
//! Three fixed nets make up the cascade. Sizes are the spatial extents of
//! each stage's square input patch:
//!
//! - `Net12`: fully convolutional, three convs and one pool, 32-wide
//!   feature. Because it has no fully-connected layer it can scan a whole
//!   image in one pass ([`forward_dense`]).
//! - `Net24`: three convs, two pools, one 128-wide fully-connected layer.
//! - `Net48`: four convs, three pools, one 256-wide fully-connected layer.
//!
//! Every net ends in the same three linear heads: `cls` (2-way face score,
//! softmaxed), `reg` (4 bounding-box offsets), `pts` (10 landmark
//! coordinates). A net can be built *bridged*, widening its first
//! fully-connected layer to also accept the previous net's feature vector;
//! gradients then flow across nets during joint fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{
    conv2d, conv2d_backward, linear, linear_backward, max_pool, max_pool_backward, out_extent,
    prelu, prelu_backward, softmax2, softmax2_backward,
};
use crate::tensor::{Scalar, Tensor};

/// Feature width Net12 exposes to a bridged Net24.
pub const BRIDGE_WIDTH_12: usize = 32;
/// Feature width Net24 exposes to a bridged Net48.
pub const BRIDGE_WIDTH_24: usize = 128;

/// Which of the three cascade nets a spec or parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NetId {
    Net12,
    Net24,
    Net48,
}

impl NetId {
    pub fn as_str(self) -> &'static str {
        match self {
            NetId::Net12 => "net12",
            NetId::Net24 => "net24",
            NetId::Net48 => "net48",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "net12" => Ok(NetId::Net12),
            "net24" => Ok(NetId::Net24),
            "net48" => Ok(NetId::Net48),
            other => Err(Error::Config(format!("unknown net id {other:?}"))),
        }
    }

    /// Square input patch extent.
    pub fn input_size(self) -> usize {
        match self {
            NetId::Net12 => 12,
            NetId::Net24 => 24,
            NetId::Net48 => 48,
        }
    }
}

/// One trunk layer. Kernels and pool windows are square. Conv and Fc layers
/// carry a PReLU with per-channel slopes named `<id>.slope`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        id: &'static str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Fc {
        id: &'static str,
        in_width: usize,
        out_width: usize,
    },
}

/// A complete net: ordered trunk plus the three fixed heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub id: NetId,
    pub input_size: usize,
    pub trunk: Vec<LayerSpec>,
    /// Width of the flattened trunk output the heads read.
    pub feature_width: usize,
    /// Extra inputs appended to the first fully-connected layer when this
    /// net runs bridged onto the previous stage's features; 0 otherwise.
    pub bridge_in_width: usize,
}

impl NetworkSpec {
    pub fn net12() -> Self {
        NetworkSpec {
            id: NetId::Net12,
            input_size: 12,
            trunk: vec![
                LayerSpec::Conv { id: "conv1", in_ch: 3, out_ch: 10, k: 3, stride: 1 },
                LayerSpec::Pool { window: 2, stride: 2 },
                LayerSpec::Conv { id: "conv2", in_ch: 10, out_ch: 16, k: 3, stride: 1 },
                LayerSpec::Conv { id: "conv3", in_ch: 16, out_ch: 32, k: 3, stride: 1 },
            ],
            feature_width: BRIDGE_WIDTH_12,
            bridge_in_width: 0,
        }
    }

    pub fn net24(bridged: bool) -> Self {
        let bridge = if bridged { BRIDGE_WIDTH_12 } else { 0 };
        NetworkSpec {
            id: NetId::Net24,
            input_size: 24,
            trunk: vec![
                LayerSpec::Conv { id: "conv1", in_ch: 3, out_ch: 28, k: 3, stride: 1 },
                LayerSpec::Pool { window: 3, stride: 2 },
                LayerSpec::Conv { id: "conv2", in_ch: 28, out_ch: 48, k: 3, stride: 1 },
                LayerSpec::Pool { window: 3, stride: 2 },
                LayerSpec::Conv { id: "conv3", in_ch: 48, out_ch: 64, k: 2, stride: 1 },
                LayerSpec::Fc { id: "fc1", in_width: 256 + bridge, out_width: BRIDGE_WIDTH_24 },
            ],
            feature_width: BRIDGE_WIDTH_24,
            bridge_in_width: bridge,
        }
    }

    pub fn net48(bridged: bool) -> Self {
        let bridge = if bridged { BRIDGE_WIDTH_24 } else { 0 };
        NetworkSpec {
            id: NetId::Net48,
            input_size: 48,
            trunk: vec![
                LayerSpec::Conv { id: "conv1", in_ch: 3, out_ch: 32, k: 3, stride: 1 },
                LayerSpec::Pool { window: 3, stride: 2 },
                LayerSpec::Conv { id: "conv2", in_ch: 32, out_ch: 64, k: 3, stride: 1 },
                LayerSpec::Pool { window: 3, stride: 2 },
                LayerSpec::Conv { id: "conv3", in_ch: 64, out_ch: 64, k: 3, stride: 1 },
                LayerSpec::Pool { window: 2, stride: 2 },
                LayerSpec::Conv { id: "conv4", in_ch: 64, out_ch: 128, k: 2, stride: 1 },
                LayerSpec::Fc { id: "fc1", in_width: 512 + bridge, out_width: 256 },
            ],
            feature_width: 256,
            bridge_in_width: bridge,
        }
    }

    pub fn for_net(id: NetId, bridged: bool) -> Result<Self> {
        match (id, bridged) {
            (NetId::Net12, false) => Ok(Self::net12()),
            (NetId::Net12, true) => Err(Error::Config(
                "net12 is the lowest stage and cannot be bridged".into(),
            )),
            (NetId::Net24, b) => Ok(Self::net24(b)),
            (NetId::Net48, b) => Ok(Self::net48(b)),
        }
    }

    /// Id of the first fully-connected trunk layer, if any.
    pub fn first_fc_id(&self) -> Option<&'static str> {
        self.trunk.iter().find_map(|l| match l {
            LayerSpec::Fc { id, .. } => Some(*id),
            _ => None,
        })
    }

    /// Product of all layer strides: how far one dense-scan output cell
    /// steps across the input image.
    pub fn dense_stride(&self) -> usize {
        self.trunk
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } | LayerSpec::Pool { stride, .. } => *stride,
                LayerSpec::Fc { .. } => 1,
            })
            .product()
    }

    /// Walks the trunk over the nominal input, checking every layer
    /// transition, and returns the flattened feature width.
    pub fn validate(&self) -> Result<usize> {
        let mut shape = vec![3, self.input_size, self.input_size];
        let mut seen_fc = false;
        for layer in &self.trunk {
            match layer {
                LayerSpec::Conv { id, in_ch, out_ch, k, stride } => {
                    if seen_fc {
                        return Err(Error::Dimension(format!(
                            "conv layer {id} after a fully-connected layer"
                        )));
                    }
                    if shape[0] != *in_ch {
                        return Err(Error::Dimension(format!(
                            "layer {id} expects {in_ch} channels, gets {}",
                            shape[0]
                        )));
                    }
                    shape = vec![
                        *out_ch,
                        out_extent(shape[1], *k, *stride)?,
                        out_extent(shape[2], *k, *stride)?,
                    ];
                }
                LayerSpec::Pool { window, stride } => {
                    shape = vec![
                        shape[0],
                        out_extent(shape[1], *window, *stride)?,
                        out_extent(shape[2], *window, *stride)?,
                    ];
                }
                LayerSpec::Fc { id, in_width, out_width } => {
                    let flat: usize = shape.iter().product();
                    let expected = if seen_fc { flat } else { flat + self.bridge_in_width };
                    if *in_width != expected {
                        return Err(Error::Dimension(format!(
                            "layer {id} expects {in_width} inputs, trunk provides {expected}"
                        )));
                    }
                    seen_fc = true;
                    shape = vec![*out_width];
                }
            }
        }
        let feature: usize = shape.iter().product();
        if feature != self.feature_width {
            return Err(Error::Dimension(format!(
                "trunk ends at width {feature}, spec declares {}",
                self.feature_width
            )));
        }
        if self.bridge_in_width > 0 && self.first_fc_id().is_none() {
            return Err(Error::Dimension(
                "bridged net has no fully-connected layer to widen".into(),
            ));
        }
        Ok(feature)
    }
}

/// Head output widths, in serialization order.
pub const HEAD_IDS: [(&str, usize); 3] = [("cls", 2), ("reg", 4), ("pts", 10)];

/// Named parameter tensors for one net. Iteration order is the fixed
/// name order (BTreeMap), which serialization relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

fn glorot<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent")
}

impl<T: Scalar> Parameters<T> {
    pub fn empty() -> Self {
        Parameters { map: BTreeMap::new() }
    }

    /// Fresh parameters for `spec`: weights uniform in
    /// ±sqrt(6/(fan_in+fan_out)), biases zero, PReLU slopes 0.25. The draw
    /// order is trunk-then-heads, so a seed fully determines every value.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for layer in &spec.trunk {
            match layer {
                LayerSpec::Conv { id, in_ch, out_ch, k, .. } => {
                    let fan_in = in_ch * k * k;
                    let fan_out = out_ch * k * k;
                    map.insert(
                        format!("{id}.weight"),
                        glorot(&[*out_ch, *in_ch, *k, *k], fan_in, fan_out, &mut rng),
                    );
                    map.insert(format!("{id}.bias"), Tensor::zeros(&[*out_ch]));
                    map.insert(
                        format!("{id}.slope"),
                        Tensor::from_vec(&[*out_ch], vec![T::from_f64_lossy(0.25); *out_ch])?,
                    );
                }
                LayerSpec::Pool { .. } => {}
                LayerSpec::Fc { id, in_width, out_width } => {
                    map.insert(
                        format!("{id}.weight"),
                        glorot(&[*out_width, *in_width], *in_width, *out_width, &mut rng),
                    );
                    map.insert(format!("{id}.bias"), Tensor::zeros(&[*out_width]));
                    map.insert(
                        format!("{id}.slope"),
                        Tensor::from_vec(&[*out_width], vec![T::from_f64_lossy(0.25); *out_width])?,
                    );
                }
            }
        }
        for (id, width) in HEAD_IDS {
            map.insert(
                format!("{id}.weight"),
                glorot(&[width, spec.feature_width], spec.feature_width, width, &mut rng),
            );
            map.insert(format!("{id}.bias"), Tensor::zeros(&[width]));
        }
        Ok(Parameters { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter tensor {name:?}")))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        self.map.insert(name.to_string(), tensor);
    }

    /// Removes and returns a tensor so callers can mutate it without
    /// copying; pair with [`Parameters::insert`] to put it back.
    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.map
            .remove(name)
            .ok_or_else(|| Error::State(format!("missing parameter tensor {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn ensure_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::ensure_grad);
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn drop_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::drop_grad);
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, t) in &self.map {
            t.assert_finite(name)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy with one fully-connected weight widened from `native_in` to
    /// `native_in + extra` columns; the new columns are zero so the widened
    /// net computes exactly what the original did until the columns train
    /// away from zero.
    pub fn with_widened_fc(&self, fc_id: &str, native_in: usize, extra: usize) -> Result<Self> {
        let name = format!("{fc_id}.weight");
        let old = self.get(&name)?;
        if old.shape().len() != 2 || old.shape()[1] != native_in {
            return Err(Error::Dimension(format!(
                "{name} has shape {:?}, expected [*, {native_in}]",
                old.shape()
            )));
        }
        let out_w = old.shape()[0];
        let mut data = vec![T::zero(); out_w * (native_in + extra)];
        for o in 0..out_w {
            data[o * (native_in + extra)..o * (native_in + extra) + native_in]
                .copy_from_slice(&old.data()[o * native_in..(o + 1) * native_in]);
        }
        let mut clone = self.clone();
        clone.map.insert(name, Tensor::from_vec(&[out_w, native_in + extra], data)?);
        Ok(clone)
    }
}

/// Head outputs of one forward pass. `cls` holds the softmax probabilities
/// (index 1 is the face score); `cls_logits` the pre-softmax values.
#[derive(Debug, Clone)]
pub struct Heads<T: Scalar> {
    pub cls: Tensor<T>,
    pub cls_logits: Tensor<T>,
    pub reg: Tensor<T>,
    pub pts: Tensor<T>,
}

impl<T: Scalar> Heads<T> {
    /// Face probability, the score every cascade threshold compares.
    pub fn face_score(&self) -> T {
        self.cls.data()[1]
    }
}

enum Step<T: Scalar> {
    Conv {
        id: &'static str,
        stride: usize,
        input: Tensor<T>,
        preact: Tensor<T>,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Fc {
        id: &'static str,
        /// Concatenated (native + bridge) input vector fed to the weights.
        input: Tensor<T>,
        preact: Tensor<T>,
        /// Shape of the native input before flattening.
        in_shape: Vec<usize>,
        /// Native width; entries beyond it came over the bridge.
        native_width: usize,
    },
}

/// Everything [`backward`] needs from a forward pass.
pub struct ForwardTrace<T: Scalar> {
    steps: Vec<Step<T>>,
    trunk_out_shape: Vec<usize>,
    /// Flattened trunk output the heads read.
    pub feature: Tensor<T>,
    pub heads: Heads<T>,
}

/// Per-head upstream gradients for [`backward`]. `cls` is with respect to
/// the softmax *probabilities*. `None` skips a head entirely, leaving its
/// parameters' gradients untouched.
#[derive(Debug, Clone)]
pub struct HeadGrads<T: Scalar> {
    pub cls: Option<Tensor<T>>,
    pub reg: Option<Tensor<T>>,
    pub pts: Option<Tensor<T>>,
}

impl<T: Scalar> Default for HeadGrads<T> {
    fn default() -> Self {
        HeadGrads { cls: None, reg: None, pts: None }
    }
}

/// Gradients flowing out of a net after [`backward`].
pub struct BackwardOut<T: Scalar> {
    /// Gradient with respect to the input patch.
    pub dinput: Tensor<T>,
    /// Gradient with respect to the bridged-in features, when bridged.
    pub dbridge: Option<Tensor<T>>,
}

fn head_forward<T: Scalar>(params: &Parameters<T>, feature: &Tensor<T>) -> Result<Heads<T>> {
    let cls_logits = linear(feature, params.get("cls.weight")?, params.get("cls.bias")?)?;
    let cls = softmax2(&cls_logits)?;
    let reg = linear(feature, params.get("reg.weight")?, params.get("reg.bias")?)?;
    let pts = linear(feature, params.get("pts.weight")?, params.get("pts.bias")?)?;
    Ok(Heads { cls, cls_logits, reg, pts })
}

/// Runs one patch through the trunk and heads, recording what backward
/// needs. `bridge` must supply exactly `spec.bridge_in_width` features for
/// a bridged net and nothing otherwise.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    input: &Tensor<T>,
    bridge: Option<&Tensor<T>>,
) -> Result<ForwardTrace<T>> {
    let s = spec.input_size;
    if input.shape() != [3, s, s] {
        return Err(Error::Dimension(format!(
            "{} expects input [3, {s}, {s}], got {:?}",
            spec.id.as_str(),
            input.shape()
        )));
    }
    match bridge {
        Some(b) if b.numel() != spec.bridge_in_width => {
            return Err(Error::Dimension(format!(
                "bridge supplies {} features, {} expects {}",
                b.numel(),
                spec.id.as_str(),
                spec.bridge_in_width
            )));
        }
        None if spec.bridge_in_width > 0 => {
            return Err(Error::Dimension(format!(
                "{} is bridged and needs {} bridge features",
                spec.id.as_str(),
                spec.bridge_in_width
            )));
        }
        _ => {}
    }

    let mut x = input.clone();
    let mut steps = Vec::with_capacity(spec.trunk.len());
    let mut fc_seen = false;
    for layer in &spec.trunk {
        match layer {
            LayerSpec::Conv { id, stride, .. } => {
                let w = params.get(&format!("{id}.weight"))?;
                let b = params.get(&format!("{id}.bias"))?;
                let a = params.get(&format!("{id}.slope"))?;
                let preact = conv2d(&x, w, b, *stride)?;
                let out = prelu(&preact, a)?;
                steps.push(Step::Conv { id, stride: *stride, input: x, preact });
                x = out;
            }
            LayerSpec::Pool { window, stride } => {
                let (out, argmax) = max_pool(&x, *window, *stride)?;
                steps.push(Step::Pool { in_shape: x.shape().to_vec(), argmax });
                x = out;
            }
            LayerSpec::Fc { id, in_width, .. } => {
                let in_shape = x.shape().to_vec();
                let native_width = x.numel();
                let flat = if !fc_seen && spec.bridge_in_width > 0 {
                    let b = bridge.expect("checked above");
                    let mut v = Vec::with_capacity(native_width + b.numel());
                    v.extend_from_slice(x.data());
                    v.extend_from_slice(b.data());
                    Tensor::from_vec(&[*in_width], v)?
                } else {
                    x.clone().reshaped(&[native_width])?
                };
                fc_seen = true;
                let w = params.get(&format!("{id}.weight"))?;
                let bi = params.get(&format!("{id}.bias"))?;
                let a = params.get(&format!("{id}.slope"))?;
                let preact = linear(&flat, w, bi)?;
                let out = prelu(&preact, a)?;
                steps.push(Step::Fc { id, input: flat, preact, in_shape, native_width });
                x = out;
            }
        }
    }
    let trunk_out_shape = x.shape().to_vec();
    let feature = x.reshaped(&[spec.feature_width])?;
    let heads = head_forward(params, &feature)?;
    feature.assert_finite("trunk feature")?;
    heads.cls.assert_finite("cls head")?;
    heads.reg.assert_finite("reg head")?;
    heads.pts.assert_finite("pts head")?;
    Ok(ForwardTrace { steps, trunk_out_shape, feature, heads })
}

/// Reverse pass for one traced forward. Accumulates parameter gradients
/// in-place; `dfeature_extra` adds a gradient arriving directly at the
/// trunk feature (how a higher net's bridge pushes gradient into this one).
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut Parameters<T>,
    trace: &ForwardTrace<T>,
    head_grads: &HeadGrads<T>,
    dfeature_extra: Option<&Tensor<T>>,
) -> Result<BackwardOut<T>> {
    let mut dfeature = Tensor::zeros(&[spec.feature_width]);

    let add_head = |params: &mut Parameters<T>,
                    id: &str,
                    dout: &Tensor<T>,
                    dfeature: &mut Tensor<T>|
     -> Result<()> {
        let mut w = params.take(&format!("{id}.weight"))?;
        let mut b = params.take(&format!("{id}.bias"))?;
        let dx = linear_backward(&trace.feature, &mut w, &mut b, dout)?;
        params.insert(&format!("{id}.weight"), w);
        params.insert(&format!("{id}.bias"), b);
        for (d, s) in dfeature.data_mut().iter_mut().zip(dx.data()) {
            *d = *d + *s;
        }
        Ok(())
    };

    if let Some(dcls) = &head_grads.cls {
        let dlogits = softmax2_backward(&trace.heads.cls, dcls)?;
        add_head(params, "cls", &dlogits, &mut dfeature)?;
    }
    if let Some(dreg) = &head_grads.reg {
        add_head(params, "reg", dreg, &mut dfeature)?;
    }
    if let Some(dpts) = &head_grads.pts {
        add_head(params, "pts", dpts, &mut dfeature)?;
    }
    if let Some(extra) = dfeature_extra {
        if extra.numel() != spec.feature_width {
            return Err(Error::Dimension(format!(
                "feature gradient has {} entries, expected {}",
                extra.numel(),
                spec.feature_width
            )));
        }
        for (d, s) in dfeature.data_mut().iter_mut().zip(extra.data()) {
            *d = *d + *s;
        }
    }

    let mut dcur = dfeature.reshaped(&trace.trunk_out_shape)?;
    let mut dbridge = None;
    for step in trace.steps.iter().rev() {
        match step {
            Step::Conv { id, stride, input, preact } => {
                let mut slope = params.take(&format!("{id}.slope"))?;
                let dpre = prelu_backward(preact, &mut slope, &dcur)?;
                params.insert(&format!("{id}.slope"), slope);
                let mut w = params.take(&format!("{id}.weight"))?;
                let mut b = params.take(&format!("{id}.bias"))?;
                dcur = conv2d_backward(input, &mut w, &mut b, *stride, &dpre)?;
                params.insert(&format!("{id}.weight"), w);
                params.insert(&format!("{id}.bias"), b);
            }
            Step::Pool { in_shape, argmax } => {
                dcur = max_pool_backward(in_shape, argmax, &dcur)?;
            }
            Step::Fc { id, input, preact, in_shape, native_width } => {
                let mut slope = params.take(&format!("{id}.slope"))?;
                let dpre = prelu_backward(preact, &mut slope, &dcur)?;
                params.insert(&format!("{id}.slope"), slope);
                let mut w = params.take(&format!("{id}.weight"))?;
                let mut b = params.take(&format!("{id}.bias"))?;
                let dflat = linear_backward(input, &mut w, &mut b, &dpre)?;
                params.insert(&format!("{id}.weight"), w);
                params.insert(&format!("{id}.bias"), b);
                if input.numel() > *native_width {
                    dbridge = Some(Tensor::from_vec(
                        &[input.numel() - native_width],
                        dflat.data()[*native_width..].to_vec(),
                    )?);
                }
                dcur = Tensor::from_vec(in_shape, dflat.data()[..*native_width].to_vec())?;
            }
        }
    }
    Ok(BackwardOut { dinput: dcur, dbridge })
}

/// Dense full-image maps from a fully-convolutional net (Net12): the heads
/// are applied as 1x1 convolutions, so output cell `(i, j)` scores the
/// `input_size` square window whose top-left corner is
/// `(j * dense_stride, i * dense_stride)` in image pixels.
pub struct DenseMaps<T: Scalar> {
    /// Softmax probabilities, `[2, Ho, Wo]`; channel 1 is the face score.
    pub cls: Tensor<T>,
    /// Box offsets, `[4, Ho, Wo]`.
    pub reg: Tensor<T>,
}

/// Scans an image of at least the nominal patch size in one pass.
/// Errors on nets with fully-connected layers; only Net12 qualifies.
pub fn forward_dense<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    image: &Tensor<T>,
) -> Result<DenseMaps<T>> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::Dimension(format!(
            "dense scan expects [3, H, W] input, got {:?}",
            image.shape()
        )));
    }
    if image.shape()[1] < spec.input_size || image.shape()[2] < spec.input_size {
        return Err(Error::Dimension(format!(
            "dense scan input {:?} is smaller than the {} patch",
            image.shape(),
            spec.input_size
        )));
    }
    let mut x = image.clone();
    for layer in &spec.trunk {
        match layer {
            LayerSpec::Conv { id, stride, .. } => {
                let w = params.get(&format!("{id}.weight"))?;
                let b = params.get(&format!("{id}.bias"))?;
                let a = params.get(&format!("{id}.slope"))?;
                x = prelu(&conv2d(&x, w, b, *stride)?, a)?;
            }
            LayerSpec::Pool { window, stride } => {
                x = max_pool(&x, *window, *stride)?.0;
            }
            LayerSpec::Fc { id, .. } => {
                return Err(Error::Dimension(format!(
                    "net with fully-connected layer {id} cannot scan densely"
                )));
            }
        }
    }
    let (c, ho, wo) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != spec.feature_width {
        return Err(Error::Dimension(format!(
            "dense feature map has {c} channels, spec declares {}",
            spec.feature_width
        )));
    }
    let as_1x1 = |name: &str, width: usize| -> Result<Tensor<T>> {
        params.get(name)?.clone().reshaped(&[width, c, 1, 1])
    };
    let cls_logits = conv2d(&x, &as_1x1("cls.weight", 2)?, params.get("cls.bias")?, 1)?;
    let reg = conv2d(&x, &as_1x1("reg.weight", 4)?, params.get("reg.bias")?, 1)?;
    let cells = ho * wo;
    let mut cls = vec![T::zero(); 2 * cells];
    for cell in 0..cells {
        let pair = Tensor::from_vec(
            &[2],
            vec![cls_logits.data()[cell], cls_logits.data()[cells + cell]],
        )?;
        let p = softmax2(&pair)?;
        cls[cell] = p.data()[0];
        cls[cells + cell] = p.data()[1];
    }
    Ok(DenseMaps {
        cls: Tensor::from_vec(&[2, ho, wo], cls)?,
        reg,
    })
}

/// Plain SGD: `p -= lr * g` for every tensor, then clears the gradients.
/// Errors if any tensor is missing its gradient buffer.
pub fn sgd_step<T: Scalar>(params: &mut Parameters<T>, learning_rate: T) -> Result<()> {
    for (name, t) in params.iter_mut() {
        if !t.has_grad() {
            return Err(Error::State(format!(
                "parameter {name:?} has no gradient buffer; run backward first"
            )));
        }
    }
    for (_, t) in params.iter_mut() {
        let n = t.numel();
        for i in 0..n {
            let g = t.grad().expect("checked")[i];
            t.data_mut()[i] = t.data_mut()[i] - learning_rate * g;
        }
        t.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient_at;

    fn input_for<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec.input_size;
        let data = (0..3 * s * s)
            .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor::from_vec(&[3, s, s], data).unwrap()
    }

    #[test]
    fn all_specs_validate_with_declared_feature_widths() {
        assert_eq!(NetworkSpec::net12().validate().unwrap(), 32);
        assert_eq!(NetworkSpec::net24(false).validate().unwrap(), 128);
        assert_eq!(NetworkSpec::net24(true).validate().unwrap(), 128);
        assert_eq!(NetworkSpec::net48(false).validate().unwrap(), 256);
        assert_eq!(NetworkSpec::net48(true).validate().unwrap(), 256);
        assert_eq!(NetworkSpec::net12().dense_stride(), 2);
    }

    #[test]
    fn head_shapes_are_2_4_10_on_nominal_inputs() {
        for spec in [
            NetworkSpec::net12(),
            NetworkSpec::net24(false),
            NetworkSpec::net48(false),
        ] {
            let params = Parameters::<f32>::init(&spec, 7).unwrap();
            let trace = forward(&spec, &params, &input_for(&spec, 1), None).unwrap();
            assert_eq!(trace.heads.cls.shape(), &[2]);
            assert_eq!(trace.heads.reg.shape(), &[4]);
            assert_eq!(trace.heads.pts.shape(), &[10]);
        }
    }

    #[test]
    fn zero_parameters_give_neutral_heads() {
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 7).unwrap();
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            t.data_mut()[..n].iter_mut().for_each(|v| *v = 0.0);
        }
        let trace = forward(&spec, &params, &input_for(&spec, 2), None).unwrap();
        assert_eq!(trace.heads.cls.data(), &[0.5, 0.5]);
        assert!(trace.heads.reg.data().iter().all(|&v| v == 0.0));
        assert!(trace.heads.pts.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = NetworkSpec::net24(false);
        let params = Parameters::<f32>::init(&spec, 3).unwrap();
        let input = input_for(&spec, 4);
        let a = forward(&spec, &params, &input, None).unwrap();
        let b = forward(&spec, &params, &input, None).unwrap();
        assert_eq!(a.heads.cls.data(), b.heads.cls.data());
        assert_eq!(a.heads.reg.data(), b.heads.reg.data());
        assert_eq!(a.heads.pts.data(), b.heads.pts.data());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NetworkSpec::net48(false);
        let a = Parameters::<f32>::init(&spec, 42).unwrap();
        let b = Parameters::<f32>::init(&spec, 42).unwrap();
        let c = Parameters::<f32>::init(&spec, 43).unwrap();
        assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x == y));
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn zero_head_gradients_leave_all_parameter_gradients_zero() {
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 5).unwrap();
        params.ensure_grads();
        let trace = forward(&spec, &params, &input_for(&spec, 6), None).unwrap();
        backward(&spec, &mut params, &trace, &HeadGrads::default(), None).unwrap();
        for (name, t) in params.iter() {
            assert!(
                t.grad().unwrap().iter().all(|&g| g == 0.0),
                "{name} picked up gradient from nothing"
            );
        }
    }

    #[test]
    fn single_linear_layer_grad_equals_input() {
        // loss = sum(heads.reg) through a net reduced to its reg head only:
        // d(reg.weight)[o][i] = feature[i].
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 8).unwrap();
        params.ensure_grads();
        let trace = forward(&spec, &params, &input_for(&spec, 9), None).unwrap();
        let grads = HeadGrads {
            reg: Some(Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()),
            ..Default::default()
        };
        backward(&spec, &mut params, &trace, &grads, None).unwrap();
        let wg = params.get("reg.weight").unwrap().grad().unwrap();
        for i in 0..spec.feature_width {
            assert!((wg[i] - trace.feature.data()[i]).abs() < 1e-12);
        }
        assert!(wg[spec.feature_width..].iter().all(|&g| g == 0.0));
    }

    fn composite_loss(heads: &Heads<f64>) -> f64 {
        // Weighted readout touching every head so no gradient path is dead.
        heads.cls.data()[1] * 2.0
            + heads.reg.data().iter().enumerate().map(|(i, v)| (i as f64 - 1.5) * v).sum::<f64>()
            + heads.pts.data().iter().enumerate().map(|(i, v)| (0.3 + i as f64 * 0.1) * v).sum::<f64>()
    }

    fn composite_grads() -> HeadGrads<f64> {
        HeadGrads {
            cls: Some(Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap()),
            reg: Some(Tensor::from_vec(&[4], (0..4).map(|i| i as f64 - 1.5).collect()).unwrap()),
            pts: Some(
                Tensor::from_vec(&[10], (0..10).map(|i| 0.3 + i as f64 * 0.1).collect()).unwrap(),
            ),
        }
    }

    #[test]
    fn net12_gradients_match_finite_differences_sampled() {
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 10).unwrap();
        params.ensure_grads();
        let input = input_for(&spec, 11);
        let trace = forward(&spec, &params, &input, None).unwrap();
        backward(&spec, &mut params, &trace, &composite_grads(), None).unwrap();

        let frozen = params.clone();
        let names: Vec<String> = frozen.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = frozen.get(&name).unwrap();
            let indices: Vec<usize> = (0..t.numel()).step_by(23.max(t.numel() / 8)).collect();
            let analytic = t.grad().unwrap();
            let err = check_param_gradient_at(t, analytic, &indices, |probe| {
                let mut p = frozen.clone();
                p.insert(&name, probe.clone());
                let tr = forward(&spec, &p, &input, None).unwrap();
                composite_loss(&tr.heads)
            });
            assert!(err < 1e-4, "{name} gradient relative error {err}");
        }
    }

    #[test]
    fn bridged_net_with_zero_columns_reproduces_unbridged_outputs() {
        let plain = NetworkSpec::net24(false);
        let bridged = NetworkSpec::net24(true);
        let params = Parameters::<f64>::init(&plain, 12).unwrap();
        let wide = params.with_widened_fc("fc1", 256, BRIDGE_WIDTH_12).unwrap();
        let input = input_for(&plain, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bridge_feats = Tensor::from_vec(
            &[BRIDGE_WIDTH_12],
            (0..BRIDGE_WIDTH_12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let a = forward(&plain, &params, &input, None).unwrap();
        let b = forward(&bridged, &wide, &input, Some(&bridge_feats)).unwrap();
        assert_eq!(a.heads.cls.data(), b.heads.cls.data());
        assert_eq!(a.heads.reg.data(), b.heads.reg.data());
        assert_eq!(a.heads.pts.data(), b.heads.pts.data());
    }

    #[test]
    fn bridge_gradient_matches_finite_differences() {
        let bridged = NetworkSpec::net24(true);
        let mut params = Parameters::<f64>::init(&bridged, 15).unwrap();
        params.ensure_grads();
        let input = input_for(&bridged, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bridge_feats = Tensor::from_vec(
            &[BRIDGE_WIDTH_12],
            (0..BRIDGE_WIDTH_12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let trace = forward(&bridged, &params, &input, Some(&bridge_feats)).unwrap();
        let out = backward(&bridged, &mut params, &trace, &composite_grads(), None).unwrap();
        let dbridge = out.dbridge.expect("bridged net yields bridge gradient");
        let err = check_param_gradient_at(
            &bridge_feats,
            dbridge.data(),
            &(0..BRIDGE_WIDTH_12).collect::<Vec<_>>(),
            |probe| {
                let tr = forward(&bridged, &params, &input, Some(probe)).unwrap();
                composite_loss(&tr.heads)
            },
        );
        assert!(err < 1e-4, "bridge gradient relative error {err}");
    }

    #[test]
    fn dense_scan_rejects_fc_nets_and_small_inputs() {
        let p24 = Parameters::<f32>::init(&NetworkSpec::net24(false), 1).unwrap();
        let img = Tensor::<f32>::zeros(&[3, 30, 30]);
        assert!(forward_dense(&NetworkSpec::net24(false), &p24, &img).is_err());
        let p12 = Parameters::<f32>::init(&NetworkSpec::net12(), 1).unwrap();
        let small = Tensor::<f32>::zeros(&[3, 11, 11]);
        assert!(forward_dense(&NetworkSpec::net12(), &p12, &small).is_err());
    }

    #[test]
    fn dense_scan_on_nominal_patch_matches_patch_forward() {
        let spec = NetworkSpec::net12();
        let params = Parameters::<f64>::init(&spec, 18).unwrap();
        let input = input_for(&spec, 19);
        let patch = forward(&spec, &params, &input, None).unwrap();
        let dense = forward_dense(&spec, &params, &input).unwrap();
        assert_eq!(dense.cls.shape(), &[2, 1, 1]);
        assert!((dense.cls.data()[1] - patch.heads.cls.data()[1]).abs() < 1e-12);
        for k in 0..4 {
            assert!((dense.reg.data()[k] - patch.heads.reg.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_lr_keeps_parameters_and_double_lr_equals_two_steps() {
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 20).unwrap();
        params.ensure_grads();
        let before = params.clone();
        sgd_step(&mut params, 0.0).unwrap();
        assert!(params.iter().zip(before.iter()).all(|((_, a), (_, b))| a.data() == b.data()));

        // p = 1.0, g = 0.5, lr = 0.01 -> 0.995.
        let mut single = Parameters::<f64>::empty();
        single.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        single.get_mut("w").unwrap().grad_mut()[0] = 0.5;
        sgd_step(&mut single, 0.01).unwrap();
        assert!((single.get("w").unwrap().data()[0] - 0.995).abs() < 1e-15);

        let mut two_steps = Parameters::<f64>::empty();
        two_steps.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut one_big = two_steps.clone();
        for _ in 0..2 {
            two_steps.get_mut("w").unwrap().grad_mut()[0] = 0.5;
            sgd_step(&mut two_steps, 0.01).unwrap();
        }
        one_big.get_mut("w").unwrap().grad_mut()[0] = 0.5;
        sgd_step(&mut one_big, 0.02).unwrap();
        assert!(
            (two_steps.get("w").unwrap().data()[0] - one_big.get("w").unwrap().data()[0]).abs()
                < 1e-15
        );
    }

    #[test]
    fn sgd_without_grad_buffers_is_a_state_error() {
        let spec = NetworkSpec::net12();
        let mut params = Parameters::<f64>::init(&spec, 21).unwrap();
        assert!(sgd_step(&mut params, 0.01).is_err());
    }

    #[test]
    fn total_cascade_parameters_fit_the_size_budget() {
        let n: usize = [
            Parameters::<f32>::init(&NetworkSpec::net12(), 1).unwrap().numel(),
            Parameters::<f32>::init(&NetworkSpec::net24(true), 1).unwrap().numel(),
            Parameters::<f32>::init(&NetworkSpec::net48(true), 1).unwrap().numel(),
        ]
        .iter()
        .sum();
        // f32 on disk; 4 MB ceiling with ample headroom.
        assert!(n * 4 < 4 * 1024 * 1024, "parameter bytes {}", n * 4);
    }
}

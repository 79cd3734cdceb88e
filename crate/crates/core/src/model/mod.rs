//! Encoders, cross-view fusion, projection heads and the classifier.
//!
//! Parameters live in a flat name → tensor map. Forward passes are recorded
//! on a [`Graph`] so the same code serves training (f32) and gradient
//! verification (f64).

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::rng;
use crate::views::{View, ViewSet};

pub use checkpoint::{load_checkpoint, save_checkpoint, read_checkpoint_bytes, write_checkpoint_bytes, TransferReport};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed order.
pub type ParamSet<T = f32> = IndexMap<String, Tensor<T>>;

/// A non-empty subset of the three views.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViewMask([bool; 3]);

impl ViewMask {
    pub const ALL: ViewMask = ViewMask([true; 3]);

    pub fn new(views: &[View]) -> Result<Self> {
        let mut m = [false; 3];
        for v in views {
            m[v.index()] = true;
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Config("view subset must not be empty".into()));
        }
        Ok(Self(m))
    }

    pub fn contains(self, v: View) -> bool {
        self.0[v.index()]
    }

    pub fn views(self) -> Vec<View> {
        View::ALL.into_iter().filter(|&v| self.contains(v)).collect()
    }

    /// The seven non-empty subsets, largest first.
    pub fn all_subsets() -> Vec<ViewMask> {
        let mut out: Vec<ViewMask> = (1u8..8)
            .map(|bits| ViewMask([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0]))
            .collect();
        out.sort_by_key(|m| (std::cmp::Reverse(m.views().len()), m.views()));
        out
    }
}

impl Default for ViewMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ViewMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.views().iter().map(|v| v.tag().to_string()).collect();
        write!(f, "{}", tags.join(","))
    }
}

impl fmt::Debug for ViewMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl FromStr for ViewMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut views = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let mut chars = part.chars();
            let view = match (chars.next(), chars.next()) {
                (Some(c), None) => View::from_tag(c),
                _ => View::ALL.into_iter().find(|v| v.name() == part),
            };
            views.push(view.ok_or_else(|| Error::Config(format!("unknown view '{part}' (expected t, d or f)")))?);
        }
        Self::new(&views)
    }
}

impl Serialize for ViewMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ViewMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub length: usize,
    pub hidden: usize,
    pub channels: usize,
    pub classes: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub views: ViewMask,
    pub fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            length: 256,
            hidden: 128,
            channels: 1,
            classes: 2,
            layers: 3,
            heads: 4,
            ffn_mult: 4,
            views: ViewMask::ALL,
            fusion: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("hidden", self.hidden),
            ("channels", self.channels),
            ("classes", self.classes),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.length < 3 {
            return Err(Error::Config("model.length must be at least 3".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden {} is not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Every parameter name and shape, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        type Layout = Vec<(String, Vec<usize>)>;
        fn linear(out: &mut Layout, name: &str, fan_in: usize, fan_out: usize) {
            out.push((format!("{name}.w"), vec![fan_in, fan_out]));
            out.push((format!("{name}.b"), vec![fan_out]));
        }
        fn norm(out: &mut Layout, name: &str, h: usize) {
            out.push((format!("{name}.g"), vec![h]));
            out.push((format!("{name}.b"), vec![h]));
        }
        fn attn(out: &mut Layout, name: &str, h: usize) {
            for p in ["q", "k", "v", "o"] {
                linear(out, &format!("{name}.{p}"), h, h);
            }
        }
        let (d, h, f) = (self.channels, self.hidden, self.hidden * self.ffn_mult);
        let mut out = Vec::new();
        for v in View::ALL {
            let k = v.tag();
            linear(&mut out, &format!("enc.{k}.in"), d, h);
            for l in 0..self.layers {
                let p = format!("enc.{k}.l{l}");
                norm(&mut out, &format!("{p}.ln1"), h);
                attn(&mut out, &format!("{p}.attn"), h);
                norm(&mut out, &format!("{p}.ln2"), h);
                linear(&mut out, &format!("{p}.ffn1"), h, f);
                linear(&mut out, &format!("{p}.ffn2"), f, h);
            }
            norm(&mut out, &format!("enc.{k}.norm"), h);
        }
        attn(&mut out, "fuse.attn", h);
        norm(&mut out, "fuse.ln", h);
        for v in View::ALL {
            let k = v.tag();
            linear(&mut out, &format!("head.{k}.fc1"), h, h);
            linear(&mut out, &format!("head.{k}.fc2"), h, h);
        }
        linear(&mut out, "cls", 3 * h, self.classes);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Whether a parameter belongs to the input projections.
pub fn is_input_projection(name: &str) -> bool {
    name.starts_with("enc.") && name.contains(".in.")
}

pub fn is_classifier(name: &str) -> bool {
    name.starts_with("cls.")
}

/// Encoders, fusion block and projection heads: everything the freeze
/// scenario holds fixed.
pub fn is_backbone(name: &str) -> bool {
    !is_classifier(name)
}

fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Fresh value for one parameter: layer-norm gains 1 and biases 0, every
/// linear map and its bias uniform in ±1/√fan_in. Each tensor has its own
/// stream, so re-initializing a subset does not disturb the rest.
pub fn init_tensor(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor<f32> {
    let is_norm = name.contains(".ln") || name.contains(".norm.");
    if is_norm {
        return if name.ends_with(".g") { Tensor::ones(shape.to_vec()) } else { Tensor::zeros(shape.to_vec()) };
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng::stream(seed, &[rng::tag::INIT, name_key(name)]);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-bound..bound) as f32)
}

/// All trainable state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let fan_ins = fan_ins(&config);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, fan_ins[&name], seed);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Wraps existing tensors, checking them against the layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        let params = layout.iter().map(|(n, _)| (n.clone(), params[n].clone())).collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor<f32> {
        &self.params[name]
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces the tensors selected by `pick` with fresh draws from `seed`.
    pub fn reinitialize(&mut self, seed: u64, pick: impl Fn(&str) -> bool) -> Vec<String> {
        let fan_ins = fan_ins(&self.config);
        let mut names = Vec::new();
        for (name, t) in self.params.iter_mut() {
            if pick(name) {
                *t = init_tensor(name, &t.shape().to_vec(), fan_ins[name], seed);
                names.push(name.clone());
            }
        }
        names
    }

    /// Sets the view subset and fusion switch without touching parameters.
    pub fn set_ablation(&mut self, views: ViewMask, fusion: bool) {
        self.config.views = views;
        self.config.fusion = fusion;
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &[&ViewSet]) -> Result<Inference> {
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, &self.params, |_| false);
        let inputs = batch_inputs(&mut g, &self.config, batch)?;
        let out = forward(&mut g, &self.config, &bound, inputs)?;
        Ok(Inference {
            z: out.z.map(|z| z.map(|v| g.value(v).clone())),
            logits: g.value(out.logits).clone(),
        })
    }
}

/// Inference results for a batch: per-view embeddings `[N, D]` (absent for
/// masked views) and logits `[N, C]`.
#[derive(Clone, Debug)]
pub struct Inference {
    pub z: [Option<Tensor<f32>>; 3],
    pub logits: Tensor<f32>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        let c = self.logits.shape()[1];
        self.logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

fn fan_ins(config: &ModelConfig) -> IndexMap<String, usize> {
    let mut out = IndexMap::new();
    let layout = config.layout();
    for (name, shape) in &layout {
        let fan = if shape.len() == 2 {
            shape[0]
        } else {
            // A bias takes the fan-in of its weight.
            let w = format!("{}.w", name.trim_end_matches(".b"));
            layout
                .iter()
                .find(|(n, _)| *n == w)
                .map_or(shape[0], |(_, s)| s[0])
        };
        out.insert(name.clone(), fan);
    }
    out
}

/// Graph handles for every parameter.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Registers `params` as graph leaves; those with `trainable(name)` track
/// gradients, the rest are constants.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Bound {
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
        .collect();
    Bound { vars }
}

/// Stacks one view of each sample into a `[N, L, d]` tensor.
pub fn stack_view<T: Scalar>(batch: &[&ViewSet], view: View) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| Error::invalid("forward", "empty batch"))?;
    let shape = first.get(view).shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * shape.iter().product::<usize>());
    for s in batch {
        let t = s.get(view);
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("forward", &shape, t.shape()));
        }
        data.extend(t.data().iter().map(|&v| T::of(v)));
    }
    Tensor::new([batch.len(), shape[0], shape[1]], data)
}

/// Adds each active view of `batch` to the graph as a constant.
pub fn batch_inputs<T: Scalar>(g: &mut Graph<T>, config: &ModelConfig, batch: &[&ViewSet]) -> Result<[Option<Var>; 3]> {
    let mut out = [None; 3];
    for v in config.views.views() {
        out[v.index()] = Some(g.constant(stack_view(batch, v)?));
    }
    Ok(out)
}

/// Sinusoidal position table `[L, D]`.
pub fn positional_encoding<T: Scalar>(length: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn([length, width], |i| {
        let (pos, c) = ((i / width) as f64, i % width);
        let angle = pos / 10000f64.powf((c - c % 2) as f64 / width as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w")))?;
    g.add(y, p.get(&format!("{name}.b")))
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")), LAYER_NORM_EPS)
}

fn mha<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, heads: usize) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), x)?;
    let k = linear(g, p, &format!("{name}.k"), x)?;
    let v = linear(g, p, &format!("{name}.v"), x)?;
    let a = g.attention(q, k, v, heads)?;
    linear(g, p, &format!("{name}.o"), a)
}

/// Encoder `E_k`: input projection, positional encoding, pre-norm
/// transformer layers and a closing layer norm. `x` is `[N, L, d]`.
///
/// Spectra enter scaled by `1/√L`, which makes the transform unitary and
/// keeps their magnitude comparable to the z-scored series.
pub fn encode<T: Scalar>(g: &mut Graph<T>, config: &ModelConfig, p: &Bound, view: View, x: Var) -> Result<Var> {
    let expect = [config.length, config.channels];
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1..] != expect {
        return Err(Error::shape("encode", shape, &expect));
    }
    let k = view.tag();
    let x = match view {
        View::Frequency => g.scale(x, 1.0 / (config.length as f64).sqrt())?,
        _ => x,
    };
    let mut h = linear(g, p, &format!("enc.{k}.in"), x)?;
    let pe = g.constant(positional_encoding(config.length, config.hidden));
    h = g.add(h, pe)?;
    for l in 0..config.layers {
        let pre = format!("enc.{k}.l{l}");
        let a = norm(g, p, &format!("{pre}.ln1"), h)?;
        let a = mha(g, p, &format!("{pre}.attn"), a, config.heads)?;
        h = g.add(h, a)?;
        let f = norm(g, p, &format!("{pre}.ln2"), h)?;
        let f = linear(g, p, &format!("{pre}.ffn1"), f)?;
        let f = g.relu(f)?;
        let f = linear(g, p, &format!("{pre}.ffn2"), f)?;
        h = g.add(h, f)?;
    }
    norm(g, p, &format!("enc.{k}.norm"), h)
}

/// Cross-view fusion `LayerNorm(H + MHA(H))`, attending over the view axis
/// independently at every time step. Inputs are `[N, L, D]`, in any number
/// and order; outputs follow the input order.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, config: &ModelConfig, p: &Bound, hs: &[Var]) -> Result<Vec<Var>> {
    let first = *hs.first().ok_or_else(|| Error::invalid("fuse", "no views"))?;
    let shape = g.shape(first).to_vec();
    for &h in hs {
        if g.shape(h) != shape.as_slice() {
            return Err(Error::shape("fuse", &shape, g.shape(h)));
        }
    }
    let axis = shape.len() - 1;
    let stacked = g.stack(hs, axis)?;
    let a = mha(g, p, "fuse.attn", stacked, config.heads)?;
    let r = g.add(stacked, a)?;
    let out = norm(g, p, "fuse.ln", r)?;
    (0..hs.len()).map(|i| g.select(out, axis, i)).collect()
}

/// Projection head `F_k`: per-step ReLU feed-forward, then the mean over time.
pub fn project<T: Scalar>(g: &mut Graph<T>, p: &Bound, view: View, h: Var) -> Result<Var> {
    let k = view.tag();
    let x = linear(g, p, &format!("head.{k}.fc1"), h)?;
    let x = g.relu(x)?;
    let x = linear(g, p, &format!("head.{k}.fc2"), x)?;
    let time_axis = g.shape(x).len() - 2;
    g.mean(x, time_axis)
}

/// Classifier `G` on `[z_t, z_d, z_f]`; absent views contribute zeros.
pub fn classify<T: Scalar>(g: &mut Graph<T>, config: &ModelConfig, p: &Bound, z: [Option<Var>; 3]) -> Result<Var> {
    let present = z.iter().flatten().next().ok_or_else(|| Error::invalid("classify", "no embeddings"))?;
    let rows = g.shape(*present)[0];
    let mut parts = Vec::with_capacity(3);
    for slot in z {
        parts.push(match slot {
            Some(v) => v,
            None => g.constant(Tensor::zeros([rows, config.hidden])),
        });
    }
    let joined = g.concat(&parts, 1)?;
    linear(g, p, "cls", joined)
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub h: [Option<Var>; 3],
    pub z: [Option<Var>; 3],
    pub logits: Var,
}

/// Encode → fuse (when enabled) → project for the active views, returning
/// `(h, z)`. `inputs[k]` holds `[N, L, d]` for every view in the subset.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    p: &Bound,
    inputs: [Option<Var>; 3],
) -> Result<([Option<Var>; 3], [Option<Var>; 3])> {
    let active = config.views.views();
    let mut h = [None; 3];
    let mut encoded = Vec::with_capacity(active.len());
    for &v in &active {
        let x = inputs[v.index()]
            .ok_or_else(|| Error::invalid("forward", format!("missing {} input", v.name())))?;
        let hv = encode(g, config, p, v, x)?;
        h[v.index()] = Some(hv);
        encoded.push(hv);
    }
    let mixed = if config.fusion { fuse(g, config, p, &encoded)? } else { encoded };
    let mut z = [None; 3];
    for (&v, &hv) in active.iter().zip(&mixed) {
        z[v.index()] = Some(project(g, p, v, hv)?);
    }
    Ok((h, z))
}

/// [`embed`] followed by the classifier.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    p: &Bound,
    inputs: [Option<Var>; 3],
) -> Result<ForwardVars> {
    let (h, z) = embed(g, config, p, inputs)?;
    let logits = classify(g, config, p, z)?;
    Ok(ForwardVars { h, z, logits })
}

/// Casts every tensor of a parameter set.
pub fn cast_params<T: Scalar, U: Scalar>(params: &ParamSet<T>) -> ParamSet<U> {
    params.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
}

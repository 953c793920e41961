//! Plan-vector encoder, conditioned policy, and training losses.
//!
//! The encoder `g` maps a pair of frames (first, last) of a trajectory to a
//! plan vector. In [`ConditioningMode::Cpv`] the policy sees the current frame
//! together with `g(ref_first, ref_last) - g(first, current)`, i.e. what is
//! left to do.

mod check;
mod checkpoint;
mod loss;

pub use check::{check_layers, check_total_loss, jitter_biases, GRAD_EPS, GRAD_TOLERANCE};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    hom_loss, il_loss, pair_loss, total_loss, triplet_grad, triplet_margin, Batch, LossBreakdown, LossOptions, LossOutput,
    LossWeights, TrainItem, TRIPLET_MARGIN,
};

use std::fmt;
use std::str::FromStr;

use crate::craftworld::{Action, Observation, OBS_CHANNELS, OBS_HEIGHT, OBS_LEN, OBS_WIDTH};
use crate::error::{CpvError, Result};
use crate::nn::{conv_out_size, relu_backward_inplace, relu_inplace, Conv2d, ConvCache, Linear, Tensor};
use crate::{seed, Scalar};

pub const CONV_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const HIDDEN_UNITS: usize = 64;
pub const HIDDEN_LAYERS: usize = 4;
pub const DEFAULT_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    /// Policy sees `g(ref) - g(progress)`.
    Cpv,
    /// Policy sees `g(ref)` only.
    Te,
    /// No encoder; the policy convolves all four frames stacked.
    Naive,
}

impl ConditioningMode {
    pub fn id(self) -> u8 {
        match self {
            ConditioningMode::Cpv => 0,
            ConditioningMode::Te => 1,
            ConditioningMode::Naive => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        [ConditioningMode::Cpv, ConditioningMode::Te, ConditioningMode::Naive].get(id as usize).copied()
    }

    pub fn has_encoder(self) -> bool {
        self != ConditioningMode::Naive
    }

    fn policy_channels(self) -> usize {
        match self {
            ConditioningMode::Naive => 4 * OBS_CHANNELS,
            _ => OBS_CHANNELS,
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::Cpv => "cpv",
            ConditioningMode::Te => "te",
            ConditioningMode::Naive => "naive",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = CpvError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpv" => Ok(ConditioningMode::Cpv),
            "te" => Ok(ConditioningMode::Te),
            "naive" => Ok(ConditioningMode::Naive),
            other => Err(CpvError::Config(format!("unknown mode {other:?} (cpv|te|naive)"))),
        }
    }
}

/// An image fed to a conv stack: either a rendered frame or float pixels
/// (used when reference frames are averaged).
#[derive(Clone, Copy, Debug)]
pub enum Img<'a, T> {
    Obs(&'a Observation),
    Pixels(&'a [T]),
}

impl<T: Scalar> Img<'_, T> {
    fn write(&self, dst: &mut [T]) {
        match self {
            Img::Obs(o) => {
                let scale = T::one() / T::from_f64_lossy(255.0);
                for (d, &v) in dst.iter_mut().zip(o.planes()) {
                    *d = T::from_u8(v).unwrap() * scale;
                }
            }
            Img::Pixels(p) => dst.copy_from_slice(p),
        }
    }
}

/// Float pixels in `[0, 1]`, channel-planar.
pub fn obs_pixels<T: Scalar>(obs: &Observation) -> Vec<T> {
    let mut v = vec![T::zero(); OBS_LEN];
    Img::Obs(obs).write(&mut v);
    v
}

/// Stacks rows of channel-concatenated images into `[N, 3k, 33, 30]`.
pub fn stack_images<T: Scalar>(rows: &[Vec<Img<'_, T>>]) -> Tensor<T> {
    let k = rows.first().map_or(1, Vec::len);
    let mut t = Tensor::zeros(&[rows.len(), k * OBS_CHANNELS, OBS_HEIGHT, OBS_WIDTH]);
    for (row, dst) in rows.iter().zip(t.data_mut().chunks_mut(k * OBS_LEN)) {
        assert_eq!(row.len(), k, "ragged image rows");
        for (img, d) in row.iter().zip(dst.chunks_mut(OBS_LEN)) {
            img.write(d);
        }
    }
    t
}

/// Four conv layers with ReLU, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv2d<T>>,
}

pub struct ConvStackCache<T> {
    convs: Vec<ConvCache<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn init<R: rand::Rng>(in_ch: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c = in_ch;
        for &o in &CONV_CHANNELS {
            layers.push(Conv2d::init(c, o, rng));
            c = o;
        }
        ConvStack { layers }
    }

    pub fn feature_size() -> usize {
        let (mut h, mut w) = (OBS_HEIGHT, OBS_WIDTH);
        for _ in 0..CONV_CHANNELS.len() {
            h = conv_out_size(h);
            w = conv_out_size(w);
        }
        CONV_CHANNELS[CONV_CHANNELS.len() - 1] * h * w
    }

    pub fn forward(&self, x: &Tensor<T>, mut kinks: Option<&mut Vec<T>>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().unwrap_or(x);
            let (mut y, cache) = layer.forward(input)?;
            if let Some(k) = kinks.as_deref_mut() {
                k.extend_from_slice(y.data());
            }
            relu_inplace(y.data_mut());
            convs.push(cache);
            outputs.push(y);
        }
        let last = outputs.last().expect("non-empty stack");
        let n = last.shape()[0];
        let flat = last.clone().reshape(&[n, last.len() / n])?;
        Ok((flat, ConvStackCache { convs, outputs }))
    }

    /// Backward from flattened features; input images need no gradient.
    pub fn backward(&self, cache: &ConvStackCache<T>, g_flat: Tensor<T>, grad: &mut ConvStack<T>) {
        let mut g = g_flat.reshape(cache.outputs.last().unwrap().shape()).expect("feature shape");
        for i in (0..self.layers.len()).rev() {
            relu_backward_inplace(cache.outputs[i].data(), g.data_mut());
            match self.layers[i].backward(&cache.convs[i], &g, &mut grad.layers[i], i > 0) {
                Some(gx) => g = gx,
                None => break,
            }
        }
    }
}

/// `g`: two frames stacked channel-wise -> plan vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv: ConvStack<T>,
    pub proj: Linear<T>,
}

pub struct EncoderCache<T> {
    conv: ConvStackCache<T>,
    features: Tensor<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init<R: rand::Rng>(dim: usize, rng: &mut R) -> Self {
        Encoder { conv: ConvStack::init(2 * OBS_CHANNELS, rng), proj: Linear::init(ConvStack::<T>::feature_size(), dim, rng) }
    }

    pub fn dim(&self) -> usize {
        self.proj.outputs()
    }

    /// `x`: `[N, 6, 33, 30]` -> `[N, D]`.
    pub fn forward(&self, x: &Tensor<T>, mut kinks: Option<&mut Vec<T>>) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let (features, conv) = self.conv.forward(x, kinks.as_deref_mut())?;
        let emb = self.proj.forward(&features)?;
        Ok((emb, EncoderCache { conv, features }))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, g_emb: &Tensor<T>, grad: &mut Encoder<T>) {
        let gf = self.proj.backward(&cache.features, g_emb, &mut grad.proj, true).expect("input grad");
        self.conv.backward(&cache.conv, gf, &mut grad.conv);
    }

    /// Plan vectors for a list of `(first, last)` frame pairs.
    pub fn embed_pairs(&self, pairs: &[(Img<'_, T>, Img<'_, T>)]) -> Result<Tensor<T>> {
        let rows: Vec<Vec<Img<'_, T>>> = pairs.iter().map(|&(a, b)| vec![a, b]).collect();
        Ok(self.forward(&stack_images(&rows), None)?.0)
    }
}

/// Conv features of the observation, concatenated with the conditioning
/// vector, through a ReLU MLP to action logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    pub conv: ConvStack<T>,
    pub hidden: Vec<Linear<T>>,
    pub out: Linear<T>,
}

pub struct PolicyCache<T> {
    conv: ConvStackCache<T>,
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Policy<T> {
    pub fn init<R: rand::Rng>(in_ch: usize, context_dim: usize, rng: &mut R) -> Self {
        let conv = ConvStack::init(in_ch, rng);
        let mut hidden = Vec::new();
        let mut width = ConvStack::<T>::feature_size() + context_dim;
        for _ in 0..HIDDEN_LAYERS {
            hidden.push(Linear::init(width, HIDDEN_UNITS, rng));
            width = HIDDEN_UNITS;
        }
        Policy { conv, hidden, out: Linear::init(width, Action::COUNT, rng) }
    }

    pub fn context_dim(&self) -> usize {
        self.hidden[0].inputs() - ConvStack::<T>::feature_size()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        context: Option<&Tensor<T>>,
        mut kinks: Option<&mut Vec<T>>,
    ) -> Result<(Tensor<T>, PolicyCache<T>)> {
        let (features, conv) = self.conv.forward(x, kinks.as_deref_mut())?;
        let n = features.shape()[0];
        let f = features.shape()[1];
        let cd = self.context_dim();
        let joined = match context {
            Some(ctx) => {
                if ctx.shape() != [n, cd] {
                    return Err(CpvError::Shape(format!("context {:?}, expected [{n}, {cd}]", ctx.shape())));
                }
                let mut j = Tensor::zeros(&[n, f + cd]);
                for ((dst, a), b) in j.data_mut().chunks_mut(f + cd).zip(features.data().chunks(f)).zip(ctx.data().chunks(cd)) {
                    dst[..f].copy_from_slice(a);
                    dst[f..].copy_from_slice(b);
                }
                j
            }
            None if cd == 0 => features,
            None => return Err(CpvError::Invalid("policy needs a context vector".into())),
        };
        let mut inputs = vec![joined];
        let mut outputs = Vec::new();
        for layer in &self.hidden {
            let mut y = layer.forward(inputs.last().unwrap())?;
            if let Some(k) = kinks.as_deref_mut() {
                k.extend_from_slice(y.data());
            }
            relu_inplace(y.data_mut());
            inputs.push(y.clone());
            outputs.push(y);
        }
        let logits = self.out.forward(inputs.last().unwrap())?;
        Ok((logits, PolicyCache { conv, inputs, outputs }))
    }

    /// Returns the gradient with respect to the context vector, if any.
    pub fn backward(&self, cache: &PolicyCache<T>, g_logits: &Tensor<T>, grad: &mut Policy<T>) -> Option<Tensor<T>> {
        let mut g = self.out.backward(cache.inputs.last().unwrap(), g_logits, &mut grad.out, true).unwrap();
        for i in (0..self.hidden.len()).rev() {
            relu_backward_inplace(cache.outputs[i].data(), g.data_mut());
            g = self.hidden[i].backward(&cache.inputs[i], &g, &mut grad.hidden[i], true).unwrap();
        }
        let n = g.shape()[0];
        let f = ConvStack::<T>::feature_size();
        let cd = self.context_dim();
        let mut gf = Tensor::zeros(&[n, f]);
        let mut gc = Tensor::zeros(&[n, cd]);
        for (i, src) in g.data().chunks(f + cd).enumerate() {
            gf.data_mut()[i * f..(i + 1) * f].copy_from_slice(&src[..f]);
            gc.data_mut()[i * cd..(i + 1) * cd].copy_from_slice(&src[f..]);
        }
        self.conv.backward(&cache.conv, gf, &mut grad.conv);
        (cd > 0).then_some(gc)
    }
}

/// Plan vector produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanVector<T>(pub Vec<T>);

impl<T: Scalar> PlanVector<T> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn add(&self, other: &PlanVector<T>) -> PlanVector<T> {
        PlanVector(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect())
    }

    pub fn sub(&self, other: &PlanVector<T>) -> PlanVector<T> {
        PlanVector(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// What the policy is conditioned on for one decision.
pub enum PolicyContext<'a, T> {
    /// `v_ref` and the progress embedding `v_prog = g(o_0, o_t)`.
    Cpv { reference: &'a PlanVector<T>, progress: &'a PlanVector<T> },
    Te { reference: &'a PlanVector<T> },
    /// Raw reference endpoints and the episode's first frame.
    Naive { ref_first: Img<'a, T>, ref_last: Img<'a, T>, first: Img<'a, T> },
}

/// Encoder (absent in naive mode) plus policy.
#[derive(Clone, Debug, PartialEq)]
pub struct CpvModel<T> {
    pub mode: ConditioningMode,
    pub encoder: Option<Encoder<T>>,
    pub policy: Policy<T>,
    dim: usize,
}

impl<T: Scalar> CpvModel<T> {
    pub fn new(mode: ConditioningMode, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let encoder = mode.has_encoder().then(|| Encoder::init(dim, &mut rng));
        let context = if mode.has_encoder() { dim } else { 0 };
        let policy = Policy::init(mode.policy_channels(), context, &mut rng);
        CpvModel { mode, encoder, policy, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        m.params_mut().into_iter().for_each(Tensor::fill_zero);
        m
    }

    /// Parameter tensors in declaration order: encoder (conv layers then
    /// projection), then policy (conv layers, hidden layers, output).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            for c in &e.conv.layers {
                out.extend([&c.weight, &c.bias]);
            }
            out.extend([&e.proj.weight, &e.proj.bias]);
        }
        for c in &self.policy.conv.layers {
            out.extend([&c.weight, &c.bias]);
        }
        for l in &self.policy.hidden {
            out.extend([&l.weight, &l.bias]);
        }
        out.extend([&self.policy.out.weight, &self.policy.out.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.encoder {
            for c in &mut e.conv.layers {
                out.extend([&mut c.weight, &mut c.bias]);
            }
            out.extend([&mut e.proj.weight, &mut e.proj.bias]);
        }
        for c in &mut self.policy.conv.layers {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        for l in &mut self.policy.hidden {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.extend([&mut self.policy.out.weight, &mut self.policy.out.bias]);
        out
    }

    /// Names matching [`CpvModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |prefix: String| {
            out.push(format!("{prefix}.weight"));
            out.push(format!("{prefix}.bias"));
        };
        if let Some(e) = &self.encoder {
            (0..e.conv.layers.len()).for_each(|i| push(format!("encoder.conv{i}")));
            push("encoder.proj".into());
        }
        (0..self.policy.conv.layers.len()).for_each(|i| push(format!("policy.conv{i}")));
        (0..self.policy.hidden.len()).for_each(|i| push(format!("policy.fc{i}")));
        push("policy.out".into());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    pub fn cast<U: Scalar>(&self) -> CpvModel<U> {
        let mut out = CpvModel::<U>::new(self.mode, self.dim, 0);
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    fn encoder(&self) -> Result<&Encoder<T>> {
        self.encoder.as_ref().ok_or_else(|| CpvError::Invalid("naive model has no encoder".into()))
    }

    /// `g(o_a, o_b)`.
    pub fn embed(&self, a: Img<'_, T>, b: Img<'_, T>) -> Result<PlanVector<T>> {
        let e = self.encoder()?.embed_pairs(&[(a, b)])?;
        Ok(PlanVector(e.into_data()))
    }

    pub fn embed_obs(&self, a: &Observation, b: &Observation) -> Result<PlanVector<T>> {
        self.embed(Img::Obs(a), Img::Obs(b))
    }

    /// Action logits for the current frame under `context`.
    pub fn policy_logits(&self, current: &Observation, context: PolicyContext<'_, T>) -> Result<[T; Action::COUNT]> {
        let (x, ctx) = match (self.mode, context) {
            (ConditioningMode::Cpv, PolicyContext::Cpv { reference, progress }) => {
                (stack_images(&[vec![Img::Obs(current)]]), Some(reference.sub(progress)))
            }
            (ConditioningMode::Te, PolicyContext::Te { reference }) => {
                (stack_images(&[vec![Img::Obs(current)]]), Some(reference.clone()))
            }
            (ConditioningMode::Naive, PolicyContext::Naive { ref_first, ref_last, first }) => {
                (stack_images(&[vec![ref_first, ref_last, first, Img::Obs(current)]]), None)
            }
            (mode, _) => return Err(CpvError::Invalid(format!("context does not match {mode} mode"))),
        };
        let ctx = match ctx {
            Some(v) => {
                if v.dim() != self.dim {
                    return Err(CpvError::Shape(format!("plan vector dim {} != {}", v.dim(), self.dim)));
                }
                Some(Tensor::from_vec(&[1, self.dim], v.0)?)
            }
            None => None,
        };
        let (logits, _) = self.policy.forward(&x, ctx.as_ref(), None)?;
        let mut out = [T::zero(); Action::COUNT];
        out.copy_from_slice(logits.data());
        Ok(out)
    }
}

pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craftworld::{render, sample_env, SkillEvent};

    fn frames(n: u64) -> Vec<Observation> {
        (0..n).map(|s| render(&sample_env(s, &[SkillEvent::ChopTree]).unwrap())).collect()
    }

    #[test]
    fn conv_feature_size_is_384() {
        assert_eq!(ConvStack::<f32>::feature_size(), 3 * 2 * 64);
    }

    #[test]
    fn embed_shape_zero_and_determinism() {
        let f = frames(2);
        let m = CpvModel::<f32>::new(ConditioningMode::Cpv, 16, 1);
        let v = m.embed_obs(&f[0], &f[1]).unwrap();
        assert_eq!(v.dim(), 16);
        assert_eq!(v, m.embed_obs(&f[0], &f[1]).unwrap());
        assert_eq!(CpvModel::<f32>::new(ConditioningMode::Cpv, DEFAULT_DIM, 1).embed_obs(&f[0], &f[1]).unwrap().dim(), 512);

        let mut z = m.clone();
        z.encoder.as_mut().unwrap().conv.layers.iter_mut().for_each(|c| {
            c.weight.fill_zero();
            c.bias.fill_zero();
        });
        z.encoder.as_mut().unwrap().proj.weight.fill_zero();
        z.encoder.as_mut().unwrap().proj.bias.fill_zero();
        assert!(z.embed_obs(&f[0], &f[1]).unwrap().0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cpv_logits_depend_only_on_difference() {
        let f = frames(3);
        let m = CpvModel::<f32>::new(ConditioningMode::Cpv, 8, 3);
        // Dyadic values keep the shifted sums exact.
        let r = PlanVector(vec![0.5f32; 8]);
        let p = PlanVector((0..8).map(|i| i as f32 * 0.125).collect());
        let c = PlanVector(vec![-3.25f32; 8]);
        let a = m.policy_logits(&f[2], PolicyContext::Cpv { reference: &r, progress: &p }).unwrap();
        let b = m.policy_logits(&f[2], PolicyContext::Cpv { reference: &r.add(&c), progress: &p.add(&c) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_context_is_rejected() {
        let f = frames(1);
        let m = CpvModel::<f32>::new(ConditioningMode::Te, 8, 3);
        let r = PlanVector(vec![0.0f32; 8]);
        assert!(m.policy_logits(&f[0], PolicyContext::Cpv { reference: &r, progress: &r }).is_err());
        assert!(m.policy_logits(&f[0], PolicyContext::Te { reference: &r }).is_ok());
        let n = CpvModel::<f32>::new(ConditioningMode::Naive, 8, 3);
        assert!(n.embed_obs(&f[0], &f[0]).is_err());
        let img = Img::Obs(&f[0]);
        assert!(n.policy_logits(&f[0], PolicyContext::Naive { ref_first: img, ref_last: img, first: img }).is_ok());
    }

    #[test]
    fn param_layout_and_flat_round_trip() {
        let m = CpvModel::<f64>::new(ConditioningMode::Cpv, 8, 0);
        assert_eq!(m.params().len(), 10 + 8 + 10);
        let naive = CpvModel::<f64>::new(ConditioningMode::Naive, 8, 0);
        assert_eq!(naive.params().len(), 18);
        assert_eq!(naive.policy.conv.layers[0].in_channels(), 12);
        assert_eq!(naive.policy.hidden[0].inputs(), 384);
        assert_eq!(m.policy.hidden[0].inputs(), 384 + 8);
        let mut z = m.zeros_like();
        z.set_flat_params(&m.flat_params());
        assert_eq!(z, m);
        let back: CpvModel<f64> = m.cast::<f32>().cast();
        assert_eq!(back.mode, m.mode);
    }
}

//! Shared per-cell perception model.
//!
//! Every layer is a per-cell affine map (a 1×1 convolution) optionally
//! followed by ReLU. The same parameters serve the RSU and all vehicles.
//! Each forward op has a traced variant whose trace feeds the matching
//! closed-form backward.

mod checkpoint;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{BevGrid, NUM_ENTITY_CLASSES, NUM_LABELS};
use crate::tensor::{FeatureMap, Tensor3};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Objectness logit plus `(dx, dy, dw, dh)`.
pub const DET_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Per-cell affine map `y = W x + b`, weight stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim, dim);
        for i in 0..dim {
            a.weight[i * dim + i] = 1.0;
        }
        a
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize) -> f64 {
        self.weight[o * self.in_dim + i]
    }

    fn check_input(&self, x: &Tensor3, what: &str) -> Result<()> {
        if x.channels() != self.in_dim {
            return Err(Error::Shape(format!(
                "{what} expects {} input channels, got {}",
                self.in_dim,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Pre-activation output.
    fn pre_activation(&self, x: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(x.height(), x.width(), self.out_dim);
        let cells = x.cells();
        for cell in 0..cells {
            out.cell_mut(cell).copy_from_slice(&self.bias);
        }
        if cells > 0 && self.in_dim > 0 && self.out_dim > 0 {
            // out (cells×out) += x (cells×in) · weightᵀ (in×out)
            let (m, k, n) = (cells, self.in_dim, self.out_dim);
            unsafe {
                matrixmultiply::dgemm(
                    m, k, n, 1.0,
                    x.as_slice().as_ptr(), k as isize, 1,
                    self.weight.as_ptr(), 1, k as isize,
                    1.0,
                    out.as_mut_slice().as_mut_ptr(), n as isize, 1,
                );
            }
        }
        out
    }

    pub fn apply(&self, x: &Tensor3, act: Activation, what: &str) -> Result<Tensor3> {
        self.check_input(x, what)?;
        let mut out = self.pre_activation(x);
        if act == Activation::Relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(out)
    }

    /// Returns `(output, pre_activation)`.
    pub fn forward(&self, x: &Tensor3, act: Activation, what: &str) -> Result<(Tensor3, Tensor3)> {
        self.check_input(x, what)?;
        let pre = self.pre_activation(x);
        let mut out = pre.clone();
        if act == Activation::Relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok((out, pre))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient. `relu_out` is the layer's output when it ends in a ReLU: a
    /// cell passes gradient exactly where that output is positive.
    pub fn backward(&self, input: &Tensor3, relu_out: Option<&Tensor3>, grad_out: &Tensor3, grad: &mut Affine) -> Tensor3 {
        let mut grad_in = Tensor3::zeros(input.height(), input.width(), self.in_dim);
        let cells = input.cells();
        let (k, n) = (self.in_dim, self.out_dim);
        let mut gp = grad_out.as_slice().to_vec();
        if let Some(out) = relu_out {
            for (g, &z) in gp.iter_mut().zip(out.as_slice()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        for row in gp.chunks_exact(n.max(1)) {
            for (b, g) in grad.bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        if cells == 0 || k == 0 || n == 0 {
            return grad_in;
        }
        unsafe {
            // grad_in (cells×in) = gp (cells×out) · weight (out×in)
            matrixmultiply::dgemm(
                cells, n, k, 1.0,
                gp.as_ptr(), n as isize, 1,
                self.weight.as_ptr(), k as isize, 1,
                0.0,
                grad_in.as_mut_slice().as_mut_ptr(), k as isize, 1,
            );
            // grad.weight (out×in) += gpᵀ (out×cells) · input (cells×in)
            matrixmultiply::dgemm(
                n, cells, k, 1.0,
                gp.as_ptr(), 1, n as isize,
                input.as_slice().as_ptr(), k as isize, 1,
                1.0,
                grad.weight.as_mut_ptr(), k as isize, 1,
            );
        }
        grad_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// BEV input channels (one per entity class).
    pub input_channels: usize,
    /// Append a fixed 3×3 average-pooled copy of the input before encoding.
    pub context_pool: bool,
    pub feature_channels: usize,
    pub decoder_channels: usize,
    pub num_classes: usize,
    /// Channel compression factor of the transmission autoencoder.
    pub compression: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_channels: NUM_ENTITY_CLASSES,
            context_pool: true,
            feature_channels: 32,
            decoder_channels: 16,
            num_classes: NUM_LABELS,
            compression: 1,
        }
    }
}

impl ModelDims {
    pub fn encoder_inputs(&self) -> usize {
        if self.context_pool {
            2 * self.input_channels
        } else {
            self.input_channels
        }
    }

    pub fn compressed_channels(&self) -> usize {
        self.feature_channels / self.compression
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.feature_channels == 0
            || self.decoder_channels == 0
            || self.num_classes == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        check_factor(self.feature_channels, self.compression)
    }
}

fn check_factor(channels: usize, n: usize) -> Result<()> {
    if n == 0 || !channels.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "compression factor {n} does not divide {channels} feature channels"
        )));
    }
    Ok(())
}

/// Which shared layer an op runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Encoder,
    Decoder,
    SegHead,
    DetHead,
    Compressor,
    Decompressor,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::Encoder,
        Layer::Decoder,
        Layer::SegHead,
        Layer::DetHead,
        Layer::Compressor,
        Layer::Decompressor,
    ];

    pub fn activation(self) -> Activation {
        match self {
            Layer::Encoder | Layer::Decoder => Activation::Relu,
            _ => Activation::Linear,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Encoder => "encoder",
            Layer::Decoder => "decoder",
            Layer::SegHead => "seg_head",
            Layer::DetHead => "det_head",
            Layer::Compressor => "compressor",
            Layer::Decompressor => "decompressor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Affine,
    pub decoder: Affine,
    pub seg_head: Affine,
    pub det_head: Affine,
    pub compressor: Affine,
    pub decompressor: Affine,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let f = dims.feature_channels;
        let d = dims.decoder_channels;
        let z = dims.compressed_channels();
        Ok(Self {
            dims,
            encoder: Affine::zeros(dims.encoder_inputs(), f),
            decoder: Affine::zeros(f, d),
            seg_head: Affine::zeros(d, dims.num_classes),
            det_head: Affine::zeros(d, DET_CHANNELS),
            compressor: Affine::zeros(f, z),
            decompressor: Affine::zeros(z, f),
        })
    }

    /// He-uniform initialisation seeded by `seed`; biases start at zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = dims.feature_channels;
        let d = dims.decoder_channels;
        let z = dims.compressed_channels();
        Ok(Self {
            dims,
            encoder: Affine::he_uniform(dims.encoder_inputs(), f, &mut rng),
            decoder: Affine::he_uniform(f, d, &mut rng),
            seg_head: Affine::he_uniform(d, dims.num_classes, &mut rng),
            det_head: Affine::he_uniform(d, DET_CHANNELS, &mut rng),
            compressor: Affine::he_uniform(f, z, &mut rng),
            decompressor: Affine::he_uniform(z, f, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims).expect("dims already validated")
    }

    pub fn layer(&self, layer: Layer) -> &Affine {
        match layer {
            Layer::Encoder => &self.encoder,
            Layer::Decoder => &self.decoder,
            Layer::SegHead => &self.seg_head,
            Layer::DetHead => &self.det_head,
            Layer::Compressor => &self.compressor,
            Layer::Decompressor => &self.decompressor,
        }
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut Affine {
        match layer {
            Layer::Encoder => &mut self.encoder,
            Layer::Decoder => &mut self.decoder,
            Layer::SegHead => &mut self.seg_head,
            Layer::DetHead => &mut self.det_head,
            Layer::Compressor => &mut self.compressor,
            Layer::Decompressor => &mut self.decompressor,
        }
    }

    /// Every parameter value in checkpoint order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        Layer::ALL.into_iter().flat_map(move |l| {
            let a = self.layer(l);
            a.weight.iter().chain(&a.bias).copied()
        })
    }

    pub fn num_values(&self) -> usize {
        Layer::ALL
            .iter()
            .map(|&l| {
                let a = self.layer(l);
                a.weight.len() + a.bias.len()
            })
            .sum()
    }

    /// Mutable access to the `index`-th value in [`ModelParams::values`] order.
    pub fn value_mut(&mut self, mut index: usize) -> &mut f64 {
        for a in self.layers_mut() {
            let n = a.weight.len();
            if index < n {
                return &mut a.weight[index];
            }
            if index < n + a.bias.len() {
                return &mut a.bias[index - n];
            }
            index -= n + a.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn layers(&self) -> [&Affine; 6] {
        [
            &self.encoder,
            &self.decoder,
            &self.seg_head,
            &self.det_head,
            &self.compressor,
            &self.decompressor,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Affine; 6] {
        [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.seg_head,
            &mut self.det_head,
            &mut self.compressor,
            &mut self.decompressor,
        ]
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += alpha * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn sgd_step(&mut self, grads: &ModelParams, learning_rate: f64) {
        self.add_scaled(-learning_rate, grads);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Forward state needed to differentiate one layer application.
#[derive(Debug, Clone)]
pub struct OpTrace {
    pub layer: Layer,
    pub input: Arc<Tensor3>,
    /// Output of a ReLU layer, which carries its activation mask.
    relu_out: Option<Tensor3>,
    out_shape: (usize, usize, usize),
}

pub fn forward_traced(p: &ModelParams, layer: Layer, x: Arc<Tensor3>) -> Result<(Tensor3, OpTrace)> {
    let out = p.layer(layer).apply(&x, layer.activation(), layer.name())?;
    let relu_out = (layer.activation() == Activation::Relu).then(|| out.clone());
    let out_shape = out.shape();
    Ok((
        out,
        OpTrace {
            layer,
            input: x,
            relu_out,
            out_shape,
        },
    ))
}

/// Closed-form backward of one traced op: accumulates into `grads` and
/// returns the gradient with respect to the op's input.
pub fn backward(p: &ModelParams, trace: &OpTrace, grad_out: &Tensor3, grads: &mut ModelParams) -> Result<Tensor3> {
    let layer = p.layer(trace.layer);
    if grad_out.shape() != trace.out_shape {
        return Err(Error::Shape(format!(
            "{} gradient {:?} does not match output {:?}",
            trace.layer.name(),
            grad_out.shape(),
            trace.out_shape
        )));
    }
    Ok(layer.backward(
        &trace.input,
        trace.relu_out.as_ref(),
        grad_out,
        grads.layer_mut(trace.layer),
    ))
}

/// Raw occupancy, optionally followed by a zero-padded 3×3 box average of it.
pub fn preprocess(grid: &Tensor3, context_pool: bool) -> Tensor3 {
    if !context_pool {
        return grid.clone();
    }
    let (h, w, c) = grid.shape();
    let mut out = Tensor3::zeros(h, w, 2 * c);
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                out.set(r, col, k, grid.get(r, col, k));
                let mut acc = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = r as i64 + dr;
                        let cc = col as i64 + dc;
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            acc += grid.get(rr as usize, cc as usize, k);
                        }
                    }
                }
                out.set(r, col, c + k, acc / 9.0);
            }
        }
    }
    out
}

fn check_grid(v: &Tensor3, p: &ModelParams) -> Result<()> {
    if v.channels() != p.dims.input_channels {
        return Err(Error::Shape(format!(
            "BEV grid has {} channels, model expects {}",
            v.channels(),
            p.dims.input_channels
        )));
    }
    Ok(())
}

pub fn encode_traced(v: &Tensor3, p: &ModelParams) -> Result<(FeatureMap, OpTrace)> {
    check_grid(v, p)?;
    forward_traced(p, Layer::Encoder, Arc::new(preprocess(v, p.dims.context_pool)))
}

/// `M = ReLU(W_enc · x + b_enc)` per cell.
pub fn encode(v: &BevGrid, p: &ModelParams) -> Result<FeatureMap> {
    Ok(encode_traced(&v.data, p)?.0)
}

pub fn decode(m: &FeatureMap, p: &ModelParams) -> Result<FeatureMap> {
    p.decoder.apply(m, Activation::Relu, "decoder")
}

/// Segmentation logits; softmax lives in the loss.
pub fn seg_head(m: &FeatureMap, p: &ModelParams) -> Result<Tensor3> {
    p.seg_head.apply(m, Activation::Linear, "seg_head")
}

/// Objectness logit and box offsets per cell.
pub fn det_head(m: &FeatureMap, p: &ModelParams) -> Result<Tensor3> {
    p.det_head.apply(m, Activation::Linear, "det_head")
}

fn check_compression(p: &ModelParams, n: usize) -> Result<()> {
    check_factor(p.dims.feature_channels, n)?;
    if n != p.dims.compression {
        return Err(Error::Config(format!(
            "model was built for compression {} but {n} was requested",
            p.dims.compression
        )));
    }
    Ok(())
}

pub fn compress(m: &FeatureMap, p: &ModelParams, n: usize) -> Result<FeatureMap> {
    check_compression(p, n)?;
    p.compressor.apply(m, Activation::Linear, "compressor")
}

pub fn decompress(m: &FeatureMap, p: &ModelParams, n: usize) -> Result<FeatureMap> {
    check_compression(p, n)?;
    p.decompressor.apply(m, Activation::Linear, "decompressor")
}

//! BroNet and vanilla MLP function approximators.
//!
//! Parameters of a network live in one flat buffer described by a
//! [`TensorSpec`] layout. Optimizer moments, gradients, Polyak averaging and
//! serialization all work on that buffer directly; structured access goes
//! through [`Network::tensors`] and [`Network::tensors_mut`].
//!
//! BroNet pipeline for an input batch `x`:
//!
//! ```text
//! h = relu(LN(x W_in + b_in))
//! for each block:  h = h + LN(relu(LN(h W_1 + b_1)) W_2 + b_2)
//! y = h W_out + b_out
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Normalization epsilon added to the per-row variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Bronet,
    VanillaMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_size: usize,
    /// Residual blocks for BroNet. The vanilla MLP always has two hidden layers.
    pub num_blocks: usize,
    pub output_dim: usize,
    pub architecture: Architecture,
}

impl NetConfig {
    pub fn bronet(input_dim: usize, hidden_size: usize, num_blocks: usize, output_dim: usize) -> Self {
        NetConfig {
            input_dim,
            hidden_size,
            num_blocks,
            output_dim,
            architecture: Architecture::Bronet,
        }
    }

    pub fn vanilla_mlp(input_dim: usize, hidden_size: usize, output_dim: usize) -> Self {
        NetConfig {
            input_dim,
            hidden_size,
            num_blocks: 1,
            output_dim,
            architecture: Architecture::VanillaMlp,
        }
    }

    pub fn from_size(input_dim: usize, size: ModelSize, output_dim: usize, architecture: Architecture) -> Self {
        NetConfig {
            input_dim,
            hidden_size: size.hidden_size,
            num_blocks: size.num_blocks,
            output_dim,
            architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_size", self.hidden_size),
            ("num_blocks", self.num_blocks),
            ("output_dim", self.output_dim),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Depth and width of a critic, written `<blocks>x<hidden>` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelSize {
    pub num_blocks: usize,
    pub hidden_size: usize,
}

impl ModelSize {
    pub const fn new(num_blocks: usize, hidden_size: usize) -> Self {
        ModelSize { num_blocks, hidden_size }
    }

    /// The five published critic sizes with their labels.
    pub const PRESETS: [(&'static str, ModelSize); 5] = [
        ("0.55M", ModelSize::new(1, 128)),
        ("1.05M", ModelSize::new(1, 256)),
        ("2.83M", ModelSize::new(1, 512)),
        ("4.92M", ModelSize::new(2, 512)),
        ("26.31M", ModelSize::new(3, 1024)),
    ];

    pub fn label(&self) -> Option<&'static str> {
        Self::PRESETS.iter().find(|(_, s)| s == self).map(|(label, _)| *label)
    }
}

impl std::fmt::Display for ModelSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.num_blocks, self.hidden_size)
    }
}

impl std::str::FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("model size `{s}` is not of the form <blocks>x<hidden>"));
        let (blocks, hidden) = s.split_once('x').ok_or_else(bad)?;
        let num_blocks: usize = blocks.trim().parse().map_err(|_| bad())?;
        let hidden_size: usize = hidden.trim().parse().map_err(|_| bad())?;
        if num_blocks == 0 || hidden_size == 0 {
            return Err(bad());
        }
        Ok(ModelSize { num_blocks, hidden_size })
    }
}

impl Serialize for ModelSize {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSize {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Input,
    /// `sublayer` is 0 or 1 for the two dense+norm pairs of a residual block.
    Block { index: usize, sublayer: usize },
    /// Hidden layer of the vanilla MLP.
    Hidden(usize),
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub layer: Layer,
    pub kind: ParamKind,
    /// `(rows, cols)`; vectors are `(1, n)`. Dense weights are `(fan_in, fan_out)`.
    pub shape: (usize, usize),
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, layer: Layer, kind: ParamKind, shape: (usize, usize)) {
        self.specs.push(TensorSpec {
            layer,
            kind,
            shape,
            offset: self.offset,
        });
        self.offset += shape.0 * shape.1;
    }

    fn dense(&mut self, layer: Layer, fan_in: usize, fan_out: usize) {
        self.push(layer, ParamKind::Weight, (fan_in, fan_out));
        self.push(layer, ParamKind::Bias, (1, fan_out));
    }

    fn norm(&mut self, layer: Layer, width: usize) {
        self.push(layer, ParamKind::NormGain, (1, width));
        self.push(layer, ParamKind::NormBias, (1, width));
    }
}

/// Tensor layout of a network, in storage order.
pub fn layout(config: &NetConfig) -> Vec<TensorSpec> {
    let h = config.hidden_size;
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        offset: 0,
    };
    match config.architecture {
        Architecture::Bronet => {
            b.dense(Layer::Input, config.input_dim, h);
            b.norm(Layer::Input, h);
            for index in 0..config.num_blocks {
                for sublayer in 0..2 {
                    let layer = Layer::Block { index, sublayer };
                    b.dense(layer, h, h);
                    b.norm(layer, h);
                }
            }
        }
        Architecture::VanillaMlp => {
            b.dense(Layer::Hidden(0), config.input_dim, h);
            b.dense(Layer::Hidden(1), h, h);
        }
    }
    b.dense(Layer::Output, h, config.output_dim);
    b.specs
}

/// Closed-form parameter count.
pub fn count_params(config: &NetConfig) -> usize {
    let (i, h, o) = (config.input_dim, config.hidden_size, config.output_dim);
    match config.architecture {
        Architecture::Bronet => {
            let per_block = 2 * (h * h + h) + 2 * 2 * h;
            (i * h + h) + 2 * h + config.num_blocks * per_block + (h * o + o)
        }
        Architecture::VanillaMlp => (i * h + h) + (h * h + h) + (h * o + o),
    }
}

/// Layer normalization of a single feature vector.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(Error::Domain("layer_norm of an empty vector".into()));
    }
    if gain.len() != x.len() {
        return Err(Error::shape("layer_norm gain", x.len(), gain.len()));
    }
    if bias.len() != x.len() {
        return Err(Error::shape("layer_norm bias", x.len(), bias.len()));
    }
    let mut out = x.to_vec();
    normalize_row(&mut out);
    for ((o, &g), &b) in out.iter_mut().zip(gain).zip(bias) {
        *o = g * *o + b;
    }
    Ok(out)
}

/// Replaces `row` by its normalized values and returns `1 / sqrt(var + eps)`.
fn normalize_row<F: Real>(row: &mut [F]) -> F {
    let n = F::of(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = (var + F::of(LAYER_NORM_EPS)).sqrt().recip();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

struct NormCache<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

/// Normalizes `z` in place row by row and applies gain and bias.
fn layer_norm_rows<F: Real>(z: &mut Array2<F>, gain: ArrayView1<F>, bias: ArrayView1<F>) -> NormCache<F> {
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in z.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        *inv = normalize_row(row.as_slice_mut().expect("contiguous rows"));
    }
    let normalized = z.clone();
    *z *= &gain;
    *z += &bias;
    NormCache { normalized, inv_std }
}

/// Backward through `y = gain * xhat + bias`; returns the gradient w.r.t. the
/// pre-normalization input.
fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gain: ArrayView1<F>,
    grad_out: &Array2<F>,
    param_grads: Option<(&mut [F], &mut [F])>,
) -> Array2<F> {
    if let Some((dgain, dbias)) = param_grads {
        let prod = grad_out * &cache.normalized;
        for (g, v) in dgain.iter_mut().zip(prod.sum_axis(Axis(0))) {
            *g = *g + v;
        }
        for (g, v) in dbias.iter_mut().zip(grad_out.sum_axis(Axis(0))) {
            *g = *g + v;
        }
    }
    let n = F::of(gain.len() as f64);
    let mut dx = grad_out * &gain;
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.normalized.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&d, &x)| d * x).sum::<F>() / n;
        for (d, &x) in row.iter_mut().zip(xhat.iter()) {
            *d = inv * (*d - mean_d - x * mean_dx);
        }
    }
    dx
}

fn relu_in_place<F: Real>(z: &mut Array2<F>) {
    z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zeroes gradient entries where the ReLU output was not positive.
fn relu_backward<F: Real>(grad: &mut Array2<F>, activated: &Array2<F>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

enum Stage<F> {
    /// Input dense + LN + ReLU; holds the dense input and activated output.
    BroInput { norm: NormCache<F>, activated: Array2<F> },
    BroBlock {
        block_input: Array2<F>,
        norm1: NormCache<F>,
        hidden: Array2<F>,
        norm2: NormCache<F>,
    },
    MlpHidden { activated: [Array2<F>; 2] },
}

/// Activations kept by [`Network::forward_cached`] for the backward pass.
pub struct ForwardCache<F> {
    input: Array2<F>,
    stages: Vec<Stage<F>>,
    last_hidden: Array2<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<F: Real> {
    config: NetConfig,
    params: Vec<F>,
}

impl<F: Real> Network<F> {
    /// Fresh parameters: hidden dense weights are He-uniform
    /// (`±sqrt(6 / fan_in)`), the output layer is `±1/sqrt(fan_in)`, biases
    /// start at zero and normalization gains at one.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let mut params = vec![F::zero(); total];
        for spec in &specs {
            let slot = &mut params[spec.range()];
            match spec.kind {
                ParamKind::Weight => {
                    let fan_in = spec.shape.0 as f64;
                    let bound = if spec.layer == Layer::Output {
                        fan_in.sqrt().recip()
                    } else {
                        (6.0 / fan_in).sqrt()
                    };
                    for w in slot.iter_mut() {
                        *w = F::of(rng.random_range(-bound..bound));
                    }
                }
                ParamKind::NormGain => slot.fill(F::one()),
                ParamKind::Bias | ParamKind::NormBias => {}
            }
        }
        Ok(Network { config, params })
    }

    /// A statistically fresh draw with the same configuration.
    pub fn reinitialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Network::init(self.config, rng).expect("existing config is valid")
    }

    /// Rebuilds a network from stored parameters, checking shape and finiteness.
    pub fn from_params(config: NetConfig, params: Vec<F>) -> Result<Self> {
        let net = Network { config, params };
        net.validate()?;
        Ok(net)
    }

    /// Re-checks a deserialized network.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = count_params(&self.config);
        if self.params.len() != expected {
            return Err(Error::shape("network parameters", expected, self.params.len()));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network parameter".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        layout(&self.config)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (TensorSpec, &[F])> {
        layout(&self.config)
            .into_iter()
            .map(move |spec| (spec, &self.params[spec.range()]))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (TensorSpec, &mut [F])> {
        let mut rest: &mut [F] = &mut self.params;
        layout(&self.config).into_iter().map(move |spec| {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(spec.len());
            rest = tail;
            (spec, head)
        })
    }

    /// Checked forward pass.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass that also returns what [`Network::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::shape("network input width", self.config.input_dim, x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network input".into()));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: ArrayView2<F>) -> (Array2<F>, ForwardCache<F>) {
        let specs = layout(&self.config);
        let mut stages = Vec::new();
        let mut it = specs.iter();
        let hidden = match self.config.architecture {
            Architecture::Bronet => {
                let mut z = self.dense_forward(x, it.next().unwrap(), it.next().unwrap());
                let (g, b) = (it.next().unwrap(), it.next().unwrap());
                let norm = layer_norm_rows(&mut z, self.vector(g), self.vector(b));
                relu_in_place(&mut z);
                stages.push(Stage::BroInput {
                    norm,
                    activated: z.clone(),
                });
                let mut h = z;
                for _ in 0..self.config.num_blocks {
                    let mut z1 = self.dense_forward(h.view(), it.next().unwrap(), it.next().unwrap());
                    let (g1, b1) = (it.next().unwrap(), it.next().unwrap());
                    let norm1 = layer_norm_rows(&mut z1, self.vector(g1), self.vector(b1));
                    relu_in_place(&mut z1);
                    let mut z2 = self.dense_forward(z1.view(), it.next().unwrap(), it.next().unwrap());
                    let (g2, b2) = (it.next().unwrap(), it.next().unwrap());
                    let norm2 = layer_norm_rows(&mut z2, self.vector(g2), self.vector(b2));
                    z2 += &h;
                    stages.push(Stage::BroBlock {
                        block_input: h,
                        norm1,
                        hidden: z1,
                        norm2,
                    });
                    h = z2;
                }
                h
            }
            Architecture::VanillaMlp => {
                let mut a1 = self.dense_forward(x, it.next().unwrap(), it.next().unwrap());
                relu_in_place(&mut a1);
                let mut a2 = self.dense_forward(a1.view(), it.next().unwrap(), it.next().unwrap());
                relu_in_place(&mut a2);
                stages.push(Stage::MlpHidden {
                    activated: [a1, a2.clone()],
                });
                a2
            }
        };
        let y = self.dense_forward(hidden.view(), it.next().unwrap(), it.next().unwrap());
        let cache = ForwardCache {
            input: x.to_owned(),
            stages,
            last_hidden: hidden,
        };
        (y, cache)
    }

    /// Backpropagates `grad_output` (dL/dy). Parameter gradients are added
    /// into `param_grads` when given; the input gradient is returned when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        grad_output: ArrayView2<F>,
        mut param_grads: Option<&mut [F]>,
        want_input_grad: bool,
    ) -> Option<Array2<F>> {
        if let Some(g) = param_grads.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient buffer length");
        }
        let specs = layout(&self.config);
        let mut idx = specs.len();
        let mut next = || {
            idx -= 1;
            specs[idx]
        };
        let (ob, ow) = (next(), next());
        let mut grad = self.dense_backward(
            cache.last_hidden.view(),
            grad_output.to_owned(),
            ow,
            ob,
            param_grads.as_deref_mut(),
            true,
        )
        .expect("hidden gradient requested");

        for stage in cache.stages.iter().rev() {
            match stage {
                Stage::BroBlock {
                    block_input,
                    norm1,
                    hidden,
                    norm2,
                } => {
                    let (b2, g2, db2, w2) = (next(), next(), next(), next());
                    let (b1, g1, db1, w1) = (next(), next(), next(), next());
                    let dz2 = self.norm_backward(norm2, &grad, g2, b2, param_grads.as_deref_mut());
                    let mut dh = self
                        .dense_backward(hidden.view(), dz2, w2, db2, param_grads.as_deref_mut(), true)
                        .unwrap();
                    relu_backward(&mut dh, hidden);
                    let dz1 = self.norm_backward(norm1, &dh, g1, b1, param_grads.as_deref_mut());
                    let dx = self
                        .dense_backward(block_input.view(), dz1, w1, db1, param_grads.as_deref_mut(), true)
                        .unwrap();
                    grad += &dx;
                }
                Stage::BroInput { norm, activated } => {
                    let (b, g, db, w) = (next(), next(), next(), next());
                    relu_backward(&mut grad, activated);
                    let dz = self.norm_backward(norm, &grad, g, b, param_grads.as_deref_mut());
                    return self.dense_backward(cache.input.view(), dz, w, db, param_grads, want_input_grad);
                }
                Stage::MlpHidden { activated } => {
                    let (b2, w2, b1, w1) = (next(), next(), next(), next());
                    relu_backward(&mut grad, &activated[1]);
                    let mut d1 = self
                        .dense_backward(activated[0].view(), grad, w2, b2, param_grads.as_deref_mut(), true)
                        .unwrap();
                    relu_backward(&mut d1, &activated[0]);
                    return self.dense_backward(cache.input.view(), d1, w1, b1, param_grads, want_input_grad);
                }
            }
        }
        unreachable!("every architecture ends with an input stage")
    }

    fn matrix(&self, spec: &TensorSpec) -> ArrayView2<'_, F> {
        ArrayView2::from_shape(spec.shape, &self.params[spec.range()]).expect("layout shape")
    }

    fn vector(&self, spec: &TensorSpec) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.params[spec.range()])
    }

    fn dense_forward(&self, x: ArrayView2<F>, w: &TensorSpec, b: &TensorSpec) -> Array2<F> {
        let bias = self.vector(b);
        let mut z = Array2::from_shape_fn((x.nrows(), w.shape.1), |(_, j)| bias[j]);
        general_mat_mul(F::one(), &x, &self.matrix(w), F::one(), &mut z);
        z
    }

    fn dense_backward(
        &self,
        input: ArrayView2<F>,
        grad_out: Array2<F>,
        w: TensorSpec,
        b: TensorSpec,
        param_grads: Option<&mut [F]>,
        want_input_grad: bool,
    ) -> Option<Array2<F>> {
        if let Some(grads) = param_grads {
            let mut dw = ArrayViewMut2::from_shape(w.shape, &mut grads[w.range()]).expect("layout shape");
            general_mat_mul(F::one(), &input.t(), &grad_out, F::one(), &mut dw);
            for (g, v) in grads[b.range()].iter_mut().zip(grad_out.sum_axis(Axis(0))) {
                *g = *g + v;
            }
        }
        want_input_grad.then(|| grad_out.dot(&self.matrix(&w).t()))
    }

    fn norm_backward(
        &self,
        cache: &NormCache<F>,
        grad_out: &Array2<F>,
        gain: TensorSpec,
        bias: TensorSpec,
        param_grads: Option<&mut [F]>,
    ) -> Array2<F> {
        let grads = param_grads.map(|g| {
            // gain and bias are adjacent in the layout
            debug_assert_eq!(gain.offset + gain.len(), bias.offset);
            let (dg, db) = g[gain.offset..bias.offset + bias.len()].split_at_mut(gain.len());
            (dg, db)
        });
        layer_norm_backward(cache, self.vector(&gain), grad_out, grads)
    }
}

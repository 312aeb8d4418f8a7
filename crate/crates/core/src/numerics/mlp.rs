//! Fixed MLP with analytic backprop.
//!
//! [`MlpStack`] is the raw layer stack (linear layers with an activation on
//! every layer but the last) operating on arbitrary feature batches; it is
//! reused for the discriminator head. [`MlpNet`] wraps a stack as a
//! velocity net: the input features are `[x, timestep embedding, cond]`
//! and the output dimension always equals the sample dimension.

use rand::Rng;
use std::sync::Arc;

use super::params::{Layout, LayoutBuilder, ParamVector};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn f(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn df(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Sinusoidal features of `t / 1000` with geometrically spaced frequencies.
/// `dim` must be even.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let u = t / 1000.0;
    for k in 0..half {
        let omega = if half > 1 {
            1000.0_f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((omega * u).sin());
        out.push((omega * u).cos());
    }
    out
}

/// Activations cached by a forward pass, consumed by the matching backward
/// pass. `layers_run` < the stack depth means a prefix run (feature tap).
#[derive(Debug)]
pub struct StackCache {
    inputs: Vec<Batch>,
    preacts: Vec<Batch>,
    layers_run: usize,
    batch_len: usize,
}

impl StackCache {
    /// Input batch that was fed to linear layer `i`.
    pub fn layer_input(&self, i: usize) -> &Batch {
        &self.inputs[i]
    }
}

/// Plain linear stack: `widths[0] -> widths[1] -> ... -> widths[last]`,
/// activation after every layer except the final one. Tensor names are
/// `{prefix}layer{i}/w` and `{prefix}layer{i}/b`.
#[derive(Debug, Clone)]
pub struct MlpStack {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub prefix: String,
}

impl MlpStack {
    pub fn new(widths: Vec<usize>, activation: Activation, prefix: impl Into<String>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("net.widths", "need at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("net.widths", "zero-width layer"));
        }
        Ok(Self {
            widths,
            activation,
            prefix: prefix.into(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}layer{layer}/w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}layer{layer}/b", self.prefix)
    }

    /// Weight shape of layer `i` as `(d_out, d_in)`.
    pub fn weight_shape(&self, layer: usize) -> (usize, usize) {
        (self.widths[layer + 1], self.widths[layer])
    }

    pub fn append_layout(&self, b: &mut LayoutBuilder) {
        for i in 0..self.n_layers() {
            let (dout, din) = self.weight_shape(i);
            b.push(self.weight_name(i), vec![dout, din]);
            b.push(self.bias_name(i), vec![dout]);
        }
    }

    pub fn layout(&self) -> Arc<Layout> {
        let mut b = LayoutBuilder::new();
        self.append_layout(&mut b);
        b.build()
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init_into(&self, params: &mut ParamVector, seed: u64) {
        let mut rng = derive_rng(seed, "init", 0);
        for i in 0..self.n_layers() {
            let (_, din) = self.weight_shape(i);
            let bound = (6.0 / din as f64).sqrt();
            for w in params.tensor_mut(&self.weight_name(i)) {
                *w = rng.gen_range(-bound..bound);
            }
            // biases stay zero
        }
    }

    /// Run the first `layers` linear layers. `layers == n_layers()` is the
    /// full net; anything smaller ends on a post-activation hidden state.
    pub fn forward_prefix(&self, params: &ParamVector, input: &Batch, layers: usize) -> Result<(Batch, StackCache)> {
        if layers == 0 || layers > self.n_layers() {
            return Err(Error::Usage(format!("cannot run {layers} of {} layers", self.n_layers())));
        }
        let batch_len = input.len();
        let mut cache = StackCache {
            inputs: Vec::with_capacity(layers),
            preacts: Vec::with_capacity(layers),
            layers_run: layers,
            batch_len,
        };
        let mut z: Batch = input.to_vec();
        for i in 0..layers {
            let (dout, din) = self.weight_shape(i);
            let w = params.tensor(&self.weight_name(i));
            let b = params.tensor(&self.bias_name(i));
            let mut u = Vec::with_capacity(batch_len);
            for row in &z {
                if row.len() != din {
                    return Err(Error::config(
                        "net.widths",
                        format!("layer {i} expected input dim {din}, got {}", row.len()),
                    ));
                }
                let mut urow = vec![0.0; dout];
                for (o, uo) in urow.iter_mut().enumerate() {
                    let wrow = &w[o * din..(o + 1) * din];
                    let mut acc = 0.0;
                    for (wv, xv) in wrow.iter().zip(row.iter()) {
                        acc += wv * xv;
                    }
                    *uo = acc + b[o];
                }
                u.push(urow);
            }
            cache.inputs.push(std::mem::take(&mut z));
            z = if i < self.n_layers() - 1 {
                u.iter()
                    .map(|row| row.iter().map(|&v| self.activation.f(v)).collect())
                    .collect()
            } else {
                u.clone()
            };
            cache.preacts.push(u);
        }
        Ok((z, cache))
    }

    pub fn forward(&self, params: &ParamVector, input: &Batch) -> Result<Batch> {
        Ok(self.forward_prefix(params, input, self.n_layers())?.0)
    }

    /// Backpropagate `upstream` (gradient w.r.t. the output of the cached
    /// run). Parameter gradients accumulate into `grads` when given; the
    /// return value is the gradient w.r.t. the input features when
    /// `want_input_grad`.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &StackCache,
        upstream: &Batch,
        mut grads: Option<&mut ParamVector>,
        want_input_grad: bool,
    ) -> Result<Option<Batch>> {
        if upstream.len() != cache.batch_len {
            return Err(Error::Usage(format!(
                "backward batch {} does not match cached forward batch {}",
                upstream.len(),
                cache.batch_len
            )));
        }
        let k = cache.layers_run;
        let expect = self.widths[k];
        if upstream.iter().any(|r| r.len() != expect) {
            return Err(Error::Usage(format!("upstream dim does not match layer output {expect}")));
        }
        let mut g: Batch = upstream.to_vec();
        for i in (0..k).rev() {
            let (_, din) = self.weight_shape(i);
            if i < self.n_layers() - 1 {
                for (grow, urow) in g.iter_mut().zip(&cache.preacts[i]) {
                    for (gv, &uv) in grow.iter_mut().zip(urow.iter()) {
                        *gv *= self.activation.df(uv);
                    }
                }
            }
            let zin = &cache.inputs[i];
            if let Some(acc) = grads.as_deref_mut() {
                {
                    let dw = acc.tensor_mut(&self.weight_name(i));
                    for (grow, zrow) in g.iter().zip(zin) {
                        for (o, &go) in grow.iter().enumerate() {
                            let dwrow = &mut dw[o * din..(o + 1) * din];
                            for (dv, &zv) in dwrow.iter_mut().zip(zrow.iter()) {
                                *dv += go * zv;
                            }
                        }
                    }
                }
                let db = acc.tensor_mut(&self.bias_name(i));
                for grow in &g {
                    for (dv, &gv) in db.iter_mut().zip(grow.iter()) {
                        *dv += gv;
                    }
                }
            }
            if i > 0 || want_input_grad {
                let w = params.tensor(&self.weight_name(i));
                let mut gin = Vec::with_capacity(g.len());
                for grow in &g {
                    let mut row = vec![0.0; din];
                    for (o, &go) in grow.iter().enumerate() {
                        let wrow = &w[o * din..(o + 1) * din];
                        for (rv, &wv) in row.iter_mut().zip(wrow.iter()) {
                            *rv += go * wv;
                        }
                    }
                    gin.push(row);
                }
                g = gin;
            }
        }
        Ok(if want_input_grad { Some(g) } else { None })
    }
}

/// Forward cache of a velocity-net pass.
#[derive(Debug)]
pub struct MlpCache {
    stack: StackCache,
}

impl MlpCache {
    pub fn batch_len(&self) -> usize {
        self.stack.batch_len
    }

    /// Input batch that was fed to linear layer `i` (for layer 0 these are
    /// the concatenated features).
    pub fn layer_input(&self, i: usize) -> &Batch {
        self.stack.layer_input(i)
    }
}

/// Velocity network `v(x, t, cond)`. Features are the concatenation of the
/// sample, an 8-dimensional (by default) sinusoidal embedding of `t/1000`,
/// and the optional condition vector. The output dimension equals the
/// sample dimension.
#[derive(Debug, Clone)]
pub struct MlpNet {
    stack: MlpStack,
    data_dim: usize,
    emb_dim: usize,
    cond_dim: usize,
}

impl MlpNet {
    pub fn new(
        data_dim: usize,
        hidden: &[usize],
        emb_dim: usize,
        cond_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::config("net.data_dim", "sample dimension must be positive"));
        }
        if emb_dim % 2 != 0 {
            return Err(Error::config("net.time_embed_dim", "embedding dimension must be even"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(data_dim + emb_dim + cond_dim);
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let stack = MlpStack::new(widths, activation, "")?;
        Ok(Self {
            stack,
            data_dim,
            emb_dim,
            cond_dim,
        })
    }

    pub fn stack(&self) -> &MlpStack {
        &self.stack
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn n_layers(&self) -> usize {
        self.stack.n_layers()
    }

    /// Width of the post-activation hidden state after layer `tap`.
    pub fn hidden_width(&self, tap: usize) -> usize {
        self.stack.widths[tap + 1]
    }

    pub fn layout(&self) -> Arc<Layout> {
        self.stack.layout()
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        self.stack.init_into(&mut p, seed);
        p
    }

    fn features(&self, x: &Batch, t: &[f64], cond: Option<&Batch>) -> Result<Batch> {
        if t.len() != x.len() {
            return Err(Error::config("batch", "x and t batch sizes differ"));
        }
        if let Some(c) = cond {
            if c.len() != x.len() {
                return Err(Error::config("batch", "x and cond batch sizes differ"));
            }
        } else if self.cond_dim != 0 {
            return Err(Error::config("batch", format!("net expects cond dim {}, got none", self.cond_dim)));
        }
        let mut feats = Vec::with_capacity(x.len());
        for (i, row) in x.iter().enumerate() {
            if row.len() != self.data_dim {
                return Err(Error::config(
                    "batch",
                    format!("sample dim {} does not match net data dim {}", row.len(), self.data_dim),
                ));
            }
            let ti = t[i];
            if !(0.0..=1000.0).contains(&ti) {
                return Err(Error::Domain(format!("timestep {ti} outside [0, 1000]")));
            }
            let mut f = Vec::with_capacity(self.stack.in_dim());
            f.extend_from_slice(row);
            f.extend(timestep_embedding(ti, self.emb_dim));
            if let Some(c) = cond {
                if c[i].len() != self.cond_dim {
                    return Err(Error::config(
                        "batch",
                        format!("cond dim {} does not match net cond dim {}", c[i].len(), self.cond_dim),
                    ));
                }
                f.extend_from_slice(&c[i]);
            }
            feats.push(f);
        }
        Ok(feats)
    }

    pub fn forward(&self, params: &ParamVector, x: &Batch, t: &[f64], cond: Option<&Batch>) -> Result<Batch> {
        let feats = self.features(x, t, cond)?;
        self.stack.forward(params, &feats)
    }

    pub fn forward_cached(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        cond: Option<&Batch>,
    ) -> Result<(Batch, MlpCache)> {
        let feats = self.features(x, t, cond)?;
        let (out, stack) = self.stack.forward_prefix(params, &feats, self.stack.n_layers())?;
        Ok((out, MlpCache { stack }))
    }

    /// Post-activation hidden state after layer `tap` (`tap < n_layers-1`),
    /// used as the discriminator's feature input.
    pub fn forward_to_tap(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        cond: Option<&Batch>,
        tap: usize,
    ) -> Result<(Batch, MlpCache)> {
        if tap + 1 >= self.stack.n_layers() {
            return Err(Error::config(
                "disc.tap",
                format!("tap {tap} is not a hidden layer of a {}-layer net", self.stack.n_layers()),
            ));
        }
        let feats = self.features(x, t, cond)?;
        let (out, stack) = self.stack.forward_prefix(params, &feats, tap + 1)?;
        Ok((out, MlpCache { stack }))
    }

    /// Backward through a cached forward (full or tap-prefix). Parameter
    /// gradients accumulate into `grads` when given; returns dLoss/dx when
    /// `want_input_grad` (the embedding and condition slots are dropped).
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &MlpCache,
        upstream: &Batch,
        grads: Option<&mut ParamVector>,
        want_input_grad: bool,
    ) -> Result<Option<Batch>> {
        let gin = self
            .stack
            .backward(params, &cache.stack, upstream, grads, want_input_grad)?;
        Ok(gin.map(|rows| {
            rows.into_iter()
                .map(|mut r| {
                    r.truncate(self.data_dim);
                    r
                })
                .collect()
        }))
    }
}

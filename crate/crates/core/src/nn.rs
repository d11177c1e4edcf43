//! Small deterministic feed-forward networks with reverse-mode
//! differentiation to parameters and to inputs.
//!
//! The layer family (dense / conv / relu / max-pool / softmax) is
//! deliberately free of stochastic layers and batch statistics: forward
//! passes must be pure functions of (parameters, input) so that forward
//! differences and query replay are well defined.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Counts how often a probability had to be clamped at [`PROB_FLOOR`]
/// inside input-gradient computation.
pub static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

pub fn clamp_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR
    } else {
        p
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected: `w` is out×in, `b` is out.
    Dense { w: Tensor, b: Tensor },
    /// 2-D convolution, stride 1: `w` is out_c×in_c×kh×kw, `b` is out_c.
    Conv2d { w: Tensor, b: Tensor, pad: usize },
    Relu,
    /// Non-overlapping max pooling with window = stride = `size`.
    MaxPool2d { size: usize },
    Flatten,
    Softmax,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => vec![w, b],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => vec![w, b],
            _ => vec![],
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            Layer::Dense { w, .. } => {
                let n: usize = input.iter().product();
                if w.shape()[1] != n {
                    return Err(Error::ShapeMismatch {
                        context: "dense layer".into(),
                        expected: vec![w.shape()[1]],
                        got: vec![n],
                    });
                }
                Ok(vec![w.shape()[0]])
            }
            Layer::Conv2d { w, pad, .. } => {
                if input.len() != 3 {
                    return err(format!("conv2d expects C×H×W input, got {input:?}"));
                }
                let (oc, ic, kh, kw) =
                    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                if input[0] != ic {
                    return Err(Error::ShapeMismatch {
                        context: "conv2d layer channels".into(),
                        expected: vec![ic],
                        got: vec![input[0]],
                    });
                }
                let h = input[1] + 2 * pad;
                let w_ = input[2] + 2 * pad;
                if h < kh || w_ < kw {
                    return err("conv2d kernel larger than padded input".into());
                }
                Ok(vec![oc, h - kh + 1, w_ - kw + 1])
            }
            Layer::Relu | Layer::Softmax => Ok(input.to_vec()),
            Layer::MaxPool2d { size } => {
                if input.len() != 3 {
                    return err(format!("maxpool2 expects C×H×W input, got {input:?}"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        match self {
            Layer::Dense { w, b } => {
                let (o, n) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; o];
                let xd = x.data();
                let wd = w.data();
                for i in 0..o {
                    let mut acc = b.data()[i];
                    let row = &wd[i * n..(i + 1) * n];
                    for (wv, xv) in row.iter().zip(xd) {
                        acc += wv * xv;
                    }
                    out[i] = acc;
                }
                Tensor::new(out_shape, out)
            }
            Layer::Conv2d { w, b, pad } => {
                let (c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oc, _, kh, kw) =
                    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut out = vec![0.0; oc * oh * ow];
                let xd = x.data();
                let wd = w.data();
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.data()[o];
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wi as isize {
                                            continue;
                                        }
                                        acc += wd[((o * c + ci) * kh + ky) * kw + kx]
                                            * xd[(ci * h + iy as usize) * wi + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                Tensor::new(out_shape, out)
            }
            Layer::Relu => Tensor::new(
                out_shape,
                x.data().iter().map(|v| v.max(0.0)).collect(),
            ),
            Layer::MaxPool2d { size } => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut out = vec![0.0; c * oh * ow];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for ky in 0..*size {
                                for kx in 0..*size {
                                    let v = x.data()
                                        [(ci * h + oy * size + ky) * w + ox * size + kx];
                                    if v > m {
                                        m = v;
                                    }
                                }
                            }
                            out[(ci * oh + oy) * ow + ox] = m;
                        }
                    }
                }
                Tensor::new(out_shape, out)
            }
            Layer::Flatten => x.clone().reshape(out_shape),
            Layer::Softmax => {
                let mx = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = x.data().iter().map(|v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                Tensor::new(out_shape, exps.iter().map(|e| e / sum).collect())
            }
        }
    }

    /// Backward pass for one sample. `x` is the layer input, `y` its
    /// output, `dy` the loss gradient at the output. Returns the gradient
    /// at the input plus gradients for each parameter tensor.
    fn backward(&self, x: &Tensor, y: &Tensor, dy: &Tensor) -> (Tensor, Vec<Tensor>) {
        match self {
            Layer::Dense { w, .. } => {
                let (o, n) = (w.shape()[0], w.shape()[1]);
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; o * n];
                let mut db = vec![0.0; o];
                let wd = w.data();
                for i in 0..o {
                    let g = dy.data()[i];
                    db[i] = g;
                    for j in 0..n {
                        dx[j] += wd[i * n + j] * g;
                        dw[i * n + j] = g * x.data()[j];
                    }
                }
                (
                    Tensor::new(x.shape().to_vec(), dx).unwrap(),
                    vec![
                        Tensor::new(w.shape().to_vec(), dw).unwrap(),
                        Tensor::new(vec![o], db).unwrap(),
                    ],
                )
            }
            Layer::Conv2d { w, pad, .. } => {
                let (c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oc, _, kh, kw) =
                    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let mut dx = vec![0.0; c * h * wi];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; oc];
                let xd = x.data();
                let wd = w.data();
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[(o * oh + oy) * ow + ox];
                            db[o] += g;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wi as isize {
                                            continue;
                                        }
                                        let wi_idx = ((o * c + ci) * kh + ky) * kw + kx;
                                        let xi_idx =
                                            (ci * h + iy as usize) * wi + ix as usize;
                                        dx[xi_idx] += wd[wi_idx] * g;
                                        dw[wi_idx] += xd[xi_idx] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                (
                    Tensor::new(x.shape().to_vec(), dx).unwrap(),
                    vec![
                        Tensor::new(w.shape().to_vec(), dw).unwrap(),
                        Tensor::new(vec![oc], db).unwrap(),
                    ],
                )
            }
            Layer::Relu => {
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(xv, g)| if *xv > 0.0 { *g } else { 0.0 })
                    .collect();
                (Tensor::new(x.shape().to_vec(), dx).unwrap(), vec![])
            }
            Layer::MaxPool2d { size } => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            // route the gradient to the first maximal entry
                            let mut best = (0usize, f64::NEG_INFINITY);
                            for ky in 0..*size {
                                for kx in 0..*size {
                                    let idx =
                                        (ci * h + oy * size + ky) * w + ox * size + kx;
                                    if x.data()[idx] > best.1 {
                                        best = (idx, x.data()[idx]);
                                    }
                                }
                            }
                            dx[best.0] += dy.data()[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
                (Tensor::new(x.shape().to_vec(), dx).unwrap(), vec![])
            }
            Layer::Flatten => (
                dy.clone().reshape(x.shape().to_vec()).unwrap(),
                vec![],
            ),
            Layer::Softmax => {
                // dL/dz_i = y_i (dL/dy_i − Σ_j dL/dy_j · y_j)
                let dot: f64 = dy.data().iter().zip(y.data()).map(|(g, v)| g * v).sum();
                let dx: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(v, g)| v * (g - dot))
                    .collect();
                (Tensor::new(x.shape().to_vec(), dx).unwrap(), vec![])
            }
        }
    }
}

/// A small feed-forward classifier. The final layer must be [`Layer::Softmax`].
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(Error::InvalidArgument(
                "network must end with a softmax layer".into(),
            ));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::InvalidArgument(format!("layer {} ({}): {}", i, layer.kind(), e))
            })?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "network output must be a vector, got shape {shape:?}"
            )));
        }
        Ok(Self {
            num_classes: shape[0],
            layers,
            input_shape,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                f(p);
            }
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_params_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len());
    }

    fn check_input(&self, image: &Tensor, context: &str) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                expected: self.input_shape.clone(),
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass for a single image, returning the K probabilities.
    pub fn forward_single(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(image)?.pop().unwrap())
    }

    /// Forward pass keeping every intermediate activation (index 0 is the
    /// input itself).
    pub(crate) fn forward_trace(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image, "forward")?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(image.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(acts.last().unwrap()).map_err(|e| {
                Error::InvalidArgument(format!("layer {} ({}): {}", i, layer.kind(), e))
            })?;
            acts.push(next);
        }
        acts.last().unwrap().check_finite("forward output")?;
        Ok(acts)
    }

    /// Batch forward: `batch` is B×(input shape), output is B×K.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().is_empty() || batch.shape()[1..] != *self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "forward batch".into(),
                expected: self.input_shape.clone(),
                got: batch.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let b = batch.shape()[0];
        let per = batch.len() / b.max(1);
        let mut out = Vec::with_capacity(b * self.num_classes);
        for i in 0..b {
            let img = Tensor::new(
                self.input_shape.clone(),
                batch.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            out.extend_from_slice(self.forward_single(&img)?.data());
        }
        Tensor::new(vec![b, self.num_classes], out)
    }

    /// Backpropagates a gradient given at the probability output down to
    /// the input, accumulating parameter gradients into `grads` when
    /// supplied.
    pub(crate) fn backward_from_dprobs(
        &self,
        acts: &[Tensor],
        dprobs: Tensor,
        mut grads: Option<&mut GradBuffer>,
    ) -> Tensor {
        let mut dy = dprobs;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, pgrads) = layer.backward(&acts[i], &acts[i + 1], &dy);
            if let Some(buf) = grads.as_deref_mut() {
                for (slot, g) in buf.per_layer[i].iter_mut().zip(pgrads) {
                    slot.add_scaled(&g, 1.0);
                }
            }
            dy = dx;
        }
        dy
    }

    /// Gradient of the cross-entropy loss `−log y_p` with respect to every
    /// input pixel (the sample gradient Q).
    pub fn backward_input(&self, image: &Tensor, target_label: usize) -> Result<Tensor> {
        if target_label >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "target label {} out of range [0, {})",
                target_label, self.num_classes
            )));
        }
        let acts = self.forward_trace(image)?;
        let probs = acts.last().unwrap();
        let mut dprobs = vec![0.0; self.num_classes];
        dprobs[target_label] = -1.0 / clamp_prob(probs.data()[target_label]);
        let q = self.backward_from_dprobs(
            &acts,
            Tensor::new(vec![self.num_classes], dprobs)?,
            None,
        );
        q.check_finite("backward_input")?;
        Ok(q)
    }

    /// One momentum-SGD step on a batch. Returns the pre-update mean loss.
    pub fn train_step(
        &mut self,
        batch: &Tensor,
        targets: &Targets,
        opt: &mut OptimizerState,
    ) -> Result<f64> {
        let b = batch.shape()[0];
        targets.check(b, self.num_classes)?;
        let per = batch.len() / b;
        let mut grads = GradBuffer::new(self);
        let mut total_loss = 0.0;
        for i in 0..b {
            let img = Tensor::new(
                self.input_shape.clone(),
                batch.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            let acts = self.forward_trace(&img)?;
            let probs = acts.last().unwrap();
            let t = targets.row(i, self.num_classes);
            let mut loss = 0.0;
            let mut dprobs = vec![0.0; self.num_classes];
            for k in 0..self.num_classes {
                if t[k] != 0.0 {
                    let p = clamp_prob(probs.data()[k]);
                    loss -= t[k] * p.ln();
                    dprobs[k] = -t[k] / p / b as f64;
                }
            }
            total_loss += loss / b as f64;
            self.backward_from_dprobs(
                &acts,
                Tensor::new(vec![self.num_classes], dprobs)?,
                Some(&mut grads),
            );
        }
        if !total_loss.is_finite() {
            return Err(Error::NonFinite("train_step loss".into()));
        }
        opt.apply(self, &grads);
        Ok(total_loss)
    }

    /// Worst relative error between `backward_input` and central finite
    /// differences over every input coordinate.
    pub fn grad_check(&self, image: &Tensor) -> Result<f64> {
        let probs = self.forward_single(image)?;
        let label = argmax(probs.data());
        let analytic = self.backward_input(image, label)?;
        let loss = |img: &Tensor| -> Result<f64> {
            let y = self.forward_single(img)?;
            Ok(-clamp_prob(y.data()[label]).ln())
        };
        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut x = image.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + step;
            let lp = loss(&x)?;
            x.data_mut()[i] = orig - step;
            let lm = loss(&x)?;
            x.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs());
            if denom > 1e-7 {
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        Ok(worst)
    }
}

/// Training targets: hard class labels or per-sample soft distributions.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<usize>),
    /// Row-major B×K.
    Soft(Tensor),
}

impl Targets {
    fn check(&self, b: usize, k: usize) -> Result<()> {
        match self {
            Targets::Labels(l) => {
                if l.len() != b {
                    return Err(Error::InvalidArgument(format!(
                        "{} labels for batch of {}",
                        l.len(),
                        b
                    )));
                }
                if let Some(bad) = l.iter().find(|&&c| c >= k) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range [0, {k})"
                    )));
                }
            }
            Targets::Soft(t) => {
                if t.shape() != [b, k] {
                    return Err(Error::ShapeMismatch {
                        context: "soft targets".into(),
                        expected: vec![b, k],
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    fn row(&self, i: usize, k: usize) -> Vec<f64> {
        match self {
            Targets::Labels(l) => {
                let mut t = vec![0.0; k];
                t[l[i]] = 1.0;
                t
            }
            Targets::Soft(t) => t.data()[i * k..(i + 1) * k].to_vec(),
        }
    }
}

/// Momentum SGD with a stepwise learning-rate decay schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    epoch: usize,
    velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, decay_factor: f64, decay_period: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            decay_factor,
            decay_period,
            epoch: 0,
            velocities: Vec::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn effective_lr(&self) -> f64 {
        self.learning_rate
            * self
                .decay_factor
                .powi((self.epoch / self.decay_period.max(1)) as i32)
    }

    pub(crate) fn apply(&mut self, net: &mut Network, grads: &GradBuffer) {
        let lr = self.effective_lr();
        let mom = self.momentum;
        if self.velocities.is_empty() {
            net.visit_params_mut(|p| self.velocities.push(Tensor::zeros_like(p)));
        }
        let flat: Vec<&Tensor> = grads.per_layer.iter().flatten().collect();
        let mut idx = 0;
        let vels = &mut self.velocities;
        net.visit_params_mut(|p| {
            let v = &mut vels[idx];
            debug_assert_eq!(v.shape(), p.shape());
            for ((vv, pv), gv) in v
                .data_mut()
                .iter_mut()
                .zip(p.data_mut())
                .zip(flat[idx].data())
            {
                *vv = mom * *vv - lr * gv;
                *pv += *vv;
            }
            idx += 1;
        });
    }
}

/// Per-layer parameter gradient accumulator, aligned with `Layer::params`.
pub struct GradBuffer {
    per_layer: Vec<Vec<Tensor>>,
}

impl GradBuffer {
    pub fn new(net: &Network) -> Self {
        Self {
            per_layer: net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros_like(p)).collect())
                .collect(),
        }
    }

    /// Accumulated gradients flattened in `Layer::params` order, matching
    /// the `flat_params` layout.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.per_layer {
            for t in layer {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for layer in &mut self.per_layer {
            for t in layer {
                for v in t.data_mut() {
                    *v *= k;
                }
            }
        }
    }

    pub(crate) fn add_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for layer in &mut self.per_layer {
            for t in layer {
                for v in t.data_mut() {
                    *v += flat[off];
                    off += 1;
                }
            }
        }
        assert_eq!(off, flat.len());
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    // ties broken toward the lowest index
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Random initializers for desk-scale victims, proxies, and test fixtures.

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Layer {
    Layer::Dense {
        w: he_tensor(rng, vec![out, inp], inp),
        b: Tensor::zeros(vec![out]),
    }
}

pub fn conv2d(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, pad: usize) -> Layer {
    Layer::Conv2d {
        w: he_tensor(rng, vec![out_c, in_c, k, k], in_c * k * k),
        b: Tensor::zeros(vec![out_c]),
        pad,
    }
}

/// Random MLP: input shape → hidden sizes → K classes.
pub fn random_mlp(seed: u64, input_shape: &[usize], hidden: &[usize], k: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::Flatten];
    let mut n: usize = input_shape.iter().product();
    for &h in hidden {
        layers.push(dense(&mut rng, h, n));
        layers.push(Layer::Relu);
        n = h;
    }
    layers.push(dense(&mut rng, k, n));
    layers.push(Layer::Softmax);
    Network::new(layers, input_shape.to_vec()).unwrap()
}

/// Random small CNN: conv‑relu‑pool‑conv‑relu‑dense on C×H×W input.
pub fn random_cnn(seed: u64, input_shape: &[usize], c1: usize, c2: usize, k: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let layers = vec![
        conv2d(&mut rng, c1, c, 3, 1),
        Layer::Relu,
        Layer::MaxPool2d { size: 2 },
        conv2d(&mut rng, c2, c1, 3, 1),
        Layer::Relu,
        Layer::Flatten,
        dense(&mut rng, k, c2 * (h / 2) * (w / 2)),
        Layer::Softmax,
    ];
    Network::new(layers, input_shape.to_vec()).unwrap()
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "SPSGNET1", textual layer manifest, then
// little-endian f64 parameter blocks in manifest order.

pub const NET_MAGIC: &str = "SPSGNET1";

impl Network {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{NET_MAGIC}")?;
        writeln!(
            f,
            "input_shape {}",
            self.input_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )?;
        writeln!(f, "num_classes {}", self.num_classes)?;
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, .. } => {
                    writeln!(f, "layer dense {} {}", w.shape()[0], w.shape()[1])?
                }
                Layer::Conv2d { w, pad, .. } => writeln!(
                    f,
                    "layer conv2d {} {} {} {} {}",
                    w.shape()[0],
                    w.shape()[1],
                    w.shape()[2],
                    w.shape()[3],
                    pad
                )?,
                Layer::Relu => writeln!(f, "layer relu")?,
                Layer::MaxPool2d { size } => writeln!(f, "layer maxpool2 {size}")?,
                Layer::Flatten => writeln!(f, "layer flatten")?,
                Layer::Softmax => writeln!(f, "layer softmax")?,
            }
        }
        writeln!(f, "end")?;
        for layer in &self.layers {
            for p in layer.params() {
                for v in p.data() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != NET_MAGIC {
            return Err(Error::Format(format!(
                "bad network magic {:?}",
                line.trim_end()
            )));
        }
        let mut input_shape = Vec::new();
        let mut layers = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("unterminated manifest".into()));
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["end"] => break,
                ["input_shape", rest @ ..] => {
                    input_shape = rest
                        .iter()
                        .map(|t| t.parse().map_err(|_| Error::Format("bad dim".into())))
                        .collect::<Result<_>>()?;
                }
                ["num_classes", _] => {}
                ["layer", "dense", o, i] => {
                    let (o, i): (usize, usize) = (
                        o.parse().map_err(|_| Error::Format("bad dense dims".into()))?,
                        i.parse().map_err(|_| Error::Format("bad dense dims".into()))?,
                    );
                    layers.push(Layer::Dense {
                        w: Tensor::zeros(vec![o, i]),
                        b: Tensor::zeros(vec![o]),
                    });
                }
                ["layer", "conv2d", oc, ic, kh, kw, pad] => {
                    let parse = |s: &str| -> Result<usize> {
                        s.parse().map_err(|_| Error::Format("bad conv dims".into()))
                    };
                    layers.push(Layer::Conv2d {
                        w: Tensor::zeros(vec![parse(oc)?, parse(ic)?, parse(kh)?, parse(kw)?]),
                        b: Tensor::zeros(vec![parse(oc)?]),
                        pad: parse(pad)?,
                    });
                }
                ["layer", "relu"] => layers.push(Layer::Relu),
                ["layer", "maxpool2", s] => layers.push(Layer::MaxPool2d {
                    size: s.parse().map_err(|_| Error::Format("bad pool size".into()))?,
                }),
                ["layer", "flatten"] => layers.push(Layer::Flatten),
                ["layer", "softmax"] => layers.push(Layer::Softmax),
                other => {
                    return Err(Error::Format(format!("bad manifest line {other:?}")));
                }
            }
        }
        let mut net = Network::new(layers, input_shape)?;
        let mut buf = [0u8; 8];
        let mut err = None;
        net.visit_params_mut(|p| {
            if err.is_some() {
                return;
            }
            for v in p.data_mut() {
                if let Err(e) = r.read_exact(&mut buf) {
                    err = Some(Error::Integrity(format!("truncated parameter block: {e}")));
                    return;
                }
                *v = f64::from_le_bytes(buf);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(net),
        }
    }
}

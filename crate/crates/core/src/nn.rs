//! Small CPU network engine: convolution, pooling and dense layers with
//! hand-written backward passes.
//!
//! Activations are single-sample CHW `f32` tensors. Batching happens one level
//! up: the caller runs samples through [`Network::forward_train`] and sums
//! gradients in sample order, which keeps results independent of scheduling.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: Shape::new(data.len(), 1, 1),
            data,
        }
    }
}

/// `c = a·b (+ c)` with `a: m×k`, `b: k×n`, row-major unless transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row/col-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// `[out][in / groups][k][k]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    slot: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        assert!(groups >= 1 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let fan = in_channels / groups * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight: vec![0.0; out_channels * fan],
            bias: vec![0.0; out_channels],
            slot: 0,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        Shape::new(self.out_channels, span(input.h), span(input.w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn im2col(&self, x: &Tensor, out: Shape) -> Vec<f32> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let k = self.kernel;
        let (h, w) = (x.shape.h as isize, x.shape.w as isize);
        let p = out.h * out.w;
        let mut cols = vec![0.0f32; x.shape.c * k * k * p];
        for ci in 0..x.shape.c {
            let plane = &x.data[ci * x.shape.h * x.shape.w..(ci + 1) * x.shape.h * x.shape.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..out.h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * x.shape.w..(iy as usize + 1) * x.shape.w];
                        let dst_row = &mut dst[oy * out.w..(oy + 1) * out.w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], input: Shape, out: Shape) -> Vec<f32> {
        if self.is_pointwise() {
            return cols.to_vec();
        }
        let k = self.kernel;
        let (h, w) = (input.h as isize, input.w as isize);
        let p = out.h * out.w;
        let mut dx = vec![0.0f32; input.len()];
        for ci in 0..input.c {
            let plane = &mut dx[ci * input.h * input.w..(ci + 1) * input.h * input.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..out.h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = iy as usize * input.w;
                        for ox in 0..out.w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                plane[base + ix as usize] += src[oy * out.w + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        assert_eq!(x.shape.c, self.in_channels, "conv input channels");
        let out_shape = self.output_shape(x.shape);
        let cols = self.im2col(x, out_shape);
        let p = out_shape.h * out_shape.w;
        let kdim = self.fan_in();
        let cout_g = self.out_channels / self.groups;
        let mut out = vec![0.0f32; out_shape.len()];
        for g in 0..self.groups {
            gemm(
                cout_g,
                kdim,
                p,
                &self.weight[g * cout_g * kdim..],
                false,
                &cols[g * kdim * p..],
                false,
                &mut out[g * cout_g * p..],
                false,
            );
        }
        for (co, plane) in out.chunks_mut(p).enumerate() {
            let b = self.bias[co];
            plane.iter_mut().for_each(|v| *v += b);
        }
        (Tensor::new(out_shape, out), cols)
    }

    fn backward(
        &self,
        cols: &[f32],
        in_shape: Shape,
        grad: &Tensor,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let out_shape = grad.shape;
        let p = out_shape.h * out_shape.w;
        let kdim = self.fan_in();
        let cout_g = self.out_channels / self.groups;
        {
            let db = &mut grads.0[self.slot + 1];
            for (co, plane) in grad.data.chunks(p).enumerate() {
                db[co] += plane.iter().sum::<f32>();
            }
        }
        {
            let dw = &mut grads.0[self.slot];
            for g in 0..self.groups {
                gemm(
                    cout_g,
                    p,
                    kdim,
                    &grad.data[g * cout_g * p..],
                    false,
                    &cols[g * kdim * p..],
                    true,
                    &mut dw[g * cout_g * kdim..],
                    true,
                );
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; self.groups * kdim * p];
        for g in 0..self.groups {
            gemm(
                kdim,
                cout_g,
                p,
                &self.weight[g * cout_g * kdim..],
                true,
                &grad.data[g * cout_g * p..],
                false,
                &mut dcols[g * kdim * p..],
                false,
            );
        }
        Some(Tensor::new(in_shape, self.col2im(&dcols, in_shape, out_shape)))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    slot: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
            slot: 0,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.data.len(), self.in_features, "linear input width");
        let mut out = self.bias.clone();
        gemm(
            self.out_features,
            self.in_features,
            1,
            &self.weight,
            false,
            &x.data,
            false,
            &mut out,
            true,
        );
        Tensor::vector(out)
    }

    fn backward(&self, input: &[f32], in_shape: Shape, grad: &Tensor, grads: &mut Gradients) -> Tensor {
        for (db, g) in grads.0[self.slot + 1].iter_mut().zip(&grad.data) {
            *db += g;
        }
        let dw = &mut grads.0[self.slot];
        for (row, g) in dw.chunks_mut(self.in_features).zip(&grad.data) {
            if *g != 0.0 {
                row.iter_mut().zip(input).for_each(|(d, x)| *d += g * x);
            }
        }
        let mut dx = vec![0.0f32; self.in_features];
        gemm(
            self.in_features,
            self.out_features,
            1,
            &self.weight,
            true,
            &grad.data,
            false,
            &mut dx,
            false,
        );
        Tensor::new(in_shape, dx)
    }
}

/// `body(x) + shortcut(x)`; the shortcut is the identity when absent.
#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Residual(Box<Residual>),
}

enum Cache {
    Conv { cols: Vec<f32>, in_shape: Shape },
    Linear { input: Vec<f32>, in_shape: Shape },
    Relu { active: Vec<bool> },
    MaxPool { argmax: Vec<u32>, in_shape: Shape },
    GlobalAvgPool { in_shape: Shape },
    Residual { body: Vec<Cache>, shortcut: Option<(Vec<f32>, Shape)> },
}

/// Per-parameter gradient buffers, in the network's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Activations saved by a training forward pass.
pub struct Tape(Vec<Cache>);

fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let out_shape = Shape::new(x.shape.c, x.shape.h / 2, x.shape.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let (h, w) = (x.shape.h, x.shape.w);
    for c in 0..x.shape.c {
        let base = c * h * w;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.push(x.data[best]);
                argmax.push(best as u32);
            }
        }
    }
    (Tensor::new(out_shape, out), argmax)
}

fn forward_layers(layers: &[Layer], x: &Tensor, mut tape: Option<&mut Vec<Cache>>) -> Tensor {
    let mut cur = x.clone();
    for layer in layers {
        let (next, cache) = match layer {
            Layer::Conv(conv) => {
                let in_shape = cur.shape;
                let (out, cols) = conv.forward(&cur);
                (out, tape.is_some().then_some(Cache::Conv { cols, in_shape }))
            }
            Layer::Linear(lin) => {
                let out = lin.forward(&cur);
                let cache = tape.is_some().then(|| Cache::Linear {
                    input: cur.data.clone(),
                    in_shape: cur.shape,
                });
                (out, cache)
            }
            Layer::Relu => {
                cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
                let cache = tape.is_some().then(|| Cache::Relu {
                    active: cur.data.iter().map(|v| *v > 0.0).collect(),
                });
                (cur, cache)
            }
            Layer::MaxPool2 => {
                let in_shape = cur.shape;
                let (out, argmax) = max_pool2(&cur);
                (out, tape.is_some().then_some(Cache::MaxPool { argmax, in_shape }))
            }
            Layer::GlobalAvgPool => {
                let in_shape = cur.shape;
                let n = (in_shape.h * in_shape.w) as f32;
                let out = cur
                    .data
                    .chunks(in_shape.h * in_shape.w)
                    .map(|plane| plane.iter().sum::<f32>() / n)
                    .collect();
                (
                    Tensor::vector(out),
                    tape.is_some().then_some(Cache::GlobalAvgPool { in_shape }),
                )
            }
            Layer::Residual(res) => {
                let mut body_tape = tape.is_some().then(Vec::new);
                let mut out = forward_layers(&res.body, &cur, body_tape.as_mut());
                let mut sc_cache = None;
                match &res.shortcut {
                    Some(conv) => {
                        let (sc, cols) = conv.forward(&cur);
                        out.data.iter_mut().zip(&sc.data).for_each(|(o, s)| *o += s);
                        if tape.is_some() {
                            sc_cache = Some((cols, cur.shape));
                        }
                    }
                    None => out.data.iter_mut().zip(&cur.data).for_each(|(o, s)| *o += s),
                }
                let cache = body_tape.map(|body| Cache::Residual {
                    body,
                    shortcut: sc_cache,
                });
                (out, cache)
            }
        };
        if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
            t.push(c);
        }
        cur = next;
    }
    cur
}

fn backward_layers(
    layers: &[Layer],
    caches: Vec<Cache>,
    mut grad: Tensor,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Option<Tensor> {
    assert_eq!(layers.len(), caches.len());
    let n = layers.len();
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want_input = need_input_grad || i > 0;
        grad = match (layer, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(&cols, in_shape, &grad, grads, want_input)?
            }
            (Layer::Linear(lin), Cache::Linear { input, in_shape }) => {
                lin.backward(&input, in_shape, &grad, grads)
            }
            (Layer::Relu, Cache::Relu { active }) => {
                grad.data
                    .iter_mut()
                    .zip(active)
                    .for_each(|(g, a)| if !a { *g = 0.0 });
                grad
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = vec![0.0f32; in_shape.len()];
                for (g, idx) in grad.data.iter().zip(argmax) {
                    dx[idx as usize] += g;
                }
                Tensor::new(in_shape, dx)
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let area = in_shape.h * in_shape.w;
                let inv = 1.0 / area as f32;
                let mut dx = Vec::with_capacity(in_shape.len());
                for g in &grad.data {
                    dx.extend(std::iter::repeat_n(g * inv, area));
                }
                Tensor::new(in_shape, dx)
            }
            (Layer::Residual(res), Cache::Residual { body, shortcut }) => {
                let through_body = backward_layers(&res.body, body, grad.clone(), grads, true)
                    .expect("residual body always propagates");
                let mut dx = through_body;
                match (&res.shortcut, shortcut) {
                    (Some(conv), Some((cols, in_shape))) => {
                        let sc = conv
                            .backward(&cols, in_shape, &grad, grads, true)
                            .expect("input gradient requested");
                        dx.data.iter_mut().zip(&sc.data).for_each(|(d, s)| *d += s);
                    }
                    _ => dx.data.iter_mut().zip(&grad.data).for_each(|(d, s)| *d += s),
                }
                dx
            }
            _ => unreachable!("tape does not match layer {i} of {n}"),
        };
    }
    Some(grad)
}

fn visit_params<'a>(layers: &'a [Layer], out: &mut Vec<&'a [f32]>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                out.push(&c.weight);
                out.push(&c.bias);
            }
            Layer::Linear(l) => {
                out.push(&l.weight);
                out.push(&l.bias);
            }
            Layer::Residual(r) => {
                visit_params(&r.body, out);
                if let Some(c) = &r.shortcut {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
            }
            _ => {}
        }
    }
}

fn visit_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Vec<f32>>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            Layer::Linear(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            Layer::Residual(r) => {
                visit_params_mut(&mut r.body, out);
                if let Some(c) = &mut r.shortcut {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
            }
            _ => {}
        }
    }
}

fn assign_slots(layers: &mut [Layer], next: &mut usize) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                c.slot = *next;
                *next += 2;
            }
            Layer::Linear(l) => {
                l.slot = *next;
                *next += 2;
            }
            Layer::Residual(r) => {
                assign_slots(&mut r.body, next);
                if let Some(c) = &mut r.shortcut {
                    c.slot = *next;
                    *next += 2;
                }
            }
            _ => {}
        }
    }
}

/// He-normal weights, zero biases.
fn init_layers<R: Rng + ?Sized>(layers: &mut [Layer], rng: &mut R) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let std = (2.0 / c.fan_in() as f64).sqrt();
                c.weight
                    .iter_mut()
                    .for_each(|w| *w = (std * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
            Layer::Linear(l) => {
                let std = (2.0 / l.in_features as f64).sqrt();
                l.weight
                    .iter_mut()
                    .for_each(|w| *w = (std * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
            Layer::Residual(r) => {
                init_layers(&mut r.body, rng);
                if let Some(c) = &mut r.shortcut {
                    let std = (2.0 / c.fan_in() as f64).sqrt();
                    c.weight
                        .iter_mut()
                        .for_each(|w| *w = (std * rng.sample::<f64, _>(StandardNormal)) as f32);
                }
                // Start every block as (close to) the identity.
                if let Some(Layer::Conv(last)) =
                    r.body.iter_mut().rev().find(|l| matches!(l, Layer::Conv(_)))
                {
                    last.weight.iter_mut().for_each(|w| *w = 0.0);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    n_params: usize,
}

impl Network {
    pub fn new(mut layers: Vec<Layer>) -> Self {
        let mut next = 0;
        assign_slots(&mut layers, &mut next);
        Self {
            layers,
            n_params: next,
        }
    }

    /// Randomly initializes every weight; the last dense layer is scaled down
    /// so initial outputs stay near the bias.
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        init_layers(&mut self.layers, rng);
        if let Some(Layer::Linear(last)) = self
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l, Layer::Linear(_)))
        {
            last.weight.iter_mut().for_each(|w| *w *= 0.1);
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn conv_count(&self) -> usize {
        fn count(layers: &[Layer]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(_) => 1,
                    Layer::Residual(r) => count(&r.body),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(self.n_params);
        visit_params(&self.layers, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::with_capacity(self.n_params);
        visit_params_mut(&mut self.layers, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        forward_layers(&self.layers, x, None)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, Tape) {
        let mut tape = Vec::with_capacity(self.layers.len());
        let out = forward_layers(&self.layers, x, Some(&mut tape));
        (out, Tape(tape))
    }

    /// Accumulates parameter gradients of `grad_out · output` into `grads`.
    pub fn backward(&self, tape: Tape, grad_out: Tensor, grads: &mut Gradients) {
        backward_layers(&self.layers, tape.0, grad_out, grads, false);
    }

    /// Like [`backward`](Self::backward) but also returns the input gradient.
    pub fn backward_with_input(&self, tape: Tape, grad_out: Tensor, grads: &mut Gradients) -> Tensor {
        backward_layers(&self.layers, tape.0, grad_out, grads, true)
            .expect("input gradient requested")
    }
}

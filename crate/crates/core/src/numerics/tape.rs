//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and what the
//! backward pass needs. Node ids are assigned in execution order, so inputs
//! always precede their consumers and a single reverse sweep is a valid
//! topological traversal.

use super::ops::{self, BiLstmCache, BiLstmParams};
use super::{NumericsError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    AddBias { input: Var, bias: Var, axis: usize },
    Conv2d { input: Var, kernel: Var, stride: (usize, usize), padding: (usize, usize) },
    MaxPool { input: Var, argmax: Vec<usize> },
    BiLstm { input: Var, params: [Var; 6], cache: Box<BiLstmCache> },
    Resample(Var),
    LogSoftmax(Var),
    /// Scalar with a precomputed local gradient with respect to `input`.
    External { input: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path connects it to the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, zeros when it did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let v = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|x| x * factor).collect());
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&x| x.max(0.0)).collect());
        let rg = self.needs(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(NumericsError::shape("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let (new_shape, data) = ops::permute_data(self.value(a).data(), shape, axes);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(new_shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `input`.
    pub fn add_bias(&mut self, input: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let b = self.value(bias);
        if axis >= shape.len() || b.shape() != [shape[axis]] {
            return Err(NumericsError::shape(
                "add_bias",
                format!("bias {:?} does not match axis {axis} of {shape:?}", b.shape()),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let count = shape[axis];
        let mut v = self.value(input).clone();
        let bias_data = self.value(bias).data().to_vec();
        for (k, run) in v.data_mut().chunks_exact_mut(inner).enumerate() {
            let b = bias_data[k % count];
            run.iter_mut().for_each(|x| *x += b);
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(v, Op::AddBias { input, bias, axis }, rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let v = ops::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(v, Op::Conv2d { input, kernel, stride, padding }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (v, argmax) = ops::maxpool2d_forward(self.value(input), window, stride)?;
        let rg = self.needs(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, rg))
    }

    /// Bidirectional recurrent layer; `params` is
    /// `[w_ih_fwd, w_hh_fwd, bias_fwd, w_ih_bwd, w_hh_bwd, bias_bwd]`.
    pub fn bilstm(&mut self, input: Var, params: [Var; 6]) -> Result<Var> {
        let p = self.lstm_params(&params);
        let (v, cache) = ops::bilstm_forward(self.value(input), &p)?;
        let mut deps = params.to_vec();
        deps.push(input);
        let rg = self.needs(&deps);
        Ok(self.push(v, Op::BiLstm { input, params, cache: Box::new(cache) }, rg))
    }

    fn lstm_params(&self, p: &[Var; 6]) -> BiLstmParams<'_> {
        BiLstmParams {
            w_ih: [self.value(p[0]), self.value(p[3])],
            w_hh: [self.value(p[1]), self.value(p[4])],
            bias: [self.value(p[2]), self.value(p[5])],
        }
    }

    /// Resamples a `[T, N, F]` sequence along time to `out_len` frames.
    pub fn resample(&mut self, input: Var, out_len: usize) -> Result<Var> {
        let v = ops::resample_forward(self.value(input), out_len)?;
        let rg = self.needs(&[input]);
        Ok(self.push(v, Op::Resample(input), rg))
    }

    /// Resamples by one of the supported factors; output length is
    /// `round(T * factor)`, at least 1.
    pub fn resample_width(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = ops::ResampleFactor::from_f64(factor)?;
        let t = self.value(input).shape()[0];
        self.resample(input, factor.output_len(t))
    }

    pub fn log_softmax(&mut self, input: Var) -> Var {
        let v = ops::log_softmax_forward(self.value(input));
        let rg = self.needs(&[input]);
        self.push(v, Op::LogSoftmax(input), rg)
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `input` (e.g. a CTC loss over log-probabilities).
    pub fn external_loss(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(NumericsError::shape(
                "external_loss",
                format!("gradient {:?} vs input {:?}", grad.shape(), self.value(input).shape()),
            ));
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |var: Var, contribution: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let shaped = |var: Var, data: Vec<f64>| Tensor::from_parts(self.value(var).shape().to_vec(), data);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, shaped(*a, g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect()));
                acc(*b, shaped(*b, g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, f) => acc(*a, shaped(*a, g.data().iter().map(|x| x * f).collect())),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, shaped(*a, vec![g.item(); n]));
            }
            Op::Relu(a) => {
                let d = g.data().iter().zip(self.value(*a).data()).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 });
                acc(*a, shaped(*a, d.collect()));
            }
            Op::Reshape(a) => acc(*a, shaped(*a, g.data().to_vec())),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, d) = ops::permute_data(g.data(), out.shape(), &inverse);
                acc(*a, shaped(*a, d));
            }
            Op::AddBias { input, bias, axis } => {
                let shape = out.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let count = shape[*axis];
                let mut db = vec![0.0; count];
                for (k, run) in g.data().chunks_exact(inner).enumerate() {
                    let d = &mut db[k % count];
                    for gv in run {
                        *d += gv;
                    }
                }
                acc(*input, g.clone());
                acc(*bias, shaped(*bias, db));
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let need_input = self.nodes[input.0].requires_grad;
                let (di, dk) =
                    ops::conv2d_backward(self.value(*input), self.value(*kernel), *stride, *padding, g, need_input);
                if let Some(di) = di {
                    acc(*input, di);
                }
                acc(*kernel, dk);
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, ops::maxpool2d_backward(self.value(*input).shape(), argmax, g));
            }
            Op::BiLstm { input, params, cache } => {
                let p = self.lstm_params(params);
                let need_input = self.nodes[input.0].requires_grad;
                let gr = ops::bilstm_backward(self.value(*input), &p, cache, g, need_input);
                if let Some(di) = gr.input {
                    acc(*input, di);
                }
                let [wf, wb] = gr.w_ih;
                let [hf, hb] = gr.w_hh;
                let [bf, bb] = gr.bias;
                for (var, t) in params.iter().zip([wf, hf, bf, wb, hb, bb]) {
                    acc(*var, t);
                }
            }
            Op::Resample(a) => acc(*a, ops::resample_backward(self.value(*a).shape(), g)),
            Op::LogSoftmax(a) => acc(*a, ops::log_softmax_backward(out, g)),
            Op::External { input, grad } => {
                let s = g.item();
                acc(*input, shaped(*input, grad.data().iter().map(|x| x * s).collect()));
            }
        }
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, BnCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

/// Layer kinds. Node inputs refer to earlier nodes by index.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        channels: usize,
    },
    Conv2d {
        input: usize,
        out: usize,
        kernel: usize,
        bias: bool,
        bias_init: f32,
    },
    BatchNorm {
        input: usize,
    },
    Relu {
        input: usize,
    },
    /// Logistic function on the listed channels only.
    Sigmoid {
        input: usize,
        channels: Vec<usize>,
    },
    MaxPool {
        input: usize,
    },
    /// Bilinear resize of `input` to the spatial size of `reference`.
    ResizeLike {
        input: usize,
        reference: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input { .. } => vec![],
            Op::Conv2d { input, .. }
            | Op::BatchNorm { input }
            | Op::Relu { input }
            | Op::Sigmoid { input, .. }
            | Op::MaxPool { input } => vec![*input],
            Op::ResizeLike { input, reference } => vec![*input, *reference],
            Op::Concat { inputs } => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

/// Layer graph built in topological order; the last node is the output
/// unless [`NetSpec::set_output`] says otherwise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetSpec {
    pub nodes: Vec<Node>,
    pub output: usize,
}

impl NetSpec {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, op: Op, channels: usize) -> usize {
        for i in op.inputs() {
            assert!(i < self.nodes.len(), "node {name} refers to later node {i}");
        }
        self.nodes.push(Node { name, op, channels });
        self.output = self.nodes.len() - 1;
        self.output
    }

    pub fn channels(&self, id: usize) -> usize {
        self.nodes[id].channels
    }

    pub fn input(&mut self, channels: usize) -> usize {
        self.push("input".into(), Op::Input { channels }, channels)
    }

    pub fn conv(&mut self, name: &str, input: usize, out: usize, kernel: usize, bias: bool) -> usize {
        self.conv_with_bias(name, input, out, kernel, bias, 0.0)
    }

    pub fn conv_with_bias(
        &mut self,
        name: &str,
        input: usize,
        out: usize,
        kernel: usize,
        bias: bool,
        bias_init: f32,
    ) -> usize {
        assert!(kernel % 2 == 1, "only odd kernels are supported");
        let op = Op::Conv2d {
            input,
            out,
            kernel,
            bias,
            bias_init,
        };
        self.push(name.into(), op, out)
    }

    pub fn batchnorm(&mut self, name: &str, input: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), Op::BatchNorm { input }, c)
    }

    pub fn relu(&mut self, input: usize) -> usize {
        let c = self.channels(input);
        let name = format!("relu{}", self.nodes.len());
        self.push(name, Op::Relu { input }, c)
    }

    /// 3x3 conv without bias, batch norm and ReLU.
    pub fn conv_bn_relu(&mut self, name: &str, input: usize, out: usize) -> usize {
        let c = self.conv(&format!("{name}.conv"), input, out, 3, false);
        let b = self.batchnorm(&format!("{name}.bn"), c);
        self.relu(b)
    }

    pub fn sigmoid(&mut self, input: usize, channels: Vec<usize>) -> usize {
        let c = self.channels(input);
        assert!(channels.iter().all(|&ch| ch < c));
        let name = format!("sigmoid{}", self.nodes.len());
        self.push(name, Op::Sigmoid { input, channels }, c)
    }

    pub fn maxpool(&mut self, input: usize) -> usize {
        let c = self.channels(input);
        let name = format!("pool{}", self.nodes.len());
        self.push(name, Op::MaxPool { input }, c)
    }

    pub fn resize_like(&mut self, input: usize, reference: usize) -> usize {
        let c = self.channels(input);
        let name = format!("resize{}", self.nodes.len());
        self.push(name, Op::ResizeLike { input, reference }, c)
    }

    pub fn concat(&mut self, inputs: &[usize]) -> usize {
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        let name = format!("concat{}", self.nodes.len());
        self.push(name, Op::Concat { inputs: inputs.to_vec() }, c)
    }

    pub fn set_output(&mut self, id: usize) {
        self.output = id;
    }

    /// Static shape check for an input of `c x h x w`; returns the output
    /// `(channels, h, w)`.
    pub fn infer_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let d = match &node.op {
                Op::Input { channels } => {
                    if *channels != c {
                        return Err(Error::ShapeMismatch(format!("network expects {channels} input channels, got {c}")));
                    }
                    (c, h, w)
                }
                Op::Conv2d { input, out, .. } => (*out, dims[*input].1, dims[*input].2),
                Op::MaxPool { input } => {
                    let (ci, hi, wi) = dims[*input];
                    (ci, ops::pool_out(hi), ops::pool_out(wi))
                }
                Op::ResizeLike { input, reference } => (dims[*input].0, dims[*reference].1, dims[*reference].2),
                Op::Concat { inputs } => {
                    let (_, h0, w0) = dims[inputs[0]];
                    if inputs.iter().any(|&i| (dims[i].1, dims[i].2) != (h0, w0)) {
                        return Err(Error::ShapeMismatch(format!("concat {} has mismatched spatial sizes", node.name)));
                    }
                    (inputs.iter().map(|&i| dims[i].0).sum(), h0, w0)
                }
                Op::BatchNorm { input } | Op::Relu { input } | Op::Sigmoid { input, .. } => dims[*input],
            };
            dims.push(d);
        }
        Ok(dims[self.output])
    }
}

#[derive(Debug, Clone)]
struct ParamSlot {
    name: String,
    kind: ParamKind,
    node: usize,
}

/// Parameters of a [`NetSpec`]. Index order of `params` is the order
/// parameters appear in the graph.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: NetSpec,
    pub params: Vec<Tensor<T>>,
    slots: Vec<ParamSlot>,
    /// First parameter index of each node.
    node_param: Vec<usize>,
}

/// Node outputs and saved state of a forward pass.
pub struct ForwardCache<T> {
    pub outputs: Vec<Tensor<T>>,
    bn: Vec<Option<BnCache<T>>>,
    pool: Vec<Option<Vec<u32>>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self, id: usize) -> &Tensor<T> {
        &self.outputs[id]
    }
}

/// Gradients aligned with [`Network::params`]; running statistics get `None`.
pub struct Grads<T> {
    pub params: Vec<Option<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Real> Network<T> {
    /// He-normal conv kernels, biases at their configured constant (zero
    /// unless set), batch norm gamma 1 / beta 0, running stats 0 / 1. Each
    /// node draws from its own stream of `seed`, so networks that differ
    /// only in one layer's shape share the initial values of every other
    /// layer.
    pub fn new(spec: NetSpec, seed: u64) -> Self {
        let mut params = Vec::new();
        let mut slots = Vec::new();
        let mut node_param = Vec::with_capacity(spec.nodes.len());
        for (id, node) in spec.nodes.iter().enumerate() {
            node_param.push(params.len());
            let mut add = |kind: ParamKind, t: Tensor<T>| {
                slots.push(ParamSlot {
                    name: format!("{}.{}", node.name, kind.suffix()),
                    kind,
                    node: id,
                });
                params.push(t);
            };
            match &node.op {
                Op::Conv2d {
                    input,
                    out,
                    kernel,
                    bias,
                    bias_init,
                } => {
                    let cin = spec.channels(*input);
                    let fan_in = (cin * kernel * kernel) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    let shape = [*out, cin, *kernel, *kernel];
                    let n: usize = shape.iter().product();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(id as u64);
                    let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
                    add(ParamKind::Weight, Tensor::from_vec(&shape, data));
                    if *bias {
                        add(ParamKind::Bias, Tensor::full(&[*out], T::from_f32(*bias_init)));
                    }
                }
                Op::BatchNorm { .. } => {
                    let c = node.channels;
                    add(ParamKind::Gamma, Tensor::full(&[c], T::ONE));
                    add(ParamKind::Beta, Tensor::zeros(&[c]));
                    add(ParamKind::RunningMean, Tensor::zeros(&[c]));
                    add(ParamKind::RunningVar, Tensor::full(&[c], T::ONE));
                }
                _ => {}
            }
        }
        Network {
            spec,
            params,
            slots,
            node_param,
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn param_kind(&self, i: usize) -> ParamKind {
        self.slots[i].kind
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .zip(&self.slots)
            .filter(|(_, s)| s.kind.learnable())
            .map(|(p, _)| p.len())
            .sum()
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            slots: self
                .slots
                .iter()
                .map(|s| ParamSlot {
                    name: s.name.clone(),
                    kind: s.kind,
                    node: s.node,
                })
                .collect(),
            node_param: self.node_param.clone(),
        }
    }

    fn p(&self, node: usize, k: usize) -> &Tensor<T> {
        &self.params[self.node_param[node] + k]
    }

    fn has_bias(&self, node: usize) -> bool {
        matches!(self.spec.nodes[node].op, Op::Conv2d { bias: true, .. })
    }

    fn eval_node(
        &self,
        id: usize,
        outputs: &[Tensor<T>],
        train: bool,
        bn: &mut Option<BnCache<T>>,
        pool: &mut Option<Vec<u32>>,
        input: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let node = &self.spec.nodes[id];
        let y = match &node.op {
            Op::Input { channels } => {
                if input.shape.len() != 4 || input.shape[1] != *channels {
                    return Err(Error::ShapeMismatch(format!(
                        "network expects {channels} input channels, got {:?}",
                        input.shape
                    )));
                }
                input.clone()
            }
            Op::Conv2d { input: i, .. } => {
                let b = self.has_bias(id).then(|| self.p(id, 1));
                ops::conv2d_forward(&outputs[*i], self.p(id, 0), b)?
            }
            Op::BatchNorm { input: i } => {
                let (g, b) = (self.p(id, 0), self.p(id, 1));
                if train {
                    let (y, cache) = ops::batchnorm_train_forward(&outputs[*i], g, b, BN_EPS);
                    *bn = Some(cache);
                    y
                } else {
                    ops::batchnorm_eval_forward(&outputs[*i], g, b, self.p(id, 2), self.p(id, 3), BN_EPS)
                }
            }
            Op::Relu { input: i } => ops::relu_forward(&outputs[*i]),
            Op::Sigmoid { input: i, channels } => ops::sigmoid_forward(&outputs[*i], channels)?,
            Op::MaxPool { input: i } => {
                let (y, arg) = ops::maxpool_forward(&outputs[*i]);
                *pool = Some(arg);
                y
            }
            Op::ResizeLike { input: i, reference } => {
                let (_, _, h, w) = outputs[*reference].dims4();
                ops::resize_bilinear_forward(&outputs[*i], h, w)
            }
            Op::Concat { inputs } => {
                let xs: Vec<&Tensor<T>> = inputs.iter().map(|&i| &outputs[i]).collect();
                ops::concat_forward(&xs)?
            }
        };
        ops::check_finite(&y, &node.name)?;
        Ok(y)
    }

    /// Forward pass keeping every node output. `train` selects batch
    /// statistics in batch norm.
    pub fn forward(&self, input: &Tensor<T>, train: bool) -> Result<ForwardCache<T>> {
        let n = self.spec.nodes.len();
        let mut outputs = Vec::with_capacity(n);
        let mut bn = Vec::with_capacity(n);
        let mut pool = Vec::with_capacity(n);
        for id in 0..n {
            let mut b = None;
            let mut p = None;
            let y = self.eval_node(id, &outputs, train, &mut b, &mut p, input)?;
            outputs.push(y);
            bn.push(b);
            pool.push(p);
        }
        Ok(ForwardCache { outputs, bn, pool })
    }

    /// Eval-mode forward pass that frees intermediate outputs after their
    /// last use.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.spec.nodes.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (id, node) in self.spec.nodes.iter().enumerate() {
            for i in node.op.inputs() {
                last_use[i] = id;
            }
        }
        last_use[self.spec.output] = n;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        for id in 0..n {
            let y = self.eval_node(id, &outputs, false, &mut None, &mut None, input)?;
            outputs.push(y);
            for i in self.spec.nodes[id].op.inputs() {
                if last_use[i] == id {
                    outputs[i] = Tensor {
                        shape: vec![],
                        data: vec![],
                    };
                }
            }
        }
        Ok(outputs.swap_remove(self.spec.output))
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates: `r <- m r + (1 - m) batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (id, c) in cache.bn.iter().enumerate() {
            let Some(c) = c else { continue };
            let base = self.node_param[id];
            for ch in 0..c.mean.len() {
                let rm = &mut self.params[base + 2].data[ch];
                *rm = T::from_f64(BN_MOMENTUM * rm.to_f64() + (1.0 - BN_MOMENTUM) * c.mean[ch]);
                let rv = &mut self.params[base + 3].data[ch];
                *rv = T::from_f64(BN_MOMENTUM * rv.to_f64() + (1.0 - BN_MOMENTUM) * c.var[ch]);
            }
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output node) through a
    /// cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Tensor<T>, want_input_grad: bool) -> Result<Grads<T>> {
        let n = self.spec.nodes.len();
        if d_out.shape != cache.outputs[self.spec.output].shape {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                d_out.shape, cache.outputs[self.spec.output].shape
            )));
        }
        // which nodes need a gradient: anything on a path from a parameter
        // (or the input, if requested) to the output
        let mut needs = vec![false; n];
        for (id, node) in self.spec.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Input { .. } => want_input_grad,
                Op::Conv2d { .. } | Op::BatchNorm { .. } => true,
                op => op.inputs().iter().any(|&i| needs[i]),
            };
        }
        let mut dys: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        dys[self.spec.output] = Some(d_out.clone());
        let mut grads: Vec<Option<Tensor<T>>> = self.params.iter().map(|_| None).collect();
        let accumulate = |dys: &mut Vec<Option<Tensor<T>>>, i: usize, g: Tensor<T>| match &mut dys[i] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        };
        for id in (0..n).rev() {
            let Some(dy) = dys[id].take() else { continue };
            let node = &self.spec.nodes[id];
            let base = self.node_param[id];
            match &node.op {
                Op::Input { .. } => {
                    dys[id] = Some(dy);
                }
                Op::Conv2d { input: i, .. } => {
                    let g = ops::conv2d_backward(&cache.outputs[*i], self.p(id, 0), &dy, needs[*i])?;
                    grads[base] = Some(g.dw);
                    if self.has_bias(id) {
                        grads[base + 1] = Some(g.db);
                    }
                    if let Some(dx) = g.dx {
                        accumulate(&mut dys, *i, dx);
                    }
                }
                Op::BatchNorm { input: i } => {
                    let bn = cache.bn[id]
                        .as_ref()
                        .ok_or_else(|| Error::ShapeMismatch("backward through an eval-mode batch norm".into()))?;
                    let (dx, dg, db) = ops::batchnorm_backward(bn, self.p(id, 0), &dy);
                    grads[base] = Some(dg);
                    grads[base + 1] = Some(db);
                    if needs[*i] {
                        accumulate(&mut dys, *i, dx);
                    }
                }
                Op::Relu { input: i } => {
                    if needs[*i] {
                        accumulate(&mut dys, *i, ops::relu_backward(&cache.outputs[id], &dy));
                    }
                }
                Op::Sigmoid { input: i, channels } => {
                    if needs[*i] {
                        accumulate(&mut dys, *i, ops::sigmoid_backward(&cache.outputs[id], &dy, channels));
                    }
                }
                Op::MaxPool { input: i } => {
                    if needs[*i] {
                        let arg = cache.pool[id].as_ref().expect("pool indices cached");
                        let dx = ops::maxpool_backward(&cache.outputs[*i].shape, arg, &dy);
                        accumulate(&mut dys, *i, dx);
                    }
                }
                Op::ResizeLike { input: i, .. } => {
                    if needs[*i] {
                        let dx = ops::resize_bilinear_backward(&cache.outputs[*i].shape, &dy);
                        accumulate(&mut dys, *i, dx);
                    }
                }
                Op::Concat { inputs } => {
                    let chans: Vec<usize> = inputs.iter().map(|&i| cache.outputs[i].shape[1]).collect();
                    for (&i, dx) in inputs.iter().zip(ops::concat_backward(&chans, &dy)) {
                        if needs[i] {
                            accumulate(&mut dys, i, dx);
                        }
                    }
                }
            }
        }
        let input = if want_input_grad { dys[0].take() } else { None };
        Ok(Grads { params: grads, input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetSpec {
        let mut s = NetSpec::new();
        let x = s.input(2);
        let a = s.conv_bn_relu("a", x, 4);
        let p = s.maxpool(a);
        let b = s.conv_bn_relu("b", p, 3);
        let u = s.resize_like(b, a);
        let c = s.concat(&[a, u]);
        let o = s.conv_with_bias("head", c, 2, 1, true, -4.595);
        s.sigmoid(o, vec![0]);
        s
    }

    #[test]
    fn init_streams_are_per_node() {
        let wide = {
            let mut s = NetSpec::new();
            let x = s.input(3);
            let a = s.conv_bn_relu("a", x, 4);
            let p = s.maxpool(a);
            let b = s.conv_bn_relu("b", p, 3);
            let u = s.resize_like(b, a);
            let c = s.concat(&[a, u]);
            let o = s.conv_with_bias("head", c, 2, 1, true, -4.595);
            s.sigmoid(o, vec![0]);
            s
        };
        let n1 = Network::<f32>::new(small_spec(), 5);
        let n2 = Network::<f32>::new(wide, 5);
        for (name, (p, q)) in n1.param_names().zip(n1.params.iter().zip(&n2.params)) {
            if name == "a.conv.weight" {
                assert_ne!(p.shape, q.shape);
            } else {
                assert_eq!(p, q, "{name}");
            }
        }
    }

    #[test]
    fn shape_inference() {
        let s = small_spec();
        assert_eq!(s.infer_shape(2, 9, 7).unwrap(), (2, 9, 7));
        assert!(s.infer_shape(3, 9, 7).is_err());
    }

    #[test]
    fn initialization_conventions() {
        let net: Network<f32> = Network::new(small_spec(), 0);
        let names: Vec<&str> = net.param_names().collect();
        assert!(names.contains(&"a.conv.weight"));
        assert!(names.contains(&"a.bn.running_var"));
        let hb = net.param_index("head.bias").unwrap();
        assert!(net.params[hb].data.iter().all(|&v| v == -4.595));
        let g = net.param_index("b.bn.gamma").unwrap();
        assert!(net.params[g].data.iter().all(|&v| v == 1.0));
        // He-normal: variance 2 / fan_in
        let mut s = NetSpec::new();
        let x = s.input(16);
        s.conv("c", x, 64, 3, false);
        let big: Network<f64> = Network::new(s, 3);
        let w = &big.params[0];
        let var = w.sum_sq() / w.len() as f64;
        assert!((var - 2.0 / 144.0).abs() < 0.1 * 2.0 / 144.0);
    }

    #[test]
    fn infer_matches_eval_forward() {
        let net: Network<f32> = Network::new(small_spec(), 1);
        let x = Tensor::from_vec(&[1, 2, 9, 7], (0..126).map(|i| (i as f32 * 0.37).sin()).collect());
        let a = net.forward(&x, false).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a.outputs[net.spec.output], b);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut net: Network<f64> = Network::new(small_spec(), 2);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let cache = net.forward(&x, true).unwrap();
        net.update_running_stats(&cache);
        let rv = net.param_index("a.bn.running_var").unwrap();
        // zero input: batch variance 0 -> 0.99
        assert!(net.params[rv].data.iter().all(|&v| (v - 0.99).abs() < 1e-12));
    }
}

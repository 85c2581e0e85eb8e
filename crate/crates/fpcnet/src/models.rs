//! Network graphs: declarative layer DAGs, the three reference
//! architectures, parameter/FLOP accounting, execution, and model files.
//!
//! A [`NetworkSpec`] is a list of nodes in topological order; each node has
//! one input (the network input or an earlier node) except channel concat,
//! which joins two branches. Prediction heads are listed in `outputs` and
//! their tensors are flattened, in order, into the prediction vector.
//!
//! Parameter counting reports weights only, excluding biases, matching how
//! the architectures are usually tabulated (fpcnet-dh counts 288 as
//! 48 + 192 + 48). Layers still carry trainable biases at runtime. FLOPs
//! count one multiply-add per weight application per output position;
//! pooling and activations count zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool_forward, brelu_backward, brelu_forward, concat_backward, concat_channels,
    conv2d_backward, conv2d_forward, max_pool_backward, max_pool_forward, maxout_backward,
    maxout_forward, pointwise_conv_backward, pointwise_conv_forward, relu_backward, relu_forward,
    LayerKind, LayerSpec,
};
use crate::nn::{avg_pool_backward, KernelWeights};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeInput {
    /// The network input tensor.
    Source,
    /// Output of an earlier node.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub layer: LayerSpec,
    pub inputs: Vec<NodeInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: (usize, usize, usize),
    pub nodes: Vec<Node>,
    /// Prediction heads, one node index each.
    pub outputs: Vec<usize>,
}

impl NetworkSpec {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Check topology and shape chaining; returns per-node output shapes.
    pub fn node_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let expected_inputs = if node.layer.kind == LayerKind::ConcatChannels {
                node.inputs.len().max(1)
            } else {
                1
            };
            if node.inputs.len() != expected_inputs {
                return Err(Error::Layer(format!(
                    "node {} expects {} input(s), has {}",
                    node.id,
                    expected_inputs,
                    node.inputs.len()
                )));
            }
            let mut in_shapes = Vec::with_capacity(node.inputs.len());
            for input in &node.inputs {
                match input {
                    NodeInput::Source => in_shapes.push(self.input_shape),
                    NodeInput::Node(j) => {
                        if *j >= i {
                            return Err(Error::Layer(format!(
                                "node {} references a later node {j}",
                                node.id
                            )));
                        }
                        in_shapes.push(shapes[*j]);
                    }
                }
            }
            let out = if node.layer.kind == LayerKind::ConcatChannels {
                let (_, h, w) = in_shapes[0];
                let mut total = 0;
                for s in &in_shapes {
                    if s.1 != h {
                        return Err(Error::dim("concat height", h, s.1));
                    }
                    if s.2 != w {
                        return Err(Error::dim("concat width", w, s.2));
                    }
                    total += s.0;
                }
                if total != node.layer.in_channels {
                    return Err(Error::dim("concat channels", node.layer.in_channels, total));
                }
                (total, h, w)
            } else {
                node.layer.output_shape(in_shapes[0])?
            };
            shapes.push(out);
        }
        if self.outputs.is_empty() {
            return Err(Error::Empty("network outputs"));
        }
        for &o in &self.outputs {
            if o >= self.nodes.len() {
                return Err(Error::Layer(format!("output index {o} out of range")));
            }
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.node_shapes().map(|_| ())
    }

    /// (node id, output shape) for every node, in execution order.
    pub fn shape_trace(&self) -> Result<Vec<(String, (usize, usize, usize))>> {
        let shapes = self.node_shapes()?;
        Ok(self
            .nodes
            .iter()
            .zip(shapes)
            .map(|(n, s)| (n.id.clone(), s))
            .collect())
    }

    /// Total prediction vector length across heads.
    pub fn output_len(&self) -> Result<usize> {
        let shapes = self.node_shapes()?;
        Ok(self
            .outputs
            .iter()
            .map(|&o| shapes[o].0 * shapes[o].1 * shapes[o].2)
            .sum())
    }

    /// Walk from `node` back to the network input following single inputs.
    /// Errors if the walk crosses a multi-input node.
    pub fn path_to_source(&self, node: usize) -> Result<Vec<usize>> {
        let mut path = vec![node];
        let mut current = node;
        loop {
            let n = &self.nodes[current];
            if n.inputs.len() != 1 {
                return Err(Error::Layer(format!(
                    "node {} has {} inputs; cannot trace a unique path to the source",
                    n.id,
                    n.inputs.len()
                )));
            }
            match n.inputs[0] {
                NodeInput::Source => break,
                NodeInput::Node(j) => {
                    path.push(j);
                    current = j;
                }
            }
        }
        path.reverse();
        Ok(path)
    }
}

/// FPCNet-CC: two parallel 1×1 conv branches with differently sized max
/// pools, concatenated, then three per-channel prediction heads.
pub fn build_fpcnet_cc() -> NetworkSpec {
    build_fpcnet_cc_scaled(1).expect("divisor 1 always valid")
}

/// FPCNet-CC with all conv widths divided by `divisor` (desk-scale runs).
pub fn build_fpcnet_cc_scaled(divisor: usize) -> Result<NetworkSpec> {
    if divisor == 0 || 240 % divisor != 0 || 80 % divisor != 0 {
        return Err(Error::Config(format!(
            "width divisor {divisor} must divide 240 and 80"
        )));
    }
    let c1 = 240 / divisor;
    let c2 = 80 / divisor;
    let mut nodes = Vec::new();
    let mut push = |n: Node| -> usize {
        nodes.push(n);
        nodes.len() - 1
    };
    let conv1_1 = push(Node {
        id: "conv1_1".into(),
        layer: LayerSpec::pointwise(3, c1),
        inputs: vec![NodeInput::Source],
    });
    let relu1_1 = push(Node {
        id: "relu1_1".into(),
        layer: LayerSpec::relu(c1),
        inputs: vec![NodeInput::Node(conv1_1)],
    });
    let pool1_1 = push(Node {
        id: "maxpool1_1".into(),
        layer: LayerSpec::max_pool(c1, 8, 0, 8),
        inputs: vec![NodeInput::Node(relu1_1)],
    });
    let conv1_2 = push(Node {
        id: "conv1_2".into(),
        layer: LayerSpec::pointwise(3, c1),
        inputs: vec![NodeInput::Source],
    });
    let relu1_2 = push(Node {
        id: "relu1_2".into(),
        layer: LayerSpec::relu(c1),
        inputs: vec![NodeInput::Node(conv1_2)],
    });
    let pool1_2 = push(Node {
        id: "maxpool1_2".into(),
        layer: LayerSpec::max_pool(c1, 10, 1, 8),
        inputs: vec![NodeInput::Node(relu1_2)],
    });
    let concat = push(Node {
        id: "concat1".into(),
        layer: LayerSpec::concat(2 * c1),
        inputs: vec![NodeInput::Node(pool1_1), NodeInput::Node(pool1_2)],
    });
    let mut outputs = Vec::new();
    for ch in ["r", "g", "b"] {
        let conv2 = push(Node {
            id: format!("conv2_{ch}"),
            layer: LayerSpec::pointwise(2 * c1, c2),
            inputs: vec![NodeInput::Node(concat)],
        });
        let relu2 = push(Node {
            id: format!("relu2_{ch}"),
            layer: LayerSpec::relu(c2),
            inputs: vec![NodeInput::Node(conv2)],
        });
        let pool2 = push(Node {
            id: format!("maxpool2_{ch}"),
            layer: LayerSpec::max_pool(c2, 4, 0, 4),
            inputs: vec![NodeInput::Node(relu2)],
        });
        let conv3 = push(Node {
            id: format!("conv3_{ch}"),
            layer: LayerSpec::pointwise(c2, 1),
            inputs: vec![NodeInput::Node(pool2)],
        });
        outputs.push(conv3);
    }
    Ok(NetworkSpec {
        name: if divisor == 1 {
            "fpcnet-cc".into()
        } else {
            format!("fpcnet-cc-w{divisor}")
        },
        input_shape: (3, 32, 32),
        nodes,
        outputs,
    })
}

/// BaseNet: parallel 1×1 and 3×3 convolutions, concatenated and pooled,
/// with three per-channel heads using 4×4 convs.
pub fn build_basenet() -> NetworkSpec {
    let mut nodes = Vec::new();
    let mut push = |n: Node| -> usize {
        nodes.push(n);
        nodes.len() - 1
    };
    let conv1_1 = push(Node {
        id: "conv1_1x1".into(),
        layer: LayerSpec::pointwise(3, 240),
        inputs: vec![NodeInput::Source],
    });
    let relu1_1 = push(Node {
        id: "relu1_1x1".into(),
        layer: LayerSpec::relu(240),
        inputs: vec![NodeInput::Node(conv1_1)],
    });
    let conv1_3 = push(Node {
        id: "conv1_3x3".into(),
        layer: LayerSpec::conv2d(3, 240, (3, 3), 1, 1),
        inputs: vec![NodeInput::Source],
    });
    let relu1_3 = push(Node {
        id: "relu1_3x3".into(),
        layer: LayerSpec::relu(240),
        inputs: vec![NodeInput::Node(conv1_3)],
    });
    let concat = push(Node {
        id: "concat1".into(),
        layer: LayerSpec::concat(480),
        inputs: vec![NodeInput::Node(relu1_1), NodeInput::Node(relu1_3)],
    });
    let pool1 = push(Node {
        id: "maxpool1".into(),
        layer: LayerSpec::max_pool(480, 8, 0, 8),
        inputs: vec![NodeInput::Node(concat)],
    });
    let mut outputs = Vec::new();
    for ch in ["r", "g", "b"] {
        let conv2 = push(Node {
            id: format!("conv2_{ch}"),
            layer: LayerSpec::conv2d(480, 40, (4, 4), 0, 4),
            inputs: vec![NodeInput::Node(pool1)],
        });
        let relu2 = push(Node {
            id: format!("relu2_{ch}"),
            layer: LayerSpec::relu(40),
            inputs: vec![NodeInput::Node(conv2)],
        });
        let conv3 = push(Node {
            id: format!("conv3_{ch}"),
            layer: LayerSpec::pointwise(40, 1),
            inputs: vec![NodeInput::Node(relu2)],
        });
        outputs.push(conv3);
    }
    NetworkSpec {
        name: "basenet".into(),
        input_shape: (3, 32, 32),
        nodes,
        outputs,
    }
}

/// FPCNet-DH: 1×1 conv, maxout over channel groups of 4, two max pools
/// around a 1×1 conv, and a bounded-ReLU scalar transmission output.
pub fn build_fpcnet_dh() -> NetworkSpec {
    let mut nodes = Vec::new();
    let mut push = |n: Node| -> usize {
        nodes.push(n);
        nodes.len() - 1
    };
    let conv1 = push(Node {
        id: "conv1".into(),
        layer: LayerSpec::pointwise(3, 16),
        inputs: vec![NodeInput::Source],
    });
    let maxout = push(Node {
        id: "maxout".into(),
        layer: LayerSpec::maxout(16, 4),
        inputs: vec![NodeInput::Node(conv1)],
    });
    let pool1 = push(Node {
        id: "maxpool1".into(),
        layer: LayerSpec::max_pool(4, 2, 0, 2),
        inputs: vec![NodeInput::Node(maxout)],
    });
    let conv2 = push(Node {
        id: "conv2".into(),
        layer: LayerSpec::pointwise(4, 48),
        inputs: vec![NodeInput::Node(pool1)],
    });
    let pool2 = push(Node {
        id: "maxpool2".into(),
        layer: LayerSpec::max_pool(48, 8, 0, 8),
        inputs: vec![NodeInput::Node(conv2)],
    });
    let conv3 = push(Node {
        id: "conv3".into(),
        layer: LayerSpec::pointwise(48, 1),
        inputs: vec![NodeInput::Node(pool2)],
    });
    let brelu = push(Node {
        id: "brelu".into(),
        layer: LayerSpec::brelu(1),
        inputs: vec![NodeInput::Node(conv3)],
    });
    NetworkSpec {
        name: "fpcnet-dh".into(),
        input_shape: (3, 16, 16),
        nodes,
        outputs: vec![brelu],
    }
}

/// Weights-only parameter count (biases excluded).
pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.nodes
        .iter()
        .filter(|n| n.layer.has_weights())
        .map(|n| {
            n.layer.in_channels * n.layer.out_channels * n.layer.kernel.0 * n.layer.kernel.1
        })
        .sum()
}

/// Multiply-adds: one per weight application per output position.
pub fn count_flops(spec: &NetworkSpec) -> Result<usize> {
    let shapes = spec.node_shapes()?;
    Ok(spec
        .nodes
        .iter()
        .zip(&shapes)
        .filter(|(n, _)| n.layer.has_weights())
        .map(|(n, (_, oh, ow))| {
            n.layer.in_channels * n.layer.out_channels * n.layer.kernel.0 * n.layer.kernel.1
                * oh
                * ow
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Symmetric uniform in ±1/√(fan-in); biases zero.
    UniformFanIn,
}

impl InitScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitScheme::UniformFanIn => "uniform-fan-in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitMeta {
    pub scheme: String,
    pub seed: u64,
}

/// Weights for every parametric node of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    /// Aligned with `NetworkSpec::nodes`; None for non-parametric layers.
    pub layers: Vec<Option<KernelWeights<S>>>,
    pub init: InitMeta,
}

impl<S: Scalar> ParamStore<S> {
    pub fn layer(&self, idx: usize) -> Option<&KernelWeights<S>> {
        self.layers.get(idx).and_then(|l| l.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(KernelWeights::all_finite)
    }

    /// Total scalar parameter count including biases (optimizer-facing).
    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|k| k.weights.len() + k.bias.len())
            .sum()
    }
}

/// Seeded initialization; each layer draws from its own (seed, node) stream
/// so adding or removing layers elsewhere does not reshuffle weights.
pub fn init_params<S: Scalar>(
    spec: &NetworkSpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<ParamStore<S>> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        if !node.layer.has_weights() {
            layers.push(None);
            continue;
        }
        let l = &node.layer;
        let fan_in = l.in_channels * l.kernel.0 * l.kernel.1;
        let scale = match scheme {
            InitScheme::UniformFanIn => 1.0 / (fan_in as f64).sqrt(),
        };
        let mut r = rng::stream2(seed, i as u64, 0);
        let weights = (0..l.out_channels * fan_in)
            .map(|_| rng::uniform_symmetric(&mut r, scale))
            .collect();
        layers.push(Some(KernelWeights::new(
            l.out_channels,
            l.in_channels,
            l.kernel.0,
            l.kernel.1,
            weights,
            vec![S::zero(); l.out_channels],
        )?));
    }
    Ok(ParamStore {
        layers,
        init: InitMeta {
            scheme: scheme.as_str().into(),
            seed,
        },
    })
}

/// Everything retained by a forward pass that backward needs.
pub struct ForwardTrace<S> {
    pub input: Tensor<S>,
    pub node_outputs: Vec<Tensor<S>>,
    /// Per node: max-pool argmax or maxout winners (empty otherwise).
    saved: Vec<Vec<usize>>,
    pub predictions: Vec<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn node_output(&self, idx: usize) -> &Tensor<S> {
        &self.node_outputs[idx]
    }
}

fn resolve<'a, S: Scalar>(
    input: &'a Tensor<S>,
    outs: &'a [Tensor<S>],
    r: &NodeInput,
) -> &'a Tensor<S> {
    match r {
        NodeInput::Source => input,
        NodeInput::Node(j) => &outs[*j],
    }
}

/// Run the network, keeping per-node outputs and routing state.
pub fn forward_trace<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    input: &Tensor<S>,
) -> Result<ForwardTrace<S>> {
    if input.shape() != spec.input_shape {
        return Err(Error::dim(
            "input elements",
            spec.input_shape.0 * spec.input_shape.1 * spec.input_shape.2,
            input.len(),
        ));
    }
    let mut outs: Vec<Tensor<S>> = Vec::with_capacity(spec.nodes.len());
    let mut saved: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let l = &node.layer;
        let (out, kept) = match l.kind {
            LayerKind::PointwiseConv => {
                let x = resolve(input, &outs, &node.inputs[0]);
                let w = params
                    .layer(i)
                    .ok_or_else(|| Error::Layer(format!("missing weights for {}", node.id)))?;
                (pointwise_conv_forward(x, w)?, Vec::new())
            }
            LayerKind::Conv2d => {
                let x = resolve(input, &outs, &node.inputs[0]);
                let w = params
                    .layer(i)
                    .ok_or_else(|| Error::Layer(format!("missing weights for {}", node.id)))?;
                (conv2d_forward(x, w, l.pad, l.stride)?, Vec::new())
            }
            LayerKind::MaxPool => {
                let x = resolve(input, &outs, &node.inputs[0]);
                let (out, argmax) = max_pool_forward(x, l.kernel, l.pad, l.stride)?;
                (out, argmax)
            }
            LayerKind::AvgPool => {
                let x = resolve(input, &outs, &node.inputs[0]);
                (avg_pool_forward(x, l.kernel, l.pad, l.stride)?, Vec::new())
            }
            LayerKind::Maxout => {
                let x = resolve(input, &outs, &node.inputs[0]);
                let (out, winners) = maxout_forward(x, l.maxout_group)?;
                (out, winners)
            }
            LayerKind::Relu => {
                let x = resolve(input, &outs, &node.inputs[0]);
                (relu_forward(x), Vec::new())
            }
            LayerKind::BRelu => {
                let x = resolve(input, &outs, &node.inputs[0]);
                (brelu_forward(x), Vec::new())
            }
            LayerKind::ConcatChannels => {
                let xs: Vec<&Tensor<S>> = node
                    .inputs
                    .iter()
                    .map(|r| resolve(input, &outs, r))
                    .collect();
                (concat_channels(&xs)?, Vec::new())
            }
        };
        outs.push(out);
        saved.push(kept);
    }
    let mut predictions = Vec::new();
    for &o in &spec.outputs {
        predictions.extend_from_slice(outs[o].data());
    }
    Ok(ForwardTrace {
        input: input.clone(),
        node_outputs: outs,
        saved,
        predictions,
    })
}

/// Run the network and return the flattened head predictions.
pub fn forward<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    input: &Tensor<S>,
) -> Result<Vec<S>> {
    Ok(forward_trace(spec, params, input)?.predictions)
}

/// Per-node weight/bias gradients, aligned with `NetworkSpec::nodes`.
pub type GradStore<S> = Vec<Option<KernelWeights<S>>>;

/// Backpropagate d(loss)/d(prediction) through a retained trace.
pub fn backward<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    trace: &ForwardTrace<S>,
    dpred: &[S],
) -> Result<GradStore<S>> {
    if dpred.len() != trace.predictions.len() {
        return Err(Error::dim(
            "prediction gradient length",
            trace.predictions.len(),
            dpred.len(),
        ));
    }
    let n = spec.nodes.len();
    let mut node_grads: Vec<Option<Tensor<S>>> = vec![None; n];
    // Seed head gradients.
    let mut offset = 0;
    for &o in &spec.outputs {
        let shape = trace.node_outputs[o].shape();
        let len = shape.0 * shape.1 * shape.2;
        let slice = &dpred[offset..offset + len];
        offset += len;
        let t = Tensor::new(shape.0, shape.1, shape.2, slice.to_vec())?;
        match &mut node_grads[o] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(t.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(t),
        }
    }

    let mut grads: GradStore<S> = vec![None; n];
    for i in (0..n).rev() {
        let Some(dy) = node_grads[i].take() else {
            continue;
        };
        let node = &spec.nodes[i];
        let l = &node.layer;
        let push_input_grad = |node_grads: &mut Vec<Option<Tensor<S>>>,
                                   input: &NodeInput,
                                   dx: Tensor<S>| {
            if let NodeInput::Node(j) = input {
                match &mut node_grads[*j] {
                    Some(g) => {
                        for (a, b) in g.data_mut().iter_mut().zip(dx.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(dx),
                }
            }
        };
        let need_dx = matches!(node.inputs[0], NodeInput::Node(_));
        match l.kind {
            LayerKind::PointwiseConv => {
                let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                let w = params.layer(i).expect("validated");
                let (dx, dw) = pointwise_conv_backward(x, w, &dy, need_dx);
                grads[i] = Some(dw);
                if let Some(dx) = dx {
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::Conv2d => {
                let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                let w = params.layer(i).expect("validated");
                let (dx, dw) = conv2d_backward(x, w, l.pad, l.stride, &dy, need_dx)?;
                grads[i] = Some(dw);
                if let Some(dx) = dx {
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::MaxPool => {
                if need_dx {
                    let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                    let dx = max_pool_backward(x.shape(), &trace.saved[i], &dy);
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::AvgPool => {
                if need_dx {
                    let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                    let dx = avg_pool_backward(x.shape(), l.kernel, l.pad, l.stride, &dy)?;
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::Maxout => {
                if need_dx {
                    let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                    let dx = maxout_backward(x.shape(), &trace.saved[i], &dy);
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::Relu => {
                if need_dx {
                    let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                    let dx = relu_backward(x, &dy);
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::BRelu => {
                if need_dx {
                    let x = resolve(&trace.input, &trace.node_outputs, &node.inputs[0]);
                    let dx = brelu_backward(x, &dy);
                    push_input_grad(&mut node_grads, &node.inputs[0], dx);
                }
            }
            LayerKind::ConcatChannels => {
                let counts: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|r| resolve(&trace.input, &trace.node_outputs, r).channels())
                    .collect();
                let parts = concat_backward(&counts, &dy);
                for (input, dx) in node.inputs.iter().zip(parts) {
                    push_input_grad(&mut node_grads, input, dx);
                }
            }
        }
    }
    Ok(grads)
}

// --- Model files -----------------------------------------------------------
//
// JSON with deterministic key order: {name, spec, layers: [{id, shape,
// weights, bias}]}. Weights are stored as decimal f64 (shortest round-trip
// representation), so save → load is bit-exact at double precision.

#[derive(Serialize, Deserialize)]
struct LayerFile {
    id: String,
    shape: [usize; 4],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    name: String,
    spec: NetworkSpec,
    layers: Vec<LayerFile>,
}

pub fn model_to_json<S: Scalar>(spec: &NetworkSpec, params: &ParamStore<S>) -> Result<String> {
    let mut layers = Vec::new();
    for (node, weights) in spec.nodes.iter().zip(&params.layers) {
        if let Some(w) = weights {
            layers.push(LayerFile {
                id: node.id.clone(),
                shape: [w.out_channels, w.in_channels, w.kh, w.kw],
                weights: w.weights.iter().map(|&v| v.to_f64()).collect(),
                bias: w.bias.iter().map(|&v| v.to_f64()).collect(),
            });
        }
    }
    let file = ModelFile {
        name: spec.name.clone(),
        spec: spec.clone(),
        layers,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn model_from_json<S: Scalar>(json: &str) -> Result<(NetworkSpec, ParamStore<S>)> {
    let file: ModelFile = serde_json::from_str(json)?;
    file.spec.validate()?;
    let mut layers: Vec<Option<KernelWeights<S>>> = vec![None; file.spec.nodes.len()];
    for layer in file.layers {
        let idx = file
            .spec
            .node_index(&layer.id)
            .ok_or_else(|| Error::Layer(format!("model file names unknown layer {}", layer.id)))?;
        let l = &file.spec.nodes[idx].layer;
        if !l.has_weights() {
            return Err(Error::Layer(format!(
                "model file carries weights for non-parametric layer {}",
                layer.id
            )));
        }
        let [o, i, kh, kw] = layer.shape;
        if (o, i, kh, kw) != (l.out_channels, l.in_channels, l.kernel.0, l.kernel.1) {
            return Err(Error::dim("stored kernel shape", l.out_channels, o));
        }
        layers[idx] = Some(KernelWeights::new(
            o,
            i,
            kh,
            kw,
            layer.weights.into_iter().map(S::from_f64).collect(),
            layer.bias.into_iter().map(S::from_f64).collect(),
        )?);
    }
    for (node, w) in file.spec.nodes.iter().zip(&layers) {
        if node.layer.has_weights() && w.is_none() {
            return Err(Error::Layer(format!(
                "model file is missing weights for layer {}",
                node.id
            )));
        }
    }
    let store = ParamStore {
        layers,
        init: InitMeta {
            scheme: "loaded".into(),
            seed: 0,
        },
    };
    Ok((file.spec, store))
}

pub fn save_model<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, model_to_json(spec, params)?)?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<(NetworkSpec, ParamStore<S>)> {
    let json = std::fs::read_to_string(path)?;
    model_from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_input(shape: (usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 0);
        let data = (0..shape.0 * shape.1 * shape.2)
            .map(|_| r.gen::<f64>())
            .collect();
        Tensor::new(shape.0, shape.1, shape.2, data).unwrap()
    }

    #[test]
    fn accounting_matches_hand_sums() {
        let cc = build_fpcnet_cc();
        assert_eq!(count_params(&cc), 116_880);
        assert_eq!(count_flops(&cc).unwrap(), 3_318_000);

        let base = build_basenet();
        assert_eq!(count_params(&base), 928_920);
        assert_eq!(count_flops(&base).unwrap(), 8_294_520);

        let dh = build_fpcnet_dh();
        assert_eq!(count_params(&dh), 288);
        assert_eq!(count_flops(&dh).unwrap(), 24_624);
    }

    #[test]
    fn empty_network_counts_zero() {
        let spec = NetworkSpec {
            name: "empty".into(),
            input_shape: (1, 1, 1),
            nodes: vec![],
            outputs: vec![],
        };
        assert_eq!(count_params(&spec), 0);
    }

    #[test]
    fn dh_shape_trace() {
        let dh = build_fpcnet_dh();
        let trace = dh.shape_trace().unwrap();
        let get = |id: &str| trace.iter().find(|(n, _)| n == id).unwrap().1;
        assert_eq!(get("conv1"), (16, 16, 16));
        assert_eq!(get("maxout"), (4, 16, 16));
        assert_eq!(get("maxpool1"), (4, 8, 8));
        assert_eq!(get("conv2"), (48, 8, 8));
        assert_eq!(get("maxpool2"), (48, 1, 1));
        assert_eq!(get("conv3"), (1, 1, 1));
        assert_eq!(get("brelu"), (1, 1, 1));
    }

    #[test]
    fn cc_forward_gives_three_finite_scalars() {
        let spec = build_fpcnet_cc();
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 3).unwrap();
        let input = random_input(spec.input_shape, 5);
        let out = forward(&spec, &params, &input).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_initialized_dh_outputs_zero() {
        let spec = build_fpcnet_dh();
        let mut params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 1).unwrap();
        for layer in params.layers.iter_mut().flatten() {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        let out = forward(&spec, &params, &random_input((3, 16, 16), 2)).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn dh_output_is_bounded() {
        let spec = build_fpcnet_dh();
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 9).unwrap();
        for seed in 0..10_000 {
            let input = random_input((3, 16, 16), 100 + seed);
            let out = forward(&spec, &params, &input).unwrap();
            assert!((0.0..=1.0).contains(&out[0]));
        }
    }

    #[test]
    fn model_json_round_trips_bit_exactly() {
        let spec = build_fpcnet_dh();
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 11).unwrap();
        let json = model_to_json(&spec, &params).unwrap();
        let (spec2, params2) = model_from_json::<f64>(&json).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params.layers, params2.layers);
        // And the re-serialization is byte-identical.
        assert_eq!(json, model_to_json(&spec2, &params2).unwrap());
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let spec = build_fpcnet_dh();
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 11).unwrap();
        let json = model_to_json(&spec, &params).unwrap();
        let broken = json.replace("\"shape\":[16,3,1,1]", "\"shape\":[16,4,1,1]");
        assert!(model_from_json::<f64>(&broken).is_err());
    }

    #[test]
    fn global_pool_probe_is_permutation_invariant() {
        // 1×1 conv followed by a full-image max pool: permuting input pixels
        // must not change the output at all.
        let nodes = vec![
            Node {
                id: "conv".into(),
                layer: LayerSpec::pointwise(3, 8),
                inputs: vec![NodeInput::Source],
            },
            Node {
                id: "pool".into(),
                layer: LayerSpec::max_pool(8, 8, 0, 8),
                inputs: vec![NodeInput::Node(0)],
            },
        ];
        let spec = NetworkSpec {
            name: "probe".into(),
            input_shape: (3, 8, 8),
            nodes,
            outputs: vec![1],
        };
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 21).unwrap();
        let input = random_input((3, 8, 8), 22);
        let base = forward(&spec, &params, &input).unwrap();
        for seed in 0..5 {
            let e = crate::ensemble::shuffle_image(&input, seed).unwrap();
            let permuted = forward(&spec, &params, &e.pixels).unwrap();
            assert_eq!(base, permuted);
        }
    }

    #[test]
    fn cc_forward_invariant_under_window_interior_permutations() {
        // Both first-level pools share the same 8-aligned window grid (the
        // 10×10/pad-1 windows fully contain the corresponding 8×8 windows),
        // so permuting pixels inside the 6×6 interior of each 8×8 block maps
        // every pooling window onto itself.
        let spec = build_fpcnet_cc_scaled(4).unwrap();
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, 31).unwrap();
        let input = random_input((3, 32, 32), 33);
        let mut permuted = input.clone();
        let mut r = rng::stream(40, 0);
        for by in 0..4 {
            for bx in 0..4 {
                let mut cells: Vec<(usize, usize)> = Vec::new();
                for dy in 1..7 {
                    for dx in 1..7 {
                        cells.push((by * 8 + dy, bx * 8 + dx));
                    }
                }
                let mut shuffled = cells.clone();
                use rand::seq::SliceRandom;
                shuffled.shuffle(&mut r);
                for (src, dst) in cells.iter().zip(&shuffled) {
                    for c in 0..3 {
                        *permuted.at_mut(c, dst.0, dst.1) = input.at(c, src.0, src.1);
                    }
                }
            }
        }
        let a = forward(&spec, &params, &input).unwrap();
        let b = forward(&spec, &params, &permuted).unwrap();
        assert_eq!(a, b);
    }
}

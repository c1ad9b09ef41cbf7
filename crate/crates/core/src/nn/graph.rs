use crate::error::{Error, Result};
use crate::nn::layers::{softmax_xent, Buffer, Layer, LayerKind, Mode, Param, ParamRole};
use crate::shift::ShiftParams;
use crate::tensor::{Element, Shape4, Tensor};

pub type NodeId = usize;

pub struct Node<T: Element> {
    pub name: String,
    /// `None` for the graph input.
    pub layer: Option<Box<dyn Layer<T>>>,
    pub inputs: Vec<NodeId>,
}

impl<T: Element> Node<T> {
    pub fn kind(&self) -> Option<LayerKind> {
        self.layer.as_ref().map(|l| l.kind())
    }
}

/// Incrementally assembles a [`Graph`]; nodes must be added after their inputs.
pub struct GraphBuilder<T: Element> {
    nodes: Vec<Node<T>>,
    /// Per-example shape of every node, batch dimension set to 1.
    shapes: Vec<Shape4>,
}

impl<T: Element> GraphBuilder<T> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                layer: None,
                inputs: vec![],
            }],
            shapes: vec![Shape4::new(1, channels, height, width)],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> Shape4 {
        self.shapes[node]
    }

    pub fn add(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Config(format!("layer {name}: unknown input node {bad}")));
        }
        let in_shapes: Vec<Shape4> = inputs.iter().map(|&i| self.shapes[i]).collect();
        let shape = layer
            .output_shape(&in_shapes)
            .map_err(|e| Error::Config(format!("layer {name}: {e}")))?;
        self.nodes.push(Node {
            name,
            layer: Some(Box::new(layer)),
            inputs: inputs.to_vec(),
        });
        self.shapes.push(shape);
        Ok(self.nodes.len() - 1)
    }

    pub fn finish(self, output: NodeId) -> Result<Graph<T>> {
        if output >= self.nodes.len() {
            return Err(Error::Config(format!("unknown output node {output}")));
        }
        let n = self.nodes.len();
        let s = self.shapes[0];
        Ok(Graph {
            nodes: self.nodes,
            input_chw: (s.c, s.h, s.w),
            output,
            mode: Mode::Train,
            values: vec![None; n],
            input_grad: None,
            loss_grad: None,
        })
    }
}

/// Static layer graph with reverse-mode differentiation.
///
/// Nodes are stored in topological order. A graph instance is not meant to
/// be shared between threads while running: forward and backward mutate the
/// per-layer caches.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    input_chw: (usize, usize, usize),
    output: NodeId,
    mode: Mode,
    values: Vec<Option<Tensor<T>>>,
    input_grad: Option<Tensor<T>>,
    loss_grad: Option<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn input_chw(&self) -> (usize, usize, usize) {
        self.input_chw
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Output of `node` from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values.get(node).and_then(|v| v.as_ref())
    }

    /// Gradient of the loss w.r.t. the graph input from the last backward pass.
    pub fn input_grad(&self) -> Option<&Tensor<T>> {
        self.input_grad.as_ref()
    }

    /// Shapes of every node for a given batch size.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, Shape4)>> {
        let (c, h, w) = self.input_chw;
        let mut shapes: Vec<Shape4> = Vec::with_capacity(self.nodes.len());
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = match &node.layer {
                None => Shape4::new(batch, c, h, w),
                Some(layer) => {
                    let ins: Vec<Shape4> = node.inputs.iter().map(|&i| shapes[i]).collect();
                    layer
                        .output_shape(&ins)
                        .map_err(|e| Error::shape(format!("layer {}: {e}", node.name)))?
                }
            };
            shapes.push(s);
            out.push((node.name.clone(), s));
        }
        Ok(out)
    }

    /// Multiply-accumulates of one forward pass on a single example.
    pub fn flops(&self) -> Result<u64> {
        let trace = self.shape_trace(1)?;
        Ok(self
            .nodes
            .iter()
            .filter_map(|node| {
                let layer = node.layer.as_ref()?;
                let input = trace[*node.inputs.first()?].1;
                Some(layer.flops(input))
            })
            .sum())
    }

    /// Runs every layer in order and returns the output (logits).
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = self.input_chw;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::shape(format!(
                "layer input: graph expects (N, {c}, {h}, {w}), batch is {s}"
            )));
        }
        self.loss_grad = None;
        self.input_grad = None;
        self.values.iter_mut().for_each(|v| *v = None);
        self.values[0] = Some(x.clone());
        let mode = self.mode;
        for i in 1..self.nodes.len() {
            let (before, after) = self.values.split_at_mut(i);
            let node = &mut self.nodes[i];
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&j| before[j].as_ref().expect("inputs precede their consumers"))
                .collect();
            let layer = node.layer.as_mut().expect("only node 0 is an input");
            let y = layer.forward(&inputs, mode).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {}: {m}", node.name)),
                Error::State(m) => Error::State(format!("layer {}: {m}", node.name)),
                other => other,
            })?;
            after[0] = Some(y);
        }
        Ok(self.values[self.output].clone().expect("output computed"))
    }

    /// Forward pass followed by mean softmax cross-entropy against `labels`.
    pub fn forward_loss(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, f64)> {
        let logits = self.forward(x)?;
        let (loss, grad) = softmax_xent(&logits, labels)?;
        self.loss_grad = Some(grad);
        Ok((logits, loss))
    }

    /// Backpropagates the last loss. Parameter gradients are overwritten.
    pub fn backward(&mut self) -> Result<()> {
        self.backward_scaled(1.0)
    }

    /// As [`Graph::backward`] with the loss multiplied by `scale`.
    pub fn backward_scaled(&mut self, scale: f64) -> Result<()> {
        let seed = self
            .loss_grad
            .as_ref()
            .ok_or_else(|| Error::State("backward called before a forward pass with a loss".into()))?
            .scale(T::from_f64_lossy(scale));
        self.backward_from(seed)
    }

    /// Backpropagates an explicit gradient of the output.
    pub fn backward_from(&mut self, grad_output: Tensor<T>) -> Result<()> {
        if self.values[self.output].is_none() {
            return Err(Error::State("backward called before forward".into()));
        }
        self.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_output);
        for i in (1..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut self.nodes[i];
            let layer = node.layer.as_mut().expect("only node 0 is an input");
            let input_grads = layer
                .backward(&g)
                .map_err(|e| Error::State(format!("layer {}: {e}", node.name)))?;
            for (&j, gi) in node.inputs.iter().zip(input_grads) {
                grads[j] = Some(match grads[j].take() {
                    None => gi,
                    Some(acc) => acc.add(&gi)?,
                });
            }
        }
        self.input_grad = grads[0].take();
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_caches(&mut self) {
        for node in &mut self.nodes {
            if let Some(l) = node.layer.as_mut() {
                l.clear_cache();
            }
        }
        self.values.iter_mut().for_each(|v| *v = None);
        self.loss_grad = None;
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.as_ref())
            .flat_map(|l| l.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.nodes
            .iter_mut()
            .filter_map(|n| n.layer.as_mut())
            .flat_map(|l| l.params_mut().iter_mut())
    }

    /// `(qualified name, param)` for every parameter, in graph order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some(l) = &node.layer {
                for p in l.params() {
                    out.push((format!("{}/{}", node.name, p.name), p));
                }
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Buffer<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some(l) = &node.layer {
                for b in l.buffers() {
                    out.push((format!("{}/{}", node.name, b.name), b));
                }
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Buffer<T>> {
        self.nodes
            .iter_mut()
            .filter_map(|n| n.layer.as_mut())
            .flat_map(|l| l.buffers_mut().iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn param_count_by_role(&self, role: ParamRole) -> usize {
        self.params().filter(|p| p.role == role).map(|p| p.len()).sum()
    }

    /// Shift parameters of every shift layer, in graph order, with the node name.
    pub fn shift_params(&self) -> Vec<(String, ShiftParams<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let Some(layer) = &node.layer else { continue };
            let Some(mode) = layer.shift_init_mode() else { continue };
            let p = &layer.params()[0];
            let mut theta = ShiftParams::from_interleaved(p.value.clone(), mode).expect("shift pairs");
            theta.trainable = p.trainable;
            out.push((node.name.clone(), theta));
        }
        out
    }

    /// Freezes or unfreezes all shift parameters.
    pub fn set_shift_trainable(&mut self, trainable: bool) {
        for p in self.params_mut().filter(|p| p.role == ParamRole::Shift) {
            p.trainable = trainable;
        }
    }
}

//! Graph topology, builder, forward execution, and backpropagation.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;

use super::init::Initializer;
use super::ops::{
    self, Activation, Aux, BnCfg, Conv2dCfg, DwConv2dCfg, ForwardCtx, Op, PadSpec, Padding,
    PoolCfg,
};
use super::weights::WeightEntry;
use super::NnError;

/// Index of a node within its graph.
pub type NodeId = usize;
/// Index of a parameter tensor within its graph.
pub type ParamId = usize;

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    /// Whether the optimizer may update this tensor.
    pub trainable: bool,
    /// Running statistics (moving averages) updated by forward passes and
    /// never eligible for gradients, regardless of `trainable`.
    pub statistic: bool,
}

/// One operation instance in the graph.
#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub params: Vec<ParamId>,
    /// Per-sample output shape, batch dimension excluded.
    pub shape: Vec<usize>,
}

/// A static computation graph with one input and one output.
#[derive(Debug, Clone)]
pub struct Graph {
    name: String,
    nodes: Vec<Node>,
    params: Vec<Param>,
    input: NodeId,
    output: NodeId,
    by_name: BTreeMap<String, NodeId>,
}

/// Stored forward-pass values for every node, in node order.
pub struct Activations {
    pub values: Vec<ArrayD<f32>>,
    pub aux: Vec<Aux>,
    pub train: bool,
}

impl Activations {
    /// The graph output value.
    pub fn value(&self, node: NodeId) -> &ArrayD<f32> {
        &self.values[node]
    }
}

/// What a backward pass should compute.
pub struct BackwardSpec<'a> {
    /// Node whose output the seed gradient refers to.
    pub seed: NodeId,
    /// Gradient of the scalar objective with respect to the seed output.
    pub seed_grad: ArrayD<f32>,
    /// Compute gradients for trainable parameters.
    pub param_grads: bool,
    /// Also return gradients with respect to these nodes' outputs.
    pub node_grads: &'a [NodeId],
}

/// Results of a backward pass.
pub struct Gradients {
    /// Indexed by `ParamId`; `None` for parameters without a gradient.
    pub params: Vec<Option<ArrayD<f32>>>,
    /// Gradients for the requested intermediate nodes.
    pub nodes: BTreeMap<NodeId, ArrayD<f32>>,
}

/// Incrementally assembles a graph, inferring shapes and creating
/// parameters as nodes are added.
pub struct GraphBuilder {
    name: String,
    nodes: Vec<Node>,
    params: Vec<Param>,
    by_name: BTreeMap<String, NodeId>,
    input: Option<NodeId>,
    rng: Option<ChaCha12Rng>,
}

impl GraphBuilder {
    /// Start a graph. With a seed, parameters draw random initial values;
    /// without one they take deterministic fill values and are expected to
    /// be overwritten by an imported weight file.
    pub fn new(name: impl Into<String>, seed: Option<u64>) -> Self {
        use rand::SeedableRng;
        Self {
            name: name.into(),
            nodes: Vec::new(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
            input: None,
            rng: seed.map(ChaCha12Rng::seed_from_u64),
        }
    }

    fn add_node(
        &mut self,
        name: &str,
        op: Op,
        inputs: Vec<NodeId>,
        params: Vec<ParamId>,
    ) -> Result<NodeId, NnError> {
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateNode(name.to_string()));
        }
        let input_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&i| self.nodes[i].shape.as_slice())
            .collect();
        let shape = ops::infer_shape(&op, name, &input_shapes)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            params,
            shape,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    fn new_param(
        &mut self,
        name: String,
        shape: &[usize],
        init: Initializer,
        trainable: bool,
        statistic: bool,
    ) -> ParamId {
        let value = init.materialize(shape, self.rng.as_mut());
        let id = self.params.len();
        self.params.push(Param {
            name,
            value,
            trainable,
            statistic,
        });
        id
    }

    /// The graph input. `shape` is the per-sample shape, e.g. `[3, 150, 150]`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NnError> {
        if self.input.is_some() {
            return Err(NnError::BadConfig("graph already has an input".to_string()));
        }
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateNode(name.to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::Input,
            inputs: vec![],
            params: vec![],
            shape: shape.to_vec(),
        });
        self.by_name.insert(name.to_string(), id);
        self.input = Some(id);
        Ok(id)
    }

    /// 2D convolution with kernel `[kh, kw, in, filters]` and optional bias.
    pub fn conv2d(&mut self, name: &str, x: NodeId, cfg: Conv2dCfg) -> Result<NodeId, NnError> {
        let in_channels = self.nodes[x].shape[0];
        let kernel_shape = [cfg.kernel.0, cfg.kernel.1, in_channels, cfg.filters];
        let kernel = self.new_param(
            format!("{name}/kernel"),
            &kernel_shape,
            Initializer::GlorotUniform,
            true,
            false,
        );
        let mut params = vec![kernel];
        if cfg.use_bias {
            params.push(self.new_param(
                format!("{name}/bias"),
                &[cfg.filters],
                Initializer::Zeros,
                true,
                false,
            ));
        }
        self.add_node(name, Op::Conv2d(cfg), vec![x], params)
    }

    /// Depthwise 2D convolution with kernel `[kh, kw, channels, 1]`.
    pub fn depthwise_conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        cfg: DwConv2dCfg,
    ) -> Result<NodeId, NnError> {
        let channels = self.nodes[x].shape[0];
        let kernel = self.new_param(
            format!("{name}/depthwise_kernel"),
            &[cfg.kernel.0, cfg.kernel.1, channels, 1],
            Initializer::GlorotUniform,
            true,
            false,
        );
        self.add_node(name, Op::DepthwiseConv2d(cfg), vec![x], vec![kernel])
    }

    /// Depthwise convolution followed by a pointwise projection, sharing a
    /// layer name; parameters are `<name>/depthwise_kernel` and
    /// `<name>/pointwise_kernel`.
    pub fn separable_conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        filters: usize,
    ) -> Result<NodeId, NnError> {
        let channels = self.nodes[x].shape[0];
        let dw_kernel = self.new_param(
            format!("{name}/depthwise_kernel"),
            &[kernel.0, kernel.1, channels, 1],
            Initializer::GlorotUniform,
            true,
            false,
        );
        let dw = self.add_node(
            &format!("{name}:dw"),
            Op::DepthwiseConv2d(DwConv2dCfg {
                kernel,
                stride,
                padding,
            }),
            vec![x],
            vec![dw_kernel],
        )?;
        let pw_kernel = self.new_param(
            format!("{name}/pointwise_kernel"),
            &[1, 1, channels, filters],
            Initializer::GlorotUniform,
            true,
            false,
        );
        self.add_node(
            name,
            Op::Conv2d(Conv2dCfg {
                filters,
                kernel: (1, 1),
                stride: (1, 1),
                padding: Padding::Valid,
                use_bias: false,
            }),
            vec![dw],
            vec![pw_kernel],
        )
    }

    /// Fully connected layer over `[N, features]` input.
    pub fn dense(&mut self, name: &str, x: NodeId, units: usize) -> Result<NodeId, NnError> {
        let features = self.nodes[x].shape[0];
        let kernel = self.new_param(
            format!("{name}/kernel"),
            &[features, units],
            Initializer::GlorotUniform,
            true,
            false,
        );
        let bias = self.new_param(
            format!("{name}/bias"),
            &[units],
            Initializer::Zeros,
            true,
            false,
        );
        self.add_node(name, Op::Dense { units }, vec![x], vec![kernel, bias])
    }

    /// Channel-axis batch normalization.
    pub fn batch_norm(&mut self, name: &str, x: NodeId, cfg: BnCfg) -> Result<NodeId, NnError> {
        let channels = self.nodes[x].shape[0];
        let mut params = Vec::new();
        if cfg.scale {
            params.push(self.new_param(
                format!("{name}/gamma"),
                &[channels],
                Initializer::Ones,
                true,
                false,
            ));
        }
        params.push(self.new_param(
            format!("{name}/beta"),
            &[channels],
            Initializer::Zeros,
            true,
            false,
        ));
        params.push(self.new_param(
            format!("{name}/moving_mean"),
            &[channels],
            Initializer::Zeros,
            false,
            true,
        ));
        params.push(self.new_param(
            format!("{name}/moving_variance"),
            &[channels],
            Initializer::Ones,
            false,
            true,
        ));
        self.add_node(name, Op::BatchNorm(cfg), vec![x], params)
    }

    /// Per-channel standardization with fixed statistics loaded as weights.
    /// The scalar `count` records how many samples produced the statistics;
    /// it rides along in checkpoints but does not affect the forward pass.
    pub fn fixed_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId, NnError> {
        let channels = self.nodes[x].shape[0];
        let mean = self.new_param(
            format!("{name}/mean"),
            &[channels],
            Initializer::Zeros,
            false,
            true,
        );
        let variance = self.new_param(
            format!("{name}/variance"),
            &[channels],
            Initializer::Ones,
            false,
            true,
        );
        let count = self.new_param(format!("{name}/count"), &[], Initializer::Zeros, false, true);
        self.add_node(name, Op::FixedNorm, vec![x], vec![mean, variance, count])
    }

    pub fn activation(
        &mut self,
        name: &str,
        x: NodeId,
        act: Activation,
    ) -> Result<NodeId, NnError> {
        self.add_node(name, Op::Act(act), vec![x], vec![])
    }

    pub fn max_pool(&mut self, name: &str, x: NodeId, cfg: PoolCfg) -> Result<NodeId, NnError> {
        self.add_node(name, Op::MaxPool(cfg), vec![x], vec![])
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, cfg: PoolCfg) -> Result<NodeId, NnError> {
        self.add_node(name, Op::AvgPool(cfg), vec![x], vec![])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId, NnError> {
        self.add_node(name, Op::GlobalAvgPool, vec![x], vec![])
    }

    pub fn zero_pad(&mut self, name: &str, x: NodeId, pad: PadSpec) -> Result<NodeId, NnError> {
        self.add_node(name, Op::ZeroPad(pad), vec![x], vec![])
    }

    /// Elementwise sum of two or more same-shaped inputs.
    pub fn add(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId, NnError> {
        self.add_node(name, Op::Add, inputs.to_vec(), vec![])
    }

    /// `a + scale * b`.
    pub fn scaled_add(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        scale: f32,
    ) -> Result<NodeId, NnError> {
        self.add_node(name, Op::ScaledAdd { scale }, vec![a, b], vec![])
    }

    /// Elementwise product; one operand may be `[C, 1, 1]` against
    /// `[C, H, W]` for channelwise gating.
    pub fn multiply(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.add_node(name, Op::Multiply, vec![a, b], vec![])
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId, NnError> {
        self.add_node(name, Op::Concat, inputs.to_vec(), vec![])
    }

    /// Inverted dropout; `per_sample` draws one mask value per sample
    /// (stochastic-depth style) instead of per element.
    pub fn dropout(
        &mut self,
        name: &str,
        x: NodeId,
        rate: f32,
        per_sample: bool,
    ) -> Result<NodeId, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::BadConfig(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        self.add_node(name, Op::Dropout { rate, per_sample }, vec![x], vec![])
    }

    /// Batch-preserving reshape.
    pub fn reshape(&mut self, name: &str, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        self.add_node(
            name,
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![x],
            vec![],
        )
    }

    /// `x * scale + offset`.
    pub fn rescale(
        &mut self,
        name: &str,
        x: NodeId,
        scale: f32,
        offset: f32,
    ) -> Result<NodeId, NnError> {
        self.add_node(name, Op::Rescale { scale, offset }, vec![x], vec![])
    }

    /// Shape of a node added so far.
    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    /// Name of a node added so far.
    pub fn node_name(&self, node: NodeId) -> &str {
        &self.nodes[node].name
    }

    /// Number of parameter tensors added so far.
    pub fn n_param_tensors(&self) -> usize {
        self.params.len()
    }

    /// Number of scalar parameters added so far.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Mark every parameter created so far as frozen. Called between
    /// building a pretrained base and attaching a fresh head.
    pub fn freeze_existing(&mut self) {
        for param in &mut self.params {
            param.trainable = false;
        }
    }

    /// Finalize the graph with `output` as its designated output node.
    pub fn finish(self, output: NodeId) -> Result<Graph, NnError> {
        let input = self
            .input
            .ok_or_else(|| NnError::BadConfig("graph has no input".to_string()))?;
        if output >= self.nodes.len() {
            return Err(NnError::BadConfig("output node out of range".to_string()));
        }
        Ok(Graph {
            name: self.name,
            nodes: self.nodes,
            params: self.params,
            input,
            output,
            by_name: self.by_name,
        })
    }
}

impl Graph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_node(&self) -> NodeId {
        self.input
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, NnError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Per-sample output shape of a node.
    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn n_param_tensors(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count across all parameters, running statistics
    /// included.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of trainable parameters only.
    pub fn n_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .collect()
    }

    /// Set every non-statistic parameter's trainable flag.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for param in &mut self.params {
            if !param.statistic {
                param.trainable = trainable;
            }
        }
    }

    /// Training-mode forward pass. Updates batch-norm running statistics
    /// and draws dropout masks from `rng`.
    pub fn forward_train(
        &mut self,
        x: ArrayD<f32>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Activations, NnError> {
        let mut updates = Vec::new();
        let acts = self.run(x, true, Some(rng), Some(&mut updates))?;
        for (id, value) in updates {
            self.params[id].value = value;
        }
        Ok(acts)
    }

    /// Inference-mode forward pass.
    pub fn forward_eval(&self, x: ArrayD<f32>) -> Result<Activations, NnError> {
        self.run(x, false, None, None)
    }

    fn run(
        &self,
        x: ArrayD<f32>,
        train: bool,
        mut rng: Option<&mut ChaCha12Rng>,
        mut bn_updates: Option<&mut Vec<(ParamId, ArrayD<f32>)>>,
    ) -> Result<Activations, NnError> {
        let expected = &self.nodes[self.input].shape;
        if x.ndim() != expected.len() + 1 || &x.shape()[1..] != expected.as_slice() {
            return Err(NnError::Shape {
                node: self.nodes[self.input].name.clone(),
                detail: format!(
                    "input shape {:?} does not extend per-sample shape {:?}",
                    x.shape(),
                    expected
                ),
            });
        }
        let mut values: Vec<ArrayD<f32>> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            if matches!(node.op, Op::Input) {
                values.push(x.clone());
                aux.push(Aux::None);
                continue;
            }
            let inputs: Vec<&ArrayD<f32>> = node.inputs.iter().map(|&i| &values[i]).collect();
            let mut ctx = ForwardCtx {
                train,
                rng: rng.as_deref_mut(),
                bn_updates: bn_updates.as_deref_mut(),
            };
            let (value, node_aux) = ops::forward(node, &inputs, &self.params, &mut ctx)?;
            values.push(value);
            aux.push(node_aux);
        }
        Ok(Activations { values, aux, train })
    }

    /// Reverse-mode differentiation from `spec.seed`. Gradient flow stops
    /// at subgraphs that contain neither trainable parameters nor
    /// requested nodes.
    pub fn backward(
        &self,
        acts: &Activations,
        spec: BackwardSpec<'_>,
    ) -> Result<Gradients, NnError> {
        let seed_node = &self.nodes[spec.seed];
        if spec.seed_grad.shape() != acts.values[spec.seed].shape() {
            return Err(NnError::Shape {
                node: seed_node.name.clone(),
                detail: format!(
                    "seed gradient shape {:?} does not match activation shape {:?}",
                    spec.seed_grad.shape(),
                    acts.values[spec.seed].shape()
                ),
            });
        }

        // useful[n]: the subgraph feeding n contains a trainable parameter
        // or a node whose gradient was requested, so grad must flow there.
        let mut useful = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let own = (spec.param_grads
                && node
                    .params
                    .iter()
                    .any(|&p| self.params[p].trainable && !self.params[p].statistic))
                || spec.node_grads.contains(&id);
            useful[id] = own || node.inputs.iter().any(|&i| useful[i]);
        }

        let mut param_grads: Vec<Option<ArrayD<f32>>> = vec![None; self.params.len()];
        let mut node_out: BTreeMap<NodeId, ArrayD<f32>> = BTreeMap::new();
        let mut pending: BTreeMap<NodeId, ArrayD<f32>> = BTreeMap::new();
        pending.insert(spec.seed, spec.seed_grad);

        for id in (0..=spec.seed).rev() {
            let Some(grad) = pending.remove(&id) else {
                continue;
            };
            if spec.node_grads.contains(&id) {
                node_out.insert(id, grad.clone());
            }
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let want_inputs: Vec<bool> = node.inputs.iter().map(|&i| useful[i]).collect();
            if !want_inputs.iter().any(|&w| w)
                && !(spec.param_grads
                    && node
                        .params
                        .iter()
                        .any(|&p| self.params[p].trainable && !self.params[p].statistic))
            {
                continue;
            }
            let inputs: Vec<&ArrayD<f32>> = node.inputs.iter().map(|&i| &acts.values[i]).collect();
            let result = ops::backward(
                node,
                &grad,
                &inputs,
                &acts.values[id],
                &acts.aux[id],
                &self.params,
                acts.train,
                &want_inputs,
                spec.param_grads,
            )?;
            for (pid, g) in result.param_grads {
                match &mut param_grads[pid] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                }
            }
            for (slot, input_grad) in node.inputs.iter().zip(result.input_grads) {
                if let Some(g) = input_grad {
                    match pending.get_mut(slot) {
                        Some(existing) => *existing += &g,
                        None => {
                            pending.insert(*slot, g);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            nodes: node_out,
        })
    }

    /// Snapshot all parameters as named weight entries.
    pub fn export_entries(&self) -> Vec<WeightEntry> {
        self.params
            .iter()
            .map(|p| WeightEntry {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect()
    }

    /// Load parameter values by name. Every entry must match an existing
    /// parameter in name and shape; parameters not covered by any entry
    /// are returned so the caller can decide whether that is acceptable.
    pub fn import_entries(&mut self, entries: Vec<WeightEntry>) -> Result<Vec<String>, NnError> {
        let index: BTreeMap<String, ParamId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let mut loaded = vec![false; self.params.len()];
        let mut unknown = Vec::new();
        for entry in entries {
            match index.get(&entry.name) {
                Some(&id) => {
                    if self.params[id].value.shape() != entry.value.shape() {
                        return Err(NnError::WeightShape {
                            name: entry.name,
                            expected: self.params[id].value.shape().to_vec(),
                            got: entry.value.shape().to_vec(),
                        });
                    }
                    self.params[id].value = entry.value;
                    loaded[id] = true;
                }
                None => unknown.push(entry.name),
            }
        }
        if !unknown.is_empty() {
            return Err(NnError::UnknownWeights(unknown));
        }
        Ok(self
            .params
            .iter()
            .zip(&loaded)
            .filter(|(_, &l)| !l)
            .map(|(p, _)| p.name.clone())
            .collect())
    }

    /// Parameter shape sequence in creation order, for cross-checks
    /// against an exporting framework.
    pub fn param_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    /// conv -> bn -> relu -> gap -> dense -> softmax toy classifier.
    fn toy_graph(seed: u64) -> (Graph, NodeId, NodeId) {
        let mut b = GraphBuilder::new("toy", Some(seed));
        let x = b.input("input", &[2, 8, 8]).unwrap();
        let c = b
            .conv2d(
                "conv",
                x,
                Conv2dCfg {
                    filters: 4,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: Padding::Same,
                    use_bias: true,
                },
            )
            .unwrap();
        let n = b
            .batch_norm(
                "bn",
                c,
                BnCfg {
                    eps: 1e-3,
                    momentum: 0.99,
                    scale: true,
                },
            )
            .unwrap();
        let a = b.activation("relu", n, Activation::Relu).unwrap();
        let g = b.global_avg_pool("gap", a).unwrap();
        let logits = b.dense("logits", g, 3).unwrap();
        let out = b.activation("probs", logits, Activation::Softmax).unwrap();
        let graph = b.finish(out).unwrap();
        let logits_id = graph.node_id("logits").unwrap();
        (graph, logits_id, out)
    }

    fn batch(seed: u64, n: usize, shape: &[usize]) -> ArrayD<f32> {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut full = vec![n];
        full.extend_from_slice(shape);
        ArrayD::from_shape_fn(IxDyn(&full), |_| rng.gen_range(-1.0..1.0f32))
    }

    #[test]
    fn shapes_are_inferred_through_the_stack() {
        let (graph, logits, out) = toy_graph(1);
        assert_eq!(graph.node_shape(graph.node_id("conv").unwrap()), &[4, 8, 8]);
        assert_eq!(graph.node_shape(graph.node_id("gap").unwrap()), &[4]);
        assert_eq!(graph.node_shape(logits), &[3]);
        assert_eq!(graph.node_shape(out), &[3]);
        // conv kernel 2*4*9 + bias 4 + bn 4*4 + dense 4*3 + bias 3 = 111.
        assert_eq!(graph.n_scalars(), 72 + 4 + 16 + 12 + 3);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let (a, _, _) = toy_graph(42);
        let (b, _, _) = toy_graph(42);
        for (pa, pb) in a.export_entries().iter().zip(b.export_entries()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let (c, _, _) = toy_graph(43);
        let kernels_differ = a
            .export_entries()
            .iter()
            .zip(c.export_entries())
            .any(|(pa, pc)| pa.value != pc.value);
        assert!(kernels_differ);
    }

    #[test]
    fn eval_forward_is_deterministic_and_simplex() {
        let (graph, _, out) = toy_graph(7);
        let x = batch(3, 5, &[2, 8, 8]);
        let a = graph.forward_eval(x.clone()).unwrap();
        let b = graph.forward_eval(x).unwrap();
        assert_eq!(a.values[out], b.values[out]);
        for row in a.values[out].rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn train_forward_updates_running_statistics() {
        let (mut graph, _, _) = toy_graph(7);
        let before: Vec<f32> = graph
            .export_entries()
            .iter()
            .find(|e| e.name == "bn/moving_mean")
            .unwrap()
            .value
            .iter()
            .copied()
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        graph
            .forward_train(batch(3, 4, &[2, 8, 8]), &mut rng)
            .unwrap();
        let after: Vec<f32> = graph
            .export_entries()
            .iter()
            .find(|e| e.name == "bn/moving_mean")
            .unwrap()
            .value
            .iter()
            .copied()
            .collect();
        assert_ne!(before, after);
    }

    /// Central-difference check of every trainable parameter gradient on
    /// the toy graph, against a cross-entropy-like scalar objective.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mut graph, logits, _) = toy_graph(11);
        let x = batch(5, 3, &[2, 8, 8]);
        // Scalar objective: sum of squares of logits / 2, so the seed
        // gradient at the logits equals the logits themselves.
        let objective = |g: &mut Graph, x: &ArrayD<f32>| -> f32 {
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            let acts = g.forward_train(x.clone(), &mut rng).unwrap();
            acts.values[logits].iter().map(|v| v * v / 2.0).sum()
        };

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let base_acts = {
            let mut g2 = graph.clone();
            g2.forward_train(x.clone(), &mut rng).unwrap()
        };
        let seed_grad = base_acts.values[logits].clone();
        let grads = graph
            .backward(
                &base_acts,
                BackwardSpec {
                    seed: logits,
                    seed_grad,
                    param_grads: true,
                    node_grads: &[],
                },
            )
            .unwrap();

        let eps = 1e-2f32;
        for pid in graph.trainable_param_ids() {
            let grad = grads.params[pid].clone().expect("trainable grad");
            let n = graph.param(pid).value.len().min(4);
            for flat in 0..n {
                let orig = graph.param(pid).value.as_slice().unwrap()[flat];
                graph.param_mut(pid).value.as_slice_mut().unwrap()[flat] = orig + eps;
                let up = objective(&mut graph.clone(), &x);
                graph.param_mut(pid).value.as_slice_mut().unwrap()[flat] = orig - eps;
                let down = objective(&mut graph.clone(), &x);
                graph.param_mut(pid).value.as_slice_mut().unwrap()[flat] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad.as_slice().unwrap()[flat];
                let tol = 1e-2 * (1.0 + numeric.abs().max(analytic.abs()));
                assert!(
                    (numeric - analytic).abs() < tol,
                    "param {} [{}]: numeric {} vs analytic {}",
                    graph.param(pid).name,
                    flat,
                    numeric,
                    analytic
                );
            }
        }
    }

    #[test]
    fn backward_returns_requested_node_gradients() {
        let (mut graph, logits, _) = toy_graph(2);
        let relu = graph.node_id("relu").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = batch(9, 2, &[2, 8, 8]);
        let acts = graph.forward_train(x, &mut rng).unwrap();
        let mut seed = ArrayD::zeros(acts.values[logits].raw_dim());
        seed[[0, 1]] = 1.0;
        let grads = graph
            .backward(
                &acts,
                BackwardSpec {
                    seed: logits,
                    seed_grad: seed,
                    param_grads: false,
                    node_grads: &[relu],
                },
            )
            .unwrap();
        let g = grads.nodes.get(&relu).expect("relu grad present");
        assert_eq!(g.shape(), acts.values[relu].shape());
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(grads.params.iter().all(|p| p.is_none()));
    }

    #[test]
    fn frozen_parameters_receive_no_gradients() {
        let (mut graph, logits, _) = toy_graph(3);
        // Freeze everything except the dense head.
        for pid in 0..graph.n_param_tensors() {
            let keep = graph.param(pid).name.starts_with("logits/");
            if !keep && !graph.param(pid).statistic {
                graph.param_mut(pid).trainable = false;
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = batch(4, 2, &[2, 8, 8]);
        let acts = graph.forward_train(x, &mut rng).unwrap();
        let seed = acts.values[logits].clone();
        let grads = graph
            .backward(
                &acts,
                BackwardSpec {
                    seed: logits,
                    seed_grad: seed,
                    param_grads: true,
                    node_grads: &[],
                },
            )
            .unwrap();
        for pid in 0..graph.n_param_tensors() {
            let name = &graph.param(pid).name;
            if name.starts_with("logits/") {
                assert!(grads.params[pid].is_some(), "{name} should have a grad");
            } else {
                assert!(grads.params[pid].is_none(), "{name} should be skipped");
            }
        }
    }

    #[test]
    fn import_round_trips_and_reports_missing() {
        let (graph, _, _) = toy_graph(5);
        let (mut blank, _, _) = {
            let mut b = GraphBuilder::new("toy", None);
            let x = b.input("input", &[2, 8, 8]).unwrap();
            let c = b
                .conv2d(
                    "conv",
                    x,
                    Conv2dCfg {
                        filters: 4,
                        kernel: (3, 3),
                        stride: (1, 1),
                        padding: Padding::Same,
                        use_bias: true,
                    },
                )
                .unwrap();
            let n = b
                .batch_norm(
                    "bn",
                    c,
                    BnCfg {
                        eps: 1e-3,
                        momentum: 0.99,
                        scale: true,
                    },
                )
                .unwrap();
            let a = b.activation("relu", n, Activation::Relu).unwrap();
            let g = b.global_avg_pool("gap", a).unwrap();
            let logits = b.dense("logits", g, 3).unwrap();
            let out = b.activation("probs", logits, Activation::Softmax).unwrap();
            let graph = b.finish(out).unwrap();
            let logits_id = graph.node_id("logits").unwrap();
            (graph, logits_id, out)
        };
        let entries = graph.export_entries();
        let missing = blank.import_entries(entries.clone()).unwrap();
        assert!(missing.is_empty());
        let x = batch(1, 2, &[2, 8, 8]);
        assert_eq!(
            graph.forward_eval(x.clone()).unwrap().values[graph.output_node()],
            blank.forward_eval(x).unwrap().values[blank.output_node()]
        );

        // Dropping the head entries reports them as missing.
        let partial: Vec<_> = graph
            .export_entries()
            .into_iter()
            .filter(|e| !e.name.starts_with("logits/"))
            .collect();
        let missing = blank.import_entries(partial).unwrap();
        assert_eq!(missing, vec!["logits/kernel", "logits/bias"]);

        // Unknown names are rejected.
        let mut bogus = entries;
        bogus[0].name = "nonexistent/kernel".to_string();
        assert!(matches!(
            blank.import_entries(bogus),
            Err(NnError::UnknownWeights(_))
        ));
    }

    #[test]
    fn duplicate_node_names_are_rejected() {
        let mut b = GraphBuilder::new("dup", Some(0));
        let x = b.input("input", &[1, 4, 4]).unwrap();
        b.activation("a", x, Activation::Relu).unwrap();
        assert!(matches!(
            b.activation("a", x, Activation::Relu),
            Err(NnError::DuplicateNode(_))
        ));
    }
}

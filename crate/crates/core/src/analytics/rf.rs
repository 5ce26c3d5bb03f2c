use super::LayerMeta;
use crate::error::{Error, Result};

/// Operations that matter for receptive-field arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfOp {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Norm {
        shortcut: bool,
    },
    /// Shape-preserving elementwise op (activation).
    Pointwise,
    /// Merge of two or more paths.
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfNode {
    pub op: RfOp,
    pub inputs: Vec<usize>,
}

/// Receptive field and cumulative stride ("jump") of a node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfInfo {
    pub rf: usize,
    pub jump: usize,
}

/// A dataflow graph of spatial ops. Builder methods append nodes and return
/// their ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RfGraph {
    nodes: Vec<RfNode>,
}

impl RfGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[RfNode] {
        &self.nodes
    }

    /// Appends an arbitrary node. Inputs may point forward; ordering is
    /// resolved by [`receptive_fields`].
    pub fn push(&mut self, op: RfOp, inputs: Vec<usize>) -> usize {
        self.nodes.push(RfNode { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> usize {
        self.push(RfOp::Input, vec![])
    }

    pub fn conv(&mut self, from: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
        self.push(RfOp::Conv { kernel, stride, dilation }, vec![from])
    }

    pub fn pool(&mut self, from: usize, kernel: usize, stride: usize) -> usize {
        self.push(RfOp::Pool { kernel, stride }, vec![from])
    }

    pub fn norm(&mut self, from: usize, shortcut: bool) -> usize {
        self.push(RfOp::Norm { shortcut }, vec![from])
    }

    pub fn pointwise(&mut self, from: usize) -> usize {
        self.push(RfOp::Pointwise, vec![from])
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(RfOp::Add, vec![a, b])
    }

    fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut users = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            let arity_ok = match node.op {
                RfOp::Input => node.inputs.is_empty(),
                RfOp::Add => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Config(format!("node {i} ({:?}) has {} inputs", node.op, node.inputs.len())));
            }
            for &src in &node.inputs {
                if src >= n {
                    return Err(Error::Config(format!("node {i} reads missing node {src}")));
                }
                indeg[i] += 1;
                users[src].push(i);
            }
        }
        // Kahn's algorithm, always taking the lowest ready id.
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(Error::Config(format!("network graph has a cycle through node {stuck}")));
        }
        Ok(order)
    }
}

/// Receptive field of every node, via `rf += (k-1)*dilation*jump`,
/// `jump *= stride`. Merges take the maximum over their inputs.
pub fn receptive_fields(g: &RfGraph) -> Result<Vec<RfInfo>> {
    let mut info = vec![RfInfo { rf: 1, jump: 1 }; g.nodes.len()];
    for i in g.topo_order()? {
        let node = &g.nodes[i];
        let src = |k: usize| info[node.inputs[k]];
        info[i] = match node.op {
            RfOp::Input => RfInfo { rf: 1, jump: 1 },
            RfOp::Conv { kernel, stride, dilation } => step(src(0), kernel, stride, dilation, i)?,
            RfOp::Pool { kernel, stride } => step(src(0), kernel, stride, 1, i)?,
            RfOp::Norm { .. } | RfOp::Pointwise => src(0),
            RfOp::Add => node
                .inputs
                .iter()
                .map(|&s| info[s])
                .fold(RfInfo { rf: 0, jump: 0 }, |a, b| RfInfo { rf: a.rf.max(b.rf), jump: a.jump.max(b.jump) }),
        };
    }
    Ok(info)
}

fn step(prev: RfInfo, kernel: usize, stride: usize, dilation: usize, node: usize) -> Result<RfInfo> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return Err(Error::Config(format!("node {node}: kernel, stride and dilation must be positive")));
    }
    Ok(RfInfo { rf: prev.rf + (kernel - 1) * dilation * prev.jump, jump: prev.jump * stride })
}

/// Metadata of every normalization node in id order. The kernel size is
/// that of the nearest convolution upstream on the first-input chain.
pub fn norm_layers(g: &RfGraph) -> Result<Vec<LayerMeta>> {
    let info = receptive_fields(g)?;
    let mut out = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        let RfOp::Norm { shortcut } = node.op else { continue };
        let mut k = 1;
        let mut cur = node.inputs[0];
        loop {
            match g.nodes[cur].op {
                RfOp::Conv { kernel, .. } => {
                    k = kernel;
                    break;
                }
                RfOp::Input => break,
                _ => cur = g.nodes[cur].inputs[0],
            }
        }
        out.push(LayerMeta { layer_id: out.len(), rf: info[i].rf, kernel_size: k, is_shortcut: shortcut });
    }
    Ok(out)
}

/// ResNet50 with the stride on the 3x3 convolution of each bottleneck.
pub fn resnet50_graph() -> RfGraph {
    let mut g = RfGraph::new();
    let x = g.input();
    let c = g.conv(x, 7, 2, 1);
    let n = g.norm(c, false);
    let a = g.pointwise(n);
    let mut cur = g.pool(a, 3, 2);
    for (stage, blocks) in [3, 4, 6, 3].into_iter().enumerate() {
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let c1 = g.conv(cur, 1, 1, 1);
            let n1 = g.norm(c1, false);
            let a1 = g.pointwise(n1);
            let c2 = g.conv(a1, 3, stride, 1);
            let n2 = g.norm(c2, false);
            let a2 = g.pointwise(n2);
            let c3 = g.conv(a2, 1, 1, 1);
            let trunk = g.norm(c3, false);
            let short = if b == 0 {
                let conv = g.conv(cur, 1, stride, 1);
                g.norm(conv, true)
            } else {
                cur
            };
            let sum = g.add(trunk, short);
            cur = g.pointwise(sum);
        }
    }
    g
}

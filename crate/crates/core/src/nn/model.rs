//! Arrival-time model over the heterogeneous graph.
//!
//! Typed encoders embed floor patches, robot priorities and eta-edge time
//! features. A multi-head attention layer with type-specific transforms
//! passes messages along association edges, self-loops and eta edges (both
//! directions, carrying the edge embedding). At recurrent step `T` the eta
//! edges with timestamp `T` are updated from their endpoints and decoded to
//! an arrival delta, which is fed back into the arrival features.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::NnError;
use crate::hetgraph::{HetGraph, DEFAULT_TILE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Length of a floor patch.
    pub floor_in: usize,
    /// Divisor for time-valued inputs and multiplier for decoder outputs.
    pub time_scale: f64,
    pub layers_per_step: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 3,
            floor_in: DEFAULT_TILE_SIZE * DEFAULT_TILE_SIZE,
            time_scale: crate::hetgraph::DEFAULT_TIME_SCALE,
            layers_per_step: 1,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Iterated multi-step: trained with ground-truth arrivals fed back.
    Ims,
    /// Direct multi-step: trained through its own fed-back predictions.
    Dms,
}

pub const FLOOR: usize = 0;
pub const ROBOT: usize = 1;

/// Index of the (source type, destination type) pair.
pub fn type_pair(src: usize, dst: usize) -> usize {
    2 * src + dst
}

/// Parameter block layout. Weights map rows (inputs) to columns (outputs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub floor_w: usize,
    pub floor_b: usize,
    pub robot_w: usize,
    pub robot_b: usize,
    pub eta_w: usize,
    pub eta_b: usize,
    layers_at: usize,
    per_layer: usize,
    heads: usize,
    pub edge_w: usize,
    pub edge_b: usize,
    pub dec_w: usize,
    pub dec_b: usize,
    pub count: usize,
}

/// Blocks of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLayout {
    /// Floor node transform for all heads, `d x H*d`.
    pub w_floor: usize,
    pub w_robot: usize,
    /// Eta-edge message transform, `d x H*d`.
    pub w_edge: usize,
    /// Per head: source and destination attention vectors, `d x 4` (one
    /// column per type pair).
    pub a_src: usize,
    pub a_dst: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let per_layer = 3 + 2 * cfg.heads + 2;
        let layers_at = 6;
        let after = layers_at + per_layer * cfg.layers_per_step;
        Layout {
            floor_w: 0,
            floor_b: 1,
            robot_w: 2,
            robot_b: 3,
            eta_w: 4,
            eta_b: 5,
            layers_at,
            per_layer,
            heads: cfg.heads,
            edge_w: after,
            edge_b: after + 1,
            dec_w: after + 2,
            dec_b: after + 3,
            count: after + 4,
        }
    }

    pub fn layer(&self, l: usize) -> LayerLayout {
        let base = self.layers_at + l * self.per_layer;
        LayerLayout {
            w_floor: base,
            w_robot: base + 1,
            w_edge: base + 2,
            a_src: base + 3,
            a_dst: base + 3 + self.heads,
            proj_w: base + 3 + 2 * self.heads,
            proj_b: base + 4 + 2 * self.heads,
        }
    }
}

/// Shapes and names of every parameter block.
pub fn block_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.hidden;
    let hd = cfg.heads * d;
    let mut out = vec![
        ("floor_w".to_string(), (cfg.floor_in, d)),
        ("floor_b".to_string(), (1, d)),
        ("robot_w".to_string(), (1, d)),
        ("robot_b".to_string(), (1, d)),
        ("eta_w".to_string(), (3, d)),
        ("eta_b".to_string(), (1, d)),
    ];
    for l in 0..cfg.layers_per_step {
        out.push((format!("l{l}.w_floor"), (d, hd)));
        out.push((format!("l{l}.w_robot"), (d, hd)));
        out.push((format!("l{l}.w_edge"), (d, hd)));
        for h in 0..cfg.heads {
            out.push((format!("l{l}.a_src{h}"), (d, 4)));
        }
        for h in 0..cfg.heads {
            out.push((format!("l{l}.a_dst{h}"), (d, 4)));
        }
        out.push((format!("l{l}.proj_w"), (hd, d)));
        out.push((format!("l{l}.proj_b"), (1, d)));
    }
    out.push(("edge_w".to_string(), (3 * d, d)));
    out.push(("edge_b".to_string(), (1, d)));
    out.push(("dec_w".to_string(), (d, 1)));
    out.push(("dec_b".to_string(), (1, 1)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: Vec<Array2<f64>>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let blocks = block_specs(&config)
            .into_iter()
            .map(|(_, shape)| Array2::zeros(shape))
            .collect();
        ModelParams { config, blocks }
    }

    /// Uniform `±sqrt(1/fan_in)` per block, fan-in being the input width of
    /// the map the block belongs to; the decoder starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::new(&config);
        let specs = block_specs(&config);
        let mut blocks = Vec::with_capacity(specs.len());
        let mut fan_in = 1;
        for (i, (_, (rows, cols))) in specs.into_iter().enumerate() {
            if rows > 1 || i == layout.robot_w {
                fan_in = rows;
            }
            let bound = (1.0 / fan_in as f64).sqrt();
            let block = if i == layout.dec_w || i == layout.dec_b {
                Array2::zeros((rows, cols))
            } else {
                Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
            };
            blocks.push(block);
        }
        ModelParams { config, blocks }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// A directed message `src -> dst`, optionally carrying eta edge `edge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Message {
    pub dst: usize,
    pub src: usize,
    pub edge: Option<usize>,
}

/// Typed nodes (floor nodes first) and the messages between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageGraph {
    pub num_floor: usize,
    pub num_robot: usize,
    pub messages: Vec<Message>,
}

impl MessageGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_floor + self.num_robot
    }

    pub fn node_type(&self, v: usize) -> usize {
        if v < self.num_floor {
            FLOOR
        } else {
            ROBOT
        }
    }

    /// Messages in canonical (destination, source, edge) order, so that
    /// reductions do not depend on the order edges were listed in.
    pub fn canonical(&self) -> Vec<Message> {
        let mut m = self.messages.clone();
        m.sort();
        m
    }

    pub fn check(&self) -> Result<(), NnError> {
        let n = self.num_nodes();
        let mut has_self = vec![false; n];
        for m in &self.messages {
            if m.src >= n || m.dst >= n {
                return Err(NnError::ShapeMismatch(format!(
                    "message {} -> {} outside {n} nodes",
                    m.src, m.dst
                )));
            }
            if m.src == m.dst {
                has_self[m.dst] = true;
            }
        }
        if let Some(v) = has_self.iter().position(|&s| !s) {
            return Err(NnError::ShapeMismatch(format!("node {v} lacks a self-loop")));
        }
        Ok(())
    }
}

/// Model-ready view of a labeled or unlabeled graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub graph: MessageGraph,
    /// `F x floor_in` patches.
    pub floor_x: Array2<f64>,
    /// Raw robot priorities.
    pub robot_priority: Vec<f64>,
    pub eta_robot: Vec<usize>,
    pub eta_floor: Vec<usize>,
    pub eta_duration: Vec<f64>,
    pub eta_naive: Vec<f64>,
    pub eta_timestamp: Vec<u32>,
    pub labels: Option<Vec<f64>>,
    pub t_max: u32,
}

impl GraphInput {
    pub fn from_hetgraph(g: &HetGraph) -> Self {
        let f = g.num_floor();
        let patch = g.static_layer.patch_len();
        let mut floor_x = Array2::zeros((f, patch));
        for (i, node) in g.static_layer.floors.iter().enumerate() {
            for (j, &v) in node.patch.iter().enumerate() {
                floor_x[[i, j]] = v;
            }
        }
        let mut messages: Vec<Message> = g
            .static_layer
            .assoc
            .iter()
            .map(|&(a, b)| Message {
                dst: b,
                src: a,
                edge: None,
            })
            .collect();
        for r in 0..g.num_robot() {
            let v = g.robot_node(r);
            messages.push(Message {
                dst: v,
                src: v,
                edge: None,
            });
        }
        for (i, e) in g.eta.iter().enumerate() {
            let rv = g.robot_node(e.robot);
            messages.push(Message {
                dst: e.floor,
                src: rv,
                edge: Some(i),
            });
            messages.push(Message {
                dst: rv,
                src: e.floor,
                edge: Some(i),
            });
        }
        let labels = if g.eta.iter().all(|e| e.label.is_some()) && !g.eta.is_empty() {
            Some(g.eta.iter().map(|e| f64::from(e.label.unwrap_or(0))).collect())
        } else {
            None
        };
        GraphInput {
            graph: MessageGraph {
                num_floor: f,
                num_robot: g.num_robot(),
                messages,
            },
            floor_x,
            robot_priority: g.robots.iter().map(|r| r.priority).collect(),
            eta_robot: g.eta.iter().map(|e| e.robot).collect(),
            eta_floor: g.eta.iter().map(|e| e.floor).collect(),
            eta_duration: g.eta.iter().map(|e| f64::from(e.naive_duration)).collect(),
            eta_naive: g.eta.iter().map(|e| f64::from(e.naive_arrival)).collect(),
            eta_timestamp: g.eta.iter().map(|e| e.timestamp).collect(),
            labels,
            t_max: g.t_max,
        }
    }

    pub fn num_eta(&self) -> usize {
        self.eta_naive.len()
    }

    /// Eta edges with timestamp `t`, in edge order.
    pub fn edges_at(&self, t: u32) -> Vec<usize> {
        (0..self.num_eta())
            .filter(|&i| self.eta_timestamp[i] == t)
            .collect()
    }

    /// Edges that enter the loss: labeled with a positive arrival.
    pub fn scored_edges(&self) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] > 0.0).collect(),
            None => Vec::new(),
        }
    }

    /// `E x k` indicator of the edges shifted by each decoded edge: the
    /// decoded edge itself and every later edge of the same robot.
    fn shift_matrix(&self, decoded: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((self.num_eta(), decoded.len()));
        for (k, &j) in decoded.iter().enumerate() {
            for i in 0..self.num_eta() {
                if self.eta_robot[i] == self.eta_robot[j]
                    && self.eta_timestamp[i] >= self.eta_timestamp[j]
                {
                    m[[i, k]] = 1.0;
                }
            }
        }
        m
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        self.graph.check()?;
        if self.floor_x.ncols() != cfg.floor_in || self.floor_x.nrows() != self.graph.num_floor {
            return Err(NnError::ShapeMismatch(format!(
                "floor features {:?}, expected {} x {}",
                self.floor_x.dim(),
                self.graph.num_floor,
                cfg.floor_in
            )));
        }
        if self.robot_priority.len() != self.graph.num_robot {
            return Err(NnError::ShapeMismatch("robot feature count".into()));
        }
        let e = self.num_eta();
        let lens = [
            self.eta_robot.len(),
            self.eta_floor.len(),
            self.eta_duration.len(),
            self.eta_timestamp.len(),
        ];
        if lens.iter().any(|&l| l != e) || self.labels.as_ref().is_some_and(|l| l.len() != e) {
            return Err(NnError::ShapeMismatch("eta edge arrays differ in length".into()));
        }
        Ok(())
    }
}

/// Tape handles of all parameter blocks.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        ParamVars(
            params
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| tape.param(i, b.clone()))
                .collect(),
        )
    }
}

fn linear_relu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    let y = tape.add_bias(y, b);
    tape.relu(y)
}

/// Node embeddings, floor rows first.
pub fn encode_nodes(tape: &mut Tape, p: &ParamVars, lay: &Layout, input: &GraphInput, cfg: &ModelConfig) -> Var {
    let fx = tape.leaf(input.floor_x.clone());
    let hf = linear_relu(tape, fx, p.0[lay.floor_w], p.0[lay.floor_b]);
    let rx = Array2::from_shape_fn((input.robot_priority.len(), 1), |(i, _)| {
        input.robot_priority[i] / cfg.time_scale
    });
    let rx = tape.leaf(rx);
    let hr = linear_relu(tape, rx, p.0[lay.robot_w], p.0[lay.robot_b]);
    tape.concat_rows(vec![hf, hr])
}

/// Eta edge embeddings from duration, current arrival (`E x 1`) and
/// timestamp, all divided by the time scale.
pub fn encode_eta(
    tape: &mut Tape,
    p: &ParamVars,
    lay: &Layout,
    input: &GraphInput,
    arrival: Var,
    cfg: &ModelConfig,
) -> Var {
    let s = cfg.time_scale;
    let e = input.num_eta();
    let dur = tape.leaf(Array2::from_shape_fn((e, 1), |(i, _)| input.eta_duration[i] / s));
    let ts = tape.leaf(Array2::from_shape_fn((e, 1), |(i, _)| {
        f64::from(input.eta_timestamp[i]) / s
    }));
    let arr = tape.scale(arrival, 1.0 / s);
    let x = tape.concat_cols(vec![dur, arr, ts]);
    linear_relu(tape, x, p.0[lay.eta_w], p.0[lay.eta_b])
}

/// Values computed by one attention layer besides its output.
pub struct AttentionTrace {
    /// Per head, attention weight of each canonical message.
    pub alpha: Vec<Var>,
    pub messages: Vec<Message>,
}

/// One heterogeneous attention layer. `edge_feats` holds the eta edge
/// embeddings referenced by messages.
#[allow(clippy::too_many_arguments)]
pub fn heat_layer(
    tape: &mut Tape,
    p: &ParamVars,
    lay: &LayerLayout,
    graph: &MessageGraph,
    h: Var,
    edge_feats: Option<Var>,
    cfg: &ModelConfig,
) -> (Var, AttentionTrace) {
    let d = cfg.hidden;
    let n = graph.num_nodes();
    let f = graph.num_floor;
    let msgs = graph.canonical();

    let hf = tape.slice_rows(h, 0..f);
    let hr = tape.slice_rows(h, f..n);
    let zf = tape.matmul(hf, p.0[lay.w_floor]);
    let zr = tape.matmul(hr, p.0[lay.w_robot]);
    let z = tape.concat_rows(vec![zf, zr]);

    let srcs: Vec<usize> = msgs.iter().map(|m| m.src).collect();
    let dsts: Vec<usize> = msgs.iter().map(|m| m.dst).collect();
    let pairs: Vec<usize> = msgs
        .iter()
        .map(|m| type_pair(graph.node_type(m.src), graph.node_type(m.dst)))
        .collect();
    let mut m = tape.gather_rows(z, srcs);
    let carrying: Vec<usize> = (0..msgs.len()).filter(|&i| msgs[i].edge.is_some()).collect();
    if let (Some(e), false) = (edge_feats, carrying.is_empty()) {
        let ve = tape.matmul(e, p.0[lay.w_edge]);
        let per_msg = tape.gather_rows(ve, carrying.iter().map(|&i| msgs[i].edge.unwrap_or(0)).collect());
        let spread = tape.scatter_add_rows(per_msg, carrying, msgs.len());
        m = tape.add(m, spread);
    }
    let zd = tape.gather_rows(z, dsts.clone());

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut alpha = Vec::with_capacity(cfg.heads);
    for hh in 0..cfg.heads {
        let cols = hh * d..(hh + 1) * d;
        let mh = tape.slice_cols(m, cols.clone());
        let zh = tape.slice_cols(zd, cols);
        let s_src = tape.matmul(mh, p.0[lay.a_src + hh]);
        let s_src = tape.select_cols(s_src, pairs.clone());
        let s_dst = tape.matmul(zh, p.0[lay.a_dst + hh]);
        let s_dst = tape.select_cols(s_dst, pairs.clone());
        let score = tape.add(s_src, s_dst);
        let score = tape.leaky_relu(score, cfg.leaky_slope);
        let a = tape.segment_softmax(score, dsts.clone());
        let weighted = tape.mul_rows(mh, a);
        heads.push(tape.scatter_add_rows(weighted, dsts.clone(), n));
        alpha.push(a);
    }
    let cat = tape.concat_cols(heads);
    let out = linear_relu(tape, cat, p.0[lay.proj_w], p.0[lay.proj_b]);
    (out, AttentionTrace { alpha, messages: msgs })
}

/// `ReLU(W [h_robot | h_floor | e] + b)` for the given eta edges.
pub fn edge_update(
    tape: &mut Tape,
    p: &ParamVars,
    lay: &Layout,
    input: &GraphInput,
    h: Var,
    edge_feats: Var,
    edges: &[usize],
) -> Var {
    let f = input.graph.num_floor;
    let hr = tape.gather_rows(h, edges.iter().map(|&i| f + input.eta_robot[i]).collect());
    let hf = tape.gather_rows(h, edges.iter().map(|&i| input.eta_floor[i]).collect());
    let e = tape.gather_rows(edge_feats, edges.to_vec());
    let x = tape.concat_cols(vec![hr, hf, e]);
    linear_relu(tape, x, p.0[lay.edge_w], p.0[lay.edge_b])
}

/// Decoder output (`k x 1`), in units of the time scale.
pub fn decode(tape: &mut Tape, p: &ParamVars, lay: &Layout, updated: Var) -> Var {
    let y = tape.matmul(updated, p.0[lay.dec_w]);
    tape.add_bias(y, p.0[lay.dec_b])
}

/// How decoded arrivals are written back between recurrent steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// The model's own prediction, differentiated through.
    Predicted,
    /// The label, as a constant.
    Teacher,
}

/// Result of a recurrent unroll recorded on a tape.
pub struct Unrolled {
    /// Per step, the decoded edges and their `k x 1` predictions.
    pub steps: Vec<(Vec<usize>, Var)>,
}

impl Unrolled {
    /// Prediction per eta edge.
    pub fn predictions(&self, tape: &Tape, num_eta: usize) -> Vec<f64> {
        let mut out = vec![f64::NAN; num_eta];
        for (edges, pred) in &self.steps {
            let v = tape.value(*pred);
            for (k, &i) in edges.iter().enumerate() {
                out[i] = v[[k, 0]];
            }
        }
        out
    }
}

pub fn forward_recurrent(
    tape: &mut Tape,
    params: &ModelParams,
    p: &ParamVars,
    input: &GraphInput,
    feedback: Feedback,
) -> Result<Unrolled, NnError> {
    let cfg = &params.config;
    input.check(cfg)?;
    let teacher = match feedback {
        Feedback::Teacher => Some(input.labels.as_ref().ok_or(NnError::MissingLabels)?),
        Feedback::Predicted => None,
    };
    let lay = params.layout();
    let s = cfg.time_scale;
    let e_count = input.num_eta();
    let naive = Array2::from_shape_fn((e_count, 1), |(i, _)| input.eta_naive[i]);
    let mut arr_const = naive.clone();
    let mut arr = tape.leaf(naive);

    let mut h = encode_nodes(tape, p, &lay, input, cfg);
    let mut steps = Vec::new();
    for t in 0..=input.t_max {
        if teacher.is_some() {
            arr = tape.leaf(arr_const.clone());
        }
        let e = encode_eta(tape, p, &lay, input, arr, cfg);
        for l in 0..cfg.layers_per_step {
            h = heat_layer(tape, p, &lay.layer(l), &input.graph, h, Some(e), cfg).0;
        }
        let decoded = input.edges_at(t);
        if decoded.is_empty() {
            continue;
        }
        let u = edge_update(tape, p, &lay, input, h, e, &decoded);
        let out = decode(tape, p, &lay, u);
        let delta = tape.scale(out, s);
        let current = tape.gather_rows(arr, decoded.clone());
        let pred = tape.add(current, delta);
        let shift = input.shift_matrix(&decoded);
        match teacher {
            Some(labels) => {
                let cur = tape.value(current);
                let moved = Array2::from_shape_fn((decoded.len(), 1), |(k, _)| {
                    labels[decoded[k]] - cur[[k, 0]]
                });
                arr_const += &shift.dot(&moved);
            }
            None => {
                let shift = tape.leaf(shift);
                let moved = tape.matmul(shift, delta);
                arr = tape.add(arr, moved);
            }
        }
        steps.push((decoded, pred));
    }
    Ok(Unrolled { steps })
}

/// Mean absolute percentage error, in percent, over the scored edges of an
/// unroll; `None` when no edge is scored.
pub fn mape_objective(tape: &mut Tape, input: &GraphInput, un: &Unrolled) -> Option<Var> {
    let labels = input.labels.as_ref()?;
    let scored = input.scored_edges();
    if scored.is_empty() {
        return None;
    }
    let mut is_scored = vec![false; input.num_eta()];
    for &i in &scored {
        is_scored[i] = true;
    }
    let mut parts = Vec::new();
    for (edges, pred) in &un.steps {
        let keep: Vec<usize> = (0..edges.len()).filter(|&k| is_scored[edges[k]]).collect();
        if keep.is_empty() {
            continue;
        }
        let y = keep.iter().map(|&k| labels[edges[k]]).collect();
        let sel = tape.gather_rows(*pred, keep);
        parts.push(tape.abs_percent_sum(sel, y));
    }
    let total = tape.sum(parts);
    Some(tape.scale(total, 100.0 / scored.len() as f64))
}

/// Predicted arrival of every eta edge, feeding back the model's own
/// outputs. Inference is identical for both training regimes.
pub fn predict(params: &ModelParams, input: &GraphInput) -> Result<Vec<f64>, NnError> {
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params);
    let un = forward_recurrent(&mut tape, params, &p, input, Feedback::Predicted)?;
    let out = un.predictions(&tape, input.num_eta());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NaNDetected("prediction".into()));
    }
    Ok(out)
}

/// Training loss of one graph and its gradient per parameter block.
pub fn loss_and_grad(
    params: &ModelParams,
    input: &GraphInput,
    mode: Mode,
) -> Result<(f64, Vec<Array2<f64>>), NnError> {
    let feedback = match mode {
        Mode::Ims => Feedback::Teacher,
        Mode::Dms => Feedback::Predicted,
    };
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params);
    let un = forward_recurrent(&mut tape, params, &p, input, feedback)?;
    let mut grads: Vec<Array2<f64>> = params.blocks.iter().map(|b| Array2::zeros(b.raw_dim())).collect();
    let Some(loss) = mape_objective(&mut tape, input, &un) else {
        return Ok((0.0, grads));
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(NnError::NaNDetected("loss".into()));
    }
    for (block, g) in tape.backward(loss) {
        grads[block] += &g;
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(NnError::NaNDetected("gradient".into()));
    }
    Ok((value, grads))
}

/// Loss only, for finite-difference checks.
pub fn loss(params: &ModelParams, input: &GraphInput, mode: Mode) -> Result<f64, NnError> {
    let feedback = match mode {
        Mode::Ims => Feedback::Teacher,
        Mode::Dms => Feedback::Predicted,
    };
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params);
    let un = forward_recurrent(&mut tape, params, &p, input, feedback)?;
    Ok(mape_objective(&mut tape, input, &un).map_or(0.0, |l| tape.scalar(l)))
}

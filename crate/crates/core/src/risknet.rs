//! Recurrent network mapping a coded history and the predictor vector to a
//! log relative risk.
//!
//! Code and kind embeddings are summed and concatenated with the month gap
//! Δt, passed through stacked bidirectional GRU layers, pooled by
//! dot-product attention with a learned query, concatenated with the
//! predictors and reduced by an ELU layer and a linear output.
//!
//! Row-vector convention throughout: an input row `x` (1×in) is multiplied
//! as `x · W` with `W` of shape in×out.
//!
//! Checkpoint tensor names:
//!
//! - `code_embedding` ((|V|+1)×E, row 0 is padding) and `kind_embedding` (5×E)
//! - `gru.{layer}.{fwd|bwd}.{w_z,w_r,w_n}` (in×H), `...{u_z,u_r,u_n}` (H×H),
//!   `...{b_z,b_r,b_n,b_hn}` (1×H)
//! - `attention.q` (2H×1)
//! - `head.w1` ((2H+P)×(2H+P)), `head.b1` (1×(2H+P)), `head.w2` ((2H+P)×1),
//!   `head.b2` (1×1)

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Graph, NodeId, Tensor};
use crate::cohort::{CodeSequence, KIND_COUNT, PREDICTOR_DIM};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("{what} id {id} out of range for table of {size} rows")]
    IdOutOfRange { what: &'static str, id: u32, size: usize },
    #[error("predictor vector has {got} entries, expected {expected}")]
    PredictorLength { expected: usize, got: usize },
    #[error("input has {got} columns, layer expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub embed_dim: usize,
    pub gru_layers: usize,
    pub dropout_rate: f64,
    pub predictor_dim: usize,
    /// Multiplier applied to Δt (months) before it enters the network.
    pub delta_t_scale: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            gru_layers: 3,
            dropout_rate: 0.1,
            predictor_dim: PREDICTOR_DIM,
            delta_t_scale: 1.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(NetError::Config("embed_dim must be >= 1".into()));
        }
        if self.gru_layers == 0 {
            return Err(NetError::Config("gru_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !self.delta_t_scale.is_finite() {
            return Err(NetError::Config("delta_t_scale must be finite".into()));
        }
        Ok(())
    }

    /// Per-direction hidden size, equal to the first layer's input size.
    pub fn hidden(&self) -> usize {
        self.embed_dim + 1
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim + 1
        } else {
            2 * self.hidden()
        }
    }

    pub fn head_width(&self) -> usize {
        2 * self.hidden() + self.predictor_dim
    }
}

/// Weights of one GRU direction.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_n: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_n: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_n: Tensor,
    pub b_hn: Tensor,
}

const GRU_NAMES: [&str; 10] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n", "b_hn"];

impl GruParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(vec![input, hidden]);
        let u = || Tensor::zeros(vec![hidden, hidden]);
        let b = || Tensor::zeros(vec![1, hidden]);
        Self {
            w_z: w(),
            w_r: w(),
            w_n: w(),
            u_z: u(),
            u_r: u(),
            u_n: u(),
            b_z: b(),
            b_r: b(),
            b_n: b(),
            b_hn: b(),
        }
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [&self.w_z, &self.w_r, &self.w_n, &self.u_z, &self.u_r, &self.u_n, &self.b_z, &self.b_r, &self.b_n, &self.b_hn]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_n,
            &mut self.b_hn,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.u_z.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_z.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub code_embedding: Tensor,
    pub kind_embedding: Tensor,
    /// `[forward, backward]` per layer.
    pub layers: Vec<[GruParams; 2]>,
    pub attention_q: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl NetParams {
    /// All-zero parameters with the right shapes for `vocab_size` codes.
    pub fn zeros(config: &NetConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let h = config.hidden();
        let w = config.head_width();
        Ok(Self {
            config: config.clone(),
            code_embedding: Tensor::zeros(vec![vocab_size + 1, e]),
            kind_embedding: Tensor::zeros(vec![KIND_COUNT, e]),
            layers: (0..config.gru_layers)
                .map(|l| {
                    let d = config.layer_input(l);
                    [GruParams::zeros(d, h), GruParams::zeros(d, h)]
                })
                .collect(),
            attention_q: Tensor::zeros(vec![2 * h, 1]),
            head_w1: Tensor::zeros(vec![w, w]),
            head_b1: Tensor::zeros(vec![1, w]),
            head_w2: Tensor::zeros(vec![w, 1]),
            head_b2: Tensor::zeros(vec![1, 1]),
        })
    }

    /// Number of code rows excluding padding.
    pub fn vocab_size(&self) -> usize {
        self.code_embedding.shape()[0] - 1
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["code_embedding".to_owned(), "kind_embedding".to_owned()];
        for l in 0..self.layers.len() {
            for d in DIRECTIONS {
                for n in GRU_NAMES {
                    names.push(format!("gru.{l}.{d}.{n}"));
                }
            }
        }
        names.extend(["attention.q", "head.w1", "head.b1", "head.w2", "head.b2"].map(String::from));
        names
    }

    /// Tensors in the order of [`NetParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.code_embedding, &self.kind_embedding];
        for layer in &self.layers {
            for dir in layer {
                out.extend(dir.tensors());
            }
        }
        out.extend([&self.attention_q, &self.head_w1, &self.head_b1, &self.head_w2, &self.head_b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.code_embedding, &mut self.kind_embedding];
        for layer in &mut self.layers {
            for dir in layer.iter_mut() {
                out.extend(dir.tensors_mut());
            }
        }
        out.extend([
            &mut self.attention_q,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn registered(&self, graph: &mut Graph, trainable: bool) -> ParamNodes {
        let ids: Vec<NodeId> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        ParamNodes::from_ids(self.layers.len(), &ids)
    }
}

/// Initial uniform bound for a tensor: `1/√fan_in` for weights (fan-in =
/// input rows; the embedding width for lookup tables), 0 for biases.
fn init_bound(name: &str, t: &Tensor, embed_dim: usize) -> f64 {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.starts_with("b_") || leaf == "b1" || leaf == "b2" {
        return 0.0;
    }
    let fan_in = if name.ends_with("embedding") { embed_dim } else { t.shape()[0] };
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_params(config: &NetConfig, vocab_size: usize) -> Result<NetParams> {
    let mut params = NetParams::zeros(config, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = params.names();
    let e = config.embed_dim;
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let bound = init_bound(name, t, e);
        if bound > 0.0 {
            for v in t.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    for v in &mut params.code_embedding.values_mut()[..e] {
        *v = 0.0;
    }
    Ok(params)
}

/// Graph handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub code_embedding: NodeId,
    pub kind_embedding: NodeId,
    pub layers: Vec<[GruNodes; 2]>,
    pub attention_q: NodeId,
    pub head_w1: NodeId,
    pub head_b1: NodeId,
    pub head_w2: NodeId,
    pub head_b2: NodeId,
    ids: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_n: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_n: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_n: NodeId,
    pub b_hn: NodeId,
}

impl ParamNodes {
    /// Builds handles from ids listed in canonical parameter order.
    pub fn from_ids(layers: usize, ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 2 + layers * 20 + 5, "parameter id count");
        let gru = |k: usize| GruNodes {
            w_z: ids[k],
            w_r: ids[k + 1],
            w_n: ids[k + 2],
            u_z: ids[k + 3],
            u_r: ids[k + 4],
            u_n: ids[k + 5],
            b_z: ids[k + 6],
            b_r: ids[k + 7],
            b_n: ids[k + 8],
            b_hn: ids[k + 9],
        };
        let tail = 2 + layers * 20;
        Self {
            code_embedding: ids[0],
            kind_embedding: ids[1],
            layers: (0..layers).map(|l| [gru(2 + l * 20), gru(12 + l * 20)]).collect(),
            attention_q: ids[tail],
            head_w1: ids[tail + 1],
            head_b1: ids[tail + 2],
            head_w2: ids[tail + 3],
            head_b2: ids[tail + 4],
            ids: ids.to_vec(),
        }
    }

    /// Ids in canonical parameter order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Network input for one person.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodedPerson {
    pub seq: CodeSequence,
    pub predictors: Vec<f64>,
}

fn check_ids(seq: &CodeSequence, table_rows: usize) -> Result<()> {
    for &id in &seq.token_ids {
        if id as usize >= table_rows {
            return Err(NetError::IdOutOfRange { what: "token", id, size: table_rows });
        }
    }
    for &id in &seq.kind_ids {
        if id as usize >= KIND_COUNT {
            return Err(NetError::IdOutOfRange { what: "kind", id, size: KIND_COUNT });
        }
    }
    Ok(())
}

/// Input rows `(code_emb[token] + kind_emb[kind]) ⊕ [Δt · scale]`.
pub fn embed_sequence(seq: &CodeSequence, params: &NetParams) -> Result<Tensor> {
    check_ids(seq, params.code_embedding.shape()[0])?;
    let e = params.config.embed_dim;
    let mut values = Vec::with_capacity(seq.len() * (e + 1));
    let code = params.code_embedding.values();
    let kind = params.kind_embedding.values();
    for i in 0..seq.len() {
        let c = seq.token_ids[i] as usize * e;
        let k = seq.kind_ids[i] as usize * e;
        values.extend((0..e).map(|j| code[c + j] + kind[k + j]));
        values.push(seq.delta_t_months[i] as f64 * params.config.delta_t_scale);
    }
    Ok(Tensor::matrix(seq.len(), e + 1, values)?)
}

/// `x · W` for a row `x` and row-major `W` (rows = x.len()).
fn row_times(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wv;
        }
    }
}

/// Hidden states of one GRU direction over `inputs` (L×D). With `reverse`
/// the sequence is read last to first and the outputs are returned in the
/// original row order.
pub fn gru_forward(inputs: &Tensor, layer: &GruParams, reverse: bool) -> Result<Tensor> {
    let (l, d) = inputs.dims2().ok_or(AutodiffError::NotMatrix {
        op: "gru_forward",
        shape: inputs.shape().to_vec(),
    })?;
    if d != layer.input() {
        return Err(NetError::InputWidth { expected: layer.input(), got: d });
    }
    let h = layer.hidden();
    let mut out = vec![0.0; l * h];
    let mut state = vec![0.0; h];
    let (mut xz, mut xr, mut xn) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    let (mut hz, mut hr, mut hn) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        let x = &inputs.values()[t * d..(t + 1) * d];
        row_times(x, layer.w_z.values(), h, &mut xz);
        row_times(x, layer.w_r.values(), h, &mut xr);
        row_times(x, layer.w_n.values(), h, &mut xn);
        row_times(&state, layer.u_z.values(), h, &mut hz);
        row_times(&state, layer.u_r.values(), h, &mut hr);
        row_times(&state, layer.u_n.values(), h, &mut hn);
        for j in 0..h {
            let z = sigmoid(xz[j] + hz[j] + layer.b_z.values()[j]);
            let r = sigmoid(xr[j] + hr[j] + layer.b_r.values()[j]);
            let n = (xn[j] + layer.b_n.values()[j] + r * (hn[j] + layer.b_hn.values()[j])).tanh();
            state[j] = (1.0 - z) * n + z * state[j];
        }
        out[t * h..(t + 1) * h].copy_from_slice(&state);
    }
    Ok(Tensor::matrix(l, h, out)?)
}

/// Bidirectional layer output `[forward | backward]` (L×2H).
fn bidirectional(inputs: &Tensor, layer: &[GruParams; 2]) -> Result<Tensor> {
    let f = gru_forward(inputs, &layer[0], false)?;
    let b = gru_forward(inputs, &layer[1], true)?;
    let (l, h) = f.dims2().expect("2-d");
    let mut values = Vec::with_capacity(l * 2 * h);
    for t in 0..l {
        values.extend_from_slice(&f.values()[t * h..(t + 1) * h]);
        values.extend_from_slice(&b.values()[t * h..(t + 1) * h]);
    }
    Ok(Tensor::matrix(l, 2 * h, values)?)
}

/// Softmax-weighted average of the rows of `outputs` with weights
/// `softmax(outputs · q)`. An empty input yields a zero context.
pub fn attention_pool(outputs: &Tensor, q: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let width = q.len();
    let l = if outputs.is_empty() { 0 } else { outputs.len() / width };
    if l == 0 {
        return (vec![0.0; width], Vec::new());
    }
    let rows: Vec<&[f64]> = outputs.values().chunks(width).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(q.values()).map(|(a, b)| a * b).sum()).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut context = vec![0.0; width];
    for (a, row) in alpha.iter().zip(&rows) {
        for (c, v) in context.iter_mut().zip(row.iter()) {
            *c += a * v;
        }
    }
    (context, alpha)
}

/// Log relative risk together with the attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub g: f64,
    pub attention: Vec<f64>,
}

fn check_predictors(params: &NetParams, x: &[f64]) -> Result<()> {
    if x.len() != params.config.predictor_dim {
        return Err(NetError::PredictorLength {
            expected: params.config.predictor_dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Eval-mode forward pass without building a graph.
pub fn predict(params: &NetParams, person: &EncodedPerson) -> Result<Prediction> {
    check_predictors(params, &person.predictors)?;
    let mut x = embed_sequence(&person.seq, params)?;
    if !person.seq.is_empty() {
        for layer in &params.layers {
            x = bidirectional(&x, layer)?;
        }
    }
    let (context, attention) = if person.seq.is_empty() {
        (vec![0.0; params.attention_q.len()], Vec::new())
    } else {
        attention_pool(&x, &params.attention_q)
    };
    let w = params.config.head_width();
    let input: Vec<f64> = context.into_iter().chain(person.predictors.iter().copied()).collect();
    let mut hidden = vec![0.0; w];
    row_times(&input, params.head_w1.values(), w, &mut hidden);
    let mut g = params.head_b2.values()[0];
    for j in 0..w {
        let a = crate::autodiff::elu(hidden[j] + params.head_b1.values()[j]);
        g += a * params.head_w2.values()[j];
    }
    Ok(Prediction { g, attention })
}

fn graph_gru(graph: &mut Graph, inputs: NodeId, p: &GruNodes, reverse: bool) -> Result<NodeId> {
    let l = graph.value(inputs).dims2().map_or(0, |d| d.0);
    let xz = graph.matmul(inputs, p.w_z)?;
    let xz = graph.add(xz, p.b_z)?;
    let xr = graph.matmul(inputs, p.w_r)?;
    let xr = graph.add(xr, p.b_r)?;
    let xn = graph.matmul(inputs, p.w_n)?;
    let xn = graph.add(xn, p.b_n)?;
    let mut state: Option<NodeId> = None;
    let mut outputs = vec![None; l];
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        let zx = graph.slice(xz, 0, t, t + 1)?;
        let rx = graph.slice(xr, 0, t, t + 1)?;
        let nx = graph.slice(xn, 0, t, t + 1)?;
        let next = match state {
            None => {
                // h_{t-1} = 0: the recurrent products vanish.
                let z = graph.sigmoid(zx);
                let r = graph.sigmoid(rx);
                let rb = graph.mul(r, p.b_hn)?;
                let pre = graph.add(nx, rb)?;
                let n = graph.tanh(pre);
                let zn = graph.mul(z, n)?;
                graph.sub(n, zn)?
            }
            Some(h) => {
                let hz = graph.matmul(h, p.u_z)?;
                let zpre = graph.add(zx, hz)?;
                let z = graph.sigmoid(zpre);
                let hr = graph.matmul(h, p.u_r)?;
                let rpre = graph.add(rx, hr)?;
                let r = graph.sigmoid(rpre);
                let hn = graph.matmul(h, p.u_n)?;
                let hn = graph.add(hn, p.b_hn)?;
                let rhn = graph.mul(r, hn)?;
                let pre = graph.add(nx, rhn)?;
                let n = graph.tanh(pre);
                // (1 - z)·n + z·h = n + z·(h - n)
                let diff = graph.sub(h, n)?;
                let zd = graph.mul(z, diff)?;
                graph.add(n, zd)?
            }
        };
        outputs[t] = Some(next);
        state = Some(next);
    }
    let rows: Vec<NodeId> = outputs.into_iter().map(|o| o.expect("every step filled")).collect();
    Ok(graph.concat(&rows, 0)?)
}

/// Builds the forward pass on `graph` and returns the 1×1 output node.
pub fn forward_graph<R: Rng + ?Sized>(
    graph: &mut Graph,
    nodes: &ParamNodes,
    config: &NetConfig,
    person: &EncodedPerson,
    train: bool,
    rng: &mut R,
) -> Result<NodeId> {
    if person.predictors.len() != config.predictor_dim {
        return Err(NetError::PredictorLength {
            expected: config.predictor_dim,
            got: person.predictors.len(),
        });
    }
    let seq = &person.seq;
    let table_rows = graph.value(nodes.code_embedding).shape()[0];
    check_ids(seq, table_rows)?;
    let h = config.hidden();
    let context = if seq.is_empty() {
        graph.constant(Tensor::zeros(vec![1, 2 * h]))
    } else {
        let tokens: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
        let kinds: Vec<usize> = seq.kind_ids.iter().map(|&k| k as usize).collect();
        let code = graph.gather(nodes.code_embedding, &tokens)?;
        let kind = graph.gather(nodes.kind_embedding, &kinds)?;
        let emb = graph.add(code, kind)?;
        let dt = graph.constant(Tensor::column(
            seq.delta_t_months.iter().map(|&d| d as f64 * config.delta_t_scale).collect(),
        ));
        let mut x = graph.concat(&[emb, dt], 1)?;
        for (l, layer) in nodes.layers.iter().enumerate() {
            let f = graph_gru(graph, x, &layer[0], false)?;
            let b = graph_gru(graph, x, &layer[1], true)?;
            x = graph.concat(&[f, b], 1)?;
            if l + 1 < nodes.layers.len() {
                x = graph.dropout(x, config.dropout_rate, train, rng)?;
            }
        }
        let scores = graph.matmul(x, nodes.attention_q)?;
        let alpha = graph.softmax(scores, 0)?;
        let alpha_t = graph.transpose(alpha)?;
        graph.matmul(alpha_t, x)?
    };
    let x = graph.constant(Tensor::row(person.predictors.clone()));
    let input = graph.concat(&[context, x], 1)?;
    let pre = graph.matmul(input, nodes.head_w1)?;
    let pre = graph.add(pre, nodes.head_b1)?;
    let hidden = graph.elu(pre);
    let out = graph.matmul(hidden, nodes.head_w2)?;
    Ok(graph.add(out, nodes.head_b2)?)
}

/// Log relative risk; train mode applies dropout drawn from `rng`.
pub fn forward<R: Rng + ?Sized>(params: &NetParams, person: &EncodedPerson, train: bool, rng: &mut R) -> Result<f64> {
    if !train || params.config.dropout_rate == 0.0 {
        return Ok(predict(params, person)?.g);
    }
    let mut graph = Graph::new();
    let nodes = params.registered(&mut graph, false);
    let out = forward_graph(&mut graph, &nodes, &params.config, person, true, rng)?;
    Ok(graph.scalar(out))
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    config: NetConfig,
    vocab_size: usize,
    tensors: BTreeMap<String, StoredTensor>,
}

const CHECKPOINT_FORMAT: &str = "deepcox-risknet-1";

impl NetParams {
    pub fn to_json(&self) -> String {
        let tensors = self
            .names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| {
                (
                    n,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            vocab_size: self.vocab_size(),
            tensors,
        };
        serde_json::to_string(&ck).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        let mut params = NetParams::zeros(&ck.config, ck.vocab_size)?;
        let names = params.names();
        if ck.tensors.len() != names.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.tensors.len()
            )));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let stored = ck
                .tensors
                .remove(name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))?;
            if stored.shape != slot.shape() {
                return Err(NetError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(stored.shape, stored.values)
                .map_err(|e| NetError::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    fn small_config(seed: u64) -> NetConfig {
        NetConfig {
            embed_dim: 3,
            gru_layers: 2,
            dropout_rate: 0.1,
            predictor_dim: 4,
            delta_t_scale: 0.25,
            seed,
        }
    }

    fn seq(tokens: &[u32], kinds: &[u32], dts: &[u32]) -> CodeSequence {
        CodeSequence {
            token_ids: tokens.to_vec(),
            kind_ids: kinds.to_vec(),
            delta_t_months: dts.to_vec(),
        }
    }

    fn person(tokens: &[u32], kinds: &[u32], dts: &[u32], x: &[f64]) -> EncodedPerson {
        EncodedPerson {
            seq: seq(tokens, kinds, dts),
            predictors: x.to_vec(),
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&NetConfig::default(), 30).unwrap();
        let b = init_params(&NetConfig::default(), 30).unwrap();
        assert_eq!(a, b);
        let c = init_params(&NetConfig { seed: 1, ..NetConfig::default() }, 30).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.names().iter().zip(a.tensors()) {
            let bound = init_bound(name, t, 16);
            assert!(t.max_abs() <= bound, "{name}");
            if bound == 0.0 {
                assert_eq!(t.max_abs(), 0.0, "{name}");
            }
        }
        assert!(a.code_embedding.values()[..16].iter().all(|&v| v == 0.0));
        assert_eq!(a.layers[1][0].input(), 34);
        assert_eq!(a.layers[2][1].hidden(), 17);
    }

    #[test]
    fn embedding_rows() {
        let mut p = NetParams::zeros(&NetConfig { embed_dim: 2, predictor_dim: 1, ..NetConfig::default() }, 3).unwrap();
        p.code_embedding = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        p.kind_embedding = Tensor::matrix(5, 2, vec![0.5, -0.5, 0.1, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x = embed_sequence(&seq(&[1, 3], &[0, 1], &[0, 4]), &p).unwrap();
        assert_eq!(x.values(), &[1.5, 1.5, 0.0, 5.1, 6.2, 4.0]);
        let empty = embed_sequence(&CodeSequence::default(), &p).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);
        assert!(matches!(embed_sequence(&seq(&[4], &[0], &[0]), &p), Err(NetError::IdOutOfRange { .. })));
        p.kind_embedding = Tensor::zeros(vec![5, 2]);
        let x = embed_sequence(&seq(&[2], &[3], &[7]), &p).unwrap();
        assert_eq!(x.values(), &[3.0, 4.0, 7.0]);
    }

    #[test]
    fn zero_gru_stays_zero() {
        let layer = GruParams::zeros(3, 2);
        let x = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        assert!(gru_forward(&x, &layer, false).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_is_direction_free() {
        let p = init_params(&small_config(4), 5).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.5, 1.0]).unwrap();
        let f = gru_forward(&x, &p.layers[0][0], false).unwrap();
        let b = gru_forward(&x, &p.layers[0][0], true).unwrap();
        assert_eq!(f, b);
    }

    /// Independent scalar recurrence using explicit indices.
    fn scalar_gru(x: &[Vec<f64>], p: &GruParams) -> Vec<Vec<f64>> {
        let h = p.hidden();
        let d = p.input();
        let w = |t: &Tensor, i: usize, j: usize| t.get2(i, j);
        let mut state = vec![0.0; h];
        let mut out = Vec::new();
        for xt in x {
            let mut next = vec![0.0; h];
            for j in 0..h {
                let lin = |wm: &Tensor, um: &Tensor, b: &Tensor| {
                    (0..d).map(|i| xt[i] * w(wm, i, j)).sum::<f64>()
                        + (0..h).map(|i| state[i] * w(um, i, j)).sum::<f64>()
                        + b.values()[j]
                };
                let z = 1.0 / (1.0 + (-lin(&p.w_z, &p.u_z, &p.b_z)).exp());
                let r = 1.0 / (1.0 + (-lin(&p.w_r, &p.u_r, &p.b_r)).exp());
                let wx: f64 = (0..d).map(|i| xt[i] * w(&p.w_n, i, j)).sum::<f64>() + p.b_n.values()[j];
                let uh: f64 = (0..h).map(|i| state[i] * w(&p.u_n, i, j)).sum::<f64>() + p.b_hn.values()[j];
                let n = (wx + r * uh).tanh();
                next[j] = (1.0 - z) * n + z * state[j];
            }
            state = next;
            out.push(state.clone());
        }
        out
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut layer = GruParams::zeros(3, 2);
        for t in layer.tensors_mut() {
            for v in t.values_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = Tensor::matrix(3, 3, rows.concat()).unwrap();
        let want = scalar_gru(&rows, &layer);
        let got = gru_forward(&x, &layer, false).unwrap();
        for t in 0..3 {
            for j in 0..2 {
                assert!((got.get2(t, j) - want[t][j]).abs() < 1e-12);
            }
        }
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let want = scalar_gru(&reversed, &layer);
        let got = gru_forward(&x, &layer, true).unwrap();
        for t in 0..3 {
            for j in 0..2 {
                assert!((got.get2(2 - t, j) - want[t][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let q = Tensor::column(vec![0.3, -1.0]);
        let (c, a) = attention_pool(&Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap(), &q);
        assert_eq!(a, vec![1.0]);
        assert_eq!(c, vec![2.0, 3.0]);
        let (c, a) = attention_pool(&Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap(), &q);
        assert!(a.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!((c[0] - 1.0).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        let (c, a) = attention_pool(&Tensor::zeros(vec![0, 2]), &q);
        assert_eq!((c, a), (vec![0.0, 0.0], vec![]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let rows: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (_, a) = attention_pool(&Tensor::matrix(5, 2, rows).unwrap(), &q);
            assert!(a.iter().all(|&w| w >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut p = NetParams::zeros(&small_config(0), 5).unwrap();
        p.head_b2 = Tensor::matrix(1, 1, vec![0.37]).unwrap();
        let g = predict(&p, &person(&[], &[], &[], &[0.0; 4])).unwrap().g;
        assert_eq!(g, 0.37);
    }

    #[test]
    fn graph_forward_matches_fast_path() {
        let p = init_params(&small_config(9), 6).unwrap();
        let people = [
            person(&[1, 4, 2, 2], &[0, 4, 1, 1], &[0, 3, 12, 1], &[0.5, 1.0, 0.0, -2.0]),
            person(&[], &[], &[], &[1.0, 0.0, 0.0, 0.0]),
            person(&[6], &[3], &[0], &[0.0; 4]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for pp in &people {
            let mut graph = Graph::new();
            let nodes = p.registered(&mut graph, true);
            let out = forward_graph(&mut graph, &nodes, &p.config, pp, false, &mut rng).unwrap();
            let fast = predict(&p, pp).unwrap().g;
            assert!((graph.scalar(out) - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_deterministic_and_train_reproducible() {
        let p = init_params(&small_config(3), 6).unwrap();
        let pp = person(&[1, 2, 3, 4, 5], &[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4], &[0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = forward(&p, &pp, false, &mut rng).unwrap();
        let b = forward(&p, &pp, false, &mut rng).unwrap();
        assert_eq!(a, b);
        let t1 = forward(&p, &pp, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let t2 = forward(&p, &pp, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn order_sensitive_pair_exists() {
        let p = init_params(&small_config(12), 6).unwrap();
        let a = person(&[1, 2], &[0, 0], &[0, 0], &[0.0; 4]);
        let b = person(&[2, 1], &[0, 0], &[0, 0], &[0.0; 4]);
        let same = person(&[3, 3], &[0, 0], &[0, 0], &[0.0; 4]);
        let ga = predict(&p, &a).unwrap().g;
        let gb = predict(&p, &b).unwrap().g;
        assert!((ga - gb).abs() > 1e-9);
        assert_eq!(predict(&p, &same).unwrap().g, predict(&p, &same.clone()).unwrap().g);
    }

    #[test]
    fn vocabulary_permutation_invariance() {
        let p = init_params(&small_config(7), 5).unwrap();
        // Swap codes 2 and 5 in the table and in the sequence.
        let mut q = p.clone();
        let e = p.config.embed_dim;
        let vals = q.code_embedding.values_mut();
        for j in 0..e {
            vals.swap(2 * e + j, 5 * e + j);
        }
        let a = person(&[2, 1, 5], &[0, 1, 2], &[0, 2, 1], &[1.0, 0.0, 0.5, 0.0]);
        let b = person(&[5, 1, 2], &[0, 1, 2], &[0, 2, 1], &[1.0, 0.0, 0.5, 0.0]);
        assert_eq!(predict(&p, &a).unwrap().g, predict(&q, &b).unwrap().g);
    }

    #[test]
    fn full_model_gradient_check() {
        let p = init_params(&small_config(5), 4).unwrap();
        let batch = [
            person(&[1, 3, 2], &[0, 4, 1], &[0, 2, 5], &[0.5, 1.0, 0.0, -1.0]),
            person(&[4], &[2], &[0], &[0.0, 0.0, 1.0, 0.0]),
            person(&[], &[], &[], &[-0.3, 0.0, 0.0, 1.0]),
        ];
        let inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let config = p.config.clone();
        let err = gradient_check(
            |g, ids| {
                let nodes = ParamNodes::from_ids(config.gru_layers, ids);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let outs: Vec<NodeId> = batch
                    .iter()
                    .map(|pp| forward_graph(g, &nodes, &config, pp, false, &mut rng).map_err(|e| match e {
                        NetError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    }))
                    .collect::<std::result::Result<_, _>>()?;
                let all = g.concat(&outs, 0)?;
                let sq = g.mul(all, all)?;
                Ok(g.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let p = init_params(&NetConfig { seed: 3, ..NetConfig::default() }, 12).unwrap();
        let back = NetParams::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(NetParams::from_json("{\"format\":\"x\"}").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig { embed_dim: 0, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { dropout_rate: 1.0, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { gru_layers: 0, ..NetConfig::default() }.validate().is_err());
    }
}

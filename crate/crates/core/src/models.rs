//! The two peer networks: GCN, GraphSAGE (mean aggregator) and GAT.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorError, Var};
use crate::graph::{neighbor_pattern, normalized_adjacency, Graph};
use crate::tensor::{CsrMatrix, Tensor};

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("hidden width {hidden} is not divisible by {heads} heads")]
    HeadsDoNotDivide { hidden: usize, heads: usize },
    #[error("model expects {expected} input features, graph has {found}")]
    InputWidth { expected: usize, found: usize },
    #[error("node {0} has no label")]
    Unlabeled(usize),
    #[error("invalid architecture settings: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Sage,
    Gat,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::Sage => "sage",
            Arch::Gat => "gat",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "sage" => Ok(Arch::Sage),
            "gat" => Ok(Arch::Gat),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

/// Per-graph sparse operators shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphOps {
    /// Symmetrically normalized adjacency with self-loops.
    pub adjacency: Arc<CsrMatrix>,
    /// Neighbor mean operator without self-loops; empty rows stay zero.
    pub neighbor_mean: Arc<CsrMatrix>,
    /// Attention pattern over each neighborhood plus the node itself.
    pub attention: Arc<CsrMatrix>,
    attention_rows: Vec<usize>,
}

impl GraphOps {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let mean_rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                let nb = graph.neighbors(i);
                let w = 1.0 / nb.len().max(1) as f64;
                nb.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        let attention = neighbor_pattern(graph, true);
        let attention_rows = attention.row_of_entries();
        Self {
            adjacency: Arc::new(normalized_adjacency(graph)),
            neighbor_mean: Arc::new(CsrMatrix::from_rows(n, &mean_rows)),
            attention,
            attention_rows,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub params: Vec<Var>,
    /// Output of the last hidden layer (the node embeddings).
    pub hidden: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    /// `(node, -log p[label])` for the requested nodes.
    pub ce: Vec<(usize, f64)>,
}

impl ForwardResult {
    pub fn ce_of(&self, node: usize) -> Option<f64> {
        self.ce.iter().find(|(i, _)| *i == node).map(|&(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    arch: Arch,
    /// Layer widths: input, hidden..., classes.
    dims: Vec<usize>,
    heads: usize,
    dropout: f64,
    attention_dropout: f64,
    params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl GnnModel {
    /// Fan-based uniform initialization for weights, zeros for biases.
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, ModelError> {
        if spec.layers == 0 || spec.classes == 0 {
            return Err(ModelError::Invalid("need at least one layer and one class".into()));
        }
        if !(0.0..1.0).contains(&spec.dropout) || !(0.0..1.0).contains(&spec.attention_dropout) {
            return Err(ModelError::Invalid("dropout rates must lie in [0, 1)".into()));
        }
        let heads = if spec.arch == Arch::Gat { spec.heads.max(1) } else { 1 };
        if spec.arch == Arch::Gat && spec.layers > 1 && spec.hidden % heads != 0 {
            return Err(ModelError::HeadsDoNotDivide {
                hidden: spec.hidden,
                heads,
            });
        }
        let mut dims = vec![spec.input_dim];
        dims.extend(std::iter::repeat_n(spec.hidden, spec.layers - 1));
        dims.push(spec.classes);

        let mut params = Vec::new();
        let last = dims.len() - 2;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            match spec.arch {
                Arch::Gcn => params.push(Tensor::glorot_uniform(fan_in, fan_out, rng)),
                Arch::Sage => params.push(Tensor::glorot_uniform(2 * fan_in, fan_out, rng)),
                Arch::Gat => {
                    let per_head = if l == last { fan_out } else { fan_out / heads };
                    for _ in 0..heads {
                        params.push(Tensor::glorot_uniform(fan_in, per_head, rng));
                        params.push(Tensor::glorot_uniform(per_head, 1, rng));
                        params.push(Tensor::glorot_uniform(per_head, 1, rng));
                    }
                }
            }
            params.push(Tensor::zeros(1, fan_out));
        }
        Ok(Self {
            arch: spec.arch,
            dims,
            heads,
            dropout: spec.dropout,
            attention_dropout: spec.attention_dropout,
            params,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("dims non-empty")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    /// Records a forward pass on `tape`. Dropout masks are drawn from `rng`
    /// only when `train` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ops: &GraphOps,
        features: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardVars, ModelError> {
        if features.cols() != self.dims[0] {
            return Err(ModelError::InputWidth {
                expected: self.dims[0],
                found: features.cols(),
            });
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut h = tape.constant(features.clone());
        let mut hidden = h;
        let layers = self.dims.len() - 1;
        let mut cursor = 0;
        for l in 0..layers {
            let is_last = l + 1 == layers;
            let input = if train {
                dropout(tape, h, self.dropout, rng)?
            } else {
                h
            };
            let out = match self.arch {
                Arch::Gcn => {
                    let (w, b) = (params[cursor], params[cursor + 1]);
                    cursor += 2;
                    let xw = tape.matmul(input, w)?;
                    let agg = tape.spmm(&ops.adjacency, xw)?;
                    tape.add_row(agg, b)?
                }
                Arch::Sage => {
                    let (w, b) = (params[cursor], params[cursor + 1]);
                    cursor += 2;
                    let mean = tape.spmm(&ops.neighbor_mean, input)?;
                    let cat = tape.concat_cols(&[input, mean])?;
                    let z = tape.matmul(cat, w)?;
                    tape.add_row(z, b)?
                }
                Arch::Gat => {
                    let mut head_outs = Vec::with_capacity(self.heads);
                    for _ in 0..self.heads {
                        let hp = [params[cursor], params[cursor + 1], params[cursor + 2]];
                        cursor += 3;
                        let alpha = self.attention(tape, ops, input, hp, train, rng)?;
                        let z = tape.matmul(input, hp[0])?;
                        head_outs.push(tape.edge_spmm(&ops.attention, alpha, z)?);
                    }
                    let b = params[cursor];
                    cursor += 1;
                    let combined = if is_last {
                        let mut acc = head_outs[0];
                        for &o in &head_outs[1..] {
                            acc = tape.add(acc, o)?;
                        }
                        tape.scale(acc, 1.0 / self.heads as f64)?
                    } else {
                        tape.concat_cols(&head_outs)?
                    };
                    tape.add_row(combined, b)?
                }
            };
            h = if is_last {
                out
            } else {
                let act = match self.arch {
                    Arch::Gat => tape.elu(out)?,
                    _ => tape.relu(out)?,
                };
                hidden = act;
                act
            };
        }
        let probs = tape.softmax_rows(h)?;
        Ok(ForwardVars {
            params,
            hidden,
            logits: h,
            probs,
        })
    }

    /// Attention coefficients of one head, one entry per stored element of
    /// `ops.attention`.
    fn attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ops: &GraphOps,
        input: Var,
        head: [Var; 3],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let [w, a_dst, a_src] = head;
        let z = tape.matmul(input, w)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let s_src = tape.matmul(z, a_src)?;
        let e_dst = tape.gather_rows(s_dst, &ops.attention_rows)?;
        let e_src = tape.gather_rows(s_src, ops.attention.indices())?;
        let e = tape.add(e_dst, e_src)?;
        let e = tape.leaky_relu(e, GAT_NEGATIVE_SLOPE)?;
        let alpha = tape.segment_softmax(e, ops.attention.indptr())?;
        if train {
            Ok(dropout(tape, alpha, self.attention_dropout, rng)?)
        } else {
            Ok(alpha)
        }
    }

    /// First-layer attention coefficients for every head (evaluation mode).
    pub fn first_layer_attention(&self, ops: &GraphOps, features: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        if self.arch != Arch::Gat {
            return Err(ModelError::Invalid("attention is only defined for gat".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let mut out = Vec::new();
        for h in 0..self.heads {
            let p: Vec<Var> = self.params[3 * h..3 * h + 3]
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let alpha = self.attention(&mut tape, ops, x, [p[0], p[1], p[2]], false, &mut unused)?;
            out.push(tape.value(alpha).clone());
        }
        Ok(out)
    }

    /// Evaluation-mode forward pass with per-node losses for `nodes`.
    pub fn evaluate(&self, ops: &GraphOps, graph: &Graph, nodes: &[usize]) -> Result<ForwardResult, ModelError> {
        let mut tape = Tape::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let fw = self.forward(&mut tape, ops, graph.features(), false, &mut unused)?;
        let ce = per_node_ce(&mut tape, fw.probs, graph.labels(), nodes)?;
        let losses = tape.value(ce).data().to_vec();
        Ok(ForwardResult {
            hidden: tape.value(fw.hidden).clone(),
            logits: tape.value(fw.logits).clone(),
            probs: tape.value(fw.probs).clone(),
            ce: nodes.iter().copied().zip(losses).collect(),
        })
    }
}

/// Inverted dropout: keeps each entry with probability `1 - rate` and scales
/// survivors by `1 / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Result<Var, TensorError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let [r, c] = tape.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::new([r, c], mask)?;
    tape.dropout_apply(x, &mask)
}

/// `-log p[i, label_i]` for each node in `nodes`, as an `n x 1` column.
pub fn per_node_ce(tape: &mut Tape, probs: Var, labels: &[usize], nodes: &[usize]) -> Result<Var, ModelError> {
    let classes = tape.value(probs).cols();
    let mut entries = Vec::with_capacity(nodes.len());
    for &i in nodes {
        match labels.get(i) {
            Some(&y) if y < classes => entries.push((i, y)),
            _ => return Err(ModelError::Unlabeled(i)),
        }
    }
    let logp = tape.log(probs)?;
    let picked = tape.pick(logp, &entries)?;
    Ok(tape.scale(picked, -1.0)?)
}

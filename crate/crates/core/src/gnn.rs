//! Message-passing graph encoder.
//!
//! Nodes are first embedded by a shared non-linear layer. Each message-pass
//! step then
//!
//! 1. aggregates `m_v = max_{e.dst = v} msg(e ⊕ e.src)` (zero when `v` has no in-edges),
//! 2. updates every node synchronously, `v' = v + agg(v ⊕ m_v ⊕ g)`,
//! 3. pools `g' = g + glb(g ⊕ Σ_v softmax_v(att(v')) · feat(v'))`.
//!
//! `msg`, `agg`, `feat` and `glb` are single LeakyReLU layers, `att` is linear.
//! Every step owns its parameters.

use rand::Rng;

use crate::error::Result;
use crate::graph::{BatchedGraph, GraphShape, StateGraph};
use crate::numerics::{Matrix, ParamSource, ParameterStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GnnConfig {
    pub shape: GraphShape,
    pub emb_size: usize,
    pub mp_steps: usize,
}

/// Node and global embeddings of a batch, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// `num_nodes × emb_size`
    pub nodes: Var,
    /// `num_graphs × emb_size`
    pub globals: Var,
}

/// Embeddings of a single graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    pub node_vecs: Matrix<T>,
    pub global_vec: Vec<T>,
}

pub const EMBED: &str = "gnn.embed";
pub const GLOBAL_EMBED: &str = "gnn.global_embed";

pub fn step_prefix(step: usize) -> String {
    format!("gnn.mp{step}")
}

/// Registers the five layers of one message-pass step under `prefix`.
pub fn register_step<T: Real, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    shape: &GraphShape,
    emb: usize,
    rng: &mut R,
) -> Result<()> {
    store.add_linear(&format!("{prefix}.msg"), shape.edge_input_width() + emb, emb, rng)?;
    store.add_linear(&format!("{prefix}.agg"), 3 * emb, emb, rng)?;
    store.add_linear(&format!("{prefix}.att"), emb, 1, rng)?;
    store.add_linear(&format!("{prefix}.feat"), emb, emb, rng)?;
    store.add_linear(&format!("{prefix}.glb"), 2 * emb, emb, rng)
}

impl GnnConfig {
    pub fn register<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        store.add_linear(EMBED, self.shape.node_width, self.emb_size, rng)?;
        if self.shape.global_width > self.emb_size {
            store.add_linear(GLOBAL_EMBED, self.shape.global_width, self.emb_size, rng)?;
        }
        for k in 0..self.mp_steps {
            register_step(store, &step_prefix(k), &self.shape, self.emb_size, rng)?;
        }
        Ok(())
    }
}

/// Per-batch constant inputs shared by every message-pass step.
pub struct BatchInputs {
    pub edge_attr: Var,
}

impl BatchInputs {
    pub fn new<T: Real>(tape: &mut Tape<T>, batch: &BatchedGraph) -> Self {
        Self {
            edge_attr: tape.input(batch.edge_matrix()),
        }
    }
}

/// Initial node embeddings and the global vector built from the global context.
pub fn embed_features<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    cfg: &GnnConfig,
    batch: &BatchedGraph,
) -> Result<EncodedBatch> {
    let x = tape.input(batch.node_matrix());
    let lin = tape.dense(params, EMBED, x)?;
    let nodes = tape.leaky_relu(lin);

    let ctx: Matrix<T> = batch.global_matrix();
    let globals = if cfg.shape.global_width > cfg.emb_size {
        let c = tape.input(ctx);
        let lin = tape.dense(params, GLOBAL_EMBED, c)?;
        tape.leaky_relu(lin)
    } else {
        let mut g = Matrix::zeros(batch.num_graphs(), cfg.emb_size);
        for r in 0..ctx.rows {
            g.row_mut(r)[..ctx.cols].copy_from_slice(ctx.row(r));
        }
        tape.input(g)
    };
    Ok(EncodedBatch { nodes, globals })
}

/// One synchronous message-pass step using the layers under `prefix`.
pub fn message_pass_step<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    prefix: &str,
    batch: &BatchedGraph,
    inputs: &BatchInputs,
    emb: EncodedBatch,
) -> Result<EncodedBatch> {
    let n = batch.num_nodes();
    let b = batch.num_graphs();

    let senders = tape.gather(emb.nodes, batch.edge_src.clone())?;
    let msg_in = tape.concat(&[inputs.edge_attr, senders])?;
    let msg_lin = tape.dense(params, &format!("{prefix}.msg"), msg_in)?;
    let msg = tape.leaky_relu(msg_lin);
    let aggregated = tape.segment_max(msg, &batch.edge_dst, n)?;

    let node_globals = tape.gather(emb.globals, batch.node_graph.clone())?;
    let agg_in = tape.concat(&[emb.nodes, aggregated, node_globals])?;
    let agg_lin = tape.dense(params, &format!("{prefix}.agg"), agg_in)?;
    let agg = tape.leaky_relu(agg_lin);
    let nodes = tape.add(emb.nodes, agg)?;

    let att_logits = tape.dense(params, &format!("{prefix}.att"), nodes)?;
    let att = tape.segment_softmax(att_logits, batch.node_graph.clone(), b)?;
    let feat_lin = tape.dense(params, &format!("{prefix}.feat"), nodes)?;
    let feat = tape.leaky_relu(feat_lin);
    let weighted = tape.scale_rows(att, feat)?;
    let pooled = tape.segment_sum(weighted, batch.node_graph.clone(), b)?;
    let glb_in = tape.concat(&[emb.globals, pooled])?;
    let glb_lin = tape.dense(params, &format!("{prefix}.glb"), glb_in)?;
    let glb = tape.leaky_relu(glb_lin);
    let globals = tape.add(emb.globals, glb)?;

    Ok(EncodedBatch { nodes, globals })
}

/// Feature embedding followed by `mp_steps` message-pass steps.
pub fn encode<T: Real, P: ParamSource<T> + ?Sized>(
    tape: &mut Tape<T>,
    params: &P,
    cfg: &GnnConfig,
    batch: &BatchedGraph,
) -> Result<EncodedBatch> {
    let inputs = BatchInputs::new(tape, batch);
    let mut emb = embed_features(tape, params, cfg, batch)?;
    for k in 0..cfg.mp_steps {
        emb = message_pass_step(tape, params, &step_prefix(k), batch, &inputs, emb)?;
    }
    Ok(emb)
}

/// Reads the embeddings of member `i` out of a batch encoding.
pub fn embeddings_of<T: Real>(tape: &Tape<T>, batch: &BatchedGraph, enc: &EncodedBatch, i: usize) -> Embeddings<T> {
    let nodes = tape.value(enc.nodes);
    let range = batch.node_range(i);
    let cols = nodes.cols;
    Embeddings {
        node_vecs: Matrix::from_vec(
            range.len(),
            cols,
            nodes.data[range.start * cols..range.end * cols].to_vec(),
        ),
        global_vec: tape.value(enc.globals).row(i).to_vec(),
    }
}

/// Encodes one graph outside any training tape.
pub fn encode_graph<T: Real, P: ParamSource<T> + ?Sized>(
    graph: &StateGraph,
    params: &P,
    cfg: &GnnConfig,
) -> Result<Embeddings<T>> {
    let batch = BatchedGraph::union(vec![graph.clone()])?;
    let mut tape = Tape::new();
    let enc = encode(&mut tape, params, cfg, &batch)?;
    Ok(embeddings_of(&tape, &batch, &enc, 0))
}

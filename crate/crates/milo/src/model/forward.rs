//! Builds one forward pass of the model on a fresh graph.

use super::{Activation, ModelParams, Positions};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId};

/// Node handles from one recorded forward pass. `param_nodes` is parallel
/// to [`ModelParams::named_params`], so gradients read back from the graph
/// pair up with parameters by position.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
    pub batch: usize,
    pub seq: usize,
}

struct LayerNodes {
    attn_norm: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ffn_norm: NodeId,
    w1: NodeId,
    w3: Option<NodeId>,
    w2: NodeId,
}

impl ModelParams {
    /// Records embedding, `n_layers` transformer blocks, and the output
    /// projection for a (batch, seq) token block; returns logits of shape
    /// (batch*seq, vocab_size). Row r holds position r % seq of sequence
    /// r / seq.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        batch: usize,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("{} tokens do not fill batches of {batch}", tokens.len()),
            });
        }
        let seq = tokens.len() / batch;
        if seq > cfg.seq_len {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("sequence length {seq} exceeds configured {}", cfg.seq_len),
            });
        }

        let mut param_nodes = Vec::new();
        let mut push = |g: &mut Graph, t: &crate::numcore::Tensor| -> Result<NodeId> {
            let id = g.input(t)?;
            param_nodes.push(id);
            Ok(id)
        };
        let emb = push(g, &self.embedding)?;
        let pos = match &self.positions {
            Some(p) => Some(push(g, p)?),
            None => None,
        };
        let layers: Vec<LayerNodes> = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerNodes {
                    attn_norm: push(g, &l.attn_norm)?,
                    wq: push(g, &l.wq)?,
                    wk: push(g, &l.wk)?,
                    wv: push(g, &l.wv)?,
                    wo: push(g, &l.wo)?,
                    ffn_norm: push(g, &l.ffn_norm)?,
                    w1: push(g, &l.w1)?,
                    w3: l.w3.as_ref().map(|w| push(g, w)).transpose()?,
                    w2: push(g, &l.w2)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = self.final_norm.as_ref().map(|t| push(g, t)).transpose()?;
        let output = self.output.as_ref().map(|t| push(g, t)).transpose()?;

        let mut x = g.embedding(emb, tokens)?;
        if let Some(pos) = pos {
            let pos_ids: Vec<u32> = (0..batch)
                .flat_map(|_| (0..seq as u32).collect::<Vec<_>>())
                .collect();
            let pos_rows = g.embedding(pos, &pos_ids)?;
            x = g.add(x, pos_rows)?;
        }
        for l in &layers {
            let h = g.rms_norm(x, l.attn_norm)?;
            let mut q = g.matmul(h, l.wq)?;
            let mut k = g.matmul(h, l.wk)?;
            let v = g.matmul(h, l.wv)?;
            if cfg.positions == Positions::Rotary {
                q = g.rope(q, seq, cfg.n_heads)?;
                k = g.rope(k, seq, cfg.n_heads)?;
            }
            let attn = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let attn_out = g.matmul(attn, l.wo)?;
            x = g.add(x, attn_out)?;

            let h2 = g.rms_norm(x, l.ffn_norm)?;
            let inner = match (cfg.activation, l.w3) {
                (Activation::Silu, Some(w3)) => {
                    let a = g.matmul(h2, l.w1)?;
                    let gate = g.silu(a)?;
                    let b = g.matmul(h2, w3)?;
                    g.mul(gate, b)?
                }
                (Activation::Gelu, None) => {
                    let a = g.matmul(h2, l.w1)?;
                    g.gelu(a)?
                }
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: "feed-forward weights do not match the configured activation"
                            .into(),
                    })
                }
            };
            let ffn_out = g.matmul(inner, l.w2)?;
            x = g.add(x, ffn_out)?;
        }
        if let Some(fnorm) = final_norm {
            x = g.rms_norm(x, fnorm)?;
        }
        let logits = match output {
            Some(w) => g.matmul_tb(x, w)?,
            None => g.matmul_tb(x, emb)?,
        };
        Ok(ForwardPass {
            logits,
            param_nodes,
            batch,
            seq,
        })
    }

    /// Forward pass on a throwaway graph, returning the logits buffer.
    pub fn logits(&self, tokens: &[u32], batch: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, tokens, batch)?;
        Ok(g.value(pass.logits).to_vec())
    }
}

//! Graph attention over landmark graphs. Attention is computed densely on
//! the fixed 68-node graph: per head, edge scores come from an additive
//! attention vector split across source/destination halves, non-edges are
//! masked to a large negative value before the row softmax (underflowing
//! to exactly zero weight), and node features are mixed by the resulting
//! attention matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::FacialGraph;
use crate::nn::{self, ActivationKind};
use crate::tensor::{Tape, Tensor, Var};

/// One attention head: projection [d_head, d_in] and attention vector
/// [2*d_head] (source half first, destination half second).
#[derive(Debug, Clone)]
pub struct GatHeadParams {
    pub w: Tensor,
    pub a: Tensor,
}

/// One GAT layer with `heads` concatenated heads; output dim is
/// heads.len() * d_head.
#[derive(Debug, Clone)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
    /// Negative slope of the leaky ReLU applied to raw attention scores.
    pub attn_slope: f64,
}

impl GatLayerParams {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, n_heads: usize, attn_slope: f64, rng: &mut R) -> Result<Self> {
        if !d_out.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "gat output dim {d_out} not divisible by {n_heads} heads"
            )));
        }
        let d_head = d_out / n_heads;
        let heads = (0..n_heads)
            .map(|_| GatHeadParams {
                w: nn::glorot_uniform(&[d_head, d_in], d_in, d_head, rng).with_grad(),
                a: nn::glorot_uniform(&[2 * d_head], 2 * d_head, 1, rng).with_grad(),
            })
            .collect();
        Ok(GatLayerParams { heads, attn_slope })
    }

    pub fn d_out(&self) -> usize {
        self.heads.len() * self.heads[0].w.shape()[0]
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(i, h)| {
                vec![
                    (format!("{prefix}.head{i}.w"), &h.w),
                    (format!("{prefix}.head{i}.a"), &h.a),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.heads
            .iter_mut()
            .enumerate()
            .flat_map(|(i, h)| {
                vec![
                    (format!("{prefix}.head{i}.w"), &mut h.w),
                    (format!("{prefix}.head{i}.a"), &mut h.a),
                ]
            })
            .collect()
    }
}

/// Output of one GAT layer plus the per-head attention matrices [n, n]
/// (rows sum to 1 over each node's neighborhood).
pub struct GatLayerOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Applies one GAT layer to node features [n, d_in]. Per head:
/// e_ij = LeakyReLU(a_src·W h_i + a_dst·W h_j) for j in N(i) (self
/// included), alpha_ij = softmax_j(e_ij), h'_i = sum_j alpha_ij W h_j.
/// Heads are concatenated, then the configured nonlinearity is applied.
pub fn gat_layer_with_attention(
    tape: &mut Tape,
    node_feats: Var,
    graph: &FacialGraph,
    params: &GatLayerParams,
    prefix: &str,
    out_activation: Option<(ActivationKind, f64)>,
) -> Result<GatLayerOutput> {
    let n = graph.node_count;
    let feat_shape = tape.shape(node_feats).to_vec();
    if feat_shape.len() != 2 || feat_shape[0] != n {
        return Err(Error::Shape {
            op: "gat_layer",
            lhs: feat_shape,
            rhs: vec![n],
        });
    }
    let mask = tape.constant(&[n, n], graph.attention_mask())?;
    let ones_row = tape.ones(&[1, n]);
    let ones_col = tape.ones(&[n, 1]);
    let mut head_outs = Vec::with_capacity(params.heads.len());
    let mut attentions = Vec::with_capacity(params.heads.len());
    for (hi, head) in params.heads.iter().enumerate() {
        let d_head = head.w.shape()[0];
        let w = tape.leaf_keyed(&format!("{prefix}.head{hi}.w"), &head.w);
        let a = tape.leaf_keyed(&format!("{prefix}.head{hi}.a"), &head.a);
        let wt = tape.transpose2d(w)?;
        let h = tape.matmul(node_feats, wt)?; // [n, d_head]
        let a_src = tape.slice(a, 0, 0, d_head)?;
        let a_dst = tape.slice(a, 0, d_head, d_head)?;
        let s_src = tape.matmul(h, a_src)?; // [n]
        let s_dst = tape.matmul(h, a_dst)?; // [n]
        // outer sum: e[i][j] = s_src[i] + s_dst[j]
        let src_col = tape.reshape(s_src, &[n, 1])?;
        let dst_row = tape.reshape(s_dst, &[1, n])?;
        let e_src = tape.matmul(src_col, ones_row)?;
        let e_dst = tape.matmul(ones_col, dst_row)?;
        let e = tape.add(e_src, e_dst)?;
        let e = tape.leaky_relu(e, params.attn_slope)?;
        let masked = tape.add(e, mask)?;
        let alpha = tape.softmax(masked, 1)?;
        let mixed = tape.matmul(alpha, h)?; // [n, d_head]
        head_outs.push(mixed);
        attentions.push(alpha);
    }
    let concat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat(1, &head_outs)?
    };
    let out = match out_activation {
        Some((kind, slope)) => nn::activation(tape, concat, kind, slope)?,
        None => concat,
    };
    Ok(GatLayerOutput {
        out,
        attention: attentions,
    })
}

pub fn gat_layer(
    tape: &mut Tape,
    node_feats: Var,
    graph: &FacialGraph,
    params: &GatLayerParams,
    prefix: &str,
    out_activation: Option<(ActivationKind, f64)>,
) -> Result<Var> {
    Ok(gat_layer_with_attention(tape, node_feats, graph, params, prefix, out_activation)?.out)
}

/// The landmark branch's frame encoder: a stack of GAT layers followed by
/// a mean over nodes, producing one embedding vector per frame.
#[derive(Debug, Clone)]
pub struct GatStack {
    pub layers: Vec<GatLayerParams>,
    pub activation: ActivationKind,
    pub leaky_slope: f64,
}

impl GatStack {
#[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        d_in: usize,
        d_out: usize,
        n_layers: usize,
        n_heads: usize,
        attn_slope: f64,
        activation: ActivationKind,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("gat stack needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut cur = d_in;
        for _ in 0..n_layers {
            layers.push(GatLayerParams::init(cur, d_out, n_heads, attn_slope, rng)?);
            cur = d_out;
        }
        Ok(GatStack {
            layers,
            activation,
            leaky_slope,
        })
    }

    /// Embeds one frame's node features [68, d_in] into a vector [d_out].
    pub fn frame_embed(
        &self,
        tape: &mut Tape,
        node_feats: Var,
        graph: &FacialGraph,
        prefix: &str,
    ) -> Result<Var> {
        let mut x = node_feats;
        for (li, layer) in self.layers.iter().enumerate() {
            x = gat_layer(
                tape,
                x,
                graph,
                layer,
                &format!("{prefix}.gat{li}"),
                Some((self.activation, self.leaky_slope)),
            )?;
        }
        tape.mean_axis(x, 0)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.gat{i}")))
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut(&format!("{prefix}.gat{i}")))
            .collect()
    }
}


#[cfg(test)]
mod embed_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn frame_embed_is_invariant_to_node_relabeling() {
        // relabeling nodes and edges together permutes GAT outputs, and
        // the mean over nodes erases the permutation: identical z_t
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)];
        let g = FacialGraph::from_edges(4, &edges);
        let pi = [2usize, 0, 3, 1];
        let perm_edges: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (pi[u], pi[v])).collect();
        let g_perm = FacialGraph::from_edges(4, &perm_edges);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
        let layer = GatLayerParams::init(2, 4, 2, 0.2, &mut rng).unwrap();
        let feats: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut permuted = vec![0.0; 8];
        for i in 0..4 {
            permuted[pi[i] * 2] = feats[i * 2];
            permuted[pi[i] * 2 + 1] = feats[i * 2 + 1];
        }
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[4, 2], feats).unwrap();
        let y = gat_layer(&mut tape, x, &g, &layer, "a", None).unwrap();
        let z = tape.mean_axis(y, 0).unwrap();
        let xp = tape.constant(&[4, 2], permuted).unwrap();
        let yp = gat_layer(&mut tape, xp, &g_perm, &layer, "b", None).unwrap();
        let zp = tape.mean_axis(yp, 0).unwrap();
        for (a, b) in tape.data(z).iter().zip(tape.data(zp)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Dual-branch context encoder: temporal self-attention over ego kinematics,
//! stacked edge-aware graph attention over the local neighborhood, and a
//! sigmoid gate fusing the two into the context embedding.

use candle_core::{DType, Device, Tensor};

use crate::dataio::{edge_features, kinematic_features, AgentState, LocalObservation, Point};
use crate::error::{ensure, Result};
use crate::nn::{self, Activation, Linear, ParamStore, TransformerBlock};

/// Shapes of the encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub gat_out: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub gat_layers: usize,
    pub t_obs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 128,
            gat_out: 64,
            heads: 8,
            temporal_layers: 2,
            gat_layers: 2,
            t_obs: crate::dataio::T_OBS,
        }
    }
}

/// Padded tensors for a batch of local graphs.
///
/// Coordinates are expressed relative to each target's position at t = 0;
/// node 0 of every graph is the target.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// `[batch, nodes, t_obs, 6]`
    pub kinematics: Tensor,
    /// `[batch, nodes, nodes, 6]`, zero on the diagonal and on non-edges.
    pub edges: Tensor,
    /// `[batch, nodes, nodes]`, 1 for edges and self-loops, 0 otherwise.
    pub adjacency: Tensor,
    /// World position of each target at t = 0.
    pub origins: Vec<Point>,
    /// Real (unpadded) node count per graph.
    pub node_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn from_observations(observations: &[&LocalObservation], dtype: DType, device: &Device) -> Result<GraphBatch> {
        ensure!(!observations.is_empty(), "empty observation batch");
        let t_obs = observations[0].ego.history.len();
        let nmax = observations.iter().map(|o| o.graph.nodes.len()).max().unwrap_or(1);
        let b = observations.len();
        let mut kin = vec![0.0; b * nmax * t_obs * 6];
        let mut edges = vec![0.0; b * nmax * nmax * 6];
        let mut adj = vec![0.0; b * nmax * nmax];
        let mut origins = Vec::with_capacity(b);
        let mut node_counts = Vec::with_capacity(b);

        for (bi, obs) in observations.iter().enumerate() {
            let origin = obs.ego.current();
            let shift = [-origin[0], -origin[1]];
            let histories = obs.node_histories();
            let mut states = Vec::with_capacity(histories.len());
            for (ni, h) in histories.iter().enumerate() {
                ensure!(h.len() == t_obs, "ragged history in batch");
                let centered = h.translated(shift);
                let k = kinematic_features(&centered)?;
                for (t, row) in k.rows().iter().enumerate() {
                    let at = ((bi * nmax + ni) * t_obs + t) * 6;
                    kin[at..at + 6].copy_from_slice(row);
                }
                states.push(AgentState::from_history(&centered)?);
            }
            let dense = obs.graph.adjacency();
            for i in 0..nmax {
                for j in 0..nmax {
                    let link = if i < dense.len() && j < dense.len() {
                        dense[i][j]
                    } else {
                        i == j
                    };
                    if !link {
                        continue;
                    }
                    adj[(bi * nmax + i) * nmax + j] = 1.0;
                    if i != j {
                        let e = edge_features(states[i], states[j]).0;
                        let at = ((bi * nmax + i) * nmax + j) * 6;
                        edges[at..at + 6].copy_from_slice(&e);
                    }
                }
            }
            origins.push(origin);
            node_counts.push(histories.len());
        }
        Ok(GraphBatch {
            kinematics: nn::tensor(kin, &[b, nmax, t_obs, 6], dtype, device)?,
            edges: nn::tensor(edges, &[b, nmax, nmax, 6], dtype, device)?,
            adjacency: nn::tensor(adj, &[b, nmax, nmax], dtype, device)?,
            origins,
            node_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Transformer over the `t_obs` kinematic rows, mean-pooled over time.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub input: Linear,
    pub blocks: Vec<TransformerBlock>,
    position: Tensor,
}

impl TemporalEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let input = ps.linear(&format!("{name}.input"), 6, cfg.hidden)?;
        let blocks = (0..cfg.temporal_layers)
            .map(|l| TransformerBlock::new(ps, &format!("{name}.block{l}"), cfg.hidden, cfg.heads, 2 * cfg.hidden))
            .collect::<Result<_>>()?;
        let steps: Vec<f64> = (0..cfg.t_obs).map(|t| t as f64).collect();
        let position = nn::sinusoidal(&steps, cfg.hidden, ps.dtype(), ps.device())?;
        Ok(TemporalEncoder {
            input,
            blocks,
            position,
        })
    }

    /// Input embedding plus position encoding, `[n, t_obs, hidden]`.
    pub fn embed(&self, m: &Tensor) -> Result<Tensor> {
        let (_, t, c) = m.dims3()?;
        ensure!(
            c == 6 && t == self.position.dims()[0],
            "kinematics must be [n, {}, 6]",
            self.position.dims()[0]
        );
        Ok(self.input.forward(m)?.broadcast_add(&self.position)?)
    }

    /// `m`: `[n, t_obs, 6]` to `[n, hidden]`.
    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(m)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x.mean(1)?)
    }

    /// Attention probabilities of every block, each `[n, heads, t, t]`.
    pub fn attention_maps(&self, m: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.embed(m)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            maps.push(block.attn.weights(&block.norm_attn.forward(&x)?)?);
            x = block.forward(&x)?;
        }
        Ok(maps)
    }
}

/// One multi-head graph-attention layer with edge features.
///
/// Score: `LeakyReLU(a_src·Wh_i + a_dst·Wh_j + a_e·e_ij + b)` per head, normalized
/// over the neighbors of `i` (self included). Message: `Wh_j + W_e e_ij`.
/// Heads are concatenated and projected to the output width.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub project: Linear,
    pub att_src: Tensor,
    pub att_dst: Tensor,
    pub edge_score: Linear,
    pub edge_message: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl GatLayer {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, heads: usize) -> Result<Self> {
        ensure!(
            fan_out % heads == 0,
            "GAT width {fan_out} not divisible by {heads} heads"
        );
        let head_dim = fan_out / heads;
        let bound = 1.0 / ((2 * head_dim + 6) as f64).sqrt();
        Ok(GatLayer {
            project: ps.linear_no_bias(&format!("{name}.w"), fan_in, heads * head_dim)?,
            att_src: ps.uniform(&format!("{name}.a_src"), &[heads, head_dim], bound)?,
            att_dst: ps.uniform(&format!("{name}.a_dst"), &[heads, head_dim], bound)?,
            edge_score: ps.linear(&format!("{name}.a_edge"), 6, heads)?,
            edge_message: ps.linear_no_bias(&format!("{name}.w_e"), 6, heads * head_dim)?,
            out: ps.linear(&format!("{name}.out"), heads * head_dim, fan_out)?,
            heads,
            head_dim,
        })
    }

    fn projected(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(self.project.forward(x)?.reshape((b, n, self.heads, self.head_dim))?)
    }

    /// Attention coefficients `[batch, i, j, heads]`, summing to 1 over `j`.
    pub fn attention(&self, x: &Tensor, edges: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let wh = self.projected(x)?;
        self.attention_from(&wh, edges, adjacency)
    }

    fn attention_from(&self, wh: &Tensor, edges: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let s_src = wh.broadcast_mul(&self.att_src)?.sum(3)?; // [b, n, h]
        let s_dst = wh.broadcast_mul(&self.att_dst)?.sum(3)?;
        let s_edge = self.edge_score.forward(edges)?; // [b, n, n, h]
        let scores = s_edge
            .broadcast_add(&s_src.unsqueeze(2)?)?
            .broadcast_add(&s_dst.unsqueeze(1)?)?;
        let scores = nn::leaky_relu(&scores, LEAKY_SLOPE)?;
        let mask = ((adjacency - 1.0)? * 1e9)?.unsqueeze(3)?;
        nn::softmax(&scores.broadcast_add(&mask)?, 2)
    }

    /// Aggregated messages before the output projection, `[batch, nodes, heads, head_dim]`.
    pub fn aggregate(&self, x: &Tensor, edges: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let wh = self.projected(x)?;
        let alpha = self.attention_from(&wh, edges, adjacency)?;
        // node part: sum_j alpha_ij Wh_j
        let alpha_h = alpha.permute((0, 3, 1, 2))?.contiguous()?; // [b, h, i, j]
        let wh_h = wh.permute((0, 2, 1, 3))?.contiguous()?; // [b, h, j, f]
        let nodes = alpha_h.matmul(&wh_h)?.permute((0, 2, 1, 3))?; // [b, i, h, f]
                                                                   // edge part: sum_j alpha_ij W_e e_ij
        let we = self
            .edge_message
            .forward(edges)?
            .reshape((b, n, n, self.heads, self.head_dim))?;
        let edge_part = we.broadcast_mul(&alpha.unsqueeze(4)?)?.sum(2)?;
        Ok((nodes + edge_part)?)
    }

    pub fn forward(&self, x: &Tensor, edges: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let agg = self
            .aggregate(x, edges, adjacency)?
            .reshape((b, n, self.heads * self.head_dim))?;
        self.out.forward(&agg)
    }
}

/// `h = s ⊙ φ_self(h_tau) + (1 − s) ⊙ φ_soc(h_soc)` with `s = σ(W_g [h_tau ∥ h_soc] + b_g)`.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub gate: Linear,
    pub phi_self: Linear,
    pub phi_soc: Linear,
}

/// Intermediate values of the fusion, for inspection.
pub struct FusionParts {
    pub gate: Tensor,
    pub self_branch: Tensor,
    pub social_branch: Tensor,
    pub fused: Tensor,
}

impl GatedFusion {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, social: usize) -> Result<Self> {
        Ok(GatedFusion {
            gate: ps.linear(&format!("{name}.gate"), hidden + social, hidden)?,
            phi_self: ps.linear(&format!("{name}.phi_self"), hidden, hidden)?,
            phi_soc: ps.linear(&format!("{name}.phi_soc"), social, hidden)?,
        })
    }

    pub fn parts(&self, h_tau: &Tensor, h_soc: &Tensor) -> Result<FusionParts> {
        let joint = Tensor::cat(&[h_tau, h_soc], 1)?;
        let gate = nn::sigmoid(&self.gate.forward(&joint)?)?;
        let self_branch = self.phi_self.forward(h_tau)?;
        let social_branch = self.phi_soc.forward(h_soc)?;
        let fused = ((&gate * &self_branch)? + ((1.0 - &gate)? * &social_branch)?)?;
        Ok(FusionParts {
            gate,
            self_branch,
            social_branch,
            fused,
        })
    }

    pub fn forward(&self, h_tau: &Tensor, h_soc: &Tensor) -> Result<Tensor> {
        Ok(self.parts(h_tau, h_soc)?.fused)
    }
}

/// Embeddings produced for a batch of targets.
pub struct Encoded {
    /// Fused context `[batch, hidden]`.
    pub context: Tensor,
    /// Temporal embedding of the target `[batch, hidden]`.
    pub temporal: Tensor,
    /// Social embedding of the target `[batch, gat_out]`.
    pub social: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub temporal: TemporalEncoder,
    pub gat: Vec<GatLayer>,
    pub fusion: GatedFusion,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: EncoderConfig) -> Result<Encoder> {
        ensure!(cfg.gat_layers >= 1, "at least one GAT layer required");
        let temporal = TemporalEncoder::new(ps, "encoder.temporal", &cfg)?;
        let gat = (0..cfg.gat_layers)
            .map(|l| {
                let fan_in = if l == 0 { cfg.hidden } else { cfg.gat_out };
                GatLayer::new(ps, &format!("encoder.gat{l}"), fan_in, cfg.gat_out, cfg.heads)
            })
            .collect::<Result<_>>()?;
        let fusion = GatedFusion::new(ps, "encoder.fusion", cfg.hidden, cfg.gat_out)?;
        Ok(Encoder {
            cfg,
            temporal,
            gat,
            fusion,
        })
    }

    /// Temporal embeddings of every node, `[batch, nodes, hidden]`.
    pub fn node_embeddings(&self, batch: &GraphBatch) -> Result<Tensor> {
        let (b, n, t, c) = batch.kinematics.dims4()?;
        let flat = batch.kinematics.reshape((b * n, t, c))?;
        Ok(self.temporal.forward(&flat)?.reshape((b, n, self.cfg.hidden))?)
    }

    /// Stacked GAT over node embeddings; returns every node's social embedding.
    pub fn social(&self, nodes: &Tensor, batch: &GraphBatch) -> Result<Tensor> {
        let mut x = nodes.clone();
        for (l, layer) in self.gat.iter().enumerate() {
            x = layer.forward(&x, &batch.edges, &batch.adjacency)?;
            if l + 1 < self.gat.len() {
                x = Activation::Elu.apply(&x)?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &GraphBatch) -> Result<Encoded> {
        let nodes = self.node_embeddings(batch)?;
        let social = self.social(&nodes, batch)?.narrow(1, 0, 1)?.squeeze(1)?;
        let temporal = nodes.narrow(1, 0, 1)?.squeeze(1)?;
        let context = self.fusion.forward(&temporal, &social)?;
        Ok(Encoded {
            context,
            temporal,
            social,
        })
    }
}

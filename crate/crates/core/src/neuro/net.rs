//! The cluster-consensus graph network.
//!
//! Per step and for a batch of graphs:
//!
//! 1. consumers are encoded with DeepSets over their resources,
//!    `Phi_m = phi2(sum_l phi1(d_m, de_ml, kind_ml))`;
//! 2. agents are encoded from their own position and supply, `Psi_i`;
//! 3. a one-hop graph filter mixes agent features and adds the consumer sum,
//!    `Delta = Psi B0 + S Psi B1 + sum_m Phi_m + b_u`;
//! 4. attention over consumers, `Xi = softmax(tanh(Delta + x A0 + S x A1 + b_x) Phi^T)`;
//! 5. each agent drives its state with the features of its dominant consumer,
//!    `f = relu(W Phi_argmax + b)`;
//! 6. the state follows `x' = -(tau + f) o x - S x A + f o B_f` (one Euler step, clamped);
//! 7. `y = [x, Xi Phi, Delta, p]` feeds the output MLP.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::dynamics::OdeParams;
use super::gradcheck::random_mat;
use super::params::{Activation, Bound, Mlp, ParamId, ParamSet};
use super::tape::{Mat, Tape, Var};
use crate::world::Observation;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NetShape {
    pub dim: usize,
    pub resources: usize,
    pub feature_dim: usize,
    pub state_dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub out_dim: usize,
    /// Gain of the last output layer at initialization.
    pub out_gain: f64,
    /// Euler step of the state ODE.
    pub ode_dt: f64,
}

impl NetShape {
    pub fn consumer_input(&self) -> usize {
        self.dim + 2
    }

    pub fn agent_input(&self) -> usize {
        self.dim + 2 * self.resources
    }

    /// Width of `y = [x, Xi Phi, Delta, p]`.
    pub fn head_input(&self) -> usize {
        self.state_dim + 2 * self.feature_dim + self.dim
    }
}

/// Network inputs for `samples` graphs of `agents` agents each.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub samples: usize,
    pub agents: usize,
    pub consumers: usize,
    pub resources: usize,
    /// One row per (sample, consumer, resource): `[d_m, de_ml, kind_ml]`.
    pub resource_rows: Mat,
    /// One row per (sample, agent): `[p_i, so_i, kinds_i]`.
    pub agent_rows: Mat,
    pub positions: Mat,
    pub graphs: Rc<Vec<Mat>>,
}

impl GraphBatch {
    /// `samples[b] = (observations of every agent, support matrix)`.
    pub fn new(samples: &[(&[Observation], &Mat)]) -> Result<Self> {
        let (first, _) = samples.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let agents = first.len();
        let head = first.first().ok_or_else(|| Error::Dimension("sample without agents".into()))?;
        let (consumers, dim, resources) = (head.consumers.len(), head.own_position.len(), head.own_supply.len());

        let mut resource_rows = Mat::zeros((samples.len() * consumers * resources, dim + 2));
        let mut agent_rows = Mat::zeros((samples.len() * agents, dim + 2 * resources));
        let mut positions = Mat::zeros((samples.len() * agents, dim));
        let mut graphs = Vec::with_capacity(samples.len());
        for (b, (obs, graph)) in samples.iter().enumerate() {
            if obs.len() != agents || graph.dim() != (agents, agents) {
                return Err(Error::Dimension(format!(
                    "sample {b}: {} observations and graph {:?}, expected {agents}",
                    obs.len(),
                    graph.dim()
                )));
            }
            for (c, consumer) in obs[0].consumers.iter().enumerate() {
                for l in 0..resources {
                    let mut row = resource_rows.row_mut((b * consumers + c) * resources + l);
                    for k in 0..dim {
                        row[k] = consumer.position[k];
                    }
                    row[dim] = consumer.demand[l];
                    row[dim + 1] = consumer.kinds[l].code();
                }
            }
            for (i, o) in obs.iter().enumerate() {
                let r = b * agents + i;
                for k in 0..dim {
                    agent_rows[[r, k]] = o.own_position[k];
                    positions[[r, k]] = o.own_position[k];
                }
                for l in 0..resources {
                    agent_rows[[r, dim + l]] = o.own_supply[l];
                    agent_rows[[r, dim + resources + l]] = o.own_kinds[l].code();
                }
            }
            graphs.push((*graph).clone());
        }
        Ok(Self {
            samples: samples.len(),
            agents,
            consumers,
            resources,
            resource_rows,
            agent_rows,
            positions,
            graphs: Rc::new(graphs),
        })
    }

    pub fn rows(&self) -> usize {
        self.samples * self.agents
    }
}

#[derive(Clone, Debug)]
struct NetIds {
    phi1: Mlp,
    phi2: Mlp,
    psi: Mlp,
    filter_self: ParamId,
    filter_hop: ParamId,
    filter_bias: ParamId,
    attn_self: ParamId,
    attn_hop: ParamId,
    attn_bias: ParamId,
    drive_weight: ParamId,
    drive_bias: ParamId,
    coupling_raw: ParamId,
    tau_raw: ParamId,
    bias_f: ParamId,
    head: Mlp,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub consumer_features: Var,
    pub agent_features: Var,
    pub filtered: Var,
    pub attention: Var,
    pub drive: Var,
    /// Consumer chosen by each agent row.
    pub selected: Vec<usize>,
    pub state: Var,
    pub y: Var,
    pub out: Var,
    pub tau: Var,
    pub coupling: Var,
}

#[derive(Clone, Debug)]
pub struct LgtcNet {
    shape: NetShape,
    params: ParamSet,
    ids: NetIds,
}

impl LgtcNet {
    pub fn new(shape: NetShape, rng: &mut ChaCha8Rng) -> Self {
        let (g, f, h) = (shape.feature_dim, shape.state_dim, shape.encoder_hidden);
        let mut p = ParamSet::new();
        use Activation::{Identity, Tanh};
        let phi1 = Mlp::new(&mut p, "phi1", &[shape.consumer_input(), h, g], Tanh, Tanh, 1.0, rng);
        let phi2 = Mlp::new(&mut p, "phi2", &[g, h, g], Tanh, Identity, 1.0, rng);
        let psi = Mlp::new(&mut p, "psi", &[shape.agent_input(), h, g], Tanh, Identity, 1.0, rng);
        let gs = 1.0 / (g as f64).sqrt();
        let fs = 1.0 / (f as f64).sqrt();
        let ids = NetIds {
            phi1,
            phi2,
            psi,
            filter_self: p.insert("filter.self", random_mat(rng, g, g, gs)),
            filter_hop: p.insert("filter.hop", random_mat(rng, g, g, gs)),
            filter_bias: p.insert("filter.bias", Mat::zeros((1, g))),
            attn_self: p.insert("attention.self", random_mat(rng, f, g, fs)),
            attn_hop: p.insert("attention.hop", random_mat(rng, f, g, fs)),
            attn_bias: p.insert("attention.bias", Mat::zeros((1, g))),
            drive_weight: p.insert("drive.weight", random_mat(rng, g, f, gs)),
            drive_bias: p.insert("drive.bias", Mat::zeros((1, f))),
            coupling_raw: p.insert("ode.coupling_raw", random_mat(rng, f, f, 0.3 * fs)),
            tau_raw: p.insert("ode.tau_raw", Mat::zeros((1, f))),
            bias_f: p.insert("ode.bias_f", random_mat(rng, 1, f, 0.5).mapv(|v| v.clamp(-1.0, 1.0))),
            head: {
                let mut widths = vec![shape.head_input()];
                widths.extend(&shape.head_hidden);
                widths.push(shape.out_dim);
                Mlp::new(&mut p, "head", &widths, Tanh, Identity, shape.out_gain, rng)
            },
        };
        Self { shape, params: p, ids }
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Projects `B_f` back onto `[-1, 1]`.
    pub fn project(&mut self) {
        self.params.get_mut(self.ids.bias_f).mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }

    /// Current constrained ODE parameters.
    pub fn ode_params(&self) -> OdeParams {
        OdeParams::from_raw(
            self.params.get(self.ids.tau_raw).as_slice().unwrap(),
            self.params.get(self.ids.coupling_raw),
            self.params.get(self.ids.bias_f).as_slice().unwrap(),
        )
    }

    pub fn initial_state(&self, agents: usize) -> Mat {
        Mat::zeros((agents, self.shape.state_dim))
    }

    pub fn encode_consumers(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch) -> Var {
        let rows = tape.leaf(batch.resource_rows.clone());
        let per_resource = self.ids.phi1.forward(tape, bound, rows);
        let pooled = tape.segment_sum(per_resource, batch.resources);
        self.ids.phi2.forward(tape, bound, pooled)
    }

    pub fn encode_agents(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch) -> Var {
        let rows = tape.leaf(batch.agent_rows.clone());
        self.ids.psi.forward(tape, bound, rows)
    }

    /// `Delta = Psi B0 + S Psi B1 + sum_m Phi_m + b_u`.
    pub fn filter_input(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, psi: Var, phi: Var) -> Var {
        let own = tape.matmul(psi, bound.var(self.ids.filter_self));
        let mixed = tape.graph_mix(batch.graphs.clone(), psi);
        let hop = tape.matmul(mixed, bound.var(self.ids.filter_hop));
        let consumer_sum = tape.segment_sum(phi, batch.consumers);
        let broadcast = tape.repeat_rows(consumer_sum, batch.agents);
        let delta = tape.add(own, hop);
        let delta = tape.add(delta, broadcast);
        tape.add_row(delta, bound.var(self.ids.filter_bias))
    }

    /// Row-wise softmax over consumers of `tanh(Delta + x A0 + S x A1 + b_x) Phi^T`.
    pub fn attention(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, delta: Var, x: Var, phi: Var) -> Var {
        let own = tape.matmul(x, bound.var(self.ids.attn_self));
        let mixed = tape.graph_mix(batch.graphs.clone(), x);
        let hop = tape.matmul(mixed, bound.var(self.ids.attn_hop));
        let pre = tape.add(delta, own);
        let pre = tape.add(pre, hop);
        let pre = tape.add_row(pre, bound.var(self.ids.attn_bias));
        let h = tape.tanh(pre);
        let logits = tape.grouped_logits(h, phi, batch.agents, batch.consumers);
        tape.softmax_rows(logits)
    }

    /// `f_i = relu(W Phi_{argmax_m Xi_im} + b)`; the argmax itself carries no gradient.
    pub fn select_dynamics(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, xi: Var, phi: Var) -> (Var, Vec<usize>) {
        let selected: Vec<usize> = tape.value(xi).rows().into_iter().map(|row| argmax(row.iter().copied())).collect();
        let idx = selected
            .iter()
            .enumerate()
            .map(|(r, &m)| (r / batch.agents) * batch.consumers + m)
            .collect();
        let chosen = tape.gather_rows(phi, idx);
        let z = tape.matmul(chosen, bound.var(self.ids.drive_weight));
        let z = tape.add_row(z, bound.var(self.ids.drive_bias));
        (tape.relu(z), selected)
    }

    /// Constrained `(tau, A)` on the tape.
    pub fn ode_terms(&self, tape: &mut Tape, bound: &Bound) -> (Var, Var) {
        let tau = tape.softplus(bound.var(self.ids.tau_raw));
        let raw = bound.var(self.ids.coupling_raw);
        let raw_t = tape.transpose(raw);
        (tau, tape.matmul(raw_t, raw))
    }

    /// One clamped Euler step of the state ODE.
    pub fn ode_step(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, x: Var, f: Var, tau: Var, coupling: Var) -> Var {
        let rate = tape.add_row(f, tau);
        let decay = tape.mul(rate, x);
        let mixed = tape.graph_mix(batch.graphs.clone(), x);
        let couple = tape.matmul(mixed, coupling);
        let drive = tape.mul_row(f, bound.var(self.ids.bias_f));
        let dx = tape.sub(drive, decay);
        let dx = tape.sub(dx, couple);
        let step = tape.scale(dx, self.shape.ode_dt);
        let next = tape.add(x, step);
        tape.clamp(next, -1.0, 1.0)
    }

    /// `y = [x, Xi Phi, Delta, p]`.
    pub fn output_head(&self, tape: &mut Tape, batch: &GraphBatch, x: Var, xi: Var, phi: Var, delta: Var) -> Var {
        let mix = tape.grouped_mix(xi, phi, batch.agents, batch.consumers);
        let p = tape.leaf(batch.positions.clone());
        tape.concat_cols(&[x, mix, delta, p])
    }

    /// Full pass from state `x` (a constant, one row per agent row of the batch).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, x: &Mat) -> Forward {
        assert_eq!(x.dim(), (batch.rows(), self.shape.state_dim), "state shape does not match batch");
        let phi = self.encode_consumers(tape, bound, batch);
        let psi = self.encode_agents(tape, bound, batch);
        let delta = self.filter_input(tape, bound, batch, psi, phi);
        let x = tape.leaf(x.clone());
        let xi = self.attention(tape, bound, batch, delta, x, phi);
        let (drive, selected) = self.select_dynamics(tape, bound, batch, xi, phi);
        let (tau, coupling) = self.ode_terms(tape, bound);
        let state = self.ode_step(tape, bound, batch, x, drive, tau, coupling);
        let y = self.output_head(tape, batch, state, xi, phi, delta);
        let out = self.ids.head.forward(tape, bound, y);
        Forward {
            consumer_features: phi,
            agent_features: psi,
            filtered: delta,
            attention: xi,
            drive,
            selected,
            state,
            y,
            out,
            tau,
            coupling,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

//! Gaussian actor and scalar critic, each on its own copy of the graph network.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{EnvConfig, ModelConfig};
use crate::neuro::net::{Forward, GraphBatch, LgtcNet, NetShape};
use crate::neuro::params::{Bound, ParamId, ParamSet};
use crate::neuro::tape::{Mat, Tape, Var};
use crate::world::Observation;
use crate::{Error, Result};

fn shape(env: &EnvConfig, model: &ModelConfig, out_dim: usize, out_gain: f64) -> NetShape {
    NetShape {
        dim: env.dim,
        resources: env.num_resources,
        feature_dim: model.feature_dim,
        state_dim: model.state_dim,
        encoder_hidden: model.encoder_hidden,
        head_hidden: model.head_hidden.clone(),
        out_dim,
        out_gain,
        ode_dt: env.dt,
    }
}

fn finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteOutput)
    }
}

/// Per-row Gaussian log density `sum_k log N(a_k; mu_k, sigma_k^2)`, `rows x 1`.
pub fn log_prob(tape: &mut Tape, mean: Var, std: Var, actions: Var) -> Var {
    let diff = tape.sub(actions, mean);
    let z = tape.div(diff, std);
    let z2 = tape.square(z);
    let quad = tape.scale(z2, -0.5);
    let log_std = tape.ln(std);
    let per_dim = tape.sub(quad, log_std);
    let per_dim = tape.add_scalar(per_dim, -0.5 * (2.0 * PI).ln());
    tape.sum_cols(per_dim)
}

/// Tape handles of one actor pass.
#[derive(Clone, Debug)]
pub struct ActorPass {
    pub mean: Var,
    pub std: Var,
    pub net: Forward,
}

#[derive(Clone, Debug)]
pub struct ActorStep {
    pub actions: Mat,
    pub log_probs: Vec<f64>,
    pub mean: Mat,
    pub std: Mat,
    /// Recurrent state after this step.
    pub state: Mat,
}

#[derive(Clone, Debug)]
pub struct Actor {
    net: LgtcNet,
    /// Global pre-softplus std when the std does not depend on the state.
    std_raw: Option<ParamId>,
    init_std_raw: f64,
    sigma_floor: f64,
    dim: usize,
}

impl Actor {
    pub fn new(env: &EnvConfig, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let out = if model.state_dependent_std { 2 * env.dim } else { env.dim };
        let mut net = LgtcNet::new(shape(env, model, out, 0.01), rng);
        let std_raw = (!model.state_dependent_std)
            .then(|| net.params_mut().insert("policy.std_raw", Mat::from_elem((1, env.dim), model.init_std_raw)));
        Self { net, std_raw, init_std_raw: model.init_std_raw, sigma_floor: model.sigma_floor, dim: env.dim }
    }

    pub fn net(&self) -> &LgtcNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut LgtcNet {
        &mut self.net
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn initial_state(&self, agents: usize) -> Mat {
        self.net.initial_state(agents)
    }

    /// `sigma = softplus(raw) + floor`; the mean is unbounded, the world clamps commands.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, x: &Mat) -> ActorPass {
        let net = self.net.forward(tape, bound, batch, x);
        let mean = tape.slice_cols(net.out, 0, self.dim);
        let raw = match self.std_raw {
            Some(id) => tape.repeat_rows(bound.var(id), batch.rows()),
            None => {
                let raw = tape.slice_cols(net.out, self.dim, 2 * self.dim);
                tape.add_scalar(raw, self.init_std_raw)
            }
        };
        let std = tape.softplus(raw);
        let std = tape.add_scalar(std, self.sigma_floor);
        ActorPass { mean, std, net }
    }

    /// Samples actions for every agent of one world; `rng = None` returns the mean.
    pub fn act(&self, obs: &[Observation], graph: &Mat, x: &Mat, rng: Option<&mut ChaCha8Rng>) -> Result<ActorStep> {
        let batch = GraphBatch::new(&[(obs, graph)])?;
        let mut tape = Tape::new();
        let bound = self.net.params().bind(&mut tape);
        let pass = self.forward(&mut tape, &bound, &batch, x);
        let mean = tape.value(pass.mean).clone();
        let std = tape.value(pass.std).clone();
        finite(&mean)?;
        finite(&std)?;
        let actions = match rng {
            Some(rng) => {
                let noise = Mat::from_shape_fn(mean.dim(), |_| rng.sample::<f64, _>(StandardNormal));
                &mean + &(&std * &noise)
            }
            None => mean.clone(),
        };
        let a = tape.leaf(actions.clone());
        let lp = log_prob(&mut tape, pass.mean, pass.std, a);
        let log_probs = tape.value(lp).column(0).to_vec();
        let state = tape.value(pass.net.state).clone();
        Ok(ActorStep { actions, log_probs, mean, std, state })
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    net: LgtcNet,
}

impl Critic {
    pub fn new(env: &EnvConfig, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self { net: LgtcNet::new(shape(env, model, 1, 1.0), rng) }
    }

    pub fn net(&self) -> &LgtcNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut LgtcNet {
        &mut self.net
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn initial_state(&self, agents: usize) -> Mat {
        self.net.initial_state(agents)
    }

    /// Values as a `rows x 1` tape node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, x: &Mat) -> Forward {
        self.net.forward(tape, bound, batch, x)
    }

    /// One value per agent plus the critic's next recurrent state.
    pub fn evaluate(&self, obs: &[Observation], graph: &Mat, x: &Mat) -> Result<(Vec<f64>, Mat)> {
        let batch = GraphBatch::new(&[(obs, graph)])?;
        let mut tape = Tape::new();
        let bound = self.net.params().bind(&mut tape);
        let fw = self.forward(&mut tape, &bound, &batch, x);
        let values = tape.value(fw.out);
        finite(values)?;
        Ok((values.column(0).to_vec(), tape.value(fw.state).clone()))
    }
}

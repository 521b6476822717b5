//! The federated round loop.

use rand::seq::{index, SliceRandom};

use super::comm::payload_params;
use super::config::{ExperimentConfig, Weighting};
use super::diagnostics::{bound_diagnostics, omega, BoundConstants, BoundRecord, RoundObservation};
use super::metrics::RoundMetrics;
use super::partition::{dirichlet_partition, ClientShard};
use super::task::{generate_task, Plant, Task};
use crate::adapter::{grad_a, init_adapter, sgd_step, AdapterConfig, AdapterState};
use crate::baselines::{
    aggregation_error_weighted, federa_aggregate_weighted, fedex_aggregate_weighted,
    fedit_aggregate_weighted, ffa_aggregate_weighted, ffa_step, init_lora, lora_grads, lora_step,
    mean_product, LoraState, SchemeId,
};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::parallel::Execution;
use crate::rng::{derive, rng_for, stream};
use crate::server::{
    aggregate_gram, align_with, decompose, gram_preservation_error, procrustes_align,
    trivial_alignment, truncate_factor,
};

const LAYER_SEED_KEY: u64 = 0x4C41_5945_5253;

/// Server-side model between rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalState {
    /// One adapter per layer.
    Florg(Vec<AdapterState>),
    /// One LoRA state per layer; `personal_b[client][layer]` is filled only
    /// for the shared-A scheme, whose `b` never leaves the client.
    Lora {
        layers: Vec<LoraState>,
        personal_b: Vec<Vec<Matrix>>,
    },
}

impl GlobalState {
    pub fn layer_count(&self) -> usize {
        match self {
            GlobalState::Florg(l) => l.len(),
            GlobalState::Lora { layers, .. } => layers.len(),
        }
    }
}

/// What one layer of one client sends up.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpload {
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
}

impl LayerUpload {
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.b.iter().chain(self.a.iter()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub sample_count: usize,
    pub steps: usize,
    pub layers: Vec<LayerUpload>,
    /// Locally kept `b` per layer (shared-A scheme only).
    pub retained_b: Option<Vec<Matrix>>,
}

/// Global loss, summed over layers, and mean accuracy for classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalEval {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub state: GlobalState,
    pub metrics: RoundMetrics,
    /// Present for the single-matrix scheme.
    pub observation: Option<RoundObservation>,
    pub participants: Vec<usize>,
}

/// Tasks, shards and settings for one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ExperimentConfig,
    tasks: Vec<Task>,
    shards: Vec<ClientShard>,
    exec: Execution,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let plant = Plant {
            scale: cfg.alpha / cfg.rank as f64,
            scheme: cfg.init_scheme,
        };
        let tasks = (0..cfg.layers)
            .map(|l| {
                let mut spec = cfg.task.clone();
                spec.seed = layer_seed(cfg.seed, l);
                generate_task(&spec, &plant)
            })
            .collect::<Result<Vec<_>>>()?;
        let shards = dirichlet_partition(
            &tasks[0].train.labels,
            cfg.num_clients,
            cfg.dirichlet_rho,
            cfg.seed,
        )?;
        Ok(Simulation {
            cfg,
            tasks,
            shards,
            exec,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn initial_state(&self) -> Result<GlobalState> {
        let cfg = &self.cfg;
        if cfg.scheme == SchemeId::Florg {
            let layers = self
                .tasks
                .iter()
                .enumerate()
                .map(|(l, task)| {
                    init_adapter(
                        AdapterConfig {
                            d_out: task.d_out(),
                            d_in: task.d_in(),
                            rank: cfg.rank,
                            alpha: cfg.alpha,
                            init_scheme: cfg.init_scheme,
                            seed: layer_seed(cfg.seed, l),
                        },
                        task.w0.clone(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GlobalState::Florg(layers))
        } else {
            let layers = self
                .tasks
                .iter()
                .enumerate()
                .map(|(l, task)| {
                    init_lora(
                        task.w0.clone(),
                        cfg.rank,
                        cfg.alpha,
                        layer_seed(cfg.seed, l),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let personal_b = if cfg.scheme == SchemeId::FedSaLora {
                (0..cfg.num_clients)
                    .map(|_| layers.iter().map(|s| s.b.clone()).collect())
                    .collect()
            } else {
                Vec::new()
            };
            Ok(GlobalState::Lora { layers, personal_b })
        }
    }

    /// `⌈ratio·N⌉` distinct clients, ascending.
    pub fn sample_participants(&self, round: usize) -> Vec<usize> {
        let n = self.cfg.num_clients;
        let p = self.cfg.participants_per_round();
        if p == n {
            return (0..n).collect();
        }
        let mut rng = rng_for(
            derive(self.cfg.seed, round as u64, 0),
            stream::PARTICIPATION,
        );
        let mut chosen = index::sample(&mut rng, n, p).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn weights(&self, participants: &[usize]) -> Vec<f64> {
        match self.cfg.weighting {
            Weighting::Uniform => vec![1.0 / participants.len() as f64; participants.len()],
            Weighting::DataSize => {
                let counts: Vec<usize> = participants
                    .iter()
                    .map(|&c| self.shards[c].sample_count())
                    .collect();
                crate::server::size_weights(&counts)
            }
        }
    }

    /// Local mini-batch SGD for one client.
    pub fn client_round(
        &self,
        round: usize,
        client: usize,
        global: &GlobalState,
    ) -> Result<ClientUpdate> {
        self.client_round_inner(round, client, global)
            .map_err(|e| e.in_round(round, Some(client)))
    }

    fn client_round_inner(
        &self,
        round: usize,
        client: usize,
        global: &GlobalState,
    ) -> Result<ClientUpdate> {
        let cfg = &self.cfg;
        let shard = self
            .shards
            .get(client)
            .ok_or_else(|| Error::contract(format!("no shard for client {client}")))?;
        let mut rng = rng_for(
            derive(cfg.seed, round as u64, client as u64),
            stream::CLIENT_SHUFFLE,
        );
        let mut order = shard.indices.clone();
        let mut steps = 0;

        match global {
            GlobalState::Florg(layers) => {
                let mut a: Vec<Matrix> = layers.iter().map(|s| s.a.clone()).collect();
                for _ in 0..cfg.local_epochs {
                    order.shuffle(&mut rng);
                    for batch in order.chunks(cfg.batch_size) {
                        for ((state, task), a_l) in layers.iter().zip(&self.tasks).zip(a.iter_mut())
                        {
                            let w = state.w0().add(&state.delta_w_for(a_l)?)?;
                            let ev = task.evaluate(&w, &task.train, Some(batch))?;
                            if !ev.loss.is_finite() {
                                return Err(Error::diverged("non-finite local loss"));
                            }
                            *a_l = sgd_step(state, a_l, &ev.grad, cfg.eta)?;
                        }
                        steps += 1;
                    }
                }
                Ok(ClientUpdate {
                    client_id: client,
                    sample_count: shard.sample_count(),
                    steps,
                    layers: a
                        .into_iter()
                        .map(|a| LayerUpload {
                            a: Some(a),
                            b: None,
                        })
                        .collect(),
                    retained_b: None,
                })
            }
            GlobalState::Lora { layers, personal_b } => {
                let mut local: Vec<LoraState> = match cfg.scheme {
                    SchemeId::FedSaLora => layers
                        .iter()
                        .zip(&personal_b[client])
                        .map(|(s, b)| s.with_factors(b.clone(), s.a.clone()))
                        .collect::<Result<_>>()?,
                    _ => layers.clone(),
                };
                for _ in 0..cfg.local_epochs {
                    order.shuffle(&mut rng);
                    for batch in order.chunks(cfg.batch_size) {
                        for (state, task) in local.iter_mut().zip(&self.tasks) {
                            let ev =
                                task.evaluate(&state.full_weight(), &task.train, Some(batch))?;
                            if !ev.loss.is_finite() {
                                return Err(Error::diverged("non-finite local loss"));
                            }
                            *state = match cfg.scheme {
                                SchemeId::FfaLora => ffa_step(state, &ev.grad, cfg.eta)?,
                                _ => lora_step(state, &ev.grad, cfg.eta)?,
                            };
                        }
                        steps += 1;
                    }
                }
                let (uploads, retained) = match cfg.scheme {
                    SchemeId::FfaLora => (
                        local
                            .into_iter()
                            .map(|s| LayerUpload {
                                a: None,
                                b: Some(s.b),
                            })
                            .collect(),
                        None,
                    ),
                    SchemeId::FedSaLora => {
                        let retained = local.iter().map(|s| s.b.clone()).collect();
                        (
                            local
                                .into_iter()
                                .map(|s| LayerUpload {
                                    a: Some(s.a),
                                    b: None,
                                })
                                .collect(),
                            Some(retained),
                        )
                    }
                    _ => (
                        local
                            .into_iter()
                            .map(|s| LayerUpload {
                                a: Some(s.a),
                                b: Some(s.b),
                            })
                            .collect(),
                        None,
                    ),
                };
                Ok(ClientUpdate {
                    client_id: client,
                    sample_count: shard.sample_count(),
                    steps,
                    layers: uploads,
                    retained_b: retained,
                })
            }
        }
    }

    /// Held-out loss of the global model. For the shared-A scheme, the mean
    /// over clients of each client's personalized model.
    pub fn evaluate(&self, global: &GlobalState) -> Result<GlobalEval> {
        let mut loss = 0.0;
        let mut acc = 0.0;
        let mut has_acc = false;
        for (l, task) in self.tasks.iter().enumerate() {
            let weights: Vec<Matrix> = match global {
                GlobalState::Florg(layers) => {
                    vec![crate::server::assemble_full(&layers[l], &layers[l].a)?]
                }
                GlobalState::Lora { layers, personal_b } if !personal_b.is_empty() => personal_b
                    .iter()
                    .map(|bs| {
                        Ok(layers[l]
                            .with_factors(bs[l].clone(), layers[l].a.clone())?
                            .full_weight())
                    })
                    .collect::<Result<_>>()?,
                GlobalState::Lora { layers, .. } => vec![layers[l].full_weight()],
            };
            let count = weights.len() as f64;
            for w in &weights {
                let ev = task.evaluate(w, &task.eval, None)?;
                loss += ev.loss / count;
                if let Some(c) = ev.correct {
                    has_acc = true;
                    acc += c as f64 / task.eval.len() as f64 / count;
                }
            }
        }
        Ok(GlobalEval {
            loss,
            accuracy: has_acc.then(|| acc / self.tasks.len() as f64),
        })
    }

    /// Held-out loss at the frozen weights, summed over layers.
    pub fn reference_loss(&self) -> Result<f64> {
        self.tasks.iter().map(|t| t.loss(&t.w0, &t.eval)).sum()
    }

    /// Squared norm of the full-training-set gradient in the trainable
    /// parameters.
    pub fn grad_norm_sq(&self, global: &GlobalState) -> Result<f64> {
        let mut total = 0.0;
        for (l, task) in self.tasks.iter().enumerate() {
            match global {
                GlobalState::Florg(layers) => {
                    let s = &layers[l];
                    let w = crate::server::assemble_full(s, &s.a)?;
                    let g = task.evaluate(&w, &task.train, None)?.grad;
                    total += grad_a(s, &g)?.frobenius_norm_sq();
                }
                GlobalState::Lora { layers, personal_b } => {
                    let models: Vec<LoraState> = if personal_b.is_empty() {
                        vec![layers[l].clone()]
                    } else {
                        personal_b
                            .iter()
                            .map(|bs| layers[l].with_factors(bs[l].clone(), layers[l].a.clone()))
                            .collect::<Result<_>>()?
                    };
                    let count = models.len() as f64;
                    for m in &models {
                        let g = task.evaluate(&m.full_weight(), &task.train, None)?.grad;
                        let (gb, ga) = lora_grads(m, &g)?;
                        let a_part = if self.cfg.scheme == SchemeId::FfaLora {
                            0.0
                        } else {
                            ga.frobenius_norm_sq()
                        };
                        total += (gb.frobenius_norm_sq() + a_part) / count;
                    }
                }
            }
        }
        Ok(total)
    }

    /// One round: local training on the sampled clients, aggregation,
    /// broadcast, and metrics. `min_lambda_before` is the smallest
    /// `λ_min((Aᵗ)ᵀAᵗ)` seen in earlier rounds (infinity before the first).
    pub fn run_round(
        &self,
        round: usize,
        global: &GlobalState,
        min_lambda_before: f64,
    ) -> Result<RoundOutput> {
        let cfg = &self.cfg;
        let participants = self.sample_participants(round);
        let weights = self.weights(&participants);
        let grad_norm_sq = self.grad_norm_sq(global)?;
        let updates = self
            .exec
            .map(&participants, |&c| self.client_round(round, c, global))?;
        let uplink: usize = updates
            .iter()
            .flat_map(|u| u.layers.iter())
            .map(|l| payload_params(&l.matrices()))
            .sum();

        let (state, mut metrics, observation) = match global {
            GlobalState::Florg(layers) => {
                self.florg_server(round, layers, &updates, &weights, min_lambda_before)?
            }
            GlobalState::Lora { layers, personal_b } => {
                let (s, m) = self.lora_server(layers, personal_b, &updates, &weights)?;
                (s, m, None)
            }
        };
        let downlink_per_client: usize = match &state {
            GlobalState::Florg(layers) => layers.iter().map(|s| payload_params(&[&s.a])).sum(),
            GlobalState::Lora { layers, .. } => layers
                .iter()
                .map(|s| match cfg.scheme {
                    SchemeId::FfaLora => payload_params(&[&s.b]),
                    SchemeId::FedSaLora => payload_params(&[&s.a]),
                    // the residual is a full d_out x d_in matrix
                    SchemeId::FedExLora => payload_params(&[&s.b, &s.a]) + s.w0().as_slice().len(),
                    _ => payload_params(&[&s.b, &s.a]),
                })
                .sum(),
        };

        let eval = self.evaluate(&state)?;
        if !eval.loss.is_finite() {
            return Err(Error::diverged("non-finite global loss").in_round(round, None));
        }
        metrics.round = round;
        metrics.global_loss = eval.loss;
        metrics.eval_accuracy = eval.accuracy;
        metrics.grad_norm = grad_norm_sq.sqrt();
        metrics.uplink_params = uplink as u64;
        metrics.downlink_params = (downlink_per_client * participants.len()) as u64;
        let observation = observation.map(|mut o| {
            o.grad_norm_sq = grad_norm_sq;
            o
        });
        Ok(RoundOutput {
            state,
            metrics,
            observation,
            participants,
        })
    }

    fn florg_server(
        &self,
        round: usize,
        layers: &[AdapterState],
        updates: &[ClientUpdate],
        weights: &[f64],
        min_lambda_before: f64,
    ) -> Result<(GlobalState, RoundMetrics, Option<RoundObservation>)> {
        let cfg = &self.cfg;
        let mut next = Vec::with_capacity(layers.len());
        let mut agg_sq = 0.0;
        let mut gram_err: f64 = 0.0;
        let mut trunc = 0.0;
        let mut delta = 0.0;
        let mut sigma = f64::INFINITY;
        let mut lambda = f64::INFINITY;
        let mut a_norm: f64 = 0.0;
        let mut a_tilde_norm: f64 = 0.0;
        for (l, state) in layers.iter().enumerate() {
            let locals: Vec<Matrix> = updates
                .iter()
                .map(|u| {
                    u.layers[l]
                        .a
                        .clone()
                        .expect("single-matrix upload carries A")
                })
                .collect();
            let agg = aggregate_gram(&locals, weights).map_err(|e| e.in_round(round, None))?;
            let reference = reference_gram(&locals, weights)?;
            agg_sq += agg.q.distance(&reference)?.powi(2);
            let factor = truncate_factor(&decompose(&agg), cfg.rank)?;
            let best = procrustes_align(&state.a, &factor)?;
            let chosen = if cfg.align {
                best
            } else {
                align_with(
                    &state.a,
                    &factor,
                    &trivial_alignment(cfg.rank, factor.rows()),
                    &best,
                )?
            };
            gram_err = gram_err.max(gram_preservation_error(&chosen.a_next, &factor, &agg.q));
            trunc += factor.truncation_loss;
            delta += chosen.delta_proc;
            sigma = sigma.min(chosen.sigma_min_cross);
            lambda = lambda.min(smallest_positive_eigen(&state.a)?);
            a_norm = a_norm
                .max(state.a.frobenius_norm())
                .max(chosen.a_next.frobenius_norm());
            a_tilde_norm = a_tilde_norm.max(factor.a_tilde.frobenius_norm());
            next.push(state.with_a(chosen.a_next)?);
        }
        let running = min_lambda_before.min(lambda);
        let metrics = RoundMetrics {
            round,
            global_loss: f64::NAN,
            grad_norm: f64::NAN,
            agg_error: agg_sq.sqrt(),
            gram_preservation_err: gram_err,
            truncation_loss: trunc,
            delta_proc: delta,
            lambda_min: lambda,
            sigma_min_cross: sigma,
            omega: omega(cfg.eta, running),
            uplink_params: 0,
            downlink_params: 0,
            eval_accuracy: None,
        };
        let obs = RoundObservation {
            round,
            lambda_min: lambda,
            delta_proc: delta,
            sigma_min_cross: sigma,
            grad_norm_sq: f64::NAN,
            a_norm,
            a_tilde_norm,
        };
        Ok((GlobalState::Florg(next), metrics, Some(obs)))
    }

    fn lora_server(
        &self,
        layers: &[LoraState],
        personal_b: &[Vec<Matrix>],
        updates: &[ClientUpdate],
        weights: &[f64],
    ) -> Result<(GlobalState, RoundMetrics)> {
        let cfg = &self.cfg;
        let mut next = Vec::with_capacity(layers.len());
        let mut agg_sq = 0.0;
        for (l, global) in layers.iter().enumerate() {
            let locals: Vec<LoraState> = updates
                .iter()
                .map(|u| {
                    let up = &u.layers[l];
                    let b = match (&up.b, &u.retained_b) {
                        (Some(b), _) => b.clone(),
                        (None, Some(kept)) => kept[l].clone(),
                        (None, None) => global.b.clone(),
                    };
                    let a = up.a.clone().unwrap_or_else(|| global.a.clone());
                    global.with_factors(b, a)
                })
                .collect::<Result<_>>()?;
            let target = mean_product(&locals, weights)?;
            let (state, err) = match cfg.scheme {
                SchemeId::FedIt => {
                    let s = fedit_aggregate_weighted(&locals, weights)?;
                    (s, aggregation_error_weighted(&locals, weights)?)
                }
                SchemeId::FeDeRa => {
                    let s = federa_aggregate_weighted(&locals, cfg.rank, weights)?;
                    let err = s.b.matmul(&s.a)?.distance(&target)?;
                    (s, err)
                }
                SchemeId::FfaLora => {
                    let s = ffa_aggregate_weighted(&locals, weights)?;
                    let err = s.b.matmul(&s.a)?.distance(&target)?;
                    (s, err)
                }
                SchemeId::FedSaLora => {
                    let shared = fedit_aggregate_weighted(&locals, weights)?.a;
                    let personal: Vec<Matrix> = locals
                        .iter()
                        .map(|s| s.b.matmul(&shared))
                        .collect::<Result<_>>()?;
                    let mut mean = personal[0].scale(weights[0]);
                    for (p, &w) in personal.iter().zip(weights).skip(1) {
                        mean.axpy(w, p)?;
                    }
                    let s = global.with_factors(global.b.clone(), shared)?;
                    (s, mean.distance(&target)?)
                }
                SchemeId::FedExLora => {
                    let (avg, residual) = fedex_aggregate_weighted(&locals, weights)?;
                    let applied = avg.b.matmul(&avg.a)?.add(&residual)?;
                    let err = applied.distance(&target)?;
                    (avg.fold_residual(&residual)?, err)
                }
                SchemeId::Florg => unreachable!("single-matrix scheme has its own server"),
            };
            agg_sq += err * err;
            next.push(state);
        }
        let mut personal = personal_b.to_vec();
        if cfg.scheme == SchemeId::FedSaLora {
            for u in updates {
                personal[u.client_id] = u.retained_b.clone().expect("shared-A clients keep b");
            }
        }
        let metrics = RoundMetrics {
            round: 0,
            global_loss: f64::NAN,
            grad_norm: f64::NAN,
            agg_error: agg_sq.sqrt(),
            gram_preservation_err: f64::NAN,
            truncation_loss: f64::NAN,
            delta_proc: f64::NAN,
            lambda_min: f64::NAN,
            sigma_min_cross: f64::NAN,
            omega: f64::NAN,
            uplink_params: 0,
            downlink_params: 0,
            eval_accuracy: None,
        };
        Ok((
            GlobalState::Lora {
                layers: next,
                personal_b: personal,
            },
            metrics,
        ))
    }
}

/// Sub-seed of layer `l`; layer 0 uses the experiment seed itself.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    if layer == 0 {
        seed
    } else {
        derive(seed, LAYER_SEED_KEY, layer as u64)
    }
}

/// `Σ wₙ AₙᵀAₙ` through the general product kernel, as an independent check
/// on the server's Gram accumulation.
fn reference_gram(locals: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let k = locals[0].cols();
    let mut sum = Matrix::zeros(k, k);
    for (a, &w) in locals.iter().zip(weights) {
        sum = sum.add(&a.t_matmul(a)?.scale(w))?;
    }
    Ok(sum)
}

/// Smallest eigenvalue of `AᵀA` above `1e-10·trace`, or 0 if none is.
pub fn smallest_positive_eigen(a: &Matrix) -> Result<f64> {
    // AᵀA and AAᵀ share their nonzero spectrum; the r x r side is cheaper
    let g = a.matmul_t(a)?;
    let tol = 1e-10 * g.trace().max(0.0);
    let values = symmetric_eigen(&g)?.values;
    Ok(values
        .into_iter()
        .filter(|&v| v > tol)
        .fold(0.0, |m, v| if m == 0.0 { v } else { m.min(v) }))
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: Vec<RoundMetrics>,
    /// Empty for two-matrix schemes.
    pub diagnostics: Vec<BoundRecord>,
    /// Held-out loss of the initial global model.
    pub initial_loss: f64,
    /// Held-out loss at `W⁰`.
    pub reference_loss: f64,
    pub final_state: GlobalState,
}

impl RunOutcome {
    /// First round whose loss is at most `ratio · reference_loss`.
    pub fn rounds_to_target(&self, ratio: f64) -> Option<usize> {
        let target = ratio * self.reference_loss;
        self.metrics
            .iter()
            .find(|m| m.global_loss <= target)
            .map(|m| m.round)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    Ok(run_experiment_with(cfg, Execution::default(), &mut |_| Ok(()))?.metrics)
}

/// Run all rounds, handing each row to `sink` as it is produced.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    exec: Execution,
    sink: &mut dyn FnMut(&RoundMetrics) -> Result<()>,
) -> Result<RunOutcome> {
    let sim = Simulation::new(cfg.clone(), exec)?;
    let mut state = sim.initial_state()?;
    let initial = sim.evaluate(&state)?;
    let reference_loss = sim.reference_loss()?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut history = Vec::new();
    let mut min_lambda = f64::INFINITY;
    for round in 1..=cfg.rounds {
        let out = sim.run_round(round, &state, min_lambda)?;
        if let Some(obs) = out.observation {
            if obs.lambda_min.is_finite() {
                min_lambda = min_lambda.min(obs.lambda_min);
            }
            history.push(obs);
        }
        sink(&out.metrics)?;
        metrics.push(out.metrics);
        state = out.state;
    }
    let diagnostics = if history.is_empty() {
        Vec::new()
    } else {
        let consts = BoundConstants {
            eta: cfg.eta,
            smoothness: sim
                .tasks
                .iter()
                .map(|t| t.smoothness())
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max),
            num_clients: cfg.num_clients,
            initial_loss: initial.loss,
        };
        bound_diagnostics(&history, &consts)?
    };
    Ok(RunOutcome {
        metrics,
        diagnostics,
        initial_loss: initial.loss,
        reference_loss,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::config::TaskSpec;

    fn small(scheme: SchemeId) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec {
                d_out: 8,
                d_in: 8,
                num_samples: 48,
                eval_samples: 16,
                true_rank: 1,
                ..TaskSpec::default()
            },
            scheme,
            num_clients: 3,
            rounds: 3,
            eta: 0.01,
            rank: 2,
            alpha: 2.0,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn steps_per_epoch_round_up() {
        let mut cfg = small(SchemeId::Florg);
        cfg.num_clients = 1;
        cfg.task.num_samples = 10;
        let sim = Simulation::new(cfg, Execution::Sequential).unwrap();
        let g = sim.initial_state().unwrap();
        assert_eq!(sim.client_round(1, 0, &g).unwrap().steps, 3);
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let mut cfg = small(SchemeId::Florg);
        cfg.eta = 0.0;
        let sim = Simulation::new(cfg, Execution::Sequential).unwrap();
        let g = sim.initial_state().unwrap();
        let up = sim.client_round(1, 0, &g).unwrap();
        let GlobalState::Florg(layers) = &g else {
            unreachable!()
        };
        assert_eq!(up.layers[0].a.as_ref().unwrap(), &layers[0].a);
    }

    #[test]
    fn every_scheme_runs_and_counts_traffic() {
        for scheme in SchemeId::ALL {
            let out = run_experiment(&small(scheme)).unwrap();
            assert_eq!(out.len(), 3, "{scheme}");
            let dims = crate::federation::comm::LayerDims {
                d_out: 8,
                d_in: 8,
                rank: 2,
            };
            for m in &out {
                assert!(m.global_loss.is_finite());
                assert_eq!(
                    m.uplink_params as usize,
                    3 * crate::federation::comm::uplink_params(scheme, dims)
                );
                assert_eq!(
                    m.downlink_params as usize,
                    3 * crate::federation::comm::downlink_params(scheme, dims)
                );
            }
        }
    }

    #[test]
    fn partial_participation_samples_distinct_clients() {
        let mut cfg = small(SchemeId::FedIt);
        cfg.num_clients = 10;
        cfg.participation_ratio = 0.3;
        let sim = Simulation::new(cfg, Execution::Sequential).unwrap();
        let p = sim.sample_participants(4);
        assert_eq!(p.len(), 3);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, sim.sample_participants(4));
    }

    #[test]
    fn florg_aggregation_error_is_zero_and_fedit_is_not() {
        let f = run_experiment(&small(SchemeId::Florg)).unwrap();
        assert!(f.iter().all(|m| m.agg_error <= 1e-12));
        let mut cfg = small(SchemeId::FedIt);
        cfg.dirichlet_rho = 0.1;
        cfg.rounds = 4;
        let b = run_experiment(&cfg).unwrap();
        assert!(b.iter().skip(1).all(|m| m.agg_error > 0.0));
    }

    #[test]
    fn huge_learning_rate_diverges_with_round() {
        let mut cfg = small(SchemeId::Florg);
        cfg.eta = 1e3;
        match run_experiment(&cfg) {
            Err(Error::Divergence { round, .. }) => assert_eq!(round, Some(1)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn smallest_positive_eigen_ignores_null_space() {
        let a = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        assert!((smallest_positive_eigen(&a).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(smallest_positive_eigen(&Matrix::zeros(2, 3)).unwrap(), 0.0);
    }
}

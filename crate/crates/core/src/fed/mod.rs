//! Federated training orchestration: server state, client selection,
//! local-gradient collection over a pluggable transport, aggregation, and the
//! centralized baseline trainer used by the equivalence harness.
//!
//! Clients are stateless between rounds: a client round is a pure function of
//! the broadcast parameter snapshot, the client's own dataset and the round
//! index. The server never sees a data batch; its inputs are gradient
//! messages and configuration.

mod optim;

pub use optim::{lr_schedule, OptimKind, Optimizer};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{
    make_denoise_task, make_style_task, psnr, ssim, DataError, DomainDataset, MetricError,
    PairedEvalSet,
};
use crate::nn::{
    mix_seed, qualified, write_params, CycleModels, Domain, Freeze, ModelSpec, NnError, Role,
};
use crate::objectives::{
    local_objective_gradients, sum_gradients, LossWeights, ObjectiveError,
};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};
use crate::transport::{
    crc32, frame_cap_from_env, in_process_pair, FramedReader, FramedWriter, GradGroup,
    GradientMessage, StepKind, TransportError,
};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("client {0} has an empty dataset")]
    EmptyDataset(u32),
    #[error("cannot select {n} clients out of {available}")]
    SelectOutOfRange { n: usize, available: usize },
    #[error("aggregate of zero messages")]
    EmptyAggregate,
    #[error("messages span rounds {0} and {1}")]
    RoundMismatch(u32, u32),
    #[error("messages span step kinds {0:?} and {1:?}")]
    KindMismatch(StepKind, StepKind),
    #[error("incongruent gradient messages: {0}")]
    Congruence(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("gradient names unknown parameter {param}")]
    UnknownParameter { param: String },
    #[error("client thread panicked")]
    ClientPanic,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Gradient aggregation rule. `Sum` reproduces the centralized gradient of
/// the summed local objectives exactly; `Mean` is the FedAvg-style default
/// for multi-client runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    Sum,
    Mean,
}

/// How a client turns its local objective into gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Alternating practical losses: discriminator step with generator
    /// outputs constant, then generator step with discriminator parameters
    /// constant, both at the broadcast snapshot. Two messages per round.
    StepSplit,
    /// One gradient of the whole per-domain objective for all groups.
    Alg1Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

/// Synthetic task selection for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Denoise {
        n_train: usize,
        n_eval: usize,
        sigma: f64,
    },
    Style {
        n_per_domain: usize,
    },
}

/// Sub-seeds derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub select: u64,
    pub client_base: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            init: mix_seed(master, 11),
            data: mix_seed(master, 12),
            select: mix_seed(master, 13),
            client_base: mix_seed(master, 14),
        }
    }
}

/// Library-level training configuration shared by both trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub spec: ModelSpec,
    pub weights: LossWeights,
    pub optimizer: OptimKind,
    pub base_lr: f64,
    pub rounds: u32,
    pub batch_size: usize,
    pub clients_per_domain: usize,
    pub select_per_round: usize,
    pub aggregation: AggMode,
    pub grad_mode: GradMode,
    pub transport: TransportKind,
    pub seeds: Seeds,
}

impl RunConfig {
    /// Defaults for the toy denoising experiments: 400 rounds (half fixed,
    /// half linear decay), Adam at 2e-4, cycle weight 10 and identity 5.
    pub fn toy_denoise(spec: ModelSpec, master_seed: u64) -> Self {
        Self {
            task: TaskSpec::Denoise {
                n_train: 64,
                n_eval: 32,
                sigma: 0.1,
            },
            spec,
            weights: LossWeights::default(),
            optimizer: OptimKind::adam_default(),
            base_lr: 2e-4,
            rounds: 400,
            batch_size: 4,
            clients_per_domain: 1,
            select_per_round: 2,
            aggregation: AggMode::Sum,
            grad_mode: GradMode::StepSplit,
            transport: TransportKind::InProcess,
            seeds: Seeds::derive(master_seed),
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        self.spec.validate().map_err(FedError::Nn)?;
        self.weights
            .validate()
            .map_err(|e| FedError::Config(e.to_string()))?;
        if self.batch_size < 1 {
            return Err(FedError::Config("batch size must be >= 1".into()));
        }
        if self.clients_per_domain < 1 {
            return Err(FedError::Config("need at least one client per domain".into()));
        }
        let total = 2 * self.clients_per_domain;
        if self.select_per_round < 1 || self.select_per_round > total {
            return Err(FedError::Config(format!(
                "select_per_round must be in 1..={total}"
            )));
        }
        if self.base_lr < 0.0 {
            return Err(FedError::Config("learning rate must be >= 0".into()));
        }
        match &self.task {
            TaskSpec::Denoise { n_train, n_eval, sigma } => {
                if *n_train < self.clients_per_domain {
                    return Err(FedError::Config(
                        "n_train must cover at least one sample per client".into(),
                    ));
                }
                if *n_eval < 1 {
                    return Err(FedError::Config("n_eval must be >= 1".into()));
                }
                if *sigma < 0.0 {
                    return Err(FedError::Config("noise sigma must be >= 0".into()));
                }
            }
            TaskSpec::Style { n_per_domain } => {
                if *n_per_domain < self.clients_per_domain {
                    return Err(FedError::Config(
                        "n_per_domain must cover at least one sample per client".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One client's identity and data. The domain tag is fixed for the client's
/// lifetime.
#[derive(Clone)]
pub struct ClientSpec {
    pub id: u32,
    pub domain: Domain,
    pub data: Arc<DomainDataset>,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-client loss values recorded in the round history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientRoundReport {
    pub client_id: u32,
    pub domain: Domain,
    pub d_loss: f64,
    pub g_adversarial: f64,
    pub g_cycle: f64,
    pub g_identity: f64,
    pub g_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub lr: f64,
    pub selected: Vec<u32>,
    pub reports: Vec<ClientRoundReport>,
    /// CRC32 of the serialized post-step parameters.
    pub param_crc: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<RoundRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "round,lr,client_id,domain,d_loss,g_adversarial,g_cycle,g_identity,g_total,param_crc\n",
        );
        for rec in &self.records {
            for rep in &rec.reports {
                out.push_str(&format!(
                    "{},{:.10e},{},{},{:.7e},{:.7e},{:.7e},{:.7e},{:.7e},{:08x}\n",
                    rec.round,
                    rec.lr,
                    rep.client_id,
                    rep.domain,
                    rep.d_loss,
                    rep.g_adversarial,
                    rep.g_cycle,
                    rep.g_identity,
                    rep.g_total,
                    rec.param_crc
                ));
            }
        }
        out
    }

    /// Deterministic checksum over the rendered history.
    pub fn checksum(&self) -> u32 {
        crc32(self.to_csv().as_bytes())
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub models: CycleModels,
}

// ---- core federated operations --------------------------------------------

/// Uniform sample of `n` client ids without replacement, deterministic in
/// `(select_seed, round)`. The returned ids are in ascending order.
pub fn select_clients(
    select_seed: u64,
    round: u32,
    clients: &[ClientSpec],
    n: usize,
) -> Result<Vec<u32>, FedError> {
    if n < 1 || n > clients.len() {
        return Err(FedError::SelectOutOfRange {
            n,
            available: clients.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(select_seed);
    rng.set_stream(round as u64 + 1);
    let mut ids: Vec<u32> = clients.iter().map(|c| c.id).collect();
    ids.shuffle(&mut rng);
    let mut chosen: Vec<u32> = ids.into_iter().take(n).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The client's per-round batch: a fresh shuffle of its local index
/// permutation, deterministic in `(client seed, round)`.
pub fn sample_batch(spec: &ClientSpec, round: u32) -> Result<Tensor<f32>, FedError> {
    let samples = spec.data.samples();
    if samples.is_empty() {
        return Err(FedError::EmptyDataset(spec.id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(round as u64 + 1);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let take = spec.batch_size.min(samples.len());
    let views: Vec<&Tensor<f32>> = idx[..take].iter().map(|&i| &samples[i]).collect();
    Ok(Tensor::stack(&views)?)
}

fn groups_from_gradients(
    models: &CycleModels,
    roles: &[Role],
    grads: &Gradients<f32>,
) -> Result<Vec<GradGroup>, FedError> {
    let mut groups = Vec::with_capacity(roles.len());
    for role in models.spec.roles() {
        if !roles.contains(&role) {
            continue;
        }
        let group = models.group(role)?;
        let mut entries = Vec::with_capacity(group.entries().len());
        for (name, _) in group.entries() {
            let key = qualified(role, name);
            let grad = grads
                .get(&key)
                .ok_or_else(|| FedError::UnknownParameter { param: key.clone() })?;
            entries.push((name.clone(), grad.clone()));
        }
        groups.push(GradGroup { role, entries });
    }
    Ok(groups)
}

/// Computes one client's contribution for round `round` at the broadcast
/// snapshot: gradients of its domain's local objective, packaged as wire
/// messages, plus the loss report for the history. The client's own dataset
/// is the only sample data touched.
pub fn client_round(
    spec: &ClientSpec,
    models: &CycleModels,
    weights: &LossWeights,
    round: u32,
    mode: GradMode,
) -> Result<(Vec<GradientMessage>, ClientRoundReport), FedError> {
    let batch = sample_batch(spec, round)?;
    match mode {
        GradMode::StepSplit => {
            let steps = crate::objectives::gan_step_losses(models, &batch, spec.domain, weights)?;
            let d_groups =
                groups_from_gradients(models, &models.spec.discriminator_roles(), &steps.d_grads)?;
            let g_groups =
                groups_from_gradients(models, &models.spec.generator_roles(), &steps.g_grads)?;
            let messages = vec![
                GradientMessage::new(round, spec.id, spec.domain, StepKind::DStep, d_groups),
                GradientMessage::new(round, spec.id, spec.domain, StepKind::GStep, g_groups),
            ];
            Ok((
                messages,
                ClientRoundReport {
                    client_id: spec.id,
                    domain: spec.domain,
                    d_loss: steps.d_loss,
                    g_adversarial: steps.g_adversarial,
                    g_cycle: steps.g_cycle,
                    g_identity: steps.g_identity,
                    g_total: steps.g_loss,
                },
            ))
        }
        GradMode::Alg1Combined => {
            let (report, grads) =
                local_objective_gradients(models, spec.domain, &batch, weights)?;
            let roles = models.spec.roles();
            let groups = groups_from_gradients(models, &roles, &grads)?;
            let messages = vec![GradientMessage::new(
                round,
                spec.id,
                spec.domain,
                StepKind::Combined,
                groups,
            )];
            Ok((
                messages,
                ClientRoundReport {
                    client_id: spec.id,
                    domain: spec.domain,
                    d_loss: report.adversarial_real + report.adversarial_fake,
                    g_adversarial: report.adversarial_fake,
                    g_cycle: report.cycle,
                    g_identity: report.identity,
                    g_total: report.total,
                },
            ))
        }
    }
}

/// Combines same-round, same-step messages into one named gradient map.
/// Messages are re-sorted by client id before summation, so arrival order
/// never changes the result; `Mean` divides the sum by the message count.
pub fn aggregate(messages: &[GradientMessage], mode: AggMode) -> Result<Gradients<f32>, FedError> {
    if messages.is_empty() {
        return Err(FedError::EmptyAggregate);
    }
    let mut ordered: Vec<&GradientMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.client_id);

    let first = ordered[0];
    for m in &ordered[1..] {
        if m.round != first.round {
            return Err(FedError::RoundMismatch(first.round, m.round));
        }
        if m.step_kind != first.step_kind {
            return Err(FedError::KindMismatch(first.step_kind, m.step_kind));
        }
        if m.groups.len() != first.groups.len() {
            return Err(FedError::Congruence(format!(
                "client {} sent {} groups, client {} sent {}",
                first.client_id,
                first.groups.len(),
                m.client_id,
                m.groups.len()
            )));
        }
        for (ga, gb) in first.groups.iter().zip(&m.groups) {
            if ga.role != gb.role || ga.entries.len() != gb.entries.len() {
                return Err(FedError::Congruence(format!(
                    "group {} vs {} differ in role or entry count",
                    ga.role, gb.role
                )));
            }
            for ((na, ta), (nb, tb)) in ga.entries.iter().zip(&gb.entries) {
                if na != nb || ta.shape() != tb.shape() {
                    return Err(FedError::Congruence(format!(
                        "entry {}/{na} vs {}/{nb} differ in name or shape",
                        ga.role, gb.role
                    )));
                }
            }
        }
    }

    let mut out = Gradients::new();
    for msg in &ordered {
        for group in &msg.groups {
            for (name, grad) in &group.entries {
                let key = qualified(group.role, name);
                match out.get_mut(&key) {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                    None => {
                        out.insert(key, grad.clone());
                    }
                }
            }
        }
    }
    if mode == AggMode::Mean {
        let inv = 1.0 / ordered.len() as f32;
        for t in out.values_mut() {
            for v in t.data_mut() {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Server-side state: the models, the optimizer, and the schedule position.
/// Its update path consumes aggregated gradient maps only.
pub struct ServerState {
    pub models: CycleModels,
    pub optimizer: Optimizer,
    pub round: u32,
    pub total_rounds: u32,
    pub base_lr: f64,
}

impl ServerState {
    pub fn new(models: CycleModels, kind: OptimKind, total_rounds: u32, base_lr: f64) -> Self {
        Self {
            models,
            optimizer: Optimizer::new(kind),
            round: 0,
            total_rounds,
            base_lr,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.round, self.total_rounds, self.base_lr)
    }

    pub fn apply(&mut self, grads: &Gradients<f32>) -> Result<(), FedError> {
        let lr = self.lr();
        self.optimizer.step(&mut self.models, grads, lr)
    }

    pub fn param_crc(&self) -> u32 {
        crc32(&write_params(&self.models))
    }
}

fn build_clients(config: &RunConfig) -> Result<(Vec<ClientSpec>, Option<PairedEvalSet>), FedError> {
    let (x, y, eval) = match &config.task {
        TaskSpec::Denoise { n_train, n_eval, sigma } => {
            let (x, y, eval) = make_denoise_task(*n_train, *n_eval, *sigma, config.seeds.data)?;
            (x, y, Some(eval))
        }
        TaskSpec::Style { n_per_domain } => {
            let (x, y) = make_style_task(*n_per_domain, config.seeds.data)?;
            (x, y, None)
        }
    };
    let k = config.clients_per_domain;
    let mut clients = Vec::with_capacity(2 * k);
    for (part_idx, part) in x.split(k).into_iter().enumerate() {
        let id = part_idx as u32;
        clients.push(ClientSpec {
            id,
            domain: Domain::X,
            data: Arc::new(part),
            batch_size: config.batch_size,
            seed: mix_seed(config.seeds.client_base, id as u64),
        });
    }
    for (part_idx, part) in y.split(k).into_iter().enumerate() {
        let id = (k + part_idx) as u32;
        clients.push(ClientSpec {
            id,
            domain: Domain::Y,
            data: Arc::new(part),
            batch_size: config.batch_size,
            seed: mix_seed(config.seeds.client_base, id as u64),
        });
    }
    Ok((clients, eval))
}

/// Federated trainer with a pluggable message path. `step()` runs one round:
/// broadcast, client rounds on the selected clients, aggregation per step
/// kind, and the server update (discriminator step first, then generator).
pub struct FedTrainer {
    pub config: RunConfig,
    pub server: ServerState,
    clients: Vec<ClientSpec>,
    eval: Option<PairedEvalSet>,
    history: TrainHistory,
    listener: Option<std::net::TcpListener>,
}

impl FedTrainer {
    pub fn new(config: RunConfig) -> Result<Self, FedError> {
        config.validate()?;
        let (clients, eval) = build_clients(&config)?;
        let models = CycleModels::new(config.spec.clone(), config.seeds.init)?;
        let server = ServerState::new(models, config.optimizer, config.rounds, config.base_lr);
        let listener = match config.transport {
            TransportKind::InProcess => None,
            TransportKind::Tcp => Some(std::net::TcpListener::bind("127.0.0.1:0")?),
        };
        Ok(Self {
            config,
            server,
            clients,
            eval,
            history: TrainHistory::default(),
            listener,
        })
    }

    pub fn clients(&self) -> &[ClientSpec] {
        &self.clients
    }

    pub fn eval_set(&self) -> Option<&PairedEvalSet> {
        self.eval.as_ref()
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn models(&self) -> &CycleModels {
        &self.server.models
    }

    /// Moves the selected clients' messages through the configured transport
    /// and returns them decoded, plus the clients' loss reports.
    fn exchange(
        &self,
        round: u32,
        selected: &[u32],
    ) -> Result<(Vec<GradientMessage>, Vec<ClientRoundReport>), FedError> {
        let jobs: Vec<&ClientSpec> = selected
            .iter()
            .map(|id| {
                self.clients
                    .iter()
                    .find(|c| c.id == *id)
                    .expect("selected id exists")
            })
            .collect();
        let cap = frame_cap_from_env();
        match self.config.transport {
            TransportKind::InProcess => {
                let (tx, rx) = in_process_pair(cap);
                let mut reports = Vec::with_capacity(jobs.len());
                let mut expected = 0;
                for spec in jobs {
                    let (msgs, report) = client_round(
                        spec,
                        &self.server.models,
                        &self.config.weights,
                        round,
                        self.config.grad_mode,
                    )?;
                    for m in &msgs {
                        tx.send(m)?;
                    }
                    expected += msgs.len();
                    reports.push(report);
                }
                drop(tx);
                let mut messages = Vec::with_capacity(expected);
                for _ in 0..expected {
                    messages.push(rx.recv()?);
                }
                Ok((messages, reports))
            }
            TransportKind::Tcp => {
                let listener = self.listener.as_ref().expect("tcp trainer has a listener");
                let addr = listener.local_addr()?;
                let models = &self.server.models;
                let weights = &self.config.weights;
                let mode = self.config.grad_mode;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = jobs
                        .iter()
                        .map(|spec| {
                            scope.spawn(move || -> Result<ClientRoundReport, FedError> {
                                let stream = std::net::TcpStream::connect(addr)?;
                                let mut writer = FramedWriter::new(stream, cap);
                                let (msgs, report) =
                                    client_round(spec, models, weights, round, mode)?;
                                for m in &msgs {
                                    writer.send(m)?;
                                }
                                Ok(report)
                            })
                        })
                        .collect();

                    let mut messages = Vec::new();
                    for _ in 0..handles.len() {
                        let (stream, _) = listener.accept()?;
                        let mut reader = FramedReader::new(stream, cap);
                        while let Some(msg) = reader.recv()? {
                            messages.push(msg);
                        }
                    }
                    let mut reports = Vec::with_capacity(handles.len());
                    for handle in handles {
                        reports.push(handle.join().map_err(|_| FedError::ClientPanic)??);
                    }
                    reports.sort_by_key(|r| r.client_id);
                    Ok((messages, reports))
                })
            }
        }
    }

    pub fn step(&mut self) -> Result<&RoundRecord, FedError> {
        let round = self.server.round;
        let lr = self.server.lr();
        let selected = select_clients(
            self.config.seeds.select,
            round,
            &self.clients,
            self.config.select_per_round,
        )?;
        let (messages, reports) = self.exchange(round, &selected)?;

        for kind in [StepKind::DStep, StepKind::GStep, StepKind::Combined] {
            let batch: Vec<GradientMessage> = messages
                .iter()
                .filter(|m| m.step_kind == kind)
                .cloned()
                .collect();
            if batch.is_empty() {
                continue;
            }
            let grads = aggregate(&batch, self.config.aggregation)?;
            self.server.apply(&grads)?;
        }

        self.server.round += 1;
        self.history.records.push(RoundRecord {
            round,
            lr,
            selected,
            reports,
            param_crc: self.server.param_crc(),
        });
        Ok(self.history.records.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<TrainOutcome, FedError> {
        for _ in 0..self.config.rounds {
            self.step()?;
        }
        Ok(TrainOutcome {
            history: self.history,
            models: self.server.models,
        })
    }
}

/// Non-federated baseline: identical optimizer, schedule and batch draws, but
/// the per-step losses are evaluated on both domains' batches directly.
pub struct CentralTrainer {
    pub config: RunConfig,
    pub server: ServerState,
    client_x: ClientSpec,
    client_y: ClientSpec,
    eval: Option<PairedEvalSet>,
    history: TrainHistory,
}

impl CentralTrainer {
    /// Uses the first client of each domain for batch sampling so that a
    /// seed-matched federated run draws identical batches.
    pub fn new(config: RunConfig) -> Result<Self, FedError> {
        config.validate()?;
        let (clients, eval) = build_clients(&config)?;
        let client_x = clients
            .iter()
            .find(|c| c.domain == Domain::X)
            .expect("one client per domain")
            .clone();
        let client_y = clients
            .iter()
            .find(|c| c.domain == Domain::Y)
            .expect("one client per domain")
            .clone();
        let models = CycleModels::new(config.spec.clone(), config.seeds.init)?;
        let server = ServerState::new(models, config.optimizer, config.rounds, config.base_lr);
        Ok(Self {
            config,
            server,
            client_x,
            client_y,
            eval,
            history: TrainHistory::default(),
        })
    }

    pub fn eval_set(&self) -> Option<&PairedEvalSet> {
        self.eval.as_ref()
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn models(&self) -> &CycleModels {
        &self.server.models
    }

    pub fn step(&mut self) -> Result<&RoundRecord, FedError> {
        let round = self.server.round;
        let lr = self.server.lr();
        let bx = sample_batch(&self.client_x, round)?;
        let by = sample_batch(&self.client_y, round)?;
        let models = &self.server.models;
        let weights = self.config.weights;

        // Both domains' term gradients are evaluated separately and summed;
        // the gradient of the summed objective equals this sum exactly (the
        // decomposition suite checks that identity in 64-bit), and keeping
        // one code path for the term evaluation makes the trajectory
        // comparison against the federated trainer exact.
        let reports = match self.config.grad_mode {
            GradMode::StepSplit => {
                let steps_x = crate::objectives::gan_step_losses(models, &bx, Domain::X, &weights)?;
                let steps_y = crate::objectives::gan_step_losses(models, &by, Domain::Y, &weights)?;
                let d_grads = sum_gradients(&steps_x.d_grads, &steps_y.d_grads)?;
                let g_grads = sum_gradients(&steps_x.g_grads, &steps_y.g_grads)?;
                self.server.apply(&d_grads)?;
                self.server.apply(&g_grads)?;
                [(self.client_x.id, Domain::X, &steps_x), (self.client_y.id, Domain::Y, &steps_y)]
                    .iter()
                    .map(|(id, domain, s)| ClientRoundReport {
                        client_id: *id,
                        domain: *domain,
                        d_loss: s.d_loss,
                        g_adversarial: s.g_adversarial,
                        g_cycle: s.g_cycle,
                        g_identity: s.g_identity,
                        g_total: s.g_loss,
                    })
                    .collect()
            }
            GradMode::Alg1Combined => {
                let (rx, gx) = local_objective_gradients(models, Domain::X, &bx, &weights)?;
                let (ry, gy) = local_objective_gradients(models, Domain::Y, &by, &weights)?;
                let grads = sum_gradients(&gx, &gy)?;
                self.server.apply(&grads)?;
                [rx, ry]
                    .iter()
                    .zip([self.client_x.id, self.client_y.id])
                    .map(|(r, id)| ClientRoundReport {
                        client_id: id,
                        domain: r.domain,
                        d_loss: r.adversarial_real + r.adversarial_fake,
                        g_adversarial: r.adversarial_fake,
                        g_cycle: r.cycle,
                        g_identity: r.identity,
                        g_total: r.total,
                    })
                    .collect()
            }
        };

        self.server.round += 1;
        self.history.records.push(RoundRecord {
            round,
            lr,
            selected: vec![self.client_x.id, self.client_y.id],
            reports,
            param_crc: self.server.param_crc(),
        });
        Ok(self.history.records.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<TrainOutcome, FedError> {
        for _ in 0..self.config.rounds {
            self.step()?;
        }
        Ok(TrainOutcome {
            history: self.history,
            models: self.server.models,
        })
    }
}

pub fn train_federated(config: RunConfig) -> Result<TrainOutcome, FedError> {
    FedTrainer::new(config)?.run()
}

pub fn train_centralized(config: RunConfig) -> Result<TrainOutcome, FedError> {
    CentralTrainer::new(config)?.run()
}

/// Held-out denoising metrics: the degraded side of each eval pair is
/// translated into the clean domain and compared against its reference.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseEval {
    pub input_psnr: f64,
    pub output_psnr: f64,
    pub input_ssim: f64,
    pub output_ssim: f64,
}

/// Held-out style metrics: MMD of domain-X samples (before and after
/// translation into Y) against held-out domain-Y samples.
#[derive(Debug, Clone, Copy)]
pub struct StyleEval {
    pub input_mmd: f64,
    pub output_mmd: f64,
}

pub fn evaluate_style(
    models: &CycleModels,
    xs: &[Tensor<f32>],
    ys: &[Tensor<f32>],
) -> Result<StyleEval, FedError> {
    let mut translated = Vec::with_capacity(xs.len());
    for x in xs {
        let mut tape = Tape::<f32>::new();
        let mut bound = models.bind(&mut tape, Freeze::None)?;
        let batch = Tensor::stack(&[x])?;
        let out = bound.translate(&mut tape, Domain::Y, &batch)?;
        translated.push(Tensor::from_vec(x.shape().to_vec(), out.data().to_vec())?);
    }
    Ok(StyleEval {
        input_mmd: crate::data::mmd(xs, ys, None)?,
        output_mmd: crate::data::mmd(&translated, ys, None)?,
    })
}

pub fn evaluate_denoise(models: &CycleModels, eval: &PairedEvalSet) -> Result<DenoiseEval, FedError> {
    let mut input_psnr = 0.0;
    let mut output_psnr = 0.0;
    let mut input_ssim = 0.0;
    let mut output_ssim = 0.0;
    for (clean, noisy) in &eval.pairs {
        let mut tape = Tape::<f32>::new();
        let mut bound = models.bind(&mut tape, Freeze::None)?;
        let batch = Tensor::stack(&[noisy])?;
        let out = bound.translate(&mut tape, Domain::X, &batch)?;
        let restored = Tensor::raw(clean.shape().to_vec(), out.data().to_vec());
        input_psnr += psnr(noisy, clean, 1.0)?;
        output_psnr += psnr(&restored, clean, 1.0)?;
        input_ssim += ssim(noisy, clean, 1.0)?;
        output_ssim += ssim(&restored, clean, 1.0)?;
    }
    let n = eval.pairs.len() as f64;
    Ok(DenoiseEval {
        input_psnr: input_psnr / n,
        output_psnr: output_psnr / n,
        input_ssim: input_ssim / n,
        output_ssim: output_ssim / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Variant;

    fn micro_config(master: u64) -> RunConfig {
        RunConfig {
            task: TaskSpec::Denoise {
                n_train: 8,
                n_eval: 2,
                sigma: 0.1,
            },
            rounds: 3,
            batch_size: 2,
            ..RunConfig::toy_denoise(ModelSpec::toy(Variant::Standard), master)
        }
    }

    #[test]
    fn selection_is_deterministic_and_full_when_n_equals_clients() {
        let config = RunConfig {
            clients_per_domain: 2,
            select_per_round: 4,
            ..micro_config(1)
        };
        let (clients, _) = build_clients(&config).unwrap();
        let all = select_clients(9, 0, &clients, 4).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let a = select_clients(9, 5, &clients, 2).unwrap();
        let b = select_clients(9, 5, &clients, 2).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            select_clients(9, 0, &clients, 5),
            Err(FedError::SelectOutOfRange { .. })
        ));
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        let config = RunConfig {
            clients_per_domain: 2,
            select_per_round: 2,
            ..micro_config(2)
        };
        let (clients, _) = build_clients(&config).unwrap();
        let rounds = 10_000u32;
        let n = 2usize;
        let mut counts = [0u32; 4];
        for k in 0..rounds {
            for id in select_clients(33, k, &clients, n).unwrap() {
                counts[id as usize] += 1;
            }
        }
        let p = n as f64 / 4.0;
        let expect = rounds as f64 * p;
        let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
        for (id, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "client {id} selected {c} times, expected {expect} +- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn aggregation_is_permutation_invariant_and_single_message_identity() {
        let config = micro_config(3);
        let (clients, _) = build_clients(&config).unwrap();
        let models = CycleModels::new(config.spec.clone(), 5).unwrap();
        let (mx, _) = client_round(&clients[0], &models, &config.weights, 0, GradMode::StepSplit)
            .unwrap();
        let (my, _) = client_round(&clients[1], &models, &config.weights, 0, GradMode::StepSplit)
            .unwrap();

        let forward = aggregate(&[mx[0].clone(), my[0].clone()], AggMode::Sum).unwrap();
        let reversed = aggregate(&[my[0].clone(), mx[0].clone()], AggMode::Sum).unwrap();
        assert_eq!(forward, reversed);

        let single = aggregate(&[mx[0].clone()], AggMode::Mean).unwrap();
        for group in &mx[0].groups {
            for (name, grad) in &group.entries {
                assert_eq!(&single[&qualified(group.role, name)], grad);
            }
        }

        // Identical messages, mean: equals any single message.
        let mean = aggregate(&[mx[0].clone(), mx[0].clone()], AggMode::Mean).unwrap();
        for (k, v) in &single {
            for (a, b) in v.data().iter().zip(mean[k].data()) {
                assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn aggregation_rejects_mismatches() {
        let config = micro_config(4);
        let (clients, _) = build_clients(&config).unwrap();
        let models = CycleModels::new(config.spec.clone(), 5).unwrap();
        let (m0, _) =
            client_round(&clients[0], &models, &config.weights, 0, GradMode::StepSplit).unwrap();
        let (m1, _) =
            client_round(&clients[1], &models, &config.weights, 1, GradMode::StepSplit).unwrap();
        assert!(matches!(
            aggregate(&[m0[0].clone(), m1[0].clone()], AggMode::Sum),
            Err(FedError::RoundMismatch(0, 1))
        ));
        assert!(matches!(
            aggregate(&[m0[0].clone(), m0[1].clone()], AggMode::Sum),
            Err(FedError::KindMismatch(_, _))
        ));
        assert!(matches!(aggregate(&[], AggMode::Sum), Err(FedError::EmptyAggregate)));
    }

    #[test]
    fn zero_lr_and_fixed_batch_make_rounds_identical() {
        let mut config = micro_config(5);
        config.base_lr = 0.0;
        config.task = TaskSpec::Denoise {
            n_train: 1,
            n_eval: 1,
            sigma: 0.1,
        };
        config.batch_size = 1;
        let (clients, _) = build_clients(&config).unwrap();
        let models = CycleModels::new(config.spec.clone(), 5).unwrap();
        // With one sample the per-round reshuffle always yields the same
        // batch, and frozen parameters make the messages bit-identical.
        let (a, _) = client_round(&clients[0], &models, &config.weights, 0, GradMode::StepSplit)
            .unwrap();
        let (b, _) = client_round(&clients[0], &models, &config.weights, 7, GradMode::StepSplit)
            .unwrap();
        assert_eq!(a[0].groups, b[0].groups);
        assert_eq!(a[1].groups, b[1].groups);
    }

    #[test]
    fn zero_rounds_is_a_no_op() {
        let mut config = micro_config(6);
        config.rounds = 0;
        let init = CycleModels::new(config.spec.clone(), config.seeds.init).unwrap();
        let out = train_federated(config).unwrap();
        assert!(out.history.records.is_empty());
        assert_eq!(out.models, init);
    }

    #[test]
    fn federated_run_is_reproducible() {
        let out1 = train_federated(micro_config(7)).unwrap();
        let out2 = train_federated(micro_config(7)).unwrap();
        assert_eq!(out1.history.checksum(), out2.history.checksum());
        assert_eq!(out1.models, out2.models);
    }

    #[test]
    fn client_gradients_match_centralized_portion_on_same_batch() {
        // A domain-X client's combined-mode gradients equal the X portion of
        // the centralized gradient at the same snapshot and batch.
        let config = micro_config(8);
        let (clients, _) = build_clients(&config).unwrap();
        let models = CycleModels::new(config.spec.clone(), 31).unwrap();
        let bx = sample_batch(&clients[0], 0).unwrap();
        let (_, grads_client) =
            local_objective_gradients::<f32>(&models, Domain::X, &bx, &config.weights).unwrap();
        let (msgs, _) =
            client_round(&clients[0], &models, &config.weights, 0, GradMode::Alg1Combined)
                .unwrap();
        let from_wire = aggregate(&msgs, AggMode::Sum).unwrap();
        assert_eq!(from_wire, grads_client);
    }
}

use std::collections::VecDeque;
use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_surrogate_dataset, LabeledTestSet, SurrogateDataset, USetCollection};
use crate::error::{Error, Result};
use crate::nn::{adam_step, backward, AdamState, Batch, GradientSet, ModelDelta, ModelParams};
use crate::priors::{estimate_surrogate_prior, PriorVector};
use crate::transition::{build_transition_matrix, TransitionMatrix};

pub use crate::nn::predict;

/// Independent generator for `(seed, stream)`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids derived from a run seed.
pub mod streams {
    pub const TASK: u64 = 1;
    pub const ALLOCATION: u64 = 2;
    pub const TEST_SET: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const PRIOR_NOISE: u64 = 5;
    pub fn client_data(c: usize) -> u64 {
        100 + c as u64
    }
    pub fn client_batches(c: usize) -> u64 {
        1000 + c as u64
    }
    pub fn client_objective(c: usize) -> u64 {
        2000 + c as u64
    }
    pub fn client_subsample(c: usize) -> u64 {
        3000 + c as u64
    }
    pub fn client_eval(c: usize) -> u64 {
        4000 + c as u64
    }
}

/// The loss a client minimizes locally. Rows index the objective's own data.
pub trait LocalObjective: Send + Sync + fmt::Debug {
    /// Number of training rows.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Minibatches for one pass over the data. The default shuffles every row and
    /// cuts the permutation into chunks of `batch_size`.
    fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Loss (including the L1 penalty) and its gradient on `rows`.
    fn loss_and_grad(
        &self,
        params: &ModelParams,
        rows: &[usize],
        l1_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradientSet)>;
}

pub(crate) fn gather(inputs: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    inputs.select(Axis(0), rows)
}

/// Cross-entropy on the surrogate labels through a fixed transition head.
#[derive(Debug, Clone)]
pub struct TransitionObjective {
    data: SurrogateDataset,
    head: TransitionMatrix,
}

impl TransitionObjective {
    pub fn new(data: SurrogateDataset, head: TransitionMatrix) -> Result<Self> {
        if data.total_sets() != head.sets() {
            return Err(Error::Shape(format!(
                "dataset pads to {} sets, head has {}",
                data.total_sets(),
                head.sets()
            )));
        }
        Ok(Self { data, head })
    }

    pub fn data(&self) -> &SurrogateDataset {
        &self.data
    }

    pub fn head(&self) -> &TransitionMatrix {
        &self.head
    }
}

impl LocalObjective for TransitionObjective {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn loss_and_grad(
        &self,
        params: &ModelParams,
        rows: &[usize],
        l1_weight: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradientSet)> {
        let labels = rows.iter().map(|&r| self.data.labels()[r]).collect();
        let batch = Batch::new(gather(self.data.inputs(), rows), labels, self.head.sets())?;
        backward(params, &batch, Some(&self.head), l1_weight)
    }
}

/// Plain cross-entropy on labeled rows.
#[derive(Debug, Clone)]
pub struct SupervisedObjective {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl SupervisedObjective {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape("inputs and labels differ in length".into()));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::InvalidArgument("label outside class range".into()));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl LocalObjective for SupervisedObjective {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn loss_and_grad(
        &self,
        params: &ModelParams,
        rows: &[usize],
        l1_weight: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradientSet)> {
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let batch = Batch::new(gather(self.inputs.view(), rows), labels, self.classes)?;
        backward(params, &batch, None, l1_weight)
    }
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub l1_weight: f64,
}

impl Default for LocalSettings {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            l1_weight: 0.0,
        }
    }
}

/// Everything one simulated client keeps between rounds.
///
/// Adam moments and the pending minibatch queue survive across rounds, so two
/// consecutive updates of one step each replay a single two-step update.
#[derive(Debug)]
pub struct ClientState {
    id: usize,
    objective: Box<dyn LocalObjective>,
    head: Option<TransitionMatrix>,
    surrogate_prior: Option<PriorVector>,
    local: Option<ModelParams>,
    adam: AdamState,
    settings: LocalSettings,
    batch_rng: ChaCha8Rng,
    objective_rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
    round: usize,
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub delta: ModelDelta,
    pub mean_loss: f64,
}

impl ClientState {
    /// Wraps an arbitrary objective. `template` fixes the model architecture.
    pub fn new(
        id: usize,
        objective: Box<dyn LocalObjective>,
        template: &ModelParams,
        settings: LocalSettings,
        seed: u64,
    ) -> Result<Self> {
        if settings.epochs == 0 || settings.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(settings.l1_weight >= 0.0) {
            return Err(Error::InvalidArgument("l1 weight must be non-negative".into()));
        }
        Ok(Self {
            id,
            objective,
            head: None,
            surrogate_prior: None,
            local: None,
            adam: AdamState::new(template),
            settings,
            batch_rng: rng_stream(seed, streams::client_batches(id)),
            objective_rng: rng_stream(seed, streams::client_objective(id)),
            queue: VecDeque::new(),
            round: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn objective(&self) -> &dyn LocalObjective {
        self.objective.as_ref()
    }

    /// The transition head; present only for transition-based training.
    pub fn head(&self) -> Option<&TransitionMatrix> {
        self.head.as_ref()
    }

    pub fn surrogate_prior(&self) -> Option<&PriorVector> {
        self.surrogate_prior.as_ref()
    }

    /// Local model after the latest update.
    pub fn local_model(&self) -> Option<&ModelParams> {
        self.local.as_ref()
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn settings(&self) -> &LocalSettings {
        &self.settings
    }

    /// Local steps per round: `epochs × batches per epoch`.
    pub fn steps_per_round(&self) -> usize {
        self.settings.epochs * self.objective.batches_per_epoch(self.settings.batch_size)
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = self
                .objective
                .epoch_batches(self.settings.batch_size, &mut self.batch_rng)
                .into();
        }
        self.queue.pop_front().expect("objective produced no batches")
    }
}

/// Sets up a client that learns from its U sets through the transition head.
///
/// Builds the surrogate dataset, estimates the surrogate prior from set sizes,
/// and forms the transition matrix. Hidden labels are never read.
pub fn client_init(
    u: &USetCollection,
    test_prior: &PriorVector,
    total_sets: usize,
    template: &ModelParams,
    settings: LocalSettings,
    seed: u64,
) -> Result<ClientState> {
    let data = build_surrogate_dataset(u, total_sets)?;
    let pibar = estimate_surrogate_prior(&u.set_sizes(), total_sets)?;
    let head = build_transition_matrix(test_prior, &pibar, u.priors(), total_sets)?;
    if template.classes() != head.classes() {
        return Err(Error::Shape(format!(
            "model has {} outputs, head expects {}",
            template.classes(),
            head.classes()
        )));
    }
    let objective = TransitionObjective::new(data, head.clone())?;
    let mut state = ClientState::new(u.client(), Box::new(objective), template, settings, seed)?;
    state.head = Some(head);
    state.surrogate_prior = Some(pibar);
    Ok(state)
}

/// Copies `f` into the local model, takes `steps` Adam steps on the local
/// objective and returns `f_c − f`. Returns `None` when the client has no data.
pub fn client_update(
    state: &mut ClientState,
    f: &ModelParams,
    steps: usize,
    lr: f64,
) -> Result<Option<ClientUpdate>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("local steps must be at least 1".into()));
    }
    if !f.tensors().same_shape(state.adam.first_moment()) {
        return Err(Error::Shape("global model does not match the client's architecture".into()));
    }
    if state.objective.is_empty() {
        log::warn!(
            "client {} has no training rows; skipped in round {}",
            state.id,
            state.round
        );
        return Ok(None);
    }
    let mut local = f.clone();
    let mut total_loss = 0.0;
    for step in 0..steps {
        let rows = state.next_batch();
        let diverged = |message: String| Error::ClientDivergence {
            client: state.id,
            round: state.round,
            step,
            message,
        };
        let (loss, grads) = state
            .objective
            .loss_and_grad(&local, &rows, state.settings.l1_weight, &mut state.objective_rng)
            .map_err(|e| match e {
                Error::NonFinite(m) => diverged(m),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        adam_step(&mut local, &grads, &mut state.adam, lr).map_err(|e| diverged(e.to_string()))?;
        total_loss += loss;
    }
    let delta = local.tensors().difference(f.tensors());
    state.local = Some(local);
    Ok(Some(ClientUpdate {
        client: state.id,
        delta,
        mean_loss: total_loss / steps as f64,
    }))
}

/// The global model and round bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub params: ModelParams,
    pub round: usize,
    pub global_lr: f64,
    /// Client ids folded into the model at each round, ascending.
    #[serde(default)]
    pub aggregated: Vec<Vec<usize>>,
}

impl ServerState {
    pub fn new(params: ModelParams, global_lr: f64) -> Self {
        Self {
            params,
            round: 0,
            global_lr,
            aggregated: Vec::new(),
        }
    }
}

/// Averages client deltas into the global model: `f ← f + (α_g / C')·Σ_c Δ_c`.
///
/// The sum runs in ascending client id regardless of the order given, so the
/// result does not depend on how clients were scheduled.
pub fn server_execute(server: &mut ServerState, updates: &[(usize, ModelDelta)]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let mut order: Vec<&(usize, ModelDelta)> = updates.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument("duplicate client id in updates".into()));
    }
    let mut sum = crate::nn::Tensors::zeros_like(server.params.tensors());
    for (_, delta) in &order {
        sum.ensure_same_shape(delta, "client delta")?;
        sum.axpy(1.0, delta);
    }
    let mut next = server.params.clone();
    next.apply_delta(server.global_lr / updates.len() as f64, &sum)?;
    if !next.tensors().is_finite() {
        return Err(Error::NonFinite(format!(
            "global model after round {}",
            server.round + 1
        )));
    }
    server.params = next;
    server.round += 1;
    server.aggregated.push(order.iter().map(|(id, _)| *id).collect());
    Ok(())
}

/// Fraction of `test` misclassified by `params`.
pub fn test_error(params: &ModelParams, test: &LabeledTestSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let pred = predict(params, test.inputs.view())?;
    let wrong = pred.iter().zip(&test.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / test.len() as f64)
}

/// Per-round evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_error: f64,
    /// Mean local training loss over participating clients; absent for round 0.
    pub surrogate_loss: Option<f64>,
    pub wall_ms: f64,
    pub clients_trained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_errors: Option<Vec<f64>>,
}

/// A simulated federation ready to train.
#[derive(Debug)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test_set: LabeledTestSet,
    /// Optional per-client evaluation sets, indexed like `clients`.
    pub client_test_sets: Option<Vec<LabeledTestSet>>,
    pub local_lr: f64,
    /// Record wall-clock time per round; off keeps outputs byte-stable.
    pub record_timing: bool,
}

impl Federation {
    fn evaluate(&self, round: usize, loss: Option<f64>, trained: usize, wall_ms: f64) -> Result<RoundMetrics> {
        let client_errors = match &self.client_test_sets {
            Some(sets) => Some(
                sets.iter()
                    .map(|s| test_error(&self.server.params, s))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(RoundMetrics {
            round,
            test_error: test_error(&self.server.params, &self.test_set)?,
            surrogate_loss: loss,
            wall_ms,
            clients_trained: trained,
            client_errors,
        })
    }

    /// One round of local training on every client followed by aggregation.
    pub fn step_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let round = self.server.round + 1;
        let f = &self.server.params;
        let lr = self.local_lr;
        let results: Vec<Result<Option<ClientUpdate>>> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                c.set_round(round);
                let steps = c.steps_per_round();
                client_update(c, f, steps.max(1), lr)
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        for r in results {
            if let Some(u) = r? {
                losses.push(u.mean_loss);
                updates.push((u.client, u.delta));
            }
        }
        if updates.is_empty() {
            return Err(Error::Invariant(format!("no client trained in round {round}")));
        }
        server_execute(&mut self.server, &updates)?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let wall_ms = if self.record_timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        self.evaluate(round, Some(loss), updates.len(), wall_ms)
    }

    /// Evaluates the initial model, then trains `rounds` rounds. `on_round` sees
    /// each record as soon as it exists.
    pub fn run_training<F: FnMut(&RoundMetrics) -> Result<()>>(
        &mut self,
        rounds: usize,
        mut on_round: F,
    ) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(rounds + 1);
        let first = self.evaluate(self.server.round, None, 0, 0.0)?;
        on_round(&first)?;
        out.push(first);
        for _ in 0..rounds {
            let m = self.step_round()?;
            on_round(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_task, sample_test_set, sample_u_sets};
    use crate::nn::{backward, Activation, Tensors};
    use crate::priors::{sample_prior_matrix, ClassPriorMatrix, PriorRole};

    fn model(d: usize, k: usize, seed: u64) -> ModelParams {
        ModelParams::init(d, &[8], Activation::Relu, k, &mut rng_stream(seed, 0)).unwrap()
    }

    fn fedul_client(seed: u64, sets: usize, total: usize) -> (ClientState, USetCollection) {
        let mut rng = rng_stream(seed, 1);
        let task = gen_gaussian_task(3, 2, 2.0, &mut rng).unwrap();
        let p = sample_prior_matrix(3, sets, 0.1, 0.9, &mut rng).unwrap();
        let u = sample_u_sets(0, &task, &p, &vec![20; sets], &mut rng).unwrap();
        let pi = PriorVector::uniform(3, PriorRole::Test);
        let settings = LocalSettings {
            batch_size: 16,
            ..Default::default()
        };
        let c = client_init(&u, &pi, total, &model(2, 3, seed), settings, seed).unwrap();
        (c, u)
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let (mut c, _) = fedul_client(1, 3, 3);
        let f = model(2, 3, 1);
        let u = client_update(&mut c, &f, 3, 0.0).unwrap().unwrap();
        assert!(u.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_head_and_labels() {
        let (c, _) = fedul_client(2, 3, 5);
        let head = c.head().unwrap();
        assert_eq!(head.sets(), 5);
        assert!(head.matrix().rows().into_iter().skip(3).all(|r| r.iter().all(|&v| v == 0.0)));
        let obj = TransitionObjective::new(
            build_surrogate_dataset(&fedul_client(2, 3, 5).1, 5).unwrap(),
            head.clone(),
        )
        .unwrap();
        assert!(obj.data().labels().iter().all(|&l| l < 3));
    }

    #[test]
    fn identical_inputs_identical_state() {
        let (mut a, _) = fedul_client(3, 3, 3);
        let (mut b, _) = fedul_client(3, 3, 3);
        let f = model(2, 3, 3);
        let da = client_update(&mut a, &f, 4, 1e-2).unwrap().unwrap();
        let db = client_update(&mut b, &f, 4, 1e-2).unwrap().unwrap();
        assert_eq!(da.delta, db.delta);
        assert_eq!(a.head(), b.head());
    }

    #[test]
    fn single_full_batch_step_is_one_adam_step() {
        let (mut c, u) = fedul_client(4, 3, 3);
        c.settings.batch_size = 1000;
        let f = model(2, 3, 4);
        let lr = 1e-3;
        let up = client_update(&mut c, &f, 1, lr).unwrap().unwrap();
        // Full batch: row order does not change the mean gradient beyond rounding.
        let data = build_surrogate_dataset(&u, 3).unwrap();
        let batch = Batch::new(data.inputs().to_owned(), data.labels().to_vec(), 3).unwrap();
        let (_, g) = backward(&f, &batch, c.head(), 0.0).unwrap();
        for (d, g) in up.delta.iter().zip(g.iter()) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((d - expected).abs() < 1e-12 * lr.max(d.abs()) + 1e-15, "{d} vs {expected}");
        }
    }

    #[test]
    fn two_single_steps_replay_one_double_step() {
        let (mut a, _) = fedul_client(5, 4, 4);
        let (mut b, _) = fedul_client(5, 4, 4);
        let f = model(2, 3, 5);
        let lr = 1e-2;
        let d1 = client_update(&mut a, &f, 1, lr).unwrap().unwrap().delta;
        let mut f1 = f.clone();
        f1.apply_delta(1.0, &d1).unwrap();
        let d2 = client_update(&mut a, &f1, 1, lr).unwrap().unwrap().delta;
        let mut two = f1.clone();
        two.apply_delta(1.0, &d2).unwrap();
        let d = client_update(&mut b, &f, 2, lr).unwrap().unwrap().delta;
        let mut one = f.clone();
        one.apply_delta(1.0, &d).unwrap();
        assert!(two.tensors().max_abs_diff(one.tensors()) < 1e-12);
    }

    fn delta_like(f: &ModelParams, v: f64) -> Tensors {
        let mut t = Tensors::zeros_like(f.tensors());
        t.iter_mut().enumerate().for_each(|(i, x)| *x = v * (i as f64 + 1.0).sin());
        t
    }

    #[test]
    fn aggregation_identities() {
        let f = model(3, 2, 6);
        let mut s = ServerState::new(f.clone(), 1.0);
        let zero = Tensors::zeros_like(f.tensors());
        server_execute(&mut s, &[(0, zero.clone()), (1, zero)]).unwrap();
        assert_eq!(s.params, f);
        assert_eq!(s.round, 1);

        let u = delta_like(&f, 0.3);
        let mut neg = u.clone();
        neg.scale(-1.0);
        let mut s = ServerState::new(f.clone(), 1.0);
        server_execute(&mut s, &[(0, u.clone()), (1, neg)]).unwrap();
        assert_eq!(s.params, f);

        let mut s = ServerState::new(f.clone(), 1.0);
        server_execute(&mut s, &[(0, u.clone())]).unwrap();
        let mut expected = f.clone();
        expected.apply_delta(1.0, &u).unwrap();
        assert_eq!(s.params, expected);

        assert!(server_execute(&mut s, &[]).is_err());
    }

    #[test]
    fn aggregation_is_order_independent() {
        let f = model(3, 2, 7);
        let ups: Vec<(usize, Tensors)> =
            (0..5).map(|c| (c, delta_like(&f, 0.1 * (c as f64 + 1.0).powi(3)))).collect();
        let mut a = ServerState::new(f.clone(), 0.7);
        server_execute(&mut a, &ups).unwrap();
        let mut rev = ups.clone();
        rev.reverse();
        rev.swap(0, 2);
        let mut b = ServerState::new(f, 0.7);
        server_execute(&mut b, &rev).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_rounds_reports_untrained_model() {
        let mut rng = rng_stream(8, 1);
        let task = gen_gaussian_task(3, 2, 2.0, &mut rng).unwrap();
        let test = sample_test_set(&task, task.test_prior(), 300, &mut rng).unwrap();
        let (c, _) = fedul_client(8, 3, 3);
        let mut fed = Federation {
            server: ServerState::new(model(2, 3, 8), 1.0),
            clients: vec![c],
            test_set: test,
            client_test_sets: None,
            local_lr: 1e-3,
            record_timing: false,
        };
        let m = fed.run_training(0, |_| Ok(())).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].round, 0);
        assert!(m[0].surrogate_loss.is_none());
        let m = fed.run_training(2, |_| Ok(())).unwrap();
        assert_eq!(m.last().unwrap().round, 2);
    }

    #[test]
    fn empty_objective_is_skipped() {
        let f = model(2, 2, 9);
        let obj = SupervisedObjective::new(Array2::zeros((0, 2)), vec![], 2).unwrap();
        let mut c = ClientState::new(0, Box::new(obj), &f, LocalSettings::default(), 9).unwrap();
        assert!(client_update(&mut c, &f, 1, 1e-3).unwrap().is_none());
    }

    #[test]
    fn divergence_carries_indices() {
        let f = model(2, 2, 10);
        let x = Array2::from_elem((4, 2), f64::NAN);
        let obj = SupervisedObjective::new(x, vec![0, 1, 0, 1], 2).unwrap();
        let mut c = ClientState::new(3, Box::new(obj), &f, LocalSettings::default(), 10).unwrap();
        c.set_round(7);
        match client_update(&mut c, &f, 2, 1e-3) {
            Err(Error::ClientDivergence { client, round, step, .. }) => {
                assert_eq!((client, round, step), (3, 7, 0))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_priors_give_identity_head() {
        let mut rng = rng_stream(11, 1);
        let task = gen_gaussian_task(3, 2, 2.0, &mut rng).unwrap();
        let u = sample_u_sets(0, &task, &ClassPriorMatrix::identity(3), &[10, 10, 10], &mut rng)
            .unwrap();
        let pi = PriorVector::uniform(3, PriorRole::Test);
        let c = client_init(&u, &pi, 3, &model(2, 3, 11), LocalSettings::default(), 11).unwrap();
        assert_eq!(c.head().unwrap().matrix(), &Array2::<f64>::eye(3));
    }
}

//! Adaptive factor weighting via TD3 actor-critic.
//!
//! The estimator's visual and lidar factor weights are chosen per keyframe by
//! a small actor network that reads a grid summary of the visual frontend's
//! tracking state. Training is episodic over ten-keyframe windows with the
//! reciprocal of the translational relative pose error as reward. Networks
//! are plain fully-connected layers with hand-rolled backprop and Adam so
//! training is dependency-free and bit-reproducible under a fixed seed.

use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector, Vector2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::Pose;
use crate::sim::{derived_rng, streams};

/// Reward ceiling; a perfect estimate would otherwise divide by zero.
pub const REWARD_MAX: f64 = 100.0;

const CHECKPOINT_MAGIC: [u8; 4] = *b"AWCK";
const CHECKPOINT_VERSION: u32 = 1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
    #[error("observation has {got} values, the agent expects {expected}")]
    Dimension { expected: usize, got: usize },
}

// ---------------------------------------------------------------------------
// observation grid

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridShape {
    fn default() -> Self {
        GridShape { rows: 4, cols: 6 }
    }
}

impl GridShape {
    /// Flattened observation length: (count, dx, dy) per cell.
    pub fn dim(&self) -> usize {
        3 * self.rows * self.cols
    }
}

/// One tracked feature's pixel position and frame-to-frame displacement.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMotion {
    pub position: Vector2<f64>,
    pub displacement: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CellStats {
    pub count: u32,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

/// Grid summary of the frontend's tracking state: per cell the number of
/// tracked features and their mean pixel displacement. Empty cells read
/// (0, 0, 0).
#[derive(Clone, Debug)]
pub struct ObservationMatrix {
    pub shape: GridShape,
    /// Row-major cells, `rows * cols` entries.
    pub cells: Vec<CellStats>,
}

impl ObservationMatrix {
    pub fn zeros(shape: GridShape) -> Self {
        ObservationMatrix {
            shape,
            cells: vec![CellStats::default(); shape.rows * shape.cols],
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.shape.dim());
        for (c, cell) in self.cells.iter().enumerate() {
            out[3 * c] = cell.count as f64;
            out[3 * c + 1] = cell.mean_dx;
            out[3 * c + 2] = cell.mean_dy;
        }
        out
    }
}

/// Bins features into the grid and averages their displacements per cell.
/// Features outside the image bounds land in the nearest edge cell.
pub fn build_observation(
    features: &[FeatureMotion],
    image_size: (f64, f64),
    shape: GridShape,
) -> ObservationMatrix {
    let mut obs = ObservationMatrix::zeros(shape);
    let (width, height) = image_size;
    let cell_w = width / shape.cols as f64;
    let cell_h = height / shape.rows as f64;
    for f in features {
        let col = ((f.position.x / cell_w).floor().max(0.0) as usize).min(shape.cols - 1);
        let row = ((f.position.y / cell_h).floor().max(0.0) as usize).min(shape.rows - 1);
        let cell = &mut obs.cells[row * shape.cols + col];
        let n = cell.count as f64;
        cell.mean_dx = (cell.mean_dx * n + f.displacement.x) / (n + 1.0);
        cell.mean_dy = (cell.mean_dy * n + f.displacement.y) / (n + 1.0);
        cell.count += 1;
    }
    obs
}

// ---------------------------------------------------------------------------
// reward

/// Reciprocal translational relative-pose error between the estimated and
/// true motion from keyframe i to j, clamped to `[0, REWARD_MAX]`.
pub fn reward(est_i: &Pose, est_j: &Pose, truth_i: &Pose, truth_j: &Pose) -> f64 {
    let est_rel = est_i.inverse().compose(est_j);
    let true_rel = truth_i.inverse().compose(truth_j);
    let err = (est_rel.translation - true_rel.translation).norm();
    (1.0 / err).clamp(0.0, REWARD_MAX)
}

// ---------------------------------------------------------------------------
// multilayer perceptron with manual backprop

/// Fully-connected network: rectifier hidden layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Per layer, `sizes[l+1] x sizes[l]`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Per-layer activations saved by the forward pass for backprop.
pub struct MlpCache {
    /// Layer inputs, `xs[0]` is the network input.
    xs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
}

/// Parameter-shaped accumulator, used for gradients and Adam moments.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Mlp {
    /// He-initialized weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut ChaCha20Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output layers");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let std = (2.0 / n_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            weights.push(DMatrix::from_fn(n_out, n_in, |_, _| dist.sample(rng)));
            biases.push(DVector::zeros(n_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros_like(&self) -> MlpGrads {
        MlpGrads {
            w: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            b: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = w * a + b;
            if l < last {
                pre.apply(|v| *v = v.max(0.0));
            }
            a = pre;
        }
        a
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        let mut cache = MlpCache {
            xs: vec![x.clone()],
            pre: Vec::new(),
        };
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let pre = w * cache.xs.last().unwrap() + b;
            cache.pre.push(pre.clone());
            let mut a = pre;
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
            cache.xs.push(a);
        }
        (cache.xs.last().unwrap().clone(), cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &DVector<f64>,
        grads: &mut MlpGrads,
    ) -> DVector<f64> {
        let mut delta = grad_out.clone();
        for l in (0..self.weights.len()).rev() {
            grads.w[l] += &delta * cache.xs[l].transpose();
            grads.b[l] += &delta;
            let mut grad_x = self.weights[l].transpose() * delta;
            if l > 0 {
                for (g, p) in grad_x.iter_mut().zip(cache.pre[l - 1].iter()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = grad_x;
        }
        delta
    }

    fn param_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| {
                // row-major weight block, then the bias vector
                (0..w.nrows())
                    .flat_map(move |r| (0..w.ncols()).map(move |c| w[(r, c)]))
                    .chain(b.iter().copied())
            })
    }
}

/// target <- tau * main + (1 - tau) * target
pub fn soft_update(target: &mut Mlp, main: &Mlp, tau: f64) {
    for (tw, mw) in target.weights.iter_mut().zip(&main.weights) {
        *tw = &*tw * (1.0 - tau) + mw * tau;
    }
    for (tb, mb) in target.biases.iter_mut().zip(&main.biases) {
        *tb = &*tb * (1.0 - tau) + mb * tau;
    }
}

struct Adam {
    t: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    fn new(net: &Mlp) -> Self {
        Adam {
            t: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &MlpGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        };
        for l in 0..net.weights.len() {
            for i in 0..net.weights[l].len() {
                update(
                    &mut net.weights[l][i],
                    grads.w[l][i],
                    &mut self.m.w[l][i],
                    &mut self.v.w[l][i],
                );
            }
            for i in 0..net.biases[l].len() {
                update(
                    &mut net.biases[l][i],
                    grads.b[l][i],
                    &mut self.m.b[l][i],
                    &mut self.v.b[l][i],
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// replay buffer

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: DVector<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: DVector<f64>,
    pub done: bool,
}

/// Ring buffer with FIFO eviction and uniform batch sampling without
/// replacement.
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            storage: Vec::new(),
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    fn sample<'a>(&'a self, amount: usize, rng: &mut ChaCha20Rng) -> Option<Vec<&'a Transition>> {
        if self.storage.len() < amount {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.storage.len(), amount);
        Some(idx.iter().map(|i| &self.storage[i]).collect())
    }
}

// ---------------------------------------------------------------------------
// agent

/// Visual and lidar factor weights for one keyframe, both within the
/// configured bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightAction {
    pub visual: f64,
    pub lidar: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Td3Params {
    pub hidden: usize,
    pub discount: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub batch: usize,
    pub lr: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Exploration noise standard deviation, in weight units.
    pub explore_noise: f64,
    /// Target-policy smoothing noise standard deviation, in weight units.
    pub target_noise: f64,
    /// Clip bound on the smoothing noise.
    pub noise_clip: f64,
}

impl Default for Td3Params {
    fn default() -> Self {
        Td3Params {
            hidden: 64,
            discount: 0.99,
            tau: 0.005,
            policy_delay: 2,
            batch: 64,
            lr: 3e-4,
            w_min: 0.1,
            w_max: 10.0,
            explore_noise: 0.5,
            target_noise: 1.0,
            noise_clip: 2.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainLosses {
    pub critic: f64,
    /// Present on delayed actor-update steps.
    pub actor: Option<f64>,
}

/// Deterministic inference view of the actor, cheap to clone onto another
/// thread while training continues.
#[derive(Clone, Debug)]
pub struct ActorSnapshot {
    actor: Mlp,
    w_min: f64,
    w_max: f64,
}

impl ActorSnapshot {
    pub fn act(&self, obs: &ObservationMatrix) -> WeightAction {
        let z = self.actor.forward(&obs.flatten());
        scale_action(&z, self.w_min, self.w_max)
    }
}

fn scale_action(z: &DVector<f64>, w_min: f64, w_max: f64) -> WeightAction {
    let mid = 0.5 * (w_min + w_max);
    let half = 0.5 * (w_max - w_min);
    WeightAction {
        visual: mid + half * z[0].tanh(),
        lidar: mid + half * z[1].tanh(),
    }
}

/// Twin-delayed deterministic policy gradient agent over the observation
/// grid. Six networks: actor and two critics, each with a slow-moving target
/// copy. Targets start as exact copies and only ever move by soft updates.
pub struct Td3Agent {
    pub params: Td3Params,
    obs_dim: usize,
    actor: Mlp,
    actor_target: Mlp,
    critic1: Mlp,
    critic2: Mlp,
    critic_target1: Mlp,
    critic_target2: Mlp,
    adam_actor: Adam,
    adam_critic1: Adam,
    adam_critic2: Adam,
    rng: ChaCha20Rng,
    step: u64,
}

impl Td3Agent {
    pub fn new(shape: GridShape, params: Td3Params, seed: u64) -> Self {
        let obs_dim = shape.dim();
        let mut init = derived_rng(seed, streams::AGENT_INIT);
        let actor_sizes = [obs_dim, params.hidden, params.hidden, 2];
        let critic_sizes = [obs_dim + 2, params.hidden, params.hidden, 1];
        let actor = Mlp::new(&actor_sizes, &mut init);
        let critic1 = Mlp::new(&critic_sizes, &mut init);
        let critic2 = Mlp::new(&critic_sizes, &mut init);
        let (adam_actor, adam_critic1, adam_critic2) =
            (Adam::new(&actor), Adam::new(&critic1), Adam::new(&critic2));
        Td3Agent {
            params,
            obs_dim,
            actor_target: actor.clone(),
            critic_target1: critic1.clone(),
            critic_target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            adam_actor,
            adam_critic1,
            adam_critic2,
            rng: derived_rng(seed, streams::AGENT_TRAIN),
            step: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn actor_snapshot(&self) -> ActorSnapshot {
        ActorSnapshot {
            actor: self.actor.clone(),
            w_min: self.params.w_min,
            w_max: self.params.w_max,
        }
    }

    /// Actor forward pass scaled into the weight bounds; with `explore`,
    /// Gaussian noise is added and the result clipped back into bounds.
    pub fn act(&mut self, obs: &ObservationMatrix, explore: bool) -> WeightAction {
        let z = self.actor.forward(&obs.flatten());
        let mut a = scale_action(&z, self.params.w_min, self.params.w_max);
        if explore {
            let noise = Normal::new(0.0, self.params.explore_noise).unwrap();
            a.visual = (a.visual + noise.sample(&mut self.rng))
                .clamp(self.params.w_min, self.params.w_max);
            a.lidar = (a.lidar + noise.sample(&mut self.rng))
                .clamp(self.params.w_min, self.params.w_max);
        }
        a
    }

    /// Clipped double-Q target: y = r + gamma*(1-done)*min(Q'1,Q'2)(s', a')
    /// with a' the target actor's action plus clipped smoothing noise.
    fn compute_targets(&mut self, batch: &[&Transition]) -> Vec<f64> {
        let noise = Normal::new(0.0, self.params.target_noise).unwrap();
        batch
            .iter()
            .map(|t| {
                let z = self.actor_target.forward(&t.next_obs);
                let a = scale_action(&z, self.params.w_min, self.params.w_max);
                let mut next_a = [a.visual, a.lidar];
                if self.params.target_noise > 0.0 {
                    for v in &mut next_a {
                        let eps = noise
                            .sample(&mut self.rng)
                            .clamp(-self.params.noise_clip, self.params.noise_clip);
                        *v = (*v + eps).clamp(self.params.w_min, self.params.w_max);
                    }
                }
                let input = critic_input(&t.next_obs, &next_a);
                let q1 = self.critic_target1.forward(&input)[0];
                let q2 = self.critic_target2.forward(&input)[0];
                let not_done = if t.done { 0.0 } else { 1.0 };
                t.reward + self.params.discount * not_done * q1.min(q2)
            })
            .collect()
    }

    /// One TD3 update from a uniformly sampled batch. Returns `None` when the
    /// buffer cannot fill a batch yet.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Option<TrainLosses> {
        let batch = buffer.sample(self.params.batch, &mut self.rng)?;
        let targets = self.compute_targets(&batch);
        let scale = 1.0 / batch.len() as f64;

        // both critics regress to the shared target
        let mut critic_loss = 0.0;
        for (critic, adam) in [
            (&mut self.critic1, &mut self.adam_critic1),
            (&mut self.critic2, &mut self.adam_critic2),
        ] {
            let mut grads = critic.zeros_like();
            for (t, y) in batch.iter().zip(&targets) {
                let input = critic_input(&t.obs, &t.action);
                let (q, cache) = critic.forward_cached(&input);
                let err = q[0] - y;
                critic_loss += scale * err * err;
                let grad_out = DVector::from_element(1, 2.0 * err * scale);
                critic.backward(&cache, &grad_out, &mut grads);
            }
            adam.step(critic, &grads, self.params.lr);
        }

        // delayed actor ascent on Q1 plus target soft updates
        self.step += 1;
        let mut actor_loss = None;
        if self.step % self.params.policy_delay == 0 {
            let mut grads = self.actor.zeros_like();
            let mut loss = 0.0;
            let half = 0.5 * (self.params.w_max - self.params.w_min);
            for t in &batch {
                let (z, actor_cache) = self.actor.forward_cached(&t.obs);
                let a = scale_action(&z, self.params.w_min, self.params.w_max);
                let input = critic_input(&t.obs, &[a.visual, a.lidar]);
                let (q, critic_cache) = self.critic1.forward_cached(&input);
                loss -= scale * q[0];
                // dQ/da through the frozen critic, then through the squashing
                let grad_q = DVector::from_element(1, -scale);
                let mut sink = self.critic1.zeros_like();
                let grad_input = self.critic1.backward(&critic_cache, &grad_q, &mut sink);
                let grad_a = grad_input.rows(self.obs_dim, 2);
                let grad_z = DVector::from_fn(2, |r, _| {
                    let th = z[r].tanh();
                    grad_a[r] * half * (1.0 - th * th)
                });
                self.actor.backward(&actor_cache, &grad_z, &mut grads);
            }
            self.adam_actor.step(&mut self.actor, &grads, self.params.lr);
            soft_update(&mut self.actor_target, &self.actor, self.params.tau);
            soft_update(&mut self.critic_target1, &self.critic1, self.params.tau);
            soft_update(&mut self.critic_target2, &self.critic2, self.params.tau);
            actor_loss = Some(loss);
        }
        Some(TrainLosses {
            critic: critic_loss,
            actor: actor_loss,
        })
    }

    /// Writes layer sizes and row-major parameters of all six networks.
    pub fn save_checkpoint<W: Write>(&self, out: &mut W) -> Result<(), AdaptiveError> {
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let nets = self.networks();
        out.write_all(&(nets.len() as u32).to_le_bytes())?;
        for net in nets {
            out.write_all(&(net.sizes.len() as u32).to_le_bytes())?;
            for s in &net.sizes {
                out.write_all(&(*s as u32).to_le_bytes())?;
            }
            for p in net.param_iter() {
                out.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores all six networks from a checkpoint written by an agent with
    /// the same architecture.
    pub fn load_checkpoint<R: Read>(&mut self, input: &mut R) -> Result<(), AdaptiveError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(AdaptiveError::BadCheckpoint("bad magic".into()));
        }
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(AdaptiveError::BadCheckpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = read_u32(input)? as usize;
        if count != 6 {
            return Err(AdaptiveError::BadCheckpoint(format!(
                "{count} networks, expected 6"
            )));
        }
        for net in self.networks_mut() {
            let n_sizes = read_u32(input)? as usize;
            if n_sizes != net.sizes.len() {
                return Err(AdaptiveError::BadCheckpoint(format!(
                    "layer count {n_sizes}, expected {}",
                    net.sizes.len()
                )));
            }
            for expected in &net.sizes {
                let got = read_u32(input)? as usize;
                if got != *expected {
                    return Err(AdaptiveError::BadCheckpoint(format!(
                        "layer size {got}, expected {expected}"
                    )));
                }
            }
            for l in 0..net.weights.len() {
                for r in 0..net.weights[l].nrows() {
                    for c in 0..net.weights[l].ncols() {
                        net.weights[l][(r, c)] = read_f64(input)?;
                    }
                }
                for r in 0..net.biases[l].len() {
                    net.biases[l][r] = read_f64(input)?;
                }
            }
        }
        Ok(())
    }

    fn networks(&self) -> [&Mlp; 6] {
        [
            &self.actor,
            &self.actor_target,
            &self.critic1,
            &self.critic2,
            &self.critic_target1,
            &self.critic_target2,
        ]
    }

    fn networks_mut(&mut self) -> [&mut Mlp; 6] {
        [
            &mut self.actor,
            &mut self.actor_target,
            &mut self.critic1,
            &mut self.critic2,
            &mut self.critic_target1,
            &mut self.critic_target2,
        ]
    }
}

fn critic_input(obs: &DVector<f64>, action: &[f64; 2]) -> DVector<f64> {
    let mut input = DVector::zeros(obs.len() + 2);
    input.rows_mut(0, obs.len()).copy_from(obs);
    input[obs.len()] = action[0];
    input[obs.len() + 1] = action[1];
    input
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, AdaptiveError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64, AdaptiveError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

// ---------------------------------------------------------------------------
// episodes

/// One agent-environment interaction step.
pub struct EnvStep {
    pub obs: ObservationMatrix,
    pub reward: f64,
    pub done: bool,
}

/// A ten-keyframe estimation segment the agent steps through: each action
/// sets the factor weights for the next window solve, the reward is the
/// reciprocal translational error of the resulting motion estimate.
pub trait EpisodeEnv {
    fn reset(&mut self) -> ObservationMatrix;
    /// `None` signals a solver failure; the episode is aborted and its
    /// transitions discarded.
    fn step(&mut self, action: &WeightAction) -> Option<EnvStep>;
}

pub struct Episode {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
}

/// Runs the agent through one episode. Returns `None` when the environment
/// reports a failure mid-episode.
pub fn run_episode(
    agent: &mut Td3Agent,
    env: &mut impl EpisodeEnv,
    explore: bool,
) -> Option<Episode> {
    let mut obs = env.reset();
    let mut transitions = Vec::new();
    let mut total_reward = 0.0;
    loop {
        let action = agent.act(&obs, explore);
        let step = env.step(&action)?;
        total_reward += step.reward;
        transitions.push(Transition {
            obs: obs.flatten(),
            action: [action.visual, action.lidar],
            reward: step.reward,
            next_obs: step.obs.flatten(),
            done: step.done,
        });
        obs = step.obs;
        if step.done {
            break;
        }
    }
    Some(Episode {
        transitions,
        total_reward,
    })
}

/// Training curve rows as CSV: `epoch,mean_test_reward`.
pub fn write_reward_csv<W: Write>(rows: &[(usize, f64)], out: &mut W) -> io::Result<()> {
    writeln!(out, "epoch,mean_test_reward")?;
    for (epoch, reward) in rows {
        writeln!(out, "{epoch},{reward}")?;
    }
    Ok(())
}

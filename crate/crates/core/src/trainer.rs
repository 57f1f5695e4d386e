//! Training loop: pretraining of the targets, the autoencoder and the
//! masked branch, then joint optimization of
//! `L = L_p + α L_a + β L_c + γ L_s` with periodic density-peaks and
//! target-distribution refreshes.

use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    ae_recon_loss, info_loss, remask, structural_target, GaeConfig, LossWeights, MaskToken, ProjectionHeads,
    TargetEmbeddings,
};
use crate::dpeaks::{self, ClusterState, DensityProfile, DEFAULT_PERCENTILES};
use crate::encoder::{attention_graph, fuse, AeStack, FeatureInput, FusionCoeff, GatEncoder, LayerInput, EPSILON_INIT};
use crate::error::{Error, Result};
use crate::graph_io::{apply_mask, normalize_adjacency, sample_masks, Graph, MaskPair};
use crate::metrics::{self, EvalResult};
use crate::numeric::{Adam, ParamId, ParamStore, SparseMatrix, Tape, Tensor2, Var};
use crate::selfopt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub xi: f64,
    pub p_edge: f64,
    pub p_feat: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub steps_per_epoch: usize,
    /// Cap on joint optimization steps.
    pub max_iters: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub embed_dim: usize,
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub ae_hidden: Vec<usize>,
    pub proj_hidden: usize,
    pub gae_hidden: usize,
    pub epsilon_init: f64,
    pub epsilon_trainable: bool,
    pub dof: f64,
    /// Target distribution refresh interval in joint epochs.
    pub p_refresh: usize,
    /// Density-peaks refresh interval in joint epochs; 0 never refreshes.
    pub dpeaks_refresh: usize,
    pub percentiles: Vec<f64>,
    pub convergence_tol: f64,
    pub convergence_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            gamma: 1.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 1.0,
            xi: 0.2,
            p_edge: 0.5,
            p_feat: 0.5,
            pretrain_epochs: 15,
            joint_epochs: 30,
            steps_per_epoch: 10,
            max_iters: 300,
            lr_pretrain: 1e-3,
            lr_finetune: 1e-4,
            embed_dim: 64,
            gat_hidden: 64,
            gat_heads: 4,
            ae_hidden: vec![512, 256],
            proj_hidden: 128,
            gae_hidden: 256,
            epsilon_init: EPSILON_INIT,
            epsilon_trainable: true,
            dof: selfopt::DEFAULT_DOF,
            p_refresh: 5,
            dpeaks_refresh: 5,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            convergence_tol: 1e-5,
            convergence_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        self.loss_weights().validate()?;
        for (name, v) in [("p_edge", self.p_edge), ("p_feat", self.p_feat)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune), ("dof", self.dof)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("steps_per_epoch", self.steps_per_epoch),
            ("embed_dim", self.embed_dim),
            ("gat_hidden", self.gat_hidden),
            ("gat_heads", self.gat_heads),
            ("proj_hidden", self.proj_hidden),
            ("gae_hidden", self.gae_hidden),
            ("p_refresh", self.p_refresh),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.ae_hidden.contains(&0) {
            return bad("ae_hidden widths must be >= 1".into());
        }
        if self.percentiles.is_empty() || self.percentiles.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            return bad(format!("percentiles must be non-empty and lie in (0, 100], got {:?}", self.percentiles));
        }
        if !self.epsilon_init.is_finite() {
            return bad("epsilon_init must be finite".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: [self.lambda_1, self.lambda_2, self.lambda_3], xi: self.xi }
    }
}

/// Loss values entering the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_p: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_s: f64,
}

pub fn total_loss(c: &LossComponents, cfg: &TrainConfig) -> f64 {
    c.l_p + cfg.alpha * c.l_a + cfg.beta * c.l_c + cfg.gamma * c.l_s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Autoencoder pretraining on `L_a`.
    Ae,
    /// Masked branch pretraining on `L_p`.
    Mask,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ae => "ae",
            Phase::Mask => "mask",
            Phase::Joint => "joint",
        }
    }
}

/// Per-epoch means of the loss components over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub l_p: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
    pub epsilon: f64,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KChange {
    pub epoch: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: String,
    pub n: usize,
    pub config: TrainConfig,
    pub gae_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub k_trajectory: Vec<KChange>,
    pub joint_steps: usize,
    pub converged: bool,
    pub k: usize,
    pub centers: Vec<usize>,
    pub sizes: Vec<usize>,
    pub d_c: f64,
    pub percentile: f64,
    pub votes: Vec<(f64, usize)>,
    /// Density-peaks cluster of every node.
    pub predictions: Vec<usize>,
    /// Most likely soft-assignment cluster of every node, when centers exist.
    pub q_predictions: Option<Vec<usize>>,
    pub eval: Option<EvalResult>,
    pub q_eval: Option<EvalResult>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    /// Fused embedding of the unmasked graph.
    pub embedding: Tensor2,
    pub state: ClusterState,
    pub profile: DensityProfile,
}

/// All trainable pieces sharing one parameter store.
pub struct Model {
    pub store: ParamStore,
    pub gat: GatEncoder,
    pub ae: AeStack,
    pub fusion: FusionCoeff,
    pub token: MaskToken,
    pub heads: ProjectionHeads,
    pub mu: Option<ParamId>,
}

impl Model {
    pub fn new(d_in: usize, cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gat = GatEncoder::new(&mut store, &mut rng, d_in, cfg.gat_hidden, cfg.gat_heads, cfg.embed_dim);
        let ae = AeStack::new(&mut store, &mut rng, d_in, &cfg.ae_hidden, cfg.embed_dim);
        let fusion = FusionCoeff::new(&mut store, cfg.epsilon_init);
        store.set_trainable(fusion.epsilon, cfg.epsilon_trainable);
        let token = MaskToken::new(&mut store, cfg.embed_dim);
        let heads = ProjectionHeads::new(&mut store, &mut rng, cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim, cfg.embed_dim);
        Self { store, gat, ae, fusion, token, heads, mu: None }
    }

    fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store.ids().filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p))).collect()
    }

    /// Parameters of the autoencoder.
    pub fn ae_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["ae."])
    }

    /// Parameters of the masked branch, its decoder and the fusion weight.
    pub fn mask_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["gat.", "decoder.", "head.", "fusion."])
    }

    pub fn epsilon(&self) -> f64 {
        self.fusion.value(&self.store)
    }

    /// Encodes and fuses with parameters from `store`; returns `(Z, Z_ae)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, attn: &Rc<SparseMatrix>, x_masked: &FeatureInput, x: &FeatureInput) -> Result<(Var, Var)> {
        let z_m = self.gat.encode_masked(tape, store, attn, x_masked)?;
        let z_ae = self.ae.encode(tape, store, LayerInput::Features(x))?;
        let eps = tape.param(store, self.fusion.epsilon);
        Ok((fuse(tape, z_m, z_ae, eps)?, z_ae))
    }

    /// Fused embedding of the unmasked graph.
    pub fn embedding(&self, graph: &Graph, x: &FeatureInput) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let attn = attention_graph(graph.adj());
        let (z, _) = self.encode(&mut tape, &self.store, &attn, x, x)?;
        Ok(tape.value(z).clone())
    }

    /// Autoencoder embedding of the raw features.
    pub fn ae_embedding(&self, x: &FeatureInput) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let z = self.ae.encode(&mut tape, &self.store, LayerInput::Features(x))?;
        Ok(tape.value(z).clone())
    }

    fn set_centers(&mut self, z: &Tensor2, centers: &[usize]) {
        self.mu = Some(self.store.insert("cluster.mu", z.select_rows(centers)));
    }
}

/// Independent seed for a named stream.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

const TAG_INIT: u64 = 1;
const TAG_GAE: u64 = 2;
const TAG_MASK: u64 = 3;

/// Everything a masked step needs, derived from one mask draw.
pub struct StepInputs {
    attn: Rc<SparseMatrix>,
    prop: Rc<SparseMatrix>,
    x_masked: FeatureInput,
    remask_nodes: Rc<Vec<usize>>,
    loss_nodes: Rc<Vec<usize>>,
}

impl StepInputs {
    /// Nodes scored by `L_p`.
    pub fn loss_nodes(&self) -> &[usize] {
        &self.loss_nodes
    }
}

fn step_inputs(graph: &Graph, x: &FeatureInput, masks: &MaskPair) -> Result<StepInputs> {
    let m = apply_mask(graph, masks)?;
    Ok(StepInputs {
        attn: attention_graph(&m.adj_masked),
        prop: Rc::new(normalize_adjacency(&m.adj_masked)),
        x_masked: x.mask_rows(&masks.feature_mask),
        remask_nodes: Rc::new(m.feature_masked_nodes),
        loss_nodes: Rc::new(m.masked_nodes),
    })
}

/// `L_p` for a fused embedding: remask, one step of propagation over the
/// masked graph, projection and contrastive scoring over the masked nodes.
fn masked_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    z: Var,
    inp: &StepInputs,
    targets: &TargetEmbeddings,
    w: &LossWeights,
) -> Result<Option<Var>> {
    if inp.loss_nodes.is_empty() {
        return Ok(None);
    }
    let token = tape.param(store, model.token.id);
    let v = remask(tape, z, inp.remask_nodes.clone(), token)?;
    let v = tape.spmm(inp.prop.clone(), v)?;
    Ok(Some(info_loss(tape, store, v, targets, &model.heads, w, &inp.loss_nodes)?.total))
}

/// Terms of the joint objective recorded on one tape.
pub struct JointTerms {
    /// `None` when no node is masked.
    pub l_p: Option<Var>,
    pub l_a: Var,
    pub l_c: Var,
    pub l_s: Var,
    /// Weighted sum of the terms with nonzero weight; `None` when all are
    /// absent or weighted zero.
    pub total: Option<Var>,
}

impl JointTerms {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            l_p: self.l_p.map_or(0.0, |v| tape.scalar(v)),
            l_a: tape.scalar(self.l_a),
            l_c: tape.scalar(self.l_c),
            l_s: tape.scalar(self.l_s),
        }
    }
}

fn check_finite(phase: Phase, epoch: usize, step: usize, c: &LossComponents) -> Result<()> {
    for (name, v) in [("L_p", c.l_p), ("L_a", c.l_a), ("L_c", c.l_c), ("L_s", c.l_s)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!(
                "{name} = {v} in {} epoch {epoch} step {step} (L_p={}, L_a={}, L_c={}, L_s={})",
                phase.as_str(),
                c.l_p,
                c.l_a,
                c.l_c,
                c.l_s
            )));
        }
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    sum: LossComponents,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, c: &LossComponents) {
        self.sum.l_p += c.l_p;
        self.sum.l_a += c.l_a;
        self.sum.l_c += c.l_c;
        self.sum.l_s += c.l_s;
        self.steps += 1;
    }

    fn finish(&self, phase: Phase, epoch: usize, cfg: &TrainConfig, epsilon: f64, k: Option<usize>) -> EpochLog {
        let s = self.steps.max(1) as f64;
        let c = LossComponents { l_p: self.sum.l_p / s, l_a: self.sum.l_a / s, l_c: self.sum.l_c / s, l_s: self.sum.l_s / s };
        EpochLog { phase, epoch, l_p: c.l_p, l_a: c.l_a, l_c: c.l_c, l_s: c.l_s, total: total_loss(&c, cfg), epsilon, k }
    }
}

/// Trained pieces handed from pretraining to joint training.
pub struct Pretrained {
    pub model: Model,
    pub targets: TargetEmbeddings,
    pub gae_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    mask_rng: ChaCha8Rng,
}

pub struct Trainer<'g> {
    graph: &'g Graph,
    cfg: TrainConfig,
    x: FeatureInput,
    x_dense: Rc<Tensor2>,
    interrupt: Option<Arc<AtomicBool>>,
}

impl<'g> Trainer<'g> {
    pub fn new(graph: &'g Graph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if graph.n() < 2 {
            return Err(Error::Parameter("training needs at least two nodes".into()));
        }
        Ok(Self {
            graph,
            x: FeatureInput::new(graph.features()),
            x_dense: Rc::new(graph.features().clone()),
            cfg,
            interrupt: None,
        })
    }

    /// Flag checked before every step; when set, training stops with
    /// [`Error::Interrupted`].
    pub fn with_interrupt(mut self, flag: Arc<AtomicBool>) -> Self {
        self.interrupt = Some(flag);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn check_interrupt(&self) -> Result<()> {
        match &self.interrupt {
            Some(flag) if flag.load(Ordering::Relaxed) => Err(Error::Interrupted),
            _ => Ok(()),
        }
    }

    fn next_masks(&self, rng: &mut ChaCha8Rng) -> Result<StepInputs> {
        self.sample_inputs(rng.random())
    }

    /// Masks drawn from `seed` and the inputs derived from them.
    pub fn sample_inputs(&self, seed: u64) -> Result<StepInputs> {
        let masks = sample_masks(self.graph, self.cfg.p_edge, self.cfg.p_feat, seed)?;
        step_inputs(self.graph, &self.x, &masks)
    }

    /// Records `L = L_p + α L_a + β L_c + γ L_s` for one mask draw. Cluster
    /// labels and the target distribution `p` are constants; the cluster means
    /// are recomputed from this step's embedding and also held constant.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        model: &Model,
        inp: &StepInputs,
        targets: &TargetEmbeddings,
        state: &ClusterState,
        p: &Rc<Tensor2>,
    ) -> Result<JointTerms> {
        let cfg = &self.cfg;
        let mu = model.mu.ok_or_else(|| Error::Usage("cluster centers are not initialized".into()))?;
        let (z, z_ae) = model.encode(tape, store, &inp.attn, &inp.x_masked, &self.x)?;
        let l_p = masked_loss(tape, store, model, z, inp, targets, &cfg.loss_weights())?;
        let r = model.ae.decode(tape, store, z_ae)?;
        let l_a = ae_recon_loss(tape, r, self.x_dense.clone())?;
        let step_state = ClusterState::from_labels(tape.value(z), state.centers.clone(), state.labels.clone())?;
        let l_c = dpeaks::cluster_loss(tape, z, &step_state)?;
        let mu = tape.param(store, mu);
        let q = selfopt::soft_assign(tape, z, mu, cfg.dof)?;
        let l_s = selfopt::kl_loss(tape, p.clone(), q)?;

        let mut total: Option<Var> = None;
        for (term, weight) in [(l_p, 1.0), (Some(l_a), cfg.alpha), (Some(l_c), cfg.beta), (Some(l_s), cfg.gamma)] {
            let Some(term) = term else { continue };
            if weight == 0.0 {
                continue;
            }
            let t = if weight == 1.0 { term } else { tape.scale(term, weight) };
            total = Some(match total {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
        Ok(JointTerms { l_p, l_a, l_c, l_s, total })
    }

    /// Structural target, autoencoder and masked branch, each for
    /// `pretrain_epochs` epochs at `lr_pretrain`.
    pub fn pretrain(&self) -> Result<Pretrained> {
        let cfg = &self.cfg;
        let steps = cfg.pretrain_epochs * cfg.steps_per_epoch;
        let mut model = Model::new(self.graph.d_in(), cfg, derive_seed(cfg.seed, TAG_INIT));
        let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_MASK));
        let gae_cfg = GaeConfig {
            hidden: cfg.gae_hidden,
            embed_dim: cfg.embed_dim,
            steps,
            lr: cfg.lr_pretrain,
            seed: derive_seed(cfg.seed, TAG_GAE),
        };
        let s1 = structural_target(self.graph, &self.x, &gae_cfg)?;
        log::info!("structural target: {} steps, final loss {:?}", steps, s1.losses.last());
        let gae_losses = s1
            .losses
            .chunks(cfg.steps_per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();

        let mut epochs = Vec::new();
        let ae_ids = model.ae_params();
        for epoch in 0..cfg.pretrain_epochs {
            let mut acc = EpochAccumulator::default();
            for step in 0..cfg.steps_per_epoch {
                self.check_interrupt()?;
                let mut tape = Tape::new();
                let z = model.ae.encode(&mut tape, &model.store, LayerInput::Features(&self.x))?;
                let r = model.ae.decode(&mut tape, &model.store, z)?;
                let l_a = ae_recon_loss(&mut tape, r, self.x_dense.clone())?;
                let c = LossComponents { l_a: tape.scalar(l_a), ..Default::default() };
                check_finite(Phase::Ae, epoch, step, &c)?;
                acc.add(&c);
                tape.backward(l_a, &mut model.store)?;
                model.store.adam_step(cfg.lr_pretrain, Adam::default(), Some(&ae_ids))?;
            }
            let log = acc.finish(Phase::Ae, epoch, cfg, model.epsilon(), None);
            log::info!("ae epoch {epoch}: L_a={:.6}", log.l_a);
            epochs.push(log);
        }

        let targets = TargetEmbeddings::new(s1.embedding, model.ae_embedding(&self.x)?)?;
        let weights = cfg.loss_weights();
        let mask_ids = model.mask_params();
        for epoch in 0..cfg.pretrain_epochs {
            let mut acc = EpochAccumulator::default();
            for step in 0..cfg.steps_per_epoch {
                self.check_interrupt()?;
                let inp = self.next_masks(&mut mask_rng)?;
                let mut tape = Tape::new();
                let (z, _) = model.encode(&mut tape, &model.store, &inp.attn, &inp.x_masked, &self.x)?;
                let Some(l_p) = masked_loss(&mut tape, &model.store, &model, z, &inp, &targets, &weights)? else {
                    acc.add(&LossComponents::default());
                    continue;
                };
                let c = LossComponents { l_p: tape.scalar(l_p), ..Default::default() };
                check_finite(Phase::Mask, epoch, step, &c)?;
                acc.add(&c);
                tape.backward(l_p, &mut model.store)?;
                model.store.adam_step(cfg.lr_pretrain, Adam::default(), Some(&mask_ids))?;
            }
            let log = acc.finish(Phase::Mask, epoch, cfg, model.epsilon(), None);
            log::info!("mask epoch {epoch}: L_p={:.6} eps={:.4}", log.l_p, log.epsilon);
            epochs.push(log);
        }
        Ok(Pretrained { model, targets, gae_losses, epochs, mask_rng })
    }

    fn cluster(&self, z: &Tensor2) -> Result<dpeaks::Estimate> {
        dpeaks::estimate_k(z, &self.cfg.percentiles)
    }

    fn target_p(&self, model: &Model, z: &Tensor2) -> Result<Rc<Tensor2>> {
        let mu = model.store.value(model.mu.expect("centers initialized"));
        let q = selfopt::soft_assign_value(z, mu, self.cfg.dof)?;
        Ok(Rc::new(selfopt::target_distribution(&q)?))
    }

    /// Density peaks on the current embedding; the centers become the
    /// trainable cluster means and `P` is computed from them.
    pub fn init_clusters(&self, model: &mut Model) -> Result<(ClusterState, Rc<Tensor2>)> {
        let z = model.embedding(self.graph, &self.x)?;
        let est = self.cluster(&z)?;
        model.set_centers(&z, &est.state.centers);
        let p = self.target_p(model, &z)?;
        Ok((est.state, p))
    }

    /// Joint optimization of the full objective.
    pub fn train_joint(&self, pre: Pretrained) -> Result<TrainOutcome> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let Pretrained { mut model, targets, gae_losses, mut epochs, mut mask_rng } = pre;

        let (mut state, mut p) = self.init_clusters(&mut model)?;
        let mut k_trajectory = vec![KChange { epoch: 0, k: state.k }];

        let mut steps = 0usize;
        let mut converged = false;
        let mut calm = 0usize;
        let mut last_total: Option<f64> = None;
        'epochs: for epoch in 0..cfg.joint_epochs {
            if steps >= cfg.max_iters {
                break;
            }
            let refresh_k = epoch > 0 && cfg.dpeaks_refresh > 0 && epoch % cfg.dpeaks_refresh == 0;
            let refresh_p = epoch > 0 && epoch % cfg.p_refresh == 0;
            if refresh_k || refresh_p {
                let z = model.embedding(self.graph, &self.x)?;
                if refresh_k {
                    let est = self.cluster(&z)?;
                    if est.state.k != state.k {
                        log::info!("epoch {epoch}: estimated k changed {} -> {}; centers rebuilt", state.k, est.state.k);
                        k_trajectory.push(KChange { epoch, k: est.state.k });
                        model.set_centers(&z, &est.state.centers);
                        state = est.state;
                        p = self.target_p(&model, &z)?;
                    } else {
                        state = est.state;
                    }
                }
                if refresh_p {
                    p = self.target_p(&model, &z)?;
                }
            }
            let mut acc = EpochAccumulator::default();
            for step in 0..cfg.steps_per_epoch {
                if steps >= cfg.max_iters {
                    epochs.push(acc.finish(Phase::Joint, epoch, cfg, model.epsilon(), Some(state.k)));
                    break 'epochs;
                }
                self.check_interrupt()?;
                let inp = self.next_masks(&mut mask_rng)?;
                let mut tape = Tape::new();
                let terms = self.joint_terms(&mut tape, &model.store, &model, &inp, &targets, &state, &p)?;
                let c = terms.components(&tape);
                check_finite(Phase::Joint, epoch, step, &c)?;
                acc.add(&c);
                if let Some(total) = terms.total {
                    tape.backward(total, &mut model.store)?;
                    model.store.adam_step(cfg.lr_finetune, Adam::default(), None)?;
                }
                steps += 1;
            }
            let log = acc.finish(Phase::Joint, epoch, cfg, model.epsilon(), Some(state.k));
            if let Some(prev) = last_total {
                let rel = (log.total - prev).abs() / prev.abs().max(1e-12);
                calm = if rel < cfg.convergence_tol { calm + 1 } else { 0 };
            }
            last_total = Some(log.total);
            log::info!(
                "joint epoch {epoch}: L={:.6} L_p={:.6} L_a={:.6} L_c={:.6} L_s={:.6} eps={:.4} k={}",
                log.total,
                log.l_p,
                log.l_a,
                log.l_c,
                log.l_s,
                log.epsilon,
                state.k
            );
            epochs.push(log);
            if calm >= cfg.convergence_patience {
                converged = true;
                break;
            }
        }

        let embedding = model.embedding(self.graph, &self.x)?;
        let est = self.cluster(&embedding)?;
        if est.state.k == 1 && self.graph.true_k().is_some_and(|k| k > 1) {
            log::warn!("estimated a single cluster on a dataset with {:?} classes", self.graph.true_k());
        }
        let q_predictions = match model.mu {
            Some(mu) => {
                let q = selfopt::soft_assign_value(&embedding, model.store.value(mu), cfg.dof)?;
                Some((0..q.rows()).map(|i| argmax(q.row(i))).collect::<Vec<_>>())
            }
            None => None,
        };
        let (eval, q_eval) = match self.graph.labels() {
            Some(truth) => (
                Some(metrics::evaluate(&est.state.labels, truth)?),
                q_predictions.as_deref().map(|q| metrics::evaluate(q, truth)).transpose()?,
            ),
            None => (None, None),
        };
        let report = TrainReport {
            dataset: self.graph.name.clone(),
            n: self.graph.n(),
            config: cfg.clone(),
            gae_losses,
            epochs,
            k_trajectory,
            joint_steps: steps,
            converged,
            k: est.state.k,
            centers: est.state.centers.clone(),
            sizes: est.state.sizes.clone(),
            d_c: est.profile.d_c,
            percentile: est.percentile,
            votes: est.votes.clone(),
            predictions: est.state.labels.clone(),
            q_predictions,
            eval,
            q_eval,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        Ok(TrainOutcome { report, model, embedding, state: est.state, profile: est.profile })
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        let start = Instant::now();
        let pre = self.pretrain()?;
        let mut out = self.train_joint(pre)?;
        out.report.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}

/// Pretrains and jointly trains with `cfg`.
pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(graph, cfg.clone())?.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
    Xi,
    PEdge,
    PFeat,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepParam::Alpha,
            "beta" => SweepParam::Beta,
            "gamma" => SweepParam::Gamma,
            "xi" => SweepParam::Xi,
            "p_edge" => SweepParam::PEdge,
            "p_feat" => SweepParam::PFeat,
            other => {
                return Err(Error::Parameter(format!(
                    "cannot sweep `{other}`; expected alpha, beta, gamma, xi, p_edge or p_feat"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
            SweepParam::Xi => "xi",
            SweepParam::PEdge => "p_edge",
            SweepParam::PFeat => "p_feat",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::Xi => cfg.xi = value,
            SweepParam::PEdge => cfg.p_edge = value,
            SweepParam::PFeat => cfg.p_feat = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub k: Option<usize>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub error: Option<String>,
}

/// One full run per grid value with everything else fixed. A failing run
/// is recorded in its row and the sweep moves on.
pub fn sweep(graph: &Graph, base: &TrainConfig, param: SweepParam, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        let row = match train(graph, &cfg) {
            Ok(out) => SweepRow {
                value,
                k: Some(out.report.k),
                acc: out.report.eval.as_ref().map(|e| e.acc),
                nmi: out.report.eval.as_ref().map(|e| e.nmi),
                ari: out.report.eval.as_ref().map(|e| e.ari),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {}={value} failed: {e}", param.name());
                SweepRow { value, k: None, acc: None, nmi: None, ari: None, error: Some(e.to_string()) }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &std::path::Path, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([param.name(), "k", "acc", "nmi", "ari", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            opt(r.acc),
            opt(r.nmi),
            opt(r.ari),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_epochs_csv(path: &std::path::Path, epochs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["phase", "epoch", "l_p", "l_a", "l_c", "l_s", "total", "epsilon", "k"])?;
    for e in epochs {
        w.write_record([
            e.phase.as_str().to_string(),
            e.epoch.to_string(),
            e.l_p.to_string(),
            e.l_a.to_string(),
            e.l_c.to_string(),
            e.l_s.to_string(),
            e.total.to_string(),
            e.epsilon.to_string(),
            e.k.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_io::synthetic::{attributed_sbm, SbmSpec};

    pub(crate) fn small_config() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 3,
            joint_epochs: 4,
            steps_per_epoch: 2,
            embed_dim: 8,
            gat_hidden: 8,
            gat_heads: 2,
            ae_hidden: vec![16],
            proj_hidden: 16,
            gae_hidden: 16,
            dpeaks_refresh: 2,
            p_refresh: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_graph() -> Graph {
        attributed_sbm(&SbmSpec { communities: 2, size: 12, d_in: 20, ..SbmSpec::default() }, 3).unwrap()
    }

    #[test]
    fn total_loss_arithmetic() {
        let c = LossComponents { l_p: 1.0, l_a: 2.0, l_c: 3.0, l_s: 4.0 };
        let unit = TrainConfig { alpha: 1.0, beta: 1.0, gamma: 1.0, ..TrainConfig::default() };
        assert_eq!(total_loss(&c, &unit), 10.0);
        let zero = TrainConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..TrainConfig::default() };
        assert_eq!(total_loss(&c, &zero), 1.0);
        let a = TrainConfig { alpha: 10.0, beta: 0.0, gamma: 0.0, ..TrainConfig::default() };
        assert_eq!(total_loss(&LossComponents { l_p: 0.7, l_a: 0.5, ..Default::default() }, &a), 0.7 + 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { p_edge: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { xi: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda_2: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps_per_epoch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_pretrain_keeps_initialization() {
        let g = tiny_graph();
        let cfg = TrainConfig { pretrain_epochs: 0, ..small_config() };
        let pre = Trainer::new(&g, cfg.clone()).unwrap().pretrain().unwrap();
        let init = Model::new(g.d_in(), &cfg, derive_seed(cfg.seed, TAG_INIT));
        let a: Vec<_> = pre.model.store.named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let b: Vec<_> = init.store.named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(a, b);
        assert!(pre.epochs.is_empty());
    }

    #[test]
    fn logged_total_matches_components() {
        let g = tiny_graph();
        let cfg = TrainConfig { alpha: 0.5, beta: 0.01, gamma: 2.0, ..small_config() };
        let out = train(&g, &cfg).unwrap();
        for e in &out.report.epochs {
            let expect = e.l_p + cfg.alpha * e.l_a + cfg.beta * e.l_c + cfg.gamma * e.l_s;
            assert!((e.total - expect).abs() <= 1e-9, "{e:?}");
        }
        assert_eq!(out.report.predictions.len(), g.n());
        assert_eq!(out.report.epochs.iter().filter(|e| e.phase == Phase::Joint).count(), 4);
    }

    #[test]
    fn max_iters_caps_joint_steps() {
        let g = tiny_graph();
        let out = train(&g, &TrainConfig { max_iters: 3, ..small_config() }).unwrap();
        assert_eq!(out.report.joint_steps, 3);
    }

    #[test]
    fn interrupt_flag_stops_training() {
        let g = tiny_graph();
        let flag = Arc::new(AtomicBool::new(true));
        let t = Trainer::new(&g, small_config()).unwrap().with_interrupt(flag);
        assert!(matches!(t.run(), Err(Error::Interrupted)));
    }

    #[test]
    fn sweep_rows() {
        let g = tiny_graph();
        let cfg = TrainConfig { pretrain_epochs: 1, joint_epochs: 1, ..small_config() };
        assert!(sweep(&g, &cfg, SweepParam::Alpha, &[]).is_err());
        let rows = sweep(&g, &cfg, SweepParam::Alpha, &[1.0]).unwrap();
        let direct = train(&g, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].acc, direct.report.eval.as_ref().map(|e| e.acc));
        let bad = sweep(&g, &cfg, SweepParam::Xi, &[-1.0, 0.5]).unwrap();
        assert!(bad[0].error.is_some() && bad[1].error.is_none());
        assert!("lambda".parse::<SweepParam>().is_err());
    }
}

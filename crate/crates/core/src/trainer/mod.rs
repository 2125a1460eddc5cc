//! Two-branch training: base-module pretraining, classifier initialisation
//! from spherical k-means, and finetuning with online clustering and
//! cross-branch pairwise co-training.

mod branch;
mod history;
mod optim;

pub use branch::{BranchId, BranchState, StudentParams, TeacherParams};
pub use history::{write_history_csv, EpochRecord, LossTerms, Stage, CSV_HEADER};
pub use optim::Sgd;

use serde::{Deserialize, Serialize};

use crate::data::{augment_rows, AugmentConfig, AugmentKind, DatasetBundle};
use crate::error::{Error, Result};
use crate::losses::{
    ccm_loss, contrastive, ocm_ce, pairwise_labels, reconstruction_mse, softmax_columns_backward, supervised_ce,
};
use crate::metrics::{evaluate_labels, MetricsRecord};
use crate::model::{classify, init_classifier_from_centroids, spherical_kmeans, Checkpoint, KMeansConfig, ParamSet};
use crate::numerics::{argmax, softmax_columns, Matrix, SeededRng};
use crate::pseudo_label::{LabelMode, PseudoLabelConfig};
use crate::scalar::Scalar;
use crate::sinkhorn::TransportConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub lambda_sup: f64,
    pub lambda_dec: f64,
    pub lambda_cont: f64,
    pub lambda_ocm: f64,
    pub lambda_ccm: f64,
    /// Target batch size; source batches have the same size.
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Rescale each step's gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    /// EMA decay of the teachers.
    pub alpha: f64,
    /// Inverse temperature of the contrastive loss.
    pub rho: f64,
    /// Sharpening exponent of the transport problem.
    pub xi: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Iterations between pseudo-label refreshes; 0 refreshes once per epoch.
    pub refresh_every: usize,
    pub respect_capacity: bool,
    /// Keep each branch's pretraining losses during finetuning.
    pub base_losses_in_finetune: bool,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    /// Evaluate every this many epochs (the last epoch of a stage is always
    /// evaluated); 0 evaluates only the last epoch.
    pub eval_every: usize,
    /// Evaluate teachers instead of students.
    pub eval_teacher: bool,
    pub weak_affine: f64,
    pub weak_jitter: f64,
    pub strong_affine: f64,
    pub strong_jitter: f64,
    pub strong_mask_prob: f64,
    pub mask_block: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let weak = AugmentConfig::weak();
        let strong = AugmentConfig::strong();
        Self {
            hidden_dim: 64,
            feature_dim: 32,
            lambda_sup: 1.0,
            lambda_dec: 20.0,
            lambda_cont: 1.0,
            lambda_ocm: 5.0,
            lambda_ccm: 10.0,
            batch_size: 128,
            momentum: 0.9,
            lr_pretrain: 0.1,
            lr_finetune: 0.01,
            grad_clip: 5.0,
            alpha: 0.999,
            rho: 7.0,
            xi: 10.0,
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iters: 1000,
            pretrain_epochs: 50,
            finetune_epochs: 50,
            refresh_every: 0,
            respect_capacity: true,
            base_losses_in_finetune: true,
            kmeans_restarts: 10,
            kmeans_max_iters: 100,
            eval_every: 1,
            eval_teacher: false,
            weak_affine: weak.affine_amplitude,
            weak_jitter: weak.jitter_scale,
            strong_affine: strong.affine_amplitude,
            strong_jitter: strong.jitter_scale,
            strong_mask_prob: strong.mask_prob,
            mask_block: strong.block_size,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_sup", self.lambda_sup),
            ("lambda_dec", self.lambda_dec),
            ("lambda_cont", self.lambda_cont),
            ("lambda_ocm", self.lambda_ocm),
            ("lambda_ccm", self.lambda_ccm),
            ("grad_clip", self.grad_clip),
            ("weak_affine", self.weak_affine),
            ("weak_jitter", self.weak_jitter),
            ("strong_affine", self.strong_affine),
            ("strong_jitter", self.strong_jitter),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.hidden_dim == 0 || self.feature_dim < 2 {
            return Err(Error::Config("hidden_dim must be positive and feature_dim at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("alpha must lie in [0, 1] and momentum in [0, 1)".into()));
        }
        if !(self.lr_pretrain > 0.0 && self.lr_finetune > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) || self.mask_block == 0 {
            return Err(Error::Config("strong_mask_prob must lie in [0, 1] and mask_block be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be positive".into()));
        }
        self.transport().validate()
    }

    pub fn transport(&self) -> TransportConfig {
        TransportConfig {
            xi: self.xi,
            max_iters: self.sinkhorn_max_iters,
            tol: self.sinkhorn_tol,
            log_domain: true,
        }
    }

    pub fn weak_augment(&self) -> AugmentConfig {
        AugmentConfig {
            kind: AugmentKind::Weak,
            affine_amplitude: self.weak_affine,
            jitter_scale: self.weak_jitter,
            mask_prob: 0.0,
            block_size: self.mask_block,
        }
    }

    pub fn strong_augment(&self) -> AugmentConfig {
        AugmentConfig {
            kind: AugmentKind::Strong,
            affine_amplitude: self.strong_affine,
            jitter_scale: self.strong_jitter,
            mask_prob: self.strong_mask_prob,
            block_size: self.mask_block,
        }
    }

    fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            restarts: self.kmeans_restarts,
            max_iters: self.kmeans_max_iters,
        }
    }
}

/// Which finetuning modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Base losses only; evaluation clusters features with spherical k-means.
    Bm,
    /// Base losses plus online clustering.
    Ocm,
    /// Base losses, online clustering and cross-branch co-training.
    Full,
}

impl Ablation {
    fn uses_ocm(self) -> bool {
        self != Ablation::Bm
    }

    fn uses_ccm(self) -> bool {
        self == Ablation::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub ablation: Ablation,
    /// Balanced transport pseudo labels; argmax labels when off.
    pub balance: bool,
}

/// How evaluation turns features into cluster labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMethod {
    Classifier,
    KMeans,
}

/// A dataset converted to the working scalar type.
#[derive(Clone, Debug)]
pub struct TrainData<S> {
    pub source_x: Matrix<S>,
    pub source_labels: Vec<usize>,
    pub target_x: Matrix<S>,
    pub truth: Option<Vec<usize>>,
    pub k_source: usize,
    pub k_target: usize,
    pub shared_dims: usize,
}

impl<S: Scalar> TrainData<S> {
    pub fn from_bundle(bundle: &DatasetBundle) -> Result<Self> {
        let c = &bundle.config;
        if let Some(&label) = bundle.source_labels.iter().find(|&&l| l >= c.k_source) {
            return Err(Error::LabelOutOfRange { label, classes: c.k_source });
        }
        if bundle.source_x.cols() != bundle.target_x.cols() {
            return Err(Error::Shape("source and target widths differ".into()));
        }
        if bundle.num_target() < c.k_target {
            return Err(Error::TooManyClusters { k: c.k_target, n: bundle.num_target() });
        }
        if bundle.num_source() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            source_x: bundle.source_x.cast(),
            source_labels: bundle.source_labels.clone(),
            target_x: bundle.target_x.cast(),
            truth: bundle.target_labels.clone(),
            k_source: c.k_source,
            k_target: c.k_target,
            shared_dims: c.shared_dims,
        })
    }

    pub fn num_target(&self) -> usize {
        self.target_x.rows()
    }

    fn view_dims(&self, id: BranchId) -> usize {
        match id {
            BranchId::B0 => self.shared_dims,
            BranchId::B1 => self.target_x.cols(),
        }
    }
}

pub type Branches<S> = [BranchState<S>; 2];

const TAG_INIT: u64 = 1;
const TAG_PRETRAIN: u64 = 1 << 20;
const TAG_KMEANS_INIT: u64 = 2 << 20;
const TAG_FINETUNE: u64 = 3 << 20;
const TAG_EVAL: u64 = 4 << 20;

/// Target indices split into batches whose sizes differ by at most one.
fn even_batches(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let count = n.div_ceil(batch_size).max(1);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut it = order.into_iter();
    for b in 0..count {
        let size = base + usize::from(b < extra);
        out.push(it.by_ref().take(size).collect());
    }
    out
}

struct Batch<S> {
    indices: Vec<usize>,
    target: Matrix<S>,
    source: Matrix<S>,
    source_labels: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    fn draw(data: &TrainData<S>, indices: Vec<usize>, rng: &mut SeededRng) -> Self {
        let ns = data.source_x.rows();
        let picks: Vec<usize> = (0..indices.len()).map(|_| rng.below(ns)).collect();
        Self {
            target: data.target_x.select_rows(&indices),
            source: data.source_x.select_rows(&picks),
            source_labels: picks.iter().map(|&i| data.source_labels[i]).collect(),
            indices,
        }
    }
}

/// Which loss terms a step includes, with the labels they need.
struct StepPlan<'a> {
    base: bool,
    ocm_labels: Option<&'a [usize]>,
    ccm_partner_labels: Option<&'a [usize]>,
}

fn zero_grads<S: Scalar>(state: &BranchState<S>) -> StudentParams<S> {
    state.student.zeros_like()
}

/// One optimisation step of one branch: refresh the bank with teacher
/// features of a weak view, accumulate the planned losses, update the student
/// and move the teacher.
fn branch_step<S: Scalar>(
    state: &mut BranchState<S>,
    opt: &mut Sgd<StudentParams<S>>,
    batch: &Batch<S>,
    plan: &StepPlan<'_>,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossTerms> {
    let weak = cfg.weak_augment();
    let target_view = state.view(&batch.target)?;
    let teacher_in = augment_rows(&target_view, &weak, rng);
    let teacher_feat = state.teacher_features(&teacher_in)?;
    state.bank.update(&batch.indices, &teacher_feat)?;

    let mut grads = zero_grads(state);
    let mut terms = LossTerms::default();
    let student = &state.student;

    if plan.base {
        match state.id {
            BranchId::B0 => {
                let (head, dec) = match (&student.source_head, &student.decoder) {
                    (Some(h), Some(d)) => (h, d),
                    _ => return Err(Error::Shape("domain-shared branch lacks its heads".into())),
                };
                let xs = augment_rows(&state.view(&batch.source)?, &weak, rng);
                let xt = augment_rows(&target_view, &weak, rng);
                let (fs, cache_s) = student.encoder.forward(&xs)?;
                let sup = supervised_ce(&classify(head, &fs)?, &batch.source_labels)?;
                let (g_head, mut d_fs) = head.backward(&fs, &sup.grad.scale(S::lit(cfg.lambda_sup)))?;

                let lam_dec = S::lit(cfg.lambda_dec);
                let (rs, dcache_s) = dec.forward(&fs)?;
                let rec_s = reconstruction_mse(&rs, &xs)?;
                let (g_dec_s, d_fs_dec) = dec.backward(&dcache_s, &rec_s.grad.scale(lam_dec))?;
                d_fs = d_fs.add(&d_fs_dec)?;

                let (ft, cache_t) = student.encoder.forward(&xt)?;
                let (rt, dcache_t) = dec.forward(&ft)?;
                let rec_t = reconstruction_mse(&rt, &xt)?;
                let (g_dec_t, d_ft) = dec.backward(&dcache_t, &rec_t.grad.scale(lam_dec))?;

                let (g_enc_s, _) = student.encoder.backward(&cache_s, &d_fs)?;
                let (g_enc_t, _) = student.encoder.backward(&cache_t, &d_ft)?;
                grads.encoder.axpy(S::one(), &g_enc_s)?;
                grads.encoder.axpy(S::one(), &g_enc_t)?;
                if let Some(g) = &mut grads.source_head {
                    g.axpy(S::one(), &g_head)?;
                }
                if let Some(g) = &mut grads.decoder {
                    g.axpy(S::one(), &g_dec_s)?;
                    g.axpy(S::one(), &g_dec_t)?;
                }
                terms.sup = sup.value.to_f64_lossy();
                terms.dec = (rec_s.value + rec_t.value).to_f64_lossy();
                terms.total += cfg.lambda_sup * terms.sup + cfg.lambda_dec * terms.dec;
            }
            BranchId::B1 => {
                let x = augment_rows(&target_view, &weak, rng);
                let (z, cache) = student.encoder.forward(&x)?;
                let cont = contrastive(&z, &batch.indices, &state.bank, S::lit(cfg.rho))?;
                let (g_enc, _) = student.encoder.backward(&cache, &cont.grad.scale(S::lit(cfg.lambda_cont)))?;
                grads.encoder.axpy(S::one(), &g_enc)?;
                terms.cont = cont.value.to_f64_lossy();
                terms.total += cfg.lambda_cont * terms.cont;
            }
        }
    }

    if plan.ocm_labels.is_some() || plan.ccm_partner_labels.is_some() {
        let head = student
            .target_head
            .as_ref()
            .ok_or_else(|| Error::Config("target classifier not initialised".into()))?;
        let x = augment_rows(&target_view, &cfg.strong_augment(), rng);
        let (f, cache) = student.encoder.forward(&x)?;
        let logits = classify(head, &f)?;
        let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
        if let Some(labels) = plan.ocm_labels {
            let l = ocm_ce(&logits, labels)?;
            d_logits.axpy(S::lit(cfg.lambda_ocm), &l.grad)?;
            terms.ocm = l.value.to_f64_lossy();
            terms.total += cfg.lambda_ocm * terms.ocm;
        }
        if let Some(partner) = plan.ccm_partner_labels {
            let p = softmax_columns(&logits);
            let l = ccm_loss(&p, &pairwise_labels(partner))?;
            let d = softmax_columns_backward(&p, &l.grad.scale(S::lit(cfg.lambda_ccm)))?;
            d_logits = d_logits.add(&d)?;
            terms.ccm = l.value.to_f64_lossy();
            terms.total += cfg.lambda_ccm * terms.ccm;
        }
        let (g_head, d_f) = head.backward(&f, &d_logits)?;
        let (g_enc, _) = student.encoder.backward(&cache, &d_f)?;
        grads.encoder.axpy(S::one(), &g_enc)?;
        if let Some(g) = &mut grads.target_head {
            g.axpy(S::one(), &g_head)?;
        }
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.step(&mut state.student, &grads)?;
    state.ema(S::lit(cfg.alpha))?;
    Ok(terms)
}

fn clip_global_norm<S: Scalar, P: ParamSet<S>>(grads: &mut P, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = S::lit(max_norm / norm);
        grads.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
    }
}

/// Fills every bank slot with teacher features of the un-augmented targets.
fn fill_bank<S: Scalar>(state: &mut BranchState<S>, data: &TrainData<S>) -> Result<()> {
    let feats = state.teacher_features(&state.view(&data.target_x)?)?;
    let all: Vec<usize> = (0..data.num_target()).collect();
    state.bank.update(&all, &feats)
}

fn should_eval(cfg: &TrainConfig, epoch: usize, last: usize) -> bool {
    epoch == last || (cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every))
}

fn eval_tag(stage: Stage, epoch: usize, branch: usize) -> u64 {
    let s = match stage {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
    };
    TAG_EVAL + ((s * 100_000 + epoch as u64) << 1) + branch as u64
}

#[allow(clippy::too_many_arguments)]
fn record_epoch<S: Scalar>(
    states: &Branches<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
    last: usize,
    method: EvalMethod,
    sums: &[LossTerms; 2],
    iters: usize,
    history: &mut Vec<EpochRecord>,
) -> Result<()> {
    for (b, state) in states.iter().enumerate() {
        let metrics = if data.truth.is_some() && should_eval(cfg, epoch, last) {
            let mut rng = SeededRng::new(cfg.seed).derive(eval_tag(stage, epoch, b));
            Some(evaluate_with(state, data, cfg, method, &mut rng)?)
        } else {
            None
        };
        history.push(EpochRecord {
            stage,
            epoch,
            branch: b,
            metrics,
            losses: sums[b].scaled(1.0 / iters.max(1) as f64),
        });
    }
    Ok(())
}

/// Trains both base modules from scratch: the domain-shared branch on source
/// classification plus reconstruction of both domains, the target-specific
/// branch on instance discrimination against its memory bank.
pub fn pretrain<S: Scalar>(data: &TrainData<S>, cfg: &TrainConfig) -> Result<(Branches<S>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut states = [BranchId::B0, BranchId::B1].map(|id| {
        BranchState::new(
            id,
            data.view_dims(id),
            cfg.hidden_dim,
            cfg.feature_dim,
            data.k_source,
            data.num_target(),
            &mut root.derive(TAG_INIT + id.index() as u64),
        )
    });
    for s in &mut states {
        fill_bank(s, data)?;
    }
    let mut opts = [(); 2].map(|_| Sgd::new(cfg.lr_pretrain, cfg.momentum));
    let mut history = Vec::new();
    let plan = StepPlan {
        base: true,
        ocm_labels: None,
        ccm_partner_labels: None,
    };
    for epoch in 1..=cfg.pretrain_epochs {
        let mut rng = root.derive(TAG_PRETRAIN + epoch as u64);
        let batches = even_batches(rng.permutation(data.num_target()), cfg.batch_size);
        let mut sums = [LossTerms::default(); 2];
        for indices in &batches {
            let batch = Batch::draw(data, indices.clone(), &mut rng);
            for (b, state) in states.iter_mut().enumerate() {
                let t = branch_step(state, &mut opts[b], &batch, &plan, cfg, &mut rng)?;
                sums[b].accumulate(&t);
            }
        }
        record_epoch(
            &states,
            data,
            cfg,
            Stage::Pretrain,
            epoch,
            cfg.pretrain_epochs,
            EvalMethod::KMeans,
            &sums,
            batches.len(),
            &mut history,
        )?;
    }
    Ok((states, history))
}

/// Per branch: spherical k-means (K = number of target classes) on teacher
/// features of every target sample, centroids copied into student and
/// teacher target classifiers. The bank is refilled with the same features.
pub fn init_target_classifiers<S: Scalar>(
    states: &mut Branches<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    let root = SeededRng::new(cfg.seed);
    for state in states.iter_mut() {
        fill_bank(state, data)?;
        let feats = state.bank.features()?.clone();
        let mut rng = root.derive(TAG_KMEANS_INIT + state.id.index() as u64);
        let km = spherical_kmeans(&feats, data.k_target, &mut rng, &cfg.kmeans())?;
        state.set_target_head(init_classifier_from_centroids(&km.centroids));
    }
    Ok(())
}

/// Finetunes both branches. Pseudo labels are refreshed from one bank
/// snapshot per epoch (or every `refresh_every` iterations); `on_refresh`
/// receives the epoch and both label vectors after each refresh.
pub fn finetune<S: Scalar>(
    states: &mut Branches<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    opts: FinetuneOptions,
    mut on_refresh: impl FnMut(usize, &[usize], &[usize]) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if opts.ablation.uses_ocm() && states.iter().any(|s| s.student.target_head.is_none()) {
        return Err(Error::Config("target classifiers must be initialised before finetuning".into()));
    }
    let label_cfg = PseudoLabelConfig {
        mode: if opts.balance { LabelMode::Balanced } else { LabelMode::Argmax },
        transport: cfg.transport(),
        respect_capacity: cfg.respect_capacity,
    };
    let root = SeededRng::new(cfg.seed);
    let mut optims = [(); 2].map(|_| Sgd::new(cfg.lr_finetune, cfg.momentum));
    let method = if opts.ablation.uses_ocm() {
        EvalMethod::Classifier
    } else {
        EvalMethod::KMeans
    };
    let mut history = Vec::new();
    let mut iteration = 0usize;
    for epoch in 1..=cfg.finetune_epochs {
        let mut rng = root.derive(TAG_FINETUNE + epoch as u64);
        let batches = even_batches(rng.permutation(data.num_target()), cfg.batch_size);
        let mut sums = [LossTerms::default(); 2];
        for (it, indices) in batches.iter().enumerate() {
            let due = if cfg.refresh_every == 0 {
                it == 0
            } else {
                iteration.is_multiple_of(cfg.refresh_every)
            };
            if opts.ablation.uses_ocm() && due {
                for state in states.iter_mut() {
                    let head = state.teacher.target_head.clone().ok_or(Error::BankCold)?;
                    state.ocm.refresh(&state.bank, &head, &label_cfg)?;
                }
                on_refresh(epoch, &states[0].ocm.labels, &states[1].ocm.labels)?;
            }
            let batch = Batch::draw(data, indices.clone(), &mut rng);
            let own: Vec<Vec<usize>> = if opts.ablation.uses_ocm() {
                states
                    .iter()
                    .map(|s| s.ocm.labels_for(indices))
                    .collect::<Result<_>>()?
            } else {
                vec![Vec::new(), Vec::new()]
            };
            for (b, state) in states.iter_mut().enumerate() {
                let plan = StepPlan {
                    base: cfg.base_losses_in_finetune,
                    ocm_labels: opts.ablation.uses_ocm().then_some(own[b].as_slice()),
                    ccm_partner_labels: opts.ablation.uses_ccm().then_some(own[1 - b].as_slice()),
                };
                let t = branch_step(state, &mut optims[b], &batch, &plan, cfg, &mut rng)?;
                sums[b].accumulate(&t);
            }
            iteration += 1;
        }
        record_epoch(
            states,
            data,
            cfg,
            Stage::Finetune,
            epoch,
            cfg.finetune_epochs,
            method,
            &sums,
            batches.len(),
            &mut history,
        )?;
    }
    Ok(history)
}

/// Cluster labels for every un-augmented target sample.
pub fn predict_labels<S: Scalar>(
    state: &BranchState<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    method: EvalMethod,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let (encoder, head) = if cfg.eval_teacher {
        (&state.teacher.encoder, state.teacher.target_head.as_ref())
    } else {
        (&state.student.encoder, state.student.target_head.as_ref())
    };
    let feats = crate::model::encode(encoder, &state.view(&data.target_x)?)?;
    match method {
        EvalMethod::Classifier => {
            let head = head.ok_or_else(|| Error::Config("no target classifier to evaluate".into()))?;
            let logits = classify(head, &feats)?.transpose();
            Ok(logits.row_iter().map(argmax).collect())
        }
        EvalMethod::KMeans => Ok(spherical_kmeans(&feats, data.k_target, rng, &cfg.kmeans())?.labels),
    }
}

fn evaluate_with<S: Scalar>(
    state: &BranchState<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    method: EvalMethod,
    rng: &mut SeededRng,
) -> Result<MetricsRecord> {
    let truth = data
        .truth
        .as_deref()
        .ok_or_else(|| Error::Config("evaluation needs target ground truth".into()))?;
    let pred = predict_labels(state, data, cfg, method, rng)?;
    evaluate_labels(&pred, truth, data.k_target)
}

/// Metrics of one branch on the un-augmented target set. The k-means path
/// is seeded from `cfg.seed`.
pub fn evaluate<S: Scalar>(
    state: &BranchState<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    method: EvalMethod,
) -> Result<MetricsRecord> {
    let mut rng = SeededRng::new(cfg.seed).derive(TAG_EVAL - 1 - state.id.index() as u64);
    evaluate_with(state, data, cfg, method, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub balance: bool,
    pub seed: u64,
    /// Indexed by branch.
    pub final_metrics: Vec<MetricsRecord>,
    pub history: Vec<EpochRecord>,
}

impl RunReport {
    pub fn mean_acc(&self) -> f64 {
        self.final_metrics.iter().map(|m| m.acc).sum::<f64>() / self.final_metrics.len().max(1) as f64
    }

    pub fn branch_gap(&self) -> f64 {
        (self.final_metrics[0].acc - self.final_metrics[1].acc).abs()
    }
}

/// Classifier initialisation (unless `Bm`), finetuning and final evaluation,
/// starting from a copy of `pretrained`.
pub fn finetune_from<S: Scalar>(
    pretrained: &Branches<S>,
    data: &TrainData<S>,
    cfg: &TrainConfig,
    opts: FinetuneOptions,
    on_refresh: impl FnMut(usize, &[usize], &[usize]) -> Result<()>,
) -> Result<(Branches<S>, RunReport)> {
    let mut states = pretrained.clone();
    if opts.ablation.uses_ocm() {
        init_target_classifiers(&mut states, data, cfg)?;
    }
    let history = finetune(&mut states, data, cfg, opts, on_refresh)?;
    let final_metrics = if data.truth.is_some() {
        let last: Vec<&EpochRecord> = history.iter().rev().take(2).collect();
        match last.as_slice() {
            [b1, b0] if b0.metrics.is_some() && b1.metrics.is_some() => {
                vec![b0.metrics.unwrap_or_default(), b1.metrics.unwrap_or_default()]
            }
            _ => {
                let method = if opts.ablation.uses_ocm() {
                    EvalMethod::Classifier
                } else {
                    EvalMethod::KMeans
                };
                states
                    .iter()
                    .map(|s| evaluate(s, data, cfg, method))
                    .collect::<Result<_>>()?
            }
        }
    } else {
        Vec::new()
    };
    Ok((
        states,
        RunReport {
            ablation: opts.ablation,
            balance: opts.balance,
            seed: cfg.seed,
            final_metrics,
            history,
        },
    ))
}

/// Writes both branches into one checkpoint stream.
pub fn save_branches<S: Scalar>(states: &Branches<S>, w: &mut impl std::io::Write) -> Result<()> {
    let mut ck = Checkpoint::new();
    for s in states {
        s.save_into(&mut ck)?;
    }
    ck.write_to(w)
}

pub fn load_branches<S: Scalar>(r: &mut impl std::io::Read, num_target: usize) -> Result<Branches<S>> {
    let ck = Checkpoint::read_from(r)?;
    Ok([
        BranchState::load_from(&ck, BranchId::B0, num_target)?,
        BranchState::load_from(&ck, BranchId::B1, num_target)?,
    ])
}

/// Pretraining followed by [`finetune_from`].
pub fn run_experiment<S: Scalar>(data: &TrainData<S>, cfg: &TrainConfig, opts: FinetuneOptions) -> Result<RunReport> {
    let (pretrained, mut pre_history) = pretrain(data, cfg)?;
    let (_, mut report) = finetune_from(&pretrained, data, cfg, opts, |_, _, _| Ok(()))?;
    pre_history.append(&mut report.history);
    report.history = pre_history;
    Ok(report)
}

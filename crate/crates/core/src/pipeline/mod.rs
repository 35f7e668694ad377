//! Pretraining of a dense host and the three-stage sparsity-embedded
//! fine-tuning procedure:
//!
//! - stage 0 attaches `U V + S₂` updates on the configured projections, with
//!   supports chosen by [`select_support`](crate::decompose::select_support);
//! - stage I trains the updates (plus the classifier, and the head gates in
//!   structured mode) with all pretrained weights frozen;
//! - stage II prunes, by global magnitude masks (unstructured) or by removing
//!   heads and FFN units (structured);
//! - stage III tunes the updates again with the pruned structure fixed.

mod optim;
mod task;

use serde::{Deserialize, Serialize};

use crate::accounting::{
    count_trainable, estimate_flops, projection_shape, rank_warnings, AdapterState, ArchSpec,
    BudgetReport, FlopsQuery, MaskState, SiteBudget, SiteShape, FLOPS_CONVENTION,
};
use crate::adapter::{init_update, SparseLowRankUpdate};
use crate::decompose::{select_support, SupportMethod};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model::{
    BackwardOptions, ParamGroup, ProjectionKind, ToyTransformer, ToyTransformerConfig,
};
use crate::pruning::{apply_magnitude_masks, floor_count, prune_ffn, prune_heads};

pub use optim::{adamw_step, AdamHp, AdamW, MomentState};
pub use task::{keycopy_permutation, majority_label, make_task, Dataset, TaskKind, TaskSpec};

/// Default weight of the `Σ|c|` gate penalty.
pub const DEFAULT_LAMBDA_L1: f64 = 1e-4;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Support size `N` per sparse site.
    pub card: usize,
    pub method: SupportMethod,
    /// Projections receiving `U V`.
    pub targets: Vec<ProjectionKind>,
    /// Projections receiving `S₂`; defaults to `targets`.
    pub sparse_targets: Option<Vec<ProjectionKind>>,
    /// Rank of the decomposition used for support selection; defaults to `rank`.
    pub decompose_rank: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            card: 16,
            method: SupportMethod::Decompose,
            targets: ProjectionKind::ALL.to_vec(),
            sparse_targets: None,
            decompose_rank: None,
        }
    }
}

impl AdapterConfig {
    pub fn sparse_targets(&self) -> &[ProjectionKind] {
        self.sparse_targets.as_deref().unwrap_or(&self.targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningMode {
    Unstructured,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub mode: PruningMode,
    /// Fraction of masked pretrained weights (unstructured).
    pub sparsity: f64,
    /// Fraction of heads removed per layer (structured).
    pub head_ratio: f64,
    /// Fraction of FFN units removed per layer (structured).
    pub ffn_ratio: f64,
    /// Projections covered by unstructured masks.
    pub mask_targets: Vec<ProjectionKind>,
    /// Rank weights by `W + U V + S₂` rather than `W + U V`.
    pub include_sparse_in_scores: bool,
    pub lambda_l1: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            mode: PruningMode::Unstructured,
            sparsity: 0.5,
            head_ratio: 0.25,
            ffn_ratio: 0.0,
            mask_targets: ProjectionKind::ALL.to_vec(),
            include_sparse_in_scores: true,
            lambda_l1: DEFAULT_LAMBDA_L1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub adam: AdamHp,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage3: usize,
    /// Decay the rate linearly to zero within each stage.
    pub linear_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adam: AdamHp::default(),
            batch_size: 32,
            epochs_stage1: 3,
            epochs_stage3: 3,
            linear_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub task: TaskSpec,
    pub adam: AdamHp,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once eval accuracy reaches this value.
    pub target_accuracy: f64,
    /// Fail below this final eval accuracy.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            adam: AdamHp {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamHp::default()
            },
            batch_size: 32,
            max_epochs: 30,
            target_accuracy: 0.95,
            min_accuracy: 0.60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Count classifier (and, in structured mode, gate) parameters as trainable.
    pub include_head_params: bool,
    /// Sequences per FLOPs pass; defaults to the fine-tuning eval set size.
    pub dataset_size: Option<usize>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            include_head_params: true,
            dataset_size: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ToyTransformerConfig,
    pub adapter: AdapterConfig,
    pub pruning: PruningConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    /// Fine-tuning task.
    pub task: TaskSpec,
    pub budget: BudgetConfig,
}

fn ratio_ok(x: f64) -> bool {
    (0.0..1.0).contains(&x)
}

impl PipelineConfig {
    /// Checks everything needed for planning.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = &self.pruning;
        if !ratio_ok(p.sparsity) || !ratio_ok(p.head_ratio) || !ratio_ok(p.ffn_ratio) {
            return Err(Error::Config("pruning ratios must be in [0, 1)".into()));
        }
        if !(p.lambda_l1 >= 0.0 && p.lambda_l1.is_finite()) {
            return Err(Error::Config(
                "lambda_l1 must be a non-negative number".into(),
            ));
        }
        if p.mode == PruningMode::Structured
            && floor_count(self.model.n_heads, p.head_ratio) >= self.model.n_heads
        {
            return Err(Error::Config(format!(
                "head_ratio {} removes every head",
                p.head_ratio
            )));
        }
        if p.mode == PruningMode::Structured
            && floor_count(self.model.d_ff, p.ffn_ratio) >= self.model.d_ff
        {
            return Err(Error::Config(format!(
                "ffn_ratio {} removes every FFN unit",
                p.ffn_ratio
            )));
        }
        let a = &self.adapter;
        let inner = self.model.d_model;
        if !a.targets.is_empty() && (a.rank == 0 || a.rank > inner) {
            return Err(Error::Config(format!(
                "rank {} must be in 1..={inner}",
                a.rank
            )));
        }
        if self.optimizer.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Additional checks for training runs.
    pub fn validate_training(&self) -> Result<()> {
        self.validate()?;
        let a = &self.adapter;
        if let Some(k) = a.sparse_targets().iter().find(|k| !a.targets.contains(k)) {
            return Err(Error::Config(format!(
                "sparse target {k} has no low-rank update; training requires sparse_targets within targets"
            )));
        }
        if a.targets.is_empty() {
            return Err(Error::Config("no adapter targets".into()));
        }
        if let Some(r) = a.decompose_rank {
            if r == 0 || r > self.model.d_model {
                return Err(Error::Config(format!("decompose_rank {r} out of range")));
            }
        }
        if self.optimizer.epochs_stage1 == 0 || self.optimizer.epochs_stage3 == 0 {
            return Err(Error::Config(
                "stages I and III need at least one epoch".into(),
            ));
        }
        if self.pretrain.max_epochs == 0 {
            return Err(Error::Config("pretraining needs at least one epoch".into()));
        }
        self.optimizer.adam.validate()?;
        self.pretrain.adam.validate()?;
        Ok(())
    }
}

/// Parameter and structure snapshot taken at the end of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub trainable_params: u64,
    pub total_params: u64,
    pub pretrained_sparsity: f64,
    pub heads_per_layer: Vec<usize>,
    pub ffn_units_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    /// Loss of every optimizer step.
    pub train_loss: Vec<f64>,
    pub eval_accuracy: f64,
    pub steps: u64,
    pub snapshot: Snapshot,
}

/// Fraction of masked entries across all projection weights of the model.
pub fn masked_fraction(model: &ToyTransformer) -> f64 {
    let (mut masked, mut total) = (0usize, 0usize);
    for layer in &model.layers {
        for p in &layer.projections {
            total += p.weight.len();
            masked += p.mask.as_ref().map_or(0, |m| m.masked_count());
        }
    }
    masked as f64 / total as f64
}

fn snapshot(model: &ToyTransformer, groups: &[ParamGroup]) -> Snapshot {
    Snapshot {
        trainable_params: model.param_count(groups) as u64,
        total_params: model.total_param_count() as u64,
        pretrained_sparsity: masked_fraction(model),
        heads_per_layer: model.layers.iter().map(|l| l.n_heads()).collect(),
        ffn_units_per_layer: model.layers.iter().map(|l| l.ffn_width()).collect(),
    }
}

/// Accuracy over a dataset, evaluated in fixed chunks.
pub fn evaluate(model: &ToyTransformer, data: &Dataset) -> Result<f64> {
    let mut correct = 0.0;
    for (tokens, labels) in data
        .tokens
        .chunks(EVAL_CHUNK)
        .zip(data.labels.chunks(EVAL_CHUNK))
    {
        correct += model.accuracy(tokens, labels)? * labels.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

struct StageSpec<'a> {
    name: &'a str,
    groups: &'a [ParamGroup],
    epochs: usize,
    adam: AdamHp,
    batch_size: usize,
    linear_decay: bool,
    lambda_l1: f64,
    stop_at: Option<f64>,
}

fn train_stage(
    model: &mut ToyTransformer,
    train: &Dataset,
    eval: &Dataset,
    spec: &StageSpec<'_>,
    rng: &Rng,
) -> Result<StageReport> {
    let mut opt = AdamW::new(spec.adam);
    let per_epoch = train.len().div_ceil(spec.batch_size);
    let total_steps = (per_epoch * spec.epochs) as f64;
    let opts = BackwardOptions {
        lambda_l1: spec.lambda_l1,
        dense_grads: spec.groups.contains(&ParamGroup::Dense),
    };
    let mut losses = Vec::with_capacity(per_epoch * spec.epochs);
    let mut step = 0usize;
    let mut accuracy = None;
    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.fork(&format!("{}.epoch{epoch}", spec.name))
            .shuffle(&mut order);
        for batch in order.chunks(spec.batch_size) {
            let tokens: Vec<Vec<usize>> = batch.iter().map(|&i| train.tokens[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = model.backward(&tokens, &labels, opts)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "{}: loss diverged at step {step}",
                    spec.name
                )));
            }
            let lr = if spec.linear_decay {
                spec.adam.lr * (1.0 - step as f64 / total_steps)
            } else {
                spec.adam.lr
            };
            opt.step(model, &grads, spec.groups, lr)?;
            losses.push(loss);
            step += 1;
        }
        if let Some(target) = spec.stop_at {
            let acc = evaluate(model, eval)?;
            accuracy = Some(acc);
            if acc >= target {
                break;
            }
        }
    }
    let eval_accuracy = match accuracy {
        Some(a) => a,
        None => evaluate(model, eval)?,
    };
    Ok(StageReport {
        stage: spec.name.to_string(),
        train_loss: losses,
        eval_accuracy,
        steps: step as u64,
        snapshot: snapshot(model, spec.groups),
    })
}

/// Source-task data for pretraining.
pub fn pretrain_data(cfg: &PipelineConfig) -> Result<(Dataset, Dataset)> {
    make_task(
        &cfg.pretrain.task,
        &cfg.model,
        Rng::new(cfg.seed).fork("pretrain.data").seed(),
    )
}

/// Target-task data for fine-tuning; its permutation differs from the source task's.
pub fn finetune_data(cfg: &PipelineConfig) -> Result<(Dataset, Dataset)> {
    make_task(
        &cfg.task,
        &cfg.model,
        Rng::new(cfg.seed).fork("finetune.data").seed(),
    )
}

/// Trains every dense parameter and the classifier on the source task.
pub fn pretrain_dense(cfg: &PipelineConfig) -> Result<(ToyTransformer, StageReport)> {
    cfg.validate_training()?;
    let root = Rng::new(cfg.seed);
    let mut model = ToyTransformer::new(cfg.model, &mut root.fork("pretrain.init"))?;
    let (train, eval) = pretrain_data(cfg)?;
    let p = &cfg.pretrain;
    let spec = StageSpec {
        name: "pretrain",
        groups: &[ParamGroup::Dense, ParamGroup::Classifier],
        epochs: p.max_epochs,
        adam: p.adam,
        batch_size: p.batch_size,
        linear_decay: cfg.optimizer.linear_decay,
        lambda_l1: cfg.pruning.lambda_l1,
        stop_at: Some(p.target_accuracy),
    };
    let report = train_stage(
        &mut model,
        &train,
        &eval,
        &spec,
        &root.fork("pretrain.order"),
    )?;
    if report.eval_accuracy < p.min_accuracy {
        return Err(Error::Pipeline(format!(
            "pretraining reached eval accuracy {:.4}, below the required {:.2}",
            report.eval_accuracy, p.min_accuracy
        )));
    }
    Ok((model, report))
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct DseeOutcome {
    pub model: ToyTransformer,
    pub reports: Vec<StageReport>,
    pub budget: BudgetReport,
}

fn check_compatible(cfg: &PipelineConfig, model: &ToyTransformer) -> Result<()> {
    if model.config != cfg.model {
        return Err(Error::Pipeline(format!(
            "pretrained model config {:?} does not match {:?}",
            model.config, cfg.model
        )));
    }
    let dense = model.layers.iter().all(|l| {
        l.n_heads() == cfg.model.n_heads
            && l.ffn_width() == cfg.model.d_ff
            && l.projections
                .iter()
                .all(|p| p.mask.is_none() && p.update.is_none())
    });
    if !dense {
        return Err(Error::Pipeline(
            "pretrained model must be dense and unadapted".into(),
        ));
    }
    Ok(())
}

fn finetune_groups(mode: PruningMode, stage: u8) -> Vec<ParamGroup> {
    let mut g = vec![
        ParamGroup::AdapterU,
        ParamGroup::AdapterV,
        ParamGroup::AdapterSparse,
        ParamGroup::Classifier,
    ];
    if mode == PruningMode::Structured && stage == 1 {
        g.push(ParamGroup::Gate);
    }
    g
}

/// Head-parameter count included in budgets: classifier, plus gates when trained.
fn extras(cfg: &PipelineConfig) -> u64 {
    if !cfg.budget.include_head_params {
        return 0;
    }
    let m = &cfg.model;
    let mut e = (m.n_classes * m.d_model + m.n_classes) as u64;
    if cfg.pruning.mode == PruningMode::Structured {
        e += (m.n_layers * m.n_heads) as u64;
    }
    e
}

/// Runs stages 0–III on a dense pretrained host.
pub fn run_dsee(cfg: &PipelineConfig, pretrained: &ToyTransformer) -> Result<DseeOutcome> {
    cfg.validate_training()?;
    check_compatible(cfg, pretrained)?;
    let root = Rng::new(cfg.seed);
    let (train, eval) = finetune_data(cfg)?;
    let mut model = pretrained.clone();
    let a = &cfg.adapter;
    let mode = cfg.pruning.mode;

    // Stage 0.
    let decompose_rank = a.decompose_rank.unwrap_or(a.rank);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        for &kind in &a.targets {
            let card = if a.sparse_targets().contains(&kind) {
                a.card
            } else {
                0
            };
            let p = layer.projection_mut(kind);
            let mut rng = root.fork(&format!("init.layers.{l}.{kind}"));
            let upd = if decompose_rank == a.rank {
                init_update(&p.weight, a.rank, card, a.method, &mut rng)?
            } else {
                let support = select_support(&p.weight, a.method, card, decompose_rank, &mut rng)?;
                SparseLowRankUpdate::new(a.rank, support, &mut rng)?
            };
            p.update = Some(upd);
        }
    }
    let budget = plan_budget(cfg)?;
    let stage1_groups = finetune_groups(mode, 1);
    let adapter_count = model.param_count(&[
        ParamGroup::AdapterU,
        ParamGroup::AdapterV,
        ParamGroup::AdapterSparse,
    ]) as u64;
    let planned_sites: Vec<SiteShape> = budget
        .per_site
        .iter()
        .map(|s| SiteShape {
            m: s.m,
            n: s.n,
            r: s.r,
            card: s.card,
        })
        .collect();
    let planned = count_trainable(&planned_sites, 0);
    if adapter_count != planned {
        return Err(Error::Pipeline(format!(
            "stored adapter values {adapter_count} differ from the planned count {planned}"
        )));
    }
    if model.total_param_count() as u64 != budget.total_params {
        return Err(Error::Pipeline(format!(
            "model holds {} parameters, plan expects {}",
            model.total_param_count(),
            budget.total_params
        )));
    }

    // Stage I.
    let o = &cfg.optimizer;
    let frozen = [ParamGroup::Dense];
    let before = model.checksum(&frozen);
    let spec = |name, groups, epochs| StageSpec {
        name,
        groups,
        epochs,
        adam: o.adam,
        batch_size: o.batch_size,
        linear_decay: o.linear_decay,
        lambda_l1: cfg.pruning.lambda_l1,
        stop_at: None,
    };
    let r1 = train_stage(
        &mut model,
        &train,
        &eval,
        &spec("stage1", &stage1_groups, o.epochs_stage1),
        &root.fork("stage1.order"),
    )?;
    if model.checksum(&frozen) != before {
        return Err(Error::Pipeline(
            "stage I modified pretrained weights".into(),
        ));
    }

    // Stage II.
    match mode {
        PruningMode::Unstructured => apply_magnitude_masks(
            &mut model,
            &cfg.pruning.mask_targets,
            cfg.pruning.sparsity,
            cfg.pruning.include_sparse_in_scores,
        )?,
        PruningMode::Structured => {
            model = prune_heads(&model, cfg.pruning.head_ratio)?;
            model = prune_ffn(&model, cfg.pruning.ffn_ratio)?;
        }
    }
    let stage3_groups = finetune_groups(mode, 3);
    let r2 = StageReport {
        stage: "stage2".into(),
        train_loss: Vec::new(),
        eval_accuracy: evaluate(&model, &eval)?,
        steps: 0,
        snapshot: snapshot(&model, &stage3_groups),
    };

    // Stage III.
    let r3 = train_stage(
        &mut model,
        &train,
        &eval,
        &spec("stage3", &stage3_groups, o.epochs_stage3),
        &root.fork("stage3.order"),
    )?;

    Ok(DseeOutcome {
        model,
        reports: vec![r1, r2, r3],
        budget,
    })
}

fn site_list(cfg: &PipelineConfig, heads: usize) -> Vec<SiteBudget> {
    let arch = ArchSpec::from(&cfg.model);
    let a = &cfg.adapter;
    let sparse = a.sparse_targets();
    let mut out = Vec::new();
    for l in 0..cfg.model.n_layers {
        for kind in ProjectionKind::ALL {
            let low = a.targets.contains(&kind);
            let sp = sparse.contains(&kind);
            if !low && !sp {
                continue;
            }
            let (m, n) = projection_shape(&arch, heads, kind);
            out.push(SiteBudget {
                name: format!("layers.{l}.attn.{kind}"),
                m,
                n,
                r: if low { a.rank } else { 0 },
                card: if sp { a.card.min(m * n) } else { 0 },
                masked_fraction: 0.0,
            });
        }
    }
    out
}

/// Budget of a configuration, computed without training.
///
/// `trainable_params` counts the stage-I updates; FLOPs cover one pass over
/// `budget.dataset_size` sequences (the fine-tuning eval set by default)
/// before (`flops_dense`) and after (`flops_current`) structured pruning.
pub fn plan_budget(cfg: &PipelineConfig) -> Result<BudgetReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let arch = ArchSpec::from(m);
    let p = &cfg.pruning;
    let mut per_site = site_list(cfg, m.n_heads);
    let sites: Vec<SiteShape> = per_site
        .iter()
        .map(|s| SiteShape {
            m: s.m,
            n: s.n,
            r: s.r,
            card: s.card,
        })
        .collect();
    let adapter_params = count_trainable(&sites, 0);
    let trainable_params = adapter_params + extras(cfg);

    let d = m.d_model;
    let per_layer = 4 * d + 4 * d * d + m.n_heads + 2 * m.d_ff * d + m.d_ff + d;
    let total_params = (m.vocab_size * d
        + m.seq_len * d
        + m.n_layers * per_layer
        + 2 * d
        + m.n_classes * d
        + m.n_classes) as u64
        + adapter_params;

    let attention = 4 * d * d * m.n_layers;
    let ffn = 2 * d * m.d_ff * m.n_layers;
    let (heads, units) = match p.mode {
        PruningMode::Structured => (
            m.n_heads - floor_count(m.n_heads, p.head_ratio),
            m.d_ff - floor_count(m.d_ff, p.ffn_ratio),
        ),
        PruningMode::Unstructured => (m.n_heads, m.d_ff),
    };
    let (pretrained_sparsity, nonzero) = match p.mode {
        PruningMode::Unstructured => {
            let maskable: usize = p.mask_targets.len() * d * d * m.n_layers;
            let masked = floor_count(maskable, p.sparsity);
            for s in &mut per_site {
                if p.mask_targets
                    .iter()
                    .any(|k| s.name.ends_with(&format!(".{k}")))
                {
                    s.masked_fraction = p.sparsity;
                }
            }
            let frac = if maskable == 0 {
                0.0
            } else {
                masked as f64 / maskable as f64
            };
            (frac, (attention + ffn - masked) as u64)
        }
        PruningMode::Structured => {
            let kept = 4 * d * heads * arch.head_dim() * m.n_layers + 2 * d * units * m.n_layers;
            (1.0 - kept as f64 / (attention + ffn) as f64, kept as u64)
        }
    };

    let adapter = Some(AdapterState {
        rank: cfg.adapter.rank,
        card: cfg.adapter.card,
        targets: cfg.adapter.targets.clone(),
        sparse_targets: cfg.adapter.sparse_targets().to_vec(),
    });
    let query = |mask| FlopsQuery {
        arch,
        seq_len: m.seq_len,
        batch: cfg.optimizer.batch_size,
        dataset_size: cfg.budget.dataset_size.unwrap_or(cfg.task.n_eval),
        mask,
        adapter: adapter.clone(),
    };
    let flops_dense = estimate_flops(&query(MaskState::Dense))?;
    let current_mask = match p.mode {
        PruningMode::Unstructured => MaskState::Unstructured {
            sparsity: p.sparsity,
        },
        PruningMode::Structured => MaskState::Structured {
            heads: vec![heads; m.n_layers],
            ffn_units: vec![units; m.n_layers],
        },
    };
    let flops_current = estimate_flops(&query(current_mask))?;
    let warnings = rank_warnings(&per_site);
    Ok(BudgetReport {
        trainable_params,
        total_params,
        pretrained_sparsity,
        nonzero_pretrained_weights: nonzero,
        flops_dense,
        flops_current,
        flops_convention: FLOPS_CONVENTION.to_string(),
        per_site,
        warnings,
    })
}

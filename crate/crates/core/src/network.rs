//! The moment-propagating attentive SE-ResNet.
//!
//! Canonical stack (log-Mel input 300x128):
//!
//! ```text
//! (ConvBlock @ 64)   & pool  -> (150, 64, 64)
//! (SEBlock  @ 64)x2  & pool  -> (75, 32, 64)
//! (SEBlock  @ 128)x3 & pool  -> (37, 16, 128)
//! (SEBlock  @ 256)x5 & pool  -> (18, 8, 256)
//! (SEBlock  @ 512)x2 & pool  -> (9, 4, 512)
//! (ConvBlock @ 1024)         -> (9, 4, 1024)
//! reshape                    -> (9, 4096)
//! 4-head attention pooling   -> (16384,)
//! dense layer per task       -> (1,) x tasks
//! ```
//!
//! A ConvBlock is two 3x3 variational convolutions with ReLU moments; an
//! SEBlock adds a squeeze-and-excitation gate (spatial mean of the residual
//! moments, dense-down with ReLU, dense-up with sigmoid) applied as a product
//! of independent normals per channel, then a distributional add with the
//! skip path. Channel-count changes use a variational 1x1 projection on the
//! skip. Local pooling is either max co-pooling or shared-head attentive
//! pooling; no normalization layers anywhere.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{relu_moments_var, sigmoid_moments_var};
use crate::error::{Error, Result};
use crate::gaussian::{GaussVar, GaussianTensor};
use crate::graph::{Tape, Var};
use crate::layers::{
    conv_forward_var, dense_forward_var, kl_conv_var, kl_dense_var, BoundConv, BoundDense,
    PriorSpec, VariationalConv2D, VariationalDense,
};
use crate::pooling::{
    attentive_local_pool_var_with_p, max_co_pool_var_with_idx, multi_head_global_pool_var_with_p,
    PoolWindow,
};
use crate::tensor::{Padding, Tensor};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Attentive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Conv,
    Se,
}

/// One architecture stage: `repeats` blocks at a channel width, optionally
/// followed by a 2x2 pooling operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub repeats: usize,
    pub channels: usize,
    pub pool: bool,
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Input spectrogram shape (frames, mel bins).
    pub input_shape: (usize, usize),
    pub stages: Vec<StageSpec>,
    pub pooling: PoolKind,
    pub heads: usize,
    pub tasks: usize,
    pub se_reduction: usize,
    pub rho_init: f64,
    /// Point-estimate mode: every layer's rho frozen at exactly zero.
    pub frozen_rho: bool,
}

/// Shapes produced by every stage of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    /// Shape after each stage (including its pool), as (H, W, C).
    pub stage_shapes: Vec<(usize, usize, usize)>,
    /// Sequence shape after the reshape, (T, D).
    pub embedding: (usize, usize),
    /// Pooled vector length, heads * D.
    pub pooled: usize,
    /// Logit count per task.
    pub per_task: usize,
}

impl ArchitectureConfig {
    /// The full-scale reference stack.
    pub fn canonical(tasks: usize, pooling: PoolKind) -> Self {
        ArchitectureConfig {
            input_shape: (300, 128),
            stages: vec![
                StageSpec {
                    kind: BlockKind::Conv,
                    repeats: 1,
                    channels: 64,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 2,
                    channels: 64,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 3,
                    channels: 128,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 5,
                    channels: 256,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 2,
                    channels: 512,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Conv,
                    repeats: 1,
                    channels: 1024,
                    pool: false,
                },
            ],
            pooling,
            heads: 4,
            tasks,
            se_reduction: 16,
            rho_init: 1e-4,
            frozen_rho: false,
        }
    }

    /// Desk-scale configuration with the same structure: 32x16 input, scaled
    /// stage widths.
    pub fn miniature(tasks: usize, pooling: PoolKind) -> Self {
        ArchitectureConfig {
            input_shape: (32, 16),
            stages: vec![
                StageSpec {
                    kind: BlockKind::Conv,
                    repeats: 1,
                    channels: 4,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 1,
                    channels: 8,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Conv,
                    repeats: 1,
                    channels: 16,
                    pool: false,
                },
            ],
            pooling,
            heads: 2,
            tasks,
            se_reduction: 4,
            rho_init: 1e-4,
            frozen_rho: false,
        }
    }

    /// Smallest end-to-end network, used by the Monte-Carlo oracle suite
    /// where every instance is re-sampled two hundred thousand times.
    pub fn micro(tasks: usize, pooling: PoolKind) -> Self {
        ArchitectureConfig {
            input_shape: (8, 4),
            stages: vec![
                StageSpec {
                    kind: BlockKind::Conv,
                    repeats: 1,
                    channels: 2,
                    pool: true,
                },
                StageSpec {
                    kind: BlockKind::Se,
                    repeats: 1,
                    channels: 3,
                    pool: false,
                },
            ],
            pooling,
            heads: 1,
            tasks,
            se_reduction: 2,
            rho_init: 1e-2,
            frozen_rho: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(
                "architecture needs at least one stage".into(),
            ));
        }
        if self.heads == 0 || self.tasks == 0 {
            return Err(Error::Config("heads and tasks must be positive".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        if self.rho_init <= 0.0 {
            return Err(Error::Config("rho_init must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.repeats == 0 || s.channels == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: repeats and channels must be positive"
                )));
            }
        }
        self.shape_trace()?;
        Ok(())
    }

    /// Analytic shape trace; validated against recorded forward shapes in
    /// tests.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let win = PoolWindow::two_by_two();
        let (mut h, mut w) = self.input_shape;
        let mut stage_shapes = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let c = stage.channels;
            if stage.pool {
                let (nh, nw) = win
                    .out_dims(h, w)
                    .map_err(|e| Error::Config(format!("stage {i}: {e}")))?;
                h = nh;
                w = nw;
            }
            stage_shapes.push((h, w, c));
        }
        let (_, _, c_last) = *stage_shapes.last().unwrap();
        let embedding = (h, w * c_last);
        Ok(ShapeTrace {
            stage_shapes,
            embedding,
            pooled: self.heads * embedding.1,
            per_task: 1,
        })
    }

    /// Approximate trainable-parameter count (weight and bias means plus the
    /// unconstrained rho scalars).
    pub fn param_count(&self) -> Result<usize> {
        let net = SeResNet::init(self.clone(), 0)?;
        let mut out = Vec::new();
        net.visit(&mut out);
        Ok(out.iter().map(|(_, t)| t.numel()).sum())
    }
}

/// Two 3x3 convolutions with ReLU moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub conv1: VariationalConv2D,
    pub conv2: VariationalConv2D,
}

/// Residual SE block: two convolutions, squeeze-excitation bottleneck, and a
/// skip path (1x1 projection when the channel count changes).
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlockParams {
    pub conv1: VariationalConv2D,
    pub conv2: VariationalConv2D,
    pub se_down: VariationalDense,
    pub se_up: VariationalDense,
    pub proj: Option<VariationalConv2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv(ConvBlockParams),
    Se(SeBlockParams),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StageParams {
    pub(crate) blocks: Vec<Block>,
    pub(crate) pool: bool,
    /// Shared energy layer for attentive pooling of this stage.
    pub(crate) local_head: Option<VariationalDense>,
}

/// The full model: parameters only; binding to a tape produces the
/// differentiable mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct SeResNet {
    pub config: ArchitectureConfig,
    pub(crate) stages: Vec<StageParams>,
    pub(crate) global_heads: Vec<VariationalDense>,
    pub(crate) task_heads: Vec<VariationalDense>,
}

pub struct BoundBlock {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub se_down: Option<BoundDense>,
    pub se_up: Option<BoundDense>,
    pub proj: Option<BoundConv>,
}

struct BoundStage {
    blocks: Vec<BoundBlock>,
    pool: bool,
    local_head: Option<BoundDense>,
}

/// Taped mirror of the network; holds the leaf registry for the optimizer.
pub struct BoundSeResNet {
    stages: Vec<BoundStage>,
    global_heads: Vec<BoundDense>,
    task_heads: Vec<BoundDense>,
    pub registry: Vec<Var>,
    pooling: PoolKind,
}

/// Pooling decisions recorded during a forward pass: the selected flat
/// indices of max co-pooling, or the softmax weights of attentive pooling.
/// The conditional Monte-Carlo oracles replay these pins.
#[derive(Clone)]
pub enum PoolPin {
    Max(Rc<Vec<usize>>),
    Attentive(Tensor),
}

/// Output of a forward pass: one scalar logit Gaussian per task plus the
/// recorded stage shapes and pooling pins.
pub struct ForwardOut {
    pub logits: Vec<GaussVar>,
    pub stage_shapes: Vec<(usize, usize, usize)>,
    /// One entry per pooled stage, in stage order.
    pub pool_pins: Vec<PoolPin>,
    /// Per-head global attention weights, each `(1,T)`.
    pub global_p: Vec<Tensor>,
    /// Stage-output moment snapshots (mean, variance), oracle support.
    pub stage_moments: Vec<(Tensor, Tensor)>,
}

impl SeResNet {
    pub fn init(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.shape_trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = config.rho_init;
        let frozen = config.frozen_rho;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut cin = 1usize;
        for spec in &config.stages {
            let mut blocks = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let cout = spec.channels;
                let block = match spec.kind {
                    BlockKind::Conv => Block::Conv(ConvBlockParams {
                        conv1: VariationalConv2D::init(
                            3,
                            3,
                            cin,
                            cout,
                            Padding::Same,
                            rho,
                            frozen,
                            &mut rng,
                        ),
                        conv2: VariationalConv2D::init(
                            3,
                            3,
                            cout,
                            cout,
                            Padding::Same,
                            rho,
                            frozen,
                            &mut rng,
                        ),
                    }),
                    BlockKind::Se => {
                        let bottleneck = (cout / config.se_reduction).max(1);
                        Block::Se(SeBlockParams {
                            conv1: VariationalConv2D::init(
                                3,
                                3,
                                cin,
                                cout,
                                Padding::Same,
                                rho,
                                frozen,
                                &mut rng,
                            ),
                            conv2: VariationalConv2D::init(
                                3,
                                3,
                                cout,
                                cout,
                                Padding::Same,
                                rho,
                                frozen,
                                &mut rng,
                            ),
                            se_down: VariationalDense::init(
                                cout, bottleneck, rho, frozen, &mut rng,
                            ),
                            se_up: VariationalDense::init(bottleneck, cout, rho, frozen, &mut rng),
                            proj: if cin == cout {
                                None
                            } else {
                                Some(VariationalConv2D::init(
                                    1,
                                    1,
                                    cin,
                                    cout,
                                    Padding::Same,
                                    rho,
                                    frozen,
                                    &mut rng,
                                ))
                            },
                        })
                    }
                };
                blocks.push(block);
                cin = spec.channels;
            }
            let local_head = if spec.pool && config.pooling == PoolKind::Attentive {
                Some(VariationalDense::init(
                    spec.channels,
                    1,
                    rho,
                    frozen,
                    &mut rng,
                ))
            } else {
                None
            };
            stages.push(StageParams {
                blocks,
                pool: spec.pool,
                local_head,
            });
        }
        let trace = config.shape_trace()?;
        let d = trace.embedding.1;
        let global_heads = (0..config.heads)
            .map(|_| VariationalDense::init(d, 1, rho, frozen, &mut rng))
            .collect();
        let task_heads = (0..config.tasks)
            .map(|_| VariationalDense::init(trace.pooled, 1, rho, frozen, &mut rng))
            .collect();
        Ok(SeResNet {
            config,
            stages,
            global_heads,
            task_heads,
        })
    }

    /// Enumerate parameters as (name, tensor). `visit`, `visit_mut`, and
    /// `bind` walk fields in the same order; optimizer state and checkpoints
    /// rely on that.
    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                match block {
                    Block::Conv(cb) => {
                        cb.conv1.visit(&format!("{p}.conv1"), out);
                        cb.conv2.visit(&format!("{p}.conv2"), out);
                    }
                    Block::Se(sb) => {
                        sb.conv1.visit(&format!("{p}.conv1"), out);
                        sb.conv2.visit(&format!("{p}.conv2"), out);
                        sb.se_down.visit(&format!("{p}.se_down"), out);
                        sb.se_up.visit(&format!("{p}.se_up"), out);
                        if let Some(proj) = &sb.proj {
                            proj.visit(&format!("{p}.proj"), out);
                        }
                    }
                }
            }
            if let Some(head) = &stage.local_head {
                head.visit(&format!("stage{si}.local_head"), out);
            }
        }
        for (hi, head) in self.global_heads.iter().enumerate() {
            head.visit(&format!("global_head{hi}"), out);
        }
        for (ti, head) in self.task_heads.iter().enumerate() {
            head.visit(&format!("task{ti}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                match block {
                    Block::Conv(cb) => {
                        cb.conv1.visit_mut(&format!("{p}.conv1"), out);
                        cb.conv2.visit_mut(&format!("{p}.conv2"), out);
                    }
                    Block::Se(sb) => {
                        sb.conv1.visit_mut(&format!("{p}.conv1"), out);
                        sb.conv2.visit_mut(&format!("{p}.conv2"), out);
                        sb.se_down.visit_mut(&format!("{p}.se_down"), out);
                        sb.se_up.visit_mut(&format!("{p}.se_up"), out);
                        if let Some(proj) = &mut sb.proj {
                            proj.visit_mut(&format!("{p}.proj"), out);
                        }
                    }
                }
            }
            if let Some(head) = &mut stage.local_head {
                head.visit_mut(&format!("stage{si}.local_head"), out);
            }
        }
        for (hi, head) in self.global_heads.iter_mut().enumerate() {
            head.visit_mut(&format!("global_head{hi}"), out);
        }
        for (ti, head) in self.task_heads.iter_mut().enumerate() {
            head.visit_mut(&format!("task{ti}"), out);
        }
    }

    /// Iterate over every convolution/dense layer for KL and oracle support.
    pub fn for_each_block(&self, mut f: impl FnMut(&Block)) {
        for stage in &self.stages {
            for block in &stage.blocks {
                f(block);
            }
        }
    }

    pub fn attention_layers(&self) -> Vec<&VariationalDense> {
        let mut v: Vec<&VariationalDense> = Vec::new();
        for stage in &self.stages {
            if let Some(h) = &stage.local_head {
                v.push(h);
            }
        }
        v.extend(self.global_heads.iter());
        v.extend(self.task_heads.iter());
        v
    }

    pub fn bind(&self, tape: &Tape) -> BoundSeResNet {
        let mut registry = Vec::new();
        let stages = self
            .stages
            .iter()
            .map(|stage| BoundStage {
                blocks: stage
                    .blocks
                    .iter()
                    .map(|block| match block {
                        Block::Conv(cb) => BoundBlock {
                            conv1: cb.conv1.bind(tape, &mut registry),
                            conv2: cb.conv2.bind(tape, &mut registry),
                            se_down: None,
                            se_up: None,
                            proj: None,
                        },
                        Block::Se(sb) => BoundBlock {
                            conv1: sb.conv1.bind(tape, &mut registry),
                            conv2: sb.conv2.bind(tape, &mut registry),
                            se_down: Some(sb.se_down.bind(tape, &mut registry)),
                            se_up: Some(sb.se_up.bind(tape, &mut registry)),
                            proj: sb.proj.as_ref().map(|p| p.bind(tape, &mut registry)),
                        },
                    })
                    .collect(),
                pool: stage.pool,
                local_head: stage
                    .local_head
                    .as_ref()
                    .map(|h| h.bind(tape, &mut registry)),
            })
            .collect();
        let global_heads = self
            .global_heads
            .iter()
            .map(|h| h.bind(tape, &mut registry))
            .collect();
        let task_heads = self
            .task_heads
            .iter()
            .map(|h| h.bind(tape, &mut registry))
            .collect();
        BoundSeResNet {
            stages,
            global_heads,
            task_heads,
            registry,
            pooling: self.config.pooling,
        }
    }

    /// Empirical-Bayes priors per layer group, refreshed from current values.
    pub fn refresh_priors(&self) -> Vec<PriorSpec> {
        let mut priors = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                match block {
                    Block::Conv(cb) => {
                        priors.push(conv_prior(&cb.conv1));
                        priors.push(conv_prior(&cb.conv2));
                    }
                    Block::Se(sb) => {
                        priors.push(conv_prior(&sb.conv1));
                        priors.push(conv_prior(&sb.conv2));
                        priors.push(dense_prior(&sb.se_down));
                        priors.push(dense_prior(&sb.se_up));
                        if let Some(p) = &sb.proj {
                            priors.push(conv_prior(p));
                        }
                    }
                }
            }
            if let Some(h) = &stage.local_head {
                priors.push(dense_prior(h));
            }
        }
        for h in &self.global_heads {
            priors.push(dense_prior(h));
        }
        for h in &self.task_heads {
            priors.push(dense_prior(h));
        }
        priors
    }

    /// Forward pass on the given tape.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &BoundSeResNet,
        input: &Tensor,
    ) -> Result<ForwardOut> {
        let (fh, fw) = self.config.input_shape;
        if input.shape() != [fh, fw] {
            return Err(Error::Shape(format!(
                "input: expected ({fh}, {fw}) spectrogram, got {:?}",
                input.shape()
            )));
        }
        let trace = self.config.shape_trace()?;
        let win = PoolWindow::two_by_two();
        let mut x = GaussVar::lift(tape, input.reshaped(vec![fh, fw, 1]));
        let mut stage_shapes = Vec::with_capacity(bound.stages.len());
        let mut pool_pins = Vec::new();
        let mut stage_moments = Vec::with_capacity(bound.stages.len());
        for (si, stage) in bound.stages.iter().enumerate() {
            for block in &stage.blocks {
                x = if block.se_down.is_some() {
                    se_block_var(block, &x)?
                } else {
                    conv_block_var(block, &x)
                };
            }
            if stage.pool {
                x = match bound.pooling {
                    PoolKind::Max => {
                        let (out, idx) = max_co_pool_var_with_idx(&x, &win)
                            .map_err(|e| Error::Shape(format!("stage {si}: {e}")))?;
                        pool_pins.push(PoolPin::Max(idx));
                        out
                    }
                    PoolKind::Attentive => {
                        let head = stage.local_head.as_ref().ok_or_else(|| {
                            Error::Config(format!("stage {si}: missing attention head"))
                        })?;
                        let (out, p) = attentive_local_pool_var_with_p(&x, &win, head)
                            .map_err(|e| Error::Shape(format!("stage {si}: {e}")))?;
                        pool_pins.push(PoolPin::Attentive(p));
                        out
                    }
                };
            }
            let got = x.shape();
            let want = trace.stage_shapes[si];
            if got != [want.0, want.1, want.2] {
                return Err(Error::Shape(format!(
                    "stage {si}: produced {got:?}, expected {want:?}"
                )));
            }
            stage_shapes.push(want);
            stage_moments.push((x.mean.value(), x.var.value()));
        }
        let (t, d) = trace.embedding;
        let seq = x.reshape(vec![t, d]);
        let (pooled, global_p) = multi_head_global_pool_var_with_p(&seq, &bound.global_heads)?;
        let pooled_mat = GaussVar {
            mean: pooled.mean.reshape(vec![1, trace.pooled]),
            var: pooled.var.reshape(vec![1, trace.pooled]),
        };
        let logits = bound
            .task_heads
            .iter()
            .map(|head| {
                let out = dense_forward_var(head, &pooled_mat);
                GaussVar {
                    mean: out.mean.reshape(vec![1]),
                    var: out.var.reshape(vec![1]),
                }
            })
            .collect();
        Ok(ForwardOut {
            logits,
            stage_shapes,
            pool_pins,
            global_p,
            stage_moments,
        })
    }

    /// Total KL to the empirical-Bayes priors, on tape. Priors must come from
    /// [`SeResNet::refresh_priors`] on the same parameter values.
    pub fn kl_var(&self, tape: &Tape, bound: &BoundSeResNet, priors: &[PriorSpec]) -> Var {
        let mut total = tape.scalar(0.0);
        let mut it = priors.iter();
        let mut next = || it.next().expect("prior count matches layer count");
        for stage in &bound.stages {
            for block in &stage.blocks {
                total = total.add(&kl_conv_var(&block.conv1, next(), tape));
                total = total.add(&kl_conv_var(&block.conv2, next(), tape));
                if let Some(d) = &block.se_down {
                    total = total.add(&kl_dense_var(d, next(), tape));
                }
                if let Some(u) = &block.se_up {
                    total = total.add(&kl_dense_var(u, next(), tape));
                }
                if let Some(p) = &block.proj {
                    total = total.add(&kl_conv_var(p, next(), tape));
                }
            }
            if let Some(h) = &stage.local_head {
                total = total.add(&kl_dense_var(h, next(), tape));
            }
        }
        for h in &bound.global_heads {
            total = total.add(&kl_dense_var(h, next(), tape));
        }
        for h in &bound.task_heads {
            total = total.add(&kl_dense_var(h, next(), tape));
        }
        total
    }

    /// Inference-only forward: per-task logit moments as plain numbers.
    pub fn logit_moments(&self, input: &Tensor) -> Result<Vec<(f64, f64)>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let out = self.forward(&tape, &bound, input)?;
        Ok(out
            .logits
            .iter()
            .map(|l| (l.mean.item(), l.var.item()))
            .collect())
    }
}

fn dense_prior(l: &VariationalDense) -> PriorSpec {
    PriorSpec::empirical_bayes(
        &l.weight_mean,
        l.rho.value(),
        &l.bias_mean,
        l.bias_rho.value(),
    )
}

fn conv_prior(l: &VariationalConv2D) -> PriorSpec {
    PriorSpec::empirical_bayes(
        &l.kernel_mean,
        l.rho.value(),
        &l.bias_mean,
        l.bias_rho.value(),
    )
}

/// conv -> ReLU moments -> conv -> ReLU moments.
pub fn conv_block_var(block: &BoundBlock, input: &GaussVar) -> GaussVar {
    let a = relu_moments_var(&conv_forward_var(&block.conv1, input));
    relu_moments_var(&conv_forward_var(&block.conv2, &a))
}

/// Residual SE block with distributional scale and add.
pub fn se_block_var(block: &BoundBlock, input: &GaussVar) -> Result<GaussVar> {
    let res = conv_block_var(block, input);
    let shape = res.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let n = (h * w) as f64;

    // squeeze: average of means; variance of the average is sum(var)/N^2
    let sq = GaussVar {
        mean: res.mean.spatial_mean().reshape(vec![1, c]),
        var: res
            .var
            .spatial_mean()
            .mul_scalar(1.0 / n)
            .reshape(vec![1, c]),
    };
    let down = block.se_down.as_ref().expect("se block has se_down");
    let up = block.se_up.as_ref().expect("se block has se_up");
    let hidden = relu_moments_var(&dense_forward_var(down, &sq));
    let exc = sigmoid_moments_var(&dense_forward_var(up, &hidden));
    let exc_mean = exc.mean.reshape(vec![c]);
    let exc_var = exc.var.reshape(vec![c]);

    // Dist-Scale: channel-wise product of independent normals
    let res_mean_flat = res.mean.reshape(vec![h * w, c]);
    let res_var_flat = res.var.reshape(vec![h * w, c]);
    let a2 = res_mean_flat.square();
    let b2 = exc_mean.square();
    let scaled_mean = res_mean_flat.scale_cols(&exc_mean);
    let scaled_var = a2
        .add(&res_var_flat)
        .scale_cols(&b2.add(&exc_var))
        .sub(&a2.scale_cols(&b2))
        .max_floor(0.0);
    let scaled = GaussVar {
        mean: scaled_mean.reshape(vec![h, w, c]),
        var: scaled_var.reshape(vec![h, w, c]),
    };

    // Dist-Add with the skip path
    let skip = match &block.proj {
        Some(proj) => conv_forward_var(proj, input),
        None => {
            let in_c = input.shape()[2];
            if in_c != c {
                return Err(Error::Shape(format!(
                    "se block: {in_c} input channels vs {c} output channels without projection"
                )));
            }
            input.clone()
        }
    };
    Ok(scaled.add(&skip))
}

/// Plain-tensor surface for a ConvBlock.
pub fn conv_block(input: &GaussianTensor, params: &ConvBlockParams) -> Result<GaussianTensor> {
    let tape = Tape::inference();
    let mut registry = Vec::new();
    let bound = BoundBlock {
        conv1: params.conv1.bind(&tape, &mut registry),
        conv2: params.conv2.bind(&tape, &mut registry),
        se_down: None,
        se_up: None,
        proj: None,
    };
    check_block_input(input, params.conv1.in_channels())?;
    let out = conv_block_var(&bound, &input.to_var(&tape));
    GaussianTensor::new(out.mean.value(), out.var.value())
}

/// Plain-tensor surface for an SE block.
pub fn se_block(input: &GaussianTensor, params: &SeBlockParams) -> Result<GaussianTensor> {
    let tape = Tape::inference();
    let mut registry = Vec::new();
    let bound = BoundBlock {
        conv1: params.conv1.bind(&tape, &mut registry),
        conv2: params.conv2.bind(&tape, &mut registry),
        se_down: Some(params.se_down.bind(&tape, &mut registry)),
        se_up: Some(params.se_up.bind(&tape, &mut registry)),
        proj: params.proj.as_ref().map(|p| p.bind(&tape, &mut registry)),
    };
    check_block_input(input, params.conv1.in_channels())?;
    let out = se_block_var(&bound, &input.to_var(&tape))?;
    GaussianTensor::new(out.mean.value(), out.var.value())
}

fn check_block_input(input: &GaussianTensor, cin: usize) -> Result<()> {
    if input.shape().len() != 3 || input.shape()[2] != cin {
        return Err(Error::Shape(format!(
            "block input must be (H,W,{cin}), got {:?}",
            input.shape()
        )));
    }
    Ok(())
}

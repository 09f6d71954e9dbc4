//! Model assembly: the eleven-stage hybrid plan, its fusion-free baseline,
//! static shape checking and compound scaling.
//!
//! The default plan at resolution 224 is a stride-2 stem, nine intermediate
//! rows and a 1x1-conv/pool/FC head, with fusion blocks at the two rows
//! whose running resolution matches a scattering output: HF-1 at
//! `input/4` (J=2) and HF-2 at `input/8` (J=3). The baseline is the same
//! table with the fusion rows removed and the neighbouring MBConv rows
//! restoring the channel transitions.
//!
//! Stage names carry the table row number (`stage01`..`stage11`) in both
//! arms, so rows shared between hybrid and baseline initialize identically
//! under one seed.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{
    hf_forward, hf_param_count, hf_register, AblationMode, FusionBlockSpec, HfSubvariant,
    HfVariant,
};
use crate::ops::BnBatchStats;
use crate::params::{ParamStore, TapeBindings};
use crate::scattering::{scatter, scattering_channel_count, PadMode, ScatteringConfig};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::wavelets::{build_filter_bank, MorletParams, WaveletFilterBank};

/// Batch-norm epsilon used by every stage.
pub const BN_EPS: f64 = 1e-3;
/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.01;

/// One inverted-bottleneck row.
#[derive(Clone, Copy, Debug)]
pub struct MBConvSpec {
    /// Expansion factor (1 or 6).
    pub expansion: usize,
    /// Depthwise kernel side (3 or 5).
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub se_reduction: usize,
    pub survival_p: f64,
}

impl MBConvSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.expansion, 1 | 6) {
            return Err(Error::Config(format!(
                "MBConv expansion must be 1 or 6, got {}",
                self.expansion
            )));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::Config(format!(
                "MBConv kernel must be 3 or 5, got {}",
                self.kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "MBConv stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.c_in == 0 || self.c_out == 0 || self.se_reduction == 0 {
            return Err(Error::Config(
                "MBConv channels and se_reduction must be positive".into(),
            ));
        }
        if !(self.survival_p > 0.0 && self.survival_p <= 1.0) {
            return Err(Error::Config(format!(
                "MBConv survival probability must be in (0, 1], got {}",
                self.survival_p
            )));
        }
        Ok(())
    }

    /// Channel width after expansion.
    pub fn c_exp(&self) -> usize {
        self.c_in * self.expansion
    }

    /// Squeeze-excitation hidden width, floored from the block input width.
    pub fn se_hidden(&self) -> usize {
        (self.c_in / self.se_reduction).max(1)
    }

    /// The residual shortcut exists iff shape is preserved.
    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

/// What one table row does.
#[derive(Clone, Debug)]
pub enum StageKind {
    /// 3x3 stride-2 convolution, BN, swish.
    Stem { c_in: usize, c_out: usize },
    MBConv(MBConvSpec),
    /// Fusion block fed by the J-scale scattering of the network input.
    Fusion { block: FusionBlockSpec, j: usize },
    /// 1x1 convolution to `c_mid`, BN, swish, global pool, FC to classes.
    Head {
        c_in: usize,
        c_mid: usize,
        classes: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
}

impl Stage {
    pub fn stride(&self) -> usize {
        match &self.kind {
            StageKind::Stem { .. } => 2,
            StageKind::MBConv(m) => m.stride,
            StageKind::Fusion { .. } | StageKind::Head { .. } => 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.kind {
            StageKind::Stem { c_out, .. } => *c_out,
            StageKind::MBConv(m) => m.c_out,
            StageKind::Fusion { block, .. } => block.c_out,
            StageKind::Head { c_mid, .. } => *c_mid,
        }
    }

    /// Table-style operator label.
    pub fn operator(&self) -> String {
        match &self.kind {
            StageKind::Stem { .. } => "Conv3x3".to_string(),
            StageKind::MBConv(m) => {
                format!("MBConv{}, {}x{}", m.expansion, m.kernel, m.kernel)
            }
            StageKind::Fusion { j, .. } => format!("HF (J={j}), 3x3"),
            StageKind::Head { .. } => "Conv1x1, Pooling, FC".to_string(),
        }
    }
}

/// Full model description.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub stages: Vec<Stage>,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Scattering orientation count shared by all fusion rows.
    pub angles: usize,
    /// Scattering phase count shared by all fusion rows.
    pub phases: usize,
    pub include_order0: bool,
}

impl ModelSpec {
    /// Scattering settings for a fusion row at scale `j`.
    pub fn scattering_config(&self, j: usize) -> ScatteringConfig {
        ScatteringConfig {
            scales: j,
            angles: self.angles,
            phases: self.phases,
            order: 1,
            include_order0: self.include_order0,
            pad: PadMode::Reflect,
        }
    }

    /// Dyadic scales used by fusion rows, ascending and deduplicated.
    pub fn fusion_scales(&self) -> Vec<usize> {
        let mut js: Vec<usize> = self
            .stages
            .iter()
            .filter_map(|s| match &s.kind {
                StageKind::Fusion { j, .. } => Some(*j),
                _ => None,
            })
            .collect();
        js.sort_unstable();
        js.dedup();
        js
    }

    pub fn is_hybrid(&self) -> bool {
        !self.fusion_scales().is_empty()
    }
}

/// Everything needed to instantiate a spec.
#[derive(Clone, Copy, Debug)]
pub struct SpecOptions {
    pub resolution: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// `None` builds the fusion-free baseline.
    pub fusion: Option<(HfVariant, HfSubvariant)>,
    /// Scattering scales of the two fusion rows. The shape check rejects
    /// scales whose output resolution misses the row's running resolution.
    pub fusion_j: [usize; 2],
    pub width_mult: f64,
    pub depth_mult: f64,
    pub angles: usize,
    pub phases: usize,
    pub include_order0: bool,
    pub se_reduction: usize,
    pub survival_p: f64,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions {
            resolution: 224,
            input_channels: 3,
            num_classes: 1000,
            fusion: Some((HfVariant::E, HfSubvariant::Plain0)),
            fusion_j: [2, 3],
            width_mult: 1.0,
            depth_mult: 1.0,
            angles: 8,
            phases: 4,
            include_order0: true,
            se_reduction: 4,
            survival_p: 0.8,
        }
    }
}

/// Rounds a scaled channel count up to the next multiple of eight, so any
/// width multiplier above one strictly widens every stage.
fn round_channels(base: usize, width_mult: f64) -> usize {
    let scaled = base as f64 * width_mult;
    ((scaled / 8.0).ceil() as usize).max(1) * 8
}

/// The table's row plan: (row number, operator, kernel, stride, channels).
struct RowPlan {
    row: usize,
    kind: RowKind,
    kernel: usize,
    stride: usize,
    channels: usize,
}

enum RowKind {
    Stem,
    MBConv { expansion: usize },
    Fusion { slot: usize },
    Head,
}

fn table_rows() -> Vec<RowPlan> {
    let r = |row, kind, kernel, stride, channels| RowPlan {
        row,
        kind,
        kernel,
        stride,
        channels,
    };
    vec![
        r(1, RowKind::Stem, 3, 2, 32),
        r(2, RowKind::MBConv { expansion: 1 }, 3, 2, 16),
        r(3, RowKind::Fusion { slot: 0 }, 3, 1, 24),
        r(4, RowKind::MBConv { expansion: 6 }, 3, 2, 24),
        r(5, RowKind::Fusion { slot: 1 }, 3, 1, 40),
        r(6, RowKind::MBConv { expansion: 6 }, 5, 2, 40),
        r(7, RowKind::MBConv { expansion: 6 }, 3, 1, 80),
        r(8, RowKind::MBConv { expansion: 6 }, 5, 2, 112),
        r(9, RowKind::MBConv { expansion: 6 }, 5, 1, 192),
        r(10, RowKind::MBConv { expansion: 6 }, 3, 1, 320),
        r(11, RowKind::Head, 1, 1, 1280),
    ]
}

/// Builds a spec from the full option set.
pub fn build_spec(opts: &SpecOptions) -> Result<ModelSpec> {
    if opts.resolution % 32 != 0 || opts.resolution == 0 {
        return Err(Error::Config(format!(
            "input resolution must be a positive multiple of 32, got {}",
            opts.resolution
        )));
    }
    if opts.input_channels == 0 || opts.num_classes == 0 {
        return Err(Error::Config(
            "input channels and class count must be positive".into(),
        ));
    }
    if !(opts.width_mult >= 1.0) || !(opts.depth_mult >= 1.0) {
        return Err(Error::Config(format!(
            "scaling multipliers must be at least 1.0, got width={} depth={}",
            opts.width_mult, opts.depth_mult
        )));
    }
    let mut spec = ModelSpec {
        stages: Vec::new(),
        input_resolution: opts.resolution,
        input_channels: opts.input_channels,
        num_classes: opts.num_classes,
        width_mult: opts.width_mult,
        depth_mult: opts.depth_mult,
        angles: opts.angles,
        phases: opts.phases,
        include_order0: opts.include_order0,
    };
    let repeats = opts.depth_mult.ceil() as usize;
    let mut c_prev = opts.input_channels;
    for row in table_rows() {
        let c_out = round_channels(row.channels, opts.width_mult);
        let name = format!("stage{:02}", row.row);
        match row.kind {
            RowKind::Stem => {
                spec.stages.push(Stage {
                    name,
                    kind: StageKind::Stem {
                        c_in: c_prev,
                        c_out,
                    },
                });
                c_prev = c_out;
            }
            RowKind::MBConv { expansion } => {
                for rep in 0..repeats {
                    let first = rep == 0;
                    let m = MBConvSpec {
                        expansion,
                        kernel: row.kernel,
                        stride: if first { row.stride } else { 1 },
                        c_in: if first { c_prev } else { c_out },
                        c_out,
                        se_reduction: opts.se_reduction,
                        survival_p: opts.survival_p,
                    };
                    let rep_name = if first {
                        name.clone()
                    } else {
                        format!("{name}.rep{rep}")
                    };
                    spec.stages.push(Stage {
                        name: rep_name,
                        kind: StageKind::MBConv(m),
                    });
                }
                c_prev = c_out;
            }
            RowKind::Fusion { slot } => {
                let Some((variant, subvariant)) = opts.fusion else {
                    continue;
                };
                let j = opts.fusion_j[slot];
                let c_scat =
                    scattering_channel_count(&spec.scattering_config(j), opts.input_channels);
                let block = FusionBlockSpec {
                    variant,
                    subvariant,
                    c_net_in: c_prev,
                    c_scat_in: c_scat,
                    c_out,
                    se_reduction: opts.se_reduction,
                    dw_kernel: row.kernel,
                    survival_p: opts.survival_p,
                };
                spec.stages.push(Stage {
                    name,
                    kind: StageKind::Fusion { block, j },
                });
                c_prev = c_out;
            }
            RowKind::Head => {
                spec.stages.push(Stage {
                    name,
                    kind: StageKind::Head {
                        c_in: c_prev,
                        c_mid: c_out,
                        classes: opts.num_classes,
                    },
                });
            }
        }
    }
    static_shape_check(&spec)?;
    Ok(spec)
}

/// The eleven-row hybrid plan with fusion rows at J=2 and J=3.
pub fn build_default_spec(
    resolution: usize,
    num_classes: usize,
    variant: HfVariant,
    subvariant: HfSubvariant,
) -> Result<ModelSpec> {
    build_spec(&SpecOptions {
        resolution,
        num_classes,
        fusion: Some((variant, subvariant)),
        ..SpecOptions::default()
    })
}

/// The same plan with the fusion rows removed; the neighbouring MBConv rows
/// take over the channel transitions.
pub fn build_baseline_spec(resolution: usize, num_classes: usize) -> Result<ModelSpec> {
    build_spec(&SpecOptions {
        resolution,
        num_classes,
        fusion: None,
        ..SpecOptions::default()
    })
}

/// Predicted output (resolution, channels) of one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub operator: String,
    pub resolution: usize,
    pub channels: usize,
}

/// Walks the spec, validating stage compatibility and the fusion alignment
/// law, and returns the predicted per-stage shape table.
pub fn static_shape_check(spec: &ModelSpec) -> Result<Vec<StageShape>> {
    let mut table = Vec::with_capacity(spec.stages.len());
    let mut side = spec.input_resolution;
    let mut channels = spec.input_channels;
    for stage in &spec.stages {
        match &stage.kind {
            StageKind::Stem { c_in, .. } | StageKind::Head { c_in, .. } => {
                if *c_in != channels {
                    return Err(Error::Config(format!(
                        "{} expects {} input channels but receives {}",
                        stage.name, c_in, channels
                    )));
                }
            }
            StageKind::MBConv(m) => {
                m.validate()?;
                if m.c_in != channels {
                    return Err(Error::Config(format!(
                        "{} expects {} input channels but receives {}",
                        stage.name, m.c_in, channels
                    )));
                }
            }
            StageKind::Fusion { block, j } => {
                block.validate()?;
                if block.c_net_in != channels {
                    return Err(Error::Config(format!(
                        "{} expects {} input channels but receives {}",
                        stage.name, block.c_net_in, channels
                    )));
                }
                let expected = spec.input_resolution >> j;
                if expected << j != spec.input_resolution || side != expected {
                    return Err(Error::Config(format!(
                        "{} runs at side {side} but its J={j} scattering lands at {} (input {} / 2^{j})",
                        stage.name, expected, spec.input_resolution
                    )));
                }
                let want = scattering_channel_count(
                    &spec.scattering_config(*j),
                    spec.input_channels,
                );
                if block.c_scat_in != want {
                    return Err(Error::Config(format!(
                        "{} declares {} scattering channels but the config yields {want}",
                        stage.name, block.c_scat_in
                    )));
                }
            }
        }
        if side % stage.stride() != 0 {
            return Err(Error::Config(format!(
                "{} cannot stride {} over side {side}",
                stage.name,
                stage.stride()
            )));
        }
        side /= stage.stride();
        channels = stage.out_channels();
        table.push(StageShape {
            name: stage.name.clone(),
            operator: stage.operator(),
            resolution: side,
            channels,
        });
    }
    Ok(table)
}

/// Trainable scalar count of one MBConv row.
pub fn mbconv_param_count(m: &MBConvSpec) -> usize {
    let c_exp = m.c_exp();
    let hidden = m.se_hidden();
    let mut count = 0;
    if m.expansion > 1 {
        count += m.c_in * c_exp + 2 * c_exp;
    }
    count += m.kernel * m.kernel * c_exp + 2 * c_exp;
    count += c_exp * hidden + hidden + hidden * c_exp + c_exp;
    count += c_exp * m.c_out + 2 * m.c_out;
    count
}

/// Trainable scalar count of the whole spec, from the per-stage closed forms.
pub fn spec_param_count(spec: &ModelSpec) -> usize {
    spec.stages
        .iter()
        .map(|s| match &s.kind {
            StageKind::Stem { c_in, c_out } => c_in * 9 * c_out + 2 * c_out,
            StageKind::MBConv(m) => mbconv_param_count(m),
            StageKind::Fusion { block, .. } => hf_param_count(block),
            StageKind::Head {
                c_in,
                c_mid,
                classes,
            } => c_in * c_mid + 2 * c_mid + c_mid * classes + classes,
        })
        .sum()
}

fn register_mbconv(store: &mut ParamStore, m: &MBConvSpec, prefix: &str) -> Result<()> {
    m.validate()?;
    let c_exp = m.c_exp();
    if m.expansion > 1 {
        store.conv_init(
            &format!("{prefix}.expand.weight"),
            Shape::new(c_exp, m.c_in, 1, 1),
        )?;
        store.bn_init(&format!("{prefix}.bn_expand"), c_exp)?;
    }
    store.conv_init(
        &format!("{prefix}.dw.weight"),
        Shape::new(c_exp, 1, m.kernel, m.kernel),
    )?;
    store.bn_init(&format!("{prefix}.bn_dw"), c_exp)?;
    let hidden = m.se_hidden();
    store.conv_init(&format!("{prefix}.se.w1"), Shape::new(hidden, c_exp, 1, 1))?;
    store.const_init(
        &format!("{prefix}.se.b1"),
        Shape::new(1, hidden, 1, 1),
        0.0,
        true,
    )?;
    store.conv_init(&format!("{prefix}.se.w2"), Shape::new(c_exp, hidden, 1, 1))?;
    store.const_init(
        &format!("{prefix}.se.b2"),
        Shape::new(1, c_exp, 1, 1),
        0.0,
        true,
    )?;
    store.conv_init(
        &format!("{prefix}.pw.weight"),
        Shape::new(m.c_out, c_exp, 1, 1),
    )?;
    store.bn_init(&format!("{prefix}.bn_out"), m.c_out)
}

fn bn_stage(
    tape: &mut Tape,
    bind: &mut TapeBindings,
    stats: &mut Vec<(String, BnBatchStats)>,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let gamma = bind.var(tape, &format!("{prefix}.gamma"))?;
    let beta = bind.var(tape, &format!("{prefix}.beta"))?;
    let mean = bind.store().get(&format!("{prefix}.running_mean"))?.clone();
    let var = bind.store().get(&format!("{prefix}.running_var"))?.clone();
    let (y, batch) = tape.batch_norm(x, gamma, beta, &mean, &var, mode, BN_EPS)?;
    if let Some(batch) = batch {
        stats.push((prefix.to_string(), batch));
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn mbconv_forward(
    tape: &mut Tape,
    bind: &mut TapeBindings,
    stats: &mut Vec<(String, BnBatchStats)>,
    m: &MBConvSpec,
    prefix: &str,
    x: Var,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let mut y = x;
    if m.expansion > 1 {
        let w = bind.var(tape, &format!("{prefix}.expand.weight"))?;
        y = tape.conv2d(y, w, 1, 0)?;
        y = bn_stage(tape, bind, stats, &format!("{prefix}.bn_expand"), y, mode)?;
        y = tape.swish(y);
    }
    let dw = bind.var(tape, &format!("{prefix}.dw.weight"))?;
    y = tape.depthwise_conv2d(y, dw, m.stride, m.kernel / 2)?;
    y = bn_stage(tape, bind, stats, &format!("{prefix}.bn_dw"), y, mode)?;
    y = tape.swish(y);
    let w1 = bind.var(tape, &format!("{prefix}.se.w1"))?;
    let b1 = bind.var(tape, &format!("{prefix}.se.b1"))?;
    let w2 = bind.var(tape, &format!("{prefix}.se.w2"))?;
    let b2 = bind.var(tape, &format!("{prefix}.se.b2"))?;
    y = tape.squeeze_excitation(y, w1, b1, w2, b2)?;
    let pw = bind.var(tape, &format!("{prefix}.pw.weight"))?;
    y = tape.conv2d(y, pw, 1, 0)?;
    y = bn_stage(tape, bind, stats, &format!("{prefix}.bn_out"), y, mode)?;
    if m.has_skip() {
        y = tape.drop_connect(y, m.survival_p, mode, rng)?;
        y = tape.add(x, y)?;
    }
    Ok(y)
}

/// A spec plus its parameters and the wavelet banks its fusion rows need.
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    banks: BTreeMap<usize, WaveletFilterBank>,
}

/// Everything a forward pass leaves behind.
pub struct ForwardPass {
    /// `(N, num_classes, 1, 1)`.
    pub logits: Var,
    /// Parameter name → tape leaf, for gradient lookup and SGD.
    pub param_vars: HashMap<String, Var>,
    /// Scattering scale J → tape leaf of the coefficients fed to fusion.
    pub scat_vars: BTreeMap<usize, Var>,
    /// Batch statistics of every train-mode BN, keyed by BN prefix.
    pub bn_stats: Vec<(String, BnBatchStats)>,
    /// Stage name → output shape actually produced.
    pub stage_shapes: Vec<(String, Shape)>,
}

impl Model {
    /// Validates the spec, registers every parameter under `seed`, and
    /// builds one wavelet bank per fusion scale.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Model> {
        static_shape_check(&spec)?;
        let mut store = ParamStore::new(seed);
        for stage in &spec.stages {
            match &stage.kind {
                StageKind::Stem { c_in, c_out } => {
                    store.conv_init(
                        &format!("{}.conv.weight", stage.name),
                        Shape::new(*c_out, *c_in, 3, 3),
                    )?;
                    store.bn_init(&format!("{}.bn", stage.name), *c_out)?;
                }
                StageKind::MBConv(m) => register_mbconv(&mut store, m, &stage.name)?,
                StageKind::Fusion { block, .. } => {
                    hf_register(&mut store, block, &format!("{}.hf", stage.name))?
                }
                StageKind::Head {
                    c_in,
                    c_mid,
                    classes,
                } => {
                    store.conv_init(
                        &format!("{}.conv.weight", stage.name),
                        Shape::new(*c_mid, *c_in, 1, 1),
                    )?;
                    store.bn_init(&format!("{}.bn", stage.name), *c_mid)?;
                    store.conv_init(
                        &format!("{}.fc.weight", stage.name),
                        Shape::new(*classes, *c_mid, 1, 1),
                    )?;
                    store.const_init(
                        &format!("{}.fc.bias", stage.name),
                        Shape::new(1, *classes, 1, 1),
                        0.0,
                        true,
                    )?;
                }
            }
        }
        let mut banks = BTreeMap::new();
        // Filter support is capped by the image side, kept odd.
        let cap = if spec.input_resolution % 2 == 0 {
            spec.input_resolution - 1
        } else {
            spec.input_resolution
        };
        for j in spec.fusion_scales() {
            let params = MorletParams {
                support: cap,
                ..MorletParams::default()
            };
            banks.insert(j, build_filter_bank(j, spec.angles, spec.phases, &params)?);
        }
        Ok(Model { spec, store, banks })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bank(&self, j: usize) -> Result<&WaveletFilterBank> {
        self.banks
            .get(&j)
            .ok_or_else(|| Error::Usage(format!("model has no filter bank for J={j}")))
    }

    /// Scattering coefficients of `x` for every fusion scale.
    pub fn compute_scatterings(&self, x: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        for j in self.spec.fusion_scales() {
            let cfg = self.spec.scattering_config(j);
            let coeffs = scatter(x, self.bank(j)?, &cfg)?;
            out.insert(j, coeffs.coefficients);
        }
        Ok(out)
    }

    /// Runs the network. `scatterings` may carry precomputed coefficients
    /// (as produced by [`Model::compute_scatterings`]); otherwise they are
    /// computed here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        ablation: AblationMode,
        rng: &mut impl Rng,
        scatterings: Option<&BTreeMap<usize, Tensor>>,
    ) -> Result<ForwardPass> {
        let xs = x.shape();
        if xs.c != self.spec.input_channels
            || xs.h != self.spec.input_resolution
            || xs.w != self.spec.input_resolution
        {
            return Err(Error::Shape(format!(
                "model expects ({}, {res}, {res}) input planes, got {xs}",
                self.spec.input_channels,
                res = self.spec.input_resolution
            )));
        }
        let computed;
        let scats = match scatterings {
            Some(s) => s,
            None => {
                computed = self.compute_scatterings(x)?;
                &computed
            }
        };

        let mut bind = TapeBindings::new(&self.store);
        let mut stats = Vec::new();
        let mut stage_shapes = Vec::with_capacity(self.spec.stages.len());
        let mut scat_vars = BTreeMap::new();
        let mut y = tape.leaf(x.clone(), false);
        let mut logits = None;
        for stage in &self.spec.stages {
            let name = &stage.name;
            y = match &stage.kind {
                StageKind::Stem { .. } => {
                    let w = bind.var(tape, &format!("{name}.conv.weight"))?;
                    let mut v = tape.conv2d(y, w, 2, 1)?;
                    v = bn_stage(tape, &mut bind, &mut stats, &format!("{name}.bn"), v, mode)?;
                    tape.swish(v)
                }
                StageKind::MBConv(m) => {
                    mbconv_forward(tape, &mut bind, &mut stats, m, name, y, mode, rng)?
                }
                StageKind::Fusion { block, j } => {
                    let scat = scats.get(j).ok_or_else(|| {
                        Error::Usage(format!("missing precomputed scattering for J={j}"))
                    })?;
                    let scat_var = *scat_vars
                        .entry(*j)
                        .or_insert_with(|| tape.leaf(scat.clone(), true));
                    let (v, mut s) = hf_forward(
                        tape,
                        &mut bind,
                        block,
                        &format!("{name}.hf"),
                        y,
                        scat_var,
                        mode,
                        ablation,
                        BN_EPS,
                        rng,
                    )?;
                    stats.append(&mut s);
                    v
                }
                StageKind::Head { .. } => {
                    let w = bind.var(tape, &format!("{name}.conv.weight"))?;
                    let mut v = tape.conv2d(y, w, 1, 0)?;
                    v = bn_stage(tape, &mut bind, &mut stats, &format!("{name}.bn"), v, mode)?;
                    v = tape.swish(v);
                    stage_shapes.push((name.clone(), tape.value(v).shape()));
                    v = tape.global_avg_pool(v);
                    let fw = bind.var(tape, &format!("{name}.fc.weight"))?;
                    let fb = bind.var(tape, &format!("{name}.fc.bias"))?;
                    let out = tape.fully_connected(v, fw, fb)?;
                    logits = Some(out);
                    out
                }
            };
            if !matches!(stage.kind, StageKind::Head { .. }) {
                stage_shapes.push((name.clone(), tape.value(y).shape()));
            }
        }
        let logits = logits
            .ok_or_else(|| Error::Config("model spec has no head stage".into()))?;
        Ok(ForwardPass {
            logits,
            param_vars: bind.bound().clone(),
            scat_vars,
            bn_stats: stats,
            stage_shapes,
        })
    }

    /// Folds a forward pass's batch statistics into the running statistics.
    pub fn absorb_bn_stats(&mut self, stats: &[(String, BnBatchStats)]) -> Result<()> {
        for (prefix, batch) in stats {
            let c = batch.mean.len();
            let mean = Tensor::from_vec(Shape::new(1, c, 1, 1), batch.mean.clone())?;
            let var = Tensor::from_vec(Shape::new(1, c, 1, 1), batch.var.clone())?;
            self.store
                .update_running(&format!("{prefix}.running_mean"), &mean, BN_MOMENTUM)?;
            self.store
                .update_running(&format!("{prefix}.running_var"), &var, BN_MOMENTUM)?;
        }
        Ok(())
    }
}

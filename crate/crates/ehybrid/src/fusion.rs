//! Hybrid Fusion blocks: the junction where scattering coefficients enter
//! the convolutional trunk.
//!
//! A block takes the backbone features and the scattering features at one
//! resolution and runs: per-stream batch norm (variant dependent), optional
//! stream zeroing for ablations, channel concatenation, a depthwise 3x3
//! stage with BN and swish (variant dependent), squeeze-excitation over the
//! concatenated width, and a linear 1x1 projection with BN. Subvariants add
//! a skip connection from the network-feature input (1 and 3) and wrap the
//! main branch in DropConnect (3 only).
//!
//! Variants differ only in which stages exist:
//! `E` has everything, `H` drops the per-stream batch norms, `Z` drops the
//! depthwise stage. Parameter names depend solely on the block prefix, so
//! two variants sharing a stage initialize it identically under one seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::BnBatchStats;
use crate::params::{ParamStore, TapeBindings};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Shape;

/// Which stages the block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfVariant {
    /// Per-stream BN and the depthwise stage.
    E,
    /// No depthwise stage.
    Z,
    /// No per-stream BN.
    H,
}

/// Skip/DropConnect policy. Labels follow the model naming: 0 is plain,
/// 1 adds the skip connection, 3 adds the skip connection and DropConnect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfSubvariant {
    Plain0,
    Skip1,
    SkipDrop3,
}

impl HfSubvariant {
    pub fn label(&self) -> u8 {
        match self {
            HfSubvariant::Plain0 => 0,
            HfSubvariant::Skip1 => 1,
            HfSubvariant::SkipDrop3 => 3,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(HfSubvariant::Plain0),
            1 => Ok(HfSubvariant::Skip1),
            3 => Ok(HfSubvariant::SkipDrop3),
            other => Err(Error::Config(format!(
                "fusion subvariant must be 0, 1 or 3, got {other}"
            ))),
        }
    }

    pub fn has_skip(&self) -> bool {
        !matches!(self, HfSubvariant::Plain0)
    }
}

/// Stream zeroing for the ablation study. The disabled stream is multiplied
/// by zero after its batch norm and before concatenation; disabling the
/// network stream also silences the skip path, which belongs to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    None,
    ScatDisabled,
    NetDisabled,
}

/// Static description of one fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionBlockSpec {
    pub variant: HfVariant,
    pub subvariant: HfSubvariant,
    pub c_net_in: usize,
    pub c_scat_in: usize,
    pub c_out: usize,
    pub se_reduction: usize,
    /// Depthwise kernel side; only 3 is supported.
    pub dw_kernel: usize,
    pub survival_p: f64,
}

impl FusionBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_net_in == 0 || self.c_scat_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!(
                "fusion block channels must be positive, got net={} scat={} out={}",
                self.c_net_in, self.c_scat_in, self.c_out
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config(
                "fusion se_reduction must be at least 1".into(),
            ));
        }
        if self.dw_kernel != 3 {
            return Err(Error::Config(format!(
                "fusion depthwise kernel is fixed at 3, got {}",
                self.dw_kernel
            )));
        }
        if !(self.survival_p > 0.0 && self.survival_p <= 1.0) {
            return Err(Error::Config(format!(
                "fusion survival probability must be in (0, 1], got {}",
                self.survival_p
            )));
        }
        Ok(())
    }

    /// Channel width after concatenation.
    pub fn c_mid(&self) -> usize {
        self.c_net_in + self.c_scat_in
    }

    /// Hidden width of the squeeze-excitation bottleneck (floored, never
    /// below one).
    pub fn se_hidden(&self) -> usize {
        (self.c_mid() / self.se_reduction).max(1)
    }

    fn has_stream_bn(&self) -> bool {
        self.variant != HfVariant::H
    }

    fn has_depthwise(&self) -> bool {
        self.variant != HfVariant::Z
    }

    fn has_projection(&self) -> bool {
        self.subvariant.has_skip() && self.c_net_in != self.c_out
    }
}

/// Registers every parameter of one block under `prefix`.
pub fn hf_register(store: &mut ParamStore, spec: &FusionBlockSpec, prefix: &str) -> Result<()> {
    spec.validate()?;
    let c_mid = spec.c_mid();
    if spec.has_stream_bn() {
        store.bn_init(&format!("{prefix}.bn_net"), spec.c_net_in)?;
        store.bn_init(&format!("{prefix}.bn_scat"), spec.c_scat_in)?;
    }
    if spec.has_depthwise() {
        store.conv_init(
            &format!("{prefix}.dw.weight"),
            Shape::new(c_mid, 1, spec.dw_kernel, spec.dw_kernel),
        )?;
        store.bn_init(&format!("{prefix}.bn_dw"), c_mid)?;
    }
    let hidden = spec.se_hidden();
    store.conv_init(&format!("{prefix}.se.w1"), Shape::new(hidden, c_mid, 1, 1))?;
    store.const_init(
        &format!("{prefix}.se.b1"),
        Shape::new(1, hidden, 1, 1),
        0.0,
        true,
    )?;
    store.conv_init(&format!("{prefix}.se.w2"), Shape::new(c_mid, hidden, 1, 1))?;
    store.const_init(
        &format!("{prefix}.se.b2"),
        Shape::new(1, c_mid, 1, 1),
        0.0,
        true,
    )?;
    store.conv_init(
        &format!("{prefix}.pw.weight"),
        Shape::new(spec.c_out, c_mid, 1, 1),
    )?;
    store.bn_init(&format!("{prefix}.bn_out"), spec.c_out)?;
    if spec.has_projection() {
        store.conv_init(
            &format!("{prefix}.skip.weight"),
            Shape::new(spec.c_out, spec.c_net_in, 1, 1),
        )?;
    }
    Ok(())
}

/// Exact trainable scalar count of one block.
pub fn hf_param_count(spec: &FusionBlockSpec) -> usize {
    let c_mid = spec.c_mid();
    let mut count = 0;
    if spec.has_stream_bn() {
        count += 2 * spec.c_net_in + 2 * spec.c_scat_in;
    }
    if spec.has_depthwise() {
        count += spec.dw_kernel * spec.dw_kernel * c_mid + 2 * c_mid;
    }
    let hidden = spec.se_hidden();
    count += c_mid * hidden + hidden + hidden * c_mid + c_mid;
    count += c_mid * spec.c_out + 2 * spec.c_out;
    if spec.has_projection() {
        count += spec.c_net_in * spec.c_out;
    }
    count
}

/// Runs one fusion block on the tape.
///
/// Returns the output variable plus the batch statistics of every batch
/// norm that ran in train mode, keyed by the BN prefix, for the caller to
/// fold into the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn hf_forward(
    tape: &mut Tape,
    bind: &mut TapeBindings,
    spec: &FusionBlockSpec,
    prefix: &str,
    net_feat: Var,
    scat_feat: Var,
    mode: Mode,
    ablation: AblationMode,
    bn_eps: f64,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<(String, BnBatchStats)>)> {
    spec.validate()?;
    let net_shape = tape.value(net_feat).shape();
    let scat_shape = tape.value(scat_feat).shape();
    if net_shape.n != scat_shape.n
        || net_shape.h != scat_shape.h
        || net_shape.w != scat_shape.w
    {
        return Err(Error::Shape(format!(
            "fusion streams must share batch and resolution, got net {net_shape} vs scat {scat_shape}"
        )));
    }
    if net_shape.c != spec.c_net_in || scat_shape.c != spec.c_scat_in {
        return Err(Error::Shape(format!(
            "fusion streams ({}, {}) do not match the block spec ({}, {})",
            net_shape.c, scat_shape.c, spec.c_net_in, spec.c_scat_in
        )));
    }

    let mut stats = Vec::new();
    let bn = |tape: &mut Tape,
                  bind: &mut TapeBindings,
                  stats: &mut Vec<(String, BnBatchStats)>,
                  bn_prefix: String,
                  x: Var|
     -> Result<Var> {
        let gamma = bind.var(tape, &format!("{bn_prefix}.gamma"))?;
        let beta = bind.var(tape, &format!("{bn_prefix}.beta"))?;
        let mean = bind.store().get(&format!("{bn_prefix}.running_mean"))?.clone();
        let var = bind.store().get(&format!("{bn_prefix}.running_var"))?.clone();
        let (y, batch) = tape.batch_norm(x, gamma, beta, &mean, &var, mode, bn_eps)?;
        if let Some(batch) = batch {
            stats.push((bn_prefix, batch));
        }
        Ok(y)
    };

    let mut net_s = net_feat;
    let mut scat_s = scat_feat;
    if spec.has_stream_bn() {
        net_s = bn(tape, bind, &mut stats, format!("{prefix}.bn_net"), net_s)?;
        scat_s = bn(tape, bind, &mut stats, format!("{prefix}.bn_scat"), scat_s)?;
    }
    match ablation {
        AblationMode::None => {}
        AblationMode::ScatDisabled => scat_s = tape.scale(scat_s, 0.0),
        AblationMode::NetDisabled => net_s = tape.scale(net_s, 0.0),
    }
    let mut y = tape.concat_channels(&[net_s, scat_s])?;

    if spec.has_depthwise() {
        let dw = bind.var(tape, &format!("{prefix}.dw.weight"))?;
        y = tape.depthwise_conv2d(y, dw, 1, 1)?;
        y = bn(tape, bind, &mut stats, format!("{prefix}.bn_dw"), y)?;
        y = tape.swish(y);
    }

    let w1 = bind.var(tape, &format!("{prefix}.se.w1"))?;
    let b1 = bind.var(tape, &format!("{prefix}.se.b1"))?;
    let w2 = bind.var(tape, &format!("{prefix}.se.w2"))?;
    let b2 = bind.var(tape, &format!("{prefix}.se.b2"))?;
    y = tape.squeeze_excitation(y, w1, b1, w2, b2)?;

    let pw = bind.var(tape, &format!("{prefix}.pw.weight"))?;
    y = tape.conv2d(y, pw, 1, 0)?;
    y = bn(tape, bind, &mut stats, format!("{prefix}.bn_out"), y)?;

    if spec.subvariant.has_skip() {
        let skip_src = if ablation == AblationMode::NetDisabled {
            tape.scale(net_feat, 0.0)
        } else {
            net_feat
        };
        let skip = if spec.has_projection() {
            let proj = bind.var(tape, &format!("{prefix}.skip.weight"))?;
            tape.conv2d(skip_src, proj, 1, 0)?
        } else {
            skip_src
        };
        if spec.subvariant == HfSubvariant::SkipDrop3 {
            y = tape.drop_connect(y, spec.survival_p, mode, rng)?;
        }
        y = tape.add(skip, y)?;
    }
    Ok((y, stats))
}

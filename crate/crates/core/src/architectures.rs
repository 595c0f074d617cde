//! Declarative ENet / BoxENet layouts, a classic UNet, and the executable
//! networks built from them.
//!
//! A [`Network`] owns a [`ParamStore`] of named tensors plus batch-norm
//! running statistics. Each forward pass binds the parameters as tape leaves,
//! so the same code path serves training (recording tape) and inference
//! (no-grad tape).

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::boxconv::{self, BoxClamp};
use crate::error::{contract_err, Error, Result};
use crate::nn::{self, BatchNormState, ConvCfg, Mode, PoolIndices};
use crate::ops;
use crate::rng;
use crate::tensor::{Element, Init, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    Regular,
    Downsample,
    Dilated(usize),
}

/// One row of an ENet-family layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerRow {
    Downsampler { in_ch: usize, out_ch: usize },
    Bottleneck { in_ch: usize, out_ch: usize, kind: BottleneckKind },
    BottleneckBoxConv { in_ch: usize, out_ch: usize },
    Upsampler { in_ch: usize, out_ch: usize },
    FinalTransposedConv { in_ch: usize, out_ch: usize },
}

impl LayerRow {
    pub fn channels(&self) -> (usize, usize) {
        match *self {
            LayerRow::Downsampler { in_ch, out_ch }
            | LayerRow::Bottleneck { in_ch, out_ch, .. }
            | LayerRow::BottleneckBoxConv { in_ch, out_ch }
            | LayerRow::Upsampler { in_ch, out_ch }
            | LayerRow::FinalTransposedConv { in_ch, out_ch } => (in_ch, out_ch),
        }
    }
}

impl fmt::Display for LayerRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (i, o) = self.channels();
        match self {
            LayerRow::Downsampler { .. } => write!(f, "Downsampler({i}→{o})"),
            LayerRow::Bottleneck { kind: BottleneckKind::Regular, .. } => write!(f, "Bottleneck({i}→{o})"),
            LayerRow::Bottleneck { kind: BottleneckKind::Downsample, .. } => write!(f, "Bottleneck({i}→{o}, downsample)"),
            LayerRow::Bottleneck { kind: BottleneckKind::Dilated(d), .. } => write!(f, "Bottleneck({i}→{o}, dilation={d})"),
            LayerRow::BottleneckBoxConv { .. } => write!(f, "BottleneckBoxConv({i}→{o})"),
            LayerRow::Upsampler { .. } => write!(f, "Upsampler({i}→{o})"),
            LayerRow::FinalTransposedConv { .. } => write!(f, "ConvTranspose2d({i}→{o})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub rows: Vec<LayerRow>,
}

impl ArchitectureSpec {
    /// Checks that consecutive rows chain their channel widths and that
    /// every upsampler has a downsampling bottleneck to pair with.
    pub fn validate(&self) -> Result<()> {
        let mut pending = 0usize;
        for (k, pair) in self.rows.windows(2).enumerate() {
            if pair[0].channels().1 != pair[1].channels().0 {
                return contract_err(format!("rows {k} and {} do not chain: {} then {}", k + 1, pair[0], pair[1]));
            }
        }
        for row in &self.rows {
            match row {
                LayerRow::Bottleneck { kind: BottleneckKind::Downsample, .. } => pending += 1,
                LayerRow::Upsampler { .. } if pending == 0 => {
                    return contract_err(format!("{row} has no downsampling bottleneck to pair with"));
                }
                LayerRow::Upsampler { .. } => pending -= 1,
                _ => {}
            }
        }
        Ok(())
    }

    /// One row per line, as in the printed table.
    pub fn to_text(&self) -> String {
        self.rows.iter().map(|r| format!("{r}\n")).collect()
    }
}

pub fn enet_spec() -> ArchitectureSpec {
    enet_family("enet", |row| row)
}

/// ENet with the box-convolution bottleneck substituted at the marked rows.
pub fn boxenet_spec() -> ArchitectureSpec {
    enet_family("boxenet", |row| {
        let (in_ch, out_ch) = row.channels();
        LayerRow::BottleneckBoxConv { in_ch, out_ch }
    })
}

fn enet_family(name: &str, marked: impl Fn(LayerRow) -> LayerRow) -> ArchitectureSpec {
    use BottleneckKind::*;
    let b = |in_ch, out_ch, kind| LayerRow::Bottleneck { in_ch, out_ch, kind };
    let mut rows = vec![
        LayerRow::Downsampler { in_ch: 3, out_ch: 16 },
        b(16, 64, Downsample),
        b(64, 64, Regular),
        marked(b(64, 64, Regular)),
        b(64, 64, Regular),
        marked(b(64, 64, Regular)),
        b(64, 128, Downsample),
    ];
    for d in [2, 4, 8, 16, 2, 4, 8, 16] {
        rows.push(b(128, 128, Regular));
        rows.push(marked(b(128, 128, Dilated(d))));
    }
    rows.extend([
        LayerRow::Upsampler { in_ch: 128, out_ch: 64 },
        b(64, 64, Regular),
        b(64, 64, Regular),
        LayerRow::Upsampler { in_ch: 64, out_ch: 16 },
        b(16, 16, Regular),
        LayerRow::FinalTransposedConv { in_ch: 16, out_ch: 2 },
    ]);
    ArchitectureSpec { name: name.to_string(), rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "enet")]
    ENet,
    #[serde(rename = "boxenet")]
    BoxENet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::UNet, Arch::ENet, Arch::BoxENet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::UNet => "unet",
            Arch::ENet => "enet",
            Arch::BoxENet => "boxenet",
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn size_divisor(self) -> usize {
        match self {
            Arch::UNet => 16,
            Arch::ENet | Arch::BoxENet => 8,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Arch::UNet),
            "enet" => Ok(Arch::ENet),
            "boxenet" => Ok(Arch::BoxENet),
            other => contract_err(format!("unknown architecture {other:?} (expected unet, enet or boxenet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub arch: Arch,
    /// Scales every internal channel count; inputs and classes stay fixed.
    pub width_mult: f64,
    /// Nominal square input extent; sets the box-convolution radius.
    pub input_size: usize,
    pub seed: u64,
}

impl BuildConfig {
    pub fn new(arch: Arch) -> Self {
        Self { arch, width_mult: 1.0, input_size: 256, seed: 0 }
    }

    fn width(&self, c: usize) -> usize {
        ((c as f64 * self.width_mult).round() as usize).max(4)
    }
}

/// Dropout of ENet blocks before the second downsampling bottleneck.
pub const EARLY_DROPOUT: f64 = 0.01;
pub const DROPOUT: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;
/// Smallest box-convolution clamp radius, for tiny feature maps.
pub const MIN_BOX_RADIUS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    PreluSlope,
    Boxes { clamp: BoxClamp },
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Ordered, uniquely named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value: Arc::new(value) });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    /// Mutable access to a value; copies only if a tape still holds it.
    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var<T>> {
        self.params.iter().map(|p| tape.leaf_arc(p.value.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
    cfg: ConvCfg,
}

#[derive(Debug, Clone, Copy)]
struct ConvT {
    w: usize,
    b: Option<usize>,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    scale: usize,
    shift: usize,
    state: usize,
}

#[derive(Debug, Clone, Copy)]
enum Core {
    Conv(Conv),
    Boxes(usize),
}

#[derive(Debug, Clone)]
enum Unit {
    Initial {
        conv: Conv,
        norm: Norm,
        act: usize,
    },
    Bottleneck {
        reduce: Conv,
        n1: Norm,
        a1: usize,
        core: Core,
        n2: Norm,
        a2: usize,
        expand: Conv,
        n3: Norm,
        dropout: f64,
        act: usize,
        /// Extra zero channels on the pooled skip of a downsampling block.
        downsample: Option<usize>,
    },
    Upsampler {
        reduce: Conv,
        n1: Norm,
        a1: usize,
        up: ConvT,
        n2: Norm,
        a2: usize,
        expand: Conv,
        n3: Norm,
        dropout: f64,
        skip: Conv,
        skip_norm: Norm,
        act: usize,
    },
    Final(ConvT),
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

#[derive(Debug, Clone)]
enum Graph {
    ENet {
        units: Vec<Unit>,
    },
    UNet {
        down: Vec<DoubleConv>,
        bridge: DoubleConv,
        up: Vec<(ConvT, DoubleConv)>,
        head: Conv,
    },
}

/// An executable network with its parameters and batch-norm statistics.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: BuildConfig,
    spec: Option<ArchitectureSpec>,
    params: ParamStore<T>,
    bn: Vec<BatchNormState>,
    graph: Graph,
    /// Parameter-index ranges per printed layer.
    groups: Vec<(String, std::ops::Range<usize>)>,
}

struct Builder<T> {
    store: ParamStore<T>,
    bn: Vec<BatchNormState>,
    seed: u64,
    prefix: String,
}

impl<T: Element> Builder<T> {
    fn init_seed(&self) -> u64 {
        rng::derive_seed_indexed(self.seed, "param", self.store.len() as u64)
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn conv(&mut self, part: &str, cin: usize, cout: usize, k: usize, cfg: ConvCfg, bias: bool) -> Result<Conv> {
        let init = Init::HeNormal { seed: self.init_seed(), fan_in: cin * k * k };
        let w = self.store.push(self.name(&format!("{part}.weight")), ParamKind::Weight, Tensor::create(&[cout, cin, k, k], init)?);
        let b = bias.then(|| self.store.push(self.name(&format!("{part}.bias")), ParamKind::Bias, Tensor::zeros(&[cout])));
        Ok(Conv { w, b, cfg })
    }

    fn conv_t(&mut self, part: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<ConvT> {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let init = Init::HeNormal { seed: self.init_seed(), fan_in };
        let w = self.store.push(self.name(&format!("{part}.weight")), ParamKind::Weight, Tensor::create(&[cin, cout, k, k], init)?);
        let b = bias.then(|| self.store.push(self.name(&format!("{part}.bias")), ParamKind::Bias, Tensor::zeros(&[cout])));
        Ok(ConvT { w, b, stride })
    }

    fn norm(&mut self, part: &str, c: usize) -> Norm {
        let scale = self.store.push(self.name(&format!("{part}.scale")), ParamKind::BnScale, Tensor::full(&[c], T::one()));
        let shift = self.store.push(self.name(&format!("{part}.shift")), ParamKind::BnShift, Tensor::zeros(&[c]));
        self.bn.push(BatchNormState::new(c));
        Norm { scale, shift, state: self.bn.len() - 1 }
    }

    fn prelu(&mut self, part: &str, c: usize) -> usize {
        self.store.push(self.name(&format!("{part}.slope")), ParamKind::PreluSlope, Tensor::full(&[c], T::from_f64(PRELU_INIT)))
    }

    fn boxes(&mut self, part: &str, planes: usize, extent: usize) -> Result<usize> {
        let radius = (extent as f64).max(MIN_BOX_RADIUS);
        let clamp = BoxClamp { delta_min: BoxClamp::DELTA_MIN, radius };
        let t = boxconv::init_boxes(self.init_seed(), planes, 1, radius / 2.0, clamp.delta_min)?;
        Ok(self.store.push(self.name(&format!("{part}.boxes")), ParamKind::Boxes { clamp }, t))
    }
}

fn one_by_one() -> ConvCfg {
    ConvCfg::default()
}

impl<T: Element> Network<T> {
    pub fn build(config: BuildConfig) -> Result<Self> {
        if !(config.width_mult > 0.0 && config.width_mult.is_finite()) {
            return contract_err(format!("width multiplier must be positive, got {}", config.width_mult));
        }
        let d = config.arch.size_divisor();
        if config.input_size == 0 || config.input_size % d != 0 {
            return contract_err(format!("{} needs an input size divisible by {d}, got {}", config.arch, config.input_size));
        }
        match config.arch {
            Arch::UNet => Self::build_unet(config),
            Arch::ENet => Self::build_enet(config, enet_spec()),
            Arch::BoxENet => Self::build_enet(config, boxenet_spec()),
        }
    }

    fn build_enet(config: BuildConfig, spec: ArchitectureSpec) -> Result<Self> {
        spec.validate()?;
        let mut bld = Builder { store: ParamStore { params: Vec::new() }, bn: Vec::new(), seed: config.seed, prefix: String::new() };
        let mut units = Vec::with_capacity(spec.rows.len());
        let mut groups = Vec::with_capacity(spec.rows.len());
        let mut extent = config.input_size;
        let mut early = true;
        for (idx, row) in spec.rows.iter().enumerate() {
            bld.prefix = format!("l{idx:02}");
            let start = bld.store.len();
            let (ri, ro) = row.channels();
            let cin = if idx == 0 { INPUT_CHANNELS } else { config.width(ri) };
            let cout = if matches!(row, LayerRow::FinalTransposedConv { .. }) { CLASSES } else { config.width(ro) };
            let mid = (cin / 4).max(1);
            if matches!(row, LayerRow::Bottleneck { kind: BottleneckKind::Downsample, .. }) && ri != 16 {
                early = false;
            }
            let dropout = if early { EARLY_DROPOUT } else { DROPOUT };
            let unit = match *row {
                LayerRow::Downsampler { .. } => {
                    if cout <= cin {
                        return contract_err(format!("downsampler needs more than {cin} output channels, got {cout}"));
                    }
                    extent /= 2;
                    let conv = bld.conv("conv", cin, cout - cin, 3, ConvCfg { stride: 2, padding: 1, dilation: 1 }, false)?;
                    Unit::Initial { conv, norm: bld.norm("bn", cout), act: bld.prelu("act", cout) }
                }
                LayerRow::Bottleneck { kind, .. } => {
                    let core_cfg = match kind {
                        BottleneckKind::Regular => ConvCfg::same(3, 1),
                        BottleneckKind::Dilated(d) => ConvCfg::same(3, d),
                        BottleneckKind::Downsample => ConvCfg { stride: 2, padding: 1, dilation: 1 },
                    };
                    let reduce = bld.conv("reduce", cin, mid, 1, one_by_one(), false)?;
                    let n1 = bld.norm("reduce_bn", mid);
                    let a1 = bld.prelu("reduce_act", mid);
                    let core = Core::Conv(bld.conv("core", mid, mid, 3, core_cfg, false)?);
                    let downsample = (kind == BottleneckKind::Downsample).then(|| {
                        extent /= 2;
                        cout.saturating_sub(cin)
                    });
                    if downsample.is_none() && cin != cout {
                        return contract_err(format!("{row}: identity skip needs equal widths"));
                    }
                    bottleneck_tail(&mut bld, reduce, n1, a1, core, mid, cout, dropout, downsample)?
                }
                LayerRow::BottleneckBoxConv { .. } => {
                    if cin != cout {
                        return contract_err(format!("{row}: identity skip needs equal widths"));
                    }
                    let reduce = bld.conv("reduce", cin, mid, 1, one_by_one(), false)?;
                    let n1 = bld.norm("reduce_bn", mid);
                    let a1 = bld.prelu("reduce_act", mid);
                    let core = Core::Boxes(bld.boxes("core", mid, extent)?);
                    bottleneck_tail(&mut bld, reduce, n1, a1, core, mid, cout, dropout, None)?
                }
                LayerRow::Upsampler { .. } => {
                    extent *= 2;
                    let reduce = bld.conv("reduce", cin, mid, 1, one_by_one(), false)?;
                    let n1 = bld.norm("reduce_bn", mid);
                    let a1 = bld.prelu("reduce_act", mid);
                    let up = bld.conv_t("up", mid, mid, 2, 2, false)?;
                    let n2 = bld.norm("up_bn", mid);
                    let a2 = bld.prelu("up_act", mid);
                    let expand = bld.conv("expand", mid, cout, 1, one_by_one(), false)?;
                    let n3 = bld.norm("expand_bn", cout);
                    let skip = bld.conv("skip", cin, cout, 1, one_by_one(), false)?;
                    let skip_norm = bld.norm("skip_bn", cout);
                    let act = bld.prelu("act", cout);
                    Unit::Upsampler { reduce, n1, a1, up, n2, a2, expand, n3, dropout, skip, skip_norm, act }
                }
                LayerRow::FinalTransposedConv { .. } => Unit::Final(bld.conv_t("deconv", cin, cout, 2, 2, true)?),
            };
            units.push(unit);
            groups.push((row.to_string(), start..bld.store.len()));
        }
        Ok(Self { config, spec: Some(spec), params: bld.store, bn: bld.bn, graph: Graph::ENet { units }, groups })
    }

    fn build_unet(config: BuildConfig) -> Result<Self> {
        let mut bld = Builder { store: ParamStore { params: Vec::new() }, bn: Vec::new(), seed: config.seed, prefix: String::new() };
        let mut groups = Vec::new();
        let widths: Vec<usize> = [64, 128, 256, 512, 1024].iter().map(|&c| config.width(c)).collect();
        let double = |bld: &mut Builder<T>, cin: usize, cout: usize| -> Result<DoubleConv> {
            let c1 = bld.conv("conv1", cin, cout, 3, ConvCfg::same(3, 1), false)?;
            let n1 = bld.norm("bn1", cout);
            let c2 = bld.conv("conv2", cout, cout, 3, ConvCfg::same(3, 1), false)?;
            let n2 = bld.norm("bn2", cout);
            Ok(DoubleConv { c1, n1, c2, n2 })
        };
        let mut down = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (lvl, &w) in widths[..4].iter().enumerate() {
            bld.prefix = format!("down{}", lvl + 1);
            let start = bld.store.len();
            down.push(double(&mut bld, cin, w)?);
            groups.push((format!("DoubleConv({cin}→{w})"), start..bld.store.len()));
            cin = w;
        }
        bld.prefix = "bridge".into();
        let start = bld.store.len();
        let bridge = double(&mut bld, widths[3], widths[4])?;
        groups.push((format!("DoubleConv({}→{})", widths[3], widths[4]), start..bld.store.len()));
        let mut up = Vec::new();
        for lvl in (0..4).rev() {
            bld.prefix = format!("up{}", lvl + 1);
            let start = bld.store.len();
            let (deep, skip) = (widths[lvl + 1], widths[lvl]);
            let t = bld.conv_t("up", deep, skip, 2, 2, true)?;
            let dc = double(&mut bld, 2 * skip, skip)?;
            up.push((t, dc));
            groups.push((format!("Up({deep}→{skip}) + DoubleConv({}→{skip})", 2 * skip), start..bld.store.len()));
        }
        bld.prefix = "head".into();
        let start = bld.store.len();
        let head = bld.conv("conv", widths[0], CLASSES, 1, one_by_one(), true)?;
        groups.push((format!("Conv1x1({}→{CLASSES})", widths[0]), start..bld.store.len()));
        Ok(Self { config, spec: None, params: bld.store, bn: bld.bn, graph: Graph::UNet { down, bridge, up, head }, groups })
    }

    pub fn config(&self) -> &BuildConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    /// Layer layout for the ENet family; `None` for UNet.
    pub fn spec(&self) -> Option<&ArchitectureSpec> {
        self.spec.as_ref()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Trainable element count per printed layer, in declaration order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        self.groups
            .iter()
            .map(|(label, r)| (label.clone(), r.clone().map(|i| self.params.get(i).value.numel()).sum()))
            .collect()
    }

    /// SHA-256 over the architecture identity and every parameter's name,
    /// kind and shape. Two networks accept each other's weights iff equal.
    pub fn spec_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.arch.name().as_bytes());
        h.update(self.config.width_mult.to_le_bytes());
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            h.update([0]);
            h.update(serde_json::to_string(&p.kind).expect("serializable").as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let d = self.config.arch.size_divisor();
        if c != INPUT_CHANNELS {
            return contract_err(format!("{} expects {INPUT_CHANNELS} input channels, got {c}", self.config.arch));
        }
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return contract_err(format!("{} needs spatial extents divisible by {d}, got {h}x{w}", self.config.arch));
        }
        Ok(())
    }

    /// Forward pass with explicitly supplied parameter vars and batch-norm
    /// states (one per layer, as in [`Network::bn_states`]).
    pub fn forward_with(
        &self,
        tape: &Tape<T>,
        params: &[Var<T>],
        bn: &mut [BatchNormState],
        x: &Var<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<Var<T>> {
        if bn.len() != self.bn.len() {
            return contract_err("batch-norm count does not match the network");
        }
        self.run(tape, params, bn, x, mode, seed)
    }

    fn run(&self, tape: &Tape<T>, params: &[Var<T>], bn: &mut [BatchNormState], x: &Var<T>, mode: Mode, seed: u64) -> Result<Var<T>> {
        self.check_input(x.value())?;
        if params.len() != self.params.len() {
            return contract_err("parameter count does not match the network");
        }
        let mut ctx = Ctx { tape, p: params, bn, mode, seed, layer: 0 };
        match &self.graph {
            Graph::ENet { units } => run_enet(&mut ctx, units, x),
            Graph::UNet { down, bridge, up, head } => run_unet(&mut ctx, down, bridge, up, head, x),
        }
    }

    /// Forward pass that updates this network's batch-norm statistics in
    /// train mode.
    pub fn forward(&mut self, tape: &Tape<T>, params: &[Var<T>], x: &Var<T>, mode: Mode, seed: u64) -> Result<Var<T>> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(tape, params, &mut bn, x, mode, seed);
        self.bn = bn;
        out
    }

    /// Eval-mode logits without recording anything.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let params = self.params.bind(&tape);
        let mut bn = self.bn.clone();
        let out = self.forward_with(&tape, &params, &mut bn, &Var::constant(x.clone()), Mode::Eval, 0)?;
        Ok(Arc::unwrap_or_clone(out.value_arc().clone()))
    }

    /// Projects every box parameter back onto its feasible set.
    pub fn clamp_boxes(&mut self) {
        for i in 0..self.params.len() {
            if let ParamKind::Boxes { clamp } = self.params.get(i).kind {
                boxconv::clamp_boxes(self.params.value_mut(i), clamp);
            }
        }
    }

    /// Copies values and statistics from `other`, which must share the
    /// parameter layout.
    pub fn load_state_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.spec_hash() != other.spec_hash() {
            return contract_err("networks have different layouts");
        }
        self.params = other.params.clone();
        self.bn = other.bn.clone();
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn bottleneck_tail<T: Element>(
    bld: &mut Builder<T>,
    reduce: Conv,
    n1: Norm,
    a1: usize,
    core: Core,
    mid: usize,
    cout: usize,
    dropout: f64,
    downsample: Option<usize>,
) -> Result<Unit> {
    let n2 = bld.norm("core_bn", mid);
    let a2 = bld.prelu("core_act", mid);
    let expand = bld.conv("expand", mid, cout, 1, one_by_one(), false)?;
    let n3 = bld.norm("expand_bn", cout);
    let act = bld.prelu("act", cout);
    Ok(Unit::Bottleneck { reduce, n1, a1, core, n2, a2, expand, n3, dropout, act, downsample })
}

struct Ctx<'a, T: Element> {
    tape: &'a Tape<T>,
    p: &'a [Var<T>],
    bn: &'a mut [BatchNormState],
    mode: Mode,
    seed: u64,
    layer: u64,
}

impl<T: Element> Ctx<'_, T> {
    fn conv(&self, x: &Var<T>, c: &Conv) -> Result<Var<T>> {
        nn::conv2d(self.tape, x, &self.p[c.w], c.b.map(|b| &self.p[b]), c.cfg)
    }

    fn conv_t(&self, x: &Var<T>, c: &ConvT) -> Result<Var<T>> {
        nn::conv_transpose2d(self.tape, x, &self.p[c.w], c.b.map(|b| &self.p[b]), c.stride, 0)
    }

    fn norm(&mut self, x: &Var<T>, n: &Norm) -> Result<Var<T>> {
        nn::batchnorm2d(self.tape, x, &self.p[n.scale], &self.p[n.shift], &mut self.bn[n.state], self.mode)
    }

    fn prelu(&self, x: &Var<T>, a: usize) -> Result<Var<T>> {
        nn::prelu(self.tape, x, &self.p[a])
    }

    fn dropout(&self, x: &Var<T>, p: f64) -> Result<Var<T>> {
        let seed = rng::derive_seed_indexed(self.seed, "dropout", self.layer);
        nn::spatial_dropout2d(self.tape, x, p, seed, self.mode)
    }
}

fn run_enet<T: Element>(ctx: &mut Ctx<'_, T>, units: &[Unit], x: &Var<T>) -> Result<Var<T>> {
    let mut h = x.clone();
    let mut stack: Vec<PoolIndices> = Vec::new();
    for (k, unit) in units.iter().enumerate() {
        ctx.layer = k as u64;
        h = match unit {
            Unit::Initial { conv, norm, act } => {
                let main = ctx.conv(&h, conv)?;
                let (pooled, _) = nn::maxpool2d(ctx.tape, &h)?;
                let cat = ops::concat_channels(ctx.tape, &main, &pooled)?;
                let y = ctx.norm(&cat, norm)?;
                ctx.prelu(&y, *act)?
            }
            Unit::Bottleneck { reduce, n1, a1, core, n2, a2, expand, n3, dropout, act, downsample } => {
                let m = ctx.conv(&h, reduce)?;
                let m = ctx.norm(&m, n1)?;
                let m = ctx.prelu(&m, *a1)?;
                let m = match core {
                    Core::Conv(c) => ctx.conv(&m, c)?,
                    Core::Boxes(b) => boxconv::boxconv(ctx.tape, &m, &ctx.p[*b])?,
                };
                let m = ctx.norm(&m, n2)?;
                let m = ctx.prelu(&m, *a2)?;
                let m = ctx.conv(&m, expand)?;
                let m = ctx.norm(&m, n3)?;
                let m = ctx.dropout(&m, *dropout)?;
                let skip = match downsample {
                    None => h.clone(),
                    Some(extra) => {
                        let (pooled, idx) = nn::maxpool2d(ctx.tape, &h)?;
                        stack.push(idx);
                        ops::pad_channels(ctx.tape, &pooled, *extra)?
                    }
                };
                let sum = ops::add(ctx.tape, &m, &skip)?;
                ctx.prelu(&sum, *act)?
            }
            Unit::Upsampler { reduce, n1, a1, up, n2, a2, expand, n3, dropout, skip, skip_norm, act } => {
                let idx = stack
                    .pop()
                    .ok_or_else(|| Error::Contract("upsampler has no paired pool indices".into()))?;
                let m = ctx.conv(&h, reduce)?;
                let m = ctx.norm(&m, n1)?;
                let m = ctx.prelu(&m, *a1)?;
                let m = ctx.conv_t(&m, up)?;
                let m = ctx.norm(&m, n2)?;
                let m = ctx.prelu(&m, *a2)?;
                let m = ctx.conv(&m, expand)?;
                let m = ctx.norm(&m, n3)?;
                let m = ctx.dropout(&m, *dropout)?;
                let s = ctx.conv(&h, skip)?;
                let s = ctx.norm(&s, skip_norm)?;
                let s = nn::max_unpool2d(ctx.tape, &s, &idx)?;
                let sum = ops::add(ctx.tape, &m, &s)?;
                ctx.prelu(&sum, *act)?
            }
            Unit::Final(t) => ctx.conv_t(&h, t)?,
        };
    }
    Ok(h)
}

fn double_conv<T: Element>(ctx: &mut Ctx<'_, T>, d: &DoubleConv, x: &Var<T>) -> Result<Var<T>> {
    let y = ctx.conv(x, &d.c1)?;
    let y = ctx.norm(&y, &d.n1)?;
    let y = ops::relu(ctx.tape, &y);
    let y = ctx.conv(&y, &d.c2)?;
    let y = ctx.norm(&y, &d.n2)?;
    Ok(ops::relu(ctx.tape, &y))
}

fn run_unet<T: Element>(
    ctx: &mut Ctx<'_, T>,
    down: &[DoubleConv],
    bridge: &DoubleConv,
    up: &[(ConvT, DoubleConv)],
    head: &Conv,
    x: &Var<T>,
) -> Result<Var<T>> {
    let mut skips = Vec::with_capacity(down.len());
    let mut h = x.clone();
    for d in down {
        let y = double_conv(ctx, d, &h)?;
        h = nn::maxpool2d(ctx.tape, &y)?.0;
        skips.push(y);
    }
    h = double_conv(ctx, bridge, &h)?;
    for (t, d) in up {
        let u = ctx.conv_t(&h, t)?;
        let s = skips.pop().expect("one skip per level");
        let cat = ops::concat_channels(ctx.tape, &s, &u)?;
        h = double_conv(ctx, d, &cat)?;
    }
    ctx.conv(&h, head)
}

/// Element count of a standalone convolution layer.
pub fn conv_parameter_count(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

/// Names must be unique; checked in tests and on load.
pub fn names_unique<T: Element>(store: &ParamStore<T>) -> bool {
    let mut seen = HashSet::new();
    store.iter().all(|p| seen.insert(p.name.as_str()))
}

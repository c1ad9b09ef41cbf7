//! Network builders: ASNet for CIFAR, AS-ResNet for 224x224 inputs and the
//! depthwise-convolution baselines.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::graph::{Graph, GraphBuilder, NodeId};
use crate::nn::layers::{
    he_normal, Add, BatchNorm, Conv2d, Depthwise, GlobalAvgPool, Linear, Pointwise, Relu, Shift,
};
use crate::shift::{init_shift, InitMode};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    AsnetCifar,
    AsResnet,
    DwBaseline,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::AsnetCifar => "asnet-cifar",
            Family::AsResnet => "as-resnet",
            Family::DwBaseline => "dw-baseline",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Family::AsnetCifar, Family::AsResnet, Family::DwBaseline]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown network family {s:?}")))
    }
}

/// Middle operation of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// 1x1, BN-ReLU, 3x3 depthwise, BN-ReLU, 1x1.
    Dw3Bn,
    /// 1x1, BN-ReLU, 3x3 depthwise, 1x1.
    Dw3,
    /// 1x1, BN-ReLU, ASL, 1x1.
    Asl,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [BlockVariant::Dw3Bn, BlockVariant::Dw3, BlockVariant::Asl];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Dw3Bn => "1B-DW3-B-1",
            BlockVariant::Dw3 => "1B-DW3-1",
            BlockVariant::Asl => "1B-ASL-1",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown block variant {s:?}")))
    }
}

/// Where a stride-2 block subsamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrideSite {
    /// In the middle spatial operation (ASL or depthwise conv).
    Middle,
    /// In the second 1x1 convolution.
    Conv,
}

impl StrideSite {
    pub fn name(self) -> &'static str {
        match self {
            StrideSite::Middle => "middle",
            StrideSite::Conv => "conv",
        }
    }
}

impl FromStr for StrideSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "middle" => Ok(StrideSite::Middle),
            "conv" => Ok(StrideSite::Conv),
            _ => Err(Error::Config(format!("unknown stride site {s:?}"))),
        }
    }
}

/// Depth of AS-ResNet: stem, 17 blocks of two 1x1 convs, fc.
pub const ASRESNET_DEPTH: usize = 36;
const ASRESNET_STAGES: [(usize, usize, usize); 5] = [(1, 1, 1), (1, 3, 2), (2, 4, 2), (4, 6, 2), (8, 3, 2)];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub family: Family,
    pub variant: BlockVariant,
    /// Counted without shift layers.
    pub depth: usize,
    pub width: usize,
    pub epsilon: usize,
    pub classes: usize,
    pub init_mode: InitMode,
    pub trainable: bool,
    pub input_size: usize,
    pub stride_site: StrideSite,
}

impl NetworkConfig {
    pub fn asnet_cifar(depth: usize, width: usize, epsilon: usize) -> Self {
        NetworkConfig {
            family: Family::AsnetCifar,
            variant: BlockVariant::Asl,
            depth,
            width,
            epsilon,
            classes: 10,
            init_mode: InitMode::UniformReal,
            trainable: true,
            input_size: 32,
            stride_site: StrideSite::Middle,
        }
    }

    pub fn as_resnet(width: usize) -> Self {
        NetworkConfig {
            family: Family::AsResnet,
            depth: ASRESNET_DEPTH,
            classes: 1000,
            input_size: 224,
            ..NetworkConfig::asnet_cifar(ASRESNET_DEPTH, width, 1)
        }
    }

    pub fn dw_baseline(variant: BlockVariant, depth: usize, width: usize, epsilon: usize) -> Self {
        NetworkConfig {
            family: Family::DwBaseline,
            variant,
            ..NetworkConfig::asnet_cifar(depth, width, epsilon)
        }
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::AsnetCifar => NetworkConfig::asnet_cifar(20, 16, 1),
            Family::AsResnet => NetworkConfig::as_resnet(32),
            Family::DwBaseline => NetworkConfig::dw_baseline(BlockVariant::Dw3Bn, 20, 16, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.epsilon == 0 || self.classes == 0 || self.input_size == 0 {
            return bad("width, epsilon, classes and input_size must be positive".into());
        }
        match self.family {
            Family::AsResnet => {
                if self.depth != ASRESNET_DEPTH {
                    return bad(format!("as-resnet has a fixed depth of {ASRESNET_DEPTH}, got {}", self.depth));
                }
                if self.variant != BlockVariant::Asl {
                    return bad("as-resnet only uses 1B-ASL-1 blocks".into());
                }
            }
            Family::AsnetCifar | Family::DwBaseline => {
                if self.depth < 8 || !(self.depth - 2).is_multiple_of(6) {
                    return bad(format!("depth must be 6n+2 with n >= 1, got {}", self.depth));
                }
                if self.family == Family::AsnetCifar && self.variant != BlockVariant::Asl {
                    return bad("asnet-cifar only uses 1B-ASL-1 blocks".into());
                }
            }
        }
        Ok(())
    }

    /// Residual blocks per stage for the CIFAR families.
    pub fn blocks_per_stage(&self) -> usize {
        self.depth.saturating_sub(2) / 6
    }

    pub fn to_text(&self) -> String {
        format!(
            "family = {}\nvariant = {}\ndepth = {}\nwidth = {}\nepsilon = {}\nclasses = {}\n\
             init_mode = {}\ntrainable = {}\ninput_size = {}\nstride_site = {}\n",
            self.family,
            self.variant,
            self.depth,
            self.width,
            self.epsilon,
            self.classes,
            self.init_mode,
            self.trainable,
            self.input_size,
            self.stride_site.name()
        )
    }

    /// Parses `key = value` lines. `#` starts a comment. Keys not given take
    /// the family's defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let family = match pairs.iter().find(|(_, k, _)| k == "family") {
            Some((_, _, v)) => v.parse()?,
            None => return Err(Error::Config("missing key family".into())),
        };
        let mut cfg = NetworkConfig::default_for(family);
        for (line, k, v) in pairs {
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {line}: {k} must be a non-negative integer, got {v:?}")))
            };
            match k.as_str() {
                "family" => {}
                "variant" => cfg.variant = v.parse()?,
                "depth" => cfg.depth = num(&v)?,
                "width" => cfg.width = num(&v)?,
                "epsilon" => cfg.epsilon = num(&v)?,
                "classes" => cfg.classes = num(&v)?,
                "input_size" => cfg.input_size = num(&v)?,
                "init_mode" => cfg.init_mode = v.parse()?,
                "stride_site" => cfg.stride_site = v.parse()?,
                "trainable" => {
                    cfg.trainable = v
                        .parse()
                        .map_err(|_| Error::Config(format!("line {line}: trainable must be true or false")))?
                }
                other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NetworkConfig::parse(&text)
    }
}

/// The four shift treatments compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Grouped heuristic, frozen.
    GS,
    /// Rounded normal samples, frozen.
    SI,
    /// Normal samples, frozen.
    SR,
    /// Uniform samples, trained.
    TR,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::GS, AblationMode::SI, AblationMode::SR, AblationMode::TR];

    pub fn init_mode(self) -> InitMode {
        match self {
            AblationMode::GS => InitMode::GroupedHeuristic,
            AblationMode::SI => InitMode::SampledInteger,
            AblationMode::SR => InitMode::SampledReal,
            AblationMode::TR => InitMode::UniformReal,
        }
    }

    pub fn trainable(self) -> bool {
        self == AblationMode::TR
    }

    pub fn apply(self, cfg: &mut NetworkConfig) {
        cfg.init_mode = self.init_mode();
        cfg.trainable = self.trainable();
    }

    /// Maps an `(init, trainable)` pair back to its ablation row, if any.
    pub fn classify(init: InitMode, trainable: bool) -> Option<AblationMode> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.init_mode() == init && m.trainable() == trainable)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

struct Builder<T: Element> {
    g: GraphBuilder<T>,
    rng: ChaCha8Rng,
    cfg: NetworkConfig,
}

impl<T: Element> Builder<T> {
    fn new(cfg: &NetworkConfig, seed: u64) -> Self {
        Builder {
            g: GraphBuilder::new(3, cfg.input_size, cfg.input_size),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg: cfg.clone(),
        }
    }

    fn channels(&self, x: NodeId) -> usize {
        self.g.shape(x).c
    }

    fn bn_relu(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let c = self.channels(x);
        let bn = self.g.add(format!("{prefix}/bn"), BatchNorm::new(c), &[x])?;
        self.g.add(format!("{prefix}/relu"), Relu::new(), &[bn])
    }

    fn pointwise(&mut self, x: NodeId, name: String, out: usize, stride: usize) -> Result<NodeId> {
        let c = self.channels(x);
        let w = he_normal(out * c, c, &mut self.rng);
        self.g.add(name, Pointwise::new(out, c, stride, w), &[x])
    }

    fn shift(&mut self, x: NodeId, name: String, stride: usize) -> Result<NodeId> {
        let c = self.channels(x);
        let mut theta = init_shift::<T>(self.cfg.init_mode, c, self.rng.random())?;
        theta.trainable = self.cfg.trainable;
        self.g.add(name, Shift::new(theta, stride), &[x])
    }

    fn depthwise(&mut self, x: NodeId, name: String, stride: usize) -> Result<NodeId> {
        let c = self.channels(x);
        let w = he_normal(c * 9, 9, &mut self.rng);
        self.g.add(name, Depthwise::new(c, stride, w), &[x])
    }

    fn stem(&mut self, out: usize, stride: usize) -> Result<NodeId> {
        let x = self.g.input();
        let spec = ConvSpec::same3x3(out, self.channels(x), stride)?;
        let w = he_normal(out * spec.in_channels * 9, spec.in_channels * 9, &mut self.rng);
        let conv = self.g.add("stem/conv", Conv2d::new(spec, w), &[x])?;
        self.bn_relu(conv, "stem")
    }

    /// Pre-activation bottleneck: BN-ReLU, 1x1, BN-ReLU, middle op, 1x1, plus skip.
    fn block(&mut self, x: NodeId, name: &str, out: usize, stride: usize) -> Result<NodeId> {
        let cin = self.channels(x);
        let mid = self.cfg.epsilon * out;
        let (s_mid, s_conv) = match self.cfg.stride_site {
            StrideSite::Middle => (stride, 1),
            StrideSite::Conv => (1, stride),
        };
        let pre = self.bn_relu(x, &format!("{name}/pre"))?;
        let c1 = self.pointwise(pre, format!("{name}/conv1"), mid, 1)?;
        let a = self.bn_relu(c1, &format!("{name}/mid"))?;
        let m = match self.cfg.variant {
            BlockVariant::Asl => self.shift(a, format!("{name}/asl"), s_mid)?,
            BlockVariant::Dw3 => self.depthwise(a, format!("{name}/dw"), s_mid)?,
            BlockVariant::Dw3Bn => {
                let d = self.depthwise(a, format!("{name}/dw"), s_mid)?;
                self.bn_relu(d, &format!("{name}/post"))?
            }
        };
        let c2 = self.pointwise(m, format!("{name}/conv2"), out, s_conv)?;
        let skip = if cin != out || stride != 1 {
            self.pointwise(pre, format!("{name}/proj"), out, stride)?
        } else {
            x
        };
        self.g.add(format!("{name}/add"), Add::new(), &[c2, skip])
    }

    fn head(mut self, x: NodeId) -> Result<Graph<T>> {
        let a = self.bn_relu(x, "head")?;
        let p = self.g.add("head/avgpool", GlobalAvgPool::new(), &[a])?;
        let c = self.channels(p);
        let classes = self.cfg.classes;
        let w = he_normal(classes * c, c, &mut self.rng);
        let fc = self
            .g
            .add("head/fc", Linear::new(c, classes, w, vec![T::zero(); classes]), &[p])?;
        self.g.finish(fc)
    }
}

fn build_cifar<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Graph<T>> {
    cfg.validate()?;
    let mut b = Builder::<T>::new(cfg, seed);
    let mut x = b.stem(cfg.width, 1)?;
    for stage in 0..3 {
        let out = cfg.width << stage;
        for blk in 0..cfg.blocks_per_stage() {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            x = b.block(x, &format!("stage{}/block{}", stage + 1, blk + 1), out, stride)?;
        }
    }
    b.head(x)
}

/// Three-stage pre-activation network of ASL bottleneck blocks.
pub fn build_asnet_cifar<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Graph<T>> {
    if cfg.family != Family::AsnetCifar {
        return Err(Error::Config(format!("expected family asnet-cifar, got {}", cfg.family)));
    }
    build_cifar(cfg, seed)
}

/// ASNet skeleton with the middle block operation given by `variant`.
pub fn build_dw_baseline<T: Element>(variant: BlockVariant, cfg: &NetworkConfig, seed: u64) -> Result<Graph<T>> {
    let cfg = NetworkConfig {
        family: Family::DwBaseline,
        variant,
        ..cfg.clone()
    };
    build_cifar(&cfg, seed)
}

pub fn build_asresnet<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Graph<T>> {
    if cfg.family != Family::AsResnet {
        return Err(Error::Config(format!("expected family as-resnet, got {}", cfg.family)));
    }
    cfg.validate()?;
    let mut b = Builder::<T>::new(cfg, seed);
    let mut x = b.stem(cfg.width, 2)?;
    for (stage, &(mult, repeat, stride)) in ASRESNET_STAGES.iter().enumerate() {
        for blk in 0..repeat {
            let s = if blk == 0 { stride } else { 1 };
            x = b.block(x, &format!("stage{}/block{}", stage + 1, blk + 1), mult * cfg.width, s)?;
        }
    }
    b.head(x)
}

pub fn build<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Graph<T>> {
    match cfg.family {
        Family::AsnetCifar => build_asnet_cifar(cfg, seed),
        Family::AsResnet => build_asresnet(cfg, seed),
        Family::DwBaseline => build_dw_baseline(cfg.variant, cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{LayerKind, ParamRole};

    fn kinds(g: &Graph<f32>) -> Vec<LayerKind> {
        g.nodes().iter().filter_map(|n| n.kind()).collect()
    }

    #[test]
    fn asnet_20_16_1_parameter_count() {
        let g = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(20, 16, 1), 0).unwrap();
        // Hand count: stem 432 + 32, stages 1824 + 6688 + 25664, head 128 + 650.
        assert_eq!(g.param_count(), 35_418);
        assert_eq!(g.param_count_by_role(ParamRole::Shift), 2 * (3 * 16 + 3 * 32 + 3 * 64));
    }

    #[test]
    fn table_parameter_counts_within_counting_tolerance() {
        for (depth, width, eps, millions) in [(20, 16, 3, 0.1), (20, 16, 6, 0.19), (20, 46, 1, 0.28), (110, 16, 6, 1.2)] {
            let g = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(depth, width, eps), 0).unwrap();
            let m = g.param_count() as f64 / 1e6;
            assert!((m - millions).abs() <= 0.15 * millions, "{depth}/{width}/{eps}: {m}M vs {millions}M");
        }
    }

    #[test]
    fn every_asl_has_two_params_per_input_channel() {
        let g = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(20, 16, 3), 1).unwrap();
        let trace = g.shape_trace(1).unwrap();
        let mut seen = 0;
        for (i, node) in g.nodes().iter().enumerate() {
            if node.kind() == Some(LayerKind::Shift) {
                let c = trace[node.inputs[0]].1.c;
                assert_eq!(node.layer.as_ref().unwrap().params()[0].len(), 2 * c, "{}", trace[i].0);
                seen += 1;
            }
        }
        assert_eq!(seen, 9);
    }

    #[test]
    fn invalid_depth_is_config_error() {
        for depth in [0, 7, 19, 21] {
            let r = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(depth, 16, 1), 0);
            assert!(matches!(r, Err(Error::Config(_))), "depth {depth}");
        }
    }

    #[test]
    fn asresnet_shape_trace() {
        let g = build_asresnet::<f32>(&NetworkConfig::as_resnet(32), 0).unwrap();
        let trace = g.shape_trace(1).unwrap();
        let side = |name: &str| trace.iter().find(|(n, _)| n == name).unwrap().1.h;
        assert_eq!(trace[0].1.h, 224);
        assert_eq!(side("stem/conv"), 112);
        assert_eq!(side("stage1/block1/add"), 112);
        assert_eq!(side("stage2/block3/add"), 56);
        assert_eq!(side("stage3/block4/add"), 28);
        assert_eq!(side("stage4/block6/add"), 14);
        assert_eq!(side("stage5/block3/add"), 7);
        assert_eq!(side("head/avgpool"), 1);
        assert_eq!(trace.last().unwrap().1.c, 1000);
        let last_stage = trace.iter().find(|(n, _)| n == "stage5/block3/add").unwrap().1;
        assert_eq!(last_stage.c, 8 * 32);
    }

    #[test]
    fn dw_variants_differ_only_in_the_middle() {
        let cfg = NetworkConfig::asnet_cifar(8, 4, 1);
        let asl = build_dw_baseline::<f32>(BlockVariant::Asl, &cfg, 0).unwrap();
        let dw = build_dw_baseline::<f32>(BlockVariant::Dw3, &cfg, 0).unwrap();
        let dwb = build_dw_baseline::<f32>(BlockVariant::Dw3Bn, &cfg, 0).unwrap();
        let swap: Vec<LayerKind> = kinds(&asl)
            .into_iter()
            .map(|k| if k == LayerKind::Shift { LayerKind::Depthwise } else { k })
            .collect();
        assert_eq!(swap, kinds(&dw));
        let count = |g: &Graph<f32>, k| kinds(g).into_iter().filter(|&x| x == k).count();
        let blocks = 3;
        assert_eq!(count(&dwb, LayerKind::BatchNorm), count(&dw, LayerKind::BatchNorm) + blocks);
        assert_eq!(count(&dwb, LayerKind::Relu), count(&dw, LayerKind::Relu) + blocks);
        let out = |g: &Graph<f32>| g.shape_trace(2).unwrap().last().unwrap().1;
        assert_eq!(out(&asl), out(&dw));
        assert_eq!(out(&dw), out(&dwb));
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = NetworkConfig::dw_baseline(BlockVariant::Dw3, 14, 8, 2);
        cfg.init_mode = InitMode::SampledInteger;
        cfg.trainable = false;
        cfg.stride_site = StrideSite::Conv;
        let back = NetworkConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let short = NetworkConfig::parse("# minimal\nfamily = as-resnet\nwidth = 68  # wide\n").unwrap();
        assert_eq!(short, NetworkConfig::as_resnet(68));
    }

    #[test]
    fn config_errors() {
        for text in [
            "",
            "depth = 20",
            "family = vgg",
            "family = asnet-cifar\ncolour = red",
            "family = asnet-cifar\ndepth = twenty",
            "family = asnet-cifar\nwidth",
            "family = asnet-cifar\ndepth = 22",
            "family = as-resnet\ndepth = 20",
        ] {
            assert!(matches!(NetworkConfig::parse(text), Err(Error::Config(_))), "{text:?}");
        }
    }

    #[test]
    fn ablation_modes() {
        let mut cfg = NetworkConfig::asnet_cifar(8, 4, 1);
        AblationMode::GS.apply(&mut cfg);
        assert_eq!((cfg.init_mode, cfg.trainable), (InitMode::GroupedHeuristic, false));
        assert_eq!(AblationMode::classify(InitMode::UniformReal, true), Some(AblationMode::TR));
        assert_eq!(AblationMode::classify(InitMode::UniformReal, false), None);
        assert_eq!("sr".parse::<AblationMode>().unwrap(), AblationMode::SR);
    }

    #[test]
    fn builds_are_seeded() {
        let cfg = NetworkConfig::asnet_cifar(8, 4, 1);
        let a = build_asnet_cifar::<f32>(&cfg, 5).unwrap();
        let b = build_asnet_cifar::<f32>(&cfg, 5).unwrap();
        let c = build_asnet_cifar::<f32>(&cfg, 6).unwrap();
        let vals = |g: &Graph<f32>| g.params().flat_map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }
}

//! Model graphs: layer specs, the two miniature presets, parameter storage,
//! forward/backward execution, backbone freezing, and checkpointing.
//!
//! Presets are width/depth-reduced takes on MobileNetV2 (inverted residuals,
//! ReLU6) and EfficientNetB0 (the same skeleton with SiLU and
//! squeeze-excitation after each depthwise conv), sized to train on a CPU in
//! minutes while keeping each architecture's defining mechanism. Convolutions
//! inside models use "same" geometry (output extent `ceil(extent/stride)`),
//! which pads the bottom/right side one extra pixel on even extents; the
//! exact-divisibility contract of the public `conv2d_forward` cannot
//! downsample even extents with odd kernels.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, read_checkpoint_info, save_checkpoint, CheckpointInfo, CheckpointMeta};
pub use layers::Activation;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{he_init, Scalar, Tensor};
use layers::*;

pub const PRESET_MINI_MOBILENETV2: &str = "mini-mobilenetv2";
pub const PRESET_MINI_EFFICIENTNETB0: &str = "mini-efficientnetb0";

/// One layer of a model graph.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { in_ch: usize, out_ch: usize, k: usize, stride: usize },
    DepthwiseConv { ch: usize, k: usize, stride: usize },
    BatchNorm { ch: usize, momentum: f64, epsilon: f64 },
    Activation(Activation),
    SqueezeExcite { ch: usize, ratio: usize },
    GlobalAvgPool,
    Dense { in_features: usize, out_features: usize },
    Softmax,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: bool,
}

/// A run of layers, optionally wrapped in an identity skip (`out = f(x) + x`);
/// the skip requires stride 1 throughout and matching channel counts.
#[derive(Clone, Debug)]
pub struct Block {
    pub residual: bool,
    pub layers: Vec<LayerSpec>,
}

/// An ordered layer graph with its class count and expected input geometry.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Nominal square input size; forward accepts other sizes (the reduced
    /// geometry used by gradient checks, for example).
    pub input_hw: usize,
    pub blocks: Vec<Block>,
}

/// How a parameter tensor starts life.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Declaration of one parameter tensor: name, shape, initialization, and
/// whether the optimizer may touch it.
#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

fn layer_param_decls(layer: &LayerSpec, out: &mut Vec<ParamDecl>) {
    let t = layer.trainable;
    let name = |suffix: &str| format!("{}.{suffix}", layer.name);
    match &layer.kind {
        LayerKind::Conv { in_ch, out_ch, k, .. } => out.push(ParamDecl {
            name: name("w"),
            shape: vec![*out_ch, *in_ch, *k, *k],
            init: Init::He { fan_in: in_ch * k * k },
            trainable: t,
        }),
        LayerKind::DepthwiseConv { ch, k, .. } => out.push(ParamDecl {
            name: name("w"),
            shape: vec![*ch, 1, *k, *k],
            init: Init::He { fan_in: k * k },
            trainable: t,
        }),
        LayerKind::BatchNorm { ch, .. } => {
            out.push(ParamDecl { name: name("gamma"), shape: vec![*ch], init: Init::Ones, trainable: t });
            out.push(ParamDecl { name: name("beta"), shape: vec![*ch], init: Init::Zeros, trainable: t });
            // Running statistics are state, not optimizer targets.
            out.push(ParamDecl { name: name("rmean"), shape: vec![*ch], init: Init::Zeros, trainable: false });
            out.push(ParamDecl { name: name("rvar"), shape: vec![*ch], init: Init::Ones, trainable: false });
        }
        LayerKind::SqueezeExcite { ch, ratio } => {
            let cr = (ch / ratio).max(1);
            out.push(ParamDecl {
                name: name("fc1.w"),
                shape: vec![cr, *ch],
                init: Init::He { fan_in: *ch },
                trainable: t,
            });
            out.push(ParamDecl { name: name("fc1.b"), shape: vec![cr], init: Init::Zeros, trainable: t });
            out.push(ParamDecl {
                name: name("fc2.w"),
                shape: vec![*ch, cr],
                init: Init::He { fan_in: cr },
                trainable: t,
            });
            out.push(ParamDecl { name: name("fc2.b"), shape: vec![*ch], init: Init::Zeros, trainable: t });
        }
        LayerKind::Dense { in_features, out_features } => {
            out.push(ParamDecl {
                name: name("w"),
                shape: vec![*out_features, *in_features],
                init: Init::He { fan_in: *in_features },
                trainable: t,
            });
            out.push(ParamDecl { name: name("b"), shape: vec![*out_features], init: Init::Zeros, trainable: t });
        }
        LayerKind::Activation(_) | LayerKind::GlobalAvgPool | LayerKind::Softmax => {}
    }
}

impl ModelSpec {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers.len()).sum()
    }

    /// Every parameter tensor in forward order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        for layer in self.layers() {
            layer_param_decls(layer, &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_decls().iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    pub fn trainable_param_names(&self) -> Vec<String> {
        self.param_decls().into_iter().filter(|d| d.trainable).map(|d| d.name).collect()
    }

    /// Structural checks: channel chaining, odd kernels, residual typing, and
    /// a Softmax-terminated head of the right width.
    pub fn validate(&self) -> Result<()> {
        #[derive(PartialEq, Debug, Clone, Copy)]
        enum Stage {
            Spatial(usize),
            Flat(usize),
            Done,
        }
        let mut stage = Stage::Spatial(self.in_channels);
        let fail = |layer: &LayerSpec, msg: String| -> Result<()> {
            Err(Error::shape(format!("model {}: layer {}: {msg}", self.name, layer.name)))
        };
        for block in &self.blocks {
            let block_in = stage;
            for layer in &block.layers {
                if stage == Stage::Done {
                    return fail(layer, "layers after Softmax".into());
                }
                match (&layer.kind, stage) {
                    (LayerKind::Conv { in_ch, out_ch, k, stride }, Stage::Spatial(c)) => {
                        if *in_ch != c {
                            return fail(layer, format!("expects {in_ch} channels, gets {c}"));
                        }
                        if k % 2 == 0 || *stride == 0 {
                            return fail(layer, format!("kernel {k} must be odd, stride {stride} >= 1"));
                        }
                        stage = Stage::Spatial(*out_ch);
                    }
                    (LayerKind::DepthwiseConv { ch, k, stride }, Stage::Spatial(c)) => {
                        if *ch != c {
                            return fail(layer, format!("expects {ch} channels, gets {c}"));
                        }
                        if k % 2 == 0 || *stride == 0 {
                            return fail(layer, format!("kernel {k} must be odd, stride {stride} >= 1"));
                        }
                        if block.residual && *stride != 1 {
                            return fail(layer, "stride must be 1 inside a residual block".into());
                        }
                    }
                    (LayerKind::BatchNorm { ch, .. }, Stage::Spatial(c)) => {
                        if *ch != c {
                            return fail(layer, format!("normalizes {ch} channels, gets {c}"));
                        }
                    }
                    (LayerKind::SqueezeExcite { ch, ratio }, Stage::Spatial(c)) => {
                        if *ch != c {
                            return fail(layer, format!("gates {ch} channels, gets {c}"));
                        }
                        if *ratio == 0 {
                            return fail(layer, "ratio must be >= 1".into());
                        }
                    }
                    (LayerKind::Activation(_), Stage::Spatial(_) | Stage::Flat(_)) => {}
                    (LayerKind::GlobalAvgPool, Stage::Spatial(c)) => stage = Stage::Flat(c),
                    (LayerKind::Dense { in_features, out_features }, Stage::Flat(f)) => {
                        if *in_features != f {
                            return fail(layer, format!("expects {in_features} features, gets {f}"));
                        }
                        stage = Stage::Flat(*out_features);
                    }
                    (LayerKind::Softmax, Stage::Flat(f)) => {
                        if f != self.num_classes {
                            return fail(layer, format!("softmax over {f} values, expected {} classes", self.num_classes));
                        }
                        stage = Stage::Done;
                    }
                    (kind, st) => {
                        return fail(layer, format!("{kind:?} cannot follow stage {st:?}"));
                    }
                }
            }
            if block.residual && stage != block_in {
                return Err(Error::shape(format!(
                    "model {}: residual block must preserve shape ({block_in:?} -> {stage:?})",
                    self.name
                )));
            }
        }
        if stage != Stage::Done {
            return Err(Error::shape(format!("model {}: missing terminal Softmax", self.name)));
        }
        Ok(())
    }
}

struct PresetBuilder {
    blocks: Vec<Block>,
    act: Activation,
    se_ratio: Option<usize>,
    bn_momentum: f64,
    bn_epsilon: f64,
}

impl PresetBuilder {
    fn bn(&self, name: &str, ch: usize) -> LayerSpec {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::BatchNorm { ch, momentum: self.bn_momentum, epsilon: self.bn_epsilon },
            trainable: true,
        }
    }

    fn act(&self, name: &str) -> LayerSpec {
        LayerSpec { name: name.to_string(), kind: LayerKind::Activation(self.act), trainable: true }
    }

    fn inverted_residual(&mut self, idx: usize, in_ch: usize, out_ch: usize, stride: usize, expansion: usize) {
        let mid = in_ch * expansion;
        let p = format!("b{idx}");
        let mut layers = vec![
            LayerSpec {
                name: format!("{p}.expand"),
                kind: LayerKind::Conv { in_ch, out_ch: mid, k: 1, stride: 1 },
                trainable: true,
            },
            self.bn(&format!("{p}.expand_bn"), mid),
            self.act(&format!("{p}.expand_act")),
            LayerSpec {
                name: format!("{p}.dw"),
                kind: LayerKind::DepthwiseConv { ch: mid, k: 3, stride },
                trainable: true,
            },
            self.bn(&format!("{p}.dw_bn"), mid),
            self.act(&format!("{p}.dw_act")),
        ];
        if let Some(ratio) = self.se_ratio {
            layers.push(LayerSpec {
                name: format!("{p}.se"),
                kind: LayerKind::SqueezeExcite { ch: mid, ratio },
                trainable: true,
            });
        }
        layers.push(LayerSpec {
            name: format!("{p}.project"),
            kind: LayerKind::Conv { in_ch: mid, out_ch, k: 1, stride: 1 },
            trainable: true,
        });
        layers.push(self.bn(&format!("{p}.project_bn"), out_ch));
        let residual = stride == 1 && in_ch == out_ch;
        self.blocks.push(Block { residual, layers });
    }
}

/// Builds one of the two presets. The shared skeleton is: stem 3×3/s2 to
/// 8 channels, inverted-residual blocks with (out, stride, expansion) of
/// (16,1,2), (24,2,4), (24,1,4 residual), (32,2,4), (32,1,4 residual), a 1×1
/// conv to 64, global average pooling, and a dense classifier.
/// `mini-mobilenetv2` activates with ReLU6; `mini-efficientnetb0` uses SiLU
/// and adds SqueezeExcite(ratio 4) after each depthwise conv.
pub fn build_preset(name: &str, num_classes: usize, in_channels: usize) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("build_preset: need >= 2 classes, got {num_classes}")));
    }
    if in_channels != 1 && in_channels != 3 {
        return Err(Error::invalid(format!("build_preset: in_channels must be 1 or 3, got {in_channels}")));
    }
    let (act, se_ratio) = match name {
        PRESET_MINI_MOBILENETV2 => (Activation::Relu6, None),
        PRESET_MINI_EFFICIENTNETB0 => (Activation::Silu, Some(4)),
        other => return Err(Error::invalid(format!("unknown preset \"{other}\""))),
    };
    let mut b = PresetBuilder { blocks: Vec::new(), act, se_ratio, bn_momentum: 0.9, bn_epsilon: 1e-5 };

    b.blocks.push(Block {
        residual: false,
        layers: vec![
            LayerSpec {
                name: "stem.conv".into(),
                kind: LayerKind::Conv { in_ch: in_channels, out_ch: 8, k: 3, stride: 2 },
                trainable: true,
            },
            b.bn("stem.bn", 8),
            b.act("stem.act"),
        ],
    });
    for (i, (out_ch, stride, expansion)) in [(16, 1, 2), (24, 2, 4), (24, 1, 4), (32, 2, 4), (32, 1, 4)]
        .into_iter()
        .enumerate()
    {
        let in_ch = match i {
            0 => 8,
            1 => 16,
            2 => 24,
            3 => 24,
            _ => 32,
        };
        b.inverted_residual(i + 1, in_ch, out_ch, stride, expansion);
    }
    b.blocks.push(Block {
        residual: false,
        layers: vec![
            LayerSpec {
                name: "head.conv".into(),
                kind: LayerKind::Conv { in_ch: 32, out_ch: 64, k: 1, stride: 1 },
                trainable: true,
            },
            b.bn("head.bn", 64),
            b.act("head.act"),
            LayerSpec { name: "head.pool".into(), kind: LayerKind::GlobalAvgPool, trainable: true },
            LayerSpec {
                name: "head.fc".into(),
                kind: LayerKind::Dense { in_features: 64, out_features: num_classes },
                trainable: true,
            },
            LayerSpec { name: "head.softmax".into(), kind: LayerKind::Softmax, trainable: true },
        ],
    });

    let spec = ModelSpec {
        name: name.to_string(),
        num_classes,
        in_channels,
        input_hw: 224,
        blocks: b.blocks,
    };
    spec.validate()?;
    Ok(spec)
}

/// Marks everything except the final Dense classifier (and its Softmax) as
/// frozen. Frozen BatchNorm layers normalize with running statistics during
/// training and stop updating them.
pub fn freeze_backbone(spec: &ModelSpec) -> ModelSpec {
    freeze_backbone_with(spec, false)
}

/// [`freeze_backbone`], optionally leaving the last conv block trainable.
pub fn freeze_backbone_with(spec: &ModelSpec, unfreeze_last_block: bool) -> ModelSpec {
    let mut out = spec.clone();
    let n_blocks = out.blocks.len();
    for (bi, block) in out.blocks.iter_mut().enumerate() {
        for layer in &mut block.layers {
            let is_head_classifier =
                matches!(layer.kind, LayerKind::Dense { .. } | LayerKind::Softmax) && bi == n_blocks - 1;
            let in_unfrozen_block = unfreeze_last_block && bi == n_blocks - 2;
            layer.trainable = is_head_classifier || in_unfrozen_block;
        }
    }
    out
}

/// Named parameter tensors in model order.
#[derive(Clone, Debug)]
pub struct Params<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::shape(format!("missing parameter \"{name}\"")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::shape(format!("missing parameter \"{name}\""))),
        }
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }

    pub fn entry_mut(&mut self, i: usize) -> (&str, &mut Tensor<T>) {
        let (n, t) = &mut self.entries[i];
        (n.as_str(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Fresh parameters for a model: He-initialized weights (drawn from `rng` in
/// declaration order), zero biases/β/running means, unit γ/running variances.
pub fn init_params<T: Scalar>(spec: &ModelSpec, rng: &mut Rng) -> Result<Params<T>> {
    let mut params = Params { entries: Vec::new(), index: HashMap::new() };
    for decl in spec.param_decls() {
        let tensor = match decl.init {
            Init::He { fan_in } => he_init(&decl.shape, fan_in, rng)?,
            Init::Zeros => Tensor::zeros(decl.shape.clone()),
            Init::Ones => Tensor::full(decl.shape.clone(), T::one()),
        };
        params.push(decl.name, tensor);
    }
    Ok(params)
}

/// Redraws the parameters whose names start with `prefix` from their declared
/// initializers, leaving everything else untouched. Used to give a loaded
/// backbone a fresh classifier head.
pub fn reinit_params_matching<T: Scalar>(
    spec: &ModelSpec,
    params: &mut Params<T>,
    prefix: &str,
    rng: &mut Rng,
) -> Result<usize> {
    let mut hit = 0;
    for decl in spec.param_decls() {
        if !decl.name.starts_with(prefix) {
            continue;
        }
        let fresh = match decl.init {
            Init::He { fan_in } => he_init(&decl.shape, fan_in, rng)?,
            Init::Zeros => Tensor::zeros(decl.shape.clone()),
            Init::Ones => Tensor::full(decl.shape.clone(), T::one()),
        };
        *params.get_mut(&decl.name)? = fresh;
        hit += 1;
    }
    if hit == 0 {
        return Err(Error::invalid(format!("no parameters match prefix \"{prefix}\"")));
    }
    Ok(hit)
}

/// Per-parameter gradients aligned with [`Params`] order; `None` slots belong
/// to frozen or stateful (running statistic) entries.
#[derive(Debug)]
pub struct Grads<T: Scalar = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Grads { slots: (0..n).map(|_| None).collect() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, i: usize) -> Option<&Tensor<T>> {
        self.slots[i].as_ref()
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Option<Tensor<T>> {
        &mut self.slots[i]
    }

    fn set(&mut self, i: usize, g: Tensor<T>) {
        debug_assert!(self.slots[i].is_none(), "gradient slot {i} written twice");
        self.slots[i] = Some(g);
    }

    /// All gradient values are finite.
    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.all_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum LayerCache<T: Scalar> {
    Conv { x: Tensor<T> },
    Dw { x: Tensor<T> },
    Bn { x: Tensor<T>, cache: BnCache<T> },
    Act { x: Tensor<T> },
    Se { x: Tensor<T>, cache: SeCache<T> },
    Gap { h: usize, w: usize },
    Dense { x: Tensor<T> },
    Softmax,
}

/// Activations retained by a train-mode forward pass for the backward pass.
pub struct ForwardCache<T: Scalar = f32> {
    layers: Vec<LayerCache<T>>,
    batch: usize,
}

fn layer_shape_check<T: Scalar>(spec: &ModelSpec, layer: &LayerSpec, x: &Tensor<T>) -> Result<()> {
    let want = match layer.kind {
        LayerKind::Conv { in_ch, .. } => Some(in_ch),
        LayerKind::DepthwiseConv { ch, .. } => Some(ch),
        LayerKind::BatchNorm { ch, .. } => Some(ch),
        LayerKind::SqueezeExcite { ch, .. } => Some(ch),
        _ => None,
    };
    if let Some(want) = want {
        if x.shape().len() != 4 || x.shape()[1] != want {
            return Err(Error::shape(format!(
                "model {}: layer {}: input shape {:?} does not provide {want} channels",
                spec.name,
                layer.name,
                x.shape()
            )));
        }
    }
    if let LayerKind::Dense { in_features, .. } = layer.kind {
        if x.shape().len() != 2 || x.shape()[1] != in_features {
            return Err(Error::shape(format!(
                "model {}: layer {}: input shape {:?} does not provide {in_features} features",
                spec.name,
                layer.name,
                x.shape()
            )));
        }
    }
    Ok(())
}

fn check_model_input<T: Scalar>(spec: &ModelSpec, x: &Tensor<T>) -> Result<()> {
    match x.shape() {
        [_, c, h, w] if *c == spec.in_channels && h == w => Ok(()),
        other => Err(Error::shape(format!(
            "model {}: input shape {other:?}, expected [B, {}, H, H]",
            spec.name, spec.in_channels
        ))),
    }
}

/// Train-mode forward: trainable BatchNorm layers use batch statistics and
/// update their running estimates; returns Softmax probabilities plus the
/// cache the backward pass needs.
pub fn forward_train<T: Scalar>(
    spec: &ModelSpec,
    params: &mut Params<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_model_input(spec, x)?;
    let batch = x.shape()[0];
    let mut caches = Vec::with_capacity(spec.layer_count());
    let mut cur = x.clone();
    for block in &spec.blocks {
        let skip = block.residual.then(|| cur.clone());
        for layer in &block.layers {
            layer_shape_check(spec, layer, &cur)?;
            let (y, cache) = layer_forward(layer, params, cur, Mode::Train)?;
            caches.push(cache);
            cur = y;
        }
        if let Some(skip) = skip {
            add_assign(&mut cur, &skip)?;
        }
    }
    if !cur.all_finite() {
        return Err(Error::numeric(format!("model {}: non-finite output", spec.name)));
    }
    Ok((cur, ForwardCache { layers: caches, batch }))
}

/// Inference forward: every BatchNorm normalizes with running statistics and
/// nothing is mutated or cached.
pub fn forward_infer<T: Scalar>(spec: &ModelSpec, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_model_input(spec, x)?;
    let mut cur = x.clone();
    for block in &spec.blocks {
        let skip = block.residual.then(|| cur.clone());
        for layer in &block.layers {
            layer_shape_check(spec, layer, &cur)?;
            cur = layer_forward_infer(layer, params, cur)?;
        }
        if let Some(skip) = skip {
            add_assign(&mut cur, &skip)?;
        }
    }
    if !cur.all_finite() {
        return Err(Error::numeric(format!("model {}: non-finite output", spec.name)));
    }
    Ok(cur)
}

fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "residual skip: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (av, &bv) in a.data_mut().iter_mut().zip(b.data()) {
        *av = *av + bv;
    }
    Ok(())
}

fn bn_param_names(layer: &LayerSpec) -> (String, String, String, String) {
    (
        format!("{}.gamma", layer.name),
        format!("{}.beta", layer.name),
        format!("{}.rmean", layer.name),
        format!("{}.rvar", layer.name),
    )
}

fn layer_forward<T: Scalar>(
    layer: &LayerSpec,
    params: &mut Params<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    match &layer.kind {
        LayerKind::Conv { stride, .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let y = conv_forward(&x, w, *stride);
            Ok((y, LayerCache::Conv { x }))
        }
        LayerKind::DepthwiseConv { stride, .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let y = depthwise_forward(&x, w, *stride);
            Ok((y, LayerCache::Dw { x }))
        }
        LayerKind::BatchNorm { momentum, epsilon, .. } => {
            let (g_name, b_name, rm_name, rv_name) = bn_param_names(layer);
            let gamma = params.get(&g_name)?.data().to_vec();
            let beta = params.get(&b_name)?.data().to_vec();
            let batch_stats = mode == Mode::Train && layer.trainable;
            let (y, cache) = if batch_stats {
                let (mean, var) = bn_batch_stats(&x);
                let mom = crate::tensor::s::<T>(*momentum);
                let inv = crate::tensor::s::<T>(1.0 - *momentum);
                let rm = params.get_mut(&rm_name)?;
                for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = mom * *r + inv * m;
                }
                let rv = params.get_mut(&rv_name)?;
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = mom * *r + inv * v;
                }
                bn_apply(&x, &gamma, &beta, mean, &var, *epsilon, true)
            } else {
                let mean = params.get(&rm_name)?.data().to_vec();
                let var = params.get(&rv_name)?.data().to_vec();
                bn_apply(&x, &gamma, &beta, mean, &var, *epsilon, false)
            };
            Ok((y, LayerCache::Bn { x, cache }))
        }
        LayerKind::Activation(a) => {
            let y = activation_forward(*a, &x);
            Ok((y, LayerCache::Act { x }))
        }
        LayerKind::SqueezeExcite { .. } => {
            let fc1_w = params.get(&format!("{}.fc1.w", layer.name))?.clone();
            let fc1_b = params.get(&format!("{}.fc1.b", layer.name))?.data().to_vec();
            let fc2_w = params.get(&format!("{}.fc2.w", layer.name))?.clone();
            let fc2_b = params.get(&format!("{}.fc2.b", layer.name))?.data().to_vec();
            let (y, cache) = se_forward(&x, &fc1_w, &fc1_b, &fc2_w, &fc2_b);
            Ok((y, LayerCache::Se { x, cache }))
        }
        LayerKind::GlobalAvgPool => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let y = gap_forward(&x);
            Ok((y, LayerCache::Gap { h, w }))
        }
        LayerKind::Dense { .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let b = params.get(&format!("{}.b", layer.name))?;
            let y = dense_forward(&x, w, b.data());
            Ok((y, LayerCache::Dense { x }))
        }
        LayerKind::Softmax => {
            let y = softmax_forward(&x);
            Ok((y, LayerCache::Softmax))
        }
    }
}

fn layer_forward_infer<T: Scalar>(layer: &LayerSpec, params: &Params<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    match &layer.kind {
        LayerKind::BatchNorm { epsilon, .. } => {
            let (g_name, b_name, rm_name, rv_name) = bn_param_names(layer);
            let gamma = params.get(&g_name)?.data().to_vec();
            let beta = params.get(&b_name)?.data().to_vec();
            let mean = params.get(&rm_name)?.data().to_vec();
            let var = params.get(&rv_name)?.data().to_vec();
            let (y, _) = bn_apply(&x, &gamma, &beta, mean, &var, *epsilon, false);
            Ok(y)
        }
        LayerKind::Conv { stride, .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            Ok(conv_forward(&x, w, *stride))
        }
        LayerKind::DepthwiseConv { stride, .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            Ok(depthwise_forward(&x, w, *stride))
        }
        LayerKind::Activation(a) => Ok(activation_forward(*a, &x)),
        LayerKind::SqueezeExcite { .. } => {
            let fc1_w = params.get(&format!("{}.fc1.w", layer.name))?;
            let fc1_b = params.get(&format!("{}.fc1.b", layer.name))?;
            let fc2_w = params.get(&format!("{}.fc2.w", layer.name))?;
            let fc2_b = params.get(&format!("{}.fc2.b", layer.name))?;
            let (y, _) = se_forward(&x, fc1_w, fc1_b.data(), fc2_w, fc2_b.data());
            Ok(y)
        }
        LayerKind::GlobalAvgPool => Ok(gap_forward(&x)),
        LayerKind::Dense { .. } => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let b = params.get(&format!("{}.b", layer.name))?;
            Ok(dense_forward(&x, w, b.data()))
        }
        LayerKind::Softmax => Ok(softmax_forward(&x)),
    }
}

/// Position (in flattened layer order) of the earliest layer owning a
/// trainable parameter, if any.
fn first_trainable_pos(spec: &ModelSpec) -> Option<usize> {
    let mut tmp = Vec::new();
    for (pos, layer) in spec.layers().enumerate() {
        tmp.clear();
        layer_param_decls(layer, &mut tmp);
        if tmp.iter().any(|d| d.trainable) {
            return Some(pos);
        }
    }
    None
}

/// Exact gradients of the train-mode forward with respect to every trainable
/// parameter, given the gradient of the loss with respect to the pre-softmax
/// logits (the Softmax layer itself is gradient-transparent under this
/// convention). Frozen layers receive no gradient entries, and backpropagation
/// stops once no trainable parameter remains upstream.
pub fn backward<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Grads<T>> {
    if cache.layers.len() != spec.layer_count() {
        return Err(Error::shape(format!(
            "backward: cache holds {} layers, model {} has {}",
            cache.layers.len(),
            spec.name,
            spec.layer_count()
        )));
    }
    if grad_logits.shape() != [cache.batch, spec.num_classes] {
        return Err(Error::shape(format!(
            "backward: grad_logits shape {:?}, expected [{}, {}]",
            grad_logits.shape(),
            cache.batch,
            spec.num_classes
        )));
    }
    let mut grads = Grads::empty(params.len());
    let Some(stop_pos) = first_trainable_pos(spec) else {
        return Ok(grads);
    };

    let mut dy = grad_logits.clone();
    let mut pos = spec.layer_count();
    for block in spec.blocks.iter().rev() {
        let skip_grad = block.residual.then(|| dy.clone());
        for layer in block.layers.iter().rev() {
            pos -= 1;
            let need_dx = pos > stop_pos;
            dy = layer_backward(layer, params, &cache.layers[pos], dy, need_dx, &mut grads)?;
            if pos == stop_pos {
                return Ok(grads);
            }
        }
        if let Some(skip) = skip_grad {
            add_assign(&mut dy, &skip)?;
        }
    }
    Ok(grads)
}

fn grad_index<T: Scalar>(params: &Params<T>, name: &str) -> Result<usize> {
    params
        .index_of(name)
        .ok_or_else(|| Error::shape(format!("missing parameter \"{name}\"")))
}

fn layer_backward<T: Scalar>(
    layer: &LayerSpec,
    params: &Params<T>,
    cache: &LayerCache<T>,
    dy: Tensor<T>,
    need_dx: bool,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let mismatch = || Error::shape(format!("backward: cache/model mismatch at layer {}", layer.name));
    match (&layer.kind, cache) {
        (LayerKind::Conv { stride, .. }, LayerCache::Conv { x }) => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let (dx, dw) = conv_backward(x, w, &dy, *stride, need_dx);
            if layer.trainable {
                grads.set(grad_index(params, &format!("{}.w", layer.name))?, dw);
            }
            Ok(dx.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        }
        (LayerKind::DepthwiseConv { stride, .. }, LayerCache::Dw { x }) => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let (dx, dw) = depthwise_backward(x, w, &dy, *stride, need_dx);
            if layer.trainable {
                grads.set(grad_index(params, &format!("{}.w", layer.name))?, dw);
            }
            Ok(dx.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        }
        (LayerKind::BatchNorm { .. }, LayerCache::Bn { x, cache }) => {
            let (g_name, b_name, _, _) = bn_param_names(layer);
            let gamma = params.get(&g_name)?.data();
            let (dx, bn_grads) = bn_backward(x, gamma, cache, &dy, layer.trainable);
            if let Some(bg) = bn_grads {
                grads.set(grad_index(params, &g_name)?, Tensor::new(vec![bg.dgamma.len()], bg.dgamma)?);
                grads.set(grad_index(params, &b_name)?, Tensor::new(vec![bg.dbeta.len()], bg.dbeta)?);
            }
            Ok(dx)
        }
        (LayerKind::Activation(a), LayerCache::Act { x }) => Ok(activation_backward(*a, x, &dy)),
        (LayerKind::SqueezeExcite { .. }, LayerCache::Se { x, cache }) => {
            let fc1_w = params.get(&format!("{}.fc1.w", layer.name))?;
            let fc2_w = params.get(&format!("{}.fc2.w", layer.name))?;
            let (dx, se_grads) = se_backward(x, fc1_w, fc2_w, cache, &dy, layer.trainable);
            if let Some(sg) = se_grads {
                grads.set(grad_index(params, &format!("{}.fc1.w", layer.name))?, sg.dfc1_w);
                grads.set(
                    grad_index(params, &format!("{}.fc1.b", layer.name))?,
                    Tensor::new(vec![sg.dfc1_b.len()], sg.dfc1_b)?,
                );
                grads.set(grad_index(params, &format!("{}.fc2.w", layer.name))?, sg.dfc2_w);
                grads.set(
                    grad_index(params, &format!("{}.fc2.b", layer.name))?,
                    Tensor::new(vec![sg.dfc2_b.len()], sg.dfc2_b)?,
                );
            }
            Ok(dx)
        }
        (LayerKind::GlobalAvgPool, LayerCache::Gap { h, w }) => Ok(gap_backward(&dy, *h, *w)),
        (LayerKind::Dense { .. }, LayerCache::Dense { x }) => {
            let w = params.get(&format!("{}.w", layer.name))?;
            let (dx, dw, db) = dense_backward(x, w, &dy, need_dx);
            if layer.trainable {
                grads.set(grad_index(params, &format!("{}.w", layer.name))?, dw);
                grads.set(grad_index(params, &format!("{}.b", layer.name))?, Tensor::new(vec![db.len()], db)?);
            }
            Ok(dx.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        }
        // Gradients arrive with respect to the pre-softmax logits.
        (LayerKind::Softmax, LayerCache::Softmax) => Ok(dy),
        _ => Err(mismatch()),
    }
}

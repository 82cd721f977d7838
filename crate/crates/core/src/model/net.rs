use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{SaBlock, SaConfig};
use super::spec::{ModelSpec, Variant, DEPTH};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::{bias_init, he_init_with};
use crate::kernels::ConvGeometry;
use crate::tensor::Tensor;

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar learnables.
    pub fn scalar_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.len() as u64).sum()
    }

    /// Adds every tensor to `g` as a gradient-tracking leaf, in order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }
}

/// Indices of one convolution's weight and bias within [`Parameters`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    weight: usize,
    bias: usize,
    geom: ConvGeometry,
    transpose: bool,
}

impl Conv {
    pub(crate) fn apply(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        let (w, b) = (params[self.weight], Some(params[self.bias]));
        if self.transpose {
            g.conv_transpose2d(x, w, b, self.geom)
        } else {
            g.conv2d(x, w, b, self.geom)
        }
    }
}

pub(crate) struct Builder {
    rng: ChaCha8Rng,
    params: Parameters,
    topology: Vec<String>,
}

impl Builder {
    pub(crate) fn new(rng: ChaCha8Rng) -> Self {
        Builder {
            rng,
            params: Parameters::new(),
            topology: Vec::new(),
        }
    }

    pub(crate) fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, geom: ConvGeometry) -> Conv {
        let w = he_init_with(&[c_out, c_in, k, k], c_in * k * k, &mut self.rng);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = self.params.push(format!("{name}.bias"), bias_init(c_out));
        let dil = if geom.dilation > 1 { format!(" dilation {}", geom.dilation) } else { String::new() };
        self.topology.push(format!("{name}: conv{k}x{k}{dil} {c_in}->{c_out}"));
        Conv { weight, bias, geom, transpose: false }
    }

    /// 2×2 stride-2 up-convolution, kernel layout `(c_in, c_out, 2, 2)`.
    fn up(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv {
        let w = he_init_with(&[c_in, c_out, 2, 2], c_in, &mut self.rng);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = self.params.push(format!("{name}.bias"), bias_init(c_out));
        self.topology.push(format!("{name}: upconv2x2 {c_in}->{c_out}"));
        let geom = ConvGeometry {
            stride: 2,
            dilation: 1,
            padding: 0,
        };
        Conv { weight, bias, geom, transpose: true }
    }

    fn double(&mut self, name: &str, c_in: usize, c_out: usize) -> DoubleConv {
        let same = ConvGeometry::same(3, 1);
        DoubleConv {
            first: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, same),
            second: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, same),
        }
    }

    pub(crate) fn finish(self) -> Parameters {
        self.params
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    first: Conv,
    second: Conv,
}

impl DoubleConv {
    fn apply(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        let h = self.first.apply(g, params, x)?;
        let h = g.relu(h);
        let h = self.second.apply(g, params, h)?;
        Ok(g.relu(h))
    }
}

#[derive(Debug, Clone, Default)]
struct Stream {
    blocks: Vec<DoubleConv>,
    attention: Vec<SaBlock>,
}

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<Conv>,
    blocks: Vec<DoubleConv>,
    head: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fusion {
    Concat,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gating {
    None,
    PerStream,
    MasterSupervised,
}

#[derive(Debug, Clone)]
enum Encoder {
    Single {
        stream: Stream,
        bottleneck: DoubleConv,
    },
    Late {
        master: Stream,
        assistant: Stream,
        master_bottleneck: DoubleConv,
        assistant_bottleneck: DoubleConv,
    },
    MultiLayer {
        master: Stream,
        assistant: Stream,
        bottleneck: DoubleConv,
        fusion: Fusion,
        gating: Gating,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Master,
    Assistant,
}

impl StreamKind {
    fn prefix(self) -> &'static str {
        match self {
            StreamKind::Master => "master",
            StreamKind::Assistant => "assistant",
        }
    }
}

/// One attention map produced during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMap {
    /// Encoder block, 1-based.
    pub block: usize,
    pub stream: StreamKind,
    pub map: Var,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Test hook: compute the attention maps but gate with a constant 1.
    pub unit_attention: bool,
}

pub struct ForwardOutput {
    /// Foreground probability, `(N, 1, H, W)`.
    pub prob: Var,
    /// Ordered by block, master before assistant within a block.
    pub attention: Vec<AttentionMap>,
    /// Parameter handles aligned with [`Model::params`].
    pub params: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Parameters,
    topology: Vec<String>,
    encoder: Encoder,
    decoder: Decoder,
}

/// Channels leaving each encoder level of a single stream.
fn stream_inputs(first_in: usize, widths: &[usize; DEPTH], fused: Option<&[usize; DEPTH]>) -> [usize; DEPTH] {
    core::array::from_fn(|i| match i {
        0 => first_in,
        _ => fused.unwrap_or(widths)[i - 1],
    })
}

impl Model {
    /// Builds the architecture described by `spec` with He-initialized
    /// weights drawn from a ChaCha8 stream seeded by `seed`.
    ///
    /// Attention parameters are drawn last, so a gated variant and its
    /// ungated counterpart share initial values for all common layers.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let enc = spec.encoder_channels;
        let cin = spec.in_channels_per_modality;
        let variant = spec.variant;

        let stream = |b: &mut Builder, kind: StreamKind, inputs: [usize; DEPTH]| Stream {
            blocks: (0..DEPTH)
                .map(|i| b.double(&format!("{}.enc{}", kind.prefix(), i + 1), inputs[i], enc[i]))
                .collect(),
            attention: Vec::new(),
        };

        let (mut encoder, skips) = match variant {
            Variant::Unet | Variant::UnetSa | Variant::EarlyFuse => {
                let first = if variant == Variant::EarlyFuse { 2 * cin } else { cin };
                let s = stream(&mut b, StreamKind::Master, stream_inputs(first, &enc, None));
                let bottleneck = b.double("bottleneck", enc[DEPTH - 1], spec.bottleneck_channels);
                (Encoder::Single { stream: s, bottleneck }, enc)
            }
            Variant::LateFuse => {
                let inputs = stream_inputs(cin, &enc, None);
                let master = stream(&mut b, StreamKind::Master, inputs);
                let assistant = stream(&mut b, StreamKind::Assistant, inputs);
                let half = spec.bottleneck_channels / 2;
                let master_bottleneck = b.double("master.bottleneck", enc[DEPTH - 1], half);
                let assistant_bottleneck = b.double("assistant.bottleneck", enc[DEPTH - 1], half);
                let e = Encoder::Late {
                    master,
                    assistant,
                    master_bottleneck,
                    assistant_bottleneck,
                };
                (e, enc)
            }
            _ => {
                let fusion = if variant == Variant::FuseAdd { Fusion::Sum } else { Fusion::Concat };
                let fused: [usize; DEPTH] = core::array::from_fn(|i| match fusion {
                    Fusion::Concat => 2 * enc[i],
                    Fusion::Sum => enc[i],
                });
                let gating = match variant {
                    Variant::FuseUnetSa => Gating::PerStream,
                    Variant::Proposed => Gating::MasterSupervised,
                    _ => Gating::None,
                };
                let master = stream(&mut b, StreamKind::Master, stream_inputs(cin, &enc, Some(&fused)));
                let assistant = stream(&mut b, StreamKind::Assistant, stream_inputs(cin, &enc, None));
                let bottleneck = b.double("bottleneck", fused[DEPTH - 1], spec.bottleneck_channels);
                let e = Encoder::MultiLayer {
                    master,
                    assistant,
                    bottleneck,
                    fusion,
                    gating,
                };
                (e, fused)
            }
        };

        let dec = spec.decoder_channels;
        let mut ups = Vec::with_capacity(DEPTH);
        let mut blocks = Vec::with_capacity(DEPTH);
        for i in (0..DEPTH).rev() {
            let below = if i == DEPTH - 1 { spec.bottleneck_channels } else { dec[i + 1] };
            ups.push(b.up(&format!("decoder.up{}", i + 1), below, dec[i]));
            blocks.push(b.double(&format!("decoder.dec{}", i + 1), skips[i] + dec[i], dec[i]));
        }
        ups.reverse();
        blocks.reverse();
        let head = b.conv("head", dec[0], 1, 1, ConvGeometry::UNIT);

        if let Some(sa) = spec.sa {
            let add_sites = |b: &mut Builder, s: &mut Stream, kind: StreamKind| -> Result<()> {
                for (i, &n) in enc.iter().enumerate() {
                    let cfg = SaConfig {
                        channels: n,
                        reduction: sa.reduction,
                        dilation: sa.dilation,
                    };
                    s.attention.push(SaBlock::build(b, &format!("{}.sa{}", kind.prefix(), i + 1), cfg)?);
                }
                Ok(())
            };
            match &mut encoder {
                Encoder::Single { stream, .. } => add_sites(&mut b, stream, StreamKind::Master)?,
                Encoder::MultiLayer {
                    master,
                    assistant,
                    gating,
                    ..
                } => {
                    add_sites(&mut b, master, StreamKind::Master)?;
                    if *gating == Gating::PerStream {
                        add_sites(&mut b, assistant, StreamKind::Assistant)?;
                    }
                }
                Encoder::Late { .. } => unreachable!("validated: late_fuse has no attention"),
            }
        }

        let topology = core::mem::take(&mut b.topology);
        Ok(Model {
            spec: spec.clone(),
            params: b.finish(),
            topology,
            encoder,
            decoder: Decoder { ups, blocks, head },
        })
    }

    /// Builds `spec` and replaces its parameters with `params`, which must
    /// match in names, order and shapes.
    pub fn from_parameters(spec: &ModelSpec, params: Parameters) -> Result<Model> {
        let mut model = Model::build(spec, 0)?;
        if params.names() != model.params.names() {
            return Err(Error::Config(format!(
                "parameter names do not match the {} layout",
                spec.variant
            )));
        }
        for ((name, have), want) in params.iter().zip(model.params.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: {:?} vs {:?}", have.shape(), want.shape()),
                ));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// One line per layer, input to output order of construction.
    pub fn topology(&self) -> &[String] {
        &self.topology
    }

    pub fn count_params(&self) -> u64 {
        self.params.scalar_count()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, master: Var, assistant: Option<Var>) -> Result<ForwardOutput> {
        self.forward_with(g, master, assistant, ForwardOptions::default())
    }

    pub fn forward_with<'a>(
        &'a self,
        g: &mut Graph<'a>,
        master: Var,
        assistant: Option<Var>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_inputs(g, master, assistant)?;
        let p = self.params.bind(g);
        let mut attention = Vec::new();
        let mut skips = Vec::with_capacity(DEPTH);

        let gate = |g: &mut Graph<'_>, f: Var, map: Var| -> Result<Var> {
            if opts.unit_attention {
                Ok(f)
            } else {
                g.broadcast_mul(f, map)
            }
        };

        let bottom = match &self.encoder {
            Encoder::Single { stream, bottleneck } => {
                let mut x = match assistant {
                    Some(a) => g.concat_channels(master, a)?,
                    None => master,
                };
                for (i, block) in stream.blocks.iter().enumerate() {
                    let mut f = block.apply(g, &p, x)?;
                    if let Some(sa) = stream.attention.get(i) {
                        let map = sa.apply(g, &p, f)?;
                        attention.push(AttentionMap { block: i + 1, stream: StreamKind::Master, map });
                        f = gate(g, f, map)?;
                    }
                    skips.push(f);
                    x = g.maxpool2d(f, 2)?;
                }
                bottleneck.apply(g, &p, x)?
            }
            Encoder::Late {
                master: ms,
                assistant: as_,
                master_bottleneck,
                assistant_bottleneck,
            } => {
                let (mut xm, mut xa) = (master, assistant.expect("checked"));
                for (bm, ba) in ms.blocks.iter().zip(&as_.blocks) {
                    let fm = bm.apply(g, &p, xm)?;
                    let fa = ba.apply(g, &p, xa)?;
                    skips.push(fm);
                    xm = g.maxpool2d(fm, 2)?;
                    xa = g.maxpool2d(fa, 2)?;
                }
                let bm = master_bottleneck.apply(g, &p, xm)?;
                let ba = assistant_bottleneck.apply(g, &p, xa)?;
                g.concat_channels(bm, ba)?
            }
            Encoder::MultiLayer {
                master: ms,
                assistant: as_,
                bottleneck,
                fusion,
                gating,
            } => {
                let (mut xm, mut xa) = (master, assistant.expect("checked"));
                for i in 0..DEPTH {
                    let mut fm = ms.blocks[i].apply(g, &p, xm)?;
                    let mut fa = as_.blocks[i].apply(g, &p, xa)?;
                    match gating {
                        Gating::None => {}
                        Gating::PerStream => {
                            let am = ms.attention[i].apply(g, &p, fm)?;
                            let aa = as_.attention[i].apply(g, &p, fa)?;
                            attention.push(AttentionMap { block: i + 1, stream: StreamKind::Master, map: am });
                            attention.push(AttentionMap { block: i + 1, stream: StreamKind::Assistant, map: aa });
                            fm = gate(g, fm, am)?;
                            fa = gate(g, fa, aa)?;
                        }
                        Gating::MasterSupervised => {
                            let a = ms.attention[i].apply(g, &p, fm)?;
                            attention.push(AttentionMap { block: i + 1, stream: StreamKind::Master, map: a });
                            fm = gate(g, fm, a)?;
                            fa = gate(g, fa, a)?;
                        }
                    }
                    let fused = match fusion {
                        Fusion::Concat => g.concat_channels(fm, fa)?,
                        Fusion::Sum => g.add(fm, fa)?,
                    };
                    skips.push(fused);
                    xm = g.maxpool2d(fused, 2)?;
                    if i + 1 < DEPTH {
                        xa = g.maxpool2d(fa, 2)?;
                    }
                }
                bottleneck.apply(g, &p, xm)?
            }
        };

        let mut x = bottom;
        for i in (0..DEPTH).rev() {
            let up = self.decoder.ups[i].apply(g, &p, x)?;
            let cat = g.concat_channels(skips[i], up)?;
            x = self.decoder.blocks[i].apply(g, &p, cat)?;
        }
        let logits = self.decoder.head.apply(g, &p, x)?;
        let prob = g.sigmoid(logits);
        Ok(ForwardOutput {
            prob,
            attention,
            params: p,
        })
    }

    fn check_inputs(&self, g: &Graph<'_>, master: Var, assistant: Option<Var>) -> Result<()> {
        const OP: &str = "forward";
        let [_, c, h, w] = g.value(master).dims4(OP)?;
        if c != self.spec.in_channels_per_modality {
            return Err(Error::shape(
                OP,
                format!("master has {c} channels, expected {}", self.spec.in_channels_per_modality),
            ));
        }
        let by = 1 << DEPTH;
        if h % by != 0 || w % by != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible { op: OP, h, w, by });
        }
        match (self.spec.variant.uses_assistant(), assistant) {
            (true, None) => Err(Error::Config(format!(
                "{} needs an assistant-modality input",
                self.spec.variant
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "{} is single-modality; assistant input not accepted",
                self.spec.variant
            ))),
            (true, Some(a)) if g.value(a).shape() != g.value(master).shape() => Err(Error::shape(
                OP,
                format!("assistant {:?} vs master {:?}", g.value(a).shape(), g.value(master).shape()),
            )),
            _ => Ok(()),
        }
    }

    /// Inference without gradient bookkeeping. Returns the probability map
    /// and the attention maps (block, stream, map).
    pub fn predict(
        &self,
        master: &Tensor,
        assistant: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<(usize, StreamKind, Tensor)>)> {
        let mut g = Graph::new();
        let m = g.input(master.clone());
        let a = assistant.map(|t| g.input(t.clone()));
        let out = self.forward(&mut g, m, a)?;
        let maps = out
            .attention
            .iter()
            .map(|am| (am.block, am.stream, g.value(am.map).clone()))
            .collect();
        Ok((g.value(out.prob).clone(), maps))
    }
}

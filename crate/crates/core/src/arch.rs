//! Symmetric autoencoder layout derived from an encoder path.
//!
//! Encoder layer `j` (0-based, `n` layers) is mirrored by decoder layer `n - 1 - j`:
//! the decoder layer uses the same kernel, outputs `F_j` channels and is a stride-2
//! transposed convolution exactly when encoder layer `j` downsamples. A skip layer's
//! post-ReLU output is added to the pre-ReLU output of its mirror. A final 3×3
//! convolution maps `F_0` channels back to the image channels.
//!
//! Architecture strings use `C(F,k)` for a plain layer and `CS(F,k)` for a layer with a
//! skip connection, joined by `-`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cgp::{EncoderLayer, EncoderSpec};
use crate::error::{Error, Result};

pub const CAE_FORMAT_VERSION: u32 = 1;
pub const OUTPUT_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Plain encoder layers downsample with stride 2.
    Inpainting,
    /// Every layer keeps the spatial size.
    Denoising,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Inpainting => "inpainting",
            TaskMode::Denoising => "denoising",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpainting" => Ok(TaskMode::Inpainting),
            "denoising" => Ok(TaskMode::Denoising),
            other => Err(Error::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    OutputConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Decoder layers only: 0-based index of the encoder layer whose activation is added.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_source: Option<usize>,
    /// Encoder layers only.
    #[serde(default)]
    pub skip_provider: bool,
}

impl LayerSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// Spatial output size for an input of `(h, w)`.
    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        match (self.kind, self.stride) {
            (LayerKind::TransposedConv, s) => {
                let op = s - 1;
                let p = self.padding();
                let grow = |x: usize| (x - 1) * s + self.kernel + op - 2 * p;
                (grow(h), grow(w))
            }
            (_, s) => {
                let p = self.padding();
                let shrink = |x: usize| (x + 2 * p - self.kernel) / s + 1;
                (shrink(h), shrink(w))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaeSpec {
    pub mode: TaskMode,
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub output_layer: LayerSpec,
}

impl CaeSpec {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_size.0, self.input_size.1)
    }

    /// Encoder, decoder and output layers in execution order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .chain(std::iter::once(&self.output_layer))
    }

    pub fn layer_count(&self) -> usize {
        self.encoder.len() + self.decoder.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LayerSpec::param_count).sum()
    }
}

/// Builds the full symmetric network for an encoder path.
pub fn expand(
    enc: &EncoderSpec,
    mode: TaskMode,
    input_channels: usize,
    input_size: (usize, usize),
) -> Result<CaeSpec> {
    if enc.is_empty() {
        return Err(Error::InvalidArchitecture("encoder has no layers".into()));
    }
    if input_channels == 0 || input_size.0 == 0 || input_size.1 == 0 {
        return Err(Error::InvalidArchitecture(format!(
            "degenerate input shape ({input_channels},{},{})",
            input_size.0, input_size.1
        )));
    }
    if let Some(l) = enc.layers.iter().find(|l| l.kernel % 2 == 0 || l.filters == 0) {
        return Err(Error::InvalidArchitecture(format!("bad layer {l}")));
    }
    if mode == TaskMode::Inpainting {
        let (mut h, mut w) = input_size;
        for (j, l) in enc.layers.iter().enumerate() {
            if l.skip {
                continue;
            }
            if h < 2 || w < 2 {
                return Err(Error::InvalidArchitecture(format!(
                    "bottleneck underflow: downsampling layer {} receives {h}x{w}",
                    j + 1
                )));
            }
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "downsampling layer {} receives odd size {h}x{w}; upsampling cannot restore it",
                    j + 1
                )));
            }
            h /= 2;
            w /= 2;
        }
    }

    let n = enc.len();
    let stride_of = |l: &EncoderLayer| match mode {
        TaskMode::Inpainting if !l.skip => 2,
        _ => 1,
    };

    let mut encoder = Vec::with_capacity(n);
    let mut in_ch = input_channels;
    for l in &enc.layers {
        encoder.push(LayerSpec {
            kind: LayerKind::Conv,
            in_channels: in_ch,
            out_channels: l.filters,
            kernel: l.kernel,
            stride: stride_of(l),
            skip_source: None,
            skip_provider: l.skip,
        });
        in_ch = l.filters;
    }

    let mut decoder = Vec::with_capacity(n);
    for j in (0..n).rev() {
        let mirror = &enc.layers[j];
        let stride = stride_of(mirror);
        decoder.push(LayerSpec {
            kind: if stride == 2 {
                LayerKind::TransposedConv
            } else {
                LayerKind::Conv
            },
            in_channels: in_ch,
            out_channels: mirror.filters,
            kernel: mirror.kernel,
            stride,
            skip_source: mirror.skip.then_some(j),
            skip_provider: false,
        });
        in_ch = mirror.filters;
    }

    let output_layer = LayerSpec {
        kind: LayerKind::OutputConv,
        in_channels: in_ch,
        out_channels: input_channels,
        kernel: OUTPUT_KERNEL,
        stride: 1,
        skip_source: None,
        skip_provider: false,
    };

    let cae = CaeSpec {
        mode,
        input_channels,
        input_size,
        encoder,
        decoder,
        output_layer,
    };
    trace_shapes(&cae)?;
    Ok(cae)
}

/// Whether `enc` expands to a consistent network for the given task and input.
pub fn is_buildable(
    enc: &EncoderSpec,
    mode: TaskMode,
    input_channels: usize,
    input_size: (usize, usize),
) -> bool {
    expand(enc, mode, input_channels, input_size).is_ok()
}

/// Per-layer output shapes in execution order (encoder, decoder, output layer).
pub fn trace_shapes(cae: &CaeSpec) -> Result<Vec<Shape>> {
    let n = cae.encoder.len();
    if cae.decoder.len() != n {
        return Err(Error::Shape(format!(
            "encoder has {n} layers but decoder has {}",
            cae.decoder.len()
        )));
    }
    let mut shapes = Vec::with_capacity(2 * n + 1);
    let mut cur = cae.input_shape();
    let check = |name: String, l: &LayerSpec, cur: Shape| -> Result<Shape> {
        if l.in_channels != cur.channels {
            return Err(Error::Shape(format!(
                "{name} expects {} input channels but receives {cur}",
                l.in_channels
            )));
        }
        if l.stride != 1 && l.stride != 2 {
            return Err(Error::Shape(format!("{name} has stride {}", l.stride)));
        }
        if cae.mode == TaskMode::Denoising && l.stride != 1 {
            return Err(Error::Shape(format!("{name} downsamples in denoising mode")));
        }
        if cur.height + 2 * l.padding() < l.kernel || cur.width + 2 * l.padding() < l.kernel {
            return Err(Error::Shape(format!("{name} kernel exceeds padded input {cur}")));
        }
        let (h, w) = l.output_hw((cur.height, cur.width));
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("{name} produces an empty map")));
        }
        Ok(Shape::new(l.out_channels, h, w))
    };

    for (j, l) in cae.encoder.iter().enumerate() {
        if l.skip_provider && l.stride != 1 {
            return Err(Error::Shape(format!(
                "encoder layer {} both downsamples and provides a skip",
                j + 1
            )));
        }
        cur = check(format!("encoder layer {}", j + 1), l, cur)?;
        shapes.push(cur);
    }
    for (i, l) in cae.decoder.iter().enumerate() {
        cur = check(format!("decoder layer {}", i + 1), l, cur)?;
        if let Some(src) = l.skip_source {
            let provider = cae.encoder.get(src).ok_or_else(|| {
                Error::Shape(format!(
                    "decoder layer {} reads skip from missing encoder layer {}",
                    i + 1,
                    src + 1
                ))
            })?;
            if !provider.skip_provider {
                return Err(Error::Shape(format!(
                    "decoder layer {} reads skip from encoder layer {} which provides none",
                    i + 1,
                    src + 1
                )));
            }
            if shapes[src] != cur {
                return Err(Error::Shape(format!(
                    "skip pair mismatch: encoder layer {} outputs {} but decoder layer {} outputs {cur}",
                    src + 1,
                    shapes[src],
                    i + 1
                )));
            }
        }
        shapes.push(cur);
    }
    cur = check("output layer".into(), &cae.output_layer, cur)?;
    shapes.push(cur);
    if cur != cae.input_shape() {
        return Err(Error::Shape(format!(
            "network output {cur} differs from input {}",
            cae.input_shape()
        )));
    }
    Ok(shapes)
}

pub fn arch_to_string(enc: &EncoderSpec) -> String {
    enc.to_string()
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for EncoderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(x) if x == c => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(x) => self.err(format!("expected '{c}', found '{x}'")),
            None => self.err(format!("expected '{c}', found end of input")),
        }
    }

    fn int(&mut self, what: &str) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.src[start..]
            .bytes()
            .take_while(u8::is_ascii_digit)
            .count();
        if digits == 0 {
            return self.err(format!("expected integer {what}"));
        }
        self.pos += digits;
        match self.src[start..self.pos].parse::<usize>() {
            Ok(v) => Ok(v),
            Err(_) => Err(Error::Parse {
                position: start,
                message: format!("{what} out of range"),
            }),
        }
    }

    fn layer(&mut self) -> Result<EncoderLayer> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() != Some('C') {
            return self.err("expected layer token 'C' or 'CS'");
        }
        self.pos += 1;
        let skip = if self.peek() == Some('S') {
            self.pos += 1;
            true
        } else {
            false
        };
        self.expect('(')?;
        let filters = self.int("filter count")?;
        self.expect(',')?;
        let kernel_pos = {
            self.skip_ws();
            self.pos
        };
        let kernel = self.int("kernel size")?;
        self.expect(')')?;
        if filters == 0 {
            return Err(Error::Parse {
                position: start,
                message: "filter count must be positive".into(),
            });
        }
        if kernel % 2 == 0 {
            return Err(Error::Parse {
                position: kernel_pos,
                message: format!("kernel size must be odd, got {kernel}"),
            });
        }
        Ok(EncoderLayer {
            filters,
            kernel,
            skip,
        })
    }
}

/// Parses `C(F,k)` / `CS(F,k)` layers joined by `-`. Whitespace between tokens is ignored.
pub fn parse_arch(text: &str) -> Result<EncoderSpec> {
    let mut sc = Scanner { src: text, pos: 0 };
    sc.skip_ws();
    if sc.peek().is_none() {
        return sc.err("empty architecture string");
    }
    let mut layers = vec![sc.layer()?];
    loop {
        sc.skip_ws();
        match sc.peek() {
            None => break,
            Some('-') => {
                sc.pos += 1;
                layers.push(sc.layer()?);
            }
            Some(c) => return sc.err(format!("expected '-' or end of input, found '{c}'")),
        }
    }
    Ok(EncoderSpec { layers })
}

#[derive(Serialize, Deserialize)]
struct CaeDoc {
    version: u32,
    cae: CaeSpec,
}

pub fn cae_to_text(cae: &CaeSpec) -> String {
    toml::to_string(&CaeDoc {
        version: CAE_FORMAT_VERSION,
        cae: cae.clone(),
    })
    .expect("cae document serializes")
}

pub fn cae_from_text(text: &str) -> Result<CaeSpec> {
    let doc: CaeDoc = toml::from_str(text).map_err(|e| Error::Format {
        what: "cae",
        message: e.to_string(),
    })?;
    if doc.version != CAE_FORMAT_VERSION {
        return Err(Error::Format {
            what: "cae",
            message: format!("unsupported version {}", doc.version),
        });
    }
    trace_shapes(&doc.cae)?;
    Ok(doc.cae)
}

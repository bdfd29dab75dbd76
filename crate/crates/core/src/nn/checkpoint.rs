//! Binary weight checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "ECAEWGT\0"
//! version      u32
//! mode         u8       0 = inpainting, 1 = denoising
//! channels     u32
//! height       u32
//! width        u32
//! n_layers     u32
//! per layer:   kind u8 (0 conv, 1 transposed, 2 output), in u32, out u32, kernel u32,
//!              stride u32, skip_source i32 (-1 for none), skip_provider u8
//! per layer:   weight f32[out*in*k*k], bias f32[out],
//!              m_weight, v_weight f32[out*in*k*k], m_bias, v_bias f32[out]
//! step         u64
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::network::{LayerParams, Moments, TrainableNetwork};
use crate::arch::{trace_shapes, CaeSpec, LayerKind, LayerSpec, TaskMode};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ECAEWGT\0";
pub const WEIGHTS_VERSION: u32 = 1;

fn fmt_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "weights",
        message: message.into(),
    }
}

fn io_err(e: std::io::Error) -> Error {
    fmt_err(e.to_string())
}

fn write_layer(w: &mut impl Write, l: &LayerSpec) -> std::io::Result<()> {
    w.write_u8(match l.kind {
        LayerKind::Conv => 0,
        LayerKind::TransposedConv => 1,
        LayerKind::OutputConv => 2,
    })?;
    for v in [l.in_channels, l.out_channels, l.kernel, l.stride] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_i32::<LE>(l.skip_source.map_or(-1, |s| s as i32))?;
    w.write_u8(u8::from(l.skip_provider))
}

fn read_layer(r: &mut impl Read) -> Result<LayerSpec> {
    let kind = match r.read_u8().map_err(io_err)? {
        0 => LayerKind::Conv,
        1 => LayerKind::TransposedConv,
        2 => LayerKind::OutputConv,
        k => return Err(fmt_err(format!("unknown layer kind {k}"))),
    };
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(io_err)? as usize;
    }
    let skip = r.read_i32::<LE>().map_err(io_err)?;
    let provider = r.read_u8().map_err(io_err)? != 0;
    Ok(LayerSpec {
        kind,
        in_channels: dims[0],
        out_channels: dims[1],
        kernel: dims[2],
        stride: dims[3],
        skip_source: usize::try_from(skip).ok(),
        skip_provider: provider,
    })
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    v.iter().try_for_each(|&x| w.write_f32::<LE>(x))
}

fn read_f32s(r: &mut impl Read, len: usize) -> Result<Vec<f32>> {
    let mut v = vec![0.0f32; len];
    r.read_f32_into::<LE>(&mut v).map_err(io_err)?;
    Ok(v)
}

pub fn write_weights(w: &mut impl Write, net: &TrainableNetwork<f32>) -> std::io::Result<()> {
    let spec = net.spec();
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u32::<LE>(WEIGHTS_VERSION)?;
    w.write_u8(match spec.mode {
        TaskMode::Inpainting => 0,
        TaskMode::Denoising => 1,
    })?;
    for v in [spec.input_channels, spec.input_size.0, spec.input_size.1, spec.layer_count()] {
        w.write_u32::<LE>(v as u32)?;
    }
    for l in spec.layers() {
        write_layer(w, l)?;
    }
    for (p, m) in net.params().iter().zip(net.moments()) {
        write_f32s(w, &p.weight)?;
        write_f32s(w, &p.bias)?;
        write_f32s(w, &m.first.weight)?;
        write_f32s(w, &m.second.weight)?;
        write_f32s(w, &m.first.bias)?;
        write_f32s(w, &m.second.bias)?;
    }
    w.write_u64::<LE>(net.step())
}

pub fn read_weights(r: &mut impl Read) -> Result<TrainableNetwork<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.read_u32::<LE>().map_err(io_err)?;
    if version != WEIGHTS_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let mode = match r.read_u8().map_err(io_err)? {
        0 => TaskMode::Inpainting,
        1 => TaskMode::Denoising,
        m => return Err(fmt_err(format!("unknown mode {m}"))),
    };
    let mut head = [0usize; 4];
    for h in &mut head {
        *h = r.read_u32::<LE>().map_err(io_err)? as usize;
    }
    let [channels, height, width, n_layers] = head;
    if n_layers == 0 || n_layers % 2 == 0 {
        return Err(fmt_err(format!("layer count {n_layers} is not 2n+1")));
    }
    let layers = (0..n_layers)
        .map(|_| read_layer(r))
        .collect::<Result<Vec<_>>>()?;
    let n = (n_layers - 1) / 2;
    let spec = CaeSpec {
        mode,
        input_channels: channels,
        input_size: (height, width),
        encoder: layers[..n].to_vec(),
        decoder: layers[n..2 * n].to_vec(),
        output_layer: layers[2 * n],
    };
    trace_shapes(&spec)?;
    let mut params = Vec::with_capacity(n_layers);
    let mut moments = Vec::with_capacity(n_layers);
    for l in spec.layers() {
        let (wl, bl) = (l.weight_len(), l.out_channels);
        let weight = read_f32s(r, wl)?;
        let bias = read_f32s(r, bl)?;
        let mw = read_f32s(r, wl)?;
        let vw = read_f32s(r, wl)?;
        let mb = read_f32s(r, bl)?;
        let vb = read_f32s(r, bl)?;
        params.push(LayerParams { weight, bias });
        moments.push(Moments {
            first: LayerParams { weight: mw, bias: mb },
            second: LayerParams { weight: vw, bias: vb },
        });
    }
    let step = r.read_u64::<LE>().map_err(io_err)?;
    TrainableNetwork::from_parts(spec, params, Some(moments), step)
}

pub fn weights_to_bytes(net: &TrainableNetwork<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(&mut buf, net).expect("writing to a Vec cannot fail");
    buf
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<TrainableNetwork<f32>> {
    let mut cursor = bytes;
    let net = read_weights(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(fmt_err(format!("{} trailing bytes", cursor.len())));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{expand, parse_arch};
    use crate::nn::Tensor4;
    use crate::seed::rng_from;

    #[test]
    fn round_trip_preserves_everything() {
        let spec = expand(&parse_arch("CS(4,3)-C(6,5)").unwrap(), TaskMode::Inpainting, 3, (8, 8)).unwrap();
        let mut net = TrainableNetwork::<f32>::init(&spec, &mut rng_from(2)).unwrap();
        let x = Tensor4::filled([1, 3, 8, 8], 0.3f32);
        let (y, cache) = net.forward_cached(&x).unwrap();
        let (g, _) = net.backward(&cache, &y).unwrap();
        net.adam_step(&g, 1e-3).unwrap();

        let bytes = weights_to_bytes(&net);
        assert_eq!(&bytes[..8], WEIGHTS_MAGIC);
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(weights_to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_truncated_and_corrupt() {
        let spec = expand(&parse_arch("CS(2,3)").unwrap(), TaskMode::Denoising, 1, (4, 4)).unwrap();
        let net = TrainableNetwork::<f32>::init(&spec, &mut rng_from(2)).unwrap();
        let bytes = weights_to_bytes(&net);
        assert!(weights_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(weights_from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(weights_from_bytes(&extra).is_err());
    }
}

//! `cnn-v1` model files: a text header describing the architecture followed
//! by all parameters as little-endian `f64`, layer by layer, weights before
//! biases.

use std::fmt::Write as _;
use std::path::Path;

use super::network::{out_shape, HeadKind, Layer, LayerKind, LayerSpec, Network, Params};
use crate::error::{io_err, Error, Result};

const MAGIC: &str = "cnn-v1";
const END: &str = "end\n";

fn kind_text(kind: &LayerKind) -> String {
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => format!("conv {out_channels} {kernel} {stride} {pad}"),
        LayerKind::MaxPool { kernel, stride } => format!("maxpool {kernel} {stride}"),
        LayerKind::Relu => "relu".into(),
        LayerKind::Fc { out } => format!("fc {out}"),
        LayerKind::LinearHead { out } => format!("linear-head {out}"),
    }
}

pub fn model_bytes(net: &Network) -> Vec<u8> {
    let mut header = String::new();
    let [c, h, w] = net.input_shape();
    writeln!(header, "{MAGIC}").unwrap();
    writeln!(header, "input {c} {h} {w}").unwrap();
    writeln!(header, "head {}", net.head()).unwrap();
    writeln!(header, "layers {}", net.layers().len()).unwrap();
    for l in net.layers() {
        writeln!(
            header,
            "layer {} {} lr {}",
            l.spec.name,
            kind_text(&l.spec.kind),
            l.spec.lr_mult
        )
        .unwrap();
    }
    writeln!(header, "params {}", net.param_count()).unwrap();
    header.push_str(END);
    let mut out = header.into_bytes();
    for p in net.layers().iter().filter_map(|l| l.params.as_ref()) {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_bytes(net)).map_err(io_err(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_model(&bytes, path)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn parse_model(bytes: &[u8], path: &Path) -> Result<Network> {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    if first != MAGIC.as_bytes() {
        let found = String::from_utf8_lossy(&first[..first.len().min(32)]).into_owned();
        if found.starts_with("cnn-") {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: MAGIC.into(),
                found,
            });
        }
        return Err(corrupt(path, "missing cnn-v1 header"));
    }
    let end = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END.as_bytes())
        .ok_or_else(|| corrupt(path, "truncated header"))?
        + 1
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt(path, "header is not UTF-8"))?;
    let body = &bytes[end..];

    let mut lines = header.lines().skip(1);
    let mut next = |what: &str| lines.next().ok_or_else(|| corrupt(path, format!("missing {what}")));
    let bad = |line: &str| corrupt(path, format!("malformed line {line:?}"));
    let nums = |parts: &[&str], line: &str| -> Result<Vec<usize>> {
        parts
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| bad(line)))
            .collect()
    };

    let line = next("input")?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let input = match parts.as_slice() {
        ["input", rest @ ..] if rest.len() == 3 => {
            let v = nums(rest, line)?;
            [v[0], v[1], v[2]]
        }
        _ => return Err(bad(line)),
    };
    let line = next("head")?;
    let head: HeadKind = line
        .strip_prefix("head ")
        .ok_or_else(|| bad(line))?
        .parse()
        .map_err(|_| bad(line))?;
    let line = next("layer count")?;
    let count: usize = line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(line))?;

    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next("layer")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 5 || parts[0] != "layer" || parts[parts.len() - 2] != "lr" {
            return Err(bad(line));
        }
        let name = parts[1];
        let args = nums(&parts[3..parts.len() - 2], line)?;
        let kind = match (parts[2], args.as_slice()) {
            ("conv", &[o, k, s, p]) => LayerKind::Conv {
                out_channels: o,
                kernel: k,
                stride: s,
                pad: p,
            },
            ("maxpool", &[k, s]) => LayerKind::MaxPool { kernel: k, stride: s },
            ("relu", &[]) => LayerKind::Relu,
            ("fc", &[o]) => LayerKind::Fc { out: o },
            ("linear-head", &[o]) => LayerKind::LinearHead { out: o },
            _ => return Err(bad(line)),
        };
        let lr_mult: f64 = parts[parts.len() - 1].parse().map_err(|_| bad(line))?;
        specs.push(LayerSpec {
            name: name.to_string(),
            kind,
            lr_mult,
        });
    }
    let line = next("params")?;
    let n_params: usize = line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(line))?;
    if body.len() != n_params * 8 {
        return Err(corrupt(
            path,
            format!("parameter block has {} bytes, expected {}", body.len(), n_params * 8),
        ));
    }

    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(count);
    let mut shape = input;
    for spec in specs {
        let out = out_shape(&spec.kind, shape)
            .ok_or_else(|| corrupt(path, format!("layer {} has incompatible shape", spec.name)))?;
        let params = match spec.kind {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => Some((out_channels * shape[0] * kernel * kernel, out_channels)),
            LayerKind::Fc { out } | LayerKind::LinearHead { out } => Some((out * shape.iter().product::<usize>(), out)),
            _ => None,
        }
        .map(|(nw, nb)| Params {
            weights: take(nw),
            bias: take(nb),
        });
        layers.push(Layer {
            spec,
            params,
            in_shape: shape,
            out_shape: out,
        });
        shape = out;
    }
    let net = Network::from_layers(input, layers, head).map_err(|e| corrupt(path, e.to_string()))?;
    if net.param_count() != n_params {
        return Err(corrupt(path, "parameter count does not match architecture"));
    }
    if net
        .layers()
        .iter()
        .filter_map(|l| l.params.as_ref())
        .any(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(corrupt(path, "non-finite parameter"));
    }
    Ok(net)
}

//! `.smck` model files.
//!
//! A plain-text container: a version line, `key = value` manifest lines, then
//! one `param <name> <shape>` record per tensor followed by its values as
//! 16-digit hexadecimal bit patterns, eight per line, and a closing `end`.
//! Floats in the manifest are stored the same way so a round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, NormStats};
use crate::autodiff::Tensor;
use crate::net::{AblationMode, MarkerNet, NetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "seqmark-checkpoint";
const VALUES_PER_LINE: usize = 8;

/// A trained network plus the input normalization it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: MarkerNet,
    pub norm: NormStats,
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Serializes a checkpoint to its text form.
pub fn write_checkpoint(ckpt: &Checkpoint) -> String {
    let net = &ckpt.net;
    let c = &net.config;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("marker", net.marker.clone());
    kv("channels", net.channels.join(","));
    kv("mode", net.mode.as_str().to_string());
    kv("input_channels", c.input_channels.to_string());
    kv("encoder_depth", c.encoder_depth.to_string());
    kv("stage_channels", join(&c.stage_channels));
    kv("global_kernels", join(&c.global_kernels));
    kv("local_layers", c.local_layers.to_string());
    kv("local_channels", c.local_channels.to_string());
    kv("local_kernel", c.local_kernel.to_string());
    kv("local_dilations", join(&c.local_dilations));
    kv("fusion_channels", c.fusion_channels.to_string());
    kv("dropout", hex(c.dropout));
    kv("norm_mean", ckpt.norm.mean.iter().map(|&v| hex(v)).collect::<Vec<_>>().join(","));
    kv("norm_std", ckpt.norm.std.iter().map(|&v| hex(v)).collect::<Vec<_>>().join(","));
    kv("params", net.params().len().to_string());

    let mut text = format!("{MAGIC} {CHECKPOINT_VERSION}\n{out}");
    for (name, t) in net.params().iter() {
        let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let _ = writeln!(text, "param {name} {shape}");
        for chunk in t.data().chunks(VALUES_PER_LINE) {
            let line = chunk.iter().map(|&v| hex(v)).collect::<Vec<_>>().join(" ");
            text.push_str(&line);
            text.push('\n');
        }
    }
    text.push_str("end\n");
    text
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    read_checkpoint(&text, path)
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn bad(&self, message: impl Into<String>) -> DataError {
        DataError::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn truncated(&self) -> DataError {
        DataError::CheckpointTruncated {
            path: self.path.to_path_buf(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str, DataError> {
        self.lines.next().ok_or_else(|| self.truncated())
    }

    fn value(&mut self, key: &str) -> Result<&'a str, DataError> {
        let line = self.next_line()?;
        match line.split_once(" = ") {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.bad(format!("expected `{key} = ...`, found `{line}`"))),
        }
    }

    fn usize(&mut self, key: &str) -> Result<usize, DataError> {
        let v = self.value(key)?;
        v.parse().map_err(|_| self.bad(format!("{key}: not an integer: `{v}`")))
    }

    fn usize_list(&mut self, key: &str) -> Result<Vec<usize>, DataError> {
        let v = self.value(key)?;
        v.split(',')
            .map(|x| x.parse().map_err(|_| self.bad(format!("{key}: not an integer list: `{v}`"))))
            .collect()
    }

    fn hex(&self, s: &str) -> Result<f64, DataError> {
        if s.len() != 16 {
            return Err(self.bad(format!("bad value `{s}`")));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| self.bad(format!("bad value `{s}`")))
    }

    fn hex_list(&mut self, key: &str) -> Result<Vec<f64>, DataError> {
        let v = self.value(key)?;
        v.split(',').map(|x| self.hex(x)).collect()
    }
}

/// Parses the text form; `path` only labels errors.
pub fn read_checkpoint(text: &str, path: &Path) -> Result<Checkpoint, DataError> {
    let mut p = Parser {
        lines: text.lines().peekable(),
        path,
    };
    let header = p.next_line()?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| p.bad("not a seqmark checkpoint"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(DataError::CheckpointVersion {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }

    let marker = p.value("marker")?.to_string();
    let channels: Vec<String> = p.value("channels")?.split(',').map(str::to_string).collect();
    let mode_text = p.value("mode")?;
    let mode: AblationMode = mode_text.parse().map_err(|e: String| p.bad(e))?;
    let config = NetConfig {
        input_channels: p.usize("input_channels")?,
        encoder_depth: p.usize("encoder_depth")?,
        stage_channels: p.usize_list("stage_channels")?,
        global_kernels: p.usize_list("global_kernels")?,
        local_layers: p.usize("local_layers")?,
        local_channels: p.usize("local_channels")?,
        local_kernel: p.usize("local_kernel")?,
        local_dilations: p.usize_list("local_dilations")?,
        fusion_channels: p.usize("fusion_channels")?,
        dropout: {
            let v = p.value("dropout")?;
            p.hex(v)?
        },
    };
    let norm = NormStats {
        mean: p.hex_list("norm_mean")?,
        std: p.hex_list("norm_std")?,
    };
    if norm.mean.len() != channels.len() || norm.std.len() != channels.len() {
        return Err(p.bad("normalization statistics do not match the channel list"));
    }
    let count = p.usize("params")?;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let line = p.next_line()?;
        let mut parts = line.split(' ');
        let (Some("param"), Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(p.bad(format!("expected a param record, found `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| p.bad(format!("bad shape for {name}"))))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let line = p.next_line()?;
            if line == "end" || line.starts_with("param ") {
                return Err(p.truncated());
            }
            for word in line.split(' ') {
                data.push(p.hex(word)?);
            }
        }
        if data.len() != n {
            return Err(p.bad(format!("{name}: expected {n} values, found {}", data.len())));
        }
        let tensor = Tensor::new(&shape, data).map_err(|e| p.bad(format!("{name}: {e}")))?;
        params.push((name.to_string(), tensor));
    }
    match p.lines.next() {
        Some("end") => {}
        Some(other) => return Err(p.bad(format!("expected `end`, found `{other}`"))),
        None => return Err(p.truncated()),
    }

    let net = MarkerNet::with_params(marker, channels, config, mode, params).map_err(|e| p.bad(e.to_string()))?;
    Ok(Checkpoint { net, norm })
}

//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "VBDCKPT\0"
//! version  u32       1
//! header   u32 len + UTF-8 `key=value` lines (network spec and free metadata)
//! count    u32       number of arrays
//! array    u16 name len + name, u32 rows, u32 cols, rows·cols f64 bit patterns
//! ```
//!
//! Arrays are stored as raw bit patterns, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{AlphaMode, Network, StructuredDropoutLayer, VariationalDense};
use crate::tensor::Matrix;
use crate::variants::{DropoutVariant, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"VBDCKPT\0";
pub const VERSION: u32 = 1;

/// A network plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub metadata: BTreeMap<String, String>,
}

fn spec_header(spec: &NetworkSpec) -> Vec<(String, String)> {
    let arch = spec
        .arch
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = vec![
        ("net.arch".to_string(), arch),
        ("net.variant".to_string(), spec.variant.name().to_string()),
        (
            "net.alpha_mode".to_string(),
            spec.variant.alpha_mode().to_string(),
        ),
        ("net.structured".to_string(), spec.structured.to_string()),
        (
            "net.noise_on_input".to_string(),
            spec.noise_on_input.to_string(),
        ),
        (
            "net.alpha_frozen".to_string(),
            spec.alpha_frozen.to_string(),
        ),
    ];
    match spec.variant {
        DropoutVariant::Bernoulli { p } => out.push(("net.p".into(), p.to_string())),
        DropoutVariant::GaussianNoise { alpha } | DropoutVariant::GaussianDropout { alpha } => {
            out.push(("net.alpha".into(), alpha.to_string()))
        }
        _ => {}
    }
    out
}

fn spec_from_header(h: &BTreeMap<String, String>) -> Result<NetworkSpec> {
    let get = |k: &str| {
        h.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(0, format!("checkpoint header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(0, format!("bad number for `{k}`")))
    };
    let flag = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(0, format!("bad flag for `{k}`")))
    };
    let arch = get("net.arch")?
        .split(',')
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(0, "bad architecture in checkpoint header"))?;
    let per_weight = get("net.alpha_mode")?.parse::<AlphaMode>()? == AlphaMode::PerWeight;
    let variant = match get("net.variant")? {
        "none" => DropoutVariant::None,
        "bernoulli" => DropoutVariant::Bernoulli { p: num("net.p")? },
        "gaussian-noise" => DropoutVariant::GaussianNoise {
            alpha: num("net.alpha")?,
        },
        "gaussian-dropout" => DropoutVariant::GaussianDropout {
            alpha: num("net.alpha")?,
        },
        "vd" => DropoutVariant::Vd { per_weight },
        "vbd" => DropoutVariant::Vbd { per_weight },
        other => return Err(Error::format(0, format!("unknown variant `{other}`"))),
    };
    Ok(NetworkSpec {
        arch,
        variant,
        structured: flag("net.structured")?,
        noise_on_input: flag("net.noise_on_input")?,
        alpha_frozen: flag("net.alpha_frozen")?,
    })
}

fn arrays(net: &Network) -> Vec<(String, usize, usize, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let (r, c) = l.theta().shape();
        out.push((
            format!("layer{i}.theta"),
            r,
            c,
            l.theta().as_slice().to_vec(),
        ));
        out.push((format!("layer{i}.bias"), 1, c, l.bias().to_vec()));
        out.push((
            format!("layer{i}.log_sigma2"),
            r,
            c,
            l.log_sigma2().as_slice().to_vec(),
        ));
        out.push((
            format!("layer{i}.shared_log_alpha"),
            1,
            1,
            vec![l.shared_log_alpha()],
        ));
    }
    for (i, g) in net.gates().iter().enumerate() {
        let w = g.width();
        out.push((format!("gate{i}.theta"), 1, w, g.theta().to_vec()));
        out.push((format!("gate{i}.log_sigma2"), 1, w, g.log_sigma2().to_vec()));
    }
    out
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            metadata: BTreeMap::new(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        for (k, v) in spec_header(&self.network.spec()) {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.starts_with("net.") || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::usage(format!("metadata key `{k}` cannot be stored")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        let arrays = arrays(&self.network);
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, rows, cols, data) in arrays {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader {
            inner: r,
            offset: 0,
        };
        let magic = r.bytes(8)?;
        if magic != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                8,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let len = r.u32()? as usize;
        let at = r.offset;
        let header = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::format(at, "header is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        let mut net_keys = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("bad header line `{line}`")))?;
            if k.starts_with("net.") {
                net_keys.insert(k.to_string(), v.to_string());
            } else {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let spec = spec_from_header(&net_keys)?;
        spec.validate()?;

        let count = r.u32()? as usize;
        let mut found: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let at = r.offset;
            let name = String::from_utf8(r.bytes(n)?)
                .map_err(|_| Error::format(at, "array name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(r.u64()?));
            }
            found.insert(name, (rows, cols, data));
        }
        let end = r.offset;
        let mut take = |name: String, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let (r, c, data) = found
                .remove(&name)
                .ok_or_else(|| Error::format(end, format!("missing array `{name}`")))?;
            if (r, c) != (rows, cols) {
                return Err(Error::format(
                    end,
                    format!("array `{name}` is {r}x{c}, expected {rows}x{cols}"),
                ));
            }
            Ok(data)
        };

        let mut layers = Vec::new();
        let mut modes = Vec::new();
        let alpha_mode = spec.variant.alpha_mode();
        for (i, w) in spec.arch.windows(2).enumerate() {
            let (k, d) = (w[0], w[1]);
            let theta = Matrix::new(k, d, take(format!("layer{i}.theta"), k, d)?)?;
            let bias = take(format!("layer{i}.bias"), 1, d)?;
            let ls = Matrix::new(k, d, take(format!("layer{i}.log_sigma2"), k, d)?)?;
            let la = take(format!("layer{i}.shared_log_alpha"), 1, 1)?[0];
            layers.push(VariationalDense::new(theta, bias, ls, la, alpha_mode)?);
            modes.push(spec.dense_mode(i));
        }
        let mut gates = Vec::new();
        if spec.structured {
            for (i, &w) in spec.arch[..spec.arch.len() - 1].iter().enumerate() {
                gates.push(StructuredDropoutLayer::new(
                    take(format!("gate{i}.theta"), 1, w)?,
                    take(format!("gate{i}.log_sigma2"), 1, w)?,
                )?);
            }
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::format(end, format!("unexpected array `{extra}`")));
        }
        let network = Network::from_parts(spec.variant, layers, modes, gates, spec.alpha_frozen)?;
        Ok(Checkpoint { network, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::format(
                self.offset + got as u64,
                format!("truncated checkpoint: wanted {n} bytes, got {got}"),
            ));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

//! Binary checkpoints.
//!
//! ```text
//! DECOP-CKPT v1
//! config <lines>
//! <lines of the resolved configuration, key = value>
//! params <count>
//! param <name> f32 <d0>x<d1>...
//! <4 * numel bytes, little-endian f32, row-major>
//! ...
//! ```
//!
//! Values are stored at 32-bit precision, so a model loaded from a
//! checkpoint saves back to the same bytes.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "DECOP-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// The configuration echo the checkpoint was written with.
    pub config: String,
    pub store: ParamStore,
}

pub fn encode(config_echo: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    let lines: Vec<&str> = config_echo.lines().collect();
    out.extend(format!("{FORMAT_TAG}\nconfig {}\n", lines.len()).bytes());
    for l in &lines {
        out.extend(l.bytes());
        out.push(b'\n');
    }
    out.extend(format!("params {}\n", store.len()).bytes());
    for p in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        out.extend(format!("param {} f32 {}\n", p.name, dims.join("x")).bytes());
        for &v in p.value.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint(format!("invalid text near byte {}", self.pos)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated payload at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn count(line: &str, key: &str) -> Result<usize> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix(' '))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <count>`, got `{line}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let tag = r.line()?;
    if tag != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("unknown format tag `{tag}`")));
    }
    let n = count(r.line()?, "config")?;
    let mut config = String::new();
    for _ in 0..n {
        config.push_str(r.line()?);
        config.push('\n');
    }
    let n = count(r.line()?, "params")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let header = r.line()?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [kw, name, dtype, dims] = fields[..] else {
            return Err(Error::Checkpoint(format!("bad record header `{header}`")));
        };
        if kw != "param" || dtype != "f32" {
            return Err(Error::Checkpoint(format!("bad record header `{header}`")));
        }
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in `{header}`"))))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store
            .insert(name, Tensor::new(&shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, store })
}

pub fn save(path: &Path, config_echo: &str, store: &ParamStore) -> Result<()> {
    crate::io::write_atomic(path, &encode(config_echo, store))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))
    }

    /// Fails unless `cfg` agrees with the checkpoint on every structural key.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let saved = self.run_config()?.structural();
        let wanted = cfg.structural();
        if saved != wanted {
            let show = |s: &[(&str, String)]| s.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
            return Err(Error::Incompatible(format!(
                "checkpoint has [{}] but config has [{}]",
                show(&saved),
                show(&wanted)
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-9, 7.0, -0.0]).unwrap())
            .unwrap();
        s.insert("b.weight", Tensor::scalar(0.01)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode("dataset_path = x.csv\n", &store());
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config, "dataset_path = x.csv\n");
        assert_eq!(encode(&ck.config, &ck.store), bytes);
        assert_eq!(ck.store.by_name("a").unwrap().value.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode("", &store());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(b"NOT-A-CKPT\n"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn structural_mismatch_lists_both() {
        let saved = RunConfig::parse("dataset_path = synthetic:sine\npatch_len = 12\nstride = 12").unwrap();
        let ck = Checkpoint {
            config: saved.echo(),
            store: store(),
        };
        let other = RunConfig::parse("dataset_path = synthetic:sine-b\nepochs = 3").unwrap();
        ck.check_compatible(&other).unwrap();
        let p8 = RunConfig::parse("dataset_path = synthetic:sine\npatch_len = 8\nstride = 8").unwrap();
        let msg = ck.check_compatible(&p8).unwrap_err().to_string();
        assert!(msg.contains("patch_len=12") && msg.contains("patch_len=8"), "{msg}");
    }
}

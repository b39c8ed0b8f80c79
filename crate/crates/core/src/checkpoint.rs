//! Checkpoint container.
//!
//! A checkpoint is one file: a UTF-8 header of `key=value` lines and
//! `array <name> <rows> <cols>` lines, closed by a line `end`, followed by
//! every array's entries as little-endian `f64` values in header order.
//!
//! ```text
//! tdpcfg-checkpoint
//! schema_version=1
//! n=2
//! ...
//! array U 2 4
//! array V 6 4
//! ...
//! end
//! <binary payload>
//! ```
//!
//! The grammar snapshot is stored under the names `U`, `V`, `W`, `Q`, `r`
//! and the neural parameters under their [`ParamId`] names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use autodiff::Array;

use crate::grammar::TdPcfg;
use crate::model::{ModelConfig, NeuralParams, ParamId};
use crate::{Error, Result};

const MAGIC: &str = "tdpcfg-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;
const GRAMMAR_NAMES: [&str; 5] = ["U", "V", "W", "Q", "r"];
const RESERVED: [&str; 7] = ["schema_version", "n", "p", "q", "d", "k", "dtype"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NeuralParams,
    pub grammar: TdPcfg,
    /// Free-form metadata (seed, epoch, vocabulary path, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: NeuralParams) -> Result<Self> {
        let grammar = params.emit_grammar()?;
        Ok(Self { params, grammar, meta: BTreeMap::new() })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn named_arrays(&self) -> Vec<(&str, &Array)> {
        let g = &self.grammar;
        let mut out: Vec<(&str, &Array)> =
            GRAMMAR_NAMES.iter().copied().zip([&g.u, &g.v, &g.w, &g.emission, &g.start]).collect();
        out.extend(self.params.iter().map(|(id, a)| (id.name(), a)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.config();
        let mut header = format!(
            "{MAGIC}\nschema_version={SCHEMA_VERSION}\nn={}\np={}\nq={}\nd={}\nk={}\ndtype=f64\n",
            c.n, c.p, c.q, c.d, c.k
        );
        for (key, value) in &self.meta {
            if RESERVED.contains(&key.as_str()) || key.contains(['=', '\n']) || value.contains('\n') {
                return Err(Error::Checkpoint(format!("invalid metadata entry {key:?}")));
            }
            header.push_str(&format!("{key}={value}\n"));
        }
        let arrays = self.named_arrays();
        for (name, a) in &arrays {
            header.push_str(&format!("array {name} {} {}\n", a.rows(), a.cols()));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for (_, a) in arrays {
            for x in a.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<&[u8]>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(bad("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut reader)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut fields = BTreeMap::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        loop {
            let l = next_line(&mut reader)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad array line {l:?}")));
                if parts.len() != 3 {
                    return Err(bad(format!("bad array line {l:?}")));
                }
                shapes.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?));
            } else if let Some((k, v)) = l.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            } else {
                return Err(bad(format!("bad header line {l:?}")));
            }
        }
        let mut take = |key: &str| -> Result<String> {
            fields.remove(key).ok_or_else(|| bad(format!("missing header key {key}")))
        };
        let version: u32 = take("schema_version")?.parse().map_err(|_| bad("bad schema_version".into()))?;
        if version != SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema version {version}")));
        }
        let dtype = take("dtype")?;
        if dtype != "f64" {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let mut dim =
            |key: &str| -> Result<usize> { take(key)?.parse().map_err(|_| bad(format!("bad value for {key}"))) };
        let config = ModelConfig { n: dim("n")?, p: dim("p")?, q: dim("q")?, d: dim("d")?, k: dim("k")? };

        let mut arrays: BTreeMap<String, Array> = BTreeMap::new();
        for (name, rows, cols) in shapes {
            let mut buf = vec![0u8; rows * cols * 8];
            reader.read_exact(&mut buf).map_err(|_| bad(format!("truncated payload in {name}")))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(name, Array::new(rows, cols, data)?);
        }
        let mut grab = |name: &str| arrays.remove(name).ok_or_else(|| bad(format!("missing array {name}")));
        let grammar = TdPcfg::new(grab("U")?, grab("V")?, grab("W")?, grab("Q")?, grab("r")?)?;
        let params = ParamId::ALL.iter().map(|id| grab(id.name())).collect::<Result<Vec<_>>>()?;
        let params = NeuralParams::from_arrays(config, params)?;
        Ok(Self { params, grammar, meta: fields })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

//! Binary checkpoint files.
//!
//! Layout: the magic `MDGF`, a little-endian `u32` format version, then
//! sections of `[4-byte tag][u64 length][payload]`. Numbers are little-endian;
//! matrices are `u32 rows, u32 cols` followed by row-major `f64`s. The config
//! section is UTF-8 `key=value` lines. Unknown sections are skipped.

use std::fs;
use std::path::Path;

use mdgfm_core::encoder::EncoderParams;
use mdgfm_core::loss::ProjectionHead;
use mdgfm_core::pca::ProjectionBasis;
use mdgfm_core::pretrain::{Checkpoint, PretrainConfig};
use mdgfm_core::refine::TokenSet;
use mdgfm_core::DenseMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDGF";
pub const FORMAT_VERSION: u32 = 1;

const CONFIG: &[u8; 4] = b"CONF";
const TOKENS: &[u8; 4] = b"TOKN";
const BASES: &[u8; 4] = b"PCAB";
const ENCODER: &[u8; 4] = b"ENCD";
const HEAD: &[u8; 4] = b"HEAD";

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint dimension exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn floats(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn text(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        m.data().iter().for_each(|&x| self.f64(x));
    }

    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.0.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.fail(format!("truncated: needed {} more bytes, {} left", n, self.bytes.len())));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("invalid UTF-8 text"))
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let (r, c) = (self.u32()?, self.u32()?);
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DenseMatrix::new(r, c, data)?)
    }

    fn matrices(&mut self) -> Result<Vec<DenseMatrix>> {
        let n = self.u32()?;
        (0..n).map(|_| self.matrix()).collect()
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.fail(format!("{} trailing bytes in {} section", self.bytes.len(), what)))
        }
    }
}

/// Serialized checkpoint.
pub fn to_bytes(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Writer::default();
    out.0.extend_from_slice(MAGIC);
    out.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let mut config = Writer::default();
    let text: String = cp.config.to_pairs().iter().map(|(k, v)| format!("{}={}\n", k, v)).collect();
    config.0.extend_from_slice(text.as_bytes());
    out.section(CONFIG, config);

    let mut tokens = Writer::default();
    tokens.u32(cp.tokens.domains.len());
    for (i, id) in cp.tokens.domains.iter().enumerate() {
        tokens.text(id);
        tokens.floats(&cp.tokens.domain_tokens[i]);
        tokens.floats(&cp.tokens.balance_tokens[i]);
    }
    tokens.floats(&cp.tokens.shared_token);
    out.section(TOKENS, tokens);

    let mut bases = Writer::default();
    bases.u32(cp.pca_bases.len());
    for b in &cp.pca_bases {
        bases.u32(b.target_dim);
        bases.floats(&b.mean);
        bases.floats(&b.explained_variance);
        bases.matrix(&b.basis);
    }
    out.section(BASES, bases);

    let mut encoder = Writer::default();
    encoder.f64(cp.encoder.dropout);
    encoder.u32(cp.encoder.weights.len());
    cp.encoder.weights.iter().for_each(|w| encoder.matrix(w));
    encoder.u32(cp.encoder.biases.len());
    cp.encoder.biases.iter().for_each(|b| encoder.matrix(b));
    out.section(ENCODER, encoder);

    let mut head = Writer::default();
    head.matrix(&cp.head.w1);
    head.matrix(&cp.head.w2);
    out.section(HEAD, head);
    out.0
}

fn parse_config(text: &str, r: &Reader) -> Result<PretrainConfig> {
    let mut cfg = PretrainConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| r.fail(format!("bad config line `{}`", line)))?;
        if !cfg.set(key.trim(), value)? {
            return Err(r.fail(format!("unknown config key `{}`", key.trim())));
        }
    }
    Ok(cfg)
}

/// Parses a checkpoint; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!("format version {} found, expected {}", version, FORMAT_VERSION)));
    }
    let (mut config, mut tokens, mut bases, mut encoder, mut head) = (None, None, None, None, None);
    while !r.bytes.is_empty() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = usize::try_from(r.u64()?).map_err(|_| r.fail("section too large"))?;
        let mut s = Reader { bytes: r.take(len)?, path };
        match &tag {
            CONFIG => {
                let text = std::str::from_utf8(s.bytes).map_err(|_| s.fail("config is not UTF-8"))?;
                config = Some(parse_config(text, &s)?);
            }
            TOKENS => {
                let n = s.u32()?;
                let mut set = TokenSet {
                    domains: Vec::with_capacity(n),
                    domain_tokens: Vec::with_capacity(n),
                    shared_token: Vec::new(),
                    balance_tokens: Vec::with_capacity(n),
                };
                for _ in 0..n {
                    set.domains.push(s.text()?);
                    set.domain_tokens.push(s.floats()?);
                    set.balance_tokens.push(s.floats()?);
                }
                set.shared_token = s.floats()?;
                s.finish("token")?;
                tokens = Some(set);
            }
            BASES => {
                let n = s.u32()?;
                let mut list = Vec::with_capacity(n);
                for _ in 0..n {
                    let target_dim = s.u32()?;
                    let mean = s.floats()?;
                    let explained_variance = s.floats()?;
                    let basis = s.matrix()?;
                    list.push(ProjectionBasis {
                        mean,
                        basis,
                        explained_variance,
                        target_dim,
                    });
                }
                s.finish("basis")?;
                bases = Some(list);
            }
            ENCODER => {
                let dropout = s.f64()?;
                let weights = s.matrices()?;
                let biases = s.matrices()?;
                s.finish("encoder")?;
                encoder = Some(EncoderParams { weights, biases, dropout });
            }
            HEAD => {
                let w1 = s.matrix()?;
                let w2 = s.matrix()?;
                s.finish("head")?;
                head = Some(ProjectionHead { w1, w2 });
            }
            _ => log::debug!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(&tag)),
        }
    }
    let missing = |name: &str| r.fail(format!("missing {} section", name));
    Ok(Checkpoint {
        config: config.ok_or_else(|| missing("config"))?,
        tokens: tokens.ok_or_else(|| missing("token"))?,
        pca_bases: bases.ok_or_else(|| missing("basis"))?,
        encoder: encoder.ok_or_else(|| missing("encoder"))?,
        head: head.ok_or_else(|| missing("head"))?,
    })
}

pub fn save(cp: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(cp)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

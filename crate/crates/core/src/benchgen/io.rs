//! Dataset dump and load.
//!
//! Binary layout per client file (little-endian):
//!
//! ```text
//! magic b"FDTDATA1"
//! [u8;32] spec hash (SHA-256 of the spec's JSON form)
//! u32 client, u32 C^k, u32 N_train, u32 N_test, u32 vision_dim, u32 tokens
//! u32 * C^k   answer pool (global answer ids)
//! records, train first then test, each:
//!   u64 id, u8 split (0 train, 1 test), u32 answer, u32 * tokens, f64 * vision_dim
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BenchmarkSpec, ClientData, TaskKind, VqaTriple};
use crate::error::IoContext;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FDTDATA1";

pub fn spec_hash(spec: &BenchmarkSpec) -> [u8; 32] {
    let json = serde_json::to_string(spec).expect("spec serializes");
    Sha256::digest(json.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub spec_hash: [u8; 32],
    pub client: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub vision_dim: usize,
    pub n_tokens: usize,
}

fn task_for_token(token: usize) -> TaskKind {
    match token {
        1 => TaskKind::Compare,
        2 => TaskKind::Parity,
        _ => TaskKind::Identity,
    }
}

pub fn write_client(path: &Path, spec: &BenchmarkSpec, c: &ClientData) -> Result<()> {
    let vision_dim = c.train.first().or(c.test.first()).map_or(0, |s| s.vision.len());
    let n_tokens = c.train.first().or(c.test.first()).map_or(0, |s| s.tokens.len());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&spec_hash(spec));
    for v in [c.client, c.n_classes(), c.train.len(), c.test.len(), vision_dim, n_tokens] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &g in &c.answer_pool {
        out.extend_from_slice(&(g as u32).to_le_bytes());
    }
    for (split, samples) in [(0u8, &c.train), (1u8, &c.test)] {
        for s in samples.iter() {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.push(split);
            out.extend_from_slice(&(s.answer as u32).to_le_bytes());
            for &t in &s.tokens {
                out.extend_from_slice(&(t as u32).to_le_bytes());
            }
            for v in &s.vision {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).at(path)
}

pub fn read_client(path: &Path) -> Result<(DatasetHeader, ClientData)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated dataset file"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
    let mut u32s = [0usize; 6];
    for slot in &mut u32s {
        *slot = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    }
    let [client, n_classes, n_train, n_test, vision_dim, n_tokens] = u32s;
    let mut pool = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        pool.push(u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize);
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_train + n_test {
        let id = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let split = take(1)?[0];
        if split != u8::from(i >= n_train) {
            return Err(bad("split marker out of order"));
        }
        let answer = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize);
        }
        let mut vision = Vec::with_capacity(vision_dim);
        for _ in 0..vision_dim {
            vision.push(f64::from_le_bytes(take(8)?.try_into().expect("8")));
        }
        let s = VqaTriple { id, vision, tokens, answer };
        if split == 0 {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let task = task_for_token(train.first().or(test.first()).map_or(0, |s| s.tokens[0]));
    let header = DatasetHeader {
        spec_hash: hash,
        client,
        n_classes,
        n_train,
        n_test,
        vision_dim,
        n_tokens,
    };
    let data = ClientData {
        client,
        source: 0,
        task,
        train,
        test,
        answer_pool: pool,
        transform: None,
    };
    Ok((header, data))
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    client: usize,
    split: String,
    id: u64,
    vision: Vec<f64>,
    tokens: Vec<usize>,
    answer: usize,
    global_answer: usize,
}

/// Human-readable dump: one JSON object per sample.
pub fn write_jsonl(path: &Path, c: &ClientData) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).at(path)?);
    for (split, samples) in [("train", &c.train), ("test", &c.test)] {
        for s in samples.iter() {
            let rec = JsonRecord {
                client: c.client,
                split: split.to_string(),
                id: s.id,
                vision: s.vision.clone(),
                tokens: s.tokens.clone(),
                answer: s.answer,
                global_answer: c.answer_pool[s.answer],
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").at(path)?;
        }
    }
    f.flush().at(path)
}

/// Reads back `(split, sample)` pairs from a JSONL dump.
pub fn read_jsonl(path: &Path) -> Result<Vec<(String, VqaTriple)>> {
    let f = fs::File::open(path).at(path)?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.at(path)?;
            let r: JsonRecord =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok((
                r.split,
                VqaTriple {
                    id: r.id,
                    vision: r.vision,
                    tokens: r.tokens,
                    answer: r.answer,
                },
            ))
        })
        .collect()
}

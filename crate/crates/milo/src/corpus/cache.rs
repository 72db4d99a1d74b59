//! Token stream cache ("MILT1" + little-endian u32 ids) and JSON-lines
//! document input.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TOKEN_MAGIC: &[u8; 5] = b"MILT1";

pub fn save_token_cache(path: &Path, tokens: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TOKEN_MAGIC)?;
    for &t in tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_token_cache(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(Error::Format {
            what: "token cache",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            what: "token cache",
            detail: format!(
                "{} payload bytes is not a whole number of tokens",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One input record: a text plus the domain it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub domain: String,
}

/// Reads JSON-lines documents; blank lines are skipped, malformed lines
/// are reported with their line number.
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let r = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "document stream",
            detail: format!("line {}: {e}", i + 1),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

//! Model checkpoints: a plain-text header listing each named array with its
//! shape and byte offset, followed by the raw little-endian `f64` data.
//!
//! ```text
//! probmix-checkpoint 1
//! spec {"input_dim":1,...}
//! param layer0.w 1 128 0
//! param layer0.b 1 128 1024
//! end
//! <data>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{MlpSpec, Model};

const MAGIC: &str = "probmix-checkpoint 1";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut header = format!("{MAGIC}\nspec {}\n", serde_json::to_string(model.spec())?);
    let mut data = Vec::with_capacity(model.params().num_scalars() * 8);
    for (_, name, value) in model.params().iter() {
        header.push_str(&format!("param {name} {} {} {}\n", value.rows(), value.cols(), data.len()));
        for v in value.as_slice() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&data)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("unrecognized header"));
    }
    let spec_line = next_line()?;
    let spec: MlpSpec = serde_json::from_str(spec_line.strip_prefix("spec ").ok_or_else(|| bad("missing spec line"))?)?;
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let parsed = match fields.as_slice() {
            ["param", name, rows, cols, offset] => (|| {
                Some((name.to_string(), rows.parse().ok()?, cols.parse().ok()?, offset.parse().ok()?))
            })(),
            _ => None,
        };
        entries.push(parsed.ok_or_else(|| bad(&format!("malformed entry: {line}")))?);
    }
    let data = &bytes[pos..];
    let mut params = ParamSet::new();
    for (name, rows, cols, offset) in entries {
        let (rows, cols, offset): (usize, usize, usize) = (rows, cols, offset);
        let end = offset + rows * cols * 8;
        let chunk = data.get(offset..end).ok_or_else(|| bad(&format!("data for {name} out of range")))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.push(name, Matrix::from_vec(rows, cols, values));
    }
    Model::from_params(spec, params)
}

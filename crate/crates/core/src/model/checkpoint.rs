//! Checkpoints are a directory with two files:
//!
//! * `manifest.txt`: one line per tensor, `name<TAB>shape<TAB>offset<TAB>count`,
//!   where `shape` is comma-separated extents (empty for scalars) and
//!   `offset`/`count` are in elements.
//! * `params.bin`: all tensors back to back as little-endian f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{BstError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

pub fn save_checkpoint<T: Real>(dir: &Path, params: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut bin = Vec::with_capacity(params.num_scalars() * 8);
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        if name.contains(['\t', '\n']) {
            return Err(BstError::Input(format!("parameter name {name:?} cannot be stored")));
        }
        let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{offset}\t{}\n", shape.join(","), t.numel()));
        for &x in t.data() {
            bin.extend_from_slice(&x.to_f64().to_le_bytes());
        }
        offset += t.numel();
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&bin)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ParamStore<T>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bin = fs::read(dir.join(PARAMS_FILE))?;
    let bad = |line: usize, what: &str| BstError::Input(format!("{MANIFEST_FILE} line {}: {what}", line + 1));
    let mut map = BTreeMap::new();
    for (ln, line) in manifest.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(ln, "expected 4 tab-separated fields"));
        }
        let shape = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1].split(',').map(|s| s.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad(ln, "bad shape"))?
        };
        let offset: usize = fields[2].parse().map_err(|_| bad(ln, "bad offset"))?;
        let count: usize = fields[3].parse().map_err(|_| bad(ln, "bad count"))?;
        let end = (offset + count) * 8;
        if end > bin.len() {
            return Err(bad(ln, "tensor extends past the end of the data file"));
        }
        let data = bin[offset * 8..end]
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        map.insert(fields[0].to_string(), Tensor::new(shape, data).map_err(|_| bad(ln, "count does not match shape"))?);
    }
    Ok(ParamStore::from_map(map))
}

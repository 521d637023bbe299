//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian u32, floats little-endian f64):
//!
//! ```text
//! magic    b"TITN"
//! version  u32 = 1
//! config   11 x u32: image_size, in_channels, patch_size, pixel_size,
//!          patch_dim, pixel_dim, depth, outer_heads, inner_heads,
//!          mlp_ratio, num_classes
//! count    u32 number of parameter tensors
//! tensor*  u32 name length, name (utf-8), u32 rank, rank x u32 extents,
//!          f64 data in row-major order
//! ```
//!
//! Tensors appear in registration order. Loading rebuilds the model skeleton
//! from the stored config and overwrites each buffer, so name, shape and
//! order are all verified against the architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::titn::{ModelConfig, TitnModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TITN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn config_fields(c: &ModelConfig) -> [usize; 11] {
    [
        c.image_size,
        c.in_channels,
        c.patch_size,
        c.pixel_size,
        c.patch_dim,
        c.pixel_dim,
        c.depth,
        c.outer_heads,
        c.inner_heads,
        c.mlp_ratio,
        c.num_classes,
    ]
}

pub fn save_checkpoint(path: &Path, model: &TitnModel) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    out(CHECKPOINT_MAGIC)?;
    out(&CHECKPOINT_VERSION.to_le_bytes())?;
    for f in config_fields(&model.config) {
        out(&(f as u32).to_le_bytes())?;
    }
    out(&(model.params.len() as u32).to_le_bytes())?;
    for e in model.params.entries() {
        out(&(e.name.len() as u32).to_le_bytes())?;
        out(e.name.as_bytes())?;
        out(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            out(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TitnModel> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: String| Error::Format {
        what: "checkpoint",
        detail,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 11];
    for f in fields.iter_mut() {
        *f = read_u32(&mut r, path)? as usize;
    }
    let config = ModelConfig {
        image_size: fields[0],
        in_channels: fields[1],
        patch_size: fields[2],
        pixel_size: fields[3],
        patch_dim: fields[4],
        pixel_dim: fields[5],
        depth: fields[6],
        outer_heads: fields[7],
        inner_heads: fields[8],
        mlp_ratio: fields[9],
        num_classes: fields[10],
    };
    // Rebuild the skeleton so names/shapes/order come from the architecture,
    // then overwrite every buffer from the file.
    let mut model = TitnModel::new(config, 0)?;
    let count = read_u32(&mut r, path)? as usize;
    if count != model.params.len() {
        return Err(fmt(format!(
            "expected {} tensors for this config, file holds {count}",
            model.params.len()
        )));
    }
    for e in model.params.entries_mut() {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e2| io_err(path, e2))?;
        let name = String::from_utf8(name).map_err(|_| fmt("non-utf8 tensor name".into()))?;
        if name != e.name {
            return Err(fmt(format!("tensor {name} does not match expected {}", e.name)));
        }
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        if shape != e.shape {
            return Err(fmt(format!(
                "tensor {name}: stored shape {shape:?} does not match {:?}",
                e.shape
            )));
        }
        let mut buf = [0u8; 8];
        for v in e.data.iter_mut() {
            r.read_exact(&mut buf).map_err(|e2| io_err(path, e2))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(model),
        Ok(_) => Err(fmt("trailing bytes after last tensor".into())),
        Err(e) => Err(io_err(path, e)),
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::titn::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            in_channels: 1,
            patch_size: 4,
            pixel_size: 2,
            patch_dim: 16,
            pixel_dim: 8,
            depth: 2,
            outer_heads: 4,
            inner_heads: 2,
            mlp_ratio: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TitnModel::new(tiny(), 99).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} not bit-exact",
                a.name
            );
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TitnModel::new(tiny(), 0).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TitnModel::new(tiny(), 0).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

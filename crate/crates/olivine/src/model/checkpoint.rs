//! OLWT checkpoint format: bit-exact serialization of model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OLWT" | version u32 | name_len u16 | name utf-8 | entry_count u32
//! entry*: name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | values f32 × prod(dims)
//! meta:   epoch u32 | best_val_metric f32
//! ```
//!
//! Loading validates the magic, version, model name, and every entry's name
//! and shape against the target spec, naming the first mismatch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelSpec, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OLWT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried in the checkpoint trailer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// 1-indexed epoch the weights were saved at.
    pub epoch: u32,
    /// Monitored validation metric at that epoch.
    pub best_val_metric: f32,
}

/// Header-level view of a checkpoint, parsed without a target spec.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub model_name: String,
    pub entries: Vec<(String, Vec<usize>)>,
    pub meta: CheckpointMeta,
}

/// Serializes all parameters in model order; byte-deterministic.
pub fn save_checkpoint(spec: &ModelSpec, params: &Params<f32>, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let decls = spec.param_decls();
    if decls.len() != params.len() {
        return Err(Error::shape(format!(
            "checkpoint: model {} declares {} parameters, store has {}",
            spec.name,
            decls.len(),
            params.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_name(&mut out, &spec.name)?;
    out.extend_from_slice(&(decls.len() as u32).to_le_bytes());
    for (i, decl) in decls.iter().enumerate() {
        let (name, tensor) = params.entry(i);
        if name != decl.name || tensor.shape() != decl.shape.as_slice() {
            return Err(Error::shape(format!(
                "checkpoint: entry {i} is \"{name}\" {:?}, model declares \"{}\" {:?}",
                tensor.shape(),
                decl.name,
                decl.shape
            )));
        }
        write_name(&mut out, name)?;
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.best_val_metric.to_le_bytes());
    Ok(out)
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::format(format!("checkpoint: name too long: {name}")));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format("checkpoint: name is not UTF-8"))
    }
}

fn parse(bytes: &[u8]) -> Result<(CheckpointInfo, Vec<Vec<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "checkpoint: bad magic {:?}, expected \"OLWT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let model_name = r.name()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        entries.push((name, dims));
        values.push(data);
    }
    let meta = CheckpointMeta { epoch: r.u32()?, best_val_metric: r.f32()? };
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "checkpoint: {} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    Ok((CheckpointInfo { model_name, entries, meta }, values))
}

/// Parses headers and metadata without validating against a spec. Used to
/// recover the preset name and geometry before the model is built.
pub fn read_checkpoint_info(bytes: &[u8]) -> Result<CheckpointInfo> {
    parse(bytes).map(|(info, _)| info)
}

/// Deserializes parameters for `spec`, validating the model name and every
/// entry name/shape in order. Bit-exact inverse of [`save_checkpoint`].
pub fn load_checkpoint(bytes: &[u8], spec: &ModelSpec) -> Result<(Params<f32>, CheckpointMeta)> {
    let (info, values) = parse(bytes)?;
    if info.model_name != spec.name {
        return Err(Error::format(format!(
            "checkpoint: model name \"{}\" does not match \"{}\"",
            info.model_name, spec.name
        )));
    }
    let decls = spec.param_decls();
    if info.entries.len() != decls.len() {
        return Err(Error::format(format!(
            "checkpoint: {} entries, model declares {}",
            info.entries.len(),
            decls.len()
        )));
    }
    let mut entries = Vec::with_capacity(decls.len());
    let mut index = HashMap::new();
    for (i, ((name, dims), decl)) in info.entries.into_iter().zip(&decls).enumerate() {
        if name != decl.name || dims != decl.shape {
            return Err(Error::format(format!(
                "checkpoint: entry {i} \"{name}\" {dims:?} does not match declared \"{}\" {:?}",
                decl.name, decl.shape
            )));
        }
        let tensor = Tensor::new(dims, values[i].clone())?;
        index.insert(name.clone(), i);
        entries.push((name, tensor));
    }
    Ok((Params { entries, index }, info.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_preset, init_params, PRESET_MINI_EFFICIENTNETB0, PRESET_MINI_MOBILENETV2};
    use crate::rng::Rng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta { epoch: 7, best_val_metric: 0.925 }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let spec = build_preset(PRESET_MINI_MOBILENETV2, 5, 3).unwrap();
        let params = init_params::<f32>(&spec, &mut Rng::new(12)).unwrap();
        let bytes = save_checkpoint(&spec, &params, meta()).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&bytes, &spec).unwrap();
        assert_eq!(loaded_meta, meta());
        for i in 0..params.len() {
            let (name, a) = params.entry(i);
            let (name2, b) = loaded.entry(i);
            assert_eq!(name, name2);
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {name}"
            );
        }
        // Re-serialization is byte-identical.
        assert_eq!(save_checkpoint(&spec, &loaded, loaded_meta).unwrap(), bytes);
    }

    #[test]
    fn cross_model_load_names_first_mismatch() {
        let mn = build_preset(PRESET_MINI_MOBILENETV2, 5, 3).unwrap();
        let en = build_preset(PRESET_MINI_EFFICIENTNETB0, 5, 3).unwrap();
        let params = init_params::<f32>(&mn, &mut Rng::new(13)).unwrap();
        let bytes = save_checkpoint(&mn, &params, meta()).unwrap();
        let err = load_checkpoint(&bytes, &en).unwrap_err();
        assert!(err.to_string().contains("mini-mobilenetv2"), "{err}");
    }

    #[test]
    fn wrong_head_width_names_entry() {
        let five = build_preset(PRESET_MINI_MOBILENETV2, 5, 3).unwrap();
        let three = build_preset(PRESET_MINI_MOBILENETV2, 3, 3).unwrap();
        let params = init_params::<f32>(&five, &mut Rng::new(14)).unwrap();
        let bytes = save_checkpoint(&five, &params, meta()).unwrap();
        let err = load_checkpoint(&bytes, &three).unwrap_err();
        assert!(err.to_string().contains("head.fc.w"), "{err}");
    }

    #[test]
    fn truncation_reports_unexpected_end() {
        let spec = build_preset(PRESET_MINI_MOBILENETV2, 2, 1).unwrap();
        let params = init_params::<f32>(&spec, &mut Rng::new(15)).unwrap();
        let bytes = save_checkpoint(&spec, &params, meta()).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = load_checkpoint(&bytes[..cut], &spec).unwrap_err();
            assert!(err.to_string().contains("unexpected end"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = load_checkpoint(b"NOPE", &build_preset(PRESET_MINI_MOBILENETV2, 2, 1).unwrap()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn info_reports_geometry() {
        let spec = build_preset(PRESET_MINI_EFFICIENTNETB0, 4, 1).unwrap();
        let params = init_params::<f32>(&spec, &mut Rng::new(16)).unwrap();
        let bytes = save_checkpoint(&spec, &params, meta()).unwrap();
        let info = read_checkpoint_info(&bytes).unwrap();
        assert_eq!(info.model_name, PRESET_MINI_EFFICIENTNETB0);
        let stem = info.entries.iter().find(|(n, _)| n == "stem.conv.w").unwrap();
        assert_eq!(stem.1, vec![8, 1, 3, 3]);
        let fc = info.entries.iter().find(|(n, _)| n == "head.fc.w").unwrap();
        assert_eq!(fc.1, vec![4, 64]);
    }
}

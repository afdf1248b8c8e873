//! Bit-exact checkpoints.
//!
//! Layout: magic `DPBENCH1`, version u32 (little endian), header length u32,
//! a UTF-8 `key = value` header (model and optimizer configuration, step
//! counter, RNG state), then raw little-endian 64-bit floats: every store
//! entry in order, followed by the optimizer moment vectors when present.

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::train::Optimizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPBENCH1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub fields: Vec<(String, String)>,
    pub floats: Vec<f64>,
}

impl Checkpoint {
    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.field(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing header field {key}")))
    }
}

/// Serializes store parameters plus optional optimizer state.
pub fn save_checkpoint(
    fields: &[(String, String)],
    store: &ParamStore,
    optimizer: Option<&Optimizer>,
) -> Result<Vec<u8>> {
    let param_f64: usize = store.iter().map(|p| p.value.numel()).sum();
    let moments = optimizer.map(|o| o.moments_flat()).unwrap_or_default();

    let mut header = String::new();
    for (k, v) in fields {
        if v.contains('\n') || k.contains('\n') {
            return Err(Error::Checkpoint(format!("header field {k} contains a newline")));
        }
        header.push_str(k);
        header.push_str(" = ");
        header.push_str(v);
        header.push('\n');
    }
    header.push_str(&format!("payload.param_f64 = {param_f64}\n"));
    header.push_str(&format!("payload.moment_f64 = {}\n", moments.len()));

    let mut out = Vec::with_capacity(16 + header.len() + (param_f64 + moments.len()) * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in &moments {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated checkpoint".to_string()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("bounded"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("bounded")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated checkpoint header".to_string()));
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".to_string()))?;
    let mut fields = Vec::new();
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    let ck = Checkpoint { version, fields, floats: Vec::new() };
    let param_f64: usize = ck
        .require("payload.param_f64")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad payload.param_f64".to_string()))?;
    let moment_f64: usize = ck
        .require("payload.moment_f64")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad payload.moment_f64".to_string()))?;
    let payload = &bytes[16 + header_len..];
    let expected = (param_f64 + moment_f64) * 8;
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut floats = Vec::with_capacity(param_f64 + moment_f64);
    for chunk in payload.chunks_exact(8) {
        floats.push(f64::from_le_bytes(chunk.try_into().expect("bounded")));
    }
    Ok(Checkpoint { floats, ..ck })
}

/// Writes checkpoint floats back into a freshly built store (and optimizer),
/// which must have the same layout as at save time.
pub fn restore_store(ck: &Checkpoint, store: &mut ParamStore, optimizer: Option<&mut Optimizer>) -> Result<()> {
    let param_f64: usize = store.iter().map(|p| p.value.numel()).sum();
    let declared: usize = ck.require("payload.param_f64")?.parse().expect("validated at load");
    if declared != param_f64 {
        return Err(Error::Checkpoint(format!(
            "checkpoint carries {declared} parameter values, model expects {param_f64}"
        )));
    }
    let mut off = 0;
    for i in 0..store.len() {
        let p = store.get_mut(i);
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&ck.floats[off..off + n]);
        off += n;
    }
    if let Some(opt) = optimizer {
        let t: u64 = ck
            .field("state.optimizer_t")
            .unwrap_or("0")
            .parse()
            .map_err(|_| Error::Checkpoint("bad state.optimizer_t".to_string()))?;
        opt.restore_moments(&ck.floats[off..], t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamKind;
    use crate::tensor::Tensor;
    use crate::train::OptimizerConfig;

    fn toy_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap(), ParamKind::Bias, true)
            .unwrap();
        s.add("b", Tensor::new(vec![2], vec![5.0, 6.0]).unwrap(), ParamKind::BnRunningMean, false)
            .unwrap();
        s
    }

    fn toy_fields() -> Vec<(String, String)> {
        vec![
            ("model.task".to_string(), "mono".to_string()),
            ("state.step".to_string(), "7".to_string()),
            ("state.rng_seed".to_string(), "42".to_string()),
        ]
    }

    #[test]
    fn save_load_save_is_identical() {
        let store = toy_store();
        let opt = Optimizer::new(&OptimizerConfig::default(), &store);
        let bytes = save_checkpoint(&toy_fields(), &store, Some(&opt)).unwrap();
        let ck = load_checkpoint(&bytes).unwrap();
        let mut store2 = toy_store();
        let mut opt2 = Optimizer::new(&OptimizerConfig::default(), &store2);
        restore_store(&ck, &mut store2, Some(&mut opt2)).unwrap();
        let bytes2 = save_checkpoint(&toy_fields(), &store2, Some(&opt2)).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(ck.field("model.task"), Some("mono"));
        assert_eq!(ck.field("state.step"), Some("7"));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let store = toy_store();
        let mut bytes = save_checkpoint(&toy_fields(), &store, None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(load_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let store = toy_store();
        let bytes = save_checkpoint(&toy_fields(), &store, None).unwrap();
        assert!(load_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        assert!(load_checkpoint(&bytes[..10]).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let store = toy_store();
        let mut bytes = save_checkpoint(&toy_fields(), &store, None).unwrap();
        bytes[8] = 99;
        assert!(load_checkpoint(&bytes).is_err());
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let store = toy_store();
        let bytes = save_checkpoint(&toy_fields(), &store, None).unwrap();
        let ck = load_checkpoint(&bytes).unwrap();
        let mut small = ParamStore::new();
        small
            .add("a", Tensor::new(vec![1], vec![0.0]).unwrap(), ParamKind::Bias, true)
            .unwrap();
        assert!(restore_store(&ck, &mut small, None).is_err());
    }
}

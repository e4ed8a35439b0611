//! Named-tensor persistence and checkpoint arithmetic.
//!
//! The on-disk container is the safetensors layout: an 8-byte little-endian
//! header length, a UTF-8 JSON header mapping tensor names to
//! `{"dtype":"F32","shape":[…],"data_offsets":[begin,end]}` plus an optional
//! `"__metadata__"` string map, followed by the concatenated row-major
//! little-endian payloads. Writing is canonical — `__metadata__` first, then
//! tensor names in lexicographic order, payloads packed in the same order
//! with no padding — so equal checkpoints produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCH_ID_KEY: &str = "arch_id";
pub const METADATA_KEY: &str = "__metadata__";

/// Ordered map of named f32 tensors plus string metadata.
///
/// Iteration order is lexicographic by name, which is also the canonical
/// order for serialization and hashing. Checkpoints are immutable in spirit:
/// operations return new values rather than mutating shared state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor<f32>>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Appends a lineage note (creation history) to the metadata.
    pub fn push_lineage(&mut self, note: &str) {
        let entry = match self.metadata.get("lineage") {
            Some(prev) => format!("{prev} | {note}"),
            None => note.to_string(),
        };
        self.metadata.insert("lineage".into(), entry);
    }

    /// Architecture identity: the metadata `arch_id` when present, otherwise
    /// the structural hash. Derived checkpoints inherit the metadata value,
    /// so family identity survives transformations that keep the schema.
    pub fn arch_id(&self) -> String {
        self.metadata
            .get(ARCH_ID_KEY)
            .cloned()
            .unwrap_or_else(|| self.structural_id())
    }

    /// Hash of the ordered (name, shape) pairs; two checkpoints with equal
    /// structural ids accept the same adapters and merges.
    pub fn structural_id(&self) -> String {
        structural_id_of(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }

    /// Stamps `arch_id` from the current structure.
    pub fn stamp_arch_id(&mut self) {
        let id = self.structural_id();
        self.metadata.insert(ARCH_ID_KEY.into(), id);
    }

    /// SHA-256 of the canonical serialized bytes, stable across runs.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_bytes());
        hex(&hasher.finalize())
    }

    /// Canonical serialized form (see module docs).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        if !self.metadata.is_empty() {
            header.push_str("\"__metadata__\":{");
            for (i, (k, v)) in self.metadata.iter().enumerate() {
                if i > 0 {
                    header.push(',');
                }
                let _ = write!(header, "{}:{}", json_str(k), json_str(v));
            }
            header.push('}');
            first = false;
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !first {
                header.push(',');
            }
            first = false;
            let nbytes = t.numel() * 4;
            let _ = write!(
                header,
                "{}:{{\"dtype\":\"F32\",\"shape\":{:?},\"data_offsets\":[{},{}]}}",
                json_str(name),
                t.shape(),
                offset,
                offset + nbytes
            );
            offset += nbytes;
        }
        header.push('}');

        let header_bytes = header.as_bytes();
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(header_bytes);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("header length", "file shorter than 8 bytes"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_len: usize = header_len
            .try_into()
            .map_err(|_| Error::format("header length", "does not fit in usize"))?;
        let payload_start = 8usize
            .checked_add(header_len)
            .ok_or_else(|| Error::format("header length", "overflows file offset"))?;
        if payload_start > bytes.len() {
            return Err(Error::format(
                "header length",
                format!(
                    "header claims {header_len} bytes but file has {} after the prefix",
                    bytes.len() - 8
                ),
            ));
        }
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..payload_start])
                .map_err(|e| Error::format("header json", e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut ckpt = Checkpoint::new();
        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for (name, value) in &header {
            if name == METADATA_KEY {
                let map = value
                    .as_object()
                    .ok_or_else(|| Error::format(METADATA_KEY, "not a string map"))?;
                for (k, v) in map {
                    let s = v
                        .as_str()
                        .ok_or_else(|| Error::format(METADATA_KEY, format!("`{k}` not a string")))?;
                    ckpt.metadata.insert(k.clone(), s.to_string());
                }
                continue;
            }
            let entry = value
                .as_object()
                .ok_or_else(|| Error::format(name, "tensor entry is not an object"))?;
            let dtype = entry.get("dtype").and_then(|v| v.as_str()).unwrap_or("");
            if dtype != "F32" {
                return Err(Error::format(name, format!("unsupported dtype `{dtype}`")));
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::format(name, "missing shape"))?
                .iter()
                .map(|v| {
                    v.as_u64()
                        .map(|d| d as usize)
                        .ok_or_else(|| Error::format(name, "non-integer shape entry"))
                })
                .collect::<Result<_>>()?;
            let offsets = entry
                .get("data_offsets")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::format(name, "missing data_offsets"))?;
            if offsets.len() != 2 {
                return Err(Error::format(name, "data_offsets must have two entries"));
            }
            let begin = offsets[0]
                .as_u64()
                .ok_or_else(|| Error::format(name, "non-integer offset"))? as usize;
            let end = offsets[1]
                .as_u64()
                .ok_or_else(|| Error::format(name, "non-integer offset"))? as usize;
            if begin > end || end > payload.len() {
                return Err(Error::format(
                    name,
                    format!(
                        "data_offsets [{begin},{end}] out of bounds for payload {}",
                        payload.len()
                    ),
                ));
            }
            let numel: usize = shape.iter().product();
            if end - begin != numel * 4 {
                return Err(Error::format(
                    name,
                    format!(
                        "payload span {} does not match shape {shape:?} ({} bytes)",
                        end - begin,
                        numel * 4
                    ),
                ));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in payload[begin..end].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format(name, format!("invalid tensor: {e}")))?;
            ranges.push((begin, end, name.clone()));
            ckpt.tensors.insert(name.clone(), tensor);
        }

        ranges.sort_unstable();
        for pair in ranges.windows(2) {
            let (_, end_a, name_a) = &pair[0];
            let (begin_b, _, name_b) = &pair[1];
            if begin_b < end_a {
                return Err(Error::format(
                    name_b,
                    format!("data range overlaps `{name_a}`"),
                ));
            }
        }
        Ok(ckpt)
    }
}

/// Structural hash over ordered (name, shape) pairs. Exposed so a schema can
/// predict the id a freshly initialized checkpoint will carry.
pub fn structural_id_of<'a>(entries: impl Iterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut desc = String::new();
    for (name, shape) in entries {
        let _ = write!(desc, "{name}:{shape:?};");
    }
    let mut hasher = Sha256::new();
    hasher.update(desc.as_bytes());
    hex(&hasher.finalize()[..16])
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, ckpt.canonical_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Parameter delta `expert − base`, the unit of task arithmetic.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor<f32>>,
    pub expert_id: String,
    pub base_id: String,
    /// Names present in only one of the two checkpoints, skipped with a
    /// warning instead of failing the diff.
    pub skipped: Vec<String>,
}

/// Elementwise difference between two homologous checkpoints.
///
/// Shared names with equal shapes are differenced; names present on one side
/// only are recorded in `skipped`; a shape mismatch on a shared name is an
/// error. Homology (equal `arch_id`) is checked first.
pub fn task_vector(expert: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    let (ea, ba) = (expert.arch_id(), base.arch_id());
    if ea != ba {
        return Err(Error::homology(format!(
            "task_vector across architectures: expert {ea} vs base {ba}"
        )));
    }
    let mut deltas = BTreeMap::new();
    let mut skipped = Vec::new();
    let names: std::collections::BTreeSet<&String> =
        expert.names().chain(base.names()).collect();
    for name in names {
        match (expert.get(name), base.get(name)) {
            (Some(e), Some(b)) => {
                if e.shape() != b.shape() {
                    return Err(Error::shape(format!(
                        "tensor `{name}` shape {:?} vs {:?}",
                        e.shape(),
                        b.shape()
                    )));
                }
                deltas.insert(name.clone(), e.sub(b)?);
            }
            _ => skipped.push(name.clone()),
        }
    }
    Ok(TaskVector {
        deltas,
        expert_id: expert.content_hash(),
        base_id: base.content_hash(),
        skipped,
    })
}

/// `base + weight · tv`, copying untouched tensors verbatim and appending a
/// lineage note.
pub fn apply_delta(base: &Checkpoint, tv: &TaskVector, weight: f32) -> Result<Checkpoint> {
    for (name, delta) in &tv.deltas {
        let target = base.get(name).ok_or_else(|| {
            Error::shape(format!("delta names `{name}` which base does not have"))
        })?;
        if target.shape() != delta.shape() {
            return Err(Error::shape(format!(
                "tensor `{name}` shape {:?} vs delta {:?}",
                target.shape(),
                delta.shape()
            )));
        }
    }
    let mut out = base.clone();
    for (name, delta) in &tv.deltas {
        let updated = out.get(name).unwrap().add(&delta.scale(weight))?;
        out.insert(name.clone(), updated);
    }
    out.push_lineage(&format!(
        "apply_delta(weight={weight}, expert={}, base={})",
        &tv.expert_id[..12.min(tv.expert_id.len())],
        &tv.base_id[..12.min(tv.base_id.len())]
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_fill, SeededRng};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = SeededRng::new(21);
        let mut ckpt = Checkpoint::new();
        ckpt.insert("alpha", gaussian_fill(&[2, 3], &mut rng, 1.0).unwrap());
        ckpt.insert("beta", gaussian_fill(&[4], &mut rng, 1.0).unwrap());
        ckpt.insert("gamma.w", gaussian_fill(&[3, 2], &mut rng, 1.0).unwrap());
        ckpt.set_metadata("note", "fixture");
        ckpt.stamp_arch_id();
        ckpt
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let ckpt = sample_checkpoint();
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let ckpt = Checkpoint::new();
        let bytes = ckpt.canonical_bytes();
        assert_eq!(&bytes[8..], b"{}");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn serialization_is_canonical() {
        let a = sample_checkpoint();
        let b = sample_checkpoint();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut a = Checkpoint::new();
        a.insert("x", Tensor::scalar(1.0));
        a.insert("a", Tensor::scalar(2.0));
        let mut b = Checkpoint::new();
        b.insert("a", Tensor::scalar(2.0));
        b.insert("x", Tensor::scalar(1.0));
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    /// Bytes written by hand from the format description, independent of the
    /// writer: one tensor "t" of shape [2] holding [1.0, 2.0].
    #[test]
    fn handcrafted_bytes_parse() {
        let header = br#"{"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.len(), 1);
        let t = ckpt.get("t").unwrap();
        assert_eq!(t.shape(), &[2]);
        assert_eq!(t.data(), &[1.0, 2.0]);
        // And the writer reproduces the same canonical bytes.
        assert_eq!(ckpt.canonical_bytes(), bytes);
    }

    #[test]
    fn header_length_past_eof_is_format_error() {
        let mut bytes = (1000u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "header length"));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = sample_checkpoint().canonical_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn overlapping_ranges_are_format_error() {
        let header = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 6]);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "b"), "{err}");
    }

    #[test]
    fn non_finite_payload_rejected() {
        let header = br#"{"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn task_vector_of_identical_checkpoints_is_zero() {
        let ckpt = sample_checkpoint();
        let tv = task_vector(&ckpt, &ckpt).unwrap();
        assert!(tv.skipped.is_empty());
        for delta in tv.deltas.values() {
            assert!(delta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn task_vector_fixed_pair_matches_elementwise_oracle() {
        let mut base = Checkpoint::new();
        base.insert("w", Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap());
        base.insert("b", Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap());
        base.stamp_arch_id();
        let mut expert = Checkpoint::new();
        expert.insert("w", Tensor::from_rows(&[vec![2.0f32, 1.0], vec![0.0, 6.0]]).unwrap());
        expert.insert("b", Tensor::new(vec![2], vec![1.5f32, -1.5]).unwrap());
        expert.stamp_arch_id();
        let tv = task_vector(&expert, &base).unwrap();
        assert_eq!(tv.deltas["w"].data(), &[1.0, -1.0, -3.0, 2.0]);
        assert_eq!(tv.deltas["b"].data(), &[1.0, -1.0]);
    }

    #[test]
    fn apply_delta_inverts_task_vector() {
        let base = sample_checkpoint();
        let mut expert = base.clone();
        let mut rng = SeededRng::new(99);
        let noise = gaussian_fill(&[2, 3], &mut rng, 0.3).unwrap();
        let bumped = expert.get("alpha").unwrap().add(&noise).unwrap();
        expert.insert("alpha", bumped);
        let tv = task_vector(&expert, &base).unwrap();
        let rebuilt = apply_delta(&base, &tv, 1.0).unwrap();
        for (name, t) in expert.tensors() {
            let diff = t.max_abs_diff(rebuilt.get(name).unwrap());
            assert!(diff <= 1e-7, "{name}: {diff}");
        }
    }

    #[test]
    fn apply_delta_weight_zero_is_identity_on_tensors() {
        let base = sample_checkpoint();
        let tv = task_vector(&base, &base).unwrap();
        let out = apply_delta(&base, &tv, 0.0).unwrap();
        for (name, t) in base.tensors() {
            assert_eq!(t, out.get(name).unwrap());
        }
    }

    #[test]
    fn apply_delta_weight_half_scalar_case() {
        let mut base = Checkpoint::new();
        base.insert("s", Tensor::scalar(2.0));
        base.stamp_arch_id();
        let mut expert = base.clone();
        expert.insert("s", Tensor::scalar(6.0));
        let tv = task_vector(&expert, &base).unwrap();
        let out = apply_delta(&base, &tv, 0.5).unwrap();
        assert_eq!(out.get("s").unwrap().data(), &[4.0]);
    }

    #[test]
    fn arch_id_mismatch_is_homology_error() {
        let a = sample_checkpoint();
        let mut b = Checkpoint::new();
        b.insert("other", Tensor::scalar(1.0));
        b.stamp_arch_id();
        assert!(matches!(task_vector(&a, &b), Err(Error::Homology(_))));
    }

    #[test]
    fn shared_name_shape_mismatch_is_error_even_with_matching_arch_metadata() {
        let a = sample_checkpoint();
        let mut b = a.clone();
        b.insert("alpha", Tensor::zeros(vec![3, 2]).unwrap());
        // Keep a's arch metadata so the homology gate passes.
        b.set_metadata(ARCH_ID_KEY, a.arch_id());
        let err = task_vector(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("alpha")), "{err}");
    }

    #[test]
    fn one_sided_names_are_skipped_with_warning() {
        let a = sample_checkpoint();
        let mut b = a.clone();
        b.insert("extra_head", Tensor::scalar(3.0));
        b.set_metadata(ARCH_ID_KEY, a.arch_id());
        let tv = task_vector(&a, &b).unwrap();
        assert_eq!(tv.skipped, vec!["extra_head".to_string()]);
        assert!(!tv.deltas.contains_key("extra_head"));
    }

    #[test]
    fn structural_id_ignores_metadata_but_tracks_shapes() {
        let mut a = sample_checkpoint();
        let id0 = a.structural_id();
        a.set_metadata("note", "changed");
        assert_eq!(a.structural_id(), id0);
        a.insert("alpha", Tensor::zeros(vec![6]).unwrap());
        assert_ne!(a.structural_id(), id0);
    }
}

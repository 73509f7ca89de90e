//! Core types ↔ tensor files. Every artifact header carries a `kind` and the
//! content hashes of the artifacts it was derived from.

use std::path::Path;

use mrf_core::dict::{make_grid, Dictionary, GridAxis, Subspace};
use mrf_core::forward::{KSpaceData, Tsmi};
use mrf_core::proxnet::Provenance;
use mrf_core::recon_dm::QMaps;
use mrf_core::sampling::SamplingMask;
use mrf_core::seqsim::SequenceParams;
use mrf_core::tensorfile::{hash_json, TensorFile};
use mrf_core::{MrfError, Result};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

pub fn read_kind(path: &Path, kind: &str) -> Result<TensorFile> {
    let tf = TensorFile::read(path).map_err(|e| match e {
        MrfError::Io(io) => MrfError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    if tf.header_str("kind") != Some(kind) {
        return Err(MrfError::Format(format!("{} is not a {kind} artifact", path.display())));
    }
    Ok(tf)
}

pub fn field<T: DeserializeOwned>(tf: &TensorFile, key: &str) -> Result<T> {
    let v = tf.header.get(key).cloned().ok_or_else(|| MrfError::Format(format!("artifact header lacks '{key}'")))?;
    Ok(serde_json::from_value(v)?)
}

/// Fails unless `tf.header[key]` equals the hash of the artifact actually supplied.
pub fn require_hash(tf: &TensorFile, key: &str, actual: &str, what: &str) -> Result<()> {
    let recorded = tf.header_str(key).unwrap_or("");
    if recorded != actual {
        return Err(MrfError::HashMismatch(format!("{what}: recorded {key} {recorded} but supplied artifact hashes to {actual}")));
    }
    Ok(())
}

pub fn sequence_hash(seq: &SequenceParams) -> String {
    hash_json(seq)
}

pub fn dictionary_file(d: &Dictionary, t1: GridAxis, t2: GridAxis, seq: &SequenceParams) -> Result<TensorFile> {
    let data: Vec<f32> = d.atoms.iter().map(|&v| v as f32).collect();
    TensorFile::from_f32(
        &[d.len(), d.l],
        &data,
        json!({
            "kind": "dictionary",
            "t1_axis": t1,
            "t2_axis": t2,
            "sequence": seq,
            "sequence_hash": sequence_hash(seq),
        }),
    )
}

pub fn dictionary_from(tf: &TensorFile) -> Result<(Dictionary, SequenceParams)> {
    let grid = make_grid(field(tf, "t1_axis")?, field(tf, "t2_axis")?)?;
    let dims = tf.dims_usize();
    if dims.len() != 2 || dims[0] != grid.len() {
        return Err(MrfError::Format(format!("dictionary dims {dims:?} disagree with its grid of {}", grid.len())));
    }
    let atoms: Vec<f64> = tf.to_f32()?.into_iter().map(f64::from).collect();
    Ok((Dictionary::from_atoms(atoms, dims[1], grid)?, field(tf, "sequence")?))
}

pub fn subspace_file(sub: &Subspace, dict: &TensorFile) -> Result<TensorFile> {
    TensorFile::from_f64(
        &[sub.l, sub.s],
        &sub.v,
        json!({
            "kind": "subspace",
            "singular_values": sub.singular_values,
            "dict_hash": dict.content_hash(),
            "sequence": dict.header["sequence"],
            "sequence_hash": dict.header["sequence_hash"],
            "t1_axis": dict.header["t1_axis"],
            "t2_axis": dict.header["t2_axis"],
        }),
    )
}

pub fn subspace_from(tf: &TensorFile) -> Result<(Subspace, SequenceParams)> {
    let dims = tf.dims_usize();
    if dims.len() != 2 {
        return Err(MrfError::Format("subspace must be two-dimensional".into()));
    }
    let mut sub = Subspace::from_basis(tf.to_f64()?, dims[0], dims[1])?;
    sub.singular_values = field(tf, "singular_values")?;
    Ok((sub, field(tf, "sequence")?))
}

pub fn mask_file(mask: &SamplingMask) -> Result<TensorFile> {
    let flat: Vec<i64> = mask.frames.iter().flatten().map(|&i| i as i64).collect();
    TensorFile::from_i64(
        &[flat.len()],
        &flat,
        json!({
            "kind": "masks",
            "grid_n": mask.grid_n,
            "m_per_frame": mask.m_per_frame(),
            "delta_deg": mask.delta_deg,
            "n_points": mask.n_points,
        }),
    )
}

pub fn mask_from(tf: &TensorFile) -> Result<SamplingMask> {
    let counts: Vec<usize> = field(tf, "m_per_frame")?;
    let flat = tf.to_i64()?;
    if counts.iter().sum::<usize>() != flat.len() {
        return Err(MrfError::Format("mask counts disagree with payload".into()));
    }
    let mut frames = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for c in counts {
        frames.push(flat[offset..offset + c].iter().map(|&i| i as usize).collect());
        offset += c;
    }
    let mask = SamplingMask {
        grid_n: field(tf, "grid_n")?,
        frames,
        delta_deg: field(tf, "delta_deg")?,
        n_points: field(tf, "n_points")?,
    };
    mask.validate()?;
    Ok(mask)
}

pub fn kspace_file(y: &KSpaceData, prov: &Provenance) -> Result<TensorFile> {
    let flat: Vec<_> = y.frames.iter().flatten().copied().collect();
    TensorFile::from_c128(
        &[flat.len()],
        &flat,
        json!({"kind": "kspace", "lengths": y.lengths(), "mask_hash": prov.mask, "subspace_hash": prov.subspace, "sequence_hash": prov.sequence}),
    )
}

pub fn kspace_from(tf: &TensorFile) -> Result<KSpaceData> {
    let lengths: Vec<usize> = field(tf, "lengths")?;
    let flat = tf.to_c128()?;
    if lengths.iter().sum::<usize>() != flat.len() {
        return Err(MrfError::Format("k-space lengths disagree with payload".into()));
    }
    let mut frames = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for l in lengths {
        frames.push(flat[offset..offset + l].to_vec());
        offset += l;
    }
    Ok(KSpaceData { frames })
}

pub fn tsmi_file(x: &Tsmi, extra: Value) -> Result<TensorFile> {
    let mut header = json!({"kind": "tsmi"});
    merge(&mut header, extra);
    TensorFile::from_c128(&[x.s, x.grid_n, x.grid_n], &x.data, header)
}

pub fn tsmi_from(tf: &TensorFile) -> Result<Tsmi> {
    let d = tf.dims_usize();
    if d.len() != 3 || d[1] != d[2] {
        return Err(MrfError::Format(format!("TSMI dims {d:?} are not [s, N, N]")));
    }
    Ok(Tsmi {
        grid_n: d[1],
        s: d[0],
        data: tf.to_c128()?,
    })
}

/// Planes: T1 (ms), T2 (ms), PD, foreground (0/1).
pub fn qmaps_file(q: &QMaps, extra: Value) -> Result<TensorFile> {
    let mut data = Vec::with_capacity(4 * q.pixels());
    data.extend(&q.t1_ms);
    data.extend(&q.t2_ms);
    data.extend(&q.pd);
    data.extend(q.foreground.iter().map(|&f| if f { 1.0 } else { 0.0 }));
    let mut header = json!({"kind": "qmaps", "planes": ["t1_ms", "t2_ms", "pd", "foreground"]});
    merge(&mut header, extra);
    TensorFile::from_f64(&[4, q.grid_n, q.grid_n], &data, header)
}

pub fn qmaps_from(tf: &TensorFile) -> Result<QMaps> {
    let d = tf.dims_usize();
    if d.len() != 3 || d[0] != 4 || d[1] != d[2] {
        return Err(MrfError::Format(format!("map dims {d:?} are not [4, N, N]")));
    }
    let v = tf.to_f64()?;
    let np = d[1] * d[2];
    Ok(QMaps {
        grid_n: d[1],
        t1_ms: v[..np].to_vec(),
        t2_ms: v[np..2 * np].to_vec(),
        pd: v[2 * np..3 * np].to_vec(),
        foreground: v[3 * np..].iter().map(|&f| f > 0.5).collect(),
    })
}

fn merge(into: &mut Value, extra: Value) {
    if let (Some(a), Value::Object(b)) = (into.as_object_mut(), extra) {
        a.extend(b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mrf_core::sampling::default_masks;

    #[test]
    fn masks_round_trip() {
        let m = default_masks(32, 12).unwrap();
        let tf = TensorFile::from_bytes(&mask_file(&m).unwrap().to_bytes()).unwrap();
        assert_eq!(mask_from(&tf).unwrap(), m);
    }

    #[test]
    fn qmaps_round_trip() {
        let mut q = QMaps::background(3);
        q.t1_ms[4] = 800.0;
        q.t2_ms[4] = 80.0;
        q.pd[4] = 0.7;
        q.foreground[4] = true;
        let tf = qmaps_file(&q, json!({"algo": "dm"})).unwrap();
        assert_eq!(qmaps_from(&tf).unwrap(), q);
        assert_eq!(tf.header_str("algo"), Some("dm"));
    }
}

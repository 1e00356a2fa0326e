//! Feature-bundle files, prototype-bank snapshots and run artifacts.
//!
//! A bundle directory holds `manifest.json` (human readable), `tensors.bin`
//! (descriptions then base class embeddings, little-endian `f32`, row-major),
//! `samples.bin` (a stream of sample records) and optionally `mask.bin`
//! (one byte per view marking informative views). The layout is documented
//! in `docs/format.md`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{FeatureBundle, Sample};
use crate::error::{Error, FormatError, Result};
use crate::image_anchor::PrototypeBank;
use crate::text_anchor::DescriptionBank;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32-le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const MASK_FILE: &str = "mask.bin";

/// Size of the fixed sample-record header: id (u64), label (i32), count (u32).
pub const RECORD_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub byte_length: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub dtype: String,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "N")]
    pub descriptions_per_class: usize,
    #[serde(rename = "B")]
    pub views_per_sample: usize,
    #[serde(default)]
    pub variable_views: bool,
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default)]
    pub original_view_index: usize,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub samples: FileEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub informative_mask: Option<FileEntry>,
}

fn default_true() -> bool {
    true
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(7 + 64);
    s.push_str("sha256:");
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    f.write_all(bytes).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path).map_err(|e| FormatError::io(path, e))?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    Ok(())
}

fn push_f32s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn f32_at(bytes: &[u8], pos: usize) -> f64 {
    f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as f64
}

/// Encode every sample as a record; returns the bytes.
pub fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut buf = Vec::new();
    for s in samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        let label: i32 = s.label.map_or(-1, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
        buf.extend_from_slice(&(s.views.nrows() as u32).to_le_bytes());
        push_f32s(&mut buf, s.views.iter());
    }
    buf
}

/// Write a bundle directory. Views and tensors are stored as `f32`.
pub fn write_bundle(dir: &Path, bundle: &FeatureBundle) -> Result<BundleManifest> {
    bundle.validate()?;
    ensure_dir(dir)?;
    let (c, n, d) = bundle.descriptions.descriptions().dim();

    let mut tensors = Vec::new();
    push_f32s(&mut tensors, bundle.descriptions.descriptions().iter());
    let desc_len = tensors.len();
    push_f32s(&mut tensors, bundle.base_class_embeddings.iter());
    let entries = vec![
        TensorEntry {
            name: "descriptions".into(),
            shape: vec![c, n, d],
            file: TENSORS_FILE.into(),
            byte_offset: 0,
            byte_length: desc_len as u64,
            checksum: sha256_hex(&tensors[..desc_len]),
        },
        TensorEntry {
            name: "base_class_embeddings".into(),
            shape: vec![c, d],
            file: TENSORS_FILE.into(),
            byte_offset: desc_len as u64,
            byte_length: (tensors.len() - desc_len) as u64,
            checksum: sha256_hex(&tensors[desc_len..]),
        },
    ];
    write_file(&dir.join(TENSORS_FILE), &tensors)?;

    let samples = encode_samples(&bundle.samples);
    write_file(&dir.join(SAMPLES_FILE), &samples)?;

    let views_per_sample = bundle.samples.first().map_or(0, |s| s.views.nrows());
    let variable_views = bundle
        .samples
        .iter()
        .any(|s| s.views.nrows() != views_per_sample);

    let informative_mask = match &bundle.informative_mask {
        Some(mask) => {
            let bytes: Vec<u8> = mask.iter().flatten().map(|&m| m as u8).collect();
            write_file(&dir.join(MASK_FILE), &bytes)?;
            Some(FileEntry {
                file: MASK_FILE.into(),
                byte_length: bytes.len() as u64,
                checksum: sha256_hex(&bytes),
            })
        }
        None => None,
    };

    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        dim: d,
        classes: c,
        descriptions_per_class: n,
        views_per_sample,
        variable_views,
        normalized: true,
        original_view_index: bundle.original_view_index,
        num_samples: bundle.samples.len(),
        class_names: bundle.descriptions.class_names().to_vec(),
        tensors: entries,
        samples: FileEntry {
            file: SAMPLES_FILE.into(),
            byte_length: samples.len() as u64,
            checksum: sha256_hex(&samples),
        },
        informative_mask,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    // Check the version before the full schema so future layouts get a clear error.
    #[derive(Deserialize)]
    struct Probe {
        format_version: u32,
    }
    let probe: Probe = serde_json::from_slice(&bytes).map_err(|source| FormatError::Manifest {
        path: path.clone(),
        source,
    })?;
    if probe.format_version > FORMAT_VERSION || probe.format_version == 0 {
        return Err(FormatError::VersionUnsupported {
            found: probe.format_version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let m: BundleManifest =
        serde_json::from_slice(&bytes).map_err(|source| FormatError::Manifest { path, source })?;
    if m.dtype != DTYPE {
        return Err(FormatError::ShapeMismatch(format!("unsupported dtype {:?}", m.dtype)).into());
    }
    Ok(m)
}

/// SHA-256 of the manifest file, which in turn pins every payload checksum.
pub fn bundle_checksum(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(&dir.join(MANIFEST_FILE))?))
}

fn check_sum(file: &str, bytes: &[u8], expected: &str) -> Result<()> {
    let actual = sha256_hex(bytes);
    if actual != expected {
        return Err(FormatError::ChecksumMismatch {
            file: file.to_string(),
            expected: expected.to_string(),
            actual,
        }
        .into());
    }
    Ok(())
}

fn tensor_bytes<'a>(
    files: &'a mut Vec<(String, Vec<u8>)>,
    dir: &Path,
    entry: &TensorEntry,
    expected_shape: &[usize],
) -> Result<&'a [u8]> {
    if entry.shape != expected_shape {
        return Err(FormatError::ShapeMismatch(format!(
            "tensor {} has shape {:?}, manifest dimensions imply {:?}",
            entry.name, entry.shape, expected_shape
        ))
        .into());
    }
    let elems: usize = expected_shape.iter().product();
    if entry.byte_length != (elems as u64) * 4 {
        return Err(FormatError::ShapeMismatch(format!(
            "tensor {} declares {} bytes for {} f32 values",
            entry.name, entry.byte_length, elems
        ))
        .into());
    }
    if !files.iter().any(|(f, _)| f == &entry.file) {
        let bytes = read_file(&dir.join(&entry.file))?;
        files.push((entry.file.clone(), bytes));
    }
    let (_, bytes) = files
        .iter()
        .find(|(f, _)| f == &entry.file)
        .expect("loaded");
    let end = entry.byte_offset.checked_add(entry.byte_length);
    match end {
        Some(end) if end <= bytes.len() as u64 => {}
        _ => {
            return Err(FormatError::TruncatedRecord {
                file: entry.file.clone(),
                offset: bytes.len() as u64,
            }
            .into())
        }
    }
    let slice =
        &bytes[entry.byte_offset as usize..(entry.byte_offset + entry.byte_length) as usize];
    check_sum(&entry.file, slice, &entry.checksum)?;
    Ok(slice)
}

fn decode_floats(bytes: &[u8]) -> Vec<f64> {
    (0..bytes.len() / 4).map(|i| f32_at(bytes, 4 * i)).collect()
}

fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut r in m.rows_mut() {
        let u = crate::embedding::l2_normalize(r.view())?;
        r.assign(&u);
    }
    Ok(())
}

/// Decode a sample stream, checking every length against the bytes present.
pub fn decode_samples(
    file: &str,
    bytes: &[u8],
    count: usize,
    dim: usize,
    views_per_sample: usize,
    variable_views: bool,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count.min(bytes.len() / RECORD_HEADER.max(1)));
    let mut pos = 0usize;
    for _ in 0..count {
        if bytes.len() - pos < RECORD_HEADER {
            return Err(FormatError::TruncatedRecord {
                file: file.into(),
                offset: pos as u64,
            }
            .into());
        }
        let id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
        let label = i32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().expect("4 bytes"));
        let views =
            u32::from_le_bytes(bytes[pos + 12..pos + 16].try_into().expect("4 bytes")) as usize;
        if !variable_views && views != views_per_sample {
            return Err(FormatError::ShapeMismatch(format!(
                "sample {id} at byte {pos} has {views} views, manifest declares B = {views_per_sample}"
            ))
            .into());
        }
        let payload = (views as u64) * (dim as u64) * 4;
        let start = pos + RECORD_HEADER;
        if payload > (bytes.len() - start) as u64 {
            return Err(FormatError::TruncatedRecord {
                file: file.into(),
                offset: pos as u64,
            }
            .into());
        }
        let end = start + payload as usize;
        let values = decode_floats(&bytes[start..end]);
        let views = Array2::from_shape_vec((views, dim), values).expect("shape checked");
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => {
                return Err(FormatError::ShapeMismatch(format!("sample {id} has label {l}")).into())
            }
        };
        out.push(Sample { id, label, views });
        pos = end;
    }
    if pos != bytes.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after {count} sample records in {file}",
            bytes.len() - pos
        ))
        .into());
    }
    Ok(out)
}

/// Load and fully validate a bundle directory. Nothing is returned unless
/// every checksum and shape agrees.
pub fn read_bundle(dir: &Path) -> Result<FeatureBundle> {
    let m = read_manifest(dir)?;
    let (c, n, d) = (m.classes, m.descriptions_per_class, m.dim);
    if c == 0 || n == 0 || d == 0 {
        return Err(FormatError::ShapeMismatch("C, N and D must be positive".into()).into());
    }
    if m.class_names.len() != c {
        return Err(FormatError::ShapeMismatch(format!(
            "{} class names for C = {c}",
            m.class_names.len()
        ))
        .into());
    }
    let find = |name: &str| {
        m.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FormatError::ShapeMismatch(format!("required tensor {name} missing")))
    };
    let desc_entry = find("descriptions")?;
    let base_entry = find("base_class_embeddings")?;
    let mut files = Vec::new();
    let desc = decode_floats(tensor_bytes(&mut files, dir, desc_entry, &[c, n, d])?);
    let base = decode_floats(tensor_bytes(&mut files, dir, base_entry, &[c, d])?);
    let mut desc = Array3::from_shape_vec((c, n, d), desc).expect("shape checked");
    let mut base = Array2::from_shape_vec((c, d), base).expect("shape checked");

    let sample_bytes = read_file(&dir.join(&m.samples.file))?;
    let mut samples = decode_samples(
        &m.samples.file,
        &sample_bytes,
        m.num_samples,
        d,
        m.views_per_sample,
        m.variable_views,
    )?;
    check_sum(&m.samples.file, &sample_bytes, &m.samples.checksum)?;

    let informative_mask = match &m.informative_mask {
        Some(entry) => {
            let bytes = read_file(&dir.join(&entry.file))?;
            check_sum(&entry.file, &bytes, &entry.checksum)?;
            let total: usize = samples.iter().map(|s| s.views.nrows()).sum();
            if bytes.len() != total {
                return Err(FormatError::ShapeMismatch(format!(
                    "mask has {} entries for {total} views",
                    bytes.len()
                ))
                .into());
            }
            let mut rows = Vec::with_capacity(samples.len());
            let mut pos = 0;
            for s in &samples {
                let b = s.views.nrows();
                rows.push(bytes[pos..pos + b].iter().map(|&x| x != 0).collect());
                pos += b;
            }
            Some(rows)
        }
        None => None,
    };

    if !m.normalized {
        for mut cls in desc.outer_iter_mut() {
            for mut r in cls.rows_mut() {
                let u = crate::embedding::l2_normalize(r.view())?;
                r.assign(&u);
            }
        }
        normalize_rows(&mut base)?;
        for s in &mut samples {
            normalize_rows(&mut s.views)?;
        }
    }

    let bundle = FeatureBundle {
        descriptions: DescriptionBank::new(desc, m.class_names.clone())?,
        base_class_embeddings: base,
        samples,
        original_view_index: m.original_view_index,
        informative_mask,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Write a prototype-bank snapshot: `prototypes.bin` (`C x D` f32-le),
/// `counts.bin` (`C` u64-le) and a small JSON header.
pub fn write_bank_snapshot(dir: &Path, bank: &PrototypeBank) -> Result<()> {
    ensure_dir(dir)?;
    let mut protos = Vec::new();
    push_f32s(&mut protos, bank.prototypes().iter());
    let counts: Vec<u8> = bank.counts().iter().flat_map(|c| c.to_le_bytes()).collect();
    write_file(&dir.join("prototypes.bin"), &protos)?;
    write_file(&dir.join("counts.bin"), &counts)?;
    let header = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "C": bank.num_classes(),
        "D": bank.dim(),
        "prototypes": sha256_hex(&protos),
        "counts": sha256_hex(&counts),
    });
    write_file(
        &dir.join("bank.json"),
        serde_json::to_string_pretty(&header)
            .expect("json")
            .as_bytes(),
    )
}

pub fn read_bank_snapshot(dir: &Path) -> Result<PrototypeBank> {
    let hpath = dir.join("bank.json");
    let header: serde_json::Value =
        serde_json::from_slice(&read_file(&hpath)?).map_err(|source| FormatError::Manifest {
            path: hpath,
            source,
        })?;
    let get = |k: &str| header.get(k).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let (c, d) = (get("C"), get("D"));
    let protos = read_file(&dir.join("prototypes.bin"))?;
    let counts = read_file(&dir.join("counts.bin"))?;
    let sum = |k: &str| {
        header
            .get(k)
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string()
    };
    check_sum("prototypes.bin", &protos, &sum("prototypes"))?;
    check_sum("counts.bin", &counts, &sum("counts"))?;
    if protos.len() != c * d * 4 || counts.len() != c * 8 {
        return Err(
            FormatError::ShapeMismatch("bank snapshot sizes disagree with header".into()).into(),
        );
    }
    let p = Array2::from_shape_vec((c, d), decode_floats(&protos)).expect("shape checked");
    let n = counts
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    PrototypeBank::from_parts(p, n)
}

/// Files making up a finished run directory.
pub struct RunArtifacts<'a> {
    pub manifest: &'a serde_json::Value,
    pub log_lines: &'a [String],
    pub summary: &'a serde_json::Value,
}

pub fn write_run(dir: &Path, run: &RunArtifacts<'_>) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("json") + "\n";
    write_file(
        &dir.join("run_manifest.json"),
        pretty(run.manifest).as_bytes(),
    )?;
    let mut log = String::new();
    for line in run.log_lines {
        log.push_str(line);
        log.push('\n');
    }
    write_file(&dir.join("results.jsonl"), log.as_bytes())?;
    write_file(&dir.join("summary.json"), pretty(run.summary).as_bytes())?;
    Ok(dir.to_path_buf())
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Format(FormatError::io(PathBuf::new(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, d));
        for mut r in m.rows_mut() {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            // quantize so the f32 round trip is exact
            r.assign(&l2_normalize(v.view()).unwrap().mapv(|x| x as f32 as f64));
        }
        m
    }

    fn random_bundle(seed: u64) -> FeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n, d, b) = (3, 2, 5, 4);
        let desc = unit_rows(&mut rng, c * n, d)
            .into_shape_with_order((c, n, d))
            .unwrap();
        let samples = (0..6)
            .map(|i| Sample {
                id: 100 + i,
                label: if i == 2 { None } else { Some(i as usize % c) },
                views: unit_rows(&mut rng, b, d),
            })
            .collect();
        FeatureBundle {
            descriptions: DescriptionBank::new(desc, vec!["x".into(), "y".into(), "z".into()])
                .unwrap(),
            base_class_embeddings: unit_rows(&mut rng, c, d),
            samples,
            original_view_index: 0,
            informative_mask: Some(vec![vec![true, false, true, false]; 6]),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(97);
        write_bundle(dir.path(), &b).unwrap();
        let r = read_bundle(dir.path()).unwrap();
        assert_eq!(r.descriptions.descriptions(), b.descriptions.descriptions());
        assert_eq!(r.base_class_embeddings, b.base_class_embeddings);
        assert_eq!(r.samples, b.samples);
        assert_eq!(r.informative_mask, b.informative_mask);
        assert_eq!(r.descriptions.class_names(), b.descriptions.class_names());
    }

    #[test]
    fn truncated_samples_report_offset() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(1);
        write_bundle(dir.path(), &b).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let bytes = fs::read(&path).unwrap();
        let record = RECORD_HEADER + 4 * 5 * 4;
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_bundle(dir.path()) {
            Err(Error::Format(FormatError::TruncatedRecord { offset, .. })) => {
                assert_eq!(offset, (5 * record) as u64)
            }
            other => panic!("expected TruncatedRecord, got {other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &random_bundle(2)).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[RECORD_HEADER + 3] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::Format(FormatError::ChecksumMismatch { .. }))
        ));

        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &random_bundle(2)).unwrap();
        let path = dir.path().join(TENSORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0x80;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::Format(FormatError::ChecksumMismatch { .. }))
        ));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &random_bundle(3)).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(
            &path,
            text.replace("\"format_version\": 1", "\"format_version\": 99"),
        )
        .unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::Format(FormatError::VersionUnsupported {
                found: 99,
                ..
            }))
        ));
    }

    #[test]
    fn wrong_view_count_without_variable_flag() {
        let mut b = random_bundle(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        b.samples[3].views = unit_rows(&mut rng, 3, 5);
        b.informative_mask = None;
        let dir = tempfile::tempdir().unwrap();
        let m = write_bundle(dir.path(), &b).unwrap();
        assert!(m.variable_views);
        assert!(read_bundle(dir.path()).is_ok());

        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(
            &path,
            text.replace("\"variable_views\": true", "\"variable_views\": false"),
        )
        .unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::Format(FormatError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn unnormalized_bundle_is_normalized_on_load() {
        let mut b = random_bundle(8);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &b).unwrap();
        // Rewrite samples scaled by 2 and flag the manifest.
        for s in &mut b.samples {
            s.views.mapv_inplace(|x| 2.0 * x);
        }
        let bytes = encode_samples(&b.samples);
        fs::write(dir.path().join(SAMPLES_FILE), &bytes).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m = read_manifest(dir.path()).unwrap();
        m.normalized = false;
        m.samples.checksum = sha256_hex(&bytes);
        fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        let r = read_bundle(dir.path()).unwrap();
        for s in &r.samples {
            for row in s.views.rows() {
                assert!((crate::embedding::norm(row) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_required_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &random_bundle(6)).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors.retain(|t| t.name != "base_class_embeddings");
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::Format(FormatError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn huge_declared_count_does_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&0i32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_samples("s", &bytes, 1, 1 << 20, 0, true).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::TruncatedRecord { offset: 0, .. })
        ));
    }

    #[test]
    fn bank_snapshot_round_trip() {
        let mut bank = PrototypeBank::new(3, 4);
        bank.update(Array1::from(vec![0.5f32 as f64, 0.5, 0.5, 0.5]).view(), 1)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bank_snapshot(dir.path(), &bank).unwrap();
        assert_eq!(read_bank_snapshot(dir.path()).unwrap(), bank);
    }
}

//! Raw little-endian case directories and split manifests.
//!
//! ```text
//! <case_id>/header.json   {"shape":[D,H,W],"dtype":"f32","modalities":["t1","tc","t2","fl"]}
//! <case_id>/t1.raw ...    f32 LE, C-order D → H → W
//! <case_id>/labels.raw    u8
//! <case_id>/mask.raw      u8, 0/1
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, PhantomSpec};
use super::{voxel_count, CaseRecord, LabelVolume, Shape3, Volume};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Shape3,
    dtype: String,
    modalities: Vec<String>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            format!("truncated payload: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            format!("payload of {} bytes exceeds expected {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn save_case(record: &CaseRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = Header {
        shape: record.shape(),
        dtype: "f32".into(),
        modalities: Modality::ALL.iter().map(|m| m.name().to_string()).collect(),
    };
    fs::write(dir.join("header.json"), serde_json::to_vec(&header)?)?;
    for m in Modality::ALL {
        let bytes: Vec<u8> = record.volume(m).data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{}.raw", m.name())), bytes)?;
    }
    fs::write(dir.join("labels.raw"), record.labels.labels())?;
    let mask: Vec<u8> = record.brain_mask.iter().map(|&b| b as u8).collect();
    fs::write(dir.join("mask.raw"), mask)?;
    Ok(())
}

/// Loads a case directory; the case id is the directory name.
pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let header_path = dir.join("header.json");
    let header: Header =
        serde_json::from_slice(&fs::read(&header_path)?).map_err(|e| format_err(&header_path, e.to_string()))?;
    if header.dtype != "f32" {
        return Err(format_err(&header_path, format!("unknown dtype {:?}", header.dtype)));
    }
    let canonical: Vec<String> = Modality::ALL.iter().map(|m| m.name().to_string()).collect();
    if header.modalities != canonical {
        return Err(format_err(
            &header_path,
            format!("modalities {:?} differ from {canonical:?}", header.modalities),
        ));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(format_err(&header_path, format!("shape {:?} has a zero extent", header.shape)));
    }
    let n = voxel_count(header.shape);
    let read_volume = |m: Modality| -> Result<Volume> {
        let path = dir.join(format!("{}.raw", m.name()));
        let bytes = read_exact_len(&path, n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(header.shape, data).map_err(|e| format_err(&path, e.to_string()))
    };
    let volumes = [
        read_volume(Modality::T1)?,
        read_volume(Modality::Tc)?,
        read_volume(Modality::T2)?,
        read_volume(Modality::Fl)?,
    ];
    let labels_path = dir.join("labels.raw");
    let labels = LabelVolume::new(header.shape, read_exact_len(&labels_path, n)?)
        .map_err(|e| format_err(&labels_path, e.to_string()))?;
    let mask_path = dir.join("mask.raw");
    let mask_bytes = read_exact_len(&mask_path, n)?;
    if mask_bytes.iter().any(|&b| b > 1) {
        return Err(format_err(&mask_path, "mask values must be 0 or 1"));
    }
    let case_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CaseRecord::new(case_id, volumes, labels, mask_bytes.into_iter().map(|b| b == 1).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Case paths per split. Paths in the file are relative to the manifest's
/// directory; [`DatasetManifest::load`] resolves them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(p) {
                return Err(Error::InvalidArgument(format!("case {} appears in more than one split", p.display())));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: DatasetManifest =
            serde_json::from_slice(&fs::read(path)?).map_err(|e| format_err(path, e.to_string()))?;
        raw.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |ps: Vec<PathBuf>| -> Result<Vec<PathBuf>> {
            ps.into_iter()
                .map(|p| {
                    let full = if p.is_absolute() { p } else { base.join(p) };
                    if full.join("header.json").is_file() {
                        Ok(full)
                    } else {
                        Err(format_err(path, format!("case path {} does not resolve", full.display())))
                    }
                })
                .collect()
        };
        Ok(Self {
            seed: raw.seed,
            train: resolve(raw.train)?,
            val: resolve(raw.val)?,
            test: resolve(raw.test)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<CaseRecord>> {
        self.split(split).iter().map(|p| load_case(p)).collect()
    }
}

/// Split sizes `(train, val, test)` for a 70/10/20 partition.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n as f64 * 0.2).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (n - test - val, val, test)
}

fn case_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Writes `n` phantom cases under `out/cases/` and a seeded 70/10/20
/// partition to `out/manifest.json`. The file stores paths relative to
/// `out`; the returned manifest has them resolved.
pub fn generate_dataset(n: usize, shape: Shape3, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one case".into()));
    }
    let mut rel_paths = Vec::with_capacity(n);
    for i in 0..n {
        let spec = PhantomSpec::desk(shape, case_seed(seed, i));
        let mut case = generate_phantom(&spec)?;
        case.case_id = format!("case_{i:04}");
        let rel = PathBuf::from("cases").join(&case.case_id);
        save_case(&case, &out.join(&rel))?;
        rel_paths.push(rel);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(n);
    let pick = |idx: &[usize]| {
        let mut v: Vec<PathBuf> = idx.iter().map(|&i| rel_paths[i].clone()).collect();
        v.sort();
        v
    };
    let manifest = DatasetManifest {
        seed,
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    };
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    DatasetManifest::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_case() -> CaseRecord {
        generate_phantom(&PhantomSpec::desk([8, 8, 8], 5)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomSpec::desk([12, 10, 8], 2)).unwrap();
        let path = dir.path().join(&case.case_id);
        save_case(&case, &path).unwrap();
        assert_eq!(load_case(&path).unwrap(), case);
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        save_case(&small_case(), &path).unwrap();
        let raw = path.join("tc.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_case(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn u8_label_file_of_512_bytes_accepted_for_8_cubed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        save_case(&small_case(), &path).unwrap();
        assert_eq!(fs::metadata(path.join("labels.raw")).unwrap().len(), 512);
        assert_eq!(fs::metadata(path.join("t1.raw")).unwrap().len(), 512 * 4);
        assert!(load_case(&path).is_ok());
    }

    #[test]
    fn unknown_dtype_and_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        save_case(&small_case(), &path).unwrap();
        fs::write(path.join("header.json"), br#"{"shape":[8,8,8],"dtype":"f16","modalities":["t1","tc","t2","fl"]}"#).unwrap();
        assert!(load_case(&path).unwrap_err().to_string().contains("dtype"));
        fs::write(path.join("header.json"), br#"{"shape":[8,8,4],"dtype":"f32","modalities":["t1","tc","t2","fl"]}"#).unwrap();
        assert!(load_case(&path).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(20), (14, 2, 4));
        assert_eq!(split_sizes(1), (1, 0, 0));
    }

    #[test]
    fn dataset_manifest_resolves_and_is_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(10, [8, 8, 8], 1, dir.path()).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (7, 1, 2));
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.load_split(Split::Test).unwrap().len(), 2);
        let mut bad = m.clone();
        bad.val.push(bad.train[0].clone());
        assert!(bad.validate().is_err());
    }
}

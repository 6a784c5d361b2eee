//! On-disk bundle format.
//!
//! A bundle is a directory holding `meta.json` plus raw little-endian payload
//! files in canonical voxel order (x fastest, then y, then z), uncompressed:
//!
//! * label / scalar bundles: a single `data.bin` (`u8` / `f32`)
//! * prob bundles: one `ch_<c>.bin` per class, all `f32`
//! * stacks: `meta.json` with `m` and `members`, plus one prob-bundle
//!   subdirectory per member
//!
//! `read_bundle(write_bundle(v))` reproduces `v` bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::volume::{Bundle, GridMeta, LabelVolume, McStack, ProbVolume, ScalarMap};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: String,
    dtype: String,
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<Vec<String>>,
}

impl MetaFile {
    fn grid_meta(&self, path: &Path) -> Result<GridMeta> {
        GridMeta::new(self.dims, self.spacing, self.origin, self.class_names.clone()).map_err(
            |e| UqError::format(path, format!("invalid grid meta: {e}")),
        )
    }
}

fn channel_file(c: usize) -> String {
    format!("ch_{c}.bin")
}

/// Name used for stack member subdirectories.
pub fn member_dir_name(m: usize) -> String {
    format!("sample_{m:03}")
}

fn read_meta(dir: &Path) -> Result<MetaFile> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| UqError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| UqError::format(&path, format!("corrupt header: {e}")))
}

fn read_payload(path: &Path, expected_bytes: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| UqError::io(path, e))?;
    if bytes.len() != expected_bytes {
        return Err(UqError::format(
            path,
            format!(
                "payload size {} bytes does not match dims product ({expected_bytes} bytes expected)",
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn expect_dtype(meta: &MetaFile, want: &str, dir: &Path) -> Result<()> {
    if meta.dtype != want {
        return Err(UqError::format(
            dir,
            format!("dtype {:?} does not match kind {:?} (expected {want:?})", meta.dtype, meta.kind),
        ));
    }
    Ok(())
}

/// Read a bundle directory into its typed volume. All type invariants are
/// validated on load.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let meta_file = read_meta(dir)?;
    let meta = meta_file.grid_meta(dir)?;
    let n = meta.voxel_count();
    match meta_file.kind.as_str() {
        "label" => {
            expect_dtype(&meta_file, "u8", dir)?;
            let bytes = read_payload(&dir.join(DATA_FILE), n)?;
            Ok(Bundle::Label(LabelVolume::new(meta, bytes)?))
        }
        "scalar" => {
            expect_dtype(&meta_file, "f32", dir)?;
            let bytes = read_payload(&dir.join(DATA_FILE), n * 4)?;
            Ok(Bundle::Scalar(ScalarMap::new(meta, bytes_to_f32(&bytes))?))
        }
        "prob" => {
            expect_dtype(&meta_file, "f32", dir)?;
            Ok(Bundle::Prob(read_prob_channels(dir, meta)?))
        }
        "stack" => {
            expect_dtype(&meta_file, "f32", dir)?;
            let reader = StackReader::from_meta(dir, &meta_file, meta.clone())?;
            let mut samples = Vec::with_capacity(reader.num_members());
            for m in 0..reader.num_members() {
                samples.push(reader.read_member(m)?);
            }
            Ok(Bundle::Stack(McStack::new(meta, samples)?))
        }
        other => Err(UqError::format(dir, format!("unknown bundle kind {other:?}"))),
    }
}

fn read_prob_channels(dir: &Path, meta: GridMeta) -> Result<ProbVolume> {
    let n = meta.voxel_count();
    let mut channels = Vec::with_capacity(meta.num_classes());
    for c in 0..meta.num_classes() {
        let bytes = read_payload(&dir.join(channel_file(c)), n * 4)?;
        channels.push(bytes_to_f32(&bytes));
    }
    ProbVolume::new(meta, channels)
}

/// Write a bundle directory. Volume invariants are re-checked before any
/// file is produced, so invalid data is rejected before writing.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| UqError::io(dir, e))?;
    let meta = bundle.meta();
    let mut meta_file = MetaFile {
        dims: meta.dims(),
        spacing: meta.spacing(),
        origin: meta.origin(),
        kind: bundle.kind().to_string(),
        dtype: match bundle {
            Bundle::Label(_) => "u8".to_string(),
            _ => "f32".to_string(),
        },
        class_names: meta.class_names().to_vec(),
        m: None,
        members: None,
    };
    match bundle {
        Bundle::Label(v) => {
            LabelVolume::new(v.meta().clone(), v.voxels().to_vec())?;
            write_file(&dir.join(DATA_FILE), v.voxels())?;
        }
        Bundle::Scalar(v) => {
            ScalarMap::new(v.meta().clone(), v.values().to_vec())?;
            write_file(&dir.join(DATA_FILE), &f32_to_bytes(v.values()))?;
        }
        Bundle::Prob(v) => {
            ProbVolume::new(v.meta().clone(), v.channels().to_vec())?;
            write_prob_payload(v, dir)?;
        }
        Bundle::Stack(stack) => {
            let members: Vec<String> = (0..stack.num_samples()).map(member_dir_name).collect();
            meta_file.m = Some(stack.num_samples());
            meta_file.members = Some(members.clone());
            for (name, sample) in members.iter().zip(stack.samples()) {
                write_bundle(&Bundle::Prob(sample.clone()), dir.join(name))?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&meta_file)
        .map_err(|e| UqError::format(dir, format!("meta serialization: {e}")))?;
    write_file(&dir.join(META_FILE), text.as_bytes())?;
    Ok(())
}

fn write_prob_payload(v: &ProbVolume, dir: &Path) -> Result<()> {
    for (c, ch) in v.channels().iter().enumerate() {
        write_file(&dir.join(channel_file(c)), &f32_to_bytes(ch))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| UqError::io(path, e))
}

/// Streaming access to a stack bundle: the shared grid meta plus one member
/// prob volume at a time. Lets M-of-30 stacks be aggregated without holding
/// the whole stack in memory.
pub struct StackReader {
    dir: PathBuf,
    meta: GridMeta,
    members: Vec<String>,
}

impl StackReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_file = read_meta(dir)?;
        if meta_file.kind != "stack" {
            return Err(UqError::format(
                dir,
                format!("expected a stack bundle, got kind {:?}", meta_file.kind),
            ));
        }
        expect_dtype(&meta_file, "f32", dir)?;
        let meta = meta_file.grid_meta(dir)?;
        Self::from_meta(dir, &meta_file, meta)
    }

    fn from_meta(dir: &Path, meta_file: &MetaFile, meta: GridMeta) -> Result<Self> {
        let members = meta_file
            .members
            .clone()
            .ok_or_else(|| UqError::format(dir, "stack meta is missing member names"))?;
        let m = meta_file
            .m
            .ok_or_else(|| UqError::format(dir, "stack meta is missing M"))?;
        if m != members.len() || m == 0 {
            return Err(UqError::format(
                dir,
                format!("stack meta M={m} does not match {} member names (M >= 1)", members.len()),
            ));
        }
        Ok(StackReader {
            dir: dir.to_path_buf(),
            meta,
            members,
        })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn member_dir(&self, m: usize) -> PathBuf {
        self.dir.join(&self.members[m])
    }

    /// Read and validate one member; its meta must equal the stack meta.
    pub fn read_member(&self, m: usize) -> Result<ProbVolume> {
        let dir = self.member_dir(m);
        let meta_file = read_meta(&dir)?;
        if meta_file.kind != "prob" {
            return Err(UqError::format(
                &dir,
                format!("stack member must be a prob bundle, got kind {:?}", meta_file.kind),
            ));
        }
        expect_dtype(&meta_file, "f32", &dir)?;
        let member_meta = meta_file.grid_meta(&dir)?;
        if member_meta != self.meta {
            return Err(UqError::MetaMismatch(format!(
                "stack member {} does not share the stack grid meta",
                self.members[m]
            )));
        }
        read_prob_channels(&dir, member_meta)
    }
}

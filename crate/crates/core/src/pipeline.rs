//! Multi-model evaluation pipeline: for each model x patient cell,
//! aggregate the MC stack, score DICE/HD95, compute ECE and R-AvU curves,
//! then emit plot-ready cross-model CSVs, a Wilcoxon table over per-patient
//! means, and a run manifest with input/output digests.
//!
//! Cells run independently (optionally in parallel); results are merged in
//! config order and every file is written atomically, so re-running with
//! identical inputs and flags produces byte-identical CSVs regardless of
//! the job count. Only the manifest timestamp varies between runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{AggregateResult, MeanAccumulator};
use crate::bundle::{read_bundle, StackReader, META_FILE};
use crate::calibration::{ece_report, EceReport, VoxelSelection};
use crate::error::{Result, UqError};
use crate::metrics::{score_report, ClassScoreReport, ScoreMetric};
use crate::ravu::{ravu_curve, region_partition, RAvUCurve, Roi, ThresholdSpec};
use crate::stats::{wilcoxon_signed_rank, PairedSample, WilcoxonMode};
use crate::volume::LabelVolume;

pub const TOOL_NAME: &str = "uqvol";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    /// Patient id -> MC stack bundle directory.
    pub stacks: BTreeMap<String, PathBuf>,
}

fn default_bins() -> usize {
    10
}

fn default_selection() -> String {
    "predicted".into()
}

fn default_roi() -> String {
    "whole".into()
}

fn default_filter() -> [usize; 3] {
    [3, 3, 1]
}

fn default_thresholds() -> String {
    "auto:50".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patients: Vec<PatientEntry>,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_selection")]
    pub selection: String,
    #[serde(default = "default_roi")]
    pub roi: String,
    #[serde(default = "default_filter")]
    pub filter: [usize; 3],
    #[serde(default = "default_thresholds")]
    pub thresholds: String,
}

impl PipelineConfig {
    /// Load a config file; relative bundle paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| UqError::io(path, e))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| UqError::format(path, format!("bad pipeline config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        for patient in &mut config.patients {
            patient.gt = resolve(&patient.gt);
        }
        for model in &mut config.models {
            for stack in model.stacks.values_mut() {
                *stack = resolve(stack);
            }
        }
        Ok(config)
    }

    fn parsed(&self) -> Result<(VoxelSelection, Roi, ThresholdSpec)> {
        Ok((
            self.selection.parse()?,
            Roi::parse(&self.roi)?,
            ThresholdSpec::parse(&self.thresholds)?,
        ))
    }
}

/// Recorded design-decision flags a run was produced under.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionFlags {
    pub ece_headline_variant: &'static str,
    pub ece_selection: String,
    pub ece_bins: usize,
    pub roi: String,
    pub thresholds: String,
    pub opening_filter: [usize; 3],
    pub argmax_tie_break: &'static str,
    pub uncertain_rule: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellStatus {
    pub model: String,
    pub patient: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Run provenance: command, flags, input and output digests, cell statuses.
/// Every result file a run emits is referenced by exactly one manifest, the
/// `manifest.json` beside it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Seconds since the Unix epoch; the one field allowed to vary between
    /// otherwise identical runs.
    pub timestamp_unix: u64,
    pub flags: serde_json::Value,
    pub decisions: Option<DecisionFlags>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellStatus>,
}

impl RunManifest {
    pub fn new(command: &str, flags: serde_json::Value) -> RunManifest {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            command: command.to_string(),
            timestamp_unix,
            flags,
            decisions: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            cells: Vec::new(),
        }
    }

    pub fn add_input(&mut self, label: &str, digest: String) {
        self.inputs.insert(label.to_string(), digest);
    }

    pub fn add_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| UqError::format(&path, format!("manifest serialization: {e}")))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("sha256:{}", hex::encode(hasher.finalize()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| UqError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| UqError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

/// Digest of a bundle directory: sha256 over the sorted list of
/// `relative-path:file-digest` lines, covering meta.json, payload files and
/// (for stacks) all member bundles.
pub fn bundle_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_bundle_files(dir, PathBuf::new(), &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let digest = sha256_file(&dir.join(&rel))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(b":");
        hasher.update(digest.as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

fn collect_bundle_files(root: &Path, rel: PathBuf, out: &mut Vec<PathBuf>) -> Result<()> {
    let dir = root.join(&rel);
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| UqError::io(&meta_path, e))?;
    let meta: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| UqError::format(&meta_path, format!("corrupt header: {e}")))?;
    out.push(rel.join(META_FILE));
    let kind = meta["kind"].as_str().unwrap_or_default().to_string();
    match kind.as_str() {
        "label" | "scalar" => out.push(rel.join("data.bin")),
        "prob" => {
            let c = meta["class_names"].as_array().map(|a| a.len()).unwrap_or(0);
            for ci in 0..c {
                out.push(rel.join(format!("ch_{ci}.bin")));
            }
        }
        "stack" => {
            if let Some(members) = meta["members"].as_array() {
                for member in members {
                    if let Some(name) = member.as_str() {
                        collect_bundle_files(root, rel.join(name), out)?;
                    }
                }
            }
        }
        other => {
            return Err(UqError::format(&meta_path, format!("unknown bundle kind {other:?}")));
        }
    }
    Ok(())
}

/// Write through a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| UqError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| UqError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| UqError::io(path, e))
}

struct CellOutput {
    dice: ClassScoreReport,
    hd95: ClassScoreReport,
    ece: EceReport,
    ravu: RAvUCurve,
    stack_digest: String,
}

/// Stream the stack bundle once: digest files while accumulating the mean.
fn aggregate_stack_dir(stack_dir: &Path, gt: &LabelVolume) -> Result<(AggregateResult, String)> {
    let reader = StackReader::open(stack_dir)?;
    reader.meta().ensure_same(gt.meta(), "stack vs gt")?;
    let mut acc = MeanAccumulator::new(reader.meta().clone());
    for m in 0..reader.num_members() {
        acc.add(&reader.read_member(m)?)?;
    }
    let digest = bundle_digest(stack_dir)?;
    Ok((acc.finalize()?, digest))
}

fn run_cell(
    stack_dir: &Path,
    gt: &LabelVolume,
    config: &PipelineConfig,
    selection: VoxelSelection,
    roi: Roi,
    thresholds: &ThresholdSpec,
) -> Result<CellOutput> {
    let (agg, stack_digest) = aggregate_stack_dir(stack_dir, gt)?;
    let dice = score_report(&agg.prediction, gt, ScoreMetric::Dice)?;
    let hd95 = score_report(&agg.prediction, gt, ScoreMetric::Hd95)?;
    let ece = ece_report(&agg.mean_prob, &agg.prediction, gt, config.bins, selection)?;
    let regions = region_partition(&agg.prediction, gt, config.filter, roi)?;
    let ravu = ravu_curve(&agg.entropy, &regions, thresholds)?;
    Ok(CellOutput {
        dice,
        hd95,
        ece,
        ravu,
        stack_digest,
    })
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub cells_ok: usize,
    pub cells_failed: usize,
    pub manifest_path: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn score_csv(cells: &[(String, String, Option<&CellOutput>)], pick: impl Fn(&CellOutput) -> &ClassScoreReport) -> String {
    let mut out = String::from("model,patient,class_id,class_name,value,flag\n");
    for (model, patient, cell) in cells {
        let Some(cell) = cell else { continue };
        let report = pick(cell);
        for s in &report.scores {
            let flag = serde_json::to_value(s.flag).unwrap();
            out.push_str(&format!(
                "{model},{patient},{},{},{},{}\n",
                s.class_id,
                s.class_name,
                fmt_opt(s.value),
                flag.as_str().unwrap()
            ));
        }
        out.push_str(&format!("{model},{patient},,mean,{},\n", fmt_opt(report.mean)));
    }
    out
}

fn ece_csv(cells: &[(String, String, Option<&CellOutput>)]) -> String {
    let mut out = String::from("model,patient,class_id,class_name,n,ece_weighted,ece_paper\n");
    for (model, patient, cell) in cells {
        let Some(cell) = cell else { continue };
        for c in &cell.ece.per_class {
            out.push_str(&format!(
                "{model},{patient},{},{},{},{},{}\n",
                c.class_id,
                c.class_name,
                c.total,
                fmt_opt(c.ece_weighted),
                fmt_opt(c.ece_paper)
            ));
        }
        out.push_str(&format!(
            "{model},{patient},,mean,,{},{}\n",
            fmt_opt(cell.ece.mean_weighted),
            fmt_opt(cell.ece.mean_paper)
        ));
    }
    out
}

fn ravu_per_patient_csv(cells: &[(String, String, Option<&CellOutput>)]) -> String {
    let mut out = String::from("model,patient,threshold,n_ac,n_au,n_ic,n_iu,p_u_i,p_u_a\n");
    for (model, patient, cell) in cells {
        let Some(cell) = cell else { continue };
        for p in &cell.ravu.points {
            out.push_str(&format!(
                "{model},{patient},{},{},{},{},{},{},{}\n",
                p.threshold,
                p.n_ac,
                p.n_au,
                p.n_ic,
                p.n_iu,
                fmt_opt(p.p_u_given_i),
                fmt_opt(p.p_u_given_a)
            ));
        }
    }
    out
}

/// Voxel-pooled aggregate across patients: counts summed per threshold per
/// model, probabilities recomputed from the pooled counts.
fn ravu_pooled_csv(models: &[String], cells: &[(String, String, Option<&CellOutput>)]) -> Result<String> {
    let grid: Option<Vec<f64>> = cells
        .iter()
        .find_map(|(_, _, c)| c.map(|c| c.ravu.thresholds()));
    let Some(grid) = grid else {
        return Ok("threshold\n".to_string());
    };
    let mut header = String::from("threshold");
    for model in models {
        header.push_str(&format!(",{model}.p_u_i,{model}.p_u_a"));
    }
    header.push('\n');
    let mut rows = vec![String::new(); grid.len()];
    for (row, t) in grid.iter().enumerate() {
        rows[row] = t.to_string();
    }
    for model in models {
        let mut au = vec![0usize; grid.len()];
        let mut ac = vec![0usize; grid.len()];
        let mut iu = vec![0usize; grid.len()];
        let mut ic = vec![0usize; grid.len()];
        for (m, _, cell) in cells {
            if m != model {
                continue;
            }
            let Some(cell) = cell else { continue };
            if cell.ravu.thresholds() != grid {
                return Err(UqError::InvalidArg(format!(
                    "model {model}: per-patient ravu grids differ, cannot pool"
                )));
            }
            for (row, p) in cell.ravu.points.iter().enumerate() {
                au[row] += p.n_au;
                ac[row] += p.n_ac;
                iu[row] += p.n_iu;
                ic[row] += p.n_ic;
            }
        }
        for row in 0..grid.len() {
            let p_i = (iu[row] + ic[row] > 0).then(|| iu[row] as f64 / (iu[row] + ic[row]) as f64);
            let p_a = (au[row] + ac[row] > 0).then(|| au[row] as f64 / (au[row] + ac[row]) as f64);
            rows[row].push_str(&format!(",{},{}", fmt_opt(p_i), fmt_opt(p_a)));
        }
    }
    let mut out = header;
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}

fn wilcoxon_csv(config: &PipelineConfig, cells: &[(String, String, Option<&CellOutput>)]) -> String {
    let mut out = String::from("metric,model_a,model_b,n_eff,w,p_two_sided,all_zero\n");
    let metric_of = |cell: &CellOutput, metric: &str| -> Option<f64> {
        match metric {
            "dice_mean" => cell.dice.mean,
            "hd95_mean" => cell.hd95.mean,
            "ece_weighted_mean" => cell.ece.mean_weighted,
            _ => None,
        }
    };
    let cell_for = |model: &str, patient: &str| -> Option<&CellOutput> {
        cells
            .iter()
            .find(|(m, p, _)| m == model && p == patient)
            .and_then(|(_, _, c)| *c)
    };
    for metric in ["dice_mean", "hd95_mean", "ece_weighted_mean"] {
        for (i, ma) in config.models.iter().enumerate() {
            for mb in config.models.iter().skip(i + 1) {
                let mut labels = Vec::new();
                let mut a = Vec::new();
                let mut b = Vec::new();
                for patient in &config.patients {
                    let (Some(ca), Some(cb)) = (cell_for(&ma.name, &patient.id), cell_for(&mb.name, &patient.id)) else {
                        continue;
                    };
                    let (Some(va), Some(vb)) = (metric_of(ca, metric), metric_of(cb, metric)) else {
                        continue;
                    };
                    labels.push(patient.id.clone());
                    a.push(va);
                    b.push(vb);
                }
                if labels.is_empty() {
                    out.push_str(&format!("{metric},{},{},0,,,\n", ma.name, mb.name));
                    continue;
                }
                let sample = PairedSample::new(labels, a, b).expect("non-empty paired sample");
                match wilcoxon_signed_rank(&sample, WilcoxonMode::Exact) {
                    Ok(r) => out.push_str(&format!(
                        "{metric},{},{},{},{},{},{}\n",
                        ma.name, mb.name, r.n_eff, r.w, r.p_two_sided, r.all_zero
                    )),
                    Err(e) => out.push_str(&format!("{metric},{},{},,,error: {e},\n", ma.name, mb.name)),
                }
            }
        }
    }
    out
}

/// Run the full pipeline into `out_dir`. Cell failures abort only their own
/// model x patient cell; the summary reports how many succeeded.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path, jobs: Option<usize>) -> Result<PipelineSummary> {
    let (selection, roi, thresholds) = config.parsed()?;
    if config.patients.is_empty() || config.models.is_empty() {
        return Err(UqError::InvalidArg("pipeline needs at least one patient and one model".into()));
    }
    for patient in &config.patients {
        if config.patients.iter().filter(|p| p.id == patient.id).count() > 1 {
            return Err(UqError::InvalidArg(format!("duplicate patient id {:?}", patient.id)));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| UqError::io(out_dir, e))?;

    // ground truth loads once per patient
    let mut gts: Vec<LabelVolume> = Vec::new();
    let mut manifest = RunManifest::new(
        "pipeline",
        serde_json::to_value(config).unwrap_or_default(),
    );
    manifest.decisions = Some(DecisionFlags {
        ece_headline_variant: "weighted",
        ece_selection: config.selection.clone(),
        ece_bins: config.bins,
        roi: roi.describe(),
        thresholds: thresholds.describe(),
        opening_filter: config.filter,
        argmax_tie_break: "lowest_class_id",
        uncertain_rule: "entropy_strictly_greater_than_threshold",
    });
    for patient in &config.patients {
        let gt = read_bundle(&patient.gt)?.into_label()?;
        manifest.add_input(&format!("gt/{}", patient.id), bundle_digest(&patient.gt)?);
        gts.push(gt);
    }

    // model x patient cells, in parallel up to the job bound
    let tasks: Vec<(usize, usize)> = (0..config.models.len())
        .flat_map(|m| (0..config.patients.len()).map(move |p| (m, p)))
        .collect();
    let run_one = |&(mi, pi): &(usize, usize)| -> (usize, usize, std::result::Result<CellOutput, String>) {
        let model = &config.models[mi];
        let patient = &config.patients[pi];
        let result = match model.stacks.get(&patient.id) {
            Some(stack_dir) => {
                run_cell(stack_dir, &gts[pi], config, selection, roi, &thresholds)
                    .map_err(|e| e.to_string())
            }
            None => Err(format!("no stack configured for patient {:?}", patient.id)),
        };
        (mi, pi, result)
    };
    let results: Vec<(usize, usize, std::result::Result<CellOutput, String>)> = match jobs {
        Some(1) => tasks.iter().map(run_one).collect(),
        _ => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| UqError::InvalidArg(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                tasks.par_iter().map(run_one).collect()
            })
        }
    };

    // merge in config order
    let mut cells: Vec<(String, String, Option<CellOutput>)> = Vec::new();
    let mut cells_ok = 0;
    let mut cells_failed = 0;
    for (mi, pi, result) in results {
        let model = config.models[mi].name.clone();
        let patient = config.patients[pi].id.clone();
        match result {
            Ok(cell) => {
                cells_ok += 1;
                manifest.add_input(
                    &format!("stack/{model}/{patient}"),
                    cell.stack_digest.clone(),
                );
                manifest.cells.push(CellStatus {
                    model: model.clone(),
                    patient: patient.clone(),
                    status: "ok".into(),
                    diagnostic: None,
                });
                cells.push((model, patient, Some(cell)));
            }
            Err(diag) => {
                cells_failed += 1;
                manifest.cells.push(CellStatus {
                    model: model.clone(),
                    patient: patient.clone(),
                    status: "error".into(),
                    diagnostic: Some(diag),
                });
                cells.push((model, patient, None));
            }
        }
    }
    let cell_refs: Vec<(String, String, Option<&CellOutput>)> = cells
        .iter()
        .map(|(m, p, c)| (m.clone(), p.clone(), c.as_ref()))
        .collect();
    let model_names: Vec<String> = config.models.iter().map(|m| m.name.clone()).collect();

    let files: Vec<(&str, String)> = vec![
        ("scores_dice.csv", score_csv(&cell_refs, |c| &c.dice)),
        ("scores_hd95.csv", score_csv(&cell_refs, |c| &c.hd95)),
        ("ece.csv", ece_csv(&cell_refs)),
        ("ravu_per_patient.csv", ravu_per_patient_csv(&cell_refs)),
        ("ravu_pooled.csv", ravu_pooled_csv(&model_names, &cell_refs)?),
        ("wilcoxon.csv", wilcoxon_csv(config, &cell_refs)),
    ];
    for (name, content) in &files {
        manifest.add_output(name, content.as_bytes());
        write_atomic(&out_dir.join(name), content.as_bytes())?;
    }
    let manifest_path = manifest.write(out_dir)?;
    Ok(PipelineSummary {
        cells_ok,
        cells_failed,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::write_bundle;
    use crate::synth::{self, CalibMode, Geometry, ShapeSpec, SynthSpec, UncSpec};
    use crate::volume::Bundle;
    use tempfile::TempDir;

    fn cohort_spec(seed: u64, calib: CalibMode) -> SynthSpec {
        SynthSpec {
            dims: [20, 20, 6],
            spacing: [0.8, 0.8, 2.5],
            origin: [0.0; 3],
            classes: 4,
            shapes: vec![
                ShapeSpec {
                    class_id: 1,
                    geometry: Geometry::Box,
                    center: [5.0, 5.0, 2.0],
                    radii: [3.0, 3.0, 1.0],
                },
                ShapeSpec {
                    class_id: 2,
                    geometry: Geometry::Box,
                    center: [14.0, 6.0, 3.0],
                    radii: [3.0, 3.0, 1.0],
                },
                ShapeSpec {
                    class_id: 3,
                    geometry: Geometry::Box,
                    center: [10.0, 14.0, 2.0],
                    radii: [4.0, 3.0, 1.0],
                },
            ],
            errors: vec![],
            calibration: calib,
            uncertainty: UncSpec {
                jitter: 0.02,
                samples: 3,
                ..UncSpec::default()
            },
            seed,
        }
    }

    fn build_cohort(dir: &Path, deltas: &[f64]) -> PipelineConfig {
        let mut patients = Vec::new();
        let mut models: Vec<ModelEntry> = deltas
            .iter()
            .enumerate()
            .map(|(i, _)| ModelEntry {
                name: format!("model_{i}"),
                stacks: BTreeMap::new(),
            })
            .collect();
        for p in 0..2 {
            let id = format!("patient_{p}");
            let gt_dir = dir.join(format!("{id}/gt"));
            let mut wrote_gt = false;
            for (mi, &delta) in deltas.iter().enumerate() {
                let calib = if delta == 0.0 {
                    CalibMode::Calibrated
                } else {
                    CalibMode::Overconfident(delta)
                };
                let out = synth::generate(&cohort_spec(100 + p, calib)).unwrap();
                if !wrote_gt {
                    write_bundle(&Bundle::Label(out.gt.clone()), &gt_dir).unwrap();
                    wrote_gt = true;
                }
                let stack_dir = dir.join(format!("{id}/model_{mi}/stack"));
                write_bundle(&Bundle::Stack(out.stack), &stack_dir).unwrap();
                models[mi].stacks.insert(id.clone(), stack_dir);
            }
            patients.push(PatientEntry {
                id,
                gt: gt_dir,
            });
        }
        PipelineConfig {
            patients,
            models,
            bins: 10,
            selection: "predicted".into(),
            roi: "whole".into(),
            filter: [3, 3, 1],
            thresholds: "auto:12".into(),
        }
    }

    #[test]
    fn structural_contract_six_files_plus_manifest() {
        let tmp = TempDir::new().unwrap();
        let config = build_cohort(&tmp.path().join("cohort"), &[0.0]);
        let config = PipelineConfig {
            patients: config.patients[..1].to_vec(),
            models: config.models,
            ..config
        };
        let out = tmp.path().join("out");
        let summary = run_pipeline(&config, &out, Some(1)).unwrap();
        assert_eq!(summary.cells_ok, 1);
        assert_eq!(summary.cells_failed, 0);
        let mut names: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(
            names,
            vec![
                "ece.csv",
                "manifest.json",
                "ravu_per_patient.csv",
                "ravu_pooled.csv",
                "scores_dice.csv",
                "scores_hd95.csv",
                "wilcoxon.csv"
            ]
        );
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(summary.manifest_path).unwrap()).unwrap();
        assert_eq!(manifest["outputs"].as_object().unwrap().len(), 6);
        assert_eq!(manifest["cells"][0]["status"], "ok");
    }

    #[test]
    fn identical_models_give_p_one_everywhere() {
        let tmp = TempDir::new().unwrap();
        let mut config = build_cohort(&tmp.path().join("cohort"), &[0.1]);
        // second model pointing at the same stacks
        let clone = ModelEntry {
            name: "model_clone".into(),
            stacks: config.models[0].stacks.clone(),
        };
        config.models.push(clone);
        let out = tmp.path().join("out");
        run_pipeline(&config, &out, Some(1)).unwrap();
        let wilcoxon = fs::read_to_string(out.join("wilcoxon.csv")).unwrap();
        for line in wilcoxon.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[5], "1", "line: {line}");
            assert_eq!(fields[6], "true", "line: {line}");
        }
    }

    #[test]
    fn ordered_miscalibration_orders_ece() {
        let tmp = TempDir::new().unwrap();
        let config = build_cohort(&tmp.path().join("cohort"), &[0.0, 0.1, 0.2]);
        let out = tmp.path().join("out");
        run_pipeline(&config, &out, None).unwrap();
        let ece = fs::read_to_string(out.join("ece.csv")).unwrap();
        // mean ece_weighted per model averaged over patients
        let mut sums = vec![0.0f64; 3];
        let mut counts = vec![0usize; 3];
        for line in ece.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[3] == "mean" {
                let model: usize = fields[0].trim_start_matches("model_").parse().unwrap();
                sums[model] += fields[5].parse::<f64>().unwrap();
                counts[model] += 1;
            }
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn reruns_and_job_counts_are_byte_identical() {
        let tmp = TempDir::new().unwrap();
        let config = build_cohort(&tmp.path().join("cohort"), &[0.0, 0.15]);
        let out1 = tmp.path().join("out1");
        let out2 = tmp.path().join("out2");
        let out3 = tmp.path().join("out3");
        run_pipeline(&config, &out1, Some(1)).unwrap();
        run_pipeline(&config, &out2, Some(4)).unwrap();
        run_pipeline(&config, &out3, None).unwrap();
        for name in [
            "scores_dice.csv",
            "scores_hd95.csv",
            "ece.csv",
            "ravu_per_patient.csv",
            "ravu_pooled.csv",
            "wilcoxon.csv",
        ] {
            let a = fs::read(out1.join(name)).unwrap();
            let b = fs::read(out2.join(name)).unwrap();
            let c = fs::read(out3.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between job counts");
            assert_eq!(a, c, "{name} differs between runs");
        }
        // manifests agree except for the timestamp
        let norm = |p: &Path| {
            let mut v: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
            v["timestamp_unix"] = serde_json::Value::from(0u64);
            v
        };
        assert_eq!(norm(&out1), norm(&out2));
    }

    #[test]
    fn failed_cell_recorded_and_others_continue() {
        let tmp = TempDir::new().unwrap();
        let mut config = build_cohort(&tmp.path().join("cohort"), &[0.0]);
        config
            .models
            .get_mut(0)
            .unwrap()
            .stacks
            .insert("patient_1".into(), tmp.path().join("missing"));
        let out = tmp.path().join("out");
        let summary = run_pipeline(&config, &out, Some(1)).unwrap();
        assert_eq!(summary.cells_ok, 1);
        assert_eq!(summary.cells_failed, 1);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        let cells = manifest["cells"].as_array().unwrap();
        assert!(cells.iter().any(|c| c["status"] == "error"));
        // dice rows still exist for the surviving cell
        let dice = fs::read_to_string(out.join("scores_dice.csv")).unwrap();
        assert!(dice.contains("patient_0"));
        assert!(!dice.contains("patient_1,1"));
    }

    #[test]
    fn bundle_digest_is_content_sensitive() {
        let tmp = TempDir::new().unwrap();
        let spec = cohort_spec(5, CalibMode::Calibrated);
        let out = synth::generate(&spec).unwrap();
        let dir = tmp.path().join("gt");
        write_bundle(&Bundle::Label(out.gt.clone()), &dir).unwrap();
        let d1 = bundle_digest(&dir).unwrap();
        let d2 = bundle_digest(&dir).unwrap();
        assert_eq!(d1, d2);
        // flip one voxel byte
        let data = dir.join("data.bin");
        let mut bytes = fs::read(&data).unwrap();
        bytes[0] ^= 1;
        fs::write(&data, bytes).unwrap();
        assert_ne!(bundle_digest(&dir).unwrap(), d1);
    }
}

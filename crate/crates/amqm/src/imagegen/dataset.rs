//! Dataset assembly: runs, splits, image files, and the CSV manifest.
//!
//! A dataset is built per class (grade or set point). Each class is
//! covered by print runs of at least ten layers; a run sits at a single
//! set point and its layers are rendered from a run seed derived from
//! the master seed, so runs are independent and the whole dataset is
//! reproducible byte for byte.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{normalize_intensity, read_pgm, write_pgm, Image};
use crate::nn::{Sample, SplitData, Tensor};
use crate::rng::{derive_seed, SplitMix64};

use super::process::{valid_set_points, QualityGrade, SetPointClass, GRADES};
use super::{render_layer_with, RenderConfig, DOMAIN_RUN, DOMAIN_SPLIT};

/// Which labeling a dataset targets: the five quality grades or the 21
/// set-point classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Grade,
    SetPoint,
}

impl LabelMode {
    pub fn n_classes(&self) -> usize {
        match self {
            LabelMode::Grade => 5,
            LabelMode::SetPoint => 21,
        }
    }

    pub fn parse(s: &str) -> Result<LabelMode> {
        match s {
            "grade" => Ok(LabelMode::Grade),
            "setpoint" => Ok(LabelMode::SetPoint),
            _ => Err(Error::config(format!(
                "unknown label mode {s:?} (expected \"grade\" or \"setpoint\")"
            ))),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Grade => "grade",
            LabelMode::SetPoint => "setpoint",
        })
    }
}

/// Generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub labels: LabelMode,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub layers_per_run: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            labels: LabelMode::Grade,
            train_per_class: 50,
            test_per_class: 10,
            width: 64,
            height: 64,
            layers_per_run: 10,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
            noise_sigma: self.noise_sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        self.render_config().validate()?;
        if self.layers_per_run < 10 {
            return Err(Error::config(format!(
                "layers_per_run {} violates the at-least-ten-layers rule",
                self.layers_per_run
            )));
        }
        if self.train_per_class + self.test_per_class == 0 {
            return Err(Error::config("train and test counts are both zero"));
        }
        run_lengths(
            self.train_per_class + self.test_per_class,
            self.layers_per_run,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest row: one rendered layer image.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub run_id: String,
    pub layer: usize,
    pub set_point: SetPointClass,
    pub grade: QualityGrade,
    pub split: Split,
    pub filename: String,
}

impl ManifestRecord {
    pub fn speed_mms(&self) -> u32 {
        self.set_point.state().speed() as u32
    }

    pub fn temp_c(&self) -> u32 {
        self.set_point.state().temperature() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: &str = "run_id,layer,speed_mms,temp_c,setpoint_class,grade,split,filename";

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.run_id,
                r.layer,
                r.speed_mms(),
                r.temp_c(),
                r.set_point.name(),
                r.grade,
                r.split,
                r.filename
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(Error::config(format!(
                    "bad manifest header: {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::config(format!(
                    "manifest line {}: expected 8 fields, found {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let set_point = SetPointClass::parse_name(fields[4])?;
            let record = ManifestRecord {
                run_id: fields[0].to_string(),
                layer: fields[1]
                    .parse()
                    .map_err(|_| Error::config(format!("bad layer index {:?}", fields[1])))?,
                set_point,
                grade: QualityGrade::parse(fields[5])?,
                split: Split::parse(fields[6])?,
                filename: fields[7].to_string(),
            };
            records.push(record);
        }
        Ok(DatasetManifest { records })
    }
}

/// Splits a per-class total into run lengths, each at least ten layers.
fn run_lengths(total: usize, layers_per_run: usize) -> Result<Vec<usize>> {
    let full = total / layers_per_run;
    let remainder = total % layers_per_run;
    if remainder != 0 && remainder < 10 {
        return Err(Error::config(format!(
            "per-class count {total} does not decompose into runs of >=10 layers \
             (layers_per_run={layers_per_run} leaves a remainder of {remainder})"
        )));
    }
    let mut lengths = vec![layers_per_run; full];
    if remainder > 0 {
        lengths.push(remainder);
    }
    Ok(lengths)
}

/// Grid cells used for each class, in class-index order.
fn class_cells(labels: LabelMode) -> Vec<Vec<SetPointClass>> {
    match labels {
        LabelMode::Grade => GRADES
            .iter()
            .map(|grade| {
                valid_set_points()
                    .iter()
                    .copied()
                    .filter(|c| c.grade() == *grade)
                    .collect()
            })
            .collect(),
        LabelMode::SetPoint => valid_set_points().iter().map(|c| vec![*c]).collect(),
    }
}

/// Renders the whole dataset in memory: deterministic records plus raw
/// images, rows sorted by (run_id, layer). The on-disk and in-memory
/// paths share this plan.
pub fn plan_dataset(cfg: &GenConfig) -> Result<Vec<(ManifestRecord, Image)>> {
    cfg.validate()?;
    let render_cfg = cfg.render_config();
    let total_per_class = cfg.train_per_class + cfg.test_per_class;
    let lengths = run_lengths(total_per_class, cfg.layers_per_run)?;

    let mut out = Vec::new();
    let mut run_counter: u64 = 0;
    for (class_index, cells) in class_cells(cfg.labels).into_iter().enumerate() {
        let mut class_rows: Vec<(ManifestRecord, Image)> = Vec::with_capacity(total_per_class);
        for (run_in_class, &length) in lengths.iter().enumerate() {
            let cell = cells[run_in_class % cells.len()];
            let run_id = format!("r{run_counter:04}");
            let run_seed = derive_seed(cfg.seed, &[DOMAIN_RUN, run_counter]);
            for layer in 0..length {
                let image = render_layer_with(&render_cfg, &cell.state(), layer, run_seed)?;
                class_rows.push((
                    ManifestRecord {
                        run_id: run_id.clone(),
                        layer,
                        set_point: cell,
                        grade: cell.grade(),
                        split: Split::Train, // assigned below
                        filename: format!("{run_id}_L{layer:03}.pgm"),
                    },
                    image,
                ));
            }
            run_counter += 1;
        }
        // Test items: seeded uniform sampling without replacement from the
        // class pool.
        let mut indices: Vec<usize> = (0..class_rows.len()).collect();
        let mut rng = SplitMix64::from_tags(cfg.seed, &[DOMAIN_SPLIT, class_index as u64]);
        rng.shuffle(&mut indices);
        for &i in indices.iter().take(cfg.test_per_class) {
            class_rows[i].0.split = Split::Test;
        }
        out.extend(class_rows);
    }
    debug_assert!(out
        .windows(2)
        .all(|w| (&w[0].0.run_id, w[0].0.layer) <= (&w[1].0.run_id, w[1].0.layer)));
    Ok(out)
}

/// Renders the dataset and writes image files plus `manifest.csv` under
/// `out_dir`. Byte-identical for identical configs.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let plan = plan_dataset(cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(plan.len());
    for (record, image) in plan {
        write_pgm(&out_dir.join(&record.filename), &image)?;
        records.push(record);
    }
    let manifest = DatasetManifest { records };
    crate::write_atomic(&out_dir.join("manifest.csv"), manifest.to_csv().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    DatasetManifest::from_csv(&text)
}

/// One loaded image with both labelings attached.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub set_point: SetPointClass,
    pub grade: QualityGrade,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub items: Vec<LabeledImage>,
}

impl LoadedDataset {
    /// Per-image preprocessing shared by training, evaluation, and the
    /// online monitor: intensity normalization, then the 1xHxW tensor.
    pub fn split_data(&self, labels: LabelMode) -> Result<SplitData> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for item in &self.items {
            let normalized = normalize_intensity(&item.image)?;
            let label = match labels {
                LabelMode::Grade => item.grade.class_index().ok_or_else(|| {
                    Error::domain("Failure-labeled image cannot enter the 5-grade target")
                })?,
                LabelMode::SetPoint => item.set_point.class_index(),
            };
            let sample = Sample {
                input: Tensor::from_image(&normalized),
                label,
            };
            match item.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        SplitData::new(train, test, labels.n_classes())
    }

    /// Test-split items paired with their grid cell, for per-cell
    /// accuracy maps.
    pub fn test_cells(&self) -> Vec<SetPointClass> {
        self.items
            .iter()
            .filter(|i| i.split == Split::Test)
            .map(|i| i.set_point)
            .collect()
    }
}

/// Loads a dataset from a manifest file; image paths resolve relative to
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut items = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image = read_pgm(&dir.join(&record.filename))?;
        items.push(LabeledImage {
            image,
            set_point: record.set_point,
            grade: record.grade,
            split: record.split,
        });
    }
    Ok(LoadedDataset { items })
}

/// Renders the dataset straight to memory, quantizing intensities through
/// the 8-bit grid so the result matches a write/read cycle exactly.
pub fn render_dataset_in_memory(cfg: &GenConfig) -> Result<LoadedDataset> {
    let plan = plan_dataset(cfg)?;
    let items = plan
        .into_iter()
        .map(|(record, image)| LabeledImage {
            image: image.quantized(),
            set_point: record.set_point,
            grade: record.grade,
            split: record.split,
        })
        .collect();
    Ok(LoadedDataset { items })
}

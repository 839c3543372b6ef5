//! Seeded synthetic generator of layer images.
//!
//! Renders the top view of one deposited layer as parallel extrusion
//! beads over a dark background, then stamps in the two defect families:
//! voids (dark ellipses, from underfill) and overfill blobs (bright).
//! Defect density and bead-width jitter increase with the set point's
//! badness, so image content is a monotone function of speed and
//! temperature. All randomness comes from SplitMix64 streams derived
//! from the caller's seed; outputs are bit-identical across runs.

mod dataset;
mod process;

pub use dataset::{
    generate_dataset, load_dataset, plan_dataset, read_manifest, render_dataset_in_memory,
    DatasetManifest, GenConfig, LabelMode, LabeledImage, LoadedDataset, ManifestRecord, Split,
};
pub use process::{
    badness, set_point_to_grade_mapping, speed_fraction, temp_fraction, true_grade,
    valid_set_points, ProcessState, QualityGrade, SetPointClass, GRADES, GRID_SPEEDS, GRID_TEMPS,
    NUM_SET_POINT_CLASSES, SPEED_MAX, SPEED_MIN, TEMP_MAX, TEMP_MIN,
};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, SplitMix64};

// Stream-domain tags for seed derivation.
const DOMAIN_DEFECT: u64 = 0xD1;
const DOMAIN_LAYER: u64 = 0xD2;
const DOMAIN_RENDER: u64 = 0xD3;
pub(crate) const DOMAIN_RUN: u64 = 0xD4;
pub(crate) const DOMAIN_SPLIT: u64 = 0xD5;

/// Default expected void count at the worst set point.
pub const MAX_VOIDS: f64 = 12.0;
/// Default expected overfill-blob count at the most overfill-prone set point.
pub const MAX_OVERFILLS: f64 = 6.0;

/// Defect content of one layer at one set point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectField {
    /// Realized number of underfill voids.
    pub void_count: u32,
    /// Realized number of overfill blobs.
    pub overfill_count: u32,
    /// Std-dev of the per-bead width perturbation (dimensionless).
    pub bead_jitter: f64,
    /// The set point's badness, in [0, 1].
    pub badness: f64,
}

/// Expected void count: voids come from underfill, which grows with
/// speed and with cold extrusion.
pub fn expected_void_count(state: &ProcessState) -> u32 {
    let u = speed_fraction(state);
    let v = temp_fraction(state);
    (MAX_VOIDS * (0.8 * u + 0.4 * (1.0 - v)).clamp(0.0, 1.0)).round() as u32
}

/// Expected overfill count: residual extrusion pressure deposits excess
/// material mostly when running hot and slow.
pub fn expected_overfill_count(state: &ProcessState) -> u32 {
    let u = speed_fraction(state);
    let v = temp_fraction(state);
    (MAX_OVERFILLS * v * (1.0 - u)).round() as u32
}

/// Draws the realized defect content for one layer. Counts are Poisson
/// draws around the expectations; deterministic given (state, seed).
pub fn defect_field(state: &ProcessState, seed: u64) -> DefectField {
    let mut rng = SplitMix64::from_tags(seed, &[DOMAIN_DEFECT]);
    let b = badness(state);
    DefectField {
        void_count: rng.poisson(expected_void_count(state) as f64) as u32,
        overfill_count: rng.poisson(expected_overfill_count(state) as f64) as u32,
        bead_jitter: 0.05 * (1.0 + 2.0 * b),
        badness: b,
    }
}

/// Rendering knobs. The defaults are the desk-scale 64x64 recipe; width
/// and height scale the bead and defect geometry proportionally, so the
/// full 600x600 size also renders correctly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Std-dev of the additive zero-mean pixel noise.
    pub noise_sigma: f64,
}

pub const BACKGROUND_INTENSITY: f64 = 0.10;
pub const BEAD_INTENSITY: f64 = 0.60;
pub const VOID_INTENSITY: f64 = 0.05;
pub const OVERFILL_INTENSITY: f64 = 0.95;

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 64,
            height: 64,
            noise_sigma: 0.02,
        }
    }
}

impl RenderConfig {
    pub fn with_size(width: usize, height: usize) -> Self {
        RenderConfig {
            width,
            height,
            ..RenderConfig::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::config(format!(
                "image size {}x{} too small to render beads",
                self.width, self.height
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config(format!(
                "noise sigma {} must be finite and nonnegative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Bead spacing: 6 px at the 64-row default, scaled with image size.
    fn bead_period(&self) -> usize {
        let rows = self.height.min(self.width);
        ((6.0 * rows as f64 / 64.0).round() as usize).max(2)
    }
}

/// Renders one layer with the default 64x64 recipe.
pub fn render_layer(state: &ProcessState, layer_index: usize, seed: u64) -> Result<Image> {
    render_layer_with(&RenderConfig::default(), state, layer_index, seed)
}

/// Renders one layer: alternating-raster beads, voids, overfill blobs,
/// then pixel noise. Fully deterministic given (state, layer_index, seed).
pub fn render_layer_with(
    cfg: &RenderConfig,
    state: &ProcessState,
    layer_index: usize,
    seed: u64,
) -> Result<Image> {
    cfg.validate()?;
    if true_grade(state)? == QualityGrade::Failure {
        return Err(Error::domain(format!(
            "refusing to render: ({} mm/s, {} C) is a Failure set point",
            state.speed(),
            state.temperature()
        )));
    }

    let layer_seed = derive_seed(seed, &[DOMAIN_LAYER, layer_index as u64]);
    let defects = defect_field(state, layer_seed);
    let mut rng = SplitMix64::from_tags(layer_seed, &[DOMAIN_RENDER]);

    let (w, h) = (cfg.width, cfg.height);
    let mut pixels = vec![BACKGROUND_INTENSITY; w * h];

    // Raster direction alternates 90 degrees by layer parity.
    let horizontal = layer_index % 2 == 0;
    let period = cfg.bead_period();
    let gap = (period / 6).max(1);
    let nominal_width = period - gap;
    let span = if horizontal { h } else { w };
    let bead_count = span.div_ceil(period);
    for bead in 0..bead_count {
        let jittered = nominal_width as f64 * (1.0 + defects.bead_jitter * rng.next_gaussian());
        let bead_width = (jittered.round() as isize).clamp(1, period as isize) as usize;
        let start = bead * period;
        let end = (start + bead_width).min(span);
        if horizontal {
            for row in pixels[start * w..end * w].chunks_mut(w) {
                row.fill(BEAD_INTENSITY);
            }
        } else {
            for row in pixels.chunks_mut(w) {
                row[start..end.min(w)].fill(BEAD_INTENSITY);
            }
        }
    }

    // Defect geometry scales with image size.
    let scale = w.min(h) as f64 / 64.0;
    stamp_ellipses(
        &mut pixels,
        w,
        h,
        defects.void_count,
        2.0 * scale,
        5.0 * scale,
        VOID_INTENSITY,
        &mut rng,
    );
    stamp_ellipses(
        &mut pixels,
        w,
        h,
        defects.overfill_count,
        1.5 * scale,
        3.5 * scale,
        OVERFILL_INTENSITY,
        &mut rng,
    );

    if cfg.noise_sigma > 0.0 {
        for p in pixels.iter_mut() {
            *p += cfg.noise_sigma * rng.next_gaussian();
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Image::new(w, h, pixels)
}

#[allow(clippy::too_many_arguments)]
fn stamp_ellipses(
    pixels: &mut [f64],
    w: usize,
    h: usize,
    count: u32,
    r_min: f64,
    r_max: f64,
    intensity: f64,
    rng: &mut SplitMix64,
) {
    for _ in 0..count {
        let cx = rng.next_below(w as u64) as f64;
        let cy = rng.next_below(h as u64) as f64;
        let rx = (r_min + (r_max - r_min) * rng.next_f64()).max(1.0);
        let ry = (r_min + (r_max - r_min) * rng.next_f64()).max(1.0);
        let x0 = ((cx - rx).floor() as isize).max(0) as usize;
        let x1 = ((cx + rx).ceil() as isize).min(w as isize - 1) as usize;
        let y0 = ((cy - ry).floor() as isize).max(0) as usize;
        let y1 = ((cy + ry).ceil() as isize).min(h as isize - 1) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    pixels[y * w + x] = intensity;
                }
            }
        }
    }
}

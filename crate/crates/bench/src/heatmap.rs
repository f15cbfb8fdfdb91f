//! Relevance visualization: binary pixmap renderings of per-cell relevance
//! with the ground-truth region marked, plus JSON sidecars carrying the raw
//! numbers, and per-iteration frame sequences for one decoding step.

use std::path::{Path, PathBuf};

use lime_core::lime::StepReport;
use lime_core::relevance::RelevanceMap;
use serde::{Deserialize, Serialize};

use crate::scene::{Dimensionality, Scene};
use crate::{BenchError, Result};

/// Square pixel size of one scene cell.
pub const CELL_PX: usize = 24;

const REGION_RED: [u8; 3] = [255, 40, 40];
const OUTLINE_PX: usize = 2;
const STRIP_BAND_PX: usize = 4;

/// Raw numbers behind a rendered map, written next to each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub dimensionality: Dimensionality,
    /// Signed relevance per scene cell, before normalization.
    pub cell_values: Vec<f64>,
    pub region: Vec<usize>,
    pub target_token: Option<usize>,
    pub seed_relevance: Option<f64>,
}

struct Pixmap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Pixmap {
    fn new(width: usize, height: usize) -> Pixmap {
        Pixmap {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let at = (y * self.width + x) * 3;
        self.data[at..at + 3].copy_from_slice(&rgb);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        std::fs::write(path, bytes)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
    }
}

/// Map signed relevance to display intensities: magnitudes, min-max scaled
/// to [0, 1]. A constant map renders mid-gray rather than pretending one
/// cell matters more than another.
fn intensities(cell_values: &[f64]) -> Vec<f64> {
    let mags: Vec<f64> = cell_values.iter().map(|v| v.abs()).collect();
    let min = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let max = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.5; mags.len()];
    }
    mags.iter().map(|m| (m - min) / (max - min)).collect()
}

fn gray(intensity: f64) -> [u8; 3] {
    let v = (intensity.clamp(0.0, 1.0) * 255.0).round() as u8;
    [v, v, v]
}

/// Render one relevance vector over a scene. `values` must cover at least
/// the scene's cells; only the leading cell entries are drawn (trailing
/// entries belong to text positions). Region cells are outlined (grids) or
/// underlined (strips) in red.
pub fn render_values(
    values: &[f64],
    scene: &Scene,
    region: &[usize],
    path: &Path,
) -> Result<()> {
    let cells = scene.cell_count();
    if values.len() < cells {
        return Err(BenchError::Config(format!(
            "{} relevance values cannot cover {} scene cells",
            values.len(),
            cells
        )));
    }
    for &r in region {
        if r >= cells {
            return Err(BenchError::Config(format!(
                "region index {r} outside {cells} cells"
            )));
        }
    }
    let shade = intensities(&values[..cells]);
    let map = match scene.dimensionality {
        Dimensionality::Grid2d { rows, cols } => {
            let mut map = Pixmap::new(cols * CELL_PX, rows * CELL_PX);
            for r in 0..rows {
                for c in 0..cols {
                    let color = gray(shade[r * cols + c]);
                    for y in 0..CELL_PX {
                        for x in 0..CELL_PX {
                            map.put(c * CELL_PX + x, r * CELL_PX + y, color);
                        }
                    }
                }
            }
            for &cell in region {
                let (r, c) = (cell / cols, cell % cols);
                for y in 0..CELL_PX {
                    for x in 0..CELL_PX {
                        let on_border = x < OUTLINE_PX
                            || y < OUTLINE_PX
                            || x >= CELL_PX - OUTLINE_PX
                            || y >= CELL_PX - OUTLINE_PX;
                        if on_border {
                            map.put(c * CELL_PX + x, r * CELL_PX + y, REGION_RED);
                        }
                    }
                }
            }
            map
        }
        Dimensionality::Sequence1d { length } => {
            let mut map = Pixmap::new(length * CELL_PX, CELL_PX);
            for i in 0..length {
                let color = gray(shade[i]);
                for y in 0..CELL_PX {
                    for x in 0..CELL_PX {
                        map.put(i * CELL_PX + x, y, color);
                    }
                }
            }
            for &cell in region {
                for y in CELL_PX - STRIP_BAND_PX..CELL_PX {
                    for x in 0..CELL_PX {
                        map.put(cell * CELL_PX + x, y, REGION_RED);
                    }
                }
            }
            map
        }
    };
    map.write(path)
}

fn write_sidecar(sidecar: &HeatmapSidecar, image_path: &Path) -> Result<PathBuf> {
    let path = image_path.with_extension("json");
    let mut json =
        serde_json::to_string_pretty(sidecar).map_err(|e| BenchError::Serde(e.to_string()))?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Render a propagation summary over its scene and drop a JSON sidecar with
/// the raw numbers next to the image. Returns the sidecar path.
pub fn render_heatmap(
    map: &RelevanceMap,
    scene: &Scene,
    region: &[usize],
    path: &Path,
) -> Result<PathBuf> {
    render_values(&map.per_token, scene, region, path)?;
    let sidecar = HeatmapSidecar {
        dimensionality: scene.dimensionality,
        cell_values: map.per_token[..scene.cell_count()].to_vec(),
        region: region.to_vec(),
        target_token: Some(map.target_token),
        seed_relevance: Some(map.seed),
    };
    write_sidecar(&sidecar, path)
}

/// Render every optimization iteration of one decoding step as its own
/// frame, plus a final frame under the returned perturbation. A clean step
/// with `k` iterations yields `k + 1` images; a sidecar carries the full
/// step report. Returns the frame paths in order.
pub fn render_step_frames(
    report: &StepReport,
    scene: &Scene,
    region: &[usize],
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
    let mut frames = Vec::new();
    for (i, iteration) in report.iterations.iter().enumerate() {
        let path = dir.join(format!("{stem}-{i:03}.ppm"));
        render_values(&iteration.per_token_relevance, scene, region, &path)?;
        frames.push(path);
    }
    if let Some(final_values) = &report.final_per_token_relevance {
        let path = dir.join(format!("{stem}-final.ppm"));
        render_values(final_values, scene, region, &path)?;
        frames.push(path);
    }
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| BenchError::Serde(e.to_string()))?;
    json.push('\n');
    let sidecar = dir.join(format!("{stem}.json"));
    std::fs::write(&sidecar, json)
        .map_err(|e| BenchError::Io(format!("{}: {e}", sidecar.display())))?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_scene() -> Scene {
        let dim = Dimensionality::Grid2d { rows: 2, cols: 3 };
        let cells = vec![Some(0), None, None, None, Some(1), None];
        let width = 4;
        let data = vec![0.25; 6 * width];
        Scene::new(9, dim, cells, width, data).unwrap()
    }

    fn strip_scene() -> Scene {
        let dim = Dimensionality::Sequence1d { length: 5 };
        let cells = vec![None, Some(2), None, None, None];
        let width = 4;
        let data = vec![0.0; 5 * width];
        Scene::new(10, dim, cells, width, data).unwrap()
    }

    fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
        let bytes = std::fs::read(path).unwrap();
        let header_end = bytes
            .windows(4)
            .position(|w| w == b"255\n")
            .map(|p| p + 4)
            .unwrap();
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut parts = header.split_ascii_whitespace();
        assert_eq!(parts.next(), Some("P6"));
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        assert_eq!(parts.next(), Some("255"));
        (w, h, bytes[header_end..].to_vec())
    }

    #[test]
    fn grid_images_have_cell_scaled_dimensions_and_outlined_regions() {
        let scene = grid_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.ppm");
        let mut values = vec![0.0; 8];
        values[4] = 2.0; // strongest cell: row 1, col 1
        render_values(&values, &scene, &[4], &path).unwrap();
        let (w, h, pixels) = read_ppm(&path);
        assert_eq!((w, h), (3 * CELL_PX, 2 * CELL_PX));
        assert_eq!(pixels.len(), w * h * 3);
        // Center of the hot cell is pure white under min-max scaling.
        let center = ((CELL_PX + CELL_PX / 2) * w + CELL_PX + CELL_PX / 2) * 3;
        assert_eq!(&pixels[center..center + 3], &[255, 255, 255]);
        // Its top-left border pixel carries the region color.
        let corner = (CELL_PX * w + CELL_PX) * 3;
        assert_eq!(&pixels[corner..corner + 3], &REGION_RED);
        // A non-region cell's corner stays gray.
        let plain = (0 * w + 0) * 3;
        assert_eq!(pixels[plain], pixels[plain + 1]);
        assert_eq!(pixels[plain + 1], pixels[plain + 2]);
    }

    #[test]
    fn strip_images_mark_regions_with_a_band() {
        let scene = strip_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("strip.ppm");
        render_values(&[0.1, 0.9, 0.3, 0.2, 0.4], &scene, &[1], &path).unwrap();
        let (w, h, pixels) = read_ppm(&path);
        assert_eq!((w, h), (5 * CELL_PX, CELL_PX));
        let band = ((CELL_PX - 1) * w + CELL_PX + CELL_PX / 2) * 3;
        assert_eq!(&pixels[band..band + 3], &REGION_RED);
        let above = ((CELL_PX - STRIP_BAND_PX - 1) * w + CELL_PX + CELL_PX / 2) * 3;
        assert_eq!(&pixels[above..above + 3], &[255, 255, 255]);
    }

    #[test]
    fn constant_maps_render_mid_gray() {
        let scene = strip_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.ppm");
        render_values(&[0.7; 5], &scene, &[], &path).unwrap();
        let (_, _, pixels) = read_ppm(&path);
        assert_eq!(pixels[0], 128);
    }

    #[test]
    fn signed_values_render_by_magnitude() {
        let scene = strip_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signed.ppm");
        render_values(&[-1.0, 0.0, 0.5, 0.0, 0.0], &scene, &[], &path).unwrap();
        let (w, _, pixels) = read_ppm(&path);
        let first = (CELL_PX / 2 * w + CELL_PX / 2) * 3;
        assert_eq!(pixels[first], 255, "largest magnitude is white");
    }

    #[test]
    fn step_frames_cover_every_iteration_plus_the_final_state() {
        use lime_core::lime::IterationRecord;
        let scene = grid_scene();
        let values = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let iteration = |scale: f64| IterationRecord {
            target_token: 1,
            relevance_loss: scale,
            kl_loss: None,
            composite_loss: scale,
            per_token_relevance: values.iter().map(|v| v * scale).collect(),
        };
        let report = StepReport {
            step_index: 0,
            iterations: vec![iteration(1.0), iteration(0.5), iteration(0.25)],
            chosen_token: 1,
            final_relevance_loss: Some(0.1),
            final_kl_loss: None,
            final_composite_loss: Some(0.1),
            modality_relevance: Some(0.9),
            text_relevance: Some(0.1),
            final_per_token_relevance: Some(values.clone()),
            delta_l2: 0.01,
            fallback: None,
            duration_seconds: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let frames =
            render_step_frames(&report, &scene, &[0], dir.path(), "step0").unwrap();
        assert_eq!(frames.len(), report.iterations.len() + 1);
        for f in &frames {
            assert!(f.exists());
        }
        assert!(frames.last().unwrap().to_str().unwrap().ends_with("-final.ppm"));
        let sidecar = dir.path().join("step0.json");
        let text = std::fs::read_to_string(sidecar).unwrap();
        let parsed: StepReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn sidecars_round_trip_raw_relevance() {
        use lime_core::relevance::RelevanceMap;
        let scene = grid_scene();
        let map = RelevanceMap {
            target_token: 2,
            seed: 1.5,
            per_token: vec![0.1, -0.2, 0.3, 0.0, 0.6, -0.1, 0.05, 0.05],
            modality_total: 0.7,
            text_total: 0.1,
            grounding_total: 0.6,
            sink_total: 0.7,
            per_layer_totals: vec![1.5, 1.5],
            max_layer_drift: 0.0,
            max_audit_residual: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        let sidecar_path = render_heatmap(&map, &scene, &[4], &path).unwrap();
        assert!(path.exists());
        let text = std::fs::read_to_string(sidecar_path).unwrap();
        let sidecar: HeatmapSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(sidecar.cell_values, map.per_token[..6]);
        assert_eq!(sidecar.region, vec![4]);
        assert_eq!(sidecar.target_token, Some(2));
    }

    #[test]
    fn undersized_value_vectors_are_rejected() {
        let scene = grid_scene();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        assert!(render_values(&[0.1; 3], &scene, &[], &path).is_err());
        assert!(render_values(&[0.1; 6], &scene, &[6], &path).is_err());
    }
}

//! Procedural paired data: grayscale shape images and the condition maps
//! derived from their geometry, plus the `.iqds` container.
//!
//! Geometry is integer-valued and intensities come from [`Rng`], so a
//! `(seed, index)` pair yields the same sample on every platform.
//!
//! `.iqds` layout (little-endian):
//!
//! ```text
//! "IQDS" | version u32 | count u32 | count x (mode u8 | 256 f32 image | 256 f32 condition)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const MAX_SHAPES: u32 = 4;

const MAGIC: &[u8; 4] = b"IQDS";
const VERSION: u32 = 1;
const RECORD_BYTES: usize = 1 + 2 * PIXELS * 4;
/// Stream-key offset separating geometry draws from intensity draws.
const GEOMETRY_STREAM: u64 = 0x47_454F_4D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Condition marks shape boundary pixels with 1.
    Edge,
    /// Condition holds the 1-based index of the topmost shape, 0 for background.
    Segmentation,
}

impl Mode {
    fn code(self) -> u8 {
        match self {
            Mode::Edge => 0,
            Mode::Segmentation => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Mode::Edge),
            1 => Ok(Mode::Segmentation),
            other => Err(Error::format("iqds", format!("unknown mode byte {other}"))),
        }
    }

    /// Factor mapping condition values into `[0, 1]` for the models.
    pub fn condition_scale(self) -> f32 {
        match self {
            Mode::Edge => 1.0,
            Mode::Segmentation => 1.0 / MAX_SHAPES as f32,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Mode::Edge),
            "segmentation" | "seg" => Ok(Mode::Segmentation),
            other => Err(Error::invalid(format!("unknown mode `{other}` (edge | segmentation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    #[serde(with = "crate::config::seed_serde")]
    pub seed: u64,
    pub mode: Mode,
    pub min_shapes: u32,
    pub max_shapes: u32,
    pub intensity_min: f32,
    pub intensity_max: f32,
    /// Number of distinct geometries shared across samples; 0 draws a fresh
    /// geometry per sample. A small pool gives several images per condition.
    pub geometry_pool: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 512,
            seed: 0,
            mode: Mode::Edge,
            min_shapes: 1,
            max_shapes: 3,
            intensity_min: 0.3,
            intensity_max: 1.0,
            geometry_pool: 128,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > MAX_SHAPES {
            return Err(Error::invalid(format!(
                "shape count range {}..={} must be ordered and at most {MAX_SHAPES}",
                self.min_shapes, self.max_shapes
            )));
        }
        let ok = self.intensity_min > 0.0
            && self.intensity_min <= self.intensity_max
            && self.intensity_max <= 1.0;
        if !ok {
            return Err(Error::invalid("intensities must satisfy 0 < min <= max <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    /// Inclusive pixel bounds.
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    Disc { cx: i32, cy: i32, r: i32 },
}

impl Geometry {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Geometry::Disc { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub geometry: Geometry,
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub mode: Mode,
    /// Row-major 16x16 in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major 16x16; `{0, 1}` in edge mode, labels in segmentation mode.
    pub condition: Vec<f32>,
}

impl PairedSample {
    /// Condition rescaled into `[0, 1]`.
    pub fn condition_unit(&self) -> Vec<f32> {
        let s = self.mode.condition_scale();
        self.condition.iter().map(|v| v * s).collect()
    }
}

fn sample_geometry(rng: &mut Rng) -> Geometry {
    let side = SIDE as i64;
    if rng.below(2) == 0 {
        let w = rng.range_inclusive(3, 8);
        let h = rng.range_inclusive(3, 8);
        let x0 = rng.range_inclusive(0, side - w);
        let y0 = rng.range_inclusive(0, side - h);
        Geometry::Rect {
            x0: x0 as i32,
            y0: y0 as i32,
            x1: (x0 + w - 1) as i32,
            y1: (y0 + h - 1) as i32,
        }
    } else {
        let r = rng.range_inclusive(2, 5);
        let cx = rng.range_inclusive(r, side - 1 - r);
        let cy = rng.range_inclusive(r, side - 1 - r);
        Geometry::Disc {
            cx: cx as i32,
            cy: cy as i32,
            r: r as i32,
        }
    }
}

/// Draws the shape layout for one sample (count, then each shape).
pub fn generate_geometry(rng: &mut Rng, spec: &DatasetSpec) -> Vec<Geometry> {
    let count = rng.range_inclusive(spec.min_shapes as i64, spec.max_shapes as i64);
    (0..count).map(|_| sample_geometry(rng)).collect()
}

fn draw_intensity(rng: &mut Rng, spec: &DatasetSpec) -> f32 {
    spec.intensity_min + (spec.intensity_max - spec.intensity_min) * rng.next_f32()
}

/// Condition map as a pure function of geometry.
pub fn condition_from_shapes(geoms: &[Geometry], mode: Mode) -> Vec<f32> {
    let mut cond = vec![0.0f32; PIXELS];
    for y in 0..SIDE as i32 {
        for x in 0..SIDE as i32 {
            let v = match mode {
                Mode::Edge => {
                    let on_edge = geoms.iter().any(|g| {
                        g.contains(x, y)
                            && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                                let (nx, ny) = (x + dx, y + dy);
                                let inside = (0..SIDE as i32).contains(&nx) && (0..SIDE as i32).contains(&ny);
                                !inside || !g.contains(nx, ny)
                            })
                    });
                    if on_edge {
                        1.0
                    } else {
                        0.0
                    }
                }
                Mode::Segmentation => geoms
                    .iter()
                    .rposition(|g| g.contains(x, y))
                    .map_or(0.0, |i| (i + 1) as f32),
            };
            cond[y as usize * SIDE + x as usize] = v;
        }
    }
    cond
}

/// Paints shapes in order (later shapes on top) and derives the condition.
pub fn render(shapes: &[Shape], mode: Mode) -> PairedSample {
    let mut image = vec![0.0f32; PIXELS];
    for s in shapes {
        for y in 0..SIDE as i32 {
            for x in 0..SIDE as i32 {
                if s.geometry.contains(x, y) {
                    image[y as usize * SIDE + x as usize] = s.intensity;
                }
            }
        }
    }
    let geoms: Vec<Geometry> = shapes.iter().map(|s| s.geometry).collect();
    PairedSample {
        mode,
        image,
        condition: condition_from_shapes(&geoms, mode),
    }
}

/// One sample with fresh geometry and intensities from `rng`.
pub fn generate_sample(rng: &mut Rng, spec: &DatasetSpec) -> (PairedSample, Vec<Shape>) {
    let geoms = generate_geometry(rng, spec);
    let shapes: Vec<Shape> = geoms
        .into_iter()
        .map(|geometry| Shape {
            geometry,
            intensity: draw_intensity(rng, spec),
        })
        .collect();
    (render(&shapes, spec.mode), shapes)
}

/// Sample `index` of the dataset described by `spec`; pure in `(spec, index)`.
pub fn generate_indexed(spec: &DatasetSpec, index: usize) -> (PairedSample, Vec<Shape>) {
    let mut rng = Rng::for_stream(spec.seed, index as u64);
    if spec.geometry_pool == 0 {
        return generate_sample(&mut rng, spec);
    }
    let slot = rng.below(spec.geometry_pool as u64);
    let mut geo_rng = Rng::for_stream(spec.seed.wrapping_add(GEOMETRY_STREAM), slot);
    let geoms = generate_geometry(&mut geo_rng, spec);
    let shapes: Vec<Shape> = geoms
        .into_iter()
        .map(|geometry| Shape {
            geometry,
            intensity: draw_intensity(&mut rng, spec),
        })
        .collect();
    (render(&shapes, spec.mode), shapes)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    Ok(par::map_indexed(spec.n_samples, |i| generate_indexed(spec, i).0))
}

pub fn encode_dataset(samples: &[PairedSample]) -> Result<Vec<u8>> {
    let count = u32::try_from(samples.len())
        .map_err(|_| Error::format("iqds", "too many samples for a u32 count"))?;
    let mut out = Vec::with_capacity(12 + samples.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        if s.image.len() != PIXELS || s.condition.len() != PIXELS {
            return Err(Error::format("iqds", format!("sample {i} is not {SIDE}x{SIDE}")));
        }
        out.push(s.mode.code());
        for v in s.image.iter().chain(&s.condition) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<PairedSample>> {
    if bytes.len() < 12 {
        return Err(Error::format("iqds", format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("iqds", "bad magic (expected \"IQDS\")"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format("iqds", format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(RECORD_BYTES)
        .and_then(|b| b.checked_add(12))
        .ok_or_else(|| Error::format("iqds", format!("count {count} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "iqds",
            format!(
                "count {count} needs {expected} bytes, file has {} (truncated or corrupted)",
                bytes.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(count);
    for rec in bytes[12..].chunks_exact(RECORD_BYTES) {
        let mode = Mode::from_code(rec[0])?;
        let floats: Vec<f32> = rec[1..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(PairedSample {
            mode,
            image: floats[..PIXELS].to_vec(),
            condition: floats[PIXELS..].to_vec(),
        });
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[PairedSample]) -> Result<()> {
    crate::io::write_atomic(path, &encode_dataset(samples)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PairedSample>> {
    let bytes = std::fs::read(path)?;
    decode_dataset(&bytes)
}

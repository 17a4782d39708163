//! Voxel occupancy grids, the binvox codec, binarization and IoU.
//!
//! Grids are cubes of side `N` stored row-major over `(x, y, z)`, so cell
//! `(x, y, z)` lives at `(x * N + y) * N + z`. The binvox format stores the
//! same cells x-major, then z, then y (y varies fastest); the codec performs
//! the permutation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VoxelError {
    #[error("binvox format error at line {line:?}: {reason}")]
    Format { line: String, reason: String },
    #[error("binvox payload expands to {found} cells, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Binary occupancy cube with binvox placement metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<u8>,
    pub translate: [f64; 3],
    pub scale: f64,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Self {
        Self::filled(resolution, false)
    }

    pub fn filled(resolution: usize, value: bool) -> Self {
        Self {
            resolution,
            occupancy: vec![value as u8; resolution.pow(3)],
            translate: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Builds a grid from `(x, y, z)`-ordered cells; every value must be 0 or 1.
    pub fn from_occupancy(resolution: usize, occupancy: Vec<u8>) -> Result<Self, VoxelError> {
        if resolution == 0 {
            return Err(VoxelError::Argument("resolution must be positive".into()));
        }
        if occupancy.len() != resolution.pow(3) {
            return Err(VoxelError::Argument(format!(
                "{} cells for resolution {resolution}",
                occupancy.len()
            )));
        }
        if occupancy.iter().any(|&v| v > 1) {
            return Err(VoxelError::Argument("occupancy values must be 0 or 1".into()));
        }
        Ok(Self {
            resolution,
            occupancy,
            translate: [0.0; 3],
            scale: 1.0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = value as u8;
    }

    pub fn count_occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v == 1).count()
    }

    /// Occupancy as 0.0/1.0 values, same cell order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.occupancy.iter().map(|&v| v as f32).collect()
    }

    /// Cells packed 64 per word, for popcount-based set operations.
    fn packed(&self) -> Vec<u64> {
        self.occupancy
            .chunks(64)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |w, (bit, &v)| w | ((v as u64) << bit))
            })
            .collect()
    }
}

/// Real-valued occupancy probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    resolution: usize,
    values: Vec<f32>,
}

impl VoxelField {
    pub fn new(resolution: usize, values: Vec<f32>) -> Result<Self, VoxelError> {
        if values.len() != resolution.pow(3) {
            return Err(VoxelError::Argument(format!(
                "{} values for resolution {resolution}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VoxelError::Argument(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { resolution, values })
    }

    pub fn uniform(resolution: usize, value: f32) -> Result<Self, VoxelError> {
        Self::new(resolution, vec![value; resolution.pow(3)])
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Binarizes a field: a cell is occupied iff its probability exceeds `t`.
pub fn threshold(field: &VoxelField, t: f32) -> Result<VoxelGrid, VoxelError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(VoxelError::Argument(format!(
            "threshold {t} must lie strictly between 0 and 1"
        )));
    }
    let occupancy = field.values.iter().map(|&v| (v > t) as u8).collect();
    Ok(VoxelGrid {
        resolution: field.resolution,
        occupancy,
        translate: [0.0; 3],
        scale: 1.0,
    })
}

/// Intersection over union of two grids; two empty grids score 1.0.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64, VoxelError> {
    if a.resolution != b.resolution {
        return Err(VoxelError::Argument(format!(
            "resolution mismatch: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let (pa, pb) = (a.packed(), b.packed());
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in pa.iter().zip(&pb) {
        inter += (x & y).count_ones() as u64;
        union += (x | y).count_ones() as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn format_err(line: &str, reason: impl Into<String>) -> VoxelError {
    VoxelError::Format {
        line: line.to_string(),
        reason: reason.into(),
    }
}

/// Parses a binvox v1 file.
pub fn read_binvox(bytes: &[u8]) -> Result<VoxelGrid, VoxelError> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| *pos + i)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[*pos..end])
            .trim_end_matches('\r')
            .to_string();
        *pos = (end + 1).min(bytes.len());
        Some(line)
    };

    let magic = next_line(&mut pos).ok_or_else(|| format_err("", "empty file"))?;
    if !magic.starts_with("#binvox") {
        return Err(format_err(&magic, "missing '#binvox' magic"));
    }
    let version = magic["#binvox".len()..].trim();
    if version != "1" {
        return Err(format_err(&magic, "only binvox version 1 is supported"));
    }

    let mut dim: Option<usize> = None;
    let mut translate = [0.0f64; 3];
    let mut scale = 1.0f64;
    loop {
        let line = next_line(&mut pos).ok_or_else(|| format_err("", "header ended before 'data'"))?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("data") => break,
            Some("dim") => {
                let dims: Vec<usize> = words
                    .map(|w| w.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format_err(&line, "dimensions must be integers"))?;
                if dims.len() != 3 {
                    return Err(format_err(&line, "expected three dimensions"));
                }
                if dims[0] != dims[1] || dims[1] != dims[2] || dims[0] == 0 {
                    return Err(format_err(&line, "only non-empty cubic grids are supported"));
                }
                dim = Some(dims[0]);
            }
            Some("translate") => {
                let t: Vec<f64> = words
                    .map(|w| w.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format_err(&line, "translate must be three numbers"))?;
                translate = t
                    .try_into()
                    .map_err(|_| format_err(&line, "translate must be three numbers"))?;
            }
            Some("scale") => {
                scale = words
                    .next()
                    .and_then(|w| w.parse::<f64>().ok())
                    .filter(|s| *s > 0.0)
                    .ok_or_else(|| format_err(&line, "scale must be a positive number"))?;
            }
            _ => return Err(format_err(&line, "unrecognized header line")),
        }
    }
    let n = dim.ok_or_else(|| format_err("data", "no 'dim' line before data"))?;
    let total = n * n * n;

    let payload = &bytes[pos..];
    let mut file_order = Vec::with_capacity(total);
    let mut pairs = payload.chunks_exact(2);
    for pair in &mut pairs {
        let (value, count) = (pair[0], pair[1] as usize);
        if value > 1 {
            return Err(format_err("data", format!("run value {value} is not 0 or 1")));
        }
        if file_order.len() + count > total {
            return Err(VoxelError::Truncated {
                expected: total,
                found: file_order.len() + count,
            });
        }
        file_order.extend(std::iter::repeat_n(value, count));
    }
    if !pairs.remainder().is_empty() || file_order.len() != total {
        return Err(VoxelError::Truncated {
            expected: total,
            found: file_order.len(),
        });
    }

    let mut grid = VoxelGrid {
        resolution: n,
        occupancy: vec![0; total],
        translate,
        scale,
    };
    // File index i = (x * n + z) * n + y.
    for x in 0..n {
        for z in 0..n {
            for y in 0..n {
                let v = file_order[(x * n + z) * n + y];
                let dst = grid.index(x, y, z);
                grid.occupancy[dst] = v;
            }
        }
    }
    Ok(grid)
}

/// Canonical binvox v1 encoding: maximal runs, each capped at 255 cells.
pub fn write_binvox(grid: &VoxelGrid) -> Vec<u8> {
    let n = grid.resolution;
    let [tx, ty, tz] = grid.translate;
    let mut out = format!(
        "#binvox 1\ndim {n} {n} {n}\ntranslate {tx} {ty} {tz}\nscale {}\ndata\n",
        grid.scale
    )
    .into_bytes();
    let mut current: Option<(u8, u8)> = None;
    for x in 0..n {
        for z in 0..n {
            for y in 0..n {
                let v = grid.occupancy[grid.index(x, y, z)];
                current = match current {
                    Some((cv, count)) if cv == v && count < 255 => Some((cv, count + 1)),
                    Some((cv, count)) => {
                        out.extend_from_slice(&[cv, count]);
                        Some((v, 1))
                    }
                    None => Some((v, 1)),
                };
            }
        }
    }
    if let Some((v, count)) = current {
        out.extend_from_slice(&[v, count]);
    }
    out
}

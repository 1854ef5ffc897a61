//! Self-contained file formats: raw volumes with a JSON sidecar header,
//! a line-oriented tractogram text format (TSF), polynomial field JSON, and
//! deterministic SVG rendering of xy projections.
//!
//! Volume payloads are little-endian, x-fastest, channels interleaved per
//! voxel; the sidecar (`<path>.json`) carries dims, voxel size, dtype and an
//! endianness/format magic that readers verify. TSF files hold one
//! streamline per line, `status;x,y,z;x,y,z;...`, coordinates quantized to
//! f32 and printed in shortest round-trip form (so parse(serialize(t)) is
//! within 1e-5 mm of t and serialize(parse(s)) == s byte for byte).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PeakVolume;
use crate::grid::{Grid3, MaskGrid};
use crate::polyfield::{CoordFrame, PolyField};
use crate::tracer::{StreamStatus, Streamline, Tractogram};

/// Format magic stored in every volume header; also pins little-endian
/// payload byte order (the value is exactly representable in f32).
pub const VOLUME_MAGIC: f64 = 375.1875;

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    pub fn dtype(&self) -> &'static str {
        match self {
            VolumeData::F32(_) => "f32",
            VolumeData::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An in-memory volume: `channels` values per voxel, voxels x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub channels: usize,
    pub data: VolumeData,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    magic: f64,
    dims: [usize; 3],
    voxel_size: [f64; 3],
    dtype: String,
    channels: usize,
    order: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Writes the payload to `path` and the JSON header to `path.json`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let expected = vol.dims[0] * vol.dims[1] * vol.dims[2] * vol.channels;
    if vol.data.len() != expected {
        return Err(Error::invalid(format!(
            "volume data has {} values, dims x channels require {expected}",
            vol.data.len()
        )));
    }
    let header = VolumeHeader {
        magic: VOLUME_MAGIC,
        dims: vol.dims,
        voxel_size: vol.voxel_size,
        dtype: vol.data.dtype().to_string(),
        channels: vol.channels,
        order: "x-fastest".to_string(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::format(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    let mut payload: Vec<u8> = Vec::with_capacity(vol.data.len() * 4);
    match &vol.data {
        VolumeData::F32(values) => {
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        VolumeData::U8(values) => payload.extend_from_slice(values),
    }
    fs::write(path, payload)?;
    Ok(())
}

/// Reads a volume written by [`write_volume`]; malformed headers or
/// truncated payloads produce format errors with byte offsets.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let header_text = fs::read_to_string(sidecar_path(path))?;
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::format(format!("bad volume header: {e}")))?;
    if header.magic != VOLUME_MAGIC {
        return Err(Error::format(format!(
            "volume magic {} does not match {VOLUME_MAGIC}; wrong format version or byte order",
            header.magic
        )));
    }
    if header.order != "x-fastest" {
        return Err(Error::format(format!(
            "unknown storage order {:?}",
            header.order
        )));
    }
    if header.channels == 0 || header.dims.contains(&0) {
        return Err(Error::format("volume header has zero dims or channels"));
    }
    let n_values = header.dims[0]
        .checked_mul(header.dims[1])
        .and_then(|n| n.checked_mul(header.dims[2]))
        .and_then(|n| n.checked_mul(header.channels))
        .ok_or_else(|| {
            Error::format(format!(
                "volume header dims {:?} x {} channels overflow",
                header.dims, header.channels
            ))
        })?;
    let payload = fs::read(path)?;
    let value_size = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(Error::format(format!("unknown dtype {other:?}"))),
    };
    let expected = n_values.checked_mul(value_size).ok_or_else(|| {
        Error::format(format!(
            "volume of {n_values} {}-byte values overflows",
            value_size
        ))
    })?;
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload is {} bytes, expected {expected} (mismatch at byte offset {})",
            payload.len(),
            payload.len().min(expected)
        )));
    }
    let data = match header.dtype.as_str() {
        "f32" => VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        _ => VolumeData::U8(payload),
    };
    Ok(Volume {
        dims: header.dims,
        voxel_size: header.voxel_size,
        channels: header.channels,
        data,
    })
}

/// Single-channel u8 volume from a binary mask.
pub fn volume_from_mask(mask: &MaskGrid, voxel_size: [f64; 3]) -> Volume {
    Volume {
        dims: mask.dims(),
        voxel_size,
        channels: 1,
        data: VolumeData::U8(mask.data().iter().map(|&b| u8::from(b)).collect()),
    }
}

pub fn mask_from_volume(vol: &Volume) -> Result<MaskGrid> {
    match (&vol.data, vol.channels) {
        (VolumeData::U8(values), 1) => Ok(MaskGrid::from_vec(
            vol.dims,
            values.iter().map(|&v| v != 0).collect(),
        )),
        _ => Err(Error::format(format!(
            "expected a 1-channel u8 mask volume, got {}-channel {}",
            vol.channels,
            vol.data.dtype()
        ))),
    }
}

/// Three-channel f32 volume from per-voxel peak vectors.
pub fn volume_from_peaks(peaks: &Grid3<Vector3<f64>>, voxel_size: [f64; 3]) -> Volume {
    let mut data = Vec::with_capacity(peaks.len() * 3);
    for v in peaks.indices() {
        let p = peaks.get(v);
        data.extend_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
    }
    Volume {
        dims: peaks.dims(),
        voxel_size,
        channels: 3,
        data: VolumeData::F32(data),
    }
}

pub fn peaks_from_volume(vol: &Volume) -> Result<Grid3<Vector3<f64>>> {
    match (&vol.data, vol.channels) {
        (VolumeData::F32(values), 3) => {
            let vectors = values
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect();
            Ok(Grid3::from_vec(vol.dims, vectors))
        }
        _ => Err(Error::format(format!(
            "expected a 3-channel f32 peak volume, got {}-channel {}",
            vol.channels,
            vol.data.dtype()
        ))),
    }
}

/// Reassembles a peak volume from its two files' contents.
pub fn peak_volume_from(peaks_vol: &Volume, mask_vol: &Volume) -> Result<PeakVolume> {
    if peaks_vol.dims != mask_vol.dims {
        return Err(Error::format(format!(
            "peaks dims {:?} do not match mask dims {:?}",
            peaks_vol.dims, mask_vol.dims
        )));
    }
    let mask = mask_from_volume(mask_vol)?;
    let peaks = peaks_from_volume(peaks_vol)?;
    Ok(PeakVolume {
        dims: peaks_vol.dims,
        voxel_size: peaks_vol.voxel_size,
        mask,
        peaks,
        extra_peaks: None,
    })
}

/// Writes the TSF text format: header line `#TSF1 step=<mm> count=<n>`,
/// then one `status;x,y,z;x,y,z;...` line per streamline.
pub fn write_tractogram(path: &Path, t: &Tractogram) -> Result<()> {
    let mut out = fs::File::create(path)?;
    write!(out, "{}", tractogram_to_string(t))?;
    Ok(())
}

pub fn tractogram_to_string(t: &Tractogram) -> String {
    let mut s = format!("#TSF1 step={} count={}\n", t.step_size, t.len());
    for line in &t.streamlines {
        s.push_str(line.status.as_str());
        for p in &line.points {
            s.push_str(&format!(";{},{},{}", p.x as f32, p.y as f32, p.z as f32));
        }
        s.push('\n');
    }
    s
}

pub fn read_tractogram(path: &Path) -> Result<Tractogram> {
    let text = fs::read_to_string(path)?;
    tractogram_from_str(&text)
}

pub fn tractogram_from_str(text: &str) -> Result<Tractogram> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty tractogram file"))?;
    let rest = header
        .strip_prefix("#TSF1 ")
        .ok_or_else(|| Error::format("line 1: missing #TSF1 header"))?;
    let mut step_size = None;
    let mut count = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("step=") {
            step_size = Some(
                v.parse::<f64>()
                    .map_err(|e| Error::format(format!("line 1: bad step value {v:?}: {e}")))?,
            );
        } else if let Some(v) = token.strip_prefix("count=") {
            count = Some(
                v.parse::<usize>()
                    .map_err(|e| Error::format(format!("line 1: bad count value {v:?}: {e}")))?,
            );
        } else {
            return Err(Error::format(format!(
                "line 1: unknown header token {token:?}"
            )));
        }
    }
    let step_size = step_size.ok_or_else(|| Error::format("line 1: header lacks step="))?;
    let count = count.ok_or_else(|| Error::format("line 1: header lacks count="))?;

    // The declared count is untrusted input; do not preallocate from it.
    let mut streamlines = Vec::with_capacity(count.min(4096));
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(';');
        let status_str = fields.next().unwrap_or_default();
        let status = StreamStatus::parse(status_str).ok_or_else(|| {
            Error::format(format!("line {line_no}: unknown status {status_str:?}"))
        })?;
        let mut points = Vec::new();
        for triple in fields {
            let mut coords = triple.split(',');
            let mut xyz = [0.0f64; 3];
            for slot in &mut xyz {
                let tok = coords.next().ok_or_else(|| {
                    Error::format(format!(
                        "line {line_no}: point {triple:?} has fewer than 3 coordinates"
                    ))
                })?;
                *slot = tok.parse::<f32>().map_err(|e| {
                    Error::format(format!("line {line_no}: bad coordinate {tok:?}: {e}"))
                })? as f64;
            }
            if coords.next().is_some() {
                return Err(Error::format(format!(
                    "line {line_no}: point {triple:?} has more than 3 coordinates"
                )));
            }
            points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
        if points.is_empty() {
            return Err(Error::format(format!(
                "line {line_no}: streamline has no points"
            )));
        }
        streamlines.push(Streamline { points, status });
    }
    if streamlines.len() != count {
        return Err(Error::format(format!(
            "header count={} but file has {} streamlines",
            count,
            streamlines.len()
        )));
    }
    Ok(Tractogram {
        streamlines,
        step_size,
        provenance: "tsf".to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct FieldFile {
    order: usize,
    frame: FrameFile,
    /// Row-major coefficients: x, y, z component rows.
    coeffs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    center: [f64; 3],
    scale: [f64; 3],
}

/// Polynomial field as JSON: order, frame, row-major coefficients.
pub fn write_field(path: &Path, field: &PolyField) -> Result<()> {
    let coeffs = (0..3)
        .map(|r| field.coeffs().row(r).iter().copied().collect())
        .collect();
    let file = FieldFile {
        order: field.order(),
        frame: FrameFile {
            center: field.frame().center,
            scale: field.frame().scale,
        },
        coeffs,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<PolyField> {
    let text = fs::read_to_string(path)?;
    let file: FieldFile =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("bad field file: {e}")))?;
    if file.coeffs.len() != 3 {
        return Err(Error::format(format!(
            "field file must have 3 coefficient rows, found {}",
            file.coeffs.len()
        )));
    }
    let cols = file.coeffs[0].len();
    if file.coeffs.iter().any(|row| row.len() != cols) {
        return Err(Error::format("ragged coefficient rows"));
    }
    let coeffs = DMatrix::from_fn(3, cols, |r, c| file.coeffs[r][c]);
    let frame = CoordFrame::new(file.frame.center, file.frame.scale)
        .map_err(|e| Error::format(e.to_string()))?;
    PolyField::new(file.order, coeffs, frame).map_err(|e| Error::format(e.to_string()))
}

/// Renders the xy projection of a tractogram over the mask outline as SVG.
/// Output bytes are a pure function of the inputs.
pub fn render_svg(
    t: &Tractogram,
    mask: &MaskGrid,
    voxel_size: [f64; 3],
    path: &Path,
) -> Result<()> {
    fs::write(path, svg_string(t, mask, voxel_size))?;
    Ok(())
}

pub fn svg_string(t: &Tractogram, mask: &MaskGrid, voxel_size: [f64; 3]) -> String {
    let dims = mask.dims();
    let lx = dims[0] as f64 * voxel_size[0];
    let ly = dims[1] as f64 * voxel_size[1];
    // Projection: a 2-D cell is set when any z-slice is masked; y is flipped
    // so the image matches the usual bottom-up figure orientation.
    let cell = |x: usize, y: usize| (0..dims[2]).any(|z| *mask.get([x, y, z]));
    let mut outline = String::new();
    for y in 0..dims[1] {
        for x in 0..dims[0] {
            if !cell(x, y) {
                continue;
            }
            let x0 = x as f64 * voxel_size[0];
            let x1 = (x + 1) as f64 * voxel_size[0];
            let y0 = ly - y as f64 * voxel_size[1];
            let y1 = ly - (y + 1) as f64 * voxel_size[1];
            if x == 0 || !cell(x - 1, y) {
                outline.push_str(&format!("M{x0} {y0}L{x0} {y1}"));
            }
            if x + 1 == dims[0] || !cell(x + 1, y) {
                outline.push_str(&format!("M{x1} {y0}L{x1} {y1}"));
            }
            if y == 0 || !cell(x, y - 1) {
                outline.push_str(&format!("M{x0} {y0}L{x1} {y0}"));
            }
            if y + 1 == dims[1] || !cell(x, y + 1) {
                outline.push_str(&format!("M{x0} {y1}L{x1} {y1}"));
            }
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {lx} {ly}\">\n",
        lx * 8.0,
        ly * 8.0
    );
    svg.push_str(&format!(
        "<rect width=\"{lx}\" height=\"{ly}\" fill=\"white\"/>\n<path d=\"{outline}\" stroke=\"#888888\" stroke-width=\"0.15\" fill=\"none\"/>\n"
    ));
    for s in &t.streamlines {
        svg.push_str("<polyline points=\"");
        let mut first = true;
        for p in &s.points {
            if !first {
                svg.push(' ');
            }
            first = false;
            svg.push_str(&format!("{},{}", p.x as f32, (ly - p.y) as f32));
        }
        svg.push_str(
            "\" fill=\"none\" stroke=\"#3a6ea5\" stroke-width=\"0.12\" stroke-opacity=\"0.5\"/>\n",
        );
    }
    svg.push_str("</svg>\n");
    svg
}

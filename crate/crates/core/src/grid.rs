//! Global regular lat-lon scalar fields.
//!
//! Rows run north to south starting at `lat0` (+90), columns run east from `lon0` and wrap
//! periodically. Fields are persisted in the little-endian `ETCG` format:
//!
//! ```text
//! magic "ETCG" | version u16 = 1 | kind u8 | n_lon u32 | n_lat u32
//! lat0 f64 | d_lat f64 | lon0 f64 | d_lon f64 | timestamp i64
//! n_lon * n_lat f32 values, row-major, north row first, west column first
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsio::{write_atomic, write_atomic_bytes};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const MAGIC: &[u8; 4] = b"ETCG";
pub const FORMAT_VERSION: u16 = 1;
/// Six hours between consecutive frames.
pub const STEP_SECONDS: i64 = 21_600;

const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4 * 8 + 8;
const GEOMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad magic: expected \"ETCG\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown field kind code {0}")]
    UnknownKind(u8),
    #[error("truncated header: missing field `{0}`")]
    TruncatedHeader(&'static str),
    #[error("payload shorter than n_lon×n_lat: expected {expected} values, found {found}")]
    PayloadTooShort { expected: usize, found: usize },
    #[error("kind mismatch: expected {expected:?}, file holds {found:?}")]
    KindMismatch { expected: FieldKind, found: FieldKind },
    #[error("non-finite value at index {index} (row {row}, column {col})")]
    NonFinite { index: usize, row: usize, col: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("values length {found} does not match n_lon×n_lat = {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("frame series: {0}")]
    Series(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Top net thermal radiation, W m^-2.
    Ttr,
    /// Mean sea level pressure, Pa.
    Mslp,
    /// Relative vorticity, s^-1.
    Vorticity,
}

impl FieldKind {
    pub fn code(self) -> u8 {
        match self {
            FieldKind::Ttr => 0,
            FieldKind::Mslp => 1,
            FieldKind::Vorticity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, GridError> {
        match code {
            0 => Ok(FieldKind::Ttr),
            1 => Ok(FieldKind::Mslp),
            2 => Ok(FieldKind::Vorticity),
            other => Err(GridError::UnknownKind(other)),
        }
    }
}

/// A point on the sphere. Longitude is normalized into `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    /// Panics on a latitude outside `[-90, 90]` or non-finite input.
    pub fn new(lat: f64, lon: f64) -> Self {
        assert!(lat.is_finite() && lon.is_finite(), "non-finite coordinate");
        assert!((-90.0..=90.0).contains(&lat), "latitude {lat} out of range");
        let mut lon = lon.rem_euclid(360.0);
        if lon >= 360.0 {
            lon = 0.0;
        }
        Self { lat, lon }
    }
}

/// Great-circle central angle in radians (haversine form).
fn central_angle(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    EARTH_RADIUS_KM * central_angle(a, b)
}

/// Great-circle separation in degrees, the metric behind the neighbor-distance rule.
pub fn angular_separation_deg(a: LatLon, b: LatLon) -> f64 {
    central_angle(a, b).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n_lon: usize,
    pub n_lat: usize,
    pub lat0: f64,
    pub d_lat: f64,
    pub lon0: f64,
    pub d_lon: f64,
}

impl GridGeometry {
    /// Pole-to-pole, fully periodic grid with north row first.
    pub fn global(n_lon: usize, n_lat: usize) -> Self {
        Self {
            n_lon,
            n_lat,
            lat0: 90.0,
            d_lat: -180.0 / (n_lat.max(2) - 1) as f64,
            lon0: 0.0,
            d_lon: 360.0 / n_lon.max(1) as f64,
        }
    }

    /// The 0.25 degree reanalysis grid, 1440 x 721.
    pub fn quarter_degree() -> Self {
        Self::global(1440, 721)
    }

    pub fn len(&self) -> usize {
        self.n_lon * self.n_lat
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |msg: String| Err(GridError::InvalidGeometry(msg));
        if self.n_lon < 3 || self.n_lat < 3 {
            return bad(format!("grid {}x{} too small", self.n_lon, self.n_lat));
        }
        for (name, v) in [("lat0", self.lat0), ("d_lat", self.d_lat), ("lon0", self.lon0), ("d_lon", self.d_lon)] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        let span = self.n_lon as f64 * self.d_lon.abs();
        if (span - 360.0).abs() > GEOMETRY_TOL {
            return bad(format!("n_lon*|d_lon| = {span}, must be 360"));
        }
        let last = self.lat0 + (self.n_lat - 1) as f64 * self.d_lat;
        if (last + self.lat0).abs() > GEOMETRY_TOL || self.lat0 <= 0.0 || self.lat0 > 90.0 {
            return bad(format!("latitudes {} .. {last} are not pole-to-pole symmetric", self.lat0));
        }
        Ok(())
    }

    pub fn lat_of(&self, i_lat: usize) -> f64 {
        self.lat0 + i_lat as f64 * self.d_lat
    }

    pub fn lon_of(&self, i_lon: usize) -> f64 {
        (self.lon0 + i_lon as f64 * self.d_lon).rem_euclid(360.0)
    }

    pub fn position(&self, i_lat: usize, i_lon: usize) -> LatLon {
        LatLon::new(self.lat_of(i_lat).clamp(-90.0, 90.0), self.lon_of(i_lon))
    }

    pub fn wrap_lon(&self, i_lon: isize) -> usize {
        i_lon.rem_euclid(self.n_lon as isize) as usize
    }

    /// Nearest cell to a position.
    pub fn cell_of(&self, p: LatLon) -> (usize, usize) {
        let i_lat = ((p.lat - self.lat0) / self.d_lat).round().clamp(0.0, (self.n_lat - 1) as f64);
        let i_lon = ((p.lon - self.lon0) / self.d_lon).round() as isize;
        (i_lat as usize, self.wrap_lon(i_lon))
    }

    /// Normalized image coordinates of a (lat, lon) point: cell `i` spans `[i/n, (i+1)/n]`.
    /// Longitude is not wrapped, so points west of `lon0` map to negative x.
    pub fn to_image_xy(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = ((lon - self.lon0) / self.d_lon + 0.5) / self.n_lon as f64;
        let y = ((lat - self.lat0) / self.d_lat + 0.5) / self.n_lat as f64;
        (x, y)
    }
}

/// One scalar field at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoGrid {
    geometry: GridGeometry,
    timestamp: i64,
    kind: FieldKind,
    values: Vec<f64>,
}

impl GeoGrid {
    pub fn new(geometry: GridGeometry, timestamp: i64, kind: FieldKind, values: Vec<f64>) -> Result<Self, GridError> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(GridError::LengthMismatch { expected: geometry.len(), found: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index, row: index / geometry.n_lon, col: index % geometry.n_lon });
        }
        Ok(Self { geometry, timestamp, kind, values })
    }

    pub fn filled(geometry: GridGeometry, timestamp: i64, kind: FieldKind, value: f64) -> Result<Self, GridError> {
        Self::new(geometry, timestamp, kind, vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i_lat: usize, i_lon: usize) -> f64 {
        self.values[i_lat * self.geometry.n_lon + i_lon]
    }

    /// Value with periodic longitude indexing.
    pub fn get_wrapped(&self, i_lat: usize, i_lon: isize) -> f64 {
        self.get(i_lat, self.geometry.wrap_lon(i_lon))
    }

    /// Content hash of geometry, kind, timestamp and values (FNV-1a, stable across runs).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.geometry.n_lon as u64).to_le_bytes());
        eat(&(self.geometry.n_lat as u64).to_le_bytes());
        eat(&[self.kind.code()]);
        eat(&self.timestamp.to_le_bytes());
        for v in &self.values {
            eat(&v.to_le_bytes());
        }
        h
    }
}

/// Consecutive frames of one field kind on one grid, six hours apart.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries {
    frames: Vec<GeoGrid>,
    step_seconds: i64,
}

impl FrameSeries {
    pub fn new(frames: Vec<GeoGrid>) -> Result<Self, GridError> {
        Self::with_step(frames, STEP_SECONDS)
    }

    pub fn with_step(frames: Vec<GeoGrid>, step_seconds: i64) -> Result<Self, GridError> {
        if let Some(first) = frames.first() {
            for (i, pair) in frames.windows(2).enumerate() {
                let (a, b) = (&pair[0], &pair[1]);
                if b.timestamp - a.timestamp != step_seconds {
                    return Err(GridError::Series(format!(
                        "frame {} timestamp {} is not {} s after {}",
                        i + 1,
                        b.timestamp,
                        step_seconds,
                        a.timestamp
                    )));
                }
                if b.geometry != first.geometry || b.kind != first.kind {
                    return Err(GridError::Series(format!("frame {} differs in geometry or kind", i + 1)));
                }
            }
        }
        Ok(Self { frames, step_seconds })
    }

    pub fn frames(&self) -> &[GeoGrid] {
        &self.frames
    }

    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<GeoGrid> {
        self.frames
    }
}

pub fn write_grid<W: Write>(mut w: W, grid: &GeoGrid) -> Result<(), GridError> {
    let g = &grid.geometry;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[grid.kind.code()])?;
    w.write_all(&(g.n_lon as u32).to_le_bytes())?;
    w.write_all(&(g.n_lat as u32).to_le_bytes())?;
    for v in [g.lat0, g.d_lat, g.lon0, g.d_lon] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&grid.timestamp.to_le_bytes())?;
    let mut buf = Vec::with_capacity(grid.values.len() * 4);
    for &v in &grid.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Writes the grid, narrowing values to f32. The file is replaced atomically.
pub fn save_grid(path: impl AsRef<Path>, grid: &GeoGrid) -> Result<(), GridError> {
    write_atomic(path, |w| write_grid(w, grid).map_err(std::io::Error::other))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], GridError> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or(GridError::TruncatedHeader(field))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length is N"))
    }
}

pub fn read_grid<R: Read>(mut r: R, expected_kind: FieldKind) -> Result<GeoGrid, GridError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_grid(&bytes, expected_kind)
}

pub fn load_grid(path: impl AsRef<Path>, expected_kind: FieldKind) -> Result<GeoGrid, GridError> {
    read_grid(BufReader::new(File::open(path)?), expected_kind)
}

/// Reads the field kind from a header without decoding the payload.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<FieldKind, GridError> {
    let mut head = [0u8; 7];
    File::open(path)?.read_exact(&mut head).map_err(|_| GridError::TruncatedHeader("kind"))?;
    if &head[..4] != MAGIC {
        return Err(GridError::BadMagic(head[..4].try_into().expect("4 bytes")));
    }
    FieldKind::from_code(head[6])
}

fn parse_grid(bytes: &[u8], expected_kind: FieldKind) -> Result<GeoGrid, GridError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take::<4>("magic").map_err(|_| {
        let mut m = [0u8; 4];
        m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        GridError::BadMagic(m)
    })?;
    if &magic != MAGIC {
        return Err(GridError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(c.take("version")?);
    if version != FORMAT_VERSION {
        return Err(GridError::UnsupportedVersion(version));
    }
    let kind = FieldKind::from_code(c.take::<1>("kind")?[0])?;
    let n_lon = u32::from_le_bytes(c.take("n_lon")?) as usize;
    let n_lat = u32::from_le_bytes(c.take("n_lat")?) as usize;
    let lat0 = f64::from_le_bytes(c.take("lat0")?);
    let d_lat = f64::from_le_bytes(c.take("d_lat")?);
    let lon0 = f64::from_le_bytes(c.take("lon0")?);
    let d_lon = f64::from_le_bytes(c.take("d_lon")?);
    let timestamp = i64::from_le_bytes(c.take("timestamp")?);
    debug_assert_eq!(c.pos, HEADER_LEN);
    if kind != expected_kind {
        return Err(GridError::KindMismatch { expected: expected_kind, found: kind });
    }
    let geometry = GridGeometry { n_lon, n_lat, lat0, d_lat, lon0, d_lon };
    geometry.validate()?;
    let expected = geometry.len();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected * 4 {
        return Err(GridError::PayloadTooShort { expected, found: payload.len() / 4 });
    }
    let values = payload[..expected * 4]
        .chunks_exact(4)
        .map(|ch| f64::from(f32::from_le_bytes(ch.try_into().expect("4 bytes"))))
        .collect();
    GeoGrid::new(geometry, timestamp, kind, values)
}

/// Per-frame min-max normalization to 8-bit intensities. A constant field renders black.
pub fn render_image(grid: &GeoGrid) -> GrayImage {
    let g = &grid.geometry;
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let pixels = grid
        .values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    GrayImage::from_raw(g.n_lon as u32, g.n_lat as u32, pixels).expect("grid dimensions match values")
}

/// PNG bytes of a rendered frame.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, GridError> {
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
    Ok(png)
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), GridError> {
    write_atomic_bytes(path, &encode_png(img)?)?;
    Ok(())
}

/// Reads a PNG as 8-bit grayscale, converting color images.
pub fn load_png(path: impl AsRef<Path>) -> Result<GrayImage, GridError> {
    Ok(image::open(path)?.into_luma8())
}

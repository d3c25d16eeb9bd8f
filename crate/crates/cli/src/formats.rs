//! On-disk formats.
//!
//! Particle set, binary form:
//!
//! ```text
//! "ISPL"            4 bytes magic
//! version           u32 LE (always 1)
//! header_len        u32 LE
//! header            header_len bytes of UTF-8 JSON (see `Header`)
//! records           count * record_len f64 LE values
//! ```
//!
//! Record layouts (`c` = channels):
//!
//! | kind  | dim | fields                                                     |
//! |-------|-----|------------------------------------------------------------|
//! | iso   | 2   | mu_x mu_y sigma A[c]                                       |
//! | aniso | 2   | mu_x mu_y theta s1 s2 A[c]                                 |
//! | iso   | 3   | mu_x mu_y mu_z sigma r g b opacity                         |
//! | aniso | 3   | mu_x mu_y mu_z qw qx qy qz s1 s2 s3 r g b opacity          |
//!
//! The JSON form is the header object with an extra `records` array of
//! arrays in the same layout. Floats are written with shortest round-trip
//! formatting, so both forms reload bit-exactly.

use std::io::Write;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageEncoder};
use isosplat_core::field::{AnisoParticle2D, IsoParticle2D, KernelKind};
use isosplat_core::kernels::{AnisoKernelParams3D, Mat3};
use isosplat_core::splat3d::{AnisoSplat3D, Camera, IsoSplat3D, Splat3D};
use isosplat_core::ImageGrid;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"ISPL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Iso2D(Vec<IsoParticle2D>),
    Aniso2D(Vec<AnisoParticle2D>),
    Iso3D(Vec<IsoSplat3D>),
    Aniso3D(Vec<AnisoSplat3D>),
}

impl Records {
    pub fn kind(&self) -> KernelKind {
        match self {
            Records::Iso2D(_) | Records::Iso3D(_) => KernelKind::Iso,
            Records::Aniso2D(_) | Records::Aniso3D(_) => KernelKind::Aniso,
        }
    }

    pub fn dimension(&self) -> u8 {
        match self {
            Records::Iso2D(_) | Records::Aniso2D(_) => 2,
            Records::Iso3D(_) | Records::Aniso3D(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Records::Iso2D(v) => v.len(),
            Records::Aniso2D(v) => v.len(),
            Records::Iso3D(v) => v.len(),
            Records::Aniso3D(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Amplitude channels for 2D sets; 3D splats always carry RGB.
    pub fn channels(&self) -> usize {
        match self {
            Records::Iso2D(v) => v.first().map_or(1, |p| p.amplitude.len()),
            Records::Aniso2D(v) => v.first().map_or(1, |p| p.amplitude.len()),
            Records::Iso3D(_) | Records::Aniso3D(_) => 3,
        }
    }

    fn record_len(kind: KernelKind, dimension: u8, channels: usize) -> usize {
        match (kind, dimension) {
            (KernelKind::Iso, 2) => 3 + channels,
            (KernelKind::Aniso, 2) => 5 + channels,
            (KernelKind::Iso, _) => 8,
            (KernelKind::Aniso, _) => 14,
        }
    }

    fn flatten(&self) -> Vec<Vec<f64>> {
        match self {
            Records::Iso2D(v) => v
                .iter()
                .map(|p| [p.mu[0], p.mu[1], p.sigma].into_iter().chain(p.amplitude.iter().copied()).collect())
                .collect(),
            Records::Aniso2D(v) => v
                .iter()
                .map(|p| {
                    [p.mu[0], p.mu[1], p.theta, p.s1, p.s2]
                        .into_iter()
                        .chain(p.amplitude.iter().copied())
                        .collect()
                })
                .collect(),
            Records::Iso3D(v) => v
                .iter()
                .map(|s| [&s.mu[..], &[s.sigma], &s.color[..], &[s.opacity]].concat())
                .collect(),
            Records::Aniso3D(v) => v
                .iter()
                .map(|s| {
                    let k = &s.kernel;
                    [&k.mu[..], &k.rotation[..], &k.scales[..], &s.color[..], &[s.opacity]].concat()
                })
                .collect(),
        }
    }

    fn from_rows(kind: KernelKind, dimension: u8, rows: &[&[f64]]) -> Result<Self, String> {
        let err = |i: usize, e: isosplat_core::Error| format!("record {i}: {e}");
        let v3 = |r: &[f64]| [r[0], r[1], r[2]];
        Ok(match (kind, dimension) {
            (KernelKind::Iso, 2) => Records::Iso2D(
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| IsoParticle2D::new([r[0], r[1]], r[2], r[3..].to_vec()).map_err(|e| err(i, e)))
                    .collect::<Result<_, _>>()?,
            ),
            (KernelKind::Aniso, 2) => Records::Aniso2D(
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| AnisoParticle2D::new([r[0], r[1]], r[2], r[3], r[4], r[5..].to_vec()).map_err(|e| err(i, e)))
                    .collect::<Result<_, _>>()?,
            ),
            (KernelKind::Iso, _) => Records::Iso3D(
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| IsoSplat3D::new(v3(r), r[3], v3(&r[4..]), r[7]).map_err(|e| err(i, e)))
                    .collect::<Result<_, _>>()?,
            ),
            (KernelKind::Aniso, _) => Records::Aniso3D(
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let k = AnisoKernelParams3D::new(v3(r), [r[3], r[4], r[5], r[6]], v3(&r[7..])).map_err(|e| err(i, e))?;
                        AnisoSplat3D::new(k, v3(&r[10..]), r[13]).map_err(|e| err(i, e))
                    })
                    .collect::<Result<_, _>>()?,
            ),
        })
    }

    pub fn splats(&self) -> Option<Vec<Splat3D>> {
        match self {
            Records::Iso3D(v) => Some(v.iter().copied().map(Splat3D::Iso).collect()),
            Records::Aniso3D(v) => Some(v.iter().copied().map(Splat3D::Aniso).collect()),
            _ => None,
        }
    }

    /// Spatial parameters per record (position and shape).
    pub fn geometric_dof_per_particle(&self) -> usize {
        match self {
            Records::Iso2D(_) => 3,
            Records::Aniso2D(_) => 5,
            Records::Iso3D(_) => IsoSplat3D::GEOMETRIC_DOF,
            Records::Aniso3D(_) => AnisoSplat3D::GEOMETRIC_DOF,
        }
    }

    pub fn geometric_dof_total(&self) -> usize {
        match self {
            Records::Iso3D(v) => v.iter().map(IsoSplat3D::geometric_dof).sum(),
            Records::Aniso3D(v) => v.iter().map(AnisoSplat3D::geometric_dof).sum(),
            _ => self.len() * self.geometric_dof_per_particle(),
        }
    }

    /// One representative length per record, for histograms.
    pub fn scales(&self) -> Vec<f64> {
        match self {
            Records::Iso2D(v) => v.iter().map(|p| p.sigma).collect(),
            Records::Aniso2D(v) => v.iter().map(|p| p.s1.max(p.s2)).collect(),
            Records::Iso3D(v) => v.iter().map(|s| s.sigma).collect(),
            Records::Aniso3D(v) => v.iter().map(|s| s.kernel.scales.iter().copied().fold(0.0, f64::max)).collect(),
        }
    }
}

/// Provenance stored alongside a particle set. No timestamps or paths, so
/// identical runs produce identical files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sha256: Option<String>,
    /// `[width, height, channels]` of the fitted image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSetFile {
    pub records: Records,
    pub metadata: Option<Metadata>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kernel_kind: KindTag,
    dimension: u8,
    channels: usize,
    count: usize,
    record_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<Metadata>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Iso,
    Aniso,
}

impl From<KernelKind> for KindTag {
    fn from(k: KernelKind) -> Self {
        match k {
            KernelKind::Iso => KindTag::Iso,
            KernelKind::Aniso => KindTag::Aniso,
        }
    }
}

impl From<KindTag> for KernelKind {
    fn from(k: KindTag) -> Self {
        match k {
            KindTag::Iso => KernelKind::Iso,
            KindTag::Aniso => KernelKind::Aniso,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonFile {
    #[serde(flatten)]
    header: Header,
    records: Vec<Vec<f64>>,
}

impl ParticleSetFile {
    pub fn new(records: Records, metadata: Option<Metadata>) -> Self {
        Self { records, metadata }
    }

    fn header(&self) -> Header {
        let channels = self.records.channels();
        Header {
            format_version: FORMAT_VERSION,
            kernel_kind: self.records.kind().into(),
            dimension: self.records.dimension(),
            channels,
            count: self.records.len(),
            record_len: Records::record_len(self.records.kind(), self.records.dimension(), channels),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.records.len() * 8 * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for row in self.records.flatten() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = JsonFile {
            header: self.header(),
            records: self.records.flatten(),
        };
        serde_json::to_string_pretty(&file).expect("particle set serializes")
    }

    /// Parses either form, detected from the first bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.starts_with(MAGIC) {
            Self::from_binary(bytes)
        } else if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
            Self::from_json(bytes)
        } else {
            Err("not a particle set (missing ISPL magic or JSON object)".into())
        }
    }

    fn from_binary(bytes: &[u8]) -> Result<Self, String> {
        let u32_at = |off: usize, field: &str| -> Result<u32, String> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| format!("truncated before field `{field}` at byte {off}"))
        };
        let version = u32_at(4, "version")?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
        }
        let header_len = u32_at(8, "header_len")? as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| format!("header claims {header_len} bytes but the file ends first"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| format!("header: {e}"))?;
        check_header(&header, version)?;
        let body = &bytes[12 + header_len..];
        let want = header.count * header.record_len * 8;
        if body.len() != want {
            return Err(format!(
                "record block is {} bytes, header implies {want} ({} records of {} values)",
                body.len(),
                header.count,
                header.record_len
            ));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let rows: Vec<&[f64]> = values.chunks(header.record_len.max(1)).take(header.count).collect();
        let records = Records::from_rows(header.kernel_kind.into(), header.dimension, &rows)?;
        Ok(Self {
            records,
            metadata: header.metadata,
        })
    }

    fn from_json(bytes: &[u8]) -> Result<Self, String> {
        let file: JsonFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        check_header(&file.header, file.header.format_version)?;
        if file.records.len() != file.header.count {
            return Err(format!("`count` is {} but {} records follow", file.header.count, file.records.len()));
        }
        if let Some(i) = file.records.iter().position(|r| r.len() != file.header.record_len) {
            return Err(format!(
                "record {i} has {} values, `record_len` is {}",
                file.records[i].len(),
                file.header.record_len
            ));
        }
        let rows: Vec<&[f64]> = file.records.iter().map(Vec::as_slice).collect();
        let records = Records::from_rows(file.header.kernel_kind.into(), file.header.dimension, &rows)?;
        Ok(Self {
            records,
            metadata: file.header.metadata,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| CliError::input(path, e))
    }

    pub fn save(&self, path: &Path, json: bool) -> CliResult<()> {
        let bytes = if json { self.to_json().into_bytes() } else { self.to_binary() };
        write_file(path, &bytes)
    }
}

fn check_header(h: &Header, version: u32) -> Result<(), String> {
    if version != FORMAT_VERSION || h.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format version {} (expected {FORMAT_VERSION})", h.format_version));
    }
    if h.dimension != 2 && h.dimension != 3 {
        return Err(format!("field `dimension` must be 2 or 3, got {}", h.dimension));
    }
    if h.dimension == 2 && h.channels != 1 && h.channels != 3 {
        return Err(format!("field `channels` must be 1 or 3, got {}", h.channels));
    }
    if h.dimension == 3 && h.channels != 3 {
        return Err(format!("field `channels` must be 3 for 3D splats, got {}", h.channels));
    }
    let want = Records::record_len(h.kernel_kind.into(), h.dimension, h.channels);
    if h.record_len != want {
        return Err(format!("field `record_len` is {}, expected {want} for this kind/dimension", h.record_len));
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::output(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::output(path, e))
}

/// Camera document. Exactly one of `rotation` (row-major world-to-camera
/// matrix) and `quaternion` (w, x, y, z) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Mat3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion: Option<[f64; 4]>,
    pub translation: [f64; 3],
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
}

impl CameraFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::input(path, e))
    }

    pub fn camera(&self) -> CliResult<Camera> {
        let cam = match (self.rotation, self.quaternion) {
            (Some(r), None) => Camera::new(r, self.translation, self.focal, self.principal_point, self.width, self.height),
            (None, Some(q)) => Camera::from_quaternion(q, self.translation, self.focal, self.principal_point, self.width, self.height),
            _ => return Err(CliError::Input("camera: give exactly one of `rotation` or `quaternion`".into())),
        };
        cam.map_err(|e| CliError::Input(format!("camera: {e}")))
    }
}

/// Reads an 8-bit grayscale or RGB PNG into `[0, 1]` values.
pub fn read_png(path: &Path) -> CliResult<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
    decode_png(&bytes).map_err(|e| CliError::input(path, e))
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageGrid, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => return Err(format!("unsupported PNG color type {:?}; need 8-bit gray or RGB", other.color())),
    };
    let data = raw.into_iter().map(|v| v as f64 / 255.0).collect();
    ImageGrid::target(w, h, channels, data).map_err(|e| e.to_string())
}

/// Clamps to `[0, 1]`, then rounds half-up to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(img: &ImageGrid) -> Vec<u8> {
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let color = if img.channels() == 1 { ColorType::L8 } else { ColorType::Rgb8 };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, img.width() as u32, img.height() as u32, color.into())
        .expect("in-memory PNG encoding");
    out
}

pub fn write_png(path: &Path, img: &ImageGrid) -> CliResult<()> {
    write_file(path, &encode_png(img))
}

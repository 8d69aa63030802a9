//! MetaImage single-file (`.mha`) reading and writing.
//!
//! Voxels are kept in file order, x varying fastest; for a 3-D volume that
//! is a row-major `[z][y][x]` array.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MhaError {
    #[error("malformed header: missing required key {0}")]
    MissingKey(&'static str),
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported element type {0:?}")]
    UnsupportedType(String),
    #[error("unsupported MetaImage variant: {0}")]
    UnsupportedVariant(String),
    #[error("corrupt compressed payload: {0}")]
    Inflate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementType {
    UChar,
    Char,
    Short,
    UShort,
    Int,
    Float,
    Double,
}

impl ElementType {
    pub const ALL: [ElementType; 7] = [
        Self::UChar,
        Self::Char,
        Self::Short,
        Self::UShort,
        Self::Int,
        Self::Float,
        Self::Double,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::UChar => "MET_UCHAR",
            Self::Char => "MET_CHAR",
            Self::Short => "MET_SHORT",
            Self::UShort => "MET_USHORT",
            Self::Int => "MET_INT",
            Self::Float => "MET_FLOAT",
            Self::Double => "MET_DOUBLE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn byte_size(self) -> usize {
        match self {
            Self::UChar | Self::Char => 1,
            Self::Short | Self::UShort => 2,
            Self::Int | Self::Float => 4,
            Self::Double => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaHeader {
    pub object_type: String,
    pub ndims: usize,
    pub dim_size: Vec<usize>,
    pub element_type: ElementType,
    pub element_spacing: Vec<f64>,
    pub offset: Vec<f64>,
    /// Row-major ndims×ndims.
    pub transform_matrix: Vec<f64>,
    pub compressed: bool,
    pub byte_order_msb: bool,
    /// Unrecognized keys, in file order.
    pub raw_fields: Vec<(String, String)>,
}

impl MhaHeader {
    /// An image header with unit spacing, zero offset and identity orientation.
    pub fn new(dim_size: Vec<usize>, element_type: ElementType) -> Self {
        let n = dim_size.len();
        Self {
            object_type: "Image".into(),
            ndims: n,
            dim_size,
            element_type,
            element_spacing: vec![1.0; n],
            offset: vec![0.0; n],
            transform_matrix: identity(n),
            compressed: false,
            byte_order_msb: false,
            raw_fields: Vec::new(),
        }
    }

    pub fn voxel_count(&self) -> Option<usize> {
        self.dim_size.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.raw_fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn check(&self) -> Result<(), MhaError> {
        let n = self.ndims;
        if n == 0 {
            return Err(MhaError::Malformed("NDims must be at least 1".into()));
        }
        let lengths = [
            ("DimSize", self.dim_size.len(), n),
            ("ElementSpacing", self.element_spacing.len(), n),
            ("Offset", self.offset.len(), n),
            ("TransformMatrix", self.transform_matrix.len(), n * n),
        ];
        for (key, got, want) in lengths {
            if got != want {
                return Err(MhaError::Malformed(format!("{key} has {got} values, NDims = {n} needs {want}")));
            }
        }
        if self.dim_size.contains(&0) {
            return Err(MhaError::Malformed(format!("DimSize {:?} has a zero extent", self.dim_size)));
        }
        Ok(())
    }
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    UChar(Vec<u8>),
    Char(Vec<i8>),
    Short(Vec<i16>),
    UShort(Vec<u16>),
    Int(Vec<i32>),
    Float(Vec<f32>),
    Double(Vec<f64>),
}

macro_rules! each_variant {
    ($self:expr, $v:ident => $body:expr) => {
        match $self {
            VoxelData::UChar($v) => $body,
            VoxelData::Char($v) => $body,
            VoxelData::Short($v) => $body,
            VoxelData::UShort($v) => $body,
            VoxelData::Int($v) => $body,
            VoxelData::Float($v) => $body,
            VoxelData::Double($v) => $body,
        }
    };
}

impl VoxelData {
    pub fn element_type(&self) -> ElementType {
        match self {
            Self::UChar(_) => ElementType::UChar,
            Self::Char(_) => ElementType::Char,
            Self::Short(_) => ElementType::Short,
            Self::UShort(_) => ElementType::UShort,
            Self::Int(_) => ElementType::Int,
            Self::Float(_) => ElementType::Float,
            Self::Double(_) => ElementType::Double,
        }
    }

    pub fn len(&self) -> usize {
        each_variant!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        each_variant!(self, v => v[i] as f64)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        each_variant!(self, v => v.iter().map(|&x| x as f32).collect())
    }

    /// Raw encoding in the given byte order.
    pub fn to_bytes(&self, msb: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.element_type().byte_size());
        each_variant!(self, v => for x in v {
            if msb {
                out.extend_from_slice(&x.to_be_bytes());
            } else {
                out.extend_from_slice(&x.to_le_bytes());
            }
        });
        out
    }

    fn from_bytes(ty: ElementType, bytes: &[u8], msb: bool) -> Self {
        macro_rules! decode {
            ($t:ty, $variant:ident) => {{
                const N: usize = std::mem::size_of::<$t>();
                VoxelData::$variant(
                    bytes
                        .chunks_exact(N)
                        .map(|c| {
                            let a: [u8; N] = c.try_into().expect("exact chunk");
                            if msb {
                                <$t>::from_be_bytes(a)
                            } else {
                                <$t>::from_le_bytes(a)
                            }
                        })
                        .collect(),
                )
            }};
        }
        match ty {
            ElementType::UChar => decode!(u8, UChar),
            ElementType::Char => decode!(i8, Char),
            ElementType::Short => decode!(i16, Short),
            ElementType::UShort => decode!(u16, UShort),
            ElementType::Int => decode!(i32, Int),
            ElementType::Float => decode!(f32, Float),
            ElementType::Double => decode!(f64, Double),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: MhaHeader,
    pub voxels: VoxelData,
}

impl Volume {
    pub fn new(header: MhaHeader, voxels: VoxelData) -> Result<Self, MhaError> {
        header.check()?;
        if header.element_type != voxels.element_type() {
            return Err(MhaError::Malformed(format!(
                "header says {} but voxels are {}",
                header.element_type.name(),
                voxels.element_type().name()
            )));
        }
        if header.voxel_count() != Some(voxels.len()) {
            return Err(MhaError::Malformed(format!(
                "DimSize {:?} does not match {} voxels",
                header.dim_size,
                voxels.len()
            )));
        }
        Ok(Self { header, voxels })
    }

    /// `(x, y, z)` extents of a 2-D or 3-D volume; 2-D volumes have one slice.
    pub fn extent3(&self) -> Option<(usize, usize, usize)> {
        match *self.header.dim_size.as_slice() {
            [x, y] => Some((x, y, 1)),
            [x, y, z] => Some((x, y, z)),
            _ => None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, MhaError> {
    value
        .split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| MhaError::Malformed(format!("{key}: cannot parse {tok:?}")))
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, MhaError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(MhaError::Malformed(format!("{key}: expected True or False, got {value:?}"))),
    }
}

/// Parses a single-file MetaImage.
pub fn read_mha(bytes: &[u8]) -> Result<Volume, MhaError> {
    let mut object_type = None;
    let mut ndims = None;
    let mut dim_size: Option<Vec<usize>> = None;
    let mut element_type = None;
    let mut spacing = None;
    let mut offset = None;
    let mut transform = None;
    let mut compressed = false;
    let mut msb = false;
    let mut raw_fields = Vec::new();
    let mut payload_start = None;

    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
        let line_bytes = &bytes[pos..end.unwrap_or(bytes.len())];
        let line = std::str::from_utf8(line_bytes)
            .map_err(|_| MhaError::Malformed(format!("non-text header line at byte {pos}")))?
            .trim_end_matches('\r');
        pos = end.map_or(bytes.len(), |e| e + 1);
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| MhaError::Malformed(format!("expected `Key = Value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" => object_type = Some(value.to_string()),
            "NDims" => {
                ndims = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| MhaError::Malformed(format!("NDims: cannot parse {value:?}")))?,
                )
            }
            "DimSize" => dim_size = Some(parse_list(key, value)?),
            "ElementType" => {
                element_type =
                    Some(ElementType::from_name(value).ok_or_else(|| MhaError::UnsupportedType(value.to_string()))?)
            }
            "ElementSpacing" => spacing = Some(parse_list(key, value)?),
            "Offset" | "Origin" | "Position" => offset = Some(parse_list(key, value)?),
            "TransformMatrix" | "Rotation" | "Orientation" => transform = Some(parse_list(key, value)?),
            "CompressedData" => compressed = parse_bool(key, value)?,
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => msb = parse_bool(key, value)?,
            // Recomputed on write.
            "CompressedDataSize" => {}
            "ElementNumberOfChannels" if value != "1" => {
                return Err(MhaError::UnsupportedVariant(format!("ElementNumberOfChannels = {value}")));
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(MhaError::UnsupportedVariant(format!(
                        "external ElementDataFile {value:?}; only LOCAL is supported"
                    )));
                }
                payload_start = Some(pos);
                break;
            }
            _ => raw_fields.push((key.to_string(), value.to_string())),
        }
    }

    let object_type = object_type.ok_or(MhaError::MissingKey("ObjectType"))?;
    let ndims = ndims.ok_or(MhaError::MissingKey("NDims"))?;
    let dim_size = dim_size.ok_or(MhaError::MissingKey("DimSize"))?;
    let element_type = element_type.ok_or(MhaError::MissingKey("ElementType"))?;
    let payload_start = payload_start.ok_or(MhaError::MissingKey("ElementDataFile"))?;
    if ndims == 0 || ndims > 16 {
        return Err(MhaError::Malformed(format!("NDims = {ndims} is out of range")));
    }
    let header = MhaHeader {
        object_type,
        ndims,
        element_spacing: spacing.unwrap_or_else(|| vec![1.0; ndims]),
        offset: offset.unwrap_or_else(|| vec![0.0; ndims]),
        transform_matrix: transform.unwrap_or_else(|| identity(ndims)),
        dim_size,
        element_type,
        compressed,
        byte_order_msb: msb,
        raw_fields,
    };
    header.check()?;

    let expected = header
        .voxel_count()
        .and_then(|n| n.checked_mul(element_type.byte_size()))
        .ok_or_else(|| MhaError::Malformed(format!("DimSize {:?} overflows", header.dim_size)))?;
    let payload = &bytes[payload_start..];
    let inflated;
    let data = if compressed {
        let mut buf = Vec::new();
        ZlibDecoder::new(payload)
            .take(expected as u64 + 1)
            .read_to_end(&mut buf)
            .map_err(|e| MhaError::Inflate(e.to_string()))?;
        inflated = buf;
        &inflated[..]
    } else {
        payload
    };
    if data.len() < expected {
        return Err(MhaError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    if data.len() > expected {
        return Err(MhaError::Malformed(format!(
            "payload holds more than the {expected} bytes DimSize implies"
        )));
    }
    let voxels = VoxelData::from_bytes(element_type, data, msb);
    Ok(Volume { header, voxels })
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Serializes `volume`; the uncompressed form is byte-reproducible.
pub fn write_mha(volume: &Volume, compress: bool) -> Vec<u8> {
    let h = &volume.header;
    let mut head = String::new();
    let mut line = |k: &str, v: String| {
        head.push_str(k);
        head.push_str(" = ");
        head.push_str(&v);
        head.push('\n');
    };
    line("ObjectType", h.object_type.clone());
    line("NDims", h.ndims.to_string());
    line("DimSize", join(&h.dim_size));
    line("ElementType", h.element_type.name().into());
    line("ElementSpacing", join(&h.element_spacing));
    line("Offset", join(&h.offset));
    line("TransformMatrix", join(&h.transform_matrix));
    line("BinaryDataByteOrderMSB", if h.byte_order_msb { "True" } else { "False" }.into());
    for (k, v) in &h.raw_fields {
        line(k, v.clone());
    }
    let raw = volume.voxels.to_bytes(h.byte_order_msb);
    let payload = if compress {
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).expect("in-memory write");
        enc.finish().expect("in-memory write")
    } else {
        raw
    };
    line("CompressedData", if compress { "True" } else { "False" }.into());
    if compress {
        line("CompressedDataSize", payload.len().to_string());
    }
    line("ElementDataFile", "LOCAL".into());
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Converts to `MET_FLOAT`, applying `RescaleSlope`/`RescaleIntercept` when
/// present (the keys are consumed).
pub fn to_hounsfield(volume: &Volume) -> Result<Volume, MhaError> {
    let number = |key: &str| -> Result<Option<f64>, MhaError> {
        volume
            .header
            .raw(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| MhaError::Malformed(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    };
    let slope = number("RescaleSlope")?.unwrap_or(1.0);
    let intercept = number("RescaleIntercept")?.unwrap_or(0.0);
    let values = (0..volume.voxels.len())
        .map(|i| (volume.voxels.get_f64(i) * slope + intercept) as f32)
        .collect();
    let mut header = volume.header.clone();
    header.element_type = ElementType::Float;
    header.raw_fields.retain(|(k, _)| k != "RescaleSlope" && k != "RescaleIntercept");
    Ok(Volume {
        header,
        voxels: VoxelData::Float(values),
    })
}

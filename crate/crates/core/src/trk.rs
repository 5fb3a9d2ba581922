//! TrackVis `.trk` version 2 reader and writer.
//!
//! The body stores points in "voxmm" (voxel index times voxel size). Points
//! are mapped to RAS by dividing by the voxel size (corner convention, no
//! half-voxel shift) and applying `vox_to_ras`. Per-point scalars and
//! per-streamline properties are parsed and skipped.

use std::io::{Read, Write};

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::tract::{Point, Streamline, Tractogram};

pub const HEADER_SIZE: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrkHeader {
    pub id_string: [u8; 6],
    pub dim: [i16; 3],
    pub voxel_size: [f32; 3],
    pub origin: [f32; 3],
    pub n_scalars: i16,
    pub scalar_names: [[u8; 20]; 10],
    pub n_properties: i16,
    pub property_names: [[u8; 20]; 10],
    /// Row-major.
    pub vox_to_ras: [[f32; 4]; 4],
    pub reserved: [u8; 444],
    pub voxel_order: [u8; 4],
    pub pad2: [u8; 4],
    pub image_orientation_patient: [f32; 6],
    pub pad1: [u8; 2],
    pub invert_x: u8,
    pub invert_y: u8,
    pub invert_z: u8,
    pub swap_xy: u8,
    pub swap_yz: u8,
    pub swap_zx: u8,
    pub n_count: i32,
    pub version: i32,
    pub hdr_size: i32,
}

impl TrkHeader {
    /// Template with 1 mm voxels, an identity `vox_to_ras` and RAS order.
    pub fn identity() -> TrkHeader {
        let mut vox_to_ras = [[0.0f32; 4]; 4];
        for (i, row) in vox_to_ras.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        TrkHeader {
            id_string: *b"TRACK\0",
            dim: [256, 256, 256],
            voxel_size: [1.0; 3],
            origin: [0.0; 3],
            n_scalars: 0,
            scalar_names: [[0; 20]; 10],
            n_properties: 0,
            property_names: [[0; 20]; 10],
            vox_to_ras,
            reserved: [0; 444],
            voxel_order: *b"RAS\0",
            pad2: [0; 4],
            image_orientation_patient: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            pad1: [0; 2],
            invert_x: 0,
            invert_y: 0,
            invert_z: 0,
            swap_xy: 0,
            swap_yz: 0,
            swap_zx: 0,
            n_count: 0,
            version: 2,
            hdr_size: HEADER_SIZE as i32,
        }
    }

    pub fn decode(bytes: &[u8; HEADER_SIZE]) -> TrkHeader {
        let f32_at = |off: usize| LittleEndian::read_f32(&bytes[off..off + 4]);
        let i16_at = |off: usize| LittleEndian::read_i16(&bytes[off..off + 2]);
        let i32_at = |off: usize| LittleEndian::read_i32(&bytes[off..off + 4]);
        let names = |off: usize| {
            let mut out = [[0u8; 20]; 10];
            for (i, name) in out.iter_mut().enumerate() {
                name.copy_from_slice(&bytes[off + 20 * i..off + 20 * (i + 1)]);
            }
            out
        };
        let mut vox_to_ras = [[0.0f32; 4]; 4];
        for (r, row) in vox_to_ras.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(440 + 4 * (4 * r + c));
            }
        }
        let mut reserved = [0u8; 444];
        reserved.copy_from_slice(&bytes[504..948]);
        let mut iop = [0.0f32; 6];
        for (i, v) in iop.iter_mut().enumerate() {
            *v = f32_at(956 + 4 * i);
        }
        TrkHeader {
            id_string: bytes[0..6].try_into().unwrap(),
            dim: [i16_at(6), i16_at(8), i16_at(10)],
            voxel_size: [f32_at(12), f32_at(16), f32_at(20)],
            origin: [f32_at(24), f32_at(28), f32_at(32)],
            n_scalars: i16_at(36),
            scalar_names: names(38),
            n_properties: i16_at(238),
            property_names: names(240),
            vox_to_ras,
            reserved,
            voxel_order: bytes[948..952].try_into().unwrap(),
            pad2: bytes[952..956].try_into().unwrap(),
            image_orientation_patient: iop,
            pad1: bytes[980..982].try_into().unwrap(),
            invert_x: bytes[982],
            invert_y: bytes[983],
            invert_z: bytes[984],
            swap_xy: bytes[985],
            swap_yz: bytes[986],
            swap_zx: bytes[987],
            n_count: i32_at(988),
            version: i32_at(992),
            hdr_size: i32_at(996),
        }
    }

    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..6].copy_from_slice(&self.id_string);
        for (i, d) in self.dim.iter().enumerate() {
            LittleEndian::write_i16(&mut b[6 + 2 * i..], *d);
        }
        for i in 0..3 {
            LittleEndian::write_f32(&mut b[12 + 4 * i..], self.voxel_size[i]);
            LittleEndian::write_f32(&mut b[24 + 4 * i..], self.origin[i]);
        }
        LittleEndian::write_i16(&mut b[36..], self.n_scalars);
        for (i, name) in self.scalar_names.iter().enumerate() {
            b[38 + 20 * i..38 + 20 * (i + 1)].copy_from_slice(name);
        }
        LittleEndian::write_i16(&mut b[238..], self.n_properties);
        for (i, name) in self.property_names.iter().enumerate() {
            b[240 + 20 * i..240 + 20 * (i + 1)].copy_from_slice(name);
        }
        for r in 0..4 {
            for c in 0..4 {
                LittleEndian::write_f32(&mut b[440 + 4 * (4 * r + c)..], self.vox_to_ras[r][c]);
            }
        }
        b[504..948].copy_from_slice(&self.reserved);
        b[948..952].copy_from_slice(&self.voxel_order);
        b[952..956].copy_from_slice(&self.pad2);
        for (i, v) in self.image_orientation_patient.iter().enumerate() {
            LittleEndian::write_f32(&mut b[956 + 4 * i..], *v);
        }
        b[980..982].copy_from_slice(&self.pad1);
        b[982] = self.invert_x;
        b[983] = self.invert_y;
        b[984] = self.invert_z;
        b[985] = self.swap_xy;
        b[986] = self.swap_yz;
        b[987] = self.swap_zx;
        LittleEndian::write_i32(&mut b[988..], self.n_count);
        LittleEndian::write_i32(&mut b[992..], self.version);
        LittleEndian::write_i32(&mut b[996..], self.hdr_size);
        b
    }

    pub fn vox_to_ras_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.vox_to_ras[r][c] as f64)
    }

    fn check_voxel_size(&self) -> Result<()> {
        if self.voxel_size.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::UnsupportedTrk(format!(
                "voxel size {:?} must be positive",
                self.voxel_size
            )))
        }
    }
}

/// A decoded file. Skipped counts are numbers of float values discarded.
#[derive(Clone, Debug)]
pub struct TrkFile {
    pub header: TrkHeader,
    pub tractogram: Tractogram,
    pub skipped_scalars: usize,
    pub skipped_properties: usize,
}

pub fn read_trk(mut reader: impl Read) -> Result<TrkFile> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_trk(&bytes)
}

pub fn decode_trk(bytes: &[u8]) -> Result<TrkFile> {
    if bytes.len() >= 5 && &bytes[..5] != b"TRACK" {
        return Err(Error::NotATrkFile);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile(format!(
            "header needs {HEADER_SIZE} bytes, got {}",
            bytes.len()
        )));
    }
    let header = TrkHeader::decode(bytes[..HEADER_SIZE].try_into().unwrap());
    if header.hdr_size != HEADER_SIZE as i32 {
        return Err(Error::UnsupportedTrk(format!("hdr_size {}", header.hdr_size)));
    }
    match header.version {
        2 => {}
        1 => {
            return Err(Error::UnsupportedTrk(
                "version 1 files carry no vox_to_ras".into(),
            ))
        }
        v => return Err(Error::UnsupportedTrk(format!("version {v}"))),
    }
    if header.vox_to_ras[3][3] == 0.0 {
        return Err(Error::UnsupportedTrk("vox_to_ras is not recorded".into()));
    }
    if header.n_scalars < 0 || header.n_properties < 0 || header.n_count < 0 {
        return Err(Error::UnsupportedTrk("negative count in header".into()));
    }
    header.check_voxel_size()?;

    let transform = header.vox_to_ras_matrix();
    let voxel_size = header.voxel_size.map(f64::from);
    let n_scalars = header.n_scalars as usize;
    let n_properties = header.n_properties as usize;
    let expected = (header.n_count > 0).then_some(header.n_count as usize);

    let mut body = &bytes[HEADER_SIZE..];
    let mut streamlines = Vec::new();
    let mut skipped_scalars = 0;
    let mut skipped_properties = 0;
    loop {
        if let Some(n) = expected {
            if streamlines.len() == n {
                break;
            }
        }
        if body.is_empty() {
            if let Some(n) = expected {
                return Err(Error::TruncatedFile(format!(
                    "header declares {n} streamlines, body holds {}",
                    streamlines.len()
                )));
            }
            break;
        }
        let index = streamlines.len();
        if body.len() < 4 {
            return Err(Error::TruncatedFile(format!("streamline {index}: point count cut short")));
        }
        let k = LittleEndian::read_i32(&body[..4]);
        body = &body[4..];
        if k <= 0 {
            return Err(Error::CorruptRecord(format!("streamline {index}: point count {k}")));
        }
        let k = k as usize;
        let row = 3 + n_scalars;
        let need = k
            .checked_mul(row)
            .and_then(|v| v.checked_add(n_properties))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::TruncatedFile(format!("streamline {index}: size overflow")))?;
        if body.len() < need {
            return Err(Error::TruncatedFile(format!(
                "streamline {index}: need {need} bytes, {} remain",
                body.len()
            )));
        }
        let mut points = Vec::with_capacity(k);
        for i in 0..k {
            let base = 4 * i * row;
            let mut voxel = Vector4::new(0.0, 0.0, 0.0, 1.0);
            for (c, size) in voxel_size.iter().enumerate() {
                let voxmm = LittleEndian::read_f32(&body[base + 4 * c..]) as f64;
                voxel[c] = voxmm / size;
            }
            let ras = transform * voxel;
            points.push(Point::new(ras[0], ras[1], ras[2]));
        }
        skipped_scalars += k * n_scalars;
        skipped_properties += n_properties;
        body = &body[need..];
        let streamline = Streamline::new(points)
            .map_err(|e| Error::CorruptRecord(format!("streamline {index}: {e}")))?
            .with_source_index(Some(index));
        streamlines.push(streamline);
    }
    let tractogram = Tractogram::new(streamlines, "", "ras", vec![])?;
    Ok(TrkFile {
        header,
        tractogram,
        skipped_scalars,
        skipped_properties,
    })
}

/// Encodes `t` against a header template. Scalars and properties are not
/// written; the counts, version and size fields are overwritten.
pub fn encode_trk(template: &TrkHeader, t: &Tractogram) -> Result<Vec<u8>> {
    template.check_voxel_size()?;
    let inverse = template
        .vox_to_ras_matrix()
        .try_inverse()
        .ok_or(Error::BadTransform)?;
    if !inverse.iter().all(|v| v.is_finite()) {
        return Err(Error::BadTransform);
    }
    let mut header = template.clone();
    header.id_string = *b"TRACK\0";
    header.n_scalars = 0;
    header.n_properties = 0;
    header.scalar_names = [[0; 20]; 10];
    header.property_names = [[0; 20]; 10];
    header.n_count = i32::try_from(t.len())
        .map_err(|_| Error::InvalidSpec("too many streamlines for trk".into()))?;
    header.version = 2;
    header.hdr_size = HEADER_SIZE as i32;

    let voxel_size = header.voxel_size.map(f64::from);
    let points: usize = t.streamlines().iter().map(Streamline::n_points).sum();
    let mut out = Vec::with_capacity(HEADER_SIZE + 4 * t.len() + 12 * points);
    out.extend_from_slice(&header.encode());
    let mut word = [0u8; 4];
    for s in t.streamlines() {
        let k = i32::try_from(s.n_points())
            .map_err(|_| Error::InvalidSpec("streamline too long for trk".into()))?;
        LittleEndian::write_i32(&mut word, k);
        out.extend_from_slice(&word);
        for p in s.points() {
            let voxel = inverse * Vector4::new(p.x, p.y, p.z, 1.0);
            for c in 0..3 {
                LittleEndian::write_f32(&mut word, (voxel[c] * voxel_size[c]) as f32);
                out.extend_from_slice(&word);
            }
        }
    }
    Ok(out)
}

pub fn write_trk(template: &TrkHeader, t: &Tractogram, mut writer: impl Write) -> Result<()> {
    writer.write_all(&encode_trk(template, t)?)?;
    Ok(())
}

//! Bit-exact snapshots of register state.
//!
//! At the end of each period the recording side offloads its register array
//! to durable storage; queries later reassemble the per-period sequence.
//! Registers are packed `h` bits each — index ascending, LSB-first within
//! each byte — so a stored array occupies exactly its configured memory
//! budget plus a fixed header.
//!
//! Layout: `PSNP` magic, u16 version, u8 kind, u8 width, u32 period id,
//! u64 register count, u64 seed digest, packed payload of
//! `ceil(m*h/8)` bytes, u32 CRC-32 of the payload. All integers little
//! endian.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hll::HllSketch;
use crate::vsketch::PhysicalRegisterArray;

pub const MAGIC: [u8; 4] = *b"PSNP";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    VersionMismatch(u16),
    #[error("truncated snapshot: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown snapshot kind {0}")]
    BadKind(u8),
    #[error("register width {0} must be between 1 and 8 bits")]
    BadWidth(u8),
    #[error("register value {value} does not fit in {width} bits")]
    ValueOverflow { value: u8, width: u8 },
    #[error("duplicate period id {0} in manifest")]
    DuplicatePeriod(u32),
    #[error("snapshots disagree: {0}")]
    MixedParameters(String),
    #[error("manifest is malformed: {0}")]
    BadManifest(String),
    #[error("snapshot does not hold a valid sketch or array: {0}")]
    BadContent(String),
}

/// What a snapshot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotKind {
    /// A shared physical register array for one period.
    PhysicalArray,
    /// A dedicated per-flow sketch.
    DedicatedSketch,
}

impl SnapshotKind {
    fn code(self) -> u8 {
        match self {
            SnapshotKind::PhysicalArray => 0,
            SnapshotKind::DedicatedSketch => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, StoreError> {
        match code {
            0 => Ok(SnapshotKind::PhysicalArray),
            1 => Ok(SnapshotKind::DedicatedSketch),
            other => Err(StoreError::BadKind(other)),
        }
    }
}

/// In-memory form of a snapshot file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub kind: SnapshotKind,
    pub width: u8,
    pub period_id: u32,
    pub seed_digest: u64,
    pub registers: Vec<u8>,
}

impl Snapshot {
    pub fn of_array(array: &PhysicalRegisterArray, seed_digest: u64) -> Snapshot {
        Snapshot {
            kind: SnapshotKind::PhysicalArray,
            width: array.width() as u8,
            period_id: array.period_id(),
            seed_digest,
            registers: array.registers().to_vec(),
        }
    }

    pub fn of_sketch(sketch: &HllSketch, period_id: u32, seed_digest: u64) -> Snapshot {
        Snapshot {
            kind: SnapshotKind::DedicatedSketch,
            width: sketch.width() as u8,
            period_id,
            seed_digest,
            registers: sketch.registers().to_vec(),
        }
    }

    pub fn into_array(self) -> Result<PhysicalRegisterArray, StoreError> {
        if self.kind != SnapshotKind::PhysicalArray {
            return Err(StoreError::BadContent("snapshot holds a sketch".into()));
        }
        PhysicalRegisterArray::from_registers(self.registers, self.width as u32, self.period_id)
            .map_err(|e| StoreError::BadContent(e.to_string()))
    }

    pub fn into_sketch(self) -> Result<HllSketch, StoreError> {
        if self.kind != SnapshotKind::DedicatedSketch {
            return Err(StoreError::BadContent("snapshot holds an array".into()));
        }
        HllSketch::from_registers(self.registers, self.width as u32)
            .map_err(|e| StoreError::BadContent(e.to_string()))
    }
}

/// Packs register values `width` bits each, index ascending, LSB-first
/// within each byte.
pub fn pack_registers(registers: &[u8], width: u8) -> Result<Vec<u8>, StoreError> {
    if width == 0 || width > 8 {
        return Err(StoreError::BadWidth(width));
    }
    let limit = ((1u16 << width) - 1) as u8;
    let total_bits = registers.len() * width as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &value in registers {
        if value > limit {
            return Err(StoreError::ValueOverflow { value, width });
        }
        for offset in 0..width as usize {
            if value & (1 << offset) != 0 {
                out[(bit + offset) / 8] |= 1 << ((bit + offset) % 8);
            }
        }
        bit += width as usize;
    }
    Ok(out)
}

/// Inverse of [`pack_registers`].
pub fn unpack_registers(packed: &[u8], count: usize, width: u8) -> Result<Vec<u8>, StoreError> {
    if width == 0 || width > 8 {
        return Err(StoreError::BadWidth(width));
    }
    let expected = (count * width as usize).div_ceil(8);
    if packed.len() != expected {
        return Err(StoreError::Truncated {
            expected,
            got: packed.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut value = 0u8;
        for offset in 0..width as usize {
            if packed[(bit + offset) / 8] & (1 << ((bit + offset) % 8)) != 0 {
                value |= 1 << offset;
            }
        }
        out.push(value);
        bit += width as usize;
    }
    Ok(out)
}

pub fn write_snapshot<W: Write>(snapshot: &Snapshot, out: &mut W) -> Result<(), StoreError> {
    let payload = pack_registers(&snapshot.registers, snapshot.width)?;
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[snapshot.kind.code(), snapshot.width])?;
    out.write_all(&snapshot.period_id.to_le_bytes())?;
    out.write_all(&(snapshot.registers.len() as u64).to_le_bytes())?;
    out.write_all(&snapshot.seed_digest.to_le_bytes())?;
    out.write_all(&payload)?;
    out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

/// Header fields of a snapshot, readable without the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub kind: SnapshotKind,
    pub width: u8,
    pub period_id: u32,
    pub registers: u64,
    pub seed_digest: u64,
}

fn parse_header(buf: &[u8; HEADER_LEN]) -> Result<SnapshotHeader, StoreError> {
    if buf[0..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(StoreError::VersionMismatch(version));
    }
    let kind = SnapshotKind::from_code(buf[6])?;
    let width = buf[7];
    if width == 0 || width > 8 {
        return Err(StoreError::BadWidth(width));
    }
    Ok(SnapshotHeader {
        kind,
        width,
        period_id: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
        registers: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
        seed_digest: u64::from_le_bytes(buf[20..28].try_into().unwrap()),
    })
}

pub fn read_snapshot<R: Read>(input: &mut R) -> Result<Snapshot, StoreError> {
    let mut header_buf = [0u8; HEADER_LEN];
    read_exact_or_truncated(input, &mut header_buf, HEADER_LEN)?;
    let header = parse_header(&header_buf)?;

    let payload_len = (header.registers as usize * header.width as usize).div_ceil(8);
    let mut payload = vec![0u8; payload_len];
    read_exact_or_truncated(input, &mut payload, HEADER_LEN + payload_len)?;

    let mut crc_buf = [0u8; 4];
    read_exact_or_truncated(input, &mut crc_buf, HEADER_LEN + payload_len + 4)?;
    let stored = u32::from_le_bytes(crc_buf);
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(StoreError::ChecksumMismatch { stored, computed });
    }

    Ok(Snapshot {
        kind: header.kind,
        width: header.width,
        period_id: header.period_id,
        seed_digest: header.seed_digest,
        registers: unpack_registers(&payload, header.registers as usize, header.width)?,
    })
}

fn read_exact_or_truncated<R: Read>(
    input: &mut R,
    buf: &mut [u8],
    expected_total: usize,
) -> Result<(), StoreError> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..])? {
            0 => {
                return Err(StoreError::Truncated {
                    expected: expected_total,
                    got: expected_total - (buf.len() - filled),
                })
            }
            n => filled += n,
        }
    }
    Ok(())
}

pub fn save(snapshot: &Snapshot, path: &Path) -> Result<(), StoreError> {
    let mut file = io::BufWriter::new(File::create(path)?);
    write_snapshot(snapshot, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Snapshot, StoreError> {
    read_snapshot(&mut io::BufReader::new(File::open(path)?))
}

pub fn load_header(path: &Path) -> Result<SnapshotHeader, StoreError> {
    let mut buf = [0u8; HEADER_LEN];
    read_exact_or_truncated(&mut File::open(path)?, &mut buf, HEADER_LEN)?;
    parse_header(&buf)
}

/// Ordered period list for a t-way query, validated for consistency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub registers: u64,
    pub width: u8,
    pub seed_digest: u64,
    /// (period id, snapshot path), ascending by period.
    pub periods: Vec<(u32, PathBuf)>,
}

impl Manifest {
    /// Builds a manifest from snapshot files, rejecting mixed parameters and
    /// duplicate periods.
    pub fn from_snapshot_paths(paths: &[PathBuf]) -> Result<Manifest, StoreError> {
        let mut entries: Vec<(SnapshotHeader, PathBuf)> = Vec::new();
        for path in paths {
            entries.push((load_header(path)?, path.clone()));
        }
        let (first, _) = entries
            .first()
            .ok_or_else(|| StoreError::BadManifest("no snapshots given".into()))?;
        let (registers, width, seed_digest) = (first.registers, first.width, first.seed_digest);
        for (header, path) in &entries {
            if header.registers != registers
                || header.width != width
                || header.seed_digest != seed_digest
            {
                return Err(StoreError::MixedParameters(format!(
                    "{} has m={} h={} digest={:#x}, expected m={} h={} digest={:#x}",
                    path.display(),
                    header.registers,
                    header.width,
                    header.seed_digest,
                    registers,
                    width,
                    seed_digest
                )));
            }
        }
        let mut periods: Vec<(u32, PathBuf)> = entries
            .into_iter()
            .map(|(h, p)| (h.period_id, p))
            .collect();
        periods.sort_by_key(|(id, _)| *id);
        for pair in periods.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(StoreError::DuplicatePeriod(pair[0].0));
            }
        }
        Ok(Manifest {
            registers,
            width,
            seed_digest,
            periods,
        })
    }
}

/// Manifest file tying an experiment together: array geometry, virtual
/// sketch size, the master seed the query side needs to rebuild the seed
/// table, and the per-period snapshot paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentManifest {
    pub registers: u64,
    pub width: u8,
    pub sketch_registers: u64,
    pub master_seed: u64,
    pub seed_digest: u64,
    pub periods: Vec<(u32, PathBuf)>,
}

impl ExperimentManifest {
    /// Writes the manifest; snapshot paths are stored relative to `base`
    /// when they live under it, so the manifest and its snapshots can move
    /// together.
    pub fn write_to<W: Write>(&self, out: &mut W, base: &Path) -> Result<(), StoreError> {
        writeln!(out, "#spread-manifest v1")?;
        writeln!(out, "m={}", self.registers)?;
        writeln!(out, "h={}", self.width)?;
        writeln!(out, "s={}", self.sketch_registers)?;
        writeln!(out, "master_seed={}", self.master_seed)?;
        writeln!(out, "seed_digest={}", self.seed_digest)?;
        for (period, path) in &self.periods {
            let stored = path.strip_prefix(base).unwrap_or(path);
            writeln!(out, "period={}\t{}", period, stored.display())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_owned();
        let mut file = io::BufWriter::new(File::create(path)?);
        self.write_to(&mut file, &base)?;
        file.flush()?;
        Ok(())
    }

    /// Loads a manifest; relative snapshot paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<ExperimentManifest, StoreError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = text.lines();
        if lines.next() != Some("#spread-manifest v1") {
            return Err(StoreError::BadManifest("bad header line".into()));
        }
        let mut registers = None;
        let mut width = None;
        let mut sketch_registers = None;
        let mut master_seed = None;
        let mut seed_digest = None;
        let mut periods = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| StoreError::BadManifest(format!("bad line: {line}")))?;
            let parse_u64 = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| StoreError::BadManifest(format!("bad number: {v}")))
            };
            match key {
                "m" => registers = Some(parse_u64(value)?),
                "h" => width = Some(parse_u64(value)? as u8),
                "s" => sketch_registers = Some(parse_u64(value)?),
                "master_seed" => master_seed = Some(parse_u64(value)?),
                "seed_digest" => seed_digest = Some(parse_u64(value)?),
                "period" => {
                    let (id, p) = value
                        .split_once('\t')
                        .ok_or_else(|| StoreError::BadManifest(format!("bad period: {value}")))?;
                    let raw = PathBuf::from(p);
                    let resolved = if raw.is_absolute() {
                        raw
                    } else {
                        base.join(raw)
                    };
                    periods.push((parse_u64(id)? as u32, resolved));
                }
                other => {
                    return Err(StoreError::BadManifest(format!("unknown key: {other}")));
                }
            }
        }
        let missing = |name: &str| StoreError::BadManifest(format!("missing {name}"));
        Ok(ExperimentManifest {
            registers: registers.ok_or_else(|| missing("m"))?,
            width: width.ok_or_else(|| missing("h"))?,
            sketch_registers: sketch_registers.ok_or_else(|| missing("s"))?,
            master_seed: master_seed.ok_or_else(|| missing("master_seed"))?,
            seed_digest: seed_digest.ok_or_else(|| missing("seed_digest"))?,
            periods,
        })
    }
}

use std::f64::consts::PI;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::sensors::{LaserScan, SensorRig, SensorTriple};
use crate::world::EnvType;

use super::{DatasetError, Result};

pub const NAVD_MAGIC: [u8; 4] = *b"NAVD";
pub const NAVD_VERSION: u16 = 1;
/// Bytes before the first record.
pub const HEADER_LEN: u64 = 4 + 2 + 8 + 2 + 2 + 2 + 4 + 4;
const COUNT_OFFSET: u64 = 6;
/// Fixed part of a record payload: tick, steering, env, dr, two seeds.
const META_LEN: usize = 8 + 4 + 1 + 1 + 8 + 8;

/// Container-wide sensor geometry. Every record shares it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub count: u64,
    pub rgb_height: u16,
    pub rgb_width: u16,
    pub beams: u16,
    pub angle_increment: f32,
    pub max_range: f32,
}

impl DatasetHeader {
    pub fn for_rig(rig: &SensorRig) -> Self {
        Self {
            count: 0,
            rgb_height: rig.camera.height as u16,
            rgb_width: rig.camera.width as u16,
            beams: rig.laser.beams as u16,
            angle_increment: rig.laser.increment() as f32,
            max_range: rig.laser.max_range as f32,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN as usize);
        b.extend_from_slice(&NAVD_MAGIC);
        b.extend_from_slice(&NAVD_VERSION.to_le_bytes());
        b.extend_from_slice(&self.count.to_le_bytes());
        b.extend_from_slice(&self.rgb_height.to_le_bytes());
        b.extend_from_slice(&self.rgb_width.to_le_bytes());
        b.extend_from_slice(&self.beams.to_le_bytes());
        b.extend_from_slice(&self.angle_increment.to_le_bytes());
        b.extend_from_slice(&self.max_range.to_le_bytes());
        b
    }

    fn decode(b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let magic: [u8; 4] = b[0..4].try_into().unwrap();
        if magic != NAVD_MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != NAVD_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Ok(Self {
            count: u64::from_le_bytes(b[6..14].try_into().unwrap()),
            rgb_height: u16_at(14),
            rgb_width: u16_at(16),
            beams: u16_at(18),
            angle_increment: f32_at(20),
            max_range: f32_at(24),
        })
    }

    fn rgb_len(&self) -> usize {
        self.rgb_height as usize * self.rgb_width as usize * 3
    }

    /// The header stores the beam spacing as f32. When it is the f32 image of
    /// the evenly spread half-circle fan, the exact f64 spacing is restored so
    /// reloaded scans compare equal to live ones.
    pub fn angle_increment_f64(&self) -> f64 {
        let exact = PI / (self.beams.max(2) - 1) as f64;
        if exact as f32 == self.angle_increment {
            exact
        } else {
            self.angle_increment as f64
        }
    }

    /// Checks that `t` fits this container and its label is in range.
    pub fn validate(&self, t: &SensorTriple) -> Result<()> {
        if !(t.steering.is_finite() && (-1.0..=1.0).contains(&t.steering)) {
            return Err(DatasetError::SteeringRange(t.steering));
        }
        let dims_ok = t.rgb_height == self.rgb_height as usize
            && t.rgb_width == self.rgb_width as usize
            && t.rgb.len() == self.rgb_len()
            && t.scan.ranges.len() == self.beams as usize;
        if !dims_ok {
            return Err(DatasetError::Geometry(format!(
                "record is {}x{} rgb ({} bytes) with {} beams, container expects {}x{} with {} beams",
                t.rgb_height,
                t.rgb_width,
                t.rgb.len(),
                t.scan.ranges.len(),
                self.rgb_height,
                self.rgb_width,
                self.beams
            )));
        }
        if t.scan.angle_increment as f32 != self.angle_increment || t.scan.max_range as f32 != self.max_range {
            return Err(DatasetError::Geometry(format!(
                "laser spacing {} / range {} differs from container {} / {}",
                t.scan.angle_increment, t.scan.max_range, self.angle_increment, self.max_range
            )));
        }
        if t.cloud.len() > u32::MAX as usize || t.cloud.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DatasetError::Geometry("point cloud has non-finite coordinates".into()));
        }
        if t.scan.ranges.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(DatasetError::Geometry("laser ranges must be non-negative or +inf".into()));
        }
        Ok(())
    }

    fn payload_len(&self, points: usize) -> usize {
        META_LEN + self.rgb_len() + 4 + 12 * points + 4 * self.beams as usize
    }
}

fn encode_record(t: &SensorTriple) -> Vec<u8> {
    let len = META_LEN + t.rgb.len() + 4 + 12 * t.cloud.len() + 4 * t.scan.ranges.len();
    let mut b = Vec::with_capacity(4 + len);
    b.extend_from_slice(&(len as u32).to_le_bytes());
    b.extend_from_slice(&t.tick.to_le_bytes());
    b.extend_from_slice(&t.steering.to_le_bytes());
    b.push(t.env.code());
    b.push(t.dr as u8);
    b.extend_from_slice(&t.world_seed.to_le_bytes());
    b.extend_from_slice(&t.sample_seed.to_le_bytes());
    b.extend_from_slice(&t.rgb);
    b.extend_from_slice(&(t.cloud.len() as u32).to_le_bytes());
    for v in t.cloud.iter().flatten() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for r in &t.scan.ranges {
        let disk = if r.is_finite() { *r } else { -1.0 };
        b.extend_from_slice(&disk.to_le_bytes());
    }
    b
}

/// Appends records to a NAVD file, keeping the header count current so the
/// file stays readable if the process dies between appends.
pub struct DatasetWriter {
    out: BufWriter<File>,
    header: DatasetHeader,
    path: PathBuf,
}

impl DatasetWriter {
    /// Creates (or truncates) `path` with an empty container.
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = DatasetHeader { count: 0, ..header };
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(&header.encode())?;
        out.flush()?;
        Ok(Self { out, header, path })
    }

    /// Reopens an existing container for appending. Bytes after the last
    /// counted record (an interrupted append) are discarded.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let end = {
            let mut reader = DatasetReader::open(&path)?;
            while reader.skip_record()? {}
            reader.offset
        };
        let header = DatasetReader::open(&path)?.header;
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        file.set_len(end)?;
        let mut out = BufWriter::new(file);
        out.seek(SeekFrom::End(0))?;
        Ok(Self { out, header, path })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, t: &SensorTriple) -> Result<()> {
        self.header.validate(t)?;
        self.out.write_all(&encode_record(t))?;
        self.header.count += 1;
        self.out.seek(SeekFrom::Start(COUNT_OFFSET))?;
        self.out.write_all(&self.header.count.to_le_bytes())?;
        self.out.seek(SeekFrom::End(0))?;
        self.out.flush()?;
        Ok(())
    }

    /// Flushes and syncs the file.
    pub fn finish(mut self) -> Result<DatasetHeader> {
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.header)
    }
}

/// Streams the counted records of a NAVD file in order.
pub struct DatasetReader {
    input: BufReader<File>,
    header: DatasetHeader,
    next: u64,
    offset: u64,
}

fn eof_as_truncated(index: u64) -> impl Fn(io::Error) -> DatasetError {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            DatasetError::TruncatedRecord { index }
        } else {
            DatasetError::Io(e)
        }
    }
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut b = [0u8; HEADER_LEN as usize];
        input.read_exact(&mut b).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                DatasetError::TruncatedHeader
            } else {
                DatasetError::Io(e)
            }
        })?;
        let header = DatasetHeader::decode(&b)?;
        Ok(Self {
            input,
            header,
            next: 0,
            offset: HEADER_LEN,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_payload(&mut self) -> Result<Option<Vec<u8>>> {
        if self.next >= self.header.count {
            return Ok(None);
        }
        let index = self.next;
        let mut len = [0u8; 4];
        self.input.read_exact(&mut len).map_err(eof_as_truncated(index))?;
        let len = u32::from_le_bytes(len) as usize;
        let min = self.header.payload_len(0);
        // A length below the fixed part or beyond any plausible cloud is a
        // broken frame; refuse before allocating.
        if len < min || len > self.header.payload_len(u32::MAX as usize / 12) {
            return Err(DatasetError::TruncatedRecord { index });
        }
        let mut payload = vec![0u8; len];
        self.input.read_exact(&mut payload).map_err(eof_as_truncated(index))?;
        self.next += 1;
        self.offset += 4 + len as u64;
        Ok(Some(payload))
    }

    fn skip_record(&mut self) -> Result<bool> {
        Ok(self.read_payload()?.is_some())
    }

    pub fn next_record(&mut self) -> Result<Option<SensorTriple>> {
        let index = self.next;
        match self.read_payload()? {
            Some(p) => self.decode(index, &p).map(Some),
            None => Ok(None),
        }
    }

    fn decode(&self, index: u64, p: &[u8]) -> Result<SensorTriple> {
        let h = &self.header;
        let rgb_len = h.rgb_len();
        let at_points = META_LEN + rgb_len;
        let points = u32::from_le_bytes(p[at_points..at_points + 4].try_into().unwrap()) as usize;
        if p.len() != h.payload_len(points) {
            return Err(DatasetError::TruncatedRecord { index });
        }
        let f32_at = |o: usize| f32::from_le_bytes(p[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(p[o..o + 8].try_into().unwrap());
        let env = EnvType::from_code(p[12]).ok_or_else(|| DatasetError::CorruptRecord {
            index,
            detail: format!("unknown environment code {}", p[12]),
        })?;
        let dr = match p[13] {
            0 => false,
            1 => true,
            other => {
                return Err(DatasetError::CorruptRecord {
                    index,
                    detail: format!("dr flag {other}"),
                })
            }
        };
        let cloud_at = at_points + 4;
        let cloud = (0..points)
            .map(|i| {
                let o = cloud_at + 12 * i;
                [f32_at(o), f32_at(o + 4), f32_at(o + 8)]
            })
            .collect();
        let scan_at = cloud_at + 12 * points;
        let ranges = (0..h.beams as usize)
            .map(|i| {
                let r = f32_at(scan_at + 4 * i);
                if r < 0.0 {
                    f32::INFINITY
                } else {
                    r
                }
            })
            .collect();
        let steering = f32_at(8);
        if !(steering.is_finite() && (-1.0..=1.0).contains(&steering)) {
            return Err(DatasetError::CorruptRecord {
                index,
                detail: format!("steering {steering} outside [-1, 1]"),
            });
        }
        Ok(SensorTriple {
            rgb_height: h.rgb_height as usize,
            rgb_width: h.rgb_width as usize,
            rgb: p[META_LEN..at_points].to_vec(),
            cloud,
            scan: LaserScan {
                ranges,
                angle_increment: h.angle_increment_f64(),
                max_range: h.max_range as f64,
            },
            steering,
            tick: u64_at(0),
            env,
            dr,
            world_seed: u64_at(14),
            sample_seed: u64_at(22),
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SensorTriple>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(t)) => Some(Ok(t)),
            Ok(None) => None,
            Err(e) => {
                // Stop after the first error.
                self.next = self.header.count;
                Some(Err(e))
            }
        }
    }
}

/// Reads every record of `path` as stored.
pub fn read_records(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SensorTriple>)> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Writes `records` to a fresh container at `path`.
pub fn write_records(path: impl AsRef<Path>, header: DatasetHeader, records: &[SensorTriple]) -> Result<DatasetHeader> {
    let mut w = DatasetWriter::create(path, header)?;
    for t in records {
        w.append(t)?;
    }
    w.finish()
}

//! NAVD sensor-triple container, normalized loading, seeded splits and
//! corpus statistics.

mod navd;
mod stats;

pub use navd::{read_records, write_records, DatasetHeader, DatasetReader, DatasetWriter, HEADER_LEN, NAVD_MAGIC, NAVD_VERSION};
pub use stats::{dataset_stats, split_dataset, steering_stats, DatasetStats, SplitSpec, HISTOGRAM_BINS};

use std::path::Path;

use nav_tensor::Tensor;
use thiserror::Error;

use crate::nets::{Arch, Batch, NetConfig};
use crate::sensors::{sample_pointcloud, scan_to_distance_map, DistanceMap, SensorTriple};
use crate::world::EnvType;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a NAVD file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported NAVD version {0}")]
    UnsupportedVersion(u16),
    #[error("file ends inside the header")]
    TruncatedHeader,
    #[error("truncated record at index {index}")]
    TruncatedRecord { index: u64 },
    #[error("corrupt record at index {index}: {detail}")]
    CorruptRecord { index: u64, detail: String },
    #[error("steering {0} outside [-1, 1]")]
    SteeringRange(f32),
    #[error("record does not match container: {0}")]
    Geometry(String),
    #[error("network input {found} does not match dataset {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One record prepared for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tick: u64,
    pub steering: f32,
    pub env: EnvType,
    pub dr: bool,
    pub world_seed: u64,
    pub sample_seed: u64,
    /// `[3, H, W]` planes scaled to `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Exactly `NetConfig::points` points.
    pub cloud: Vec<[f32; 3]>,
    pub dmap: DistanceMap,
}

impl Sample {
    /// Normalizes, resamples and rasterizes one stored triple.
    pub fn from_triple(t: &SensorTriple, cfg: &NetConfig) -> Result<Self> {
        if t.rgb_height != cfg.rgb_height || t.rgb_width != cfg.rgb_width {
            return Err(DatasetError::ConfigMismatch {
                expected: format!("{}x{} rgb", t.rgb_height, t.rgb_width),
                found: format!("{}x{} rgb", cfg.rgb_height, cfg.rgb_width),
            });
        }
        Ok(Self {
            tick: t.tick,
            steering: t.steering,
            env: t.env,
            dr: t.dr,
            world_seed: t.world_seed,
            sample_seed: t.sample_seed,
            rgb: rgb_planes(&t.rgb, t.rgb_height, t.rgb_width),
            cloud: sample_pointcloud(&t.cloud, cfg.points, t.sample_seed),
            dmap: scan_to_distance_map(&t.scan, cfg.dmap_height, cfg.dmap_width, cfg.dmap_pixels_per_meter()),
        })
    }
}

/// Interleaved `H x W x 3` bytes to planar `[3, H, W]` reals in `[0, 1]`.
pub fn rgb_planes(rgb: &[u8], height: usize, width: usize) -> Vec<f32> {
    let hw = height * width;
    let mut out = vec![0f32; 3 * hw];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// A loaded dataset: container header, the network geometry used to
/// derive inputs, and the samples in file order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub config: NetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_triples(header: DatasetHeader, triples: &[SensorTriple], cfg: &NetConfig) -> Result<Self> {
        let samples = nav_tensor::par::map_slice(triples, |t| Sample::from_triple(t, cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header: DatasetHeader {
                count: samples.len() as u64,
                ..header
            },
            config: cfg.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<f32> {
        indices.iter().map(|&i| self.samples[i].steering).collect()
    }

    /// Stacks the given samples into network inputs.
    pub fn batch(&self, indices: &[usize], arch: Arch) -> Batch {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        make_batch(&picked, &self.config, arch)
    }
}

/// Stacks samples derived with `cfg`. Only the modalities `arch` consumes
/// are materialized.
pub fn make_batch(samples: &[&Sample], cfg: &NetConfig, arch: Arch) -> Batch {
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * cfg.rgb_height * cfg.rgb_width);
    for s in samples {
        rgb.extend_from_slice(&s.rgb);
    }
    let rgb = Tensor::new(vec![n, 3, cfg.rgb_height, cfg.rgb_width], rgb).expect("rgb planes match config");
    if arch == Arch::Rgbnet {
        return Batch { rgb, cloud: None, dmap: None };
    }
    let mut cloud = Vec::with_capacity(n * cfg.points * 3);
    let mut dmap = Vec::with_capacity(n * cfg.dmap_height * cfg.dmap_width);
    for s in samples {
        cloud.extend(s.cloud.iter().flatten());
        dmap.extend(s.dmap.cells.iter().map(|&c| c as f32));
    }
    Batch {
        rgb,
        cloud: Some(Tensor::new(vec![n, cfg.points, 3], cloud).expect("cloud matches config")),
        dmap: Some(Tensor::new(vec![n, 1, cfg.dmap_height, cfg.dmap_width], dmap).expect("dmap matches config")),
    }
}

/// Reads `path` and derives network inputs with `cfg`'s geometry.
pub fn load_dataset(path: impl AsRef<Path>, cfg: &NetConfig) -> Result<Dataset> {
    const CHUNK: usize = 256;
    let mut reader = DatasetReader::open(path)?;
    let header = *reader.header();
    if header.rgb_height as usize != cfg.rgb_height || header.rgb_width as usize != cfg.rgb_width {
        return Err(DatasetError::ConfigMismatch {
            expected: format!("{}x{} rgb", header.rgb_height, header.rgb_width),
            found: format!("{}x{} rgb", cfg.rgb_height, cfg.rgb_width),
        });
    }
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut chunk = Vec::with_capacity(CHUNK);
    loop {
        let more = match reader.next_record()? {
            Some(t) => {
                chunk.push(t);
                true
            }
            None => false,
        };
        if chunk.len() == CHUNK || (!more && !chunk.is_empty()) {
            let derived = nav_tensor::par::map_slice(&chunk, |t| Sample::from_triple(t, cfg));
            for s in derived {
                samples.push(s?);
            }
            chunk.clear();
        }
        if !more {
            break;
        }
    }
    Ok(Dataset {
        header,
        config: cfg.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::sensors::{LaserScan, SensorRig};

    fn triple(i: u64) -> SensorTriple {
        let rig = SensorRig::default();
        let (h, w) = (rig.camera.height, rig.camera.width);
        let mut ranges = vec![f32::INFINITY; rig.laser.beams];
        for (b, r) in ranges.iter_mut().enumerate() {
            if (b as u64 + i).is_multiple_of(3) {
                *r = 0.5 + (b % 17) as f32 * 0.7;
            }
        }
        SensorTriple {
            rgb_height: h,
            rgb_width: w,
            rgb: (0..h * w * 3).map(|k| ((k as u64 * 7 + i) % 256) as u8).collect(),
            cloud: (0..(i as usize % 5) * 11).map(|k| [k as f32 * 0.1, -0.2, 1.0 + i as f32]).collect(),
            scan: LaserScan {
                ranges,
                angle_increment: rig.laser.increment(),
                max_range: rig.laser.max_range,
            },
            steering: ((i as f32) * 0.37).sin(),
            tick: 100 + i,
            env: EnvType::ALL[i as usize % 4],
            dr: i % 2 == 1,
            world_seed: i * 31,
            sample_seed: i * 17 + 3,
        }
    }

    fn header() -> DatasetHeader {
        DatasetHeader::for_rig(&SensorRig::default())
    }

    #[test]
    fn round_trip_is_field_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.navd");
        let records: Vec<_> = (0..9).map(triple).collect();
        let h = write_records(&path, header(), &records).unwrap();
        assert_eq!(h.count, 9);
        let (h2, back) = read_records(&path).unwrap();
        assert_eq!(h2, h);
        assert_eq!(back, records);
        assert_eq!(h2.angle_increment_f64(), PI / 180.0);
    }

    #[test]
    fn steering_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d.navd"), header()).unwrap();
        let mut t = triple(1);
        t.steering = 1.5;
        assert!(matches!(w.append(&t), Err(DatasetError::SteeringRange(s)) if s == 1.5));
        t.steering = f32::NAN;
        assert!(w.append(&t).is_err());
        assert_eq!(w.len(), 0);
    }

    #[test]
    fn corrupt_length_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.navd");
        let records: Vec<_> = (0..5).map(triple).collect();
        write_records(&path, header(), &records).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mut at = HEADER_LEN as usize;
        for _ in 0..2 {
            at += 4 + u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        for bad in [len - 12, len + 12, 3, u32::MAX] {
            bytes[at..at + 4].copy_from_slice(&bad.to_le_bytes());
            std::fs::write(&path, &bytes).unwrap();
            assert!(matches!(read_records(&path), Err(DatasetError::TruncatedRecord { index: 2 })), "len {bad}");
        }
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.navd");
        write_records(&path, header(), &[triple(0)]).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        std::fs::write(&path, &b).unwrap();
        assert!(matches!(read_records(&path), Err(DatasetError::BadMagic(m)) if &m == b"XAVD"));
        let mut b = good.clone();
        b[4] = 2;
        std::fs::write(&path, &b).unwrap();
        assert!(matches!(read_records(&path), Err(DatasetError::UnsupportedVersion(2))));
        std::fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(read_records(&path), Err(DatasetError::TruncatedHeader)));
        for cut in [HEADER_LEN as usize + 2, good.len() - 1] {
            std::fs::write(&path, &good[..cut]).unwrap();
            assert!(matches!(read_records(&path), Err(DatasetError::TruncatedRecord { index: 0 })));
        }
    }

    #[test]
    fn interrupted_append_is_recoverable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.navd");
        write_records(&path, header(), &[triple(0), triple(1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let full = bytes.len();
        // A crash mid-append leaves a partial, uncounted record behind.
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_records(&path).unwrap().1.len(), 2);
        let mut w = DatasetWriter::append_to(&path).unwrap();
        assert_eq!(w.len(), 2);
        w.append(&triple(2)).unwrap();
        w.finish().unwrap();
        let (h, back) = read_records(&path).unwrap();
        assert_eq!(h.count, 3);
        assert_eq!(back, vec![triple(0), triple(1), triple(2)]);
        assert!(std::fs::metadata(&path).unwrap().len() > full as u64);
    }

    #[test]
    fn load_derives_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.navd");
        let records: Vec<_> = (0..7).map(triple).collect();
        write_records(&path, header(), &records).unwrap();
        let cfg = NetConfig {
            points: 32,
            ..NetConfig::default()
        };
        let ds = load_dataset(&path, &cfg).unwrap();
        assert_eq!(ds.len(), 7);
        for (s, t) in ds.samples.iter().zip(&records) {
            assert_eq!(s.tick, t.tick);
            assert_eq!(s.cloud.len(), 32);
            assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.rgb[0], t.rgb[0] as f32 / 255.0);
            assert_eq!(s.rgb[cfg.rgb_height * cfg.rgb_width], t.rgb[1] as f32 / 255.0);
            assert_eq!(s.dmap, scan_to_distance_map(&t.scan, 32, 64, 4.0));
        }
        let b = ds.batch(&[3, 1], Arch::Nmfnet);
        assert_eq!(b.rgb.shape(), &[2, 3, 48, 64]);
        assert_eq!(b.cloud.as_ref().unwrap().shape(), &[2, 32, 3]);
        assert_eq!(b.dmap.as_ref().unwrap().shape(), &[2, 1, 32, 64]);
        assert!(ds.batch(&[0], Arch::Rgbnet).cloud.is_none());
        let wrong = NetConfig::tiny();
        assert!(matches!(load_dataset(&path, &wrong), Err(DatasetError::ConfigMismatch { .. })));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d.navd"), header()).unwrap();
        let mut t = triple(0);
        t.scan.ranges.pop();
        assert!(matches!(w.append(&t), Err(DatasetError::Geometry(_))));
    }
}

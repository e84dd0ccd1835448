use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kspace::{band_half_width, kspace_truncate};
use super::phantom::generate_phantom_volume;
use super::{center_crop, Grid};
use crate::curriculum::{shannon_entropy, DEFAULT_ENTROPY_BINS};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Relative sizes of the train/val/test splits, counted in volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 7.0,
            val: 1.0,
            test: 2.0,
        }
    }
}

impl SplitRatios {
    /// Volume counts per split by largest remainder; ties go to the earlier split.
    pub fn counts(&self, volumes: usize) -> Result<[usize; 3]> {
        let parts = [self.train, self.val, self.test];
        let total: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || total <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        let exact: Vec<f64> = parts.iter().map(|p| p / total * volumes as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = volumes - counts.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        Ok([counts[0], counts[1], counts[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPaths {
    pub hr_t2: String,
    pub lr_t2: String,
    pub hr_t1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub slice_id: String,
    pub volume_id: String,
    pub paths: GridPaths,
    pub shape: [usize; 2],
    pub entropy_bits: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// How grids are mapped to the model range when loaded.
    pub scheme: String,
    pub range: [f64; 2],
    /// Which grid entropies are computed on, and with how many bins.
    pub entropy_source: String,
    pub entropy_bins: usize,
    /// Description of the retained k-space region.
    pub kspace_band: String,
}

impl Normalization {
    fn for_scale(scale: usize, crop: [usize; 3]) -> Self {
        Self {
            scheme: "per_slice_minmax".into(),
            range: [-1.0, 1.0],
            entropy_source: "hr_t2 before normalization".into(),
            entropy_bins: DEFAULT_ENTROPY_BINS,
            kspace_band: format!(
                "centered DFT; signed frequencies |k_row| <= {} and |k_col| <= {} kept, rest zeroed; real part of inverse",
                band_half_width(crop[0], scale),
                band_half_width(crop[1], scale)
            ),
        }
    }
}

/// Dataset index. Grid paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub created_with: String,
    /// Rows, columns and slices per volume after cropping.
    pub crop: [usize; 3],
    pub scale: usize,
    pub normalization: Normalization,
    pub records: Vec<RecordMeta>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// A paired slice in raw (unnormalized) intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub slice_id: String,
    pub volume_id: String,
    pub hr_t2: Grid,
    pub lr_t2: Grid,
    pub hr_t1: Grid,
    pub scale: usize,
    pub entropy_bits: f64,
    pub split: Split,
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let bytes: Vec<u8> = grid
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path, shape: [usize; 2]) -> Result<Grid> {
    let values = read_f32(path, shape[0] * shape[1])?;
    Ok(Grid::from_shape_vec((shape[0], shape[1]), values).expect("length checked"))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn round_f32(grid: &Grid) -> Grid {
    grid.mapv(|v| v as f32 as f64)
}

impl Manifest {
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest version {}", manifest.version),
            });
        }
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks id uniqueness, volume-wise split disjointness and that every
    /// grid file exists.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut volume_split: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if !ids.insert(r.slice_id.as_str()) {
                return Err(Error::Config(format!("duplicate slice id {}", r.slice_id)));
            }
            if let Some(prev) = volume_split.insert(r.volume_id.as_str(), r.split) {
                if prev != r.split {
                    return Err(Error::Config(format!(
                        "volume {} appears in both {prev:?} and {:?}",
                        r.volume_id, r.split
                    )));
                }
            }
            for p in [&r.paths.hr_t2, &r.paths.lr_t2, &r.paths.hr_t1] {
                let full = self.base_dir.join(p);
                if !full.is_file() {
                    return Err(Error::Format {
                        path: full,
                        reason: "grid file missing".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &RecordMeta> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, slice_id: &str) -> Option<&RecordMeta> {
        self.records.iter().find(|r| r.slice_id == slice_id)
    }

    pub fn load_record(&self, meta: &RecordMeta) -> Result<SliceRecord> {
        let read = |p: &str| read_grid(&self.base_dir.join(p), meta.shape);
        Ok(SliceRecord {
            slice_id: meta.slice_id.clone(),
            volume_id: meta.volume_id.clone(),
            hr_t2: read(&meta.paths.hr_t2)?,
            lr_t2: read(&meta.paths.lr_t2)?,
            hr_t1: read(&meta.paths.hr_t1)?,
            scale: self.scale,
            entropy_bits: meta.entropy_bits,
            split: meta.split,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SliceRecord>> {
        self.records_in(split).map(|m| self.load_record(m)).collect()
    }
}

/// One subject's co-registered target and auxiliary volumes, axes
/// `(row, col, slice)`.
#[derive(Debug, Clone)]
pub struct VolumePair {
    pub id: String,
    pub t2: Array3<f64>,
    pub t1: Array3<f64>,
}

/// Crops every volume, degrades the target contrast, and writes grids plus
/// `manifest.json` into `out_dir`. Splits are assigned per volume after a
/// seeded shuffle.
pub fn build_dataset(
    volumes: &[VolumePair],
    crop: [usize; 3],
    scale: usize,
    ratios: SplitRatios,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if scale != 2 && scale != 4 {
        return Err(Error::Config(format!("scale must be 2 or 4, got {scale}")));
    }
    if crop[0] % scale != 0 || crop[1] % scale != 0 {
        return Err(Error::Config(format!(
            "crop {}x{} is not divisible by scale {scale}",
            crop[0], crop[1]
        )));
    }
    let counts = ratios.counts(volumes.len())?;
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split_of = vec![Split::Train; volumes.len()];
    for (pos, &v) in order.iter().enumerate() {
        split_of[v] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let grid_dir = out_dir.join("grids");
    fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    let mut records = Vec::new();
    for (v, vol) in volumes.iter().enumerate() {
        if vol.t2.dim() != vol.t1.dim() {
            return Err(Error::shape(
                &[vol.t2.dim().0, vol.t2.dim().1, vol.t2.dim().2],
                &[vol.t1.dim().0, vol.t1.dim().1, vol.t1.dim().2],
            ));
        }
        let t2 = center_crop(&vol.t2, crop[0], crop[1], crop[2])?;
        let t1 = center_crop(&vol.t1, crop[0], crop[1], crop[2])?;
        for k in 0..crop[2] {
            let slice_id = format!("{}_s{k:03}", vol.id);
            let hr_t2 = round_f32(&t2.index_axis(Axis(2), k).to_owned());
            let hr_t1 = round_f32(&t1.index_axis(Axis(2), k).to_owned());
            let lr_t2 = kspace_truncate(hr_t2.view(), scale)?;
            let paths = GridPaths {
                hr_t2: format!("grids/{slice_id}.hr_t2.f32"),
                lr_t2: format!("grids/{slice_id}.lr_t2.f32"),
                hr_t1: format!("grids/{slice_id}.hr_t1.f32"),
            };
            write_grid(&out_dir.join(&paths.hr_t2), &hr_t2)?;
            write_grid(&out_dir.join(&paths.lr_t2), &lr_t2)?;
            write_grid(&out_dir.join(&paths.hr_t1), &hr_t1)?;
            records.push(RecordMeta {
                entropy_bits: shannon_entropy(&hr_t2, DEFAULT_ENTROPY_BINS)?,
                slice_id,
                volume_id: vol.id.clone(),
                paths,
                shape: [crop[0], crop[1]],
                split: split_of[v],
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        created_with: concat!("mcdiff ", env!("CARGO_PKG_VERSION")).into(),
        crop,
        scale,
        normalization: Normalization::for_scale(scale, crop),
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub volumes: usize,
    pub slices_per_volume: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Phantom volumes rendered with a margin and cropped back to
/// `resolution × resolution × slices_per_volume`.
pub fn build_phantom_dataset(
    spec: &PhantomSpec,
    scale: usize,
    ratios: SplitRatios,
    out_dir: &Path,
) -> Result<Manifest> {
    if spec.volumes == 0 {
        return Err(Error::Empty("phantom dataset needs at least one volume"));
    }
    let margin = (spec.resolution / 8).max(1);
    let volumes = (0..spec.volumes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let (t2, t1) =
                generate_phantom_volume(&mut rng, spec.resolution + 2 * margin, spec.slices_per_volume + 2)?;
            Ok(VolumePair {
                id: format!("vol{i:04}"),
                t2,
                t1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_dataset(
        &volumes,
        [spec.resolution, spec.resolution, spec.slices_per_volume],
        scale,
        ratios,
        spec.seed,
        out_dir,
    )
}

#[derive(Debug, Deserialize)]
struct VolumeEntry {
    id: String,
    shape: [usize; 3],
    t2: PathBuf,
    t1: PathBuf,
}

/// Reads volumes listed in a JSON index of
/// `{"id", "shape": [rows, cols, slices], "t2", "t1"}` entries, where each
/// path names a raw little-endian float32 volume in row-major order.
pub fn ingest_volumes(index: &Path) -> Result<Vec<VolumePair>> {
    let text = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let entries: Vec<VolumeEntry> = serde_json::from_str(&text)?;
    let base = index.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let load = |p: &Path| -> Result<Array3<f64>> {
                let values = read_f32(&base.join(p), n)?;
                Ok(Array3::from_shape_vec((e.shape[0], e.shape[1], e.shape[2]), values)
                    .expect("length checked"))
            };
            Ok(VolumePair {
                t2: load(&e.t2)?,
                t1: load(&e.t1)?,
                id: e.id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(volumes: usize) -> PhantomSpec {
        PhantomSpec {
            volumes,
            slices_per_volume: 4,
            resolution: 16,
            seed: 11,
        }
    }

    #[test]
    fn split_counts() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(10).unwrap(), [7, 1, 2]);
        assert_eq!(r.counts(20).unwrap(), [14, 2, 4]);
        assert_eq!(r.counts(3).unwrap().iter().sum::<usize>(), 3);
        let bad = SplitRatios {
            train: -1.0,
            val: 1.0,
            test: 1.0,
        };
        assert!(bad.counts(10).is_err());
    }

    #[test]
    fn phantom_dataset_contract() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_phantom_dataset(&tiny_spec(10), 4, SplitRatios::default(), dir.path()).unwrap();
        let count = |s| m.records_in(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (28, 4, 8));

        let mut by_split: HashMap<Split, HashSet<&str>> = HashMap::new();
        for r in &m.records {
            by_split.entry(r.split).or_default().insert(&r.volume_id);
        }
        assert_eq!(by_split[&Split::Train].len(), 7);
        assert_eq!(by_split[&Split::Val].len(), 1);
        assert_eq!(by_split[&Split::Test].len(), 2);
        for a in [Split::Train, Split::Val, Split::Test] {
            for b in [Split::Train, Split::Val, Split::Test] {
                if a != b {
                    assert!(by_split[&a].is_disjoint(&by_split[&b]));
                }
            }
        }

        for meta in &m.records {
            let rec = m.load_record(meta).unwrap();
            let expect = kspace_truncate(rec.hr_t2.view(), 4).unwrap().mapv(|v| v as f32 as f64);
            assert_eq!(rec.lr_t2, expect);
            assert_eq!(rec.entropy_bits, shannon_entropy(&rec.hr_t2, 256).unwrap());
        }

        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_phantom_dataset(&tiny_spec(2), 2, SplitRatios::default(), dir.path()).unwrap();
        let dup = m.records[0].clone();
        m.records.push(dup);
        assert!(m.validate().is_err());
        m.records.pop();
        m.records[0].paths.hr_t2 = "grids/missing.f32".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_bad_scale() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_phantom_dataset(&tiny_spec(2), 3, SplitRatios::default(), dir.path()).is_err());
    }

    #[test]
    fn ingest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Array3::from_shape_fn((16, 16, 2), |(r, c, s)| (r + c + s) as f64 / 40.0);
        let bytes: Vec<u8> = vol.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(dir.path().join("a_t2.f32"), &bytes).unwrap();
        fs::write(dir.path().join("a_t1.f32"), &bytes).unwrap();
        fs::write(
            dir.path().join("index.json"),
            r#"[{"id": "a", "shape": [16, 16, 2], "t2": "a_t2.f32", "t1": "a_t1.f32"}]"#,
        )
        .unwrap();
        let vols = ingest_volumes(&dir.path().join("index.json")).unwrap();
        assert_eq!(vols.len(), 1);
        assert_eq!(vols[0].t2, vol.mapv(|v| v as f32 as f64));
    }
}

//! Synthetic filter-removal corpus: procedural source images, filtered
//! renditions, a tab-separated index and pair loading.

pub mod filters;
pub mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::Pair;

pub use filters::{builtin_filters, find_filter, FilterSpec};
pub use io::{load_image, load_image_strict, save_image};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract("split", format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    /// Paths relative to the index directory.
    pub original: PathBuf,
    pub filtered: PathBuf,
    pub filter: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.original.display(),
                e.filtered.display(),
                e.filter,
                e.split
            ));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::contract(
                    "index",
                    format!(
                        "line {}: expected 4 tab-separated fields, found {}",
                        i + 1,
                        f.len()
                    ),
                ));
            }
            entries.push(IndexEntry {
                original: f[0].into(),
                filtered: f[1].into(),
                filter: f[2].to_string(),
                split: f[3].parse()?,
            });
        }
        let idx = Self {
            root: root.to_path_buf(),
            entries,
        };
        idx.validate()?;
        Ok(idx)
    }

    /// Each filtered image has one original and every original sits in
    /// exactly one split.
    pub fn validate(&self) -> Result<()> {
        let mut split_of = std::collections::HashMap::new();
        let mut filtered = std::collections::HashSet::new();
        for e in &self.entries {
            if !filtered.insert(&e.filtered) {
                return Err(Error::contract(
                    "index",
                    format!("{} listed twice", e.filtered.display()),
                ));
            }
            if let Some(s) = split_of.insert(&e.original, e.split) {
                if s != e.split {
                    return Err(Error::contract(
                        "index",
                        format!(
                            "{} appears in splits {s} and {}",
                            e.original.display(),
                            e.split
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(root, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Load `(filtered, original)` pairs of one split, in index order.
    pub fn load_pairs<T: Real>(&self, split: Split) -> Result<Vec<Pair<T>>> {
        let entries: Vec<&IndexEntry> = self.split(split).collect();
        entries
            .par_iter()
            .map(|e| {
                let input = load_image(&self.root.join(&e.filtered))?;
                let target = load_image(&self.root.join(&e.original))?;
                if input.shape() != target.shape() {
                    return Err(Error::contract(
                        "index",
                        format!("{} and its original differ in size", e.filtered.display()),
                    ));
                }
                Ok(Pair { input, target })
            })
            .collect()
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic synthetic photo: a four-corner color gradient, soft-edged
/// ellipses and rectangles, and a faint periodic texture.
pub fn procedural_image<T: Real>(seed: u64, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.05..0.95));
    let corners = [
        color(&mut rng),
        color(&mut rng),
        color(&mut rng),
        color(&mut rng),
    ];
    struct Shape {
        ellipse: bool,
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        col: [f64; 3],
        alpha: f64,
    }
    let n_shapes = rng.random_range(3..=7);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            ellipse: rng.random_bool(0.5),
            cy: rng.random_range(0.0..1.0),
            cx: rng.random_range(0.0..1.0),
            ry: rng.random_range(0.08..0.35),
            rx: rng.random_range(0.08..0.35),
            col: color(&mut rng),
            alpha: rng.random_range(0.5..1.0),
        })
        .collect();
    let freq = [rng.random_range(4.0..16.0), rng.random_range(4.0..16.0)];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.01..0.05);

    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let mut px = [0.0; 3];
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                px[c] = top * (1.0 - v) + bottom * v;
            }
            for s in &shapes {
                let (dy, dx) = ((v - s.cy) / s.ry, (u - s.cx) / s.rx);
                let d = if s.ellipse {
                    (dy * dy + dx * dx).sqrt()
                } else {
                    dy.abs().max(dx.abs())
                };
                let cover = smooth((1.0 - (d - 0.95) / 0.1).clamp(0.0, 1.0)) * s.alpha;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + s.col[c] * cover;
                }
            }
            let tex = amp * (std::f64::consts::TAU * (freq[0] * u + freq[1] * v) + phase).sin();
            for c in 0..3 {
                data[c * h * w + y * w + x] = T::of((px[c] + tex).clamp(0.02, 0.98));
            }
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("shape")
}

/// `count` procedural sources named `synth_000`, `synth_001`, ...
pub fn synthetic_sources(count: usize, size: usize, seed: u64) -> Vec<(String, Tensor<f32>)> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            (
                format!("synth_{i:03}"),
                procedural_image(
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    size,
                    size,
                ),
            )
        })
        .collect()
}

/// Decodable images of a directory, sorted by file name.
pub fn load_sources(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    paths
        .par_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            Ok((stem, load_image(p)?))
        })
        .collect()
}

/// Split sizes for `n` originals: one eighth each for validation and test.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let held = ((n as f64) / 8.0).round().max(1.0) as usize;
    (n - 2 * held, held, held)
}

/// Write originals and every filtered rendition under `out_dir` and return
/// (and write) the index. Splits are assigned per original.
pub fn generate_corpus(
    sources: &[(String, Tensor<f32>)],
    filters: &[FilterSpec],
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetIndex> {
    for f in filters {
        f.validate()?;
    }
    let orig_dir = out_dir.join("originals");
    let filt_dir = out_dir.join("filtered");
    for d in [&orig_dir, &filt_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_counts(sources.len());
    let mut split = vec![Split::Test; sources.len()];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let per_source: Vec<Vec<IndexEntry>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, (stem, img))| {
            let original = PathBuf::from("originals").join(format!("{stem}.png"));
            save_image(&out_dir.join(&original), img)?;
            filters
                .iter()
                .map(|f| {
                    let filtered =
                        PathBuf::from("filtered").join(format!("{stem}__{}.png", f.name));
                    save_image(&out_dir.join(&filtered), &f.apply(img)?)?;
                    Ok(IndexEntry {
                        original: original.clone(),
                        filtered,
                        filter: f.name.clone(),
                        split: split[i],
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        entries: per_source.into_iter().flatten().collect(),
    };
    index.validate()?;
    index.write(&out_dir.join(INDEX_FILE))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_images_are_deterministic_and_in_range() {
        let a: Tensor<f32> = procedural_image(5, 24, 32);
        assert_eq!(a, procedural_image(5, 24, 32));
        assert_ne!(a, procedural_image(6, 24, 32));
        assert!(a.data().iter().all(|&v| (0.02..=0.98).contains(&v)));
    }

    #[test]
    fn corpus_counts_naming_and_rerun_identity() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synthetic_sources(2, 16, 0);
        let filters = builtin_filters();
        let idx = generate_corpus(&sources, &filters, dir.path(), 1).unwrap();
        assert_eq!(idx.entries.len(), 2 * filters.len());
        assert_eq!(
            idx.entries[0].filtered,
            PathBuf::from("filtered/synth_000__warm-fade.png")
        );
        let first = std::fs::read(dir.path().join(INDEX_FILE)).unwrap();
        let png = std::fs::read(dir.path().join(&idx.entries[3].filtered)).unwrap();
        generate_corpus(&sources, &filters, dir.path(), 1).unwrap();
        assert_eq!(std::fs::read(dir.path().join(INDEX_FILE)).unwrap(), first);
        assert_eq!(
            std::fs::read(dir.path().join(&idx.entries[3].filtered)).unwrap(),
            png
        );
        let back = DatasetIndex::read(&dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(back.entries, idx.entries);
        let pairs: Vec<Pair<f32>> = back.load_pairs(Split::Train).unwrap();
        assert_eq!(pairs.len(), back.split(Split::Train).count());
    }

    #[test]
    fn splits_are_disjoint_by_original() {
        let (tr, va, te) = split_counts(32);
        assert_eq!((tr, va, te), (24, 4, 4));
        let dir = tempfile::tempdir().unwrap();
        let idx = generate_corpus(
            &synthetic_sources(8, 8, 3),
            &builtin_filters()[..2],
            dir.path(),
            4,
        )
        .unwrap();
        idx.validate().unwrap();
        let bad = "a.png\tb.png\tf\ttrain\na.png\tc.png\tf\ttest\n";
        assert!(DatasetIndex::parse(Path::new("."), bad).is_err());
        assert!(DatasetIndex::parse(Path::new("."), "a\tb\tc\n").is_err());
    }

    fn affine_fit(x: &Tensor<f64>, y: &Tensor<f64>) -> Tensor<f64> {
        // least squares y_c = sum_k a_ck x_k + b_c via the 4x4 normal equations
        let plane = x.shape()[2] * x.shape()[3];
        let feat = |i: usize| {
            [
                x.data()[i],
                x.data()[plane + i],
                x.data()[2 * plane + i],
                1.0,
            ]
        };
        let mut ata = [[0.0f64; 4]; 4];
        let mut aty = [[0.0f64; 3]; 4];
        for i in 0..plane {
            let f = feat(i);
            for r in 0..4 {
                for c in 0..4 {
                    ata[r][c] += f[r] * f[c];
                }
                for ch in 0..3 {
                    aty[r][ch] += f[r] * y.data()[ch * plane + i];
                }
            }
        }
        let coef = solve4(ata, aty);
        let mut out = x.clone();
        for i in 0..plane {
            let f = feat(i);
            for ch in 0..3 {
                out.data_mut()[ch * plane + i] = (0..4).map(|r| f[r] * coef[r][ch]).sum();
            }
        }
        out
    }

    fn solve4(mut a: [[f64; 4]; 4], mut b: [[f64; 3]; 4]) -> [[f64; 3]; 4] {
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in 0..4 {
                        a[r][c] -= f * a[col][c];
                    }
                    for c in 0..3 {
                        b[r][c] -= f * b[col][c];
                    }
                }
            }
        }
        for r in 0..4 {
            for c in 0..3 {
                b[r][c] /= a[r][r];
            }
        }
        b
    }

    #[test]
    fn every_filter_is_partly_undone_by_a_global_affine_map() {
        let sources: Vec<Tensor<f64>> = (0..6).map(|s| procedural_image(100 + s, 48, 48)).collect();
        for f in builtin_filters() {
            let (mut base, mut fitted) = (0.0, 0.0);
            for src in &sources {
                let filtered = f.apply(src).unwrap();
                base += crate::metrics::psnr(&filtered, src).unwrap();
                fitted += crate::metrics::psnr(&affine_fit(&filtered, src), src).unwrap();
            }
            let gain = (fitted - base) / sources.len() as f64;
            assert!(gain >= 1.0, "{}: {gain:.2} dB", f.name);
        }
    }
}

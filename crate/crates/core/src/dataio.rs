//! Synthetic clustered data, Gaussian view augmentation, the GVEC vector
//! file format, and the per-step metrics CSV.
//!
//! GVEC layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GVEC"
//! 4       4     version u32 = 1
//! 8       4     count u32
//! 12      4     dim u32
//! 16      1     has_labels u8 (0 or 1)
//! 17      3     padding, zero
//! 20      4*count*dim   f32 vectors, row-major
//! ...     4*count       u32 labels (only if has_labels)
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GrocoError, Result};

const GVEC_MAGIC: &[u8; 4] = b"GVEC";
const GVEC_VERSION: u32 = 1;
const GVEC_HEADER: usize = 20;

/// Independent random streams derived from one run seed.
///
/// Every stream is ChaCha8 seeded with the run seed and a fixed stream
/// number, so adding draws to one purpose never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Data = 1,
    Augment = 2,
    Init = 3,
    Shuffle = 4,
    Negatives = 5,
    Split = 6,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: StreamPurpose) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose as u64);
        rng
    }
}

/// Vectors with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    vectors: Vec<f32>,
    labels: Option<Vec<u32>>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        labels: Option<Vec<u32>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(GrocoError::invalid(format!(
                "{} values do not form a non-empty set of {dim}-dimensional vectors",
                vectors.len()
            )));
        }
        let count = vectors.len() / dim;
        if let Some(l) = &labels {
            if l.len() != count {
                return Err(GrocoError::invalid(format!(
                    "{} labels for {count} vectors",
                    l.len()
                )));
            }
        }
        Ok(Dataset {
            dim,
            vectors,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&v| v as f64).collect()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            vectors.extend_from_slice(self.vector(i));
        }
        Dataset {
            dim: self.dim,
            vectors,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Seeded shuffle split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(GrocoError::invalid(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let n = self.count();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(GrocoError::invalid(format!(
                "test fraction {test_fraction} of {n} vectors leaves an empty side"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut RngStreams::new(seed).stream(StreamPurpose::Split));
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Synthetic Gaussian-cluster configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub dim: usize,
    pub per_cluster: usize,
    pub center_scale: f64,
    pub instance_noise: f64,
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 8,
            dim: 32,
            per_cluster: 200,
            center_scale: 4.0,
            instance_noise: 0.5,
            view_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.dim == 0 || self.per_cluster == 0 {
            return Err(GrocoError::invalid(
                "cluster count, dimension and cluster size must be positive",
            ));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.center_scale) || !ok(self.instance_noise) || !ok(self.view_noise) {
            return Err(GrocoError::invalid(
                "scales and noise levels must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative")
}

/// Cluster centres `~ N(0, scale^2)`, instances `centre + N(0, noise^2)`,
/// stored cluster by cluster.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = RngStreams::new(config.seed).stream(StreamPurpose::Data);
    let unit = normal(1.0);
    let centers: Vec<f64> = (0..config.clusters * config.dim)
        .map(|_| unit.sample(&mut rng) * config.center_scale)
        .collect();
    let noise = normal(config.instance_noise);
    let count = config.clusters * config.per_cluster;
    let mut vectors = Vec::with_capacity(count * config.dim);
    let mut labels = Vec::with_capacity(count);
    for c in 0..config.clusters {
        let center = &centers[c * config.dim..(c + 1) * config.dim];
        for _ in 0..config.per_cluster {
            vectors.extend(center.iter().map(|&m| (m + noise.sample(&mut rng)) as f32));
            labels.push(c as u32);
        }
    }
    Dataset::new(
        config.dim,
        vectors,
        Some(labels),
        format!(
            "synth clusters={} dim={} per_cluster={} center_scale={} instance_noise={} seed={}",
            config.clusters,
            config.dim,
            config.per_cluster,
            config.center_scale,
            config.instance_noise,
            config.seed
        ),
    )
}

/// `x + N(0, sigma^2)` per coordinate from the supplied stream.
pub fn augment_view<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(GrocoError::invalid(format!(
            "view noise must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let noise = normal(sigma);
    Ok(x.iter().map(|&v| v + noise.sample(rng)).collect())
}

pub fn gvec_write(dataset: &Dataset, path: &Path) -> Result<()> {
    let io = |e| GrocoError::io(path, e);
    let count = u32::try_from(dataset.count())
        .map_err(|_| GrocoError::invalid("too many vectors for GVEC"))?;
    let dim = u32::try_from(dataset.dim())
        .map_err(|_| GrocoError::invalid("dimension too large for GVEC"))?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(GVEC_HEADER);
    header.extend_from_slice(GVEC_MAGIC);
    header.extend_from_slice(&GVEC_VERSION.to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.push(dataset.labels.is_some() as u8);
    header.extend_from_slice(&[0u8; 3]);
    w.write_all(&header).map_err(io)?;
    for v in &dataset.vectors {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    if let Some(labels) = &dataset.labels {
        for l in labels {
            w.write_all(&l.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn gvec_read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| GrocoError::io(path, e))?;
    let mut ds = gvec_parse(&bytes)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

/// Parse an in-memory GVEC image.
pub fn gvec_parse(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < GVEC_HEADER {
        return Err(GrocoError::format(
            bytes.len() as u64,
            format!("truncated header ({} of {GVEC_HEADER} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != GVEC_MAGIC {
        return Err(GrocoError::format(0, "bad magic, expected \"GVEC\""));
    }
    let version = u32_at(bytes, 4);
    if version != GVEC_VERSION {
        return Err(GrocoError::format(
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    if count == 0 || dim == 0 {
        return Err(GrocoError::format(
            8,
            format!("empty dataset (count {count}, dim {dim})"),
        ));
    }
    let has_labels = match bytes[16] {
        0 => false,
        1 => true,
        other => {
            return Err(GrocoError::format(
                16,
                format!("has_labels must be 0 or 1, got {other}"),
            ))
        }
    };
    if bytes[17..20] != [0, 0, 0] {
        return Err(GrocoError::format(17, "non-zero header padding"));
    }
    let vec_bytes = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| GrocoError::format(8, "size overflow"))?;
    let expected = GVEC_HEADER + vec_bytes + if has_labels { count * 4 } else { 0 };
    if bytes.len() < expected {
        return Err(GrocoError::format(
            bytes.len() as u64,
            format!(
                "truncated: header declares {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(GrocoError::format(
            expected as u64,
            format!(
                "{} trailing bytes after declared payload",
                bytes.len() - expected
            ),
        ));
    }
    let vectors = bytes[GVEC_HEADER..GVEC_HEADER + vec_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = has_labels.then(|| {
        bytes[GVEC_HEADER + vec_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Dataset::new(dim, vectors, labels, "")
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Optional extra columns, fixed by the first row written to a file.
    pub extra: Vec<(String, f64)>,
}

/// Append a row, writing the header first if the file is new or empty.
pub fn metrics_append(path: &Path, record: &MetricsRecord) -> Result<()> {
    let io = |e| GrocoError::io(path, e);
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    let mut line = String::new();
    if fresh {
        line.push_str("epoch,step,loss,lr");
        for (name, _) in &record.extra {
            line.push(',');
            line.push_str(name);
        }
        line.push('\n');
    }
    line.push_str(&format!(
        "{},{},{},{}",
        record.epoch, record.step, record.loss, record.lr
    ));
    for (_, v) in &record.extra {
        line.push_str(&format!(",{v}"));
    }
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            clusters: 3,
            dim: 4,
            per_cluster: 5,
            ..Default::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.vectors(), c.vectors());
        assert_eq!(a.count(), 15);
        assert_eq!(a.num_classes(), 3);
    }

    #[test]
    fn zero_instance_noise_collapses_to_centers() {
        let d = synth_generate(&SynthConfig {
            instance_noise: 0.0,
            ..small()
        })
        .unwrap();
        for c in 0..3 {
            for i in 1..5 {
                assert_eq!(d.vector(c * 5), d.vector(c * 5 + i));
            }
        }
    }

    #[test]
    fn augment_examples() {
        let x = [1.0, -2.0, 3.5];
        let mut rng = RngStreams::new(4).stream(StreamPurpose::Augment);
        assert_eq!(augment_view(&x, 0.0, &mut rng).unwrap(), x.to_vec());
        let mut r1 = RngStreams::new(4).stream(StreamPurpose::Augment);
        let mut r2 = RngStreams::new(4).stream(StreamPurpose::Augment);
        assert_eq!(
            augment_view(&x, 0.3, &mut r1).unwrap(),
            augment_view(&x, 0.3, &mut r2).unwrap()
        );
        assert!(augment_view(&x, -1.0, &mut r1).is_err());
    }

    #[test]
    fn augment_std_monte_carlo() {
        let sigma = 0.37;
        let mut rng = RngStreams::new(99).stream(StreamPurpose::Augment);
        let draws = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let v = augment_view(&[0.0], sigma, &mut rng).unwrap()[0];
            s += v;
            s2 += v * v;
        }
        let mean = s / draws as f64;
        let std = (s2 / draws as f64 - mean * mean).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn streams_are_independent() {
        let s = RngStreams::new(5);
        let a: u64 = s.stream(StreamPurpose::Data).gen();
        let b: u64 = s.stream(StreamPurpose::Init).gen();
        assert_ne!(a, b);
        assert_eq!(a, s.stream(StreamPurpose::Data).gen::<u64>());
    }

    #[test]
    fn gvec_round_trip_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.gvec");
        let d = synth_generate(&small()).unwrap();
        gvec_write(&d, &p).unwrap();
        let r = gvec_read(&p).unwrap();
        assert_eq!(r.vectors(), d.vectors());
        assert_eq!(r.labels(), d.labels());

        let unlabeled = Dataset::new(2, vec![1.0, 2.0], None, "x").unwrap();
        gvec_write(&unlabeled, &p).unwrap();
        let r = gvec_read(&p).unwrap();
        assert!(r.labels().is_none());
        assert_eq!(r.vectors(), &[1.0, 2.0]);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 28);
    }

    #[test]
    fn gvec_rejects_corruption() {
        let d = Dataset::new(2, vec![1.0, 2.0, 3.0, 4.0], Some(vec![0, 1]), "").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.gvec");
        gvec_write(&d, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            gvec_parse(&bad),
            Err(GrocoError::Format { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            gvec_parse(&bad),
            Err(GrocoError::Format { offset: 4, .. })
        ));

        let short = &bytes[..bytes.len() - 3];
        match gvec_parse(short) {
            Err(GrocoError::Format { offset, .. }) => assert_eq!(offset, short.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(gvec_parse(&bytes[..10]).is_err());

        let mut long = bytes.clone();
        long.push(0);
        match gvec_parse(&long) {
            Err(GrocoError::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rec = |step, loss| MetricsRecord {
            epoch: 0,
            step,
            loss,
            lr: 0.05,
            extra: vec![],
        };
        metrics_append(&p, &rec(0, std::f64::consts::LN_2)).unwrap();
        metrics_append(&p, &rec(1, 0.5)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,step,loss,lr");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0,0.693147180"));
        assert!(lines[2].starts_with("0,1,0.5,"));
    }

    #[test]
    fn metrics_io_error_names_path() {
        let err = metrics_append(
            Path::new("/nonexistent-dir/m.csv"),
            &MetricsRecord {
                epoch: 0,
                step: 0,
                loss: 1.0,
                lr: 1.0,
                extra: vec![],
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/m.csv"));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = synth_generate(&small()).unwrap();
        let (tr, te) = d.split(0.2, 3).unwrap();
        assert_eq!(tr.count() + te.count(), 15);
        assert_eq!(te.count(), 3);
        assert_eq!(d.split(0.2, 3).unwrap().1, te);
        assert!(d.split(1.5, 3).is_err());
    }

    proptest! {
        #[test]
        fn gvec_round_trip_any(count in 1usize..6, dim in 1usize..5, labeled: bool, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<f32> = (0..count * dim).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect();
            let labels = labeled.then(|| (0..count as u32).collect());
            let d = Dataset::new(dim, vectors, labels, "").unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.gvec");
            gvec_write(&d, &p).unwrap();
            let r = gvec_read(&p).unwrap();
            prop_assert_eq!(
                r.vectors().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d.vectors().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(r.labels(), d.labels());
        }
    }
}

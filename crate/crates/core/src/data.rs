//! Datasets, the epoch loop and metric persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flate2::read::GzDecoder;

use crate::energy::NetworkSpec;
use crate::numeric::{Matrix, Rng, Vector};
use crate::trainers::{forward_pass, train_step, TrainerConfig};
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vector>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vector>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::shape("dataset labels", inputs.len(), labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
        }
        if inputs.iter().any(|x| x.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::InvalidArgument("input entries must lie in [0, 1]".into()));
        }
        let dim = inputs.first().map_or(0, |x| x.dim());
        if inputs.iter().any(|x| x.dim() != dim) {
            return Err(Error::InvalidArgument("inputs of unequal dimension".into()));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dim())
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }

    pub fn targets(&self) -> Vec<Vector> {
        self.labels
            .iter()
            .map(|&l| one_hot(l, self.n_classes).expect("labels validated on construction"))
            .collect()
    }
}

pub fn one_hot(label: usize, n_classes: usize) -> Result<Vector> {
    if label >= n_classes {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {n_classes} classes")));
    }
    Ok(Vector::from_fn(n_classes, |j| if j == label { 1.0 } else { 0.0 }))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_error(path, "truncated header"))
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an IDX image file into flattened rows scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Vector>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_error(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(format_error(
            path,
            format!("truncated: {count} images of {dim} pixels need {} bytes, found {}", count * dim, body.len()),
        ));
    }
    Ok(body[..count * dim]
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_error(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_error(path, format!("truncated: {count} labels, found {}", body.len())));
    }
    Ok(body[..count].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair. Paths ending in `.gz` are decompressed.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_file(images)?, images)?;
    let y = parse_idx_labels(&read_file(labels)?, labels)?;
    if x.len() != y.len() {
        return Err(format_error(
            labels,
            format!("{} labels for {} images in {}", y.len(), x.len(), images.display()),
        ));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= 10) {
        return Err(format_error(labels, format!("label {l} is not a digit")));
    }
    let name = images
        .file_name()
        .map_or_else(|| "mnist".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, x, y, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz"), stem.replacen("-idx", ".idx", 1)] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (also tried .gz)"),
    ))
}

/// Loads `train-*` or `t10k-*` from a directory of canonical MNIST files.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let images = find_idx(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
    let labels = find_idx(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
    let mut d = load_mnist_idx(&images, &labels)?;
    d.name = format!("mnist-{}", split.name());
    Ok(d)
}

/// Two interleaved half circles with Gaussian noise, rescaled into `[0, 1]²`.
pub fn two_moons(n: usize, noise: f64, rng: &mut Rng) -> Dataset {
    let mut raw = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.uniform(0.0, std::f64::consts::PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        raw.push([x + noise * rng.normal(), y + noise * rng.normal()]);
        labels.push(label);
    }
    // the noiseless moons span [-1, 2] x [-0.5, 1]; noise beyond 4σ is clipped
    let lo = [-1.0 - 4.0 * noise, -0.5 - 4.0 * noise];
    let hi = [2.0 + 4.0 * noise, 1.0 + 4.0 * noise];
    let inputs = raw
        .iter()
        .map(|p| Vector::from_fn(2, |j| ((p[j] - lo[j]) / (hi[j] - lo[j])).clamp(0.0, 1.0)))
        .collect();
    Dataset::new("two-moons", inputs, labels, 2).expect("construction is valid")
}

/// One evaluation of a split after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub split: Split,
    pub error_rate: f64,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Record elapsed milliseconds; when false `wall_ms` is 0 and output is reproducible.
    pub timing: bool,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Misclassification rate by argmax of the output and mean loss against one-hot targets.
pub fn evaluate(net: &NetworkSpec, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    if data.input_dim() != net.input_dim() || data.n_classes != net.output_dim() {
        return Err(Error::shape(
            "dataset vs network",
            format!("{}->{}", net.input_dim(), net.output_dim()),
            format!("{}->{}", data.input_dim(), data.n_classes),
        ));
    }
    let mut wrong = 0usize;
    let mut loss = 0.0;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        let s = forward_pass(net, x)?;
        let out = s.output();
        if out.argmax() != label {
            wrong += 1;
        }
        loss += net.loss.eval(out, &one_hot(label, data.n_classes)?);
    }
    let n = data.len() as f64;
    Ok((wrong as f64 / n, loss / n))
}

/// SGD over shuffled mini-batches, evaluating both splits after every epoch.
pub fn run_training(
    net: &mut NetworkSpec,
    trainer: &TrainerConfig,
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    rng: &mut Rng,
) -> Result<Vec<Metrics>> {
    run_training_observed(net, trainer, cfg, train, test, rng, |_| {})
}

/// As [`run_training`], calling `observe` on every record as it is produced.
pub fn run_training_observed(
    net: &mut NetworkSpec,
    trainer: &TrainerConfig,
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    rng: &mut Rng,
    mut observe: impl FnMut(&Metrics),
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    trainer.method.check(net)?;
    let targets = train.targets();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train.inputs[i].as_slice()).collect();
            let ys: Vec<&[f64]> = chunk.iter().map(|&i| targets[i].as_slice()).collect();
            let loss = train_step(net, &xs, &ys, trainer, cfg.lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss {loss}")));
            }
        }
        for (split, data) in [(Split::Train, train), (Split::Test, test)] {
            let (error_rate, mean_loss) = evaluate(net, data)?;
            let wall_ms = if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
            let m = Metrics {
                epoch,
                split,
                error_rate,
                mean_loss,
                wall_ms,
            };
            observe(&m);
            metrics.push(m);
        }
    }
    Ok(metrics)
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "split", "error_rate", "mean_loss", "wall_ms"];

pub fn write_metrics<W: Write>(metrics: &[Metrics], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.split.name().to_string(),
            format!("{:.6}", m.error_rate),
            m.mean_loss.to_string(),
            m.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn write_metrics_csv(metrics: &[Metrics], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(metrics, BufWriter::new(file))
}

pub fn read_metrics<R: Read>(input: R, origin: &Path) -> Result<Vec<Metrics>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(format_error(origin, format!("unexpected header {header:?}")));
    }
    let field = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or_default().to_string();
    let parse_err = |what: &str, v: String| format_error(origin, format!("bad {what} {v:?}"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let epoch = field(&rec, 0);
            let error_rate = field(&rec, 2);
            let mean_loss = field(&rec, 3);
            let wall_ms = field(&rec, 4);
            Ok(Metrics {
                epoch: epoch.parse().map_err(|_| parse_err("epoch", epoch.clone()))?,
                split: field(&rec, 1).parse()?,
                error_rate: error_rate.parse().map_err(|_| parse_err("error_rate", error_rate.clone()))?,
                mean_loss: mean_loss.parse().map_err(|_| parse_err("mean_loss", mean_loss.clone()))?,
                wall_ms: wall_ms.parse().map_err(|_| parse_err("wall_ms", wall_ms.clone()))?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<Metrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics(BufReader::new(file), path)
}

/// Little-endian dump: layer count, then per layer rows, cols and row-major `f64` entries.
pub fn write_weights(net: &NetworkSpec, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&(net.depth() as u32).to_le_bytes())?;
    for m in net.weights() {
        put(&(m.rows() as u32).to_le_bytes())?;
        put(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| format_error(path, "truncated weight file"))?;
        at += n;
        Ok(s)
    };
    let u32_le = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let layers = u32_le(take(4)?);
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = u32_le(take(4)?);
        let cols = u32_le(take(4)?);
        let data = take(8 * rows * cols)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    if at != bytes.len() {
        return Err(format_error(path, "trailing bytes after weights"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{Activation, EnergyForm, Init, LossKind};
    use crate::trainers::{MethodKind, SpacingSchedule};

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn header_and_scaling() {
        let bytes = idx_images(2, 1, 2, &[0, 255, 51, 102]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let x = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!(x[0].as_slice(), &[0.0, 1.0]);
        assert_eq!(x[1].as_slice(), &[0.2, 0.4]);
    }

    #[test]
    fn malformed_idx_is_rejected() {
        let p = Path::new("mem");
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 1;
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7]), p), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[0]), p), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8], p), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.idx");
        let lab = dir.path().join("l.idx.gz");
        std::fs::write(&img, idx_images(2, 1, 1, &[1, 2])).unwrap();
        let gz = |bytes: &[u8]| {
            let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
            e.write_all(bytes).unwrap();
            e.finish().unwrap()
        };
        std::fs::write(&lab, gz(&idx_labels(&[3, 4]))).unwrap();
        let d = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(d.labels, vec![3, 4]);
        std::fs::write(&lab, gz(&idx_labels(&[3]))).unwrap();
        assert!(matches!(load_mnist_idx(&img, &lab), Err(Error::Format { .. })));
        assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lab), Err(Error::Io { .. })));
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(3, 10).unwrap().as_slice(), &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(one_hot(0, 2).unwrap().as_slice(), &[1.0, 0.0]);
        assert!(one_hot(2, 2).is_err());
    }

    #[test]
    fn two_moons_is_balanced_and_in_range() {
        let d = two_moons(200, 0.1, &mut Rng::new(1));
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 100);
        assert!(d.inputs.iter().all(|x| x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(d, two_moons(200, 0.1, &mut Rng::new(1)));
    }

    fn small_run(seed: u64, epochs: usize) -> (NetworkSpec, Vec<Metrics>) {
        let mut rng = Rng::new(seed);
        let train = two_moons(64, 0.1, &mut rng);
        let test = two_moons(32, 0.1, &mut rng);
        let mut net = NetworkSpec::mlp(
            &[2, 8, 2],
            Activation::Relu,
            Activation::Identity,
            EnergyForm::Penalizer,
            LossKind::SquaredError,
            true,
            Init::Glorot,
            &mut rng,
        )
        .unwrap();
        let trainer = TrainerConfig::new(MethodKind::Bp, SpacingSchedule::uniform(2, 1.0).unwrap());
        let cfg = RunConfig {
            epochs,
            batch_size: 8,
            lr: 0.1,
            timing: false,
        };
        let m = run_training(&mut net, &trainer, &cfg, &train, &test, &mut rng).unwrap();
        (net, m)
    }

    #[test]
    fn zero_epochs_and_determinism() {
        assert!(small_run(3, 0).1.is_empty());
        let (net_a, a) = small_run(3, 4);
        let (net_b, b) = small_run(3, 4);
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        assert_eq!(net_a, net_b);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,split,error_rate,mean_loss,wall_ms\n");
        let (_, m) = small_run(5, 1);
        write_metrics_csv(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = read_metrics_csv(&path).unwrap();
        for (a, b) in m.iter().zip(&back) {
            assert_eq!((a.epoch, a.split, a.wall_ms), (b.epoch, b.split, b.wall_ms));
            assert!((a.error_rate - b.error_rate).abs() < 1e-6);
            assert_eq!(a.mean_loss, b.mean_loss);
        }
    }

    #[test]
    fn weight_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let (net, _) = small_run(6, 1);
        write_weights(&net, &path).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), net.weights());
    }

    #[test]
    fn error_rate_ignores_output_scale() {
        let (mut net, _) = small_run(7, 2);
        let d = two_moons(50, 0.1, &mut Rng::new(8));
        let (e1, _) = evaluate(&net, &d).unwrap();
        let top = net.layers.last_mut().unwrap();
        top.weight = top.weight.scale(3.5);
        let (e2, _) = evaluate(&net, &d).unwrap();
        assert_eq!(e1, e2);
    }
}

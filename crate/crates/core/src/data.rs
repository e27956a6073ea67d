//! IDX (MNIST) and CIFAR-10 binary loaders. Pixels stay 8-bit end to end.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tnn::InputSpec;

/// Environment variable naming the directory holding the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "TNNSIM_MNIST_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

const IDX_UBYTE: u8 = 0x08;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// A decoded IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len(), "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::format(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::format(3, "IDX file declares zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(bytes.len(), "truncated IDX dimension table"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let payload = bytes.len() - header;
    if payload < n {
        return Err(Error::format(bytes.len(), format!("truncated IDX payload: {n} bytes declared, {payload} present")));
    }
    if payload > n {
        return Err(Error::format(header + n, "trailing bytes after IDX payload"));
    }
    Ok(IdxTensor { dims, data: bytes[header..].to_vec() })
}

pub fn encode_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, t.dims.len() as u8];
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let path = path.as_ref();
    parse_idx(&read_file(path)?).map_err(|e| in_file(path, e))
}

/// Labelled 8-bit images, each stored channel-planar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    shape: InputSpec,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(shape: InputSpec, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if shape.is_empty() || pixels.len() != shape.len() * labels.len() {
            return Err(Error::Shape {
                expected: vec![labels.len(), shape.channels, shape.height, shape.width],
                actual: vec![pixels.len()],
            });
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn shape(&self) -> InputSpec {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> Vec<&[u8]> {
        self.pixels.chunks_exact(self.shape.len()).collect()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` images (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            shape: self.shape,
            pixels: self.pixels[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: ImageSet,
    pub test: ImageSet,
    pub classes: usize,
}

impl Dataset {
    pub fn new(train: ImageSet, test: ImageSet, classes: usize) -> Result<Self> {
        if train.shape != test.shape {
            return Err(Error::domain("train and test image shapes differ"));
        }
        for set in [&train, &test] {
            if let Some(&l) = set.labels.iter().find(|&&l| l as usize >= classes) {
                return Err(Error::domain(format!("label {l} outside {classes} classes")));
            }
        }
        Ok(Self { train, test, classes })
    }
}

/// Pairs an IDX image file with its label file.
pub fn idx_image_set(images: &IdxTensor, labels: &IdxTensor) -> Result<ImageSet> {
    let (n, h, w) = match images.dims[..] {
        [n, h, w] => (n, h, w),
        _ => return Err(Error::domain(format!("image file must be 3-dimensional, got {:?}", images.dims))),
    };
    if labels.dims != [n] {
        return Err(Error::domain(format!("label file dims {:?} do not match {n} images", labels.dims)));
    }
    ImageSet::new(InputSpec { channels: 1, height: h, width: w }, images.data.clone(), labels.data.clone())
}

/// Loads the four MNIST IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let f: Vec<IdxTensor> = MNIST_FILES.iter().map(|name| load_idx(dir.join(name))).collect::<Result<_>>()?;
    Dataset::new(idx_image_set(&f[0], &f[1])?, idx_image_set(&f[2], &f[3])?, 10)
}

/// MNIST directory from the environment, else `data/mnist` under `root`.
pub fn mnist_dir(root: impl AsRef<Path>) -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| root.as_ref().join("data").join("mnist"))
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(whole, format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(i * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    ImageSet::new(InputSpec { channels: 3, height: 32, width: 32 }, pixels, labels)
}

pub fn encode_cifar10(set: &ImageSet) -> Result<Vec<u8>> {
    if set.shape != (InputSpec { channels: 3, height: 32, width: 32 }) {
        return Err(Error::domain("CIFAR-10 records hold 3x32x32 images"));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels[i]);
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    parse_cifar10(&read_file(path)?).map_err(|e| in_file(path, e))
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for k in 1..=5 {
        let b = load_cifar10_binary(dir.join(format!("data_batch_{k}.bin")))?;
        pixels.extend_from_slice(&b.pixels);
        labels.extend_from_slice(&b.labels);
    }
    let train = ImageSet::new(InputSpec { channels: 3, height: 32, width: 32 }, pixels, labels)?;
    let test = load_cifar10_binary(dir.join("test_batch.bin"))?;
    Dataset::new(train, test, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_idx() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(1..=8u8);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 2, 2]);
        assert_eq!(t.data, (1..=8).collect::<Vec<u8>>());
        assert_eq!(encode_idx(&t), bytes);

        let err = parse_idx(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 23, .. }), "{err}");
        assert!(matches!(parse_idx(&bytes[..10]), Err(Error::Format { offset: 10, .. })));
        let mut bad = bytes.clone();
        bad[2] = 0x0d;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 2, .. })));
        bad[0] = 1;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn huge_declared_size_does_not_allocate() {
        let bytes = [0, 0, 8, 3, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0, 0, 0, 9];
        assert!(matches!(parse_idx(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_record_unpacks_channels() {
        let mut rec = vec![7u8];
        for c in 0..3u8 {
            rec.extend(std::iter::repeat_n(10 * (c + 1), 1024));
        }
        let set = parse_cifar10(&rec).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels(), &[7]);
        let img = set.image(0);
        assert_eq!((img[0], img[1024], img[2048], img[3071]), (10, 20, 30, 30));
        assert_eq!(encode_cifar10(&set).unwrap(), rec);

        rec[0] = 10;
        assert!(matches!(parse_cifar10(&rec), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_cifar10(&rec[..100]), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let shape = InputSpec { channels: 1, height: 1, width: 2 };
        let s = ImageSet::new(shape, vec![0; 4], vec![0, 3]).unwrap();
        assert!(Dataset::new(s.clone(), s.clone(), 3).is_err());
        assert!(Dataset::new(s.clone(), s, 4).is_ok());
        assert!(ImageSet::new(shape, vec![0; 3], vec![0, 1]).is_err());
    }

    #[test]
    fn cifar_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5", "test_batch"].iter().enumerate() {
            let mut rec = vec![k as u8];
            rec.extend(vec![k as u8; 3072]);
            let bytes = rec.repeat(2);
            std::fs::write(dir.path().join(format!("{name}.bin")), bytes).unwrap();
        }
        let d = load_cifar10(dir.path()).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (10, 2));
        assert_eq!(d.train.labels()[9], 4);
    }

    proptest! {
        #[test]
        fn synthetic_idx_round_trip(dims in prop::collection::vec(1usize..6, 1..4), seed in any::<u8>()) {
            let n: usize = dims.iter().product();
            let t = IdxTensor { dims, data: (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect() };
            prop_assert_eq!(parse_idx(&encode_idx(&t)).unwrap(), t);
        }

        #[test]
        fn synthetic_cifar_round_trip(labels in prop::collection::vec(0u8..10, 1..4), fill in any::<u8>()) {
            let n = labels.len();
            let pixels: Vec<u8> = (0..n * 3072).map(|i| (i as u8) ^ fill).collect();
            let set = ImageSet::new(InputSpec { channels: 3, height: 32, width: 32 }, pixels, labels).unwrap();
            prop_assert_eq!(parse_cifar10(&encode_cifar10(&set).unwrap()).unwrap(), set);
        }
    }
}

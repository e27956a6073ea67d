use std::path::Path;

use tnnsim_core::data::{load_idx, load_mnist, mnist_dir};

fn dir() -> std::path::PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let d = mnist_dir(root);
    assert!(
        d.join("t10k-labels-idx1-ubyte").exists(),
        "MNIST files not found in {} (run scripts/fetch-mnist.sh or set TNNSIM_MNIST_DIR)",
        d.display()
    );
    d
}

#[test]
fn official_test_images() {
    let images = load_idx(dir().join("t10k-images-idx3-ubyte")).unwrap();
    assert_eq!(images.dims, vec![10_000, 28, 28]);
    let labels = load_idx(dir().join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(labels.dims, vec![10_000]);
    assert_eq!(&labels.data[..10], &[7, 2, 1, 0, 4, 1, 4, 9, 5, 9]);
}

#[test]
fn full_dataset_counts() {
    let d = load_mnist(dir()).unwrap();
    assert_eq!((d.train.len(), d.test.len(), d.classes), (60_000, 10_000, 10));
    assert_eq!(d.train.labels()[0], 5);
    let mut hist = [0usize; 10];
    d.test.labels().iter().for_each(|&l| hist[l as usize] += 1);
    assert_eq!(hist, [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
}

use std::path::Path;

use esma_cli::ingest::{ingest_builtin, ingest_directory};

fn write_png(path: &Path, value: u8) {
    let img = image::RgbImage::from_pixel(5, 7, image::Rgb([value, 255 - value, 128]));
    img.save(path).unwrap();
}

/// Two class folders with 50 images each; names are written out of order.
fn hundred_images(dir: &Path) {
    for class in ["b_second", "a_first"] {
        std::fs::create_dir_all(dir.join(class)).unwrap();
        for i in (0..50).rev() {
            write_png(&dir.join(class).join(format!("img{i:03}.png")), (i * 5) as u8);
        }
    }
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest_directory(dir.path(), 8).is_err());
}

#[test]
fn hundred_images_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    hundred_images(dir.path());
    let (ds, manifest) = ingest_directory(dir.path(), 8).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.shape(), &[3, 8, 8]);
    assert_eq!(manifest.classes, vec!["a_first", "b_second"]);
    let mut sorted = manifest.files.clone();
    sorted.sort();
    assert_eq!(manifest.files, sorted);
    assert_eq!(ds.labels()[..50], [0; 50]);
    assert_eq!(ds.labels()[50..], [1; 50]);
    // Uniform source images stay uniform after resizing; red is i*5/255.
    assert!((ds.sample(3)[0] - 15.0 / 255.0).abs() < 1e-12);
    assert!(ds.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn same_directory_gives_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    hundred_images(dir.path());
    let (_, a) = ingest_directory(dir.path(), 8).unwrap();
    let (_, b) = ingest_directory(dir.path(), 8).unwrap();
    assert_eq!(a.content_hash, b.content_hash);
}

#[test]
fn corrupt_files_are_skipped_up_to_five_percent() {
    let dir = tempfile::tempdir().unwrap();
    hundred_images(dir.path());
    std::fs::write(dir.path().join("a_first").join("img999.png"), b"not a png").unwrap();
    let (ds, manifest) = ingest_directory(dir.path(), 8).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(manifest.skipped.len(), 1);
    assert!(manifest.skipped[0].path.ends_with("img999.png"));
}

#[test]
fn too_many_corrupt_files_abort() {
    let dir = tempfile::tempdir().unwrap();
    hundred_images(dir.path());
    for i in 0..6 {
        std::fs::write(dir.path().join("b_second").join(format!("bad{i}.png")), b"garbage").unwrap();
    }
    let err = ingest_directory(dir.path(), 8).unwrap_err();
    assert!(err.to_string().contains("could not be decoded"), "{err}");
}

#[test]
fn flat_directory_is_one_class() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&dir.path().join(format!("{i}.png")), 10);
    }
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let (ds, m) = ingest_directory(dir.path(), 4).unwrap();
    assert_eq!((ds.len(), ds.num_classes(), m.skipped.len()), (3, 1, 0));
}

#[test]
fn builtin_tags() {
    let (toy, _) = ingest_builtin("toy", 0, 40, 1).unwrap();
    assert_eq!((toy.len(), toy.dim()), (40, 2));
    let (covers, _) = ingest_builtin("covers", 8, 5, 1).unwrap();
    assert_eq!(covers.shape(), &[3, 8, 8]);
    let (proto, _) = ingest_builtin("prototype", 8, 2, 1).unwrap();
    assert_eq!(proto.len(), 20);
    let err = ingest_builtin("cifar", 8, 2, 1).unwrap_err();
    assert!(err.to_string().contains("prototype, covers, toy"));
}

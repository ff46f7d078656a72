use ofnet::dataset::{batch, read_dataset, read_manifest, read_sample, write_dataset, DatasetError, MANIFEST};
use ofnet::synth::{generate_dataset, SceneSpec};
use ofnet::Error;
use std::fs;

fn samples(n: usize) -> Vec<ofnet::synth::OcclusionSample> {
    generate_dataset(&SceneSpec { height: 40, width: 56, ..SceneSpec::default() }, n, 11, "val_").unwrap()
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(4);
    write_dataset(&data, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), data);
}

#[test]
fn files_have_expected_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(2);
    write_dataset(&data, dir.path()).unwrap();
    for s in &data {
        assert_eq!(fs::metadata(dir.path().join(format!("{}.ori.f32", s.id))).unwrap().len(), 40 * 56 * 4);
        for suffix in ["png", "edge.png"] {
            let bytes = fs::read(dir.path().join(format!("{}.{suffix}", s.id))).unwrap();
            assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
            // IHDR width and height, big endian.
            assert_eq!(u32::from_be_bytes(bytes[16..20].try_into().unwrap()), 56);
            assert_eq!(u32::from_be_bytes(bytes[20..24].try_into().unwrap()), 40);
        }
    }
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().next(), Some("ofnet-dataset 1"));
    assert_eq!(read_manifest(dir.path()).unwrap()[1], ("val_0001".to_string(), 40, 56));
}

#[test]
fn count_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples(3), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap().replace("count 3", "count 4");
    fs::write(&path, text).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Dataset(DatasetError::Manifest { field, .. })) => assert_eq!(field, "count"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset(DatasetError::MissingFile(_)))));
    let data = samples(2);
    write_dataset(&data, dir.path()).unwrap();
    fs::remove_file(dir.path().join("val_0001.ori.f32")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Dataset(DatasetError::MissingFile(p))) => assert!(p.ends_with("val_0001.ori.f32")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn size_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples(1), dir.path()).unwrap();
    assert!(matches!(
        read_sample(dir.path(), "val_0000", 40, 60),
        Err(Error::Dataset(DatasetError::SizeMismatch { .. }))
    ));
    fs::write(dir.path().join("val_0000.ori.f32"), [0u8; 12]).unwrap();
    assert!(matches!(
        read_sample(dir.path(), "val_0000", 40, 56),
        Err(Error::Dataset(DatasetError::SizeMismatch { .. }))
    ));
}

#[test]
fn bad_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(MANIFEST), "something else\ncount 0\n").unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Dataset(DatasetError::Manifest { .. }))));
}

#[test]
fn batch_layout_is_channels_first() {
    let data = samples(2);
    let b = batch::<f64>(&[&data[0], &data[1]]).unwrap();
    assert_eq!(b.image.shape(), &[2, 3, 40, 56]);
    assert_eq!(b.edge.shape(), &[2, 1, 40, 56]);
    let (y, x) = (13, 21);
    let plane = 40 * 56;
    assert_eq!(b.image.data()[3 * plane + 2 * plane + y * 56 + x], data[1].image[(y, x, 2)] as f64);
    assert_eq!(b.edge.data()[plane + y * 56 + x], if data[1].edge[(y, x)] { 1.0 } else { 0.0 });
    let other = generate_dataset(&SceneSpec::default(), 1, 0, "x").unwrap();
    assert!(batch::<f32>(&[&data[0], &other[0]]).is_err());
    assert!(batch::<f32>(&[]).is_err());
}

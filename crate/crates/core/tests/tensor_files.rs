use std::fs;

use llsa::tensorio::{gen_random, read_tensor, write_tensor, Distribution, HEADER_LEN};
use llsa::{Error, FeatureMatrix};

#[test]
fn files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmat");
    let x = gen_random(17, 5, 3, Distribution::StdNormal);
    write_tensor(&path, &x).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), x);
}

#[test]
fn two_by_three_double_file_is_76_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.fmat");
    write_tensor(&path, &FeatureMatrix::zeros(2, 3)).unwrap();
    let expected = if llsa::DOUBLE_PRECISION { 76 } else { 52 };
    assert_eq!(fs::metadata(&path).unwrap().len(), expected);
}

#[test]
fn damaged_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmat");
    write_tensor(&path, &gen_random(4, 4, 0, Distribution::Uniform01)).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));

    fs::write(&path, &bytes[..HEADER_LEN - 3]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_tensor(dir.path().join("nope.fmat")), Err(Error::Io(_))));
}

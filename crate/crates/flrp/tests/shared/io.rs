//! Golden-file and roundtrip checks for the on-disk formats.

#![allow(dead_code)]

use std::path::PathBuf;

use flrp::flrp_core::attribution::{Method, RelevanceMap};
use flrp::flrp_core::evalkit::BinaryMask;
use flrp::flrp_core::rten::{self, TensorFile};
use flrp::flrp_core::{RgbImage, Tensor};
use flrp::io::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap()
}

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn rten_writer_matches_golden_files() {
    assert_eq!(
        rten::serialize(&TensorFile::new()).unwrap(),
        golden("empty.rten")
    );

    let single = TensorFile::from_entries(vec![("w".into(), t(&[2], &[1.0, 2.0]))]).unwrap();
    let bytes = rten::serialize(&single).unwrap();
    assert_eq!(bytes, golden("single.rten"));
    assert_eq!(&bytes[..4], b"RTEN");
    assert_eq!(
        &bytes[20..],
        &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]
    );

    let multi = TensorFile::from_entries(vec![
        (
            "conv0.w".into(),
            t(&[2, 1, 1, 2], &[0.5, -1.25, 3.0, 0.001]),
        ),
        ("conv0.b".into(), t(&[2], &[-0.0, 65504.0])),
        (
            "relevance".into(),
            t(&[2, 3], &[1.5, -2.5, 0.0, 1e-30, -7.0, 0.25]),
        ),
    ])
    .unwrap();
    assert_eq!(rten::serialize(&multi).unwrap(), golden("multi.rten"));
}

pub fn rten_reader_parses_golden_files() {
    let f = read_rten(&fixture("multi.rten")).unwrap();
    let names: Vec<&str> = f.entries().iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["conv0.w", "conv0.b", "relevance"]);
    assert_eq!(f.get("conv0.w").unwrap().shape(), &[2, 1, 1, 2]);
    let b = f.get("conv0.b").unwrap().data();
    assert!(b[0] == 0.0 && b[0].is_sign_negative());
    assert_eq!(b[1], 65504.0);
    assert!(read_rten(&fixture("empty.rten")).unwrap().is_empty());
}

pub fn relevance_file_from_golden() {
    let map = read_relevance(&fixture("multi.rten"), Method::Lrp);
    assert!(map.is_err(), "three entries are not a relevance file");

    let map =
        RelevanceMap::new(2, 3, vec![1.5, -2.5, 0.0, 1e-30, -7.0, 0.25], Method::Flrp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.flrp.rten");
    write_relevance(&p, &map).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    // the relevance entry of the golden file is the same tensor
    let golden = golden("multi.rten");
    assert!(golden.ends_with(&bytes[12..]));
    assert_eq!(read_relevance(&p, Method::Flrp).unwrap(), map);
}

pub fn ppm_pgm_writers_match_golden_files() {
    let img = RgbImage::new(2, 2, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]).unwrap();
    assert_eq!(encode_ppm(&img), golden("rgb_2x2.ppm"));
    assert_eq!(read_ppm(&fixture("rgb_2x2.ppm")).unwrap(), img);

    let mask = BinaryMask {
        width: 3,
        height: 2,
        data: vec![false, true, false, true, true, false],
    };
    assert_eq!(encode_pgm(&mask_to_gray(&mask)), golden("mask_3x2.pgm"));
    assert_eq!(read_mask(&fixture("mask_3x2.pgm")).unwrap(), mask);
}

pub fn malformed_files_are_rejected() {
    let mut bad = golden("single.rten");
    bad[..4].copy_from_slice(b"XXXX");
    assert_eq!(
        rten::deserialize(&bad).unwrap_err().to_string(),
        "bad magic"
    );
    let mut short = golden("single.rten");
    short[8] = 2;
    assert_eq!(
        rten::deserialize(&short).unwrap_err().to_string(),
        "truncated"
    );
    assert!(decode_ppm(&golden("mask_3x2.pgm")).is_err());
    assert!(decode_pgm(&golden("rgb_2x2.ppm")).is_err());
}

pub fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e6f32..1e6, n)
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

pub fn rten_roundtrip(tensors: Vec<Tensor>) -> Result<(), TestCaseError> {
    let file = TensorFile::from_entries(
        tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("t{}", i), t))
            .collect(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.rten");
    write_rten(&p, &file).unwrap();
    let len = std::fs::metadata(&p).unwrap().len() as usize;
    let expect = 12
        + file
            .entries()
            .iter()
            .map(|(n, t)| 3 + n.len() + 4 * t.shape().len() + 4 * t.numel())
            .sum::<usize>();
    prop_assert_eq!(len, expect);
    prop_assert_eq!(read_rten(&p).unwrap(), file);
    Ok(())
}

pub fn ppm_roundtrip(w: usize, h: usize, seed: u64) -> Result<(), TestCaseError> {
    let data = (0..w * h * 3)
        .map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8)
        .collect();
    let img = RgbImage::new(w, h, data).unwrap();
    prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    Ok(())
}

pub fn mask_roundtrip(bits: Vec<bool>) -> Result<(), TestCaseError> {
    let mask = BinaryMask {
        width: bits.len(),
        height: 1,
        data: bits,
    };
    let img = decode_pgm(&encode_pgm(&mask_to_gray(&mask))).unwrap();
    prop_assert_eq!(gray_to_mask(&img).unwrap(), mask);
    Ok(())
}

/// Every golden check plus `cases` random roundtrips per format.
pub fn io_suite(cases: u32) -> String {
    rten_writer_matches_golden_files();
    rten_reader_parses_golden_files();
    relevance_file_from_golden();
    ppm_pgm_writers_match_golden_files();
    malformed_files_are_rejected();
    let mut runner = TestRunner::new(Config {
        failure_persistence: None,
        ..Config::with_cases(cases)
    });
    runner
        .run(
            &prop::collection::vec(tensor_strategy(), 0..5),
            rten_roundtrip,
        )
        .unwrap();
    runner
        .run(&(1usize..9, 1usize..9, any::<u64>()), |(w, h, s)| {
            ppm_roundtrip(w, h, s)
        })
        .unwrap();
    runner
        .run(&prop::collection::vec(any::<bool>(), 1..64), mask_roundtrip)
        .unwrap();
    format!("5 golden files byte-exact, {} roundtrips per format", cases)
}

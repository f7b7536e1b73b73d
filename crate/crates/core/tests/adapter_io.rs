use std::path::PathBuf;

use proptest::prelude::*;
use rankmerge::io::{
    decode_adapter, encode_adapter, generate_synthetic, read_adapter, read_manifest, write_adapter,
    SyntheticSpec,
};
use rankmerge::{AdapterSet, Error, FormatError, LoraLayer, MaskPair, MaskVector, Matrix, Role};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// The matrices `make_fixtures.py` writes into `golden_adapter.bin`.
fn golden_set() -> AdapterSet {
    let a0 = Matrix::from_fn(4, 2, |i, j| (2 * i + j + 1) as f64 / 4.0).unwrap();
    let b0 = Matrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64 / 8.0 - 0.5).unwrap();
    let a1 = Matrix::from_fn(4, 2, |i, j| 0.0 - (2 * i + j) as f64 / 16.0).unwrap();
    let b1 = Matrix::from_fn(2, 4, |i, j| {
        if i == j {
            1.0
        } else {
            0.25 * (j as f64 - i as f64)
        }
    })
    .unwrap();
    AdapterSet::from_layers(
        Role::Content,
        [
            LoraLayer::new("blk.0.to_q", a0, b0, 4.0).unwrap(),
            LoraLayer::new("blk.1.to_v", a1, b1, 4.0).unwrap(),
        ],
    )
    .unwrap()
}

#[test]
fn golden_file_decodes_to_known_matrices() {
    let set = read_adapter(&fixture("golden_adapter.bin")).unwrap();
    assert_eq!(set, golden_set());
    assert_eq!(set.get("blk.0.to_q").unwrap().a().get(3, 1), 2.0);
    assert_eq!(set.get("blk.1.to_v").unwrap().b().get(0, 3), 0.75);
}

#[test]
fn writer_reproduces_golden_bytes() {
    let golden = std::fs::read(fixture("golden_adapter.bin")).unwrap();
    assert_eq!(encode_adapter(&golden_set()), golden);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.bin");
    write_adapter(&golden_set(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), golden);
}

#[test]
fn unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing/dir/out.bin");
    assert!(matches!(
        write_adapter(&golden_set(), &path),
        Err(Error::Io { .. })
    ));
    assert!(matches!(
        read_adapter(&dir.path().join("absent.bin")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn narrowing_rounds_to_nearest_even() {
    // 1 + 2^-24 is exactly halfway between two f32 values; ties go to even (1.0).
    let halfway = 1.0 + 2f64.powi(-24);
    let above = 1.0 + 3.0 * 2f64.powi(-24);
    let a = Matrix::from_rows(&[[halfway], [above]]).unwrap();
    let layer = LoraLayer::unscaled("x", a, Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
    let set = AdapterSet::from_layers(Role::Content, [layer]).unwrap();
    let back = decode_adapter(&encode_adapter(&set)).unwrap();
    let got = back.get("x").unwrap().a();
    assert_eq!(got.get(0, 0), 1.0);
    assert_eq!(got.get(1, 0), 1.0 + 2f64.powi(-22));
}

#[test]
fn sdxl_manifest_fixture_loads() {
    let m = read_manifest(&fixture("sdxl_attention_manifest.json")).unwrap();
    assert_eq!(m.len(), 560);
    assert!(m
        .entries()
        .iter()
        .all(|e| e.d_out.is_some() && e.d_in.is_some()));
}

#[test]
fn manifest_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, "[{\"name\": \"a\"},\n {\"name\": \"a\"}]").unwrap();
    let err = read_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Format(FormatError::Manifest { ref entry, .. }) if entry == "a"));
    std::fs::write(&path, "[{\"name\": \"a\"},\n {\"name\" \"b\"}]").unwrap();
    let err = read_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

/// f32-representable matrices so that one write/read pass is exact.
fn f32_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1e3f32..1e3f32, rows * cols)
        .prop_map(move |v| Matrix::new(rows, cols, v.into_iter().map(f64::from).collect()).unwrap())
}

fn arb_layer(name: String) -> impl Strategy<Value = LoraLayer> {
    (
        1usize..5,
        1usize..5,
        1usize..4,
        prop::sample::select(vec![1.0, 4.0, 8.0, 0.5]),
    )
        .prop_flat_map(move |(d_out, d_in, r, alpha)| {
            let name = name.clone();
            (f32_matrix(d_out, r), f32_matrix(r, d_in))
                .prop_map(move |(a, b)| LoraLayer::new(name.clone(), a, b, alpha).unwrap())
        })
}

fn arb_set() -> impl Strategy<Value = AdapterSet> {
    (0usize..4, prop::bool::ANY).prop_flat_map(|(n, with_mergers)| {
        let layers: Vec<_> = (0..n).map(|i| arb_layer(format!("layer.{i}"))).collect();
        layers.prop_map(move |layers| {
            let mut set = AdapterSet::from_layers(Role::Merged, layers).unwrap();
            if with_mergers {
                let names: Vec<(String, usize)> = set
                    .layers()
                    .map(|l| (l.name().to_string(), l.rank()))
                    .collect();
                for (name, r) in names {
                    let m = MaskVector::new((0..r).map(|k| k as f64 * 0.25).collect()).unwrap();
                    set.set_mergers(&name, MaskPair::new(m.clone(), m)).unwrap();
                }
            }
            set
        })
    })
}

proptest! {
    #[test]
    fn read_inverts_write(set in arb_set()) {
        let bytes = encode_adapter(&set);
        let back = decode_adapter(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(encode_adapter(&back), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(cut in 1usize..200) {
        let bytes = encode_adapter(&golden_set());
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_adapter(&bytes[..keep]).is_err());
    }
}

#[test]
fn read_write_read_is_idempotent_on_synthetic_sets() {
    let set = generate_synthetic(&SyntheticSpec::uniform(3, 9, 3), 4).unwrap();
    let first = decode_adapter(&encode_adapter(&set)).unwrap();
    let second = decode_adapter(&encode_adapter(&first)).unwrap();
    assert_eq!(first, second);
}

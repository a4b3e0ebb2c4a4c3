use std::path::PathBuf;

use dsrpgo_core::data::{ProteinDataset, Split};
use dsrpgo_core::metrics::{davies_bouldin, label_set_clusters};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny8")
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn loads_hand_authored_fixture() {
    let ds = ProteinDataset::load(&fixture()).unwrap();
    assert_eq!(ds.len(), 8);
    assert_eq!(ds.terms(), 3);
    assert_eq!(ds.ids[7], "P8");

    // (X + Xᵀ)/2 of the asymmetric entries P3–P4 (0.5, 0) and P7–P8 (0, 0.25).
    let ppi = ds.ppi.data();
    assert_eq!(ppi[2 * 8 + 3], 0.25);
    assert_eq!(ppi[3 * 8 + 2], 0.25);
    assert_eq!(ppi[6 * 8 + 7], 0.125);
    assert_eq!(ppi[7 * 8 + 6], 0.125);

    // Column ranges of seq_embed: [-0.5, 2.5], [-1, 3], constant 2.
    close(&ds.seq_min, &[-0.5, -1.0, 2.0]);
    close(&ds.seq_max, &[2.5, 3.0, 2.0]);
    close(&ds.seq_norm.data()[..3], &[1.0 / 3.0, 0.0, 0.0]);
    close(&ds.seq_norm.data()[9..12], &[1.0, 0.5, 0.0]);

    assert_eq!(ds.indices(Split::Train), vec![0, 1, 2, 5]);
    assert_eq!(ds.indices(Split::Valid), vec![3]);
    assert_eq!(ds.indices(Split::Test), vec![4, 6]);
    assert_eq!(ds.split[7], Split::PretrainOnly);
    assert_eq!(ds.has_labels, vec![true, true, true, true, true, true, true, false]);
    assert_eq!(ds.labels_for(&[3]).data(), &[0.0, 1.0, 1.0]);
    assert!(ds.train_absent_terms().is_empty());
}

#[test]
fn loading_is_deterministic_and_round_trips() {
    let a = ProteinDataset::load(&fixture()).unwrap();
    let b = ProteinDataset::load(&fixture()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(ProteinDataset::load(dir.path()).unwrap(), a);
}

#[test]
fn fixture_clusters_by_label_set() {
    let ds = ProteinDataset::load(&fixture()).unwrap();
    let rows: Vec<usize> = (0..7).collect();
    let clusters = label_set_clusters(&ds.labels_for(&rows));
    assert_eq!(clusters, vec![0, 0, 1, 2, 3, 4, 1]);
    let db = davies_bouldin(&ds.inputs(&rows).attributes, &clusters).unwrap();
    assert!(db.is_finite() && db > 0.0);
}

use livar::io::dataset::{read_dataset_csv, write_dataset_csv};
use livar::io::snapshot::{read_snapshot, write_snapshot};
use livar::io::table::{load_table, save_table};
use livar::Error;
use livar_core::data::make_blobs;
use livar_core::fed::{local_train, GShapTable, GlobalState, TrainConfig};

#[test]
fn snapshot_is_bit_exact() {
    let data = make_blobs(3, 5, 10, 1.0, 2).unwrap();
    let mut state = GlobalState::init(&[5, 9, 7, 6], 3, 2, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        rank: 2,
        ..TrainConfig::default()
    };
    let u = local_train(&state.backbone, &state.head, &data, &cfg, 5).unwrap();
    state.backbone.fold_deltas(&u.deltas).unwrap();
    state.head = u.head;

    let mut buf = Vec::new();
    write_snapshot(&mut buf, &state.backbone, &state.head).unwrap();
    let (backbone, head) = read_snapshot(&mut buf.as_slice()).unwrap();
    let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in backbone.frozen_weights().iter().zip(state.backbone.frozen_weights()) {
        assert_eq!(bits(a.as_slice()), bits(b.as_slice()));
    }
    assert_eq!(backbone, state.backbone);
    assert_eq!(bits(head.weights.as_slice()), bits(state.head.weights.as_slice()));
    assert_eq!(bits(&head.bias), bits(&state.head.bias));

    let mut again = Vec::new();
    write_snapshot(&mut again, &backbone, &head).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn dataset_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let data = make_blobs(4, 3, 7, 0.7, 9).unwrap();
    write_dataset_csv(&path, &data).unwrap();
    let back = read_dataset_csv(&path, Some(4)).unwrap();
    assert_eq!(back, data);
}

#[test]
fn table_round_trip_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let mut table = GShapTable::default();
    table.cells[1][1] = 0.0891234567890123;
    save_table(&path, &table, false).unwrap();
    assert_eq!(load_table(&path).unwrap(), table);
    assert!(matches!(save_table(&path, &table, false), Err(Error::Exists(_))));
    save_table(&path, &GShapTable::default(), true).unwrap();
    assert_eq!(load_table(&path).unwrap(), GShapTable::default());
}

use std::io::Write;

use poselift::checkpoint::Checkpoint;
use poselift::data::{
    generate_synthetic, load_dataset, save_dataset, synthetic_motion, SyntheticConfig,
};
use poselift::model::{ModelConfig, PoseModel};
use poselift::skeleton::SkeletonTopology;
use poselift::Error;

#[test]
fn dataset_round_trip_is_bit_identical() {
    let topo = SkeletonTopology::builtin("h36m17").unwrap();
    let records = generate_synthetic(&SyntheticConfig::new(5, 7, 3), &topo, "h36m17").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&path, &records).unwrap();
    let back = load_dataset(&path, Some(&topo)).unwrap();
    let bits = |r: &[poselift::data::PoseSequenceRecord]| -> Vec<u64> {
        r.iter()
            .flat_map(|x| x.frames_2d.iter().flatten().flatten().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(back, records);
    assert_eq!(bits(&back), bits(&records));
    let again = dir.path().join("e.jsonl");
    save_dataset(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn empty_file_is_empty_dataset() {
    let file = tempfile::NamedTempFile::new().unwrap();
    assert!(load_dataset(file.path(), None).unwrap().is_empty());
}

#[test]
fn wrong_joint_count_names_line_and_expected_j() {
    let topo16 = SkeletonTopology::new(16, (1..16).map(|j| [j - 1, j]).collect(), vec![], 0).unwrap();
    let h36m = SkeletonTopology::builtin("h36m17").unwrap();
    let good = generate_synthetic(&SyntheticConfig::new(1, 3, 0), &h36m, "h36m17").unwrap();
    let bad = generate_synthetic(&SyntheticConfig::new(1, 3, 0), &topo16, "x").unwrap();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "{}", serde_json::to_string(&good[0]).unwrap()).unwrap();
    writeln!(file, "{}", serde_json::to_string(&bad[0]).unwrap()).unwrap();
    let err = load_dataset(file.path(), Some(&h36m)).unwrap_err();
    assert!(matches!(err, Error::Data { line: 2, .. }), "{err:?}");
    assert!(err.to_string().contains("J=17"), "{err}");
}

#[test]
fn malformed_and_non_finite_lines_rejected() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "{{\"id\": 3").unwrap();
    assert!(matches!(load_dataset(file.path(), None), Err(Error::Data { line: 1, .. })));
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file).unwrap();
    writeln!(file, r#"{{"id":"a","topology_id":"t","frames_2d":[[[0,1e999]]]}}"#).unwrap();
    assert!(matches!(load_dataset(file.path(), None), Err(Error::Data { line: 2, .. })));
}

#[test]
fn bones_keep_their_length_across_frames() {
    let topo = SkeletonTopology::builtin("h36m17").unwrap();
    let parents = topo.parents();
    let motion = synthetic_motion(&SyntheticConfig::new(4, 30, 9), &topo).unwrap();
    for seq in &motion {
        for frame in seq {
            for j in 0..17 {
                if let Some(p) = parents[j] {
                    let first = (seq[0][j] - seq[0][p]).norm();
                    assert!(((frame[j] - frame[p]).norm() - first).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn noiseless_projection_drops_depth() {
    let topo = SkeletonTopology::builtin("tiny5").unwrap();
    let cfg = SyntheticConfig {
        noise: 0.0,
        ..SyntheticConfig::new(2, 4, 1)
    };
    let motion = synthetic_motion(&cfg, &topo).unwrap();
    let records = generate_synthetic(&cfg, &topo, "tiny5").unwrap();
    for (rec, seq) in records.iter().zip(&motion) {
        for (f2, f3) in rec.frames_2d.iter().zip(seq) {
            for (p2, p3) in f2.iter().zip(f3) {
                assert_eq!(*p2, [p3.x, p3.y]);
            }
        }
    }
}

#[test]
fn checkpoint_bytes_are_stable_and_config_round_trips() {
    let model = PoseModel::new(ModelConfig::tiny()).unwrap();
    let a = Checkpoint::new(model.config().clone(), model.init_params());
    let b = Checkpoint::new(model.config().clone(), model.init_params());
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, *model.config());
    assert_eq!(back.params, a.params);
}

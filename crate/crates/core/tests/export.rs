use aoi_core::exact::{Policy, ThresholdEntry, ThresholdMap};
use aoi_core::export::{read_csv_records, write_policy_csv, write_thresholds_csv, INF_SENTINEL};
use aoi_core::{
    DeviceAction, DeviceParams, DeviceState, ModelVariant, SystemAction, SystemConfig, SystemModel, SystemState,
};
use serde_json::json;
use tempfile::TempDir;

fn arrivals_pair() -> SystemModel {
    let d = DeviceParams::uniform(2, 0.5, 2).with_arrivals(0.5, 2);
    SystemModel::new(SystemConfig::new(vec![d.clone(), d], 1, ModelVariant::RandomArrival).unwrap()).unwrap()
}

#[test]
fn policy_csv_round_trips_states_and_actions() {
    let dir = TempDir::new().unwrap();
    let model = arrivals_pair();
    let n = model.joint_state_count().unwrap();
    let policy = Policy::uniform(n, 0);
    let values: Vec<f64> = (0..n).map(|x| x as f64 / 4.0).collect();
    let path = dir.path().join("policy.csv");
    write_policy_csv(&path, &model, &policy, Some(&values), &json!({ "seed": 3 })).unwrap();

    let (provenance, records) = read_csv_records(&path).unwrap();
    assert_eq!(provenance["seed"], 3);
    assert_eq!(
        &records[0],
        vec!["state_index", "a_b0", "a_d0", "a_r0", "d0", "a_b1", "a_d1", "a_r1", "d1", "action0", "action1", "value"]
    );
    assert_eq!(records.len(), n + 1);
    for (x, r) in records[1..].iter().enumerate() {
        let num = |i: usize| r[i].parse::<u32>().unwrap();
        let state = SystemState::new(vec![
            DeviceState::with_buffer(num(1), num(2), num(3), num(4)),
            DeviceState::with_buffer(num(5), num(6), num(7), num(8)),
        ]);
        assert_eq!(model.encode(&state).unwrap(), x);
        assert_eq!(r[0].parse::<usize>().unwrap(), x);
        assert_eq!(&r[9], DeviceAction::Idle.as_str());
        assert_eq!(r[11].parse::<f64>().unwrap(), values[x]);
    }
}

#[test]
fn thresholds_csv_uses_the_infinity_sentinel() {
    let dir = TempDir::new().unwrap();
    let model = SystemModel::single(DeviceParams::uniform(2, 0.5, 3), ModelVariant::GenerateAtWill).unwrap();
    let map = ThresholdMap {
        device: 0,
        action: SystemAction(vec![DeviceAction::Fresh]),
        entries: vec![
            ThresholdEntry { reduced: SystemState::new(vec![DeviceState::new(0, 1, 1)]), phi: None },
            ThresholdEntry { reduced: SystemState::new(vec![DeviceState::new(0, 3, 2)]), phi: Some(2) },
        ],
    };
    let path = dir.path().join("thresholds.csv");
    write_thresholds_csv(&path, &model, &map, &json!(null)).unwrap();
    let (_, records) = read_csv_records(&path).unwrap();
    assert_eq!(&records[0], vec!["a_r0", "d0", "phi"]);
    assert_eq!(&records[1], vec!["1", "1", INF_SENTINEL]);
    assert_eq!(&records[2], vec!["3", "2", "2"]);
}

//! CSV and JSON writers. Every CSV starts with a `# provenance: {...}` line
//! holding the resolved configuration and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::decomp::PerDeviceValueTable;
use crate::error::Result;
use crate::exact::{Policy, ThresholdMap};
use crate::model::{DeviceModel, ModelVariant, SystemModel, SystemState};
use crate::sim::SimResult;

pub const INF_SENTINEL: &str = "+inf";

fn open_csv(path: &Path, provenance: &serde_json::Value) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# provenance: {}", serde_json::to_string(provenance)?)?;
    Ok(csv::Writer::from_writer(file))
}

fn state_columns(model: &SystemModel, skip: Option<(usize, &str)>) -> Vec<String> {
    let ra = model.variant() == ModelVariant::RandomArrival;
    let mut cols = Vec::new();
    for k in 0..model.k() {
        let names: &[&str] = if ra { &["a_b", "a_d", "a_r", "d"] } else { &["a_d", "a_r", "d"] };
        for n in names {
            if skip != Some((k, n)) {
                cols.push(format!("{n}{k}"));
            }
        }
    }
    cols
}

fn push_state(model: &SystemModel, x: &SystemState, skip_a_d: Option<usize>, row: &mut Vec<String>) {
    let ra = model.variant() == ModelVariant::RandomArrival;
    for (k, s) in x.devices.iter().enumerate() {
        if ra {
            row.push(s.a_b.to_string());
        }
        if skip_a_d != Some(k) {
            row.push(s.a_d.to_string());
        }
        row.push(s.a_r.to_string());
        row.push(s.d.to_string());
    }
}

/// One row per joint state: state, action per device and optional value.
pub fn write_policy_csv(
    path: &Path,
    model: &SystemModel,
    policy: &Policy,
    values: Option<&[f64]>,
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = open_csv(path, provenance)?;
    let mut header = vec!["state_index".to_string()];
    header.extend(state_columns(model, None));
    header.extend((0..model.k()).map(|k| format!("action{k}")));
    if values.is_some() {
        header.push("value".into());
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for x in 0..policy.len() {
        row.clear();
        row.push(x.to_string());
        push_state(model, &model.decode(x), None, &mut row);
        row.extend(policy.action(model, x).0.iter().map(|a| a.as_str().to_string()));
        if let Some(v) = values {
            row.push(v[x].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reduced-state columns and `phi`, with `+inf` for the sentinel.
pub fn write_thresholds_csv(
    path: &Path,
    model: &SystemModel,
    map: &ThresholdMap,
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = open_csv(path, provenance)?;
    let mut header = state_columns(model, Some((map.device, "a_d")));
    header.push("phi".into());
    w.write_record(&header)?;
    let mut row = Vec::new();
    for e in &map.entries {
        row.clear();
        push_state(model, &e.reduced, Some(map.device), &mut row);
        row.push(e.phi.map_or_else(|| INF_SENTINEL.to_string(), |p| p.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-device value table with the sampling rule.
pub fn write_per_device_csv(
    path: &Path,
    dev: &DeviceModel,
    table: &PerDeviceValueTable,
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = open_csv(path, provenance)?;
    w.write_record(["state_index", "a_b", "a_d", "a_r", "d", "value", "sampling"])?;
    for (i, s) in dev.states().enumerate() {
        w.write_record([
            i.to_string(),
            s.a_b.to_string(),
            s.a_d.to_string(),
            s.a_r.to_string(),
            s.d.to_string(),
            table.values[i].to_string(),
            table.sampling[i].as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `(policy_name, replication, device, mean_aoi)`.
pub fn write_simulation_csv(
    path: &Path,
    results: &[(String, SimResult)],
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = open_csv(path, provenance)?;
    w.write_record(["policy_name", "replication", "device", "mean_aoi"])?;
    for (name, r) in results {
        for (rep, means) in r.replication_device_means.iter().enumerate() {
            for (k, m) in means.iter().enumerate() {
                w.write_record([name.clone(), rep.to_string(), k.to_string(), m.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic table with a provenance line.
pub fn write_rows_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = open_csv(path, provenance)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    file.flush()?;
    Ok(())
}

/// Reads a CSV written by this module, skipping the provenance line.
pub fn read_csv_records(path: &Path) -> Result<(serde_json::Value, Vec<csv::StringRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let provenance = match first.strip_prefix("# provenance: ") {
        Some(json) => serde_json::from_str(json)?,
        None => serde_json::Value::Null,
    };
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let mut records = vec![reader.headers()?.clone()];
    for r in reader.records() {
        records.push(r?);
    }
    Ok((provenance, records))
}

#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cve_core::DataSet;

pub fn cve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cve")).args(args).output().expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_dataset(path: &Path, data: &DataSet) {
    let mut text = String::new();
    let names: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    text.push_str(&names.join(","));
    text.push_str(",y\n");
    for i in 0..data.n() {
        let row: Vec<String> = data.x().row(i).iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&row.join(","));
        text.push_str(&format!(",{:.17e}\n", data.y()[i]));
    }
    fs::write(path, text).unwrap();
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// JSON text with the execution-only `manifest.runtime` block removed.
pub fn payload(path: &Path) -> String {
    let mut value = json(path);
    value["manifest"].as_object_mut().map(|m| m.remove("runtime"));
    if value.get("runtime").is_some() {
        value.as_object_mut().unwrap().remove("runtime");
    }
    serde_json::to_string(&value).unwrap()
}

/// Column-major matrix stored under `value[key]`.
pub fn matrix(value: &serde_json::Value) -> (usize, usize, Vec<f64>) {
    let rows = value["rows"].as_u64().unwrap() as usize;
    let cols = value["cols"].as_u64().unwrap() as usize;
    let data = value["column_major"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    (rows, cols, data)
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect()
}

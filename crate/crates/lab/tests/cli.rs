use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cameta-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config_hash_of(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn seed_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let o = lab(&["gen-maps", "--out", out.to_str().unwrap(), "--n", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    let o = lab(&["gen-dataset", "--out", out.to_str().unwrap(), "--n-maps", "1"]);
    assert!(!o.status.success());
}

#[test]
fn every_csv_leads_with_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let maps = tmp.path().join("maps");
    let data = tmp.path().join("data");
    let m = maps.to_str().unwrap();
    let d = data.to_str().unwrap();
    assert!(lab(&["gen-maps", "--out", m, "--n", "2", "--seed", "3"]).status.success());
    let o = lab(&["gen-dataset", "--out", d, "--n-maps", "2", "--robots", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for dir in [&maps, &data] {
        let hash = config_hash_of(dir);
        assert_eq!(hash.len(), 16);
        let mut seen = 0;
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            seen += 1;
            let mut r = csv::Reader::from_path(&p).unwrap();
            assert_eq!(&r.headers().unwrap()[0], "config_hash", "{}", p.display());
            for rec in r.records() {
                assert_eq!(&rec.unwrap()[0], hash.as_str(), "{}", p.display());
            }
        }
        assert!(seen > 0, "no csv in {}", dir.display());
    }
}

#[test]
fn config_echo_tracks_arguments() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let o = lab(&["gen-maps", "--out", dir.to_str().unwrap(), "--n", "1", "--seed", seed]);
        assert!(o.status.success());
    }
    assert_eq!(config_hash_of(&a), config_hash_of(&b));
    assert_ne!(config_hash_of(&a), config_hash_of(&c));

    let text = fs::read_to_string(a.join("config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["command"], "gen-maps");
    assert_eq!(v["config"]["seed"], 1);
    assert_eq!(v["config"]["map"]["width"], 24);
}

#[test]
fn missing_input_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = lab(&[
        "simulate",
        "--dataset",
        missing.to_str().unwrap(),
        "--scenario",
        "0",
        "--out",
        tmp.path().join("s").to_str().unwrap(),
        "--seed",
        "0",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

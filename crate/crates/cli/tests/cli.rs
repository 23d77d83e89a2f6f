use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prekeysim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prekeysim"))
        .args(args)
        .env_remove("PREKEYSIM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn query_devices_lists_linked_ids() {
    let o = prekeysim(&["query-devices", "--target", "123456789"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "[0, 1, 3]");
}

#[test]
fn query_devices_on_unknown_number_is_empty_and_fails() {
    let o = prekeysim(&["query-devices", "--target", "999"]);
    assert_eq!(stdout(&o).trim(), "[]");
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn deplete_windows_companion_prints_listing() {
    let o = prekeysim(&["deplete", "--target", "123456789:3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("Cnt: 812, MinID: 1675, MaxID: 2486"), "{out}");
    assert!(out.contains("All prekeys depleted, consumed 812 bundles in"), "{out}");
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "schema = \"prekeysim/1\"\nhorizon = \"1m\"\nbogus = 1\n").unwrap();
    let o = prekeysim(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let o = prekeysim(&["deplete", "--target", "not a jid!"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = prekeysim(&["--out-dir", d.to_str().unwrap(), "run", &scenario("fixture_account.toml")]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["depletions.csv", "query_devices.csv", "devices.csv", "report.json", "timeline.ndjson", "channel.bin"] {
        assert!(a.join(name).exists(), "missing {name}");
    }
    let mut csvs = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with(".csv") {
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
            csvs += 1;
        }
    }
    assert!(csvs >= 3);
}

#[test]
fn seed_comes_from_the_environment() {
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_prekeysim"))
            .args(["deplete", "--target", "123456789", "--async", "--rate", "50"])
            .env("PREKEYSIM_SEED", seed)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(run("5"), run("5"));
}

#[test]
fn fingerprint_names_the_windows_client() {
    let o = prekeysim(&["fingerprint", "--target", "123456789:3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).to_lowercase().contains("windows"), "{}", stdout(&o));
}

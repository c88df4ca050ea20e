use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn attestfl(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_attestfl"));
    cmd.args(args).env_remove("ATTESTFL_OUT");
    if let Some(dir) = out {
        cmd.env("ATTESTFL_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, rounds: u64, extra: &str) -> String {
    let path = dir.join(format!("cfg-{rounds}.toml"));
    let text = format!(
        "name = \"tiny\"\nrounds = {rounds}\nseeds = [0, 1]\n\n[model]\nkind = \"linear\"\ninput_window = 4\n\n\
         [data]\nsource = \"synthetic\"\nlinks = 6\ndays = 1\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn one_round_writes_one_line_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, "");
    let out = tmp.path().join("run");
    let o = attestfl(&["run", &cfg], Some(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rounds = fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
    assert!(out.join("summary.json").exists());

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["defense"]["window"], 5);
    assert_eq!(resolved["train"]["learning_rate"], 0.1);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 3, "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(attestfl(&["run", &cfg], Some(&a)).status.success());
    assert!(attestfl(&["run", &cfg], Some(&b)).status.success());
    assert_eq!(
        fs::read(a.join("rounds.jsonl")).unwrap(),
        fs::read(b.join("rounds.jsonl")).unwrap()
    );
}

#[test]
fn compare_with_itself_is_unity() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, "");
    let run = tmp.path().join("run");
    assert!(attestfl(&["run", &cfg], Some(&run)).status.success());
    let run = run.to_string_lossy().into_owned();
    let o = attestfl(&["compare", &run, &run], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cmp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&run).join("compare.json")).unwrap()).unwrap();
    assert_eq!(cmp["final_loss_ratio"], 1.0);
    assert_eq!(cmp["rounds"].as_array().unwrap().len(), 4);
}

#[test]
fn compare_rejects_mismatched_rounds() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(attestfl(&["run", &write_config(tmp.path(), 1, "")], Some(&a))
        .status
        .success());
    assert!(attestfl(&["run", &write_config(tmp.path(), 2, "")], Some(&b))
        .status
        .success());
    let o = attestfl(&["compare", a.to_str().unwrap(), b.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 1, "\n[defense]\nkappa = -1.0\n");
    let o = attestfl(&["run", &cfg], Some(&tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("defense.kappa"));

    let cfg = write_config(tmp.path(), 1, "\n[shard]\nassignment = { 0 = [\"nowhere\"] }\n");
    let o = attestfl(&["run", &cfg], Some(&tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shard.assignment"));

    let o = attestfl(&["run", "--preset", "no-such-preset"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), 2, "\n[train]\nlearning_rate = 1e200\n");
    let o = attestfl(&["run", &cfg], Some(&tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed 0"));
}

#[test]
fn gen_data_one_link_one_day() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    for path in [&a, &b] {
        let o = attestfl(
            &[
                "gen-data",
                "--links",
                "1",
                "--days",
                "1",
                "--seed",
                "9",
                "-o",
                path.to_str().unwrap(),
            ],
            None,
        );
        assert!(o.status.success());
        assert!(String::from_utf8_lossy(&o.stdout).contains("\"rows\":288"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 289);
    assert_eq!(text.lines().next(), Some("link_id,timestamp_index,speed_kmh"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_data_unwritable_path_exits_1() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("missing").join("x.csv");
    let o = attestfl(&["gen-data", "-o", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn presets_cover_scenarios_and_defenses() {
    let o = attestfl(&["presets", "list"], None);
    let names = String::from_utf8(o.stdout).unwrap();
    for name in ["static-none", "static-afl1", "pretence-afl2", "randomized-afl3"] {
        assert!(names.lines().any(|l| l == name), "{name} missing");
    }
    let o = attestfl(&["presets", "show", "static-afl1"], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("kind = \"static\""));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use handoff_cli::config::RunConfigFile;
use handoff_core::planner::{compute_transfer_plan, TransferPlan};
use handoff_core::simulator::{restart_latency, Layout, RestartStrategy};
use tempfile::TempDir;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn handoff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handoff")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SPLIT: &str = r#"
[model]
layers = 1
tensors = [{ name = "w", shape = [8, 8], shard_axis = 0 }]

[configs]
tp2 = { tp = 2, pp = 1, dp = 1 }
tp4 = { tp = 4, pp = 1, dp = 1 }
"#;

#[test]
fn plan_splits_each_source_shard_in_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "split.toml", SPLIT);
    let out = dir.path().join("plan.txt");
    let o = handoff(&["plan", &cfg, "--from", "tp2", "--to", "tp4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan: TransferPlan = fs::read_to_string(&out).unwrap().parse().unwrap();
    // every tp2 block [4k, 4k+4) meets exactly the two tp4 blocks inside it
    let mut per_src = std::collections::BTreeMap::new();
    for t in plan.tasks() {
        *per_src.entry(t.src).or_insert(0) += 1;
        assert_eq!(t.bounds.bounds[0].len(), 2);
    }
    assert_eq!(per_src.into_iter().collect::<Vec<_>>(), vec![(0, 2), (1, 2)]);
    assert!(stdout(&o).contains("tasks 4"));
}

#[test]
fn plan_file_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("plan.txt");
    let toy = bundled("toy.toml");
    let o = handoff(&["plan", toy.to_str().unwrap(), "--from", "tp2_pp2", "--to", "tp2_pp2_dp2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let parsed: TransferPlan = fs::read_to_string(&out).unwrap().parse().unwrap();
    let cfg = RunConfigFile::load(&toy).unwrap();
    let want = compute_transfer_plan(&cfg.config("tp2_pp2", 0).unwrap(), &cfg.config("tp2_pp2_dp2", 1).unwrap(), &cfg.model().unwrap()).unwrap();
    assert_eq!(parsed, want);
}

#[test]
fn identical_configs_give_empty_plan() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "split.toml", SPLIT);
    let o = handoff(&["plan", &cfg, "--from", "tp2", "--to", "tp2"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("tasks 0"));
}

#[test]
fn invalid_degrees_exit_with_violation() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.toml", &format!("{SPLIT}tp16 = {{ tp = 16, pp = 1, dp = 1 }}\n"));
    let o = handoff(&["plan", &cfg, "--from", "tp2", "--to", "tp16"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tp16") && stderr(&o).contains("< tp 16"), "{}", stderr(&o));
}

#[test]
fn verify_is_bit_exact() {
    let toy = bundled("toy.toml");
    let o = handoff(&["verify", toy.to_str().unwrap(), "--from", "tp2_pp2", "--to", "tp4_pp1", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max deviation 0"));
}

#[test]
fn verify_catches_mutated_plans() {
    let toy = bundled("toy.toml");
    for m in ["drop", "duplicate"] {
        let o = handoff(&["verify", toy.to_str().unwrap(), "--from", "tp2_pp2", "--to", "tp4_pp1", "--mutate", m]);
        assert_eq!(code(&o), 2, "{m}: {}", stdout(&o));
        assert!(stdout(&o).contains("violation:"));
    }
}

#[test]
fn small_staging_buffer_still_exact_with_chunking() {
    let toy = bundled("toy.toml");
    let t = toy.to_str().unwrap();
    let o = handoff(&["verify", t, "--from", "tp1_pp1", "--to", "tp2_pp2_dp2", "--staging-bytes", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max deviation 0"));
    assert!(stdout(&o).contains("peak_staging_bytes=16"));
    let o = handoff(&["verify", t, "--from", "tp1_pp1", "--to", "tp2_pp2_dp2", "--staging-bytes", "16", "--no-chunking"]);
    assert_eq!(code(&o), 2);
}

fn summary_goodput(dir: &Path, s: &str) -> f64 {
    let text = fs::read_to_string(dir.join(format!("{s}_summary.csv"))).unwrap();
    text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn high_volatility_favours_live() {
    let dir = TempDir::new().unwrap();
    let reference = bundled("reference.toml");
    let o = handoff(&["simulate", reference.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let live = summary_goodput(dir.path(), "live");
    assert!(live > summary_goodput(dir.path(), "cold"));
    assert!(live > summary_goodput(dir.path(), "reshape"));
    let header = fs::read_to_string(dir.path().join("live.csv")).unwrap();
    assert!(header.starts_with("event_index,t_event_s,kind,strategy,pause_s,phase_load_s,phase_init_s,phase_transfer_s,phase_swap_s\n"));
}

#[test]
fn simulation_output_is_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let reference = bundled("reference.toml");
    for d in [&a, &b] {
        let o = handoff(&["simulate", reference.to_str().unwrap(), "--regime", "medium", "--seed", "3", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["live.csv", "cold.csv", "reshape.csv", "live_summary.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_duration_has_no_events() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "zero.toml", &format!("{SPLIT}\n[scenario]\ninitial = \"tp2\"\nduration_s = 0.0\n"));
    let out = dir.path().join("out");
    let o = handoff(&["simulate", &cfg, "--strategy", "live", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("live.csv")).unwrap().lines().count(), 1);
    assert!(!out.join("cold.csv").exists());
}

#[test]
fn fail_stop_only_uses_checkpoints_everywhere() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{SPLIT}\n[scenario]\ninitial = \"tp2\"\nduration_s = 900.0\ncheckpoint_interval = 10\nevents = [\n  {{ time_s = 100.0, kind = \"fail_stop\", target = \"tp4\" }},\n  {{ time_s = 500.0, kind = \"fail_stop\", target = \"tp2\" }},\n]\n"
    );
    let cfg = write(&dir, "fs.toml", &text);
    let out = dir.path().join("out");
    let o = handoff(&["simulate", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for s in ["live", "cold", "reshape"] {
        let csv = fs::read_to_string(out.join(format!("{s}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 2, "{s}");
        for r in rows {
            let cols: Vec<&str> = r.split(',').collect();
            assert_eq!(cols[2], "fail_stop");
            assert!(cols[6].parse::<f64>().unwrap() > 0.0, "{s}: {r}");
            assert_eq!(cols[7].parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn schema_errors_name_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "typo.toml", &format!("{SPLIT}\n[cost_model]\ndrain_seconds = 1.0\n"));
    let o = handoff(&["plan", &cfg, "--from", "tp2", "--to", "tp4"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("drain_seconds") && err.contains("line 11"), "{err}");
}

#[test]
fn missing_files_are_io_errors() {
    let o = handoff(&["plan", "/nonexistent/run.toml", "--from", "a", "--to", "b"]);
    assert_eq!(code(&o), 3);
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "split.toml", SPLIT);
    let o = handoff(&["plan", &cfg, "--from", "tp2", "--to", "tp4", "--out", "/nonexistent/dir/plan.txt"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bad_flags_are_validation_errors() {
    let o = handoff(&["simulate", "x.toml", "--strategy", "warp", "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&handoff(&["--help"])), 0);
}

#[test]
fn calibrate_reproduces_reference_breakdown() {
    let dir = TempDir::new().unwrap();
    let base = write(&dir, "base.toml", "[model]\npreset = \"20b\"\n");
    let fitted = dir.path().join("fitted.toml");
    let traces = bundled("reference_traces.toml");
    let o = handoff(&["calibrate", &base, traces.to_str().unwrap(), "--out", fitted.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max divergence 0.000%"));
    let text = format!("[model]\npreset = \"20b\"\n{}", fs::read_to_string(&fitted).unwrap());
    let cfg = RunConfigFile::parse(&text).unwrap();
    let m = cfg.model().unwrap();
    let lat = restart_latency(RestartStrategy::ColdRestart, &Layout::new(4, 4, 2).config(0, m.num_layers), &m, &cfg.cost_model());
    assert!((lat.total_s - 127.1).abs() < 1e-6);

    let unknown = write(&dir, "unknown.toml", "[[traces]]\nmodel = \"900b\"\nlayout = { tp = 1, pp = 1, dp = 1 }\n");
    assert_eq!(code(&handoff(&["calibrate", &base, &unknown])), 1);
}

#[test]
fn bundled_reference_reproduces_restart_breakdown() {
    let cfg = RunConfigFile::load(&bundled("reference.toml")).unwrap();
    let m = handoff_core::simulator::presets::gpt_preset("20b").unwrap();
    let lat = restart_latency(RestartStrategy::ColdRestart, &Layout::new(4, 4, 2).config(0, m.num_layers), &m, &cfg.cost_model());
    for (got, want) in [(lat.load_s, 54.6), (lat.init_s, 70.1), (lat.misc_s, 2.4), (lat.total_s, 127.1)] {
        assert!((got - want).abs() <= 0.01 * want, "{got} vs {want}");
    }
}

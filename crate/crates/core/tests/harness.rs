use std::fs;
use std::path::Path;

use l2l::cost::COST_CSV_HEADER;
use l2l::harness::{
    cmd_costmodel, cmd_run, cmd_sweep, cmd_verify, parse_config, parse_sweep, RunStatus,
    LOSS_CSV_HEADER, RUNS_CSV_HEADER,
};
use l2l::Error;

const GOLDEN_CONFIG: &str = "n_layers=2\nhidden=4\nintermediate=8\nub=2\nu=2\nsteps=3\nseed=5\n";

fn golden(name: &str) -> String {
    fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn run_outputs_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&parse_config(GOLDEN_CONFIG).unwrap(), dir.path()).unwrap();
    for name in ["runs.csv", "loss.csv", "cost.csv"] {
        let got = fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(got, golden(name), "{name} drifted");
    }
}

#[test]
fn headers_are_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&parse_config(GOLDEN_CONFIG).unwrap(), dir.path()).unwrap();
    assert_eq!(
        header(&dir.path().join("runs.csv")),
        RUNS_CSV_HEADER.join(",")
    );
    assert_eq!(
        header(&dir.path().join("loss.csv")),
        LOSS_CSV_HEADER.join(",")
    );
    assert_eq!(
        header(&dir.path().join("cost.csv")),
        COST_CSV_HEADER.join(",")
    );
    assert_eq!(
        RUNS_CSV_HEADER.join(","),
        "run_id,schedule,N,H,I,ub,u,stash,precision,peak_bytes,transferred_h2d,transferred_d2h,status"
    );
    assert_eq!(
        COST_CSV_HEADER.join(","),
        "N,L_MB,B_GBps,c_Gops,F_TFLOPs,ub,u,X_ms,C_ms,total_ms,t_fwd,t_train,overhead"
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let config = parse_config("n_layers=3\nprecision=cmp\noptimizer=adam\nk=2\nu=2").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&config, a.path()).unwrap();
    cmd_run(&config, b.path()).unwrap();
    for name in ["runs.csv", "loss.csv", "cost.csv", "master.bin"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn master_state_reads_back() {
    let config = parse_config(GOLDEN_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let record = cmd_run(&config, dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("master.bin")).unwrap();
    let layers = l2l::eps::read_state(&config.model(), &mut bytes.as_slice()).unwrap();
    let master = &record.outcome.unwrap().final_master.master;
    for (read, kept) in layers.iter().zip(master) {
        assert!(read.bitwise_eq(kept));
    }
}

#[test]
fn oom_run_still_writes_a_row() {
    let mut config = parse_config("n_layers=2\nhidden=8\nintermediate=16").unwrap();
    config.device_budget = Some(500);
    let dir = tempfile::tempdir().unwrap();
    match cmd_run(&config, dir.path()) {
        Err(Error::OutOfMemory { shortfall, .. }) => assert!(shortfall > 0),
        other => panic!("expected out-of-memory, got {other:?}"),
    }
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().ends_with(",oom"));
    assert!(!dir.path().join("loss.csv").exists());
}

#[test]
fn depth_sweep_has_flat_host_peak() {
    let spec =
        parse_sweep("hidden=8\nintermediate=32\nu=2\nsteps=1\nsweep.n_layers=4,24,96").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let result = cmd_sweep(&spec, dir.path()).unwrap();
    let peaks: Vec<u64> = result.records.iter().map(|r| r.peak_bytes).collect();
    assert_eq!(peaks.len(), 3);
    assert!(peaks.iter().all(|&p| p == peaks[0]), "{peaks:?}");
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 4);
    let costs = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert_eq!(costs.lines().count(), 4);
    assert!(result.summary.contains("peak_bytes"));
}

#[test]
fn tight_budget_separates_schedules() {
    let l2l_peak = {
        let spec = parse_sweep("n_layers=12\nhidden=8\nintermediate=32\nsteps=1").unwrap();
        let dir = tempfile::tempdir().unwrap();
        cmd_sweep(&spec, dir.path()).unwrap().records[0].peak_bytes
    };
    let text = format!(
        "n_layers=12\nhidden=8\nintermediate=32\nsteps=1\ndevice_budget={l2l_peak}\n\
         sweep.schedule=conventional,l2l"
    );
    let dir = tempfile::tempdir().unwrap();
    let result = cmd_sweep(&parse_sweep(&text).unwrap(), dir.path()).unwrap();
    let status: Vec<RunStatus> = result.records.iter().map(|r| r.status()).collect();
    assert_eq!(status, [RunStatus::OutOfMemory, RunStatus::Ok]);
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().ends_with(",oom"));
    assert!(runs.lines().nth(2).unwrap().ends_with(",ok"));
}

#[test]
fn invalid_points_are_recorded_and_skipped() {
    let spec = parse_sweep("steps=1\nsweep.u=1,2\nsweep.schedule=conventional,l2l").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let result = cmd_sweep(&spec, dir.path()).unwrap();
    let status: Vec<&str> = result.records.iter().map(|r| r.status().name()).collect();
    assert_eq!(status, ["ok", "ok", "error", "ok"]);
    assert_eq!(result.records[2].config.u, 2);
}

#[test]
fn empty_sweep_equals_single_run() {
    let dir_sweep = tempfile::tempdir().unwrap();
    let dir_run = tempfile::tempdir().unwrap();
    cmd_sweep(&parse_sweep(GOLDEN_CONFIG).unwrap(), dir_sweep.path()).unwrap();
    cmd_run(&parse_config(GOLDEN_CONFIG).unwrap(), dir_run.path()).unwrap();
    for name in ["runs.csv", "cost.csv"] {
        assert_eq!(
            fs::read_to_string(dir_sweep.path().join(name)).unwrap(),
            fs::read_to_string(dir_run.path().join(name)).unwrap()
        );
    }
}

#[test]
fn costmodel_text() {
    let p = l2l::cost::CostParams {
        n_layers: 24,
        layer_mb: 12.0,
        bandwidth_gbps: 12.0,
        layer_gops: 2.0,
        tflops: 2.0,
        ub: 64,
        u: 10,
    };
    let text = cmd_costmodel(&p, Some(0.10), None).unwrap();
    assert!(text.contains("4.76%"));
    assert!(text.contains("u=5"));
    assert!(matches!(
        cmd_costmodel(&p, Some(1.5), None),
        Err(Error::Domain {
            param: "target",
            ..
        })
    ));
}

#[test]
fn verify_passes_deterministically() {
    let a = cmd_verify();
    assert!(a.passed(), "{}", a.table());
    assert!(a.suites.len() >= 5);
    assert_eq!(a.table(), cmd_verify().table());
}

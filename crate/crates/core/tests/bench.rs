use std::process::Command;

use multistep_fbsde::bench::{
    render_csv, render_markdown, run, write_atomic, CellOutcome, RunSpec, CSV_HEADER, DIVERGED,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde-bench"))
}

#[test]
fn two_points_give_no_rate() {
    let report = run(&RunSpec::new("ex51", vec![1], vec![16, 32])).unwrap();
    assert_eq!(report.cells.len(), 2);
    let rate = report.rate(1, 0).unwrap();
    assert!(rate.cr_y.is_none() && rate.cr_z.is_none());
    assert!(!report.notes.is_empty());
    let csv = render_csv(&report);
    assert!(csv.lines().any(|l| l == "ex51,1,CR,0,,,,"));
}

#[test]
fn csv_round_trips_every_number() {
    let report = run(&RunSpec::new("ex53_2d", vec![1, 2], vec![8, 16, 32])).unwrap();
    let csv = render_csv(&report);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let mut data_rows = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 8, "{line}");
        let (k, comp): (usize, usize) = (cols[1].parse().unwrap(), cols[3].parse().unwrap());
        if cols[2] == "CR" {
            let r = report.rate(k, comp).unwrap();
            assert_eq!(cols[4].parse::<f64>().unwrap(), r.cr_y.unwrap());
            assert_eq!(cols[5].parse::<f64>().unwrap(), r.cr_z.unwrap());
            continue;
        }
        data_rows += 1;
        let n: usize = cols[2].parse().unwrap();
        let m = report.cell(k, n).unwrap().metrics().unwrap();
        assert_eq!(cols[4].parse::<f64>().unwrap(), m.err_y.as_ref().unwrap()[comp]);
        assert_eq!(cols[5].parse::<f64>().unwrap(), m.err_z.as_ref().unwrap()[comp]);
        assert_eq!(cols[6].parse::<f64>().unwrap(), m.runtime_s);
        assert_eq!(cols[7].parse::<usize>().unwrap(), m.picard.max);
    }
    // two Y and two Z components per cell
    assert_eq!(data_rows, 2 * 3 * 2);
}

#[test]
fn rows_sorted_by_k_then_n() {
    let report = run(&RunSpec::new("ex51", vec![3, 1], vec![32, 16, 8])).unwrap();
    let keys: Vec<(usize, usize)> = report.cells.iter().map(|c| (c.k, c.n)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn output_is_deterministic_apart_from_runtime() {
    let spec = RunSpec::new("ex54a", vec![1, 2], vec![8, 16, 32]);
    let strip = |csv: String| -> Vec<String> {
        csv.lines()
            .map(|l| {
                let mut c: Vec<&str> = l.split(',').collect();
                c[6] = "";
                c.join(",")
            })
            .collect()
    };
    let a = strip(render_csv(&run(&spec).unwrap()));
    let mut par = spec.clone();
    par.parallel_cells = true;
    let b = strip(render_csv(&run(&par).unwrap()));
    assert_eq!(a, b);
}

#[test]
fn parallel_runtimes_are_marked() {
    let mut spec = RunSpec::new("ex51", vec![1], vec![8, 16]);
    spec.parallel_cells = true;
    let csv = render_csv(&run(&spec).unwrap());
    assert!(csv.lines().skip(1).take(2).all(|l| l.split(',').nth(6).unwrap().ends_with('*')));
}

#[test]
fn divergence_is_recorded_per_cell() {
    let report = run(&RunSpec::new("ex51", vec![2, 8], vec![64])).unwrap();
    assert!(matches!(report.cell(2, 64).unwrap().outcome, CellOutcome::Solved(_)));
    assert!(matches!(report.cell(8, 64).unwrap().outcome, CellOutcome::Diverged(_)));
    let csv = render_csv(&report);
    assert!(csv.contains(&format!("ex51,8,64,0,{DIVERGED},{DIVERGED},,")));
    assert!(render_markdown(&report).contains(DIVERGED));
}

#[test]
fn atomic_write_replaces_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    std::fs::write(&path, "old").unwrap();
    write_atomic(&path, "new contents\n").unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "new contents\n");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn cli_writes_csv_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let status = bin()
        .args(["--problem", "ex51", "--k", "1,2", "--N", "8,16,32", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + 6 + 2);
}

#[test]
fn cli_exit_codes() {
    let diverged = bin()
        .args(["--problem", "ex51", "--k", "8", "--N", "64"])
        .output()
        .unwrap();
    assert_eq!(diverged.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&diverged.stdout).contains(DIVERGED));

    for args in [
        vec!["--problem", "nope", "--k", "1", "--N", "8"],
        vec!["--problem", "ex51", "--k", "4", "--N", "4"],
        vec!["--problem", "ex51", "--k", "1", "--N", "8", "--terminal", "sideways"],
        vec!["--k", "1", "--N", "8"],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn config_file_with_cli_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.conf");
    std::fs::write(
        &cfg,
        "# convergence study\nproblem = ex51\nk = 1\nN = 8, 16, 32\nformat = markdown\n",
    )
    .unwrap();
    let out = bin().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("## ex51"));

    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["--format", "csv", "--N", "8,16"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 + 1);

    std::fs::write(&cfg, "problem = ex51\nbogus = 3\n").unwrap();
    let out = bin().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

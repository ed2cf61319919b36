use std::process::Command;

fn dtmars(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dtmars")).args(args).env("RUST_LOG", "warn").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("sim");
    let data_s = data.to_str().unwrap();

    assert_eq!(dtmars(&["--help"]).0, 0);
    assert_eq!(dtmars(&["no-such-command"]).0, 1);
    assert_eq!(dtmars(&["validate", "--preset", "desk"]).0, 0);
    assert_eq!(dtmars(&["validate", "--preset", "desk", "--set", "gan.weights.lambda_cyc=-1"]).0, 1);

    let (code, text) = dtmars(&["synth", "--preset", "desk", "--set", "synth.n_images=2", "--out", data_s]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(dtmars(&["validate", "--dataset", data_s]).0, 0);

    let label = std::fs::read_dir(data.join("labels")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&label, "0 0.5 0.5 0.1 0.1\n0 0.5 1.2 0.1 0.1\n").unwrap();
    let (code, text) = dtmars(&["validate", "--dataset", data_s]);
    assert_eq!(code, 1);
    assert!(text.contains(":2: value 1.2 out of range"), "{text}");

    let missing = d.join("missing.ckpt");
    let (code, _) = dtmars(&["eval", "--detector", missing.to_str().unwrap(), "--dataset", data_s]);
    assert_eq!(code, 2);
}

#[test]
fn oracle_rows_recover_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows");
    let rows_s = rows.to_str().unwrap();
    let set = ["--preset", "desk", "--set", "eval.rows.n_images=4"];
    let (code, text) = dtmars(&[&["synth"][..], &set, &["--kind", "rows", "--out", rows_s]].concat());
    assert_eq!(code, 0, "{text}");
    let (code, text) = dtmars(&[&["rows", "--oracle", "--dataset", rows_s, "--fitter", "lsq"][..], &set].concat());
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("0.00"), "{text}");
}

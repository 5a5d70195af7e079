// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;

#[test]
fn init_then_mount_shows_an_empty_root() {
    let d = Deployment::start(&[], &[]);
    let (ok, out) = d.shell(None, &["ls /"]);
    assert!(ok);
    assert_eq!(out[0]["entries"], serde_json::json!([]));
}

#[test]
fn init_records_block_size_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_str().unwrap();
    assert!(run(&["init", p, "--block-size", "512"]).status.success());
    let capsule = std::fs::read_to_string(dir.path().join("capsule.toml")).unwrap();
    assert_eq!(capsule.matches("block_size = 512").count(), 2, "{capsule}");
    let again = run(&["--json", "init", p]);
    assert_eq!(again.status.code(), Some(2));
    assert!(json_lines(&again.stdout)[0]["error"].as_str().unwrap().contains("--force"));
    assert!(run(&["init", p, "--force"]).status.success());
}

#[test]
fn three_processes_share_a_filesystem() {
    let d = Deployment::start(&["ann:1000", "ben:2000"], &[]);
    let (ok, out) = d.shell(None, &["mkdir /docs", "touch /docs/a", "write /docs/a 0 \"from ann\"", "flush"]);
    assert!(ok, "{out:?}");
    assert_eq!(out[3]["failures"], serde_json::json!([]));

    let (ok, out) = d.shell(Some("ben"), &["cat /docs/a", "stat /docs/a", "append /docs/a \", then ben\"", "flush"]);
    assert!(ok, "{out:?}");
    assert_eq!(out[0]["content"], "from ann");
    assert_eq!(out[1]["uid"], 65534, "foreign author maps to nobody");

    let (_, out) = d.shell(None, &["cat /docs/a", "stat /docs/a"]);
    assert_eq!(out[0]["content"], "from ann, then ben");
    assert_eq!(out[1]["uid"], 65534, "last writer was ben");
}

#[test]
fn revoked_key_cannot_write() {
    let d = Deployment::start(&["ann:1000", "ben:2000"], &[]);
    assert!(d.shell(None, &["touch /f", "write /f 0 \"v1\"", "flush"]).0);
    let out = run(&[
        "--json",
        "revoke",
        "--config",
        d.path("middleware.toml").to_str().unwrap(),
        "--key",
        d.path("keys/ben.key").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    // Without scrub ben is still in the ACL, so only the middleware can stop him.
    let (ok, out) = d.shell(Some("ben"), &["write /f 0 \"v2\"", "flush"]);
    assert!(!ok);
    assert!(out[1]["error"].as_str().unwrap().contains("revoked"), "{out:?}");
    let (_, out) = d.shell(None, &["cat /f"]);
    assert_eq!(out[0]["content"], "v1");
}

#[test]
fn killed_client_recovers_from_its_journal() {
    let d = Deployment::start(&["ann:1000", "ben:2000"], &[]);
    let mut sh = d.open(None);
    assert_eq!(sh.cmd("touch /j")["ok"], true);
    assert_eq!(sh.cmd("write /j 0 blob:3000:4")["ok"], true);
    assert_eq!(sh.cmd("write /j 10 \"acknowledged\"")["ok"], true);
    sh.kill();

    let (ok, out) = d.shell(None, &["pending", "flush", "pending"]);
    assert!(ok, "{out:?}");
    assert!(out[0]["pending"].as_u64().unwrap() > 0);
    assert_eq!(out[2]["pending"], 0);
    let (_, out) = d.shell(Some("ben"), &["stat /j"]);
    assert_eq!(out[0]["size"], 3000);
}

#[test]
fn snapshot_lists_the_past() {
    let d = Deployment::start(&[], &[]);
    assert!(d.shell(None, &["touch /old", "write /old 0 \"one\"", "flush"]).0);
    let (_, out) = d.shell(None, &["stat /old"]);
    let ts = out[0]["mtime_us"].as_u64().unwrap();
    assert!(d.shell(None, &["write /old 0 \"two\"", "touch /new", "flush"]).0);
    let cfg = d.path("mount.toml");
    let list = run(&["--json", "snapshot", "--config", cfg.to_str().unwrap(), "--ts", &ts.to_string()]);
    assert!(list.status.success());
    let v = &json_lines(&list.stdout)[0];
    assert_eq!(v["entries"].as_array().unwrap().len(), 1, "{v}");
    let cat = run(&["--json", "snapshot", "--config", cfg.to_str().unwrap(), "--ts", &ts.to_string(), "/old"]);
    assert_eq!(json_lines(&cat.stdout)[0]["content"], "one");
}

#[test]
fn journal_inspect_reports_pending_entries() {
    let d = Deployment::start(&[], &[]);
    let mut sh = d.open(None);
    sh.cmd("touch /p");
    sh.cmd("write /p 0 \"x\"");
    sh.kill();
    let out = run(&["--json", "journal", "inspect", d.path("journal/client").to_str().unwrap()]);
    assert!(out.status.success());
    let v = &json_lines(&out.stdout)[0];
    assert!(v["pending"].as_u64().unwrap() >= 2, "{v}");
    let missing = run(&["journal", "inspect", d.path("nope").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn attack_sim_reports_each_scenario() {
    let out = run(&["--json", "attack-sim", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = &json_lines(&out.stdout)[0];
    assert_eq!(v["pass"], true);
    assert_eq!(v["attacks"].as_array().unwrap().len(), 4);
    let bad = run(&["attack-sim", "nonsense"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn workload_files_run_in_process_and_against_a_deployment() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("w.cfs");
    std::fs::write(
        &script,
        "create /big\nwrite /big 0 blob:188k:2\nflush\nverify /big\ncrash-recover\nverify /big\n",
    )
    .unwrap();
    let out = run(&["--json", "workload", script.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json_lines(&out.stdout)[0]["pass"], true);

    let d = Deployment::start(&[], &[]);
    let out = run(&[
        "--json",
        "mount",
        "--config",
        d.path("mount.toml").to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));

    std::fs::write(&script, "create /x\nverify /x\nread /x 0 1\nnot-an-op\n").unwrap();
    let out = run(&["--json", "workload", script.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_lines(&out.stdout)[0]["failure"]["line"], 4);
}

#[test]
fn bench_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let out = run(&[
        "--json",
        "bench",
        "--op",
        "read",
        "--crypto",
        "off",
        "--sizes",
        "4k,8k",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("op,size,crypto,cached,trial,ns_per_block\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 20);
    assert_eq!(json_lines(&out.stdout)[0]["rows"].as_array().unwrap().len(), 2);
    let few = run(&["bench", "--trials", "5"]);
    assert_eq!(few.status.code(), Some(2));
}

#[test]
fn corpus_checks_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("c.jsonl");
    assert!(run(&["corpus", "--seed", "3", "--count", "30", "--out", f.to_str().unwrap()]).status.success());
    assert!(run(&["corpus", "--seed", "3", "--check", f.to_str().unwrap()]).status.success());
    assert_eq!(run(&["corpus", "--seed", "4", "--check", f.to_str().unwrap()]).status.code(), Some(1));
}

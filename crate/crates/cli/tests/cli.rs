use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use censorlab_core::emulator::{CensorPolicy, EmulatorHandle, Generation, World, LOOPBACK};
use censorlab_core::model::parse_target;
use censorlab_core::probe::{CleanPathConfig, ProbeConfig, Timeouts};

fn censorlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_censorlab")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

async fn emulator(generation: Generation, hosts: &[&str], blocked: &[&str]) -> EmulatorHandle {
    let mut policy = CensorPolicy::pass_through();
    policy.generation = generation;
    for h in blocked {
        policy.dns_rules.insert(h.parse().unwrap());
        policy.http_host_rules.insert(h.parse().unwrap());
    }
    let world = World::with_hosts(hosts.iter().copied(), LOOPBACK);
    EmulatorHandle::start(policy, world, IpAddr::V4(Ipv4Addr::LOCALHOST)).await.unwrap()
}

fn probe_toml(emu: &EmulatorHandle) -> String {
    let cfg = ProbeConfig {
        resolvers: emu.probe_resolvers(),
        keyword_portal: parse_target("http://www.google.com").unwrap(),
        timeouts: Timeouts { dns: 1000, tcp: 1000, http: 500 },
        retries: 0,
        workers: 4,
        port: emu.http_addr().port(),
        host_overrides: BTreeMap::from([("www.google.com".to_string(), vec![IpAddr::V4(LOOPBACK)])]),
        clean_path: Some(CleanPathConfig { resolver: emu.clean_dns_endpoint(), connect: Some(emu.origin_addr()) }),
    };
    toml::to_string(&cfg).unwrap()
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(censorlab(&[]).status.code(), Some(1));
    assert_eq!(censorlab(&["probe", "--bogus"]).status.code(), Some(1));
    assert_eq!(censorlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.json");
    let missing = dir.path().join("missing.txt");
    let r = censorlab(&["probe", "--targets", path(&missing), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.txt"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "workers = 0\n").unwrap();
    let list = dir.path().join("list.txt");
    std::fs::write(&list, "http://a.test\n").unwrap();
    let r = censorlab(&["probe", "--targets", path(&list), "--config", path(&bad), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[tokio::test(flavor = "multi_thread")]
async fn probe_classify_report_round() {
    let hosts = ["a.test", "b.test", "c.test", "d.test"];
    let emu = emulator(Generation::Isp302, &hosts, &["b.test", "d.test"]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("probe.toml");
    std::fs::write(&config, probe_toml(&emu)).unwrap();
    let list = dir.path().join("targets.txt");
    std::fs::write(&list, "# test list\nhttp://a.test\nhttp://b.test/\nnot a url\nc.test\nhttp://d.test/x\n").unwrap();
    let results = dir.path().join("results.json");

    let r = censorlab(&["probe", "--targets", path(&list), "--config", path(&config), "--out", path(&results)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("skipped `not a url`"));

    let classified = dir.path().join("classified.json");
    let r = censorlab(&["classify", "--input", path(&results), "--config", path(&config), "--out", path(&classified)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let table = String::from_utf8(r.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("DNS") && l.contains(" 2 ") && l.ends_with("50.00")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("HTTP (302)") && l.ends_with("50.00")), "{table}");

    let r = censorlab(&["report", "--input", path(&classified)]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(String::from_utf8(r.stdout).unwrap(), table);
}

#[tokio::test(flavor = "multi_thread")]
async fn all_error_logged_is_campaign_failure() {
    let mut policy = CensorPolicy::pass_through();
    policy.generation = Generation::PassThrough;
    let mut world = World::with_hosts(["x.test"], LOOPBACK);
    world.blackhole_hosts.insert("x.test".into());
    let emu = EmulatorHandle::start(policy, world, IpAddr::V4(Ipv4Addr::LOCALHOST)).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("probe.toml");
    std::fs::write(&config, probe_toml(&emu)).unwrap();
    let list = dir.path().join("targets.txt");
    std::fs::write(&list, "http://x.test/\n").unwrap();
    let results = dir.path().join("results.json");
    let r = censorlab(&["probe", "--targets", path(&list), "--config", path(&config), "--out", path(&results)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(results.exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn circumvent_writes_matrix() {
    let emu = emulator(Generation::Ixp200, &["a.test", "a.test.nyud.net"], &["a.test"]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    let text = format!(
        "{}\n[circumvent]\nmethods = [\"web_dns_plus_host_header\", \"coral_cdn\"]\n\n[circumvent.host_ip_table]\n\"a.test\" = [\"127.0.0.1\"]\n",
        probe_toml(&emu)
    );
    std::fs::write(&config, text).unwrap();
    let list = dir.path().join("targets.txt");
    std::fs::write(&list, "http://a.test/\n").unwrap();
    let out = dir.path().join("matrix.json");
    let r = censorlab(&["circumvent", "--targets", path(&list), "--config", path(&config), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.contains("WebDnsPlusHostHeader=Blocked"), "{stdout}");
    assert!(stdout.contains("CoralCdn=Accessible"), "{stdout}");
    let matrix: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(matrix["rows"][0]["outcomes"]["coral_cdn"], "accessible");
}

#[tokio::test(flavor = "multi_thread")]
async fn clean_reports_counts() {
    let emu = emulator(Generation::PassThrough, &["youtube.com", "a.test"], &[]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    let text = format!(
        "{}\n[clean]\ncollapse_hosts = [\"youtube.com\"]\nbackoff_ms = []\n",
        probe_toml(&emu)
    );
    std::fs::write(&config, text).unwrap();
    let list = dir.path().join("targets.txt");
    std::fs::write(
        &list,
        "http://www.youtube.com/watch?v=1\nhttp://www.youtube.com/watch?v=2\nhttp://a.test\nhttp://A.test/\nhttp://dead.test\n",
    )
    .unwrap();
    let out = dir.path().join("clean.json");
    let r = censorlab(&["clean", "--targets", path(&list), "--config", path(&config), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("5 -> 4 -> 3 -> 2"));
}

#[test]
fn emulate_prints_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.toml");
    std::fs::write(&policy, "generation = \"Isp302\"\ndns_rules = [\"*.youtube.com\"]\nhttp_host_rules = [\"*.youtube.com\"]\n").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_censorlab"))
        .args(["emulate", "--policy", path(&policy)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(first.starts_with("http 127.0.0.1:"), "{first}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "generation = \"Isp302\"\ndns_rules = [\"youtube.com\"]\n").unwrap();
    let r = censorlab(&["emulate", "--policy", path(&bad)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("dns_rules[0]"));
}

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::time::Duration;

use censorlab_core::emulator::{
    CensorPolicy, EmulatorHandle, Generation, HostPattern, SessionTranscript, World, LOOPBACK,
};
use censorlab_core::http;
use censorlab_core::model::parse_target;
use censorlab_core::probe::{http_step, CleanPathConfig, ProbeConfig, Timeouts};

pub const PORTAL: &str = "www.google.com";

pub fn world(hosts: &[String]) -> World {
    World::with_hosts(hosts.iter().map(String::as_str), LOOPBACK)
}

pub async fn start(policy: CensorPolicy, world: World) -> EmulatorHandle {
    EmulatorHandle::start(policy, world, IpAddr::V4(Ipv4Addr::LOCALHOST))
        .await
        .expect("emulator starts")
}

/// Probe config aimed at a running emulator, with its clean side as the
/// reference channel.
pub fn probe_config(emu: &EmulatorHandle) -> ProbeConfig {
    ProbeConfig {
        resolvers: emu.probe_resolvers(),
        keyword_portal: parse_target(&format!("http://{PORTAL}")).unwrap(),
        timeouts: Timeouts { dns: 1000, tcp: 1000, http: 1500 },
        retries: 0,
        workers: 16,
        port: emu.http_addr().port(),
        host_overrides: BTreeMap::from([(PORTAL.to_string(), vec![IpAddr::V4(LOOPBACK)])]),
        clean_path: Some(CleanPathConfig {
            resolver: emu.clean_dns_endpoint(),
            connect: Some(emu.origin_addr()),
        }),
    }
}

pub const GOLDEN_TRACE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/isp302_youtube_trace.json");

pub fn isp302_youtube_policy() -> CensorPolicy {
    let mut p = CensorPolicy::pass_through();
    p.generation = Generation::Isp302;
    p.http_host_rules.insert("*.youtube.com".parse::<HostPattern>().unwrap());
    p.dns_rules.insert("*.youtube.com".parse::<HostPattern>().unwrap());
    p.validate().unwrap();
    p
}

/// Probe a blocked host, then follow the redirect and fetch the favicon the
/// way a browser would. Returns the emulator's session transcripts.
pub async fn isp302_youtube_trace() -> Vec<SessionTranscript> {
    let emu = start(isp302_youtube_policy(), world(&["www.youtube.com".to_string()])).await;
    let cfg = probe_config(&emu);
    let target = parse_target("http://www.youtube.com/").unwrap();
    let obs = http_step(&target, IpAddr::V4(LOOPBACK), &cfg).await.unwrap();
    assert_eq!(obs.status, 302);
    let location = parse_target(obs.location.as_deref().unwrap()).unwrap();
    let limit = Duration::from_secs(2);
    let page = http::get(emu.http_addr(), &location.host, &location.request_uri(), limit, limit)
        .await
        .unwrap();
    assert_eq!(page.status, 200);
    let icon = http::get(emu.http_addr(), &location.host, "/favicon.ico", limit, limit).await.unwrap();
    assert_eq!(icon.status, 404);
    // sessions are recorded after the response is flushed
    for _ in 0..100 {
        if emu.transcripts().len() == 3 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    emu.transcripts()
}

/// Compares against the golden file; `UPDATE_GOLDEN=1` rewrites it.
pub fn check_golden(transcripts: &[SessionTranscript]) -> Result<(), String> {
    let mut actual = serde_json::to_string_pretty(transcripts).unwrap();
    actual.push('\n');
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(GOLDEN_TRACE, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(GOLDEN_TRACE).map_err(|e| format!("{GOLDEN_TRACE}: {e}"))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("transcript differs from golden file:\n{actual}"))
    }
}

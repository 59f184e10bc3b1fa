mod common;

use std::collections::BTreeMap;
use std::net::IpAddr;

use censorlab_core::circumvent::{coralize, evaluate_matrix, CircumventConfig, Method, Outcome};
use censorlab_core::emulator::{CensorPolicy, Generation, HostPattern, LOOPBACK};
use censorlab_core::model::TargetUrl;

const CACHE_HOST: &str = "webcache.googleusercontent.com";

fn blocked_hosts() -> Vec<String> {
    (0..6).map(|i| format!("b{i}.matrix.test")).collect()
}

fn open_hosts() -> Vec<String> {
    (0..4).map(|i| format!("o{i}.matrix.test")).collect()
}

fn policy(generation: Generation, extra_http: &[String]) -> CensorPolicy {
    let mut p = CensorPolicy::pass_through();
    p.generation = generation;
    for h in blocked_hosts() {
        let pat: HostPattern = h.parse().unwrap();
        p.dns_rules.insert(pat.clone());
        p.http_host_rules.insert(pat);
    }
    for h in extra_http {
        p.http_host_rules.insert(h.parse().unwrap());
    }
    p.validate().unwrap();
    p
}

fn zone_for(targets: &[TargetUrl]) -> Vec<String> {
    let mut names: Vec<String> = targets.iter().map(|t| t.host.clone()).collect();
    names.extend(targets.iter().map(|t| coralize(t).host));
    names.push(CACHE_HOST.to_string());
    names
}

fn config(targets: &[TargetUrl]) -> CircumventConfig {
    CircumventConfig {
        host_ip_table: targets.iter().map(|t| (t.host.clone(), vec![IpAddr::V4(LOOPBACK)])).collect(),
        ..CircumventConfig::default()
    }
}

async fn run(policy: CensorPolicy, targets: &[TargetUrl], cfg: &CircumventConfig) -> BTreeMap<Method, Vec<Outcome>> {
    let emu = common::start(policy, common::world(&zone_for(targets))).await;
    let probe = common::probe_config(&emu);
    let matrix = evaluate_matrix(targets, &Method::ALL, cfg, &probe).await.unwrap();
    assert_eq!(matrix.rows.len(), targets.len());
    for (row, t) in matrix.rows.iter().zip(targets) {
        assert_eq!(&row.target, t);
        assert_eq!(row.outcomes.len(), Method::ALL.len());
    }
    Method::ALL.iter().map(|m| (*m, matrix.column(*m))).collect()
}

fn roots(hosts: &[String]) -> Vec<TargetUrl> {
    hosts.iter().map(|h| TargetUrl::root(h).unwrap()).collect()
}

#[tokio::test]
async fn host_header_fails_coral_and_cache_succeed() {
    let targets = roots(&blocked_hosts());
    for generation in [Generation::Isp302, Generation::Ixp200] {
        let cols = run(policy(generation, &[]), &targets, &config(&targets)).await;
        assert!(cols[&Method::WebDnsPlusHostHeader].iter().all(|o| *o == Outcome::Blocked), "{generation:?}");
        assert!(cols[&Method::CoralCdn].iter().all(|o| *o == Outcome::Accessible), "{generation:?}");
        assert!(cols[&Method::SearchCache].iter().all(|o| *o == Outcome::Accessible), "{generation:?}");
    }
}

#[tokio::test]
async fn coral_blocked_once_policy_covers_it() {
    let targets = roots(&blocked_hosts());
    let coral: Vec<String> = targets.iter().map(|t| coralize(t).host).collect();
    let cols = run(policy(Generation::Ixp200, &coral), &targets, &config(&targets)).await;
    assert!(cols[&Method::CoralCdn].iter().all(|o| *o == Outcome::Blocked));
}

#[tokio::test]
async fn mixed_corpus_follows_policy() {
    let mut hosts = blocked_hosts();
    hosts.extend(open_hosts());
    let targets = roots(&hosts);
    let cols = run(policy(Generation::Isp302, &[]), &targets, &config(&targets)).await;
    let direct = &cols[&Method::WebDnsPlusHostHeader];
    assert!(direct[..6].iter().all(|o| *o == Outcome::Blocked));
    assert!(direct[6..].iter().all(|o| *o == Outcome::Accessible));
}

#[tokio::test]
async fn unknown_address_is_inconclusive() {
    let targets = roots(&blocked_hosts());
    let mut cfg = config(&targets);
    cfg.host_ip_table.remove(&targets[0].host);
    let cols = run(policy(Generation::Ixp200, &[]), &targets, &cfg).await;
    assert_eq!(cols[&Method::WebDnsPlusHostHeader][0], Outcome::Inconclusive);
    assert_eq!(cols[&Method::WebDnsPlusHostHeader][1], Outcome::Blocked);
}

//! Test-list ingestion and cleaning: collapse per-item URLs into one domain
//! entry, drop duplicates, drop hosts that are offline on a clean path.

use std::collections::HashSet;
use std::future::Future;
use std::io::BufRead;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_target, ModelError, TargetUrl};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no valid entries in target list")]
    EmptyList,
    #[error("reading target list: {0}")]
    Io(#[from] std::io::Error),
    #[error("clean path cannot fetch control url {0}")]
    CleanPathUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedList {
    pub targets: Vec<TargetUrl>,
    pub rejected: Vec<RejectedLine>,
}

/// One URL per line; blank lines and `#` comments are skipped. Malformed
/// lines are collected rather than failing the load.
pub fn load_target_list<R: BufRead>(source: R) -> Result<LoadedList, DatasetError> {
    let mut targets = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_target(trimmed) {
            Ok(t) => targets.push(t),
            Err(ModelError::MalformedUrl(_, why)) => rejected.push(RejectedLine {
                line: i + 1,
                text: trimmed.to_string(),
                reason: why.to_string(),
            }),
            Err(e) => rejected.push(RejectedLine {
                line: i + 1,
                text: trimmed.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    if targets.is_empty() {
        return Err(DatasetError::EmptyList);
    }
    Ok(LoadedList { targets, rejected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalReason {
    CollapsedIntoDomain,
    Duplicate,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removed {
    pub target: TargetUrl,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub initial_count: usize,
    pub after_collapse: usize,
    pub after_dedupe: usize,
    pub after_liveness: usize,
    pub removed: Vec<Removed>,
}

fn host_under(host: &str, base: &str) -> bool {
    host == base || host.ends_with(&format!(".{base}"))
}

/// Replaces every target under a collapse host with a single root entry for
/// that host, placed where the first such target was. Returns the kept list
/// and the removed entries.
pub fn collapse_to_domains_with_removed(
    targets: &[TargetUrl],
    collapse_hosts: &[String],
) -> (Vec<TargetUrl>, Vec<Removed>) {
    let bases: Vec<String> = collapse_hosts
        .iter()
        .map(|h| h.trim().trim_end_matches('.').to_ascii_lowercase())
        .filter(|h| !h.is_empty())
        .collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut kept = Vec::with_capacity(targets.len());
    let mut removed = Vec::new();
    for t in targets {
        match bases.iter().find(|b| host_under(&t.host, b)) {
            None => kept.push(t.clone()),
            Some(base) if seen.insert(base.as_str()) => match TargetUrl::root(base) {
                Ok(root) => kept.push(root),
                Err(_) => kept.push(t.clone()),
            },
            Some(_) => removed.push(Removed { target: t.clone(), reason: RemovalReason::CollapsedIntoDomain }),
        }
    }
    (kept, removed)
}

pub fn collapse_to_domains(targets: &[TargetUrl], collapse_hosts: &[String]) -> Vec<TargetUrl> {
    collapse_to_domains_with_removed(targets, collapse_hosts).0
}

/// Keeps the first occurrence of each (host, path, query).
pub fn dedupe_with_removed(targets: &[TargetUrl]) -> (Vec<TargetUrl>, Vec<Removed>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(targets.len());
    let mut removed = Vec::new();
    for t in targets {
        if seen.insert((t.host.as_str(), t.path.as_str(), t.query.as_deref())) {
            kept.push(t.clone());
        } else {
            removed.push(Removed { target: t.clone(), reason: RemovalReason::Duplicate });
        }
    }
    (kept, removed)
}

pub fn dedupe(targets: &[TargetUrl]) -> Vec<TargetUrl> {
    dedupe_with_removed(targets).0
}

/// Result of one clean-path fetch. HTTP error statuses still count as
/// reachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    Fetched { status: u16 },
    DnsFailure,
    ConnectFailure,
}

impl FetchOutcome {
    pub fn is_alive(self) -> bool {
        matches!(self, FetchOutcome::Fetched { .. })
    }
}

/// An uncensored fetch channel (a VPN egress, or the emulator's clean side).
pub trait CleanPath {
    fn fetch(&self, target: &TargetUrl) -> impl Future<Output = FetchOutcome>;
}

#[derive(Debug, Clone)]
pub struct LivenessOptions {
    pub attempts: usize,
    /// Delay before retry `i` is `backoff[i - 1]` (last value repeats).
    pub backoff: Vec<Duration>,
    pub workers: usize,
    /// Must be fetchable, or the clean path itself is considered down.
    pub control: Option<TargetUrl>,
}

impl Default for LivenessOptions {
    fn default() -> Self {
        LivenessOptions {
            attempts: 3,
            backoff: vec![Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)],
            workers: 8,
            control: None,
        }
    }
}

async fn alive<C: CleanPath>(clean: &C, target: &TargetUrl, opts: &LivenessOptions) -> bool {
    for attempt in 0..opts.attempts.max(1) {
        if attempt > 0 {
            let delay = opts
                .backoff
                .get(attempt - 1)
                .or(opts.backoff.last())
                .copied()
                .unwrap_or_default();
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
        }
        if clean.fetch(target).await.is_alive() {
            return true;
        }
    }
    false
}

/// Drops targets that fail on every attempt through the clean path.
pub async fn liveness_filter<C: CleanPath>(
    targets: &[TargetUrl],
    clean: &C,
    opts: &LivenessOptions,
) -> Result<(Vec<TargetUrl>, CleaningReport), DatasetError> {
    if let Some(control) = &opts.control {
        if !alive(clean, control, opts).await {
            return Err(DatasetError::CleanPathUnavailable(control.render()));
        }
    }
    let verdicts: Vec<bool> = stream::iter(targets)
        .map(|t| alive(clean, t, opts))
        .buffered(opts.workers.max(1))
        .collect()
        .await;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (t, ok) in targets.iter().zip(verdicts) {
        if ok {
            kept.push(t.clone());
        } else {
            removed.push(Removed { target: t.clone(), reason: RemovalReason::Offline });
        }
    }
    let n = targets.len();
    let report = CleaningReport {
        initial_count: n,
        after_collapse: n,
        after_dedupe: n,
        after_liveness: kept.len(),
        removed,
    };
    Ok((kept, report))
}

/// Collapse, then dedupe, then liveness.
pub async fn clean_pipeline<C: CleanPath>(
    targets: &[TargetUrl],
    collapse_hosts: &[String],
    clean: &C,
    opts: &LivenessOptions,
) -> Result<(Vec<TargetUrl>, CleaningReport), DatasetError> {
    let (collapsed, mut removed) = collapse_to_domains_with_removed(targets, collapse_hosts);
    let (unique, dupes) = dedupe_with_removed(&collapsed);
    removed.extend(dupes);
    let (live, liveness) = liveness_filter(&unique, clean, opts).await?;
    removed.extend(liveness.removed);
    let report = CleaningReport {
        initial_count: targets.len(),
        after_collapse: collapsed.len(),
        after_dedupe: unique.len(),
        after_liveness: live.len(),
        removed,
    };
    Ok((live, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn t(s: &str) -> TargetUrl {
        parse_target(s).unwrap()
    }

    #[test]
    fn load_skips_comments_and_blanks() {
        let text = "# list\nhttp://a.com\n\nb.com/x\nhttps://c.com/\n";
        let l = load_target_list(text.as_bytes()).unwrap();
        assert_eq!(l.targets.len(), 3);
        assert!(l.rejected.is_empty());
    }

    #[test]
    fn load_collects_malformed() {
        let text = "a.com\nb.com\nnot a url\nc.com\nd.com\n";
        let l = load_target_list(text.as_bytes()).unwrap();
        assert_eq!(l.targets.len(), 4);
        assert_eq!(l.rejected.len(), 1);
        assert_eq!(l.rejected[0].line, 3);
    }

    #[test]
    fn load_empty_is_error() {
        assert!(matches!(load_target_list("# nothing\n\n".as_bytes()), Err(DatasetError::EmptyList)));
    }

    #[test]
    fn collapse_two_into_one() {
        let list = vec![
            t("youtube.com/watch?v=a"),
            t("www.youtube.com/watch?v=b"),
            t("x.com"),
        ];
        let out = collapse_to_domains(&list, &["youtube.com".into()]);
        assert_eq!(out, vec![t("youtube.com/"), t("x.com")]);
    }

    #[test]
    fn collapse_no_match_is_noop() {
        let list = vec![t("a.com"), t("b.com/p")];
        assert_eq!(collapse_to_domains(&list, &["youtube.com".into()]), list);
        assert_eq!(collapse_to_domains(&list, &[]), list);
    }

    #[test]
    fn dedupe_examples() {
        let list = vec![t("a.com/"), t("a.com/"), t("b.com/")];
        assert_eq!(dedupe(&list), vec![t("a.com/"), t("b.com/")]);
        let unique = vec![t("a.com/"), t("b.com/")];
        assert_eq!(dedupe(&unique), unique);
        // scheme and fragment do not distinguish entries
        assert_eq!(dedupe(&[t("http://a.com/x#1"), t("https://A.com/x")]).len(), 1);
    }

    struct Fixed(HashSet<String>);

    impl CleanPath for Fixed {
        async fn fetch(&self, target: &TargetUrl) -> FetchOutcome {
            if target.host == "http-error.com" {
                FetchOutcome::Fetched { status: 503 }
            } else if self.0.contains(&target.host) {
                FetchOutcome::DnsFailure
            } else {
                FetchOutcome::Fetched { status: 200 }
            }
        }
    }

    fn fast() -> LivenessOptions {
        LivenessOptions { backoff: vec![Duration::ZERO], ..Default::default() }
    }

    #[tokio::test]
    async fn liveness_drops_dead_keeps_http_errors() {
        let list = vec![t("a.com"), t("dead.com"), t("http-error.com")];
        let clean = Fixed(["dead.com".to_string()].into());
        let (kept, report) = liveness_filter(&list, &clean, &fast()).await.unwrap();
        assert_eq!(kept, vec![t("a.com"), t("http-error.com")]);
        assert_eq!(report.removed.len(), 1);
        assert_eq!(report.removed[0].reason, RemovalReason::Offline);
    }

    #[tokio::test]
    async fn liveness_all_alive_unchanged() {
        let list = vec![t("a.com"), t("b.com")];
        let (kept, report) = liveness_filter(&list, &Fixed(HashSet::new()), &fast()).await.unwrap();
        assert_eq!(kept, list);
        assert!(report.removed.is_empty());
    }

    #[tokio::test]
    async fn dead_control_url_means_clean_path_unavailable() {
        let opts = LivenessOptions { control: Some(t("control.test")), ..fast() };
        let clean = Fixed(["control.test".to_string()].into());
        let err = liveness_filter(&[t("a.com")], &clean, &opts).await.unwrap_err();
        assert!(matches!(err, DatasetError::CleanPathUnavailable(_)));
    }

    struct Flaky(std::sync::atomic::AtomicUsize);

    impl CleanPath for Flaky {
        async fn fetch(&self, _: &TargetUrl) -> FetchOutcome {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                FetchOutcome::ConnectFailure
            } else {
                FetchOutcome::Fetched { status: 200 }
            }
        }
    }

    #[tokio::test]
    async fn third_attempt_counts() {
        let clean = Flaky(Default::default());
        let (kept, _) = liveness_filter(&[t("a.com")], &clean, &fast()).await.unwrap();
        assert_eq!(kept.len(), 1);
    }

    fn arb_target() -> impl Strategy<Value = TargetUrl> {
        ("[a-d]", "[a-c]{0,2}", prop::option::of("[x-z]"))
            .prop_map(|(h, p, q)| TargetUrl::new(crate::model::Scheme::Http, &format!("{h}.com"), &format!("/{p}"), q.as_deref()).unwrap())
    }

    proptest! {
        #[test]
        fn dedupe_idempotent(list in prop::collection::vec(arb_target(), 0..40)) {
            let once = dedupe(&list);
            prop_assert_eq!(dedupe(&once), once.clone());
            prop_assert!(once.len() <= list.len());
        }

        #[test]
        fn collapse_counts_add_up(list in prop::collection::vec(arb_target(), 0..40)) {
            let hosts = vec!["a.com".to_string()];
            let (kept, removed) = collapse_to_domains_with_removed(&list, &hosts);
            prop_assert_eq!(kept.len() + removed.len(), list.len());
            prop_assert!(kept.iter().filter(|t| t.host == "a.com").count() <= 1);
        }
    }
}

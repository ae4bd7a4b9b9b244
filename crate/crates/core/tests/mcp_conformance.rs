//! Wire-level checks of the MCP client against the mock server.
//!
//! Goldens live in `tests/golden/`; set `INFOSEEKER_BLESS=1` to rewrite them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use infoseeker::mcp::{args_digest, sentinel_for, FixtureEntry, McpClient, McpError, MockFixture, MockReply, MockToolServer};
use proptest::prelude::*;
use serde_json::{json, Value};

fn manifest_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn fixture() -> MockFixture {
    MockFixture::load(&manifest_path("tests/data/mcp_fixture.json")).unwrap()
}

fn check_golden(name: &str, transcript: &[String]) {
    let text = transcript.join("\n") + "\n";
    let path = manifest_path(&format!("tests/golden/{name}"));
    if std::env::var_os("INFOSEEKER_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, golden, "transcript differs from {name}");
}

#[tokio::test]
async fn handshake_transcript_is_bit_exact() {
    let server = MockToolServer::new(fixture());
    let client = McpClient::initialize(server.connect()).await.unwrap();
    assert_eq!(client.summary().server_name, "mock-conformance");
    assert_eq!(client.cached_tools().len(), 2);
    check_golden("mcp_handshake.txt", &client.transcript());
}

#[tokio::test]
async fn list_and_call_transcript_is_bit_exact() {
    let server = MockToolServer::new(fixture());
    let client = McpClient::initialize(server.connect()).await.unwrap();
    let tools = client.list_tools().await.unwrap();
    assert_eq!(tools.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["web_search", "fetch_page"]);

    let hit = client.call_tool("web_search", json!({"query": "tidal power stations"})).await.unwrap();
    assert!(!hit.is_error);
    assert!(hit.payload.starts_with("Sihwa Lake"));
    let miss = client.call_tool("web_search", json!({"query": "nothing"})).await.unwrap();
    assert!(miss.payload.starts_with("no results"));
    let first = client.call_tool("fetch_page", json!({"url": "https://flaky.example"})).await.unwrap();
    let second = client.call_tool("fetch_page", json!({"url": "https://flaky.example"})).await.unwrap();
    assert!(first.is_error && !second.is_error);
    let rpc = client.call_tool("fetch_page", json!({"url": "https://broken.example"})).await.unwrap();
    assert!(rpc.is_error);
    assert!(matches!(
        client.call_tool("shell", json!({})).await,
        Err(McpError::UnknownTool(name)) if name == "shell"
    ));
    check_golden("mcp_session.txt", &client.transcript());
}

/// Extracts `(direction, id)` for every framed message carrying an id.
fn ids(transcript: &[String]) -> Vec<(&'static str, u64)> {
    transcript
        .iter()
        .filter_map(|line| {
            let (dir, body) = if let Some(b) = line.strip_prefix("-> ") {
                ("out", b)
            } else {
                ("in", line.strip_prefix("<- ")?)
            };
            let v: Value = serde_json::from_str(body).ok()?;
            Some((dir, v.get("id")?.as_u64()?))
        })
        .collect()
}

fn stress_fixture(n: usize) -> MockFixture {
    let mut f = fixture();
    f.responses = (0..n)
        .map(|i| FixtureEntry {
            tool: "web_search".into(),
            arguments: Some(json!({"query": format!("q{i}")})),
            digest: None,
            results: vec![MockReply::Text(format!("reply-{i}"))],
        })
        .collect();
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn concurrent_calls_keep_id_pairing(order in Just((0..48usize).collect::<Vec<_>>()).prop_shuffle(), n in 16usize..48) {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
        rt.block_on(async move {
            let server = MockToolServer::new(stress_fixture(n));
            let client = Arc::new(McpClient::initialize(server.connect()).await.unwrap());
            let queue: Vec<usize> = order.into_iter().filter(|i| *i < n).collect();
            let queue = Arc::new(std::sync::Mutex::new(queue));
            let mut set = tokio::task::JoinSet::new();
            for _ in 0..16 {
                let (client, queue) = (client.clone(), queue.clone());
                set.spawn(async move {
                    let mut got = Vec::new();
                    loop {
                        let next = queue.lock().unwrap().pop();
                        let Some(i) = next else { break };
                        let args = json!({"query": format!("q{i}")});
                        let r = client.call_tool("web_search", args.clone()).await.unwrap();
                        got.push((i, r.payload, args));
                    }
                    got
                });
            }
            let mut seen = 0;
            while let Some(res) = set.join_next().await {
                for (i, payload, args) in res.unwrap() {
                    seen += 1;
                    let sentinel = sentinel_for("web_search", &args_digest(&args), 0);
                    assert_eq!(payload, format!("reply-{i}\n{sentinel}"));
                }
            }
            assert_eq!(seen, n);

            let t = client.transcript();
            let pairs = ids(&t);
            let mut out: BTreeMap<u64, usize> = BTreeMap::new();
            let mut inn: BTreeMap<u64, usize> = BTreeMap::new();
            for (dir, id) in &pairs {
                let m = if *dir == "out" { &mut out } else { &mut inn };
                *m.entry(*id).or_default() += 1;
            }
            // Ids are 1.. without gaps, each sent once and answered once,
            // and no reply precedes its request.
            let total = n as u64 + 2;
            assert_eq!(out.keys().copied().collect::<Vec<_>>(), (1..=total).collect::<Vec<_>>());
            assert!(out.values().all(|c| *c == 1));
            assert_eq!(out, inn);
            for (pos, (dir, id)) in pairs.iter().enumerate() {
                if *dir == "in" {
                    assert!(pairs[..pos].contains(&("out", *id)), "reply {id} before request");
                }
            }
            assert_eq!(server.call_count(), n);
        });
    }
}

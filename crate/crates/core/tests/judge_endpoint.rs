//! Judge client against a local mock chat-completion server.

mod common;

use common::{chat, client, serve};
use speechlm::judge::{render_judge_prompt, JudgeRequest};
use speechlm::Error;

#[test]
fn golden_prompt_is_byte_stable() {
    let golden = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/judge_prompt_a_b.txt")).unwrap();
    assert_eq!(render_judge_prompt("a", "b").as_bytes(), golden.as_slice());
    let empty = render_judge_prompt("a", "");
    assert!(empty.ends_with("Completion: "));
}

#[test]
fn score_is_parsed_and_cached() {
    let mock = serve(vec![chat("7")]);
    let cache = tempfile::tempdir().unwrap();
    let c = client(&mock, Some(cache.path()));
    let req = JudgeRequest::new("the dog runs", "the cat sleeps", "judge-model");
    let first = c.judge(&req).unwrap();
    assert_eq!((first.score, first.cached), (7, false));
    assert_eq!(mock.hits(), 1);
    let sent = mock.requests.lock().unwrap()[0].clone();
    assert_eq!(sent["temperature"], 0.0);
    assert_eq!(sent["model"], "judge-model");
    assert_eq!(sent["messages"][0]["content"], req.prompt());
    let second = c.judge(&req).unwrap();
    assert_eq!((second.score, second.cached), (7, true));
    assert_eq!(second.digest, first.digest);
    assert_eq!(mock.hits(), 1, "cache hit must not touch the network");
}

#[test]
fn non_integer_reply_is_a_parse_error() {
    let mock = serve(vec![chat("seven"), chat("seven")]);
    let cache = tempfile::tempdir().unwrap();
    let c = client(&mock, Some(cache.path()));
    let req = JudgeRequest::new("a", "b", "judge-model");
    match c.judge(&req) {
        Err(Error::JudgeParse { raw }) => assert_eq!(raw, "seven"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    // invalid replies are not cached
    assert!(c.judge(&req).is_err());
    assert_eq!(mock.hits(), 2);
}

#[test]
fn out_of_range_reply_is_a_range_error() {
    let mock = serve(vec![chat("11")]);
    let c = client(&mock, None);
    match c.judge(&JudgeRequest::new("a", "b", "judge-model")) {
        Err(Error::JudgeRange { score, .. }) => assert_eq!(score, 11),
        other => panic!("expected a range error, got {other:?}"),
    }
}

#[test]
fn transient_failures_are_retried() {
    let mock = serve(vec![(503, "busy".into()), (429, "slow down".into()), chat(" 5\n")]);
    let c = client(&mock, None);
    let s = c.judge(&JudgeRequest::new("a", "b", "judge-model")).unwrap();
    assert_eq!(s.score, 5);
    assert_eq!(mock.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = serve(vec![(401, "no key".into()), chat("5")]);
    let c = client(&mock, None);
    let err = c.judge(&JudgeRequest::new("a", "b", "judge-model")).unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
    assert_eq!(mock.hits(), 1);
}

#[test]
fn retries_are_bounded() {
    let mock = serve(vec![]);
    let c = client(&mock, None);
    assert!(c.judge(&JudgeRequest::new("a", "b", "judge-model")).is_err());
    assert_eq!(mock.hits(), 3);
}

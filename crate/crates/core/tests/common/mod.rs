//! Local mock chat-completion server shared by the judge tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;
use speechlm::judge::{JudgeClient, JudgeConfig};

pub struct Mock {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Value>>>,
}

impl Mock {
    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

pub fn chat(content: &str) -> (u16, String) {
    let body = serde_json::json!({
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": content } }]
    });
    (200, body.to_string())
}

/// Serves the scripted responses in order, one per connection, then 500s.
pub fn serve(script: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    thread::spawn(move || {
        let mut script = script.into_iter();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some((k, v)) = l.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(Value::Null));
            let (status, text) = script.next().unwrap_or((500, "script exhausted".into()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Mock { url, requests }
}

pub fn client(mock: &Mock, cache: Option<&std::path::Path>) -> JudgeClient {
    let mut c = JudgeConfig::new(&mock.url, "judge-model");
    c.backoff_ms = 1;
    c.max_retries = 2;
    c.timeout_secs = 10;
    c.cache_dir = cache.map(|p| p.to_path_buf());
    JudgeClient::new(c)
}

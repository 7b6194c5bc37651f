//! Minimal HTTP/1.1 stand-in for the embedding service.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json(status: u16, v: &Value) -> Self {
        Reply {
            status,
            body: v.to_string(),
        }
    }
}

pub struct Double {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

/// Serves `handler(method, path, body)` on a random local port until the
/// test process exits. Every connection is closed after one reply.
pub fn serve<F>(handler: F) -> Double
where
    F: Fn(&str, &str, &str, usize) -> Reply + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let mut parts = request_line.split_whitespace();
            let method = parts.next().unwrap_or("").to_string();
            let path = parts.next().unwrap_or("").to_string();
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let reply = handler(&method, &path, &String::from_utf8_lossy(&body), n);
            let head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                reply.status,
                reply.body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.body.as_bytes());
            let _ = stream.flush();
        }
    });
    Double { url, hits }
}

/// A well-behaved service: one subword per word except words listed in
/// `split` (word, pieces). Row `i` is filled with `i + 1`; cls with 0.5.
pub fn echo_service(d: usize, model_id: &'static str, split: Vec<(String, usize)>) -> Double {
    serve(move |method, path, body, _| match (method, path) {
        ("GET", "/health") => Reply::json(200, &json!({"status": "ok", "model_id": model_id, "d": d})),
        ("POST", "/embed") => {
            let req: Value = serde_json::from_str(body).unwrap();
            let tokens = req["tokens"].as_array().cloned().unwrap_or_default();
            if tokens.is_empty() {
                return Reply::json(400, &json!({"error": "empty input"}));
            }
            let mut groups = Vec::new();
            let mut next = 0usize;
            for t in &tokens {
                let k = split
                    .iter()
                    .find(|(w, _)| Some(w.as_str()) == t.as_str())
                    .map_or(1, |(_, k)| *k);
                groups.push((next..next + k).collect::<Vec<_>>());
                next += k;
            }
            let rows: Vec<Vec<f64>> = (0..next).map(|i| vec![(i + 1) as f64; d]).collect();
            Reply::json(
                200,
                &json!({
                    "d": d,
                    "cls": vec![0.5; d],
                    "subword_states": rows,
                    "word_to_subwords": groups,
                    "model_id": model_id,
                }),
            )
        }
        _ => Reply::json(404, &json!({"error": "not found"})),
    })
}

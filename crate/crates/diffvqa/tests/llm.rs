use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use diffvqa::llm::{llm_extract_keyword, with_env_override, ENDPOINT_ENV};
use diffvqa_core::keyword::{KeywordLexicon, LlmClientConfig};

/// Serves `replies` to successive connections and forwards each request
/// body.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            tx.send(String::from_utf8(req).unwrap()).unwrap();
            let mut s = stream;
            let _ = write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (addr, rx)
}

fn cfg(endpoint: &str) -> LlmClientConfig {
    LlmClientConfig {
        endpoint: endpoint.to_string(),
        timeout_secs: 2.0,
        retries: 0,
        ..LlmClientConfig::default()
    }
}

#[test]
fn reply_is_normalized() {
    let lex = KeywordLexicon::synthetic();
    let (url, rx) = serve(vec![(200, r#"{"response":"Effusion."}"#.into())]);
    let k = llm_extract_keyword("the nodule in the left upper zone has enlarged", &cfg(&url), &lex).unwrap();
    assert_eq!(k, "effusion");
    let body: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(body["model"], "llama3:70b");
    assert_eq!(body["stream"], false);
    assert!(body["prompt"].as_str().unwrap().ends_with("Answer: the nodule in the left upper zone has enlarged"));
}

#[test]
fn failures_fall_back_to_the_lexicon() {
    let lex = KeywordLexicon::synthetic();
    let answer = "the nodule in the left upper zone has enlarged";
    // unusable reply
    let (url, _rx) = serve(vec![(200, r#"{"response":"..."}"#.into())]);
    assert_eq!(llm_extract_keyword(answer, &cfg(&url), &lex).unwrap(), "nodule");
    // wrong schema
    let (url, _rx) = serve(vec![(200, r#"{"text":"effusion"}"#.into())]);
    assert_eq!(llm_extract_keyword(answer, &cfg(&url), &lex).unwrap(), "nodule");
    // server error, then success on the retry
    let (url, _rx) = serve(vec![(500, "{}".into()), (200, r#"{"response":"opacity"}"#.into())]);
    let retry = LlmClientConfig { retries: 1, ..cfg(&url) };
    assert_eq!(llm_extract_keyword(answer, &retry, &lex).unwrap(), "opacity");
    // nothing listening
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let down = LlmClientConfig { retries: 2, ..cfg(&format!("http://127.0.0.1:{port}")) };
    assert_eq!(llm_extract_keyword(answer, &down, &lex).unwrap(), "nodule");
    assert!(llm_extract_keyword("", &down, &lex).is_err());
}

#[test]
fn slow_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let held: Vec<_> = listener.incoming().take(2).collect();
        thread::sleep(Duration::from_secs(5));
        drop(held);
    });
    let c = LlmClientConfig {
        timeout_secs: 0.3,
        retries: 1,
        ..cfg(&url)
    };
    let t = Instant::now();
    let k = llm_extract_keyword("a new opacity has appeared", &c, &KeywordLexicon::synthetic()).unwrap();
    assert_eq!(k, "opacity");
    // timeout x (retries + 1) plus slack
    assert!(t.elapsed() < Duration::from_secs_f64(0.6 + 1.0));
}

#[test]
fn endpoint_can_be_overridden_from_the_environment() {
    let base = LlmClientConfig::default();
    std::env::set_var(ENDPOINT_ENV, "http://example.invalid:9");
    let c = with_env_override(&base);
    std::env::remove_var(ENDPOINT_ENV);
    assert_eq!(c.endpoint, "http://example.invalid:9");
    assert_eq!(c.url(), "http://example.invalid:9/api/generate");
    assert_eq!(with_env_override(&base), base);
}

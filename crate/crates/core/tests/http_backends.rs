use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use stereoprobe::corpus::{default_templates, expand_sentences, Descriptor, DescriptorSource, Gender, NameEntry};
use stereoprobe::genharness::{generate_profiles, ChatBackend, GenParams, HttpChatBackend, ProfileCache};
use stereoprobe::scoring::{
    score_corpus, BackendError, HttpCompletionsBackend, RetryPolicy, ScoreCache, ScoreOptions, ScoreOutcome,
    ScoringBackend, ScoringError,
};

struct Recorded {
    headers: Vec<String>,
    body: Value,
}

/// Serves one scripted response per connection, in order, repeating the
/// last one once the script runs out.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        let mut n = 0;
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let (status, body) = script[n.min(script.len() - 1)].clone();
            n += 1;
            handle(stream, status, &body, &log);
        }
    });
    (format!("http://{addr}/v1/completions"), seen)
}

fn handle(mut stream: TcpStream, status: u16, body: &str, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = Vec::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            return;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut buf = vec![0; len];
    reader.read_exact(&mut buf).unwrap();
    log.lock().unwrap().push(Recorded {
        headers,
        body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
    });
    let reason = if status == 200 { "OK" } else { "Error" };
    let resp = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(resp.as_bytes()).unwrap();
}

fn completion(tokens: &[&str], lps: &[Option<f64>]) -> String {
    json!({"choices": [{"text": "", "logprobs": {"tokens": tokens, "token_logprobs": lps}}]}).to_string()
}

fn sentences() -> Vec<stereoprobe::corpus::Sentence> {
    let names = vec![NameEntry::new("Kazuyo", "Japanese", Gender::F).unwrap()];
    let ds = vec![Descriptor {
        text: "shy".into(),
        source: DescriptorSource::Other,
        axis: None,
        gold_group: None,
    }];
    let ts = vec![default_templates().remove(0)];
    expand_sentences(&names, &ds, &ts).unwrap().collect()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_delay_ms: 1,
        max_delay_ms: 5,
    }
}

#[test]
fn completions_request_shape_and_auth() {
    let body = completion(&["Kaz", "uyo", " is", " shy."], &[None, Some(-2.0), Some(-0.5), Some(-1.0)]);
    let (url, seen) = serve(vec![(200, body)]);
    std::env::set_var("STEREOPROBE_TEST_TOKEN_A", "secret-a");
    let backend = HttpCompletionsBackend::new(url, "toy-lm", Some("STEREOPROBE_TEST_TOKEN_A".into()), Duration::from_secs(5));
    let s = &sentences()[0];
    let scores = backend.score(s).unwrap();
    assert_eq!(scores.logprobs, vec![-2.0, -0.5, -1.0]);
    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.body["model"], "toy-lm");
    assert_eq!(req.body["prompt"], "Kazuyo is shy.");
    assert_eq!(req.body["echo"], true);
    assert_eq!(req.body["max_tokens"], 0);
    assert!(req.headers.iter().any(|h| h == "Authorization: Bearer secret-a" || h == "authorization: Bearer secret-a"));
}

#[test]
fn transient_errors_are_retried() {
    let ok = completion(&["a", "b"], &[None, Some(-(2.0f64).ln())]);
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, ok)]);
    let backend = HttpCompletionsBackend::new(url, "toy-lm", None, Duration::from_secs(5));
    let opts = ScoreOptions {
        retry: fast_retry(),
        ..Default::default()
    };
    let mut out = Vec::new();
    let stats = score_corpus(&backend, sentences(), &ScoreCache::in_memory(), &opts, |o| {
        out.push(o);
        Ok(())
    })
    .unwrap();
    assert_eq!(stats.scored, 1);
    assert_eq!(seen.lock().unwrap().len(), 3);
    let ScoreOutcome::Scored { scored, .. } = &out[0] else { panic!() };
    assert!((scored.ppl - 2.0).abs() < 1e-12);
}

#[test]
fn exhausted_retries_mark_the_sentence_failed() {
    let (url, _) = serve(vec![(500, "{}".into())]);
    let backend = HttpCompletionsBackend::new(url, "toy-lm", None, Duration::from_secs(5));
    let opts = ScoreOptions {
        retry: fast_retry(),
        ..Default::default()
    };
    let stats = score_corpus(&backend, sentences(), &ScoreCache::in_memory(), &opts, |_| Ok(())).unwrap();
    assert_eq!(stats.failed, 1);
    assert_eq!(backend.request_count(), 4);
}

#[test]
fn refusing_echo_aborts_the_run() {
    let (url, _) = serve(vec![(200, json!({"choices": [{"text": "x"}]}).to_string())]);
    let backend = HttpCompletionsBackend::new(url, "chat-only", None, Duration::from_secs(5));
    let err = score_corpus(&backend, sentences(), &ScoreCache::in_memory(), &ScoreOptions::default(), |_| Ok(()));
    assert!(matches!(err, Err(ScoringError::Fatal(BackendError::Refused(_)))));
}

#[test]
fn missing_token_variable_is_refused() {
    let backend = HttpCompletionsBackend::new(
        "http://127.0.0.1:9/v1/completions",
        "toy-lm",
        Some("STEREOPROBE_TEST_TOKEN_UNSET".into()),
        Duration::from_secs(1),
    );
    assert!(matches!(backend.score(&sentences()[0]), Err(BackendError::Refused(_))));
    assert_eq!(backend.request_count(), 0);
}

#[test]
fn chat_backend_generates_and_caches() {
    let content = json!([{
        "name": "Kazuyo", "age": 45,
        "personality_traits": ["Calm", "Wise", "Observant"],
        "negative_traits": ["Perfectionist", "Indecisive", "Shy"],
        "hobbies": ["Bonsai gardening", "Origami", "Tea ceremonies"],
        "occupation": "Librarian",
        "physical_characteristics": {"height": "5.2 ft", "hair_colour": "Black", "eye_colour": "Brown",
            "skin_colour": "Light", "build": "Petite"},
        "special_move": "Crane", "socioeconomic_status": "Middle class",
        "sexual_orientation": "Asexual", "religion": "Shinto"
    }])
    .to_string();
    let body = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
    let (url, seen) = serve(vec![(200, body)]);
    let backend = HttpChatBackend::new(url, "toy-chat", None, Duration::from_secs(5));
    let cache = ProfileCache::in_memory();
    let params = GenParams {
        repeats: 2,
        retry: fast_retry(),
        ..Default::default()
    };
    let (_, stats) = generate_profiles(&backend, &["Kazuyo"], &params, &cache).unwrap();
    assert_eq!(stats.profiles, 2);
    assert_eq!(stats.malformed, 0);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].body["temperature"], 1.0);
        assert_eq!(seen[0].body["messages"][0]["role"], "user");
        assert!(seen[0].body["messages"][0]["content"].as_str().unwrap().contains("named:\nKazuyo\n"));
    }
    generate_profiles(&backend, &["Kazuyo"], &params, &cache).unwrap();
    assert_eq!(backend.request_count(), 2);
}

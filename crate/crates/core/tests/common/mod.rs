//! Independent reference implementations and synthetic data for the
//! integration tests. The oracles never call into the library under test.

#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

/// Minimal store reader: header then `[u16 len][id][dim x f32]` records.
pub fn read_store(bytes: &[u8]) -> (usize, Vec<(String, Vec<f32>)>) {
    assert_eq!(&bytes[..4], b"VWSE");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let mut pos = 18;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        let id = String::from_utf8(bytes[pos..pos + len].to_vec()).unwrap();
        pos += len;
        let v = (0..dim)
            .map(|i| f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()))
            .collect();
        pos += 4 * dim;
        out.push((id, v));
    }
    assert_eq!(pos, bytes.len());
    (dim, out)
}

pub fn read_store_map(path: &Path) -> HashMap<String, Vec<f32>> {
    read_store(&fs::read(path).unwrap()).1.into_iter().collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f32]) -> Vec<f64> {
    let w: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let n = dot(&w, &w).sqrt();
    w.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    dot(&unit(a), &unit(b))
}

pub fn softmax(xs: &[f64], scale: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) * scale).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Full sort of the corpus by cosine (descending), ties by position.
pub fn naive_top_k(corpus: &[(String, Vec<f32>)], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let units: Vec<Vec<f64>> = corpus.iter().map(|(_, v)| unit(v)).collect();
    naive_top_k_units(corpus, &units, query, k)
}

/// As [`naive_top_k`] with the corpus already normalized (`units[i]` belongs
/// to `corpus[i]`).
pub fn naive_top_k_units(
    corpus: &[(String, Vec<f32>)],
    units: &[Vec<f64>],
    query: &[f32],
    k: usize,
) -> Vec<(String, f64)> {
    let q = unit(query);
    let mut scored: Vec<(usize, f64)> = units.iter().map(|u| dot(&q, u)).enumerate().collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (corpus[i].0.clone(), s))
        .collect()
}

/// 1-based position of `gold` when candidates are sorted by descending
/// probability with ties kept in index order.
pub fn gold_rank(probs: &[f64], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    order.iter().position(|&i| i == gold).unwrap() + 1
}

pub struct OracleSample {
    pub id: String,
    pub synset: Option<String>,
    pub prompt: String,
    pub retrieved: Vec<(String, f64)>,
    pub average_rank: usize,
    pub context_only_rank: usize,
}

/// Recomputes every stage of the toy fixture from the raw files.
pub fn toy_oracle(k: usize, scale: f64) -> Vec<OracleSample> {
    let dir = fixture_dir();
    let data = fs::read_to_string(dir.join("data.tsv")).unwrap();
    let gold: Vec<String> = fs::read_to_string(dir.join("gold.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let inventory: Vec<serde_json::Value> = fs::read_to_string(dir.join("inventory.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let contexts = read_store_map(&dir.join("contexts.vwse"));
    let glosses = read_store_map(&dir.join("glosses.vwse"));
    let prompts = read_store_map(&dir.join("prompts.vwse"));
    let candidates = read_store_map(&dir.join("candidates.vwse"));
    let corpus = read_store(&fs::read(dir.join("corpus.vwse")).unwrap()).1;
    let corpus_map: HashMap<_, _> = corpus.iter().cloned().collect();

    data.lines()
        .enumerate()
        .map(|(row, line)| {
            let id = format!("{:06}", row + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            let (target, context) = (cols[0], cols[1]);
            let key = target.to_lowercase().replace(' ', "_");
            let senses: Vec<&serde_json::Value> = inventory
                .iter()
                .filter(|e| e["lemma"].as_str().unwrap().to_lowercase().replace(' ', "_") == key)
                .collect();
            let mut best: Option<(&serde_json::Value, f64)> = None;
            for s in &senses {
                let g = &glosses[s["synset_id"].as_str().unwrap()];
                let c = cosine(&contexts[&id], g);
                if best.map_or(true, |(_, b)| c > b) {
                    best = Some((s, c));
                }
            }
            let prompt = match best {
                None => format!("This is a picture of {context}"),
                Some((s, _)) => {
                    let syn: Vec<&str> = s["synonyms"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|x| x.as_str().unwrap())
                        .filter(|x| *x != target && *x != target.replace(' ', "_"))
                        .collect();
                    let also = if syn.is_empty() {
                        String::new()
                    } else {
                        format!(", also known as {}", syn.join(", "))
                    };
                    format!(
                        "This is a picture of {context}{also}, where {target} refers to {}.",
                        s["gloss"].as_str().unwrap()
                    )
                }
            };
            let q = &prompts[&id];
            let retrieved = naive_top_k(&corpus, q, k);
            let mut sources: Vec<Vec<f64>> = vec![unit(q)];
            for (rid, _) in retrieved.iter().take(3) {
                sources.push(unit(&corpus_map[rid]));
            }
            while sources.len() < 4 {
                sources.push(sources.last().unwrap().clone());
            }
            let cands: Vec<Vec<f64>> = cols[2..].iter().map(|c| unit(&candidates[*c])).collect();
            let dists: Vec<Vec<f64>> = sources
                .iter()
                .map(|s| softmax(&cands.iter().map(|c| dot(s, c)).collect::<Vec<_>>(), scale))
                .collect();
            let avg: Vec<f64> = (0..cands.len())
                .map(|j| dists.iter().map(|d| d[j]).sum::<f64>() / 4.0)
                .collect();
            let g = cols[2..].iter().position(|c| *c == gold[row]).unwrap();
            OracleSample {
                id,
                synset: best.map(|(s, _)| s["synset_id"].as_str().unwrap().to_string()),
                prompt,
                retrieved,
                average_rank: gold_rank(&avg, g),
                context_only_rank: gold_rank(&dists[0], g),
            }
        })
        .collect()
}

/// Copies the toy fixture into a fresh temporary directory.
pub fn copy_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture_dir()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

/// Appends `key = value` lines to the copied configuration.
pub fn extend_config(dir: &Path, lines: &str) -> PathBuf {
    let path = dir.join("toy.conf");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str(lines);
    fs::write(&path, text).unwrap();
    path
}

pub mod http {
    //! Tiny embedding service for provider tests.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread;

    pub fn text_vector(text: &str, dim: usize) -> Vec<f32> {
        let mut h: u64 = 1469598103934665603;
        for b in text.bytes() {
            h = (h ^ b as u64).wrapping_mul(1099511628211);
        }
        (0..dim)
            .map(|i| {
                let x = h.rotate_left((i * 7) as u32) % 1000;
                x as f32 / 500.0 - 1.0 + 0.01
            })
            .collect()
    }

    pub struct Server {
        pub url: String,
        pub requests: Arc<AtomicUsize>,
    }

    /// Serves `POST /embed`; `status` decides the HTTP status per request.
    pub fn serve(dim: usize, status: fn(usize) -> u16) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let code = status(n);
                let reply = if code == 200 {
                    let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let vecs: Vec<Vec<f32>> = req["texts"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|t| text_vector(t.as_str().unwrap(), dim))
                        .collect();
                    serde_json::json!({"dim": dim, "embeddings": vecs}).to_string()
                } else {
                    "{}".to_string()
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {code} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Server { url, requests }
    }
}

pub fn random_vec(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Vec<f32> {
    use rand::Rng;
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Separable task: the gold candidate is the context plus small noise,
/// distractors are orthogonal to the context, retrieved images are noise.
pub fn separable_task(
    n: usize,
    dim: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<vwsd_core::fusion::FusionInput> {
    (0..n)
        .map(|_| {
            let ctx = unit(&random_vec(rng, dim));
            let gold = rand::Rng::random_range(rng, 0..10);
            let cands: Vec<Vec<f32>> = (0..10)
                .map(|j| {
                    let r: Vec<f64> = random_vec(rng, dim).iter().map(|&x| x as f64).collect();
                    if j == gold {
                        ctx.iter().zip(&r).map(|(c, e)| (c + 0.05 * e) as f32).collect()
                    } else {
                        let along = dot(&r, &ctx);
                        r.iter().zip(&ctx).map(|(e, c)| (e - along * c) as f32).collect()
                    }
                })
                .collect();
            let retrieved: Vec<Vec<f32>> = (0..3).map(|_| random_vec(rng, dim)).collect();
            let ctx32: Vec<f32> = ctx.iter().map(|&x| x as f32).collect();
            vwsd_core::fusion::FusionInput::new(&ctx32, &retrieved, &cands, Some(gold)).unwrap()
        })
        .collect()
}


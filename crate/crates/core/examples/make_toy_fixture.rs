//! Writes the toy fixture: 20 samples, 8-dimensional embeddings, a small
//! sense inventory and a 200-image corpus.
//!
//! Usage: `cargo run --example make_toy_fixture -- <output dir>`

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vwsd_core::store::EmbeddingStore;

const DIM: usize = 8;
const CORPUS: usize = 200;

struct Sense {
    lemma: &'static str,
    synset_id: &'static str,
    gloss: &'static str,
    synonyms: &'static [&'static str],
}

const SENSES: &[Sense] = &[
    Sense {
        lemma: "biro",
        synset_id: "ballpoint.n.01",
        gloss: "a pen that has a small metal ball as the point of transfer of ink to paper",
        synonyms: &["ballpoint", "ballpoint_pen", "ballpen", "Biro"],
    },
    Sense {
        lemma: "bank",
        synset_id: "bank.n.01",
        gloss: "sloping land (especially the slope beside a body of water)",
        synonyms: &["bank"],
    },
    Sense {
        lemma: "bank",
        synset_id: "depository_financial_institution.n.01",
        gloss: "a financial institution that accepts deposits and channels the money into lending activities",
        synonyms: &["depository_financial_institution", "bank", "banking_concern", "banking_company"],
    },
    Sense {
        lemma: "bass",
        synset_id: "bass.n.07",
        gloss: "the member with the lowest range of a family of musical instruments",
        synonyms: &["bass"],
    },
    Sense {
        lemma: "bass",
        synset_id: "sea_bass.n.01",
        gloss: "the lean flesh of a saltwater fish of the family Serranidae",
        synonyms: &["sea_bass", "bass"],
    },
    Sense {
        lemma: "bass",
        synset_id: "bass.n.08",
        gloss: "nontechnical name for any of numerous edible marine and freshwater spiny-finned fishes",
        synonyms: &["bass"],
    },
    Sense {
        lemma: "crane",
        synset_id: "crane.n.04",
        gloss: "lifts and moves heavy objects; lifting tackle is suspended from a pivoted boom",
        synonyms: &["crane"],
    },
    Sense {
        lemma: "crane",
        synset_id: "crane.n.05",
        gloss: "large long-necked wading bird of marshes and plains in many parts of the world",
        synonyms: &["crane"],
    },
    Sense {
        lemma: "crane",
        synset_id: "crane.n.01",
        gloss: "United States writer (1871-1900)",
        synonyms: &["Crane", "Stephen_Crane"],
    },
    Sense {
        lemma: "crane",
        synset_id: "crane.n.02",
        gloss: "United States poet (1899-1932)",
        synonyms: &["Crane", "Hart_Crane", "Harold_Hart_Crane"],
    },
    Sense {
        lemma: "crane",
        synset_id: "grus.n.01",
        gloss: "a small constellation in the southern hemisphere near Phoenix",
        synonyms: &["Grus", "Crane"],
    },
    Sense {
        lemma: "oak",
        synset_id: "oak.n.02",
        gloss: "a deciduous tree of the genus Quercus; has acorns and lobed leaves",
        synonyms: &["oak", "oak_tree"],
    },
    Sense {
        lemma: "mouse",
        synset_id: "mouse.n.01",
        gloss: "any of numerous small rodents typically resembling diminutive rats",
        synonyms: &["mouse"],
    },
    Sense {
        lemma: "mouse",
        synset_id: "mouse.n.04",
        gloss: "a hand-operated electronic device that controls the coordinates of a cursor",
        synonyms: &["mouse", "computer_mouse"],
    },
    Sense {
        lemma: "sea bream",
        synset_id: "sea_bream.n.01",
        gloss: "flesh of any of various saltwater fishes of the family Sparidae",
        synonyms: &["sea_bream", "bream"],
    },
];

/// (target, context, intended synset id; `None` when the lemma is absent
/// from the inventory).
const SAMPLES: &[(&str, &str, Option<&str>)] = &[
    ("biro", "biro pen", Some("ballpoint.n.01")),
    ("bank", "river bank", Some("bank.n.01")),
    ("bank", "bank account", Some("depository_financial_institution.n.01")),
    ("bass", "bass guitar", Some("bass.n.07")),
    ("bass", "grilled bass", Some("sea_bass.n.01")),
    ("crane", "crane bird", Some("crane.n.05")),
    ("crane", "construction crane", Some("crane.n.04")),
    ("oak", "oak tree", Some("oak.n.02")),
    ("mouse", "computer mouse", Some("mouse.n.04")),
    ("mouse", "field mouse", Some("mouse.n.01")),
    ("andromeda", "andromeda tree", None),
    ("biro", "blue biro", Some("ballpoint.n.01")),
    ("bank", "bank loan", Some("depository_financial_institution.n.01")),
    ("bass", "striped bass", Some("bass.n.08")),
    ("crane", "crane constellation", Some("grus.n.01")),
    ("sea bream", "sea bream fillet", Some("sea_bream.n.01")),
    ("jaguar", "jaguar car", None),
    ("oak", "oak leaves", Some("oak.n.02")),
    ("mouse", "mouse trap", Some("mouse.n.01")),
    ("crane", "paper crane", Some("crane.n.05")),
];

fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn noisy(base: &[f64], amount: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    base.iter()
        .map(|&x| (x + amount * rng.random_range(-1.0..1.0)) as f32)
        .collect()
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/toy".into()));
    fs::create_dir_all(&out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2023);

    // Separate latent concepts for the gloss-matching space and the
    // image-text space.
    let text_concept: Vec<Vec<f64>> = SENSES.iter().map(|_| unit(&mut rng)).collect();
    let image_concept: Vec<Vec<f64>> = SENSES.iter().map(|_| unit(&mut rng)).collect();
    let sense_index = |id: &str| SENSES.iter().position(|s| s.synset_id == id).unwrap();

    let mut inventory = String::from("# toy sense inventory\n");
    let mut glosses = EmbeddingStore::new(DIM).unwrap();
    for (s, c) in SENSES.iter().zip(&text_concept) {
        let line = serde_json::json!({
            "lemma": s.lemma,
            "synset_id": s.synset_id,
            "gloss": s.gloss,
            "synonyms": s.synonyms,
        });
        inventory.push_str(&format!("{line}\n"));
        glosses.insert(s.synset_id, &noisy(c, 0.15, &mut rng)).unwrap();
    }

    let mut corpus = EmbeddingStore::new(DIM).unwrap();
    let mut slots: Vec<Option<usize>> = (0..CORPUS)
        .map(|i| (i < SENSES.len() * 8).then_some(i % SENSES.len()))
        .collect();
    slots.shuffle(&mut rng);
    for (i, slot) in slots.iter().enumerate() {
        let v = match slot {
            Some(s) => noisy(&image_concept[*s], 0.45, &mut rng),
            None => noisy(&unit(&mut rng), 0.0, &mut rng),
        };
        corpus.insert(format!("laion{i:04}"), &v).unwrap();
    }

    let mut contexts = EmbeddingStore::new(DIM).unwrap();
    let mut prompts = EmbeddingStore::new(DIM).unwrap();
    let mut candidates = EmbeddingStore::new(DIM).unwrap();
    let mut data = String::new();
    let mut gold = String::new();
    for (row, (target, context, sense)) in SAMPLES.iter().enumerate() {
        let id = format!("{:06}", row + 1);
        let (text, image) = match sense {
            Some(s) => {
                let i = sense_index(s);
                (text_concept[i].clone(), image_concept[i].clone())
            }
            None => (unit(&mut rng), unit(&mut rng)),
        };
        contexts.insert(id.clone(), &noisy(&text, 0.6, &mut rng)).unwrap();
        prompts.insert(id.clone(), &noisy(&image, 0.5, &mut rng)).unwrap();

        let gold_pos = rng.random_range(0..10);
        let mut ids = Vec::new();
        for j in 0..10 {
            let cid = format!("img{:03}", row * 10 + j);
            let v = if j == gold_pos {
                noisy(&image, 0.55, &mut rng)
            } else if j % 4 == 1 {
                // Hard distractor: another sense's image.
                let other = rng.random_range(0..SENSES.len());
                noisy(&image_concept[other], 0.4, &mut rng)
            } else {
                noisy(&unit(&mut rng), 0.0, &mut rng)
            };
            candidates.insert(cid.clone(), &v).unwrap();
            ids.push(cid);
        }
        data.push_str(&format!("{target}\t{context}\t{}\n", ids.join("\t")));
        gold.push_str(&format!("{}\n", ids[gold_pos]));
    }

    fs::write(out.join("inventory.jsonl"), inventory).unwrap();
    fs::write(out.join("data.tsv"), data).unwrap();
    fs::write(out.join("gold.txt"), gold).unwrap();
    glosses.save(out.join("glosses.vwse")).unwrap();
    contexts.save(out.join("contexts.vwse")).unwrap();
    prompts.save(out.join("prompts.vwse")).unwrap();
    candidates.save(out.join("candidates.vwse")).unwrap();
    corpus.save(out.join("corpus.vwse")).unwrap();
    fs::write(
        out.join("toy.conf"),
        "# 20-sample toy fixture\n\
         data = data.tsv\n\
         gold = gold.txt\n\
         inventory = inventory.jsonl\n\
         contexts = contexts.vwse\n\
         glosses = glosses.vwse\n\
         prompts = prompts.vwse\n\
         candidates = candidates.vwse\n\
         corpus = corpus.vwse\n\
         fuser = average\n\
         k = 3\n\
         scale = 100\n\
         seed = 0\n",
    )
    .unwrap();
    println!("wrote toy fixture to {}", out.display());
}

//! Deterministic synthetic corpora for tests, benches and toy runs.
//!
//! Each language gets a seeded lexicon built from its own syllable inventory
//! (including its non-ASCII letters), and documents draw words from it with
//! Zipfian frequencies, which is enough structure for BPE and MLM to learn.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::mixture::{Document, Lang};
use crate::rng;
use crate::tokenize::WhitespaceTokenizer;

const LEXICON_SIZE: usize = 2000;

struct Phonology {
    onsets: &'static [&'static str],
    nuclei: &'static [&'static str],
    codas: &'static [&'static str],
}

fn phonology(lang: Lang) -> Phonology {
    match lang {
        Lang::Fin => Phonology {
            onsets: &["k", "t", "s", "h", "l", "m", "n", "p", "r", "v", "j", ""],
            nuclei: &["a", "e", "i", "o", "u", "y", "ä", "ö", "aa", "ii", "uo", "ie", "äi"],
            codas: &["", "", "n", "t", "s", "l", "kk", "ss", "tt"],
        },
        Lang::Eng => Phonology {
            onsets: &["th", "st", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "sh", "ch"],
            nuclei: &["a", "e", "i", "o", "u", "ee", "ea", "ou", "ai"],
            codas: &["", "", "n", "t", "s", "ng", "rd", "ck", "ll", "nd"],
        },
        Lang::Swe => Phonology {
            onsets: &["sk", "st", "b", "d", "f", "g", "h", "k", "l", "m", "n", "r", "s", "t", "v", "sj"],
            nuclei: &["a", "e", "i", "o", "u", "y", "å", "ä", "ö"],
            codas: &["", "", "n", "r", "t", "ll", "ng", "ck", "rt"],
        },
        Lang::Sme => Phonology {
            onsets: &["b", "č", "d", "đ", "g", "j", "l", "m", "n", "ŋ", "s", "š", "t", "ŧ", "v", "ž"],
            nuclei: &["a", "á", "e", "i", "o", "u", "ea", "uo", "ie"],
            codas: &["", "", "t", "n", "s", "š", "hk", "ht"],
        },
        Lang::Lat => Phonology {
            onsets: &["c", "d", "f", "g", "l", "m", "n", "p", "qu", "r", "s", "t", "v"],
            nuclei: &["a", "e", "i", "o", "u", "ae", "au"],
            codas: &["", "m", "s", "t", "nt", "us", "um", "x"],
        },
        Lang::Code | Lang::Xling => Phonology {
            onsets: &["get", "set", "is", "to", "new", "add", "run", "len", "buf", "idx"],
            nuclei: &["_", ""],
            codas: &["", "s", "id", "val", "map", "list"],
        },
    }
}

fn make_word(p: &Phonology, rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(p.onsets[rng.random_range(0..p.onsets.len())]);
        w.push_str(p.nuclei[rng.random_range(0..p.nuclei.len())]);
    }
    w.push_str(p.codas[rng.random_range(0..p.codas.len())]);
    if w.is_empty() {
        w.push('a');
    }
    w
}

/// Seeded word list for a language, most frequent first.
pub fn lexicon(seed: u64, lang: Lang) -> Vec<String> {
    let mut rng = rng::substream(seed, &format!("synth.lexicon.{lang}"));
    let p = phonology(lang);
    (0..LEXICON_SIZE).map(|_| make_word(&p, &mut rng)).collect()
}

struct Writer {
    lexicon: Vec<String>,
    zipf: Zipf<f64>,
}

impl Writer {
    fn new(seed: u64, lang: Lang) -> Self {
        Writer {
            lexicon: lexicon(seed, lang),
            zipf: Zipf::new(LEXICON_SIZE as f64, 1.1).expect("valid zipf"),
        }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> &str {
        let r = self.zipf.sample(rng) as usize;
        &self.lexicon[(r - 1).min(LEXICON_SIZE - 1)]
    }

    fn prose(&self, rng: &mut ChaCha8Rng, words: usize) -> String {
        let mut out = String::new();
        let mut in_sentence = 0;
        for i in 0..words {
            let w = self.word(rng);
            if in_sentence == 0 {
                if i > 0 {
                    out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
                }
                let mut chars = w.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(w);
            }
            in_sentence += 1;
            if i + 1 == words || (in_sentence > 3 && rng.random_bool(0.12)) {
                out.push(if rng.random_bool(0.1) { '?' } else { '.' });
                in_sentence = 0;
            } else if rng.random_bool(0.05) {
                out.push(',');
            }
        }
        out
    }

    fn code(&self, rng: &mut ChaCha8Rng, words: usize) -> String {
        let mut out = String::new();
        let mut used = 0;
        while used < words {
            let (f, a, b) = (self.word(rng), self.word(rng), self.word(rng));
            let n: u32 = rng.random_range(0..100);
            out.push_str(&format!("def {f}({a}, {b}):\n    return {a} + {b} * {n}\n\n"));
            used += 8;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub langs: Vec<Lang>,
    pub docs_per_lang: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            langs: vec![Lang::Fin, Lang::Eng, Lang::Swe, Lang::Sme, Lang::Lat, Lang::Code],
            docs_per_lang: 100,
            min_words: 20,
            max_words: 200,
        }
    }
}

fn doc_for(writer: &Writer, rng: &mut ChaCha8Rng, lang: Lang, words: usize, id: String) -> Document {
    let text = if lang == Lang::Code {
        writer.code(rng, words)
    } else {
        writer.prose(rng, words)
    };
    Document::new(id, lang, text, format!("synth-{lang}"), &WhitespaceTokenizer)
}

/// Documents for each language in `spec.langs`, grouped by language.
pub fn corpus(spec: &SynthSpec) -> Vec<Document> {
    let mut docs = Vec::with_capacity(spec.langs.len() * spec.docs_per_lang);
    for &lang in &spec.langs {
        let writer = Writer::new(spec.seed, lang);
        let mut rng = rng::substream(spec.seed, &format!("synth.docs.{lang}"));
        for i in 0..spec.docs_per_lang {
            let words = rng.random_range(spec.min_words..=spec.max_words.max(spec.min_words));
            docs.push(doc_for(&writer, &mut rng, lang, words, format!("{lang}-{i:06}")));
        }
    }
    docs
}

/// A mixed-language corpus of at least `target_bytes` of text, languages
/// interleaved round-robin.
pub fn corpus_of_bytes(seed: u64, target_bytes: usize) -> Vec<Document> {
    let langs = SynthSpec::default().langs;
    let writers: Vec<Writer> = langs.iter().map(|&l| Writer::new(seed, l)).collect();
    let mut rng = rng::substream(seed, "synth.bytes");
    let mut docs = Vec::new();
    let mut bytes = 0;
    let mut i = 0;
    while bytes < target_bytes {
        let k = i % langs.len();
        let words = rng.random_range(40..=400);
        let d = doc_for(&writers[k], &mut rng, langs[k], words, format!("{}-{i:06}", langs[k]));
        bytes += d.text.len();
        docs.push(d);
        i += 1;
    }
    docs
}

/// Documents whose `token_count` falls uniformly in each `[min, max)` range,
/// `n` per range. Only the counts are meaningful; texts are short stand-ins.
pub fn length_profile(seed: u64, ranges: &[(u64, u64, usize)]) -> Vec<Document> {
    let mut rng = rng::substream(seed, "synth.lengths");
    let mut docs = Vec::new();
    for (b, &(min, max, n)) in ranges.iter().enumerate() {
        for i in 0..n {
            let tokens = rng.random_range(min..max.max(min + 1));
            docs.push(Document {
                id: format!("len{b}-{i:07}"),
                lang: Lang::Fin,
                text: format!("len {tokens}"),
                token_count: tokens,
                edu_score: None,
                source: "synth-lengths".into(),
            });
        }
    }
    docs
}

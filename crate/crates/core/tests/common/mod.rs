#![allow(dead_code)]

pub mod gradcheck;

use adaptorx_core::batch::{Batch, EncodedExample, LabelRow};
use adaptorx_core::data::{BOS, EOS};
use adaptorx_core::model::{bindings_of, Bindings, Head, HeadKind, ModelConfig, Transformer};
use adaptorx_core::rng::RngStreams;
use adaptorx_core::tensor::{ParamStore, Real};

pub fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 24,
        max_len: 12,
        ..ModelConfig::new(vocab)
    }
}

pub fn seq2seq_head(vocab: usize) -> Head {
    Head {
        kind: HeadKind::Seq2SeqLm,
        n_outputs: vocab,
        prefix: "head.t".into(),
    }
}

/// Body plus one head, initialized from `seed`.
pub fn build<T: Real>(model: &Transformer, head: &Head, seed: u64) -> (ParamStore<T>, Bindings) {
    let streams = RngStreams::new(seed);
    let mut params = model.init_body::<T>(&mut streams.stream("init/body"));
    params.extend(model.init_head::<T>(head, &mut streams.stream("init/head")));
    let store = ParamStore::from_params(params).unwrap();
    let bindings = bindings_of(&store);
    (store, bindings)
}

/// Teacher-forced seq2seq batch from raw (source, target) token ids.
pub fn seq2seq_batch(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
    let rows: Vec<EncodedExample> = pairs
        .iter()
        .map(|(s, t)| {
            let mut source = vec![BOS];
            source.extend(s);
            source.push(EOS);
            let mut dec = vec![BOS];
            dec.extend(t);
            let mut labels = t.clone();
            labels.push(EOS);
            EncodedExample {
                source,
                decoder_input: Some(dec),
                labels: LabelRow::Tokens(labels),
                raw_ref: String::new(),
            }
        })
        .collect();
    Batch::collate("t", &rows).unwrap()
}

pub fn wrap(s: &[usize]) -> Vec<usize> {
    let mut out = vec![BOS];
    out.extend(s);
    out.push(EOS);
    out
}

use std::sync::Arc;

use adaptorx_core::data::{TextPairSource, Vocab};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 8] = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];

/// Random `w*` lines of length 2..=5 paired with `f(line)`.
pub fn toy_pairs(n: usize, seed: u64, f: impl Fn(&[&str]) -> Vec<String>) -> TextPairSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut texts, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let len = rng.random_range(2..=5);
        let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        texts.push(words.join(" "));
        labels.push(f(&words).join(" "));
    }
    TextPairSource::new(texts, labels).unwrap()
}

pub fn copy_pairs(n: usize, seed: u64) -> TextPairSource {
    toy_pairs(n, seed, |w| w.iter().map(|s| s.to_string()).collect())
}

pub fn reverse_pairs(n: usize, seed: u64) -> TextPairSource {
    toy_pairs(n, seed, |w| w.iter().rev().map(|s| s.to_string()).collect())
}

/// Per-token labels: `hi` for w4..w7, `lo` otherwise.
pub fn tagging_pairs(n: usize, seed: u64) -> TextPairSource {
    toy_pairs(n, seed, |w| {
        w.iter()
            .map(|s| if s[1..].parse::<usize>().unwrap() >= 4 { "hi" } else { "lo" }.to_string())
            .collect()
    })
}

pub fn toy_vocab() -> Arc<Vocab> {
    Arc::new(Vocab::build([WORDS.join(" ")]))
}

/// Corpus BLEU by explicit n-gram enumeration and scanning, clipped counts,
/// uniform weights over 1..=4 and a brevity penalty; scaled to 0..100.
pub fn brute_force_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() + 1 - n;
            let grams: Vec<&[usize]> = h.windows(n).collect();
            let mut seen: Vec<&[usize]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = grams.iter().filter(|x| *x == g).count();
                let in_ref = if rf.len() >= n { rf.windows(n).filter(|x| x == g).count() } else { 0 };
                matches[n - 1] += in_hyp.min(in_ref);
            }
        }
    }
    if c == 0 || matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matches[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * log_p.exp()
}

/// Random corpus over a small alphabet; most hypotheses are edited copies
/// of their reference so higher-order n-grams match too.
pub fn random_corpus(seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let rl = rng.random_range(1..=12);
        let rf: Vec<usize> = (0..rl).map(|_| rng.random_range(0..6)).collect();
        let hyp: Vec<usize> = if rng.random_bool(0.2) {
            (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..6)).collect()
        } else {
            let mut h = Vec::new();
            for &t in &rf {
                match rng.random_range(0..10) {
                    0 => {}
                    1 => h.push(rng.random_range(0..6)),
                    2 => h.extend([t, rng.random_range(0..6)]),
                    _ => h.push(t),
                }
            }
            h
        };
        hyps.push(hyp);
        refs.push(rf);
    }
    (hyps, refs)
}

pub struct Overfit {
    /// Update count after which the loss first fell below 0.01.
    pub below_001_at: Option<usize>,
    pub decoded_at_300: Vec<usize>,
    pub target: Vec<usize>,
    pub elapsed: std::time::Duration,
}

/// Trains the default-size model on one pair for 500 Adam updates.
pub fn overfit_single_pair() -> Overfit {
    use adaptorx_core::tensor::{adam_step, AdamConfig, AdamState, Graph, IGNORE_INDEX};

    let source = vec![4, 9, 6, 12, 5];
    let target = vec![11, 7, 8, 10];
    let start = std::time::Instant::now();
    let vocab = 16;
    let model = Transformer::new(ModelConfig::new(vocab)).unwrap();
    let head = seq2seq_head(vocab);
    let (mut store, bindings) = build::<f32>(&model, &head, 21);
    let batch = seq2seq_batch(&[(source.clone(), target.clone())]);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut below = None;
    let mut decoded = Vec::new();
    for update in 1..=500 {
        let mut g = Graph::new();
        let params = adaptorx_core::model::ModelParams::new(&store, &bindings);
        let logits = model.forward(&mut g, params, &head, &batch, None).unwrap();
        let loss = g.cross_entropy(logits, batch.labels.flat(), IGNORE_INDEX).unwrap();
        if g.value(loss)[0] < 0.01 && below.is_none() {
            below = Some(update - 1);
        }
        g.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &mut adam).unwrap();
        store.zero_grads();
        if update == 300 {
            let params = adaptorx_core::model::ModelParams::new(&store, &bindings);
            decoded = model.greedy_decode(params, &head, &wrap(&source), 10).unwrap();
        }
    }
    Overfit {
        below_001_at: below,
        decoded_at_300: decoded,
        target,
        elapsed: start.elapsed(),
    }
}

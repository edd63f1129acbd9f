mod common;

use std::fs;
use std::sync::Arc;

use adaptorx_core::checkpoint::{load_head_checkpoint, save_head_checkpoint, StandaloneModel, BLOB, MANIFEST};
use adaptorx_core::data::Vocab;
use adaptorx_core::lang_module::LangModule;
use adaptorx_core::model::Transformer;
use adaptorx_core::objectives::{make_backtranslation_pair, Objective, ObjectiveKind, ReverseTranslator};
use adaptorx_core::tensor::Graph;
use adaptorx_core::Error;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_head_module() -> (LangModule, Arc<Vocab>) {
    let vocab = common::toy_vocab();
    let mut lm = LangModule::new(Transformer::new(common::small_config(vocab.len())).unwrap(), 1).unwrap();
    for (id, kind) in [("a", ObjectiveKind::Seq2Seq), ("b", ObjectiveKind::TokenClassification)] {
        let data = match kind {
            ObjectiveKind::Seq2Seq => common::reverse_pairs(8, 1),
            _ => common::tagging_pairs(8, 2),
        };
        let o = Objective::new(id, kind, vocab.clone(), data, Default::default()).unwrap();
        lm.register_objective(&o).unwrap();
    }
    (lm, vocab)
}

fn random_lines(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=6);
            (0..len).map(|_| *common::WORDS.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

#[test]
fn roundtrip_is_bit_identical() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "a", &vocab, dir.path()).unwrap();
    let loaded = load_head_checkpoint(dir.path()).unwrap();
    let original = StandaloneModel::from_lang_module(&lm, "a", &vocab).unwrap();
    let (x, y) = (original.parameters(), loaded.parameters());
    assert_eq!(x.len(), y.len());
    assert!(x.iter().zip(&y).all(|(p, q)| p.name == q.name && p.tensor.bit_eq(&q.tensor)));
    assert_eq!(loaded.head(), original.head());
    assert_eq!(loaded.vocab(), &*vocab);

    let batch = common::seq2seq_batch(&[(vec![4, 5, 6], vec![6, 5, 4]), (vec![7], vec![7])]);
    let logits = |m: &StandaloneModel| {
        let mut g = Graph::new();
        let l = m.forward(&mut g, &batch).unwrap();
        g.value(l).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(&original), logits(&loaded));
}

#[test]
fn archive_holds_only_its_own_head() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "a", &vocab, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert!(!manifest.lines().any(|l| l.starts_with("head.b.")));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("head.a.")).count(), 2);

    let blob_len = fs::metadata(dir.path().join(BLOB)).unwrap().len() as usize;
    let mut expected_offset = 0;
    for line in manifest.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[2], "f32");
        assert_eq!(f[3].parse::<usize>().unwrap(), expected_offset);
        let numel: usize = f[1].split(',').map(|d| d.parse::<usize>().unwrap()).product();
        expected_offset += 4 * numel;
    }
    assert_eq!(expected_offset, blob_len);
}

#[test]
fn truncated_blob_is_corruption() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "a", &vocab, dir.path()).unwrap();
    let path = dir.path().join(BLOB);
    let blob = fs::read(&path).unwrap();
    fs::write(&path, &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(load_head_checkpoint(dir.path()), Err(Error::Corruption { .. })));

    fs::write(&path, [blob.as_slice(), &[0u8; 4]].concat()).unwrap();
    assert!(matches!(load_head_checkpoint(dir.path()), Err(Error::Corruption { .. })));
}

#[test]
fn loaded_model_decodes_like_the_original() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "a", &vocab, dir.path()).unwrap();
    // Nothing but the archive is needed from here on.
    let loaded = load_head_checkpoint(dir.path()).unwrap();
    let original = StandaloneModel::from_lang_module(&lm, "a", &vocab).unwrap();
    let lines = random_lines(100, 3);
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    assert_eq!(loaded.translate_batch(&refs).unwrap(), original.translate_batch(&refs).unwrap());
    for line in refs.iter().take(10) {
        let ids = common::wrap(&vocab.tokenize(line));
        assert_eq!(loaded.greedy_decode(&ids, 12).unwrap(), original.greedy_decode(&ids, 12).unwrap());
    }
}

#[test]
fn loaded_model_serves_as_reverse_translator() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "a", &vocab, dir.path()).unwrap();
    let pseudo = |seed| {
        let t = ReverseTranslator::Model(Arc::new(load_head_checkpoint(dir.path()).unwrap()));
        random_lines(20, seed)
            .iter()
            .map(|l| make_backtranslation_pair(l, &t).unwrap())
            .collect::<Vec<_>>()
    };
    let (first, second) = (pseudo(4), pseudo(4));
    assert_eq!(first, second);
    for (pair, target) in first.iter().zip(random_lines(20, 4)) {
        if let Some((_, t)) = pair {
            assert_eq!(t, &target);
        }
    }
}

#[test]
fn classification_head_roundtrips() {
    let (lm, vocab) = two_head_module();
    let dir = tempfile::tempdir().unwrap();
    save_head_checkpoint(&lm, "b", &vocab, dir.path()).unwrap();
    let loaded = load_head_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.head(), lm.head_for("b").unwrap());
    assert!(matches!(loaded.translate_batch(&["w1"]), Err(Error::Routing(_))));
}

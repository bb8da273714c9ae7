use std::collections::BTreeMap;

use proptest::prelude::*;

use pmmut::corpus::{generate_corpus, Lexicon, PhoneInventory};
use pmmut::tokenizer::{
    apply_merges, phonemize, train_bpe, LabelPair, TokenizerError, TokenizerModel, BLANK, MARKER,
    SOS_EOS, UNK,
};

fn corpus_sentences(seed: u64) -> (Lexicon, Vec<String>) {
    let inv = PhoneInventory::generate(12, 4, 2.0, 5.5, 2.5, seed).unwrap();
    let lex = Lexicon::generate(&inv, 40, 2, 4, seed + 1).unwrap();
    let utts = generate_corpus(&inv, &lex, 300, (2, 5), 0.5, seed + 2).unwrap();
    (lex, utts.iter().map(|u| u.text()).collect())
}

#[test]
fn every_corpus_sentence_round_trips() {
    let (_, sents) = corpus_sentences(0);
    let tok = train_bpe(&sents, 64).unwrap();
    assert_eq!(tok.vocab_size(), 64);
    for s in &sents {
        let ids = tok.encode(s, true).unwrap();
        assert!(!ids.contains(&UNK));
        assert_eq!(&tok.decode(&ids).unwrap(), s);
    }
}

#[test]
fn ids_are_dense_and_reserved_ids_fixed() {
    let (_, sents) = corpus_sentences(1);
    let tok = train_bpe(&sents, 64).unwrap();
    assert_eq!(tok.token(BLANK), Some("<blank>"));
    assert_eq!(tok.token(UNK), Some("<unk>"));
    assert_eq!(tok.token(SOS_EOS), Some("<sos/eos>"));
    for id in 0..tok.vocab_size() {
        let t = tok.token(id).unwrap();
        assert_eq!(tok.id(t), Some(id));
    }
    assert_eq!(tok.token(tok.vocab_size()), None);
}

#[test]
fn training_is_deterministic() {
    let (_, sents) = corpus_sentences(2);
    assert_eq!(train_bpe(&sents, 50).unwrap(), train_bpe(&sents, 50).unwrap());
}

#[test]
fn hand_counted_single_merge() {
    let tok = train_bpe(&["ab", "ab", "ab"], 3 + 2 + 1).unwrap();
    assert_eq!(tok.merges(), &[(format!("{MARKER}a"), "b".to_string())]);
    assert_eq!(tok.encode("ab", true).unwrap().len(), 1);
}

#[test]
fn full_merged_word_is_one_id() {
    let (_, sents) = corpus_sentences(3);
    let tok = train_bpe(&sents, 64).unwrap();
    let last = tok.merges().last().unwrap();
    let joined = format!("{}{}", last.0, last.1);
    if let Some(word) = joined.strip_prefix(MARKER) {
        if !word.contains(MARKER) {
            assert_eq!(tok.encode(word, true).unwrap(), vec![tok.id(&joined).unwrap()]);
        }
    }
    // a word fully merged by training encodes to one id
    let single = sents
        .iter()
        .flat_map(|s| s.split_whitespace())
        .find(|w| tok.encode(w, true).unwrap().len() == 1)
        .expect("some word is a single piece at vocab 64");
    let id = tok.encode(single, true).unwrap()[0];
    assert_eq!(tok.token(id).unwrap(), format!("{MARKER}{single}"));
}

#[test]
fn abab_merges_to_one_token() {
    let sym = |s: &str| s.to_string();
    let merges = vec![(sym("a"), sym("b")), (sym("ab"), sym("ab"))];
    let out = apply_merges(vec![sym("a"), sym("b"), sym("a"), sym("b")], &merges);
    assert_eq!(out, vec![sym("abab")]);
}

#[test]
fn unknown_characters_follow_the_policy() {
    let tok = train_bpe(&["ab ba"], 7).unwrap();
    assert_eq!(tok.encode("az", false).unwrap().last(), Some(&UNK));
    assert!(matches!(tok.encode("az", true), Err(TokenizerError::UnknownChar('z'))));
}

#[test]
fn file_round_trip() {
    let (_, sents) = corpus_sentences(4);
    let tok = train_bpe(&sents, 64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.txt");
    tok.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("[merges]\n"));
    assert!(text.contains("\n[vocab]\n<blank>\t0\n"));
    assert_eq!(TokenizerModel::load(&path).unwrap(), tok);
}

#[test]
fn phonemize_examples() {
    let (lex, _) = corpus_sentences(5);
    assert_eq!(phonemize(&lex, "").unwrap(), Vec::<usize>::new());
    let words: Vec<&str> = lex.words().take(3).collect();
    assert_eq!(phonemize(&lex, words[0]).unwrap(), lex.get(words[0]).unwrap());
    let sentence = words.join(" ");
    let got = phonemize(&lex, &sentence).unwrap();
    let mut oracle = Vec::new();
    for w in &words {
        oracle.extend_from_slice(lex.get(w).unwrap());
    }
    assert_eq!(got, oracle);
    assert_eq!(got.len(), words.iter().map(|w| lex.get(w).unwrap().len()).sum::<usize>());
    assert!(matches!(
        phonemize(&lex, "nosuchword"),
        Err(TokenizerError::OutOfLexicon(_))
    ));
}

#[test]
fn label_pair_invariants() {
    let (lex, sents) = corpus_sentences(6);
    let tok = train_bpe(&sents, 64).unwrap();
    for s in sents.iter().take(50) {
        let lp = LabelPair::new(s, &lex, &tok).unwrap();
        assert_eq!(lp.phones, phonemize(&lex, s).unwrap());
        assert_eq!(tok.decode(&lp.pieces).unwrap(), lp.text);
        assert_eq!(&lp.text, s);
    }
}

fn alphabet_words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e]{1,6}", 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_is_bijective_over_the_alphabet(
        train in alphabet_words(),
        probe in alphabet_words(),
        extra in 0usize..20,
    ) {
        // every probe character must be in the training alphabet, as word-initial and inner symbol
        let mut corpus = train.clone();
        corpus.push("eabcde".into());
        corpus.push("a b c d e".into());
        let base = 3 + 10;
        let tok = train_bpe(&corpus, base + extra).unwrap();
        let sentence = probe.join(" ");
        let ids = tok.encode(&sentence, true).unwrap();
        prop_assert_eq!(tok.decode(&ids).unwrap(), sentence);
        let mut seen: BTreeMap<Vec<usize>, &String> = BTreeMap::new();
        for w in &probe {
            let e = tok.encode_word(w, true).unwrap();
            if let Some(prev) = seen.insert(e, w) {
                prop_assert_eq!(prev, w);
            }
        }
    }
}

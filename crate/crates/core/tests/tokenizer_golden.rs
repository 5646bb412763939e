use mcg::text::Vocabulary;

const GOLDEN: &str = include_str!("golden/what_is_the_man_doing.txt");

fn golden_ids() -> Vec<usize> {
    GOLDEN
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect()
}

#[test]
fn what_is_the_man_doing_matches_golden() {
    let vocab = Vocabulary::toy();
    let t = vocab.tokenize("what is the man doing", 32);
    assert_eq!(t.ids, golden_ids());
    assert!(t.mask.iter().all(|&m| m));
}

#[test]
fn golden_ignores_case() {
    let vocab = Vocabulary::toy();
    assert_eq!(
        vocab.tokenize("What is the MAN Doing", 32).ids,
        golden_ids()
    );
}

#[test]
fn punctuation_is_split_off_as_its_own_piece() {
    let vocab = Vocabulary::toy();
    let ids = vocab.tokenize("what is the man doing?", 32).ids;
    let golden = golden_ids();
    assert_eq!(ids.len(), golden.len() + 1);
    assert_eq!(&ids[..golden.len() - 1], &golden[..golden.len() - 1]);
    assert_eq!(ids.last(), golden.last());
}

#[test]
fn doing_splits_into_stem_and_suffix() {
    let vocab = Vocabulary::toy();
    let pieces = vocab.segment_word("doing");
    assert_eq!(pieces.len(), 2);
    assert_eq!(vocab.detokenize(&pieces), "doing");
}

#[test]
fn truncation_keeps_markers() {
    let vocab = Vocabulary::toy();
    let t = vocab.tokenize("what is the man doing", 5);
    let golden = golden_ids();
    assert_eq!(t.ids.len(), 5);
    assert_eq!(&t.ids[..4], &golden[..4]);
    assert_eq!(t.ids[4], *golden.last().unwrap());
}

use proptest::prelude::*;

use mcg::eval::{normalize_answer, top1_accuracy, wups_at, Taxonomy};
use mcg::sampling::{
    head_tail_region, head_tail_sample, segment_bounds, SampleMode, SamplingConfig, VideoMeta,
};
use mcg::text::Vocabulary;
use mcg::training::batch_indices;

proptest! {
    #[test]
    fn plans_stay_inside_their_segments(
        frames in 2usize..400,
        n in 2usize..16,
        seed in any::<u64>(),
        ratio in 0.05f64..0.5,
    ) {
        prop_assume!(frames >= n);
        let meta = VideoMeta::new("v", frames);
        let cfg = SamplingConfig { head_tail_ratio: ratio, allow_repeat: false };
        let plan = head_tail_sample(&meta, n, SampleMode::Train, seed, &cfg).unwrap();
        prop_assert_eq!(plan.indices.len(), n);
        prop_assert_eq!(plan.seed, Some(seed));
        for (k, &i) in plan.indices.iter().enumerate() {
            let (start, end) = segment_bounds(frames, n, k);
            prop_assert!(head_tail_region(start, end, ratio).contains(&i));
        }
        prop_assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
        let again = head_tail_sample(&meta, n, SampleMode::Train, seed, &cfg).unwrap();
        prop_assert_eq!(again, plan);
    }

    #[test]
    fn eval_plans_ignore_the_seed(frames in 2usize..400, n in 2usize..16, a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(frames >= n);
        let meta = VideoMeta::new("v", frames);
        let cfg = SamplingConfig::default();
        let pa = head_tail_sample(&meta, n, SampleMode::Eval, a, &cfg).unwrap();
        let pb = head_tail_sample(&meta, n, SampleMode::Eval, b, &cfg).unwrap();
        prop_assert_eq!(&pa, &pb);
        prop_assert_eq!(pa.seed, None);
        for (k, &i) in pa.indices.iter().enumerate() {
            let (start, end) = segment_bounds(frames, n, k);
            prop_assert_eq!(i, if k % 2 == 0 { start } else { end - 1 });
        }
    }

    #[test]
    fn short_videos_repeat_only_when_allowed(frames in 1usize..16, extra in 1usize..8) {
        let n = (frames + extra).max(2);
        let meta = VideoMeta::new("v", frames);
        let strict = SamplingConfig { allow_repeat: false, ..SamplingConfig::default() };
        prop_assert!(head_tail_sample(&meta, n, SampleMode::Train, 0, &strict).is_err());
        let loose = SamplingConfig { allow_repeat: true, ..SamplingConfig::default() };
        let plan = head_tail_sample(&meta, n, SampleMode::Train, 0, &loose).unwrap();
        prop_assert_eq!(plan.indices.len(), n);
        prop_assert!(plan.indices.iter().all(|&i| i < frames));
        prop_assert!(plan.indices.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn token_ids_stay_in_vocabulary(text in "[a-zA-Z ,.?!]{0,60}", max_len in 2usize..40) {
        let vocab = Vocabulary::toy();
        let t = vocab.tokenize(&text, max_len);
        prop_assert!(t.ids.len() <= max_len);
        prop_assert_eq!(t.ids.len(), t.mask.len());
        prop_assert!(t.ids.iter().all(|&i| i < vocab.len()));
        prop_assert_eq!(t.ids[0], vocab.reserved.cls);
        prop_assert_eq!(*t.ids.last().unwrap(), vocab.reserved.sep);
    }

    #[test]
    fn in_vocabulary_sentences_round_trip(words in prop::collection::vec(0usize..1000, 1..8)) {
        let vocab = Vocabulary::toy();
        let plain: Vec<String> = (0..vocab.len())
            .filter(|&i| !vocab.is_reserved(i))
            .map(|i| vocab.token(i).unwrap().to_string())
            .filter(|t| !t.starts_with("##") && t.chars().all(char::is_alphanumeric))
            .collect();
        let sentence = words.iter().map(|w| plain[w % plain.len()].as_str()).collect::<Vec<_>>().join(" ");
        let ids = vocab.tokenize(&sentence, 64).ids;
        prop_assert_eq!(vocab.detokenize(&ids), sentence);
    }

    #[test]
    fn normalization_is_idempotent(s in "[a-zA-Z ,.'!-]{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn accuracy_and_wups_are_ordered(pairs in prop::collection::vec((0usize..12, 0usize..12), 1..20)) {
        let words = ["dog", "cat", "animal", "red", "blue", "color", "man", "woman", "person", "ball", "car", "xyzzy"];
        let preds: Vec<String> = pairs.iter().map(|p| words[p.0].to_string()).collect();
        let golds: Vec<String> = pairs.iter().map(|p| words[p.1].to_string()).collect();
        let tax = Taxonomy::toy();
        let acc = top1_accuracy(&preds, &golds).unwrap();
        let w9 = wups_at(&preds, &golds, 0.9, &tax).unwrap();
        let w0 = wups_at(&preds, &golds, 0.0, &tax).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!(acc <= w9 + 1e-12);
        prop_assert!(w9 <= w0 + 1e-12);
        prop_assert!(w0 <= 1.0 + 1e-12);
    }

    #[test]
    fn batches_are_distinct_and_in_range(n in 1usize..200, batch in 1usize..64, seed in any::<u64>(), step in 0usize..10_000) {
        let idx = batch_indices(n, batch, seed, step);
        prop_assert_eq!(idx.len(), batch.min(n));
        prop_assert!(idx.iter().all(|&i| i < n));
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        prop_assert_eq!(batch_indices(n, batch, seed, step), idx);
    }
}

use proptest::prelude::*;
use rft_core::metrics::{
    bleu_n, extract_labels, macro_f1, rouge_l, semantic_proxy, tokenize, LabelLexicon, TokenSeq,
};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "plaque", "soft", "seen", "."]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn seq(w: &[String]) -> TokenSeq {
    tokenize(&w.join(" "))
}

proptest! {
    #[test]
    fn bounded_and_deterministic(a in words(), b in words(), n in 1usize..5, smooth: bool) {
        let (x, y) = (seq(&a), seq(&b));
        let v = bleu_n(&x, &y, n, smooth).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, bleu_n(&x, &y, n, smooth).unwrap());
        let r = rouge_l(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let s = semantic_proxy(&x, &y);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - semantic_proxy(&y, &x)).abs() < 1e-12);
    }

    #[test]
    fn self_match_is_one(a in words(), n in 1usize..5) {
        let x = seq(&a);
        prop_assert_eq!(bleu_n(&x, &x, n, false).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&x, &x).unwrap(), 1.0);
        prop_assert!((semantic_proxy(&x, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..10)) {
        let (p, r): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assert_eq!(macro_f1(&p, &r).unwrap(), macro_f1(&r, &p).unwrap());
        prop_assert_eq!(macro_f1(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn labels_ignore_case_and_punctuation(
        trigger in prop::sample::select(vec!["soft plaque", "calcified plaque", "stenosis", "occluded"]),
        upper: bool,
        punct in prop::sample::select(vec!["", ".", ",", ";", "!"]),
    ) {
        let lex = LabelLexicon::carotid();
        let plain = extract_labels(&format!("there is {trigger} here"), &lex).unwrap();
        let t = if upper { trigger.to_uppercase() } else { trigger.to_string() };
        let noisy = extract_labels(&format!("There is {punct}{t}{punct} here"), &lex).unwrap();
        prop_assert_eq!(plain.values, noisy.values);
    }
}

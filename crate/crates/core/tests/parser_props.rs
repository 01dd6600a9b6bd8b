use proptest::prelude::*;
use rft_core::corpus::{load_corpus, parse_sections, save_corpus, ParseStatus};
use rft_core::{Corpus, Criticality, Sample};

fn body() -> impl Strategy<Value = String> {
    "[a-z]{1,8}( [a-z]{1,8}){0,5}\\.?"
}

proptest! {
    #[test]
    fn reparse_reproduces_sections(f in body(), i in body()) {
        let r = parse_sections(&format!("FINDINGS: {f}\nIMPRESSION: {i}"));
        prop_assert_eq!(r.parse_status, ParseStatus::BothFound);
        prop_assert_eq!(r.findings.as_deref(), Some(f.as_str()));
        prop_assert_eq!(r.impression.as_deref(), Some(i.as_str()));
        let again = parse_sections(&format!(
            "FINDINGS: {}\nIMPRESSION: {}",
            r.findings.as_ref().unwrap(),
            r.impression.as_ref().unwrap()
        ));
        prop_assert_eq!(again, r);
    }

    #[test]
    fn both_found_spans_are_disjoint(text in "(?s)(FINDINGS:|IMPRESSION:|findings|impression|\n| |[a-z.]){0,40}") {
        let r = parse_sections(&text);
        if r.parse_status == ParseStatus::BothFound {
            let (a, b) = (r.findings_span().unwrap(), r.impression_span().unwrap());
            prop_assert!(a.end <= b.start || b.end <= a.start);
            prop_assert_eq!(&r.full_text[a], r.findings.as_deref().unwrap());
            prop_assert_eq!(&r.full_text[b], r.impression.as_deref().unwrap());
        }
        prop_assert_eq!(parse_sections(&text), r);
    }

    #[test]
    fn crlf_is_irrelevant(f in body(), i in body()) {
        let lf = parse_sections(&format!("FINDINGS: {f}\nIMPRESSION: {i}"));
        let crlf = parse_sections(&format!("FINDINGS: {f}\r\nIMPRESSION: {i}"));
        prop_assert_eq!(lf, crlf);
    }

    #[test]
    fn save_load_round_trip(items in prop::collection::vec((body(), body(), 0u8..3, prop::option::of(body())), 1..8)) {
        let samples = items
            .into_iter()
            .enumerate()
            .map(|(k, (p, t, c, ctx))| {
                let mut s = Sample::new(format!("id{k}"), p, &t);
                s.context = ctx;
                s.criticality = [Criticality::Critical, Criticality::Normal, Criticality::Unannotated][c as usize];
                s
            })
            .collect();
        let corpus = Corpus::new(samples);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        prop_assert_eq!(back.samples, corpus.samples);
    }
}

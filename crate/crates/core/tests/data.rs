use std::collections::HashSet;

use datarater_core::data::{
    corrupt, corrupt_with_mask, generate_corpus, ingest_files, oversample_size, pack_sequences,
    read_packed, sample_batch, split, tokens_to_text, write_packed, BatchSampler, CorpusSpec,
    Document, MarkovSpec, SplitSpec, TemplateSpec,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn markov(n_docs: usize, vocab: usize) -> MarkovSpec {
    MarkovSpec {
        vocab_size: vocab,
        n_docs,
        min_len: 8,
        max_len: 40,
        subsets: vec!["a".into(), "b".into()],
        branching: 2,
        smoothing: 0.02,
    }
}

fn doc(id: u64, tokens: Vec<u32>) -> Document {
    Document {
        id,
        tokens,
        subset: "s".into(),
        noise: 0.0,
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = CorpusSpec::Markov(markov(200, 32));
    let a = generate_corpus(&spec, 5).unwrap();
    let b = generate_corpus(&spec, 5).unwrap();
    let c = generate_corpus(&spec, 6).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), c.content_hash());
    assert_eq!(a.subsets(), vec!["a".to_string(), "b".to_string()]);
    for d in &a.docs {
        assert_eq!(*d.tokens.last().unwrap(), 31);
        assert!(d.tokens[..d.tokens.len() - 1].iter().all(|&t| t < 31));
    }

    let t = CorpusSpec::Template(TemplateSpec {
        n_docs: 30,
        min_sentences: 2,
        max_sentences: 6,
        subsets: vec!["prose".into(), "lists".into(), "boiler".into()],
    });
    let x = generate_corpus(&t, 1).unwrap();
    assert_eq!(
        x.content_hash(),
        generate_corpus(&t, 1).unwrap().content_hash()
    );
    assert!(x.byte_level);
}

#[test]
fn markov_text_is_predictable_from_bigrams() {
    let c = generate_corpus(&CorpusSpec::Markov(markov(2000, 16)), 3).unwrap();
    let (train, test) = c.docs.split_at(1500);
    let v = 16;
    let mut counts = vec![vec![1.0; v]; v];
    for d in train {
        for w in d.tokens.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1.0;
        }
    }
    let (mut nll, mut n) = (0.0, 0.0);
    for d in test {
        for w in d.tokens.windows(2) {
            let row = &counts[w[0] as usize];
            nll -= (row[w[1] as usize] / row.iter().sum::<f64>()).ln();
            n += 1.0;
        }
    }
    // Two subsets with two main successors each: well under ln 16 ≈ 2.77.
    assert!(nll / n < 1.6, "{}", nll / n);
}

#[test]
fn ingests_text_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let txt = dir.path().join("web.txt");
    std::fs::write(
        &txt,
        "First doc.\n\nSecond doc\nwith two lines.\n\n\nThird.\n",
    )
    .unwrap();
    let c = ingest_files(std::slice::from_ref(&txt)).unwrap();
    assert_eq!(c.len(), 3);
    assert!(c.docs.iter().all(|d| d.subset == "web"));
    assert_eq!(
        tokens_to_text(&c.docs[1].tokens, c.separator),
        "Second doc\nwith two lines.\n"
    );

    let jl = dir.path().join("more.jsonl");
    std::fs::write(
        &jl,
        "{\"id\": 10, \"text\": \"a\", \"subset\": \"x\"}\n{\"id\": 11, \"text\": \"bb\"}\n",
    )
    .unwrap();
    let c = ingest_files(std::slice::from_ref(&jl)).unwrap();
    assert_eq!(
        c.docs.iter().map(|d| d.id).collect::<Vec<_>>(),
        vec![10, 11]
    );
    assert_eq!(c.docs[1].subset, "more");

    std::fs::write(
        &jl,
        "{\"id\": 1, \"text\": \"a\"}\n{\"id\": 1, \"text\": \"b\"}\n",
    )
    .unwrap();
    assert!(ingest_files(&[jl]).is_err());
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "\n\n").unwrap();
    assert!(ingest_files(&[empty]).is_err());
}

#[test]
fn zero_noise_is_identity() {
    let d = doc(3, (0..50).map(|i| i % 7).collect());
    let c = corrupt(&d, 0.0, 64, 9);
    assert_eq!(c.tokens, d.tokens);
    assert_eq!(c.noise, 0.0);
}

#[test]
fn full_noise_is_uniform() {
    let v = 16;
    let d = doc(0, vec![5; 40_000]);
    let c = corrupt(&d, 1.0, v, 2);
    let mut counts = vec![0.0; v];
    for t in &c.tokens {
        counts[*t as usize] += 1.0;
    }
    let e = c.tokens.len() as f64 / v as f64;
    let chi2: f64 = counts.iter().map(|o| (o - e) * (o - e) / e).sum();
    let crit = ChiSquared::new((v - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn half_noise_redraws_half_the_tokens() {
    let n = 20_000;
    let d = doc(1, vec![0; n]);
    let (_, mask) = corrupt_with_mask(&d, 0.5, 32, 4);
    let k = mask.iter().filter(|&&m| m).count() as f64;
    let sd = (n as f64 * 0.25).sqrt();
    assert!((k - 0.5 * n as f64).abs() < 3.0 * sd, "{k}");
}

#[test]
fn noise_levels_compose() {
    let d = doc(2, vec![0; 30_000]);
    let once = corrupt(&d, 0.3, 1 << 20, 1);
    let twice = corrupt(&once, 0.4, 1 << 20, 2);
    assert!((twice.noise - (1.0 - 0.7 * 0.6)).abs() < 1e-15);
    // With a huge vocabulary a redraw almost never restores the original.
    let changed = twice.tokens.iter().filter(|&&t| t != 0).count() as f64 / d.tokens.len() as f64;
    let sd = (0.58 * 0.42 / d.tokens.len() as f64).sqrt();
    assert!((changed - 0.58).abs() < 3.0 * sd, "{changed}");
}

#[test]
fn packing_examples() {
    let docs = vec![doc(0, vec![1; 5]), doc(1, vec![2; 3]), doc(2, vec![3; 10])];
    let p = pack_sequences(&docs, 8, 0, 100);
    assert_eq!(p.len(), 3);
    assert_eq!(p[0].offsets, vec![0, 5]);
    assert_eq!(p[0].doc_ids, vec![0, 1]);
    assert_eq!(p[0].valid_len, 8);
    assert_eq!(p[1].tokens, vec![3; 8]);
    assert_eq!(p[2].valid_len, 2);
    assert_eq!(p[2].tokens[2..], [0; 6]);
    assert_eq!(
        p.iter().map(|q| q.id).collect::<Vec<_>>(),
        vec![100, 101, 102]
    );
    assert!((p[2].packing_density() - 0.25).abs() < 1e-15);
    assert_eq!(p[0].num_articles(), 2);
}

proptest! {
    #[test]
    fn packing_conserves_tokens(lens in proptest::collection::vec(1usize..40, 1..30), s in 2usize..24) {
        let docs: Vec<Document> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| doc(i as u64, (1..=l as u32).collect()))
            .collect();
        let packed = pack_sequences(&docs, s, 0, 0);
        let total: usize = packed.iter().map(|q| q.valid_len).sum();
        prop_assert_eq!(total, lens.iter().sum::<usize>());
        for q in &packed {
            prop_assert!(q.validate(64).is_ok());
            prop_assert!(q.tokens[q.valid_len..].iter().all(|&t| t == 0));
        }
        // Tokens count up within a document, so sorting its pieces by first
        // token restores the original order.
        for d in &docs {
            let mut pieces = Vec::new();
            for q in &packed {
                for (k, id) in q.doc_ids.iter().enumerate() {
                    if *id == d.id {
                        let o = q.offsets[k];
                        pieces.push(q.tokens[o..o + q.piece_len(k)].to_vec());
                    }
                }
            }
            prop_assert!(pieces.iter().all(|p| p.len() <= s));
            pieces.sort_by_key(|p| p[0]);
            prop_assert_eq!(&pieces.concat(), &d.tokens);
        }
    }
}

#[test]
fn split_sizes_and_disjointness() {
    let c = generate_corpus(&CorpusSpec::Markov(markov(1000, 16)), 0).unwrap();
    for seed in 0..100 {
        let spec = SplitSpec {
            inner_train: 0.8,
            outer_heldout: 0.1,
            validation: 0.1,
            seed,
        };
        let s = split(&c, &spec).unwrap();
        assert_eq!(
            (
                s.inner_train.len(),
                s.outer_heldout.len(),
                s.validation.len()
            ),
            (800, 100, 100)
        );
        assert!(s.overlapping_ids().is_empty());
    }
    let bad = SplitSpec {
        inner_train: 0.8,
        outer_heldout: 0.3,
        validation: 0.1,
        seed: 0,
    };
    assert!(split(&c, &bad).is_err());
}

#[test]
fn oversampling_sizes() {
    assert_eq!(oversample_size(128, 0.75).unwrap(), 512);
    assert_eq!(oversample_size(128, 0.0).unwrap(), 128);
    assert_eq!(oversample_size(128, 0.9).unwrap(), 1280);
    assert_eq!(oversample_size(3, 0.5).unwrap(), 6);
    assert!(oversample_size(4, 1.0).is_err());
    assert_eq!(sample_batch(10, 128, 1, Some(0.75)).unwrap().len(), 512);
    assert_eq!(sample_batch(10, 4, 1, None).unwrap().len(), 4);
    assert!(BatchSampler::new(0, 1).is_err());
}

#[test]
fn sampling_is_seeded_and_covers_split() {
    let a = sample_batch(50, 2000, 3, None).unwrap();
    assert_eq!(a, sample_batch(50, 2000, 3, None).unwrap());
    assert_ne!(a, sample_batch(50, 2000, 4, None).unwrap());
    let seen: HashSet<usize> = a.indices.iter().copied().collect();
    assert_eq!(seen.len(), 50);
    assert!(a.indices.iter().all(|&i| i < 50));
}

#[test]
fn packed_cache_round_trip() {
    let c = generate_corpus(&CorpusSpec::Markov(markov(60, 16)), 2).unwrap();
    let mut packed = pack_sequences(&c.docs, 24, 0, 7);
    packed[1].noise = 0.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.drpk");
    write_packed(&path, 16, &packed).unwrap();
    let (v, back) = read_packed(&path).unwrap();
    assert_eq!(v, 16);
    assert_eq!(back, packed);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(read_packed(&path).is_err());
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_packed(&path).is_err());
}

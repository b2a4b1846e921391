mod common;

use rand::Rng;
use xraygan::autograd::{backward, finite_difference, max_relative_error, Tensor, Var};
use xraygan::corpus::Report;
use xraygan::encoder::{encode_report, init_encoder, EncoderConfig, EncoderParams};
use xraygan::nn::{load_named, named_tensors, Parameterized};

fn small() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 8,
        embed_dim: 5,
        hidden_dim: 4,
        attention_dim: 3,
    }
}

fn random_report(rng: &mut impl Rng, vocab: usize) -> Report {
    let n = rng.gen_range(1..4);
    let sentences: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..6);
            let mut s: Vec<u32> = (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect();
            s.resize(6, 0);
            s
        })
        .collect();
    let lengths = sentences
        .iter()
        .map(|s| s.iter().filter(|&&t| t != 0).count())
        .collect();
    Report { sentences, lengths }
}

#[test]
fn matches_straight_line_oracle() {
    let mut rng = common::rng(11);
    for seed in 0..6 {
        let params = init_encoder(small(), seed).unwrap();
        let named = named_tensors(&params);
        for _ in 0..4 {
            let r = random_report(&mut rng, 8);
            let got = encode_report(&r, &params).unwrap();
            let want = common::encode_oracle(&r.sentences, &named);
            let err = max_relative_error(got.c.value(), &Tensor::new(&[1, 8], want.c.clone()), 1e-12);
            assert!(err < 1e-6, "rel err {err}");
            for (a, b) in got
                .word_attention
                .iter()
                .flatten()
                .zip(want.word_attention.iter().flatten())
            {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in got.sentence_attention.iter().zip(&want.sentence_attention) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_weights_are_probability_vectors() {
    let mut rng = common::rng(12);
    let params = init_encoder(small(), 3).unwrap();
    for _ in 0..30 {
        let r = random_report(&mut rng, 8);
        let e = encode_report(&r, &params).unwrap();
        for (w, &len) in e.word_attention.iter().zip(&r.lengths) {
            assert_eq!(w.len(), len);
            assert!(w.iter().all(|&a| a >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(e.sentence_attention.len(), r.sentences.len());
        assert!((e.sentence_attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn projected(params: &EncoderParams, r: &Report, dir: &Tensor) -> f64 {
    encode_report(r, params)
        .unwrap()
        .c
        .value()
        .zip_map(dir, |a, b| a * b)
        .sum()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = common::rng(13);
    let params = init_encoder(small(), 5).unwrap();
    let report = Report {
        sentences: vec![vec![3, 4, 5, 0], vec![2, 7, 0, 0], vec![6, 1, 3, 2]],
        lengths: vec![3, 2, 4],
    };
    let dir = common::random_tensor(&mut rng, &[1, 8], 1.0);
    let loss = encode_report(&report, &params)
        .unwrap()
        .c
        .mul(&Var::constant(dir.clone()))
        .sum();
    let grads = backward(&loss);
    let base = named_tensors(&params);
    let mut names = Vec::new();
    params.visit("", &mut |name, v| names.push((name.to_string(), grads.get_or_zero(v))));
    let mut worst = 0.0f64;
    for (name, analytic) in names {
        let numeric = finite_difference(&base[&name], 1e-6, |t| {
            let mut p = params.clone();
            let mut m = base.clone();
            m.insert(name.clone(), t.clone());
            load_named(&mut p, &m).unwrap();
            projected(&p, &report, &dir)
        });
        let e = max_relative_error(&analytic, &numeric, 1e-4);
        assert!(e < 1e-4, "{name}: {e}");
        worst = worst.max(e);
    }
    assert!(worst > 0.0);
}

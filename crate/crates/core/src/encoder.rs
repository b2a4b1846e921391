//! Hierarchical attentional report encoder.
//!
//! Words are embedded, run through a bidirectional LSTM, and pooled with
//! additive attention (`e = v . tanh(W h + b)`, softmax over positions) into
//! a sentence vector. Sentence vectors go through a second bidirectional LSTM
//! and attention pool, giving the report embedding `c` of width
//! `2 * hidden_dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::corpus::{Report, PAD};
use crate::error::{Error, Result};
use crate::nn::{join, uniform, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("encoder dimensions must all be >= 1"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// One direction of an LSTM; gates are packed `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[input, 4 * hidden]`
    pub w_ih: Var,
    /// `[hidden, 4 * hidden]`
    pub w_hh: Var,
    /// `[4 * hidden]`
    pub bias: Var,
}

impl LstmParams {
    fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Var::param(uniform(rng, &[input, 4 * hidden], bound)),
            w_hh: Var::param(uniform(rng, &[hidden, 4 * hidden], bound)),
            bias: Var::param(Tensor::zeros(&[4 * hidden])),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    /// Hidden states for every position of `xs: [T, input]`, in input order.
    fn run(&self, xs: &Var, reverse: bool) -> Vec<Var> {
        let t_len = xs.shape()[0];
        let h_dim = self.hidden();
        let pre = xs.matmul(&self.w_ih);
        let pre = pre.add(&self.bias.expand(pre.shape()));
        let mut h = Var::constant(Tensor::zeros(&[1, h_dim]));
        let mut c = Var::constant(Tensor::zeros(&[1, h_dim]));
        let mut out = vec![None; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let z = pre.narrow(0, t, 1).add(&h.matmul(&self.w_hh));
            let i = z.narrow(1, 0, h_dim).sigmoid();
            let f = z.narrow(1, h_dim, h_dim).sigmoid();
            let g = z.narrow(1, 2 * h_dim, h_dim).tanh();
            let o = z.narrow(1, 3 * h_dim, h_dim).sigmoid();
            c = f.mul(&c).add(&i.mul(&g));
            h = o.mul(&c.tanh());
            out[t] = Some(h.clone());
        }
        out.into_iter().map(|h| h.expect("every step visited")).collect()
    }
}

impl Parameterized for LstmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Additive attention pooling parameters.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[2 * hidden, attention]`
    pub w: Var,
    /// `[attention]`
    pub b: Var,
    /// `[attention, 1]`
    pub v: Var,
}

impl AttentionParams {
    fn init(rng: &mut impl Rng, input: usize, attn: usize) -> Self {
        Self {
            w: Var::param(uniform(rng, &[input, attn], (6.0 / (input + attn) as f64).sqrt())),
            b: Var::param(Tensor::zeros(&[attn])),
            v: Var::param(uniform(rng, &[attn, 1], (6.0 / (attn + 1) as f64).sqrt())),
        }
    }

    /// Returns the pooled row `[1, D]` and the weights `[T, 1]`.
    fn pool(&self, hs: &Var) -> (Var, Var) {
        let u = hs.matmul(&self.w);
        let u = u.add(&self.b.expand(u.shape())).tanh();
        let alpha = u.matmul(&self.v).softmax_col();
        (alpha.matmul_t(hs, true, false), alpha)
    }
}

impl Parameterized for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
        f(&join(prefix, "v"), &self.v);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
        f(&join(prefix, "v"), &mut self.v);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `[vocab, embed]`
    pub embedding: Var,
    pub word_fwd: LstmParams,
    pub word_bwd: LstmParams,
    pub word_attention: AttentionParams,
    pub sent_fwd: LstmParams,
    pub sent_bwd: LstmParams,
    pub sent_attention: AttentionParams,
}

impl Parameterized for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(&join(prefix, "embedding"), &self.embedding);
        self.word_fwd.visit(&join(prefix, "word_fwd"), f);
        self.word_bwd.visit(&join(prefix, "word_bwd"), f);
        self.word_attention.visit(&join(prefix, "word_attention"), f);
        self.sent_fwd.visit(&join(prefix, "sent_fwd"), f);
        self.sent_bwd.visit(&join(prefix, "sent_bwd"), f);
        self.sent_attention.visit(&join(prefix, "sent_attention"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(&join(prefix, "embedding"), &mut self.embedding);
        self.word_fwd.visit_mut(&join(prefix, "word_fwd"), f);
        self.word_bwd.visit_mut(&join(prefix, "word_bwd"), f);
        self.word_attention.visit_mut(&join(prefix, "word_attention"), f);
        self.sent_fwd.visit_mut(&join(prefix, "sent_fwd"), f);
        self.sent_bwd.visit_mut(&join(prefix, "sent_bwd"), f);
        self.sent_attention.visit_mut(&join(prefix, "sent_attention"), f);
    }
}

/// Deterministic initialisation: scaled uniform weights, zero biases.
pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let EncoderConfig {
        vocab_size,
        embed_dim,
        hidden_dim,
        attention_dim,
    } = config;
    let two_h = 2 * hidden_dim;
    Ok(EncoderParams {
        config,
        embedding: Var::param(uniform(
            &mut rng,
            &[vocab_size, embed_dim],
            (3.0 / embed_dim as f64).sqrt(),
        )),
        word_fwd: LstmParams::init(&mut rng, embed_dim, hidden_dim),
        word_bwd: LstmParams::init(&mut rng, embed_dim, hidden_dim),
        word_attention: AttentionParams::init(&mut rng, two_h, attention_dim),
        sent_fwd: LstmParams::init(&mut rng, two_h, hidden_dim),
        sent_bwd: LstmParams::init(&mut rng, two_h, hidden_dim),
        sent_attention: AttentionParams::init(&mut rng, two_h, attention_dim),
    })
}

/// Report vector and the attention maps that produced it.
#[derive(Clone, Debug)]
pub struct ReportEmbedding {
    /// `[1, 2 * hidden]`
    pub c: Var,
    /// Per sentence, one weight per non-PAD token.
    pub word_attention: Vec<Vec<f64>>,
    pub sentence_attention: Vec<f64>,
}

fn bidirectional(fwd: &LstmParams, bwd: &LstmParams, xs: &Var) -> Var {
    let f = Var::concat(&fwd.run(xs, false), 0);
    let b = Var::concat(&bwd.run(xs, true), 0);
    Var::concat(&[f, b], 1)
}

/// Encodes one sentence; PAD positions are dropped before the recurrence.
pub fn encode_sentence(token_ids: &[u32], params: &EncoderParams) -> Result<(Var, Vec<f64>)> {
    let ids: Vec<usize> = token_ids.iter().filter(|&&t| t != PAD).map(|&t| t as usize).collect();
    if ids.is_empty() {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} >= vocabulary size {}",
            params.config.vocab_size
        )));
    }
    let xs = params.embedding.gather_rows(&ids);
    let hs = bidirectional(&params.word_fwd, &params.word_bwd, &xs);
    let (sent, alpha) = params.word_attention.pool(&hs);
    Ok((sent, alpha.value().data().to_vec()))
}

pub fn encode_report(report: &Report, params: &EncoderParams) -> Result<ReportEmbedding> {
    report.validate(params.config.vocab_size)?;
    let mut sentence_vecs = Vec::with_capacity(report.sentences.len());
    let mut word_attention = Vec::with_capacity(report.sentences.len());
    for s in &report.sentences {
        let (v, a) = encode_sentence(s, params)?;
        sentence_vecs.push(v);
        word_attention.push(a);
    }
    let xs = Var::concat(&sentence_vecs, 0);
    let hs = bidirectional(&params.sent_fwd, &params.sent_bwd, &xs);
    let (c, alpha) = params.sent_attention.pool(&hs);
    Ok(ReportEmbedding {
        c,
        word_attention,
        sentence_attention: alpha.value().data().to_vec(),
    })
}

/// Stacks the embeddings of several reports into `[N, 2 * hidden]`.
pub fn encode_batch(reports: &[&Report], params: &EncoderParams) -> Result<Var> {
    let cs = reports
        .iter()
        .map(|r| encode_report(r, params).map(|e| e.c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&cs, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(v: usize, e: usize, h: usize, a: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: v,
            embed_dim: e,
            hidden_dim: h,
            attention_dim: a,
        }
    }

    fn report(sentences: Vec<Vec<u32>>) -> Report {
        let lengths = sentences
            .iter()
            .map(|s| s.iter().filter(|&&t| t != PAD).count())
            .collect();
        Report { sentences, lengths }
    }

    #[test]
    fn singleton_softmax_is_exactly_one() {
        let p = init_encoder(cfg(10, 4, 3, 5), 1).unwrap();
        let (_, a) = encode_sentence(&[4], &p).unwrap();
        assert_eq!(a, vec![1.0]);
        let e = encode_report(&report(vec![vec![3, 4, 5]]), &p).unwrap();
        assert_eq!(e.sentence_attention, vec![1.0]);
    }

    #[test]
    fn identical_states_give_uniform_attention() {
        let mut p = init_encoder(cfg(10, 4, 3, 5), 1).unwrap();
        // equal embeddings, no recurrence and a closed forget gate: every
        // position produces the same hidden state
        p.embedding = Var::param(Tensor::full(&[10, 4], 0.3));
        for l in [&mut p.word_fwd, &mut p.word_bwd] {
            l.w_hh = Var::param(Tensor::zeros(l.w_hh.shape()));
            let mut b = Tensor::zeros(&[12]);
            b.data_mut()[3..6].fill(-1.0e3);
            l.bias = Var::param(b);
        }
        let (_, a) = encode_sentence(&[3, 5, 7, 9], &p).unwrap();
        for w in a {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn pad_is_masked_bit_exact() {
        let p = init_encoder(cfg(12, 4, 3, 5), 2).unwrap();
        let a = no_grad(|| encode_report(&report(vec![vec![3, 4], vec![5, 6, 7]]), &p).unwrap());
        let b = no_grad(|| encode_report(&report(vec![vec![3, 4, 0, 0, 0], vec![5, 6, 7, 0]]), &p).unwrap());
        assert_eq!(a.c.value(), b.c.value());
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = init_encoder(cfg(8, 3, 2, 2), 1).unwrap();
        let b = init_encoder(cfg(8, 3, 2, 2), 1).unwrap();
        let c = init_encoder(cfg(8, 3, 2, 2), 2).unwrap();
        assert_eq!(crate::nn::named_tensors(&a), crate::nn::named_tensors(&b));
        assert_ne!(crate::nn::named_tensors(&a), crate::nn::named_tensors(&c));
        assert_eq!(a.sent_fwd.bias.value(), &Tensor::zeros(&[8]));
    }

    #[test]
    fn hidden_128_gives_256_dim_embedding() {
        let p = init_encoder(cfg(6, 8, 128, 16), 0).unwrap();
        let e = no_grad(|| encode_report(&report(vec![vec![3, 4]]), &p).unwrap());
        assert_eq!(e.c.shape(), &[1, 256]);
    }

    #[test]
    fn errors() {
        let p = init_encoder(cfg(6, 2, 2, 2), 0).unwrap();
        assert!(encode_sentence(&[], &p).is_err());
        assert!(encode_sentence(&[0, 0], &p).is_err());
        assert!(encode_sentence(&[6], &p).is_err());
        assert!(init_encoder(cfg(6, 0, 2, 2), 0).is_err());
        assert!(encode_report(&report(vec![]), &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn attention_on_simplex(seed in any::<u64>(), lens in prop::collection::vec(1usize..6, 1..4)) {
            let p = init_encoder(cfg(20, 4, 3, 4), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
            let sentences = lens.iter().map(|&n| (0..n).map(|_| rng.gen_range(1..20)).collect()).collect();
            let e = no_grad(|| encode_report(&report(sentences), &p).unwrap());
            for a in e.word_attention.iter().chain(std::iter::once(&e.sentence_attention)) {
                prop_assert!(a.iter().all(|&w| w >= 0.0));
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert!(e.c.value().all_finite());
        }
    }
}

use std::sync::Arc;

use claimrisk_tensor::{AttentionLayout, Scalar, Tape, Tensor, Var};
use rand::RngCore;
use rayon::prelude::*;

use super::{block, block_param, head, head_param, EncoderError, EncoderState};
use super::{EMB_LN_B, EMB_LN_G, POS_EMB, SEG_EMB, TIME_EMB, TOKEN_EMB};
use crate::vocab::{LabeledSample, PAD_ID};

const LN_EPS: f64 = 1e-5;

/// Several sequences packed row-wise into one `[N, d]` input.
///
/// Sequences never attend to each other. Optional right padding with PAD
/// tokens exists for the padding-invariance contract; training packs
/// without padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub times: Vec<usize>,
    pub positions: Vec<usize>,
    pub layout: Arc<AttentionLayout>,
}

impl Batch {
    /// Packs `(tokens, segment ids, time-bucket ids)` triples, right-padding
    /// each to at least `pad_to` rows.
    pub fn new<'a>(seqs: impl IntoIterator<Item = (&'a [u32], &'a [u8], &'a [u8])>, pad_to: usize) -> Self {
        let mut b = Batch {
            ids: Vec::new(),
            segments: Vec::new(),
            times: Vec::new(),
            positions: Vec::new(),
            layout: Arc::new(AttentionLayout { spans: Vec::new(), key_padding: Vec::new() }),
        };
        let mut spans = Vec::new();
        let mut key_padding = Vec::new();
        for (tokens, segs, times) in seqs {
            let start = b.ids.len();
            let len = tokens.len().max(pad_to);
            for i in 0..len {
                let id = tokens.get(i).map_or(PAD_ID, |&t| t as usize);
                b.ids.push(id);
                b.segments.push(segs.get(i).map_or(0, |&s| s as usize));
                b.times.push(times.get(i).map_or(0, |&t| t as usize));
                b.positions.push(i);
                key_padding.push(id == PAD_ID);
            }
            spans.push((start, len));
        }
        b.layout = Arc::new(AttentionLayout { spans, key_padding });
        b
    }

    pub fn from_samples(samples: &[&LabeledSample], pad_to: usize) -> Self {
        Self::new(samples.iter().map(|s| (&s.tokens[..], &s.segment_ids[..], &s.time_bucket_ids[..])), pad_to)
    }

    pub fn n_sequences(&self) -> usize {
        self.layout.spans.len()
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    /// Row of each sequence's first (CLS) token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.layout.spans.iter().map(|&(s, _)| s).collect()
    }
}

/// Hidden states plus the attention node of every block (for probabilities).
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

fn check_ids(table: &'static str, ids: &[usize], rows: usize) -> Result<(), EncoderError> {
    match ids.iter().find(|&&i| i >= rows) {
        Some(&id) => Err(EncoderError::IdOutOfRange { table, id, rows }),
        None => Ok(()),
    }
}

impl<F: Scalar> EncoderState<F> {
    /// Records every parameter as a tape leaf, in parameter order.
    pub fn leaves(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Summed token, position, segment and time-bucket embeddings, layer-normed.
    pub fn embed_on(&self, tape: &mut Tape<F>, p: &[Var], batch: &Batch) -> Result<Var, EncoderError> {
        let c = &self.config;
        if batch.n_rows() == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        if let Some(&(_, len)) = batch.layout.spans.iter().find(|&&(_, l)| l > c.max_len) {
            return Err(EncoderError::SequenceTooLong { len, max_len: c.max_len });
        }
        check_ids("token", &batch.ids, c.vocab_size)?;
        check_ids("segment", &batch.segments, c.n_segments)?;
        check_ids("time_bucket", &batch.times, c.n_time_buckets + 1)?;
        let tok = tape.gather_rows(p[TOKEN_EMB], &batch.ids)?;
        let pos = tape.gather_rows(p[POS_EMB], &batch.positions)?;
        let seg = tape.gather_rows(p[SEG_EMB], &batch.segments)?;
        let time = tape.gather_rows(p[TIME_EMB], &batch.times)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        let x = tape.add(x, time)?;
        Ok(tape.layer_norm(x, p[EMB_LN_G], p[EMB_LN_B], F::of(LN_EPS))?)
    }

    /// Runs every block. Dropout is applied only when `rng` is given.
    pub fn encode_on(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        batch: &Batch,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward, EncoderError> {
        let c = &self.config;
        let rate = if rng.is_some() { c.dropout_rate } else { 0.0 };
        let mut x = self.embed_on(tape, p, batch)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, rate, r);
        }
        let mut attention = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let w = |k| p[block_param(l, k)];
            let q = tape.matmul(x, w(block::WQ))?;
            let q = tape.add_bias(q, w(block::BQ))?;
            let k = tape.matmul(x, w(block::WK))?;
            let k = tape.add_bias(k, w(block::BK))?;
            let v = tape.matmul(x, w(block::WV))?;
            let v = tape.add_bias(v, w(block::BV))?;
            let a = tape.attention(q, k, v, Arc::clone(&batch.layout), c.n_heads)?;
            attention.push(a);
            let o = tape.matmul(a, w(block::WO))?;
            let mut o = tape.add_bias(o, w(block::BO))?;
            if let Some(r) = rng.as_deref_mut() {
                o = tape.dropout(o, rate, r);
            }
            let r1 = tape.add(x, o)?;
            x = tape.layer_norm(r1, w(block::LN1_G), w(block::LN1_B), F::of(LN_EPS))?;
            let h = tape.matmul(x, w(block::W1))?;
            let h = tape.add_bias(h, w(block::B1))?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, w(block::W2))?;
            let mut h = tape.add_bias(h, w(block::B2))?;
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, rate, r);
            }
            let r2 = tape.add(x, h)?;
            x = tape.layer_norm(r2, w(block::LN2_G), w(block::LN2_B), F::of(LN_EPS))?;
        }
        Ok(Forward { hidden: x, attention })
    }

    /// Vocabulary logits `[positions, vocab]` at the given hidden rows.
    pub fn mtl_logits_on(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var, EncoderError> {
        let c = &self.config;
        let rows = tape.shape(hidden)[0];
        if let Some(&position) = positions.iter().find(|&&i| i >= rows) {
            return Err(EncoderError::PositionOutOfRange { position, rows });
        }
        let h = |k| p[head_param(c.n_layers, k)];
        if positions.is_empty() {
            return Ok(tape.constant(vec![0, c.vocab_size], Vec::new())?);
        }
        let x = tape.gather_rows(hidden, positions)?;
        let x = tape.matmul(x, h(head::MTL_W))?;
        let x = tape.add_bias(x, h(head::MTL_B))?;
        let x = tape.gelu(x);
        let x = tape.layer_norm(x, h(head::MTL_LN_G), h(head::MTL_LN_B), F::of(LN_EPS))?;
        let logits = tape.matmul_bt(x, p[TOKEN_EMB])?;
        Ok(tape.add_bias(logits, h(head::MTL_BIAS))?)
    }

    /// One logit per sequence `[n_sequences, 1]` from the CLS hidden state.
    pub fn classify_on(&self, tape: &mut Tape<F>, p: &[Var], hidden: Var, batch: &Batch) -> Result<Var, EncoderError> {
        let h = |k| p[head_param(self.config.n_layers, k)];
        let cls = tape.gather_rows(hidden, &batch.cls_rows())?;
        let z = tape.matmul(cls, h(head::CLS_W))?;
        Ok(tape.add_bias(z, h(head::CLS_B))?)
    }

    fn single(sample: &LabeledSample) -> Batch {
        Batch::from_samples(&[sample], 0)
    }

    /// `[L, d_model]` input embeddings of one sample.
    pub fn embed(&self, sample: &LabeledSample) -> Result<Tensor<F>, EncoderError> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let x = self.embed_on(&mut tape, &p, &Self::single(sample))?;
        Ok(tape.to_tensor(x))
    }

    /// Inference-mode hidden states `[L, d_model]` and post-softmax attention
    /// `[n_layers, n_heads, L, L]` of one sample.
    pub fn encode(&self, sample: &LabeledSample) -> Result<(Tensor<F>, Tensor<F>), EncoderError> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let fwd = self.encode_on(&mut tape, &p, &Self::single(sample), None)?;
        let len = sample.len();
        let mut att = Vec::with_capacity(self.config.n_layers * self.config.n_heads * len * len);
        for &a in &fwd.attention {
            let (probs, offsets) = tape.attention_probs(a).expect("attention node");
            att.extend_from_slice(&probs[offsets[0]..offsets[0] + self.config.n_heads * len * len]);
        }
        let att = Tensor::new(vec![self.config.n_layers, self.config.n_heads, len, len], att)?;
        Ok((tape.to_tensor(fwd.hidden), att))
    }

    pub fn mtl_logits(&self, hidden: &Tensor<F>, positions: &[usize]) -> Result<Tensor<F>, EncoderError> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let h = tape.leaf(hidden);
        let out = self.mtl_logits_on(&mut tape, &p, h, positions)?;
        Ok(tape.to_tensor(out))
    }

    /// Logit of the classifier from `hidden` `[L, d_model]` (row 0 is CLS).
    pub fn classify(&self, hidden: &Tensor<F>) -> Result<F, EncoderError> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let h = tape.leaf(hidden);
        let batch = Batch {
            ids: Vec::new(),
            segments: Vec::new(),
            times: Vec::new(),
            positions: Vec::new(),
            layout: Arc::new(AttentionLayout { spans: vec![(0, hidden.shape()[0])], key_padding: Vec::new() }),
        };
        let z = self.classify_on(&mut tape, &p, h, &batch)?;
        Ok(tape.scalar(z))
    }

    /// Inference-mode classifier logits for every sample, in input order.
    pub fn predict_logits(&self, samples: &[LabeledSample], batch_size: usize) -> Result<Vec<f64>, EncoderError> {
        let chunks: Vec<Vec<f64>> = samples
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let refs: Vec<&LabeledSample> = chunk.iter().collect();
                let batch = Batch::from_samples(&refs, 0);
                let mut tape = Tape::new();
                let p = self.leaves(&mut tape);
                let fwd = self.encode_on(&mut tape, &p, &batch, None)?;
                let z = self.classify_on(&mut tape, &p, fwd.hidden, &batch)?;
                Ok(tape.value(z).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
            })
            .collect::<Result<_, EncoderError>>()?;
        Ok(chunks.concat())
    }

    /// Sigmoid of [`EncoderState::predict_logits`].
    pub fn predict_proba(&self, samples: &[LabeledSample], batch_size: usize) -> Result<Vec<f64>, EncoderError> {
        Ok(self.predict_logits(samples, batch_size)?.into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{EncoderConfig, Stage};
    use super::*;
    use claimrisk_tensor::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VOCAB: usize = 20;

    fn tiny() -> EncoderConfig {
        EncoderConfig { max_len: 12, dropout_rate: 0.0, ..EncoderConfig::with_width(8, VOCAB) }
    }

    fn sample(tokens: Vec<u32>, times: Vec<u8>) -> LabeledSample {
        let n = tokens.len();
        LabeledSample {
            segment_ids: (0..n).map(|i| (i * 4 / n.max(1)) as u8).collect(),
            time_bucket_ids: times,
            tokens,
            label: 0,
            beneficiary_id: "b".into(),
            race: "1".into(),
            gender: "F".into(),
            index_claim_id: "c".into(),
            history_claim_ids: Vec::new(),
        }
    }

    fn random_sample(rng: &mut impl Rng, len: usize) -> LabeledSample {
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(5..VOCAB as u32)).collect();
        tokens[0] = 3;
        let times = (0..len).map(|_| rng.gen_range(0..6)).collect();
        sample(tokens, times)
    }

    #[test]
    fn time_buckets_change_embeddings() {
        let s = EncoderState::<f64>::init(tiny(), 0, 1).unwrap();
        let a = sample(vec![3, 7, 8, 4], vec![0, 1, 1, 0]);
        let b = sample(vec![3, 7, 8, 4], vec![0, 3, 3, 0]);
        assert_ne!(s.embed(&a).unwrap(), s.embed(&b).unwrap());
    }

    #[test]
    fn zero_tables_give_zero_embeddings() {
        let mut s = EncoderState::<f64>::init(tiny(), 0, 1).unwrap();
        for i in [TOKEN_EMB, POS_EMB, SEG_EMB, TIME_EMB] {
            s.params_mut()[i].1.data_mut().fill(0.0);
        }
        let e = s.embed(&sample(vec![3, 9, 4], vec![0; 3])).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let s = EncoderState::<f32>::init(tiny(), 0, 1).unwrap();
        let bad = sample(vec![3, VOCAB as u32], vec![0, 0]);
        assert!(matches!(s.embed(&bad), Err(EncoderError::IdOutOfRange { table: "token", .. })));
        let long = sample(vec![3; 13], vec![0; 13]);
        assert!(matches!(s.embed(&long), Err(EncoderError::SequenceTooLong { .. })));
        let h = s.encode(&sample(vec![3, 5], vec![0, 0])).unwrap().0;
        assert!(matches!(s.mtl_logits(&h, &[2]), Err(EncoderError::PositionOutOfRange { position: 2, rows: 2 })));
    }

    #[test]
    fn cls_only_input_attends_to_itself() {
        let s = EncoderState::<f32>::init(tiny(), 0, 1).unwrap();
        let (h, att) = s.encode(&sample(vec![3], vec![0])).unwrap();
        assert!(h.data().iter().all(|v| v.is_finite()));
        assert!(att.data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn untrained_mtl_loss_near_uniform() {
        let s = EncoderState::<f32>::init(tiny(), 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_sample(&mut rng, 10);
        let (h, _) = s.encode(&x).unwrap();
        assert_eq!(s.mtl_logits(&h, &[]).unwrap().shape(), [0, VOCAB]);
        let logits = s.mtl_logits(&h, &[1, 2, 3]).unwrap();
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(&logits);
        let loss = tape.cross_entropy(l, &[5, 6, 7]).unwrap();
        assert!((tape.scalar(loss) - (VOCAB as f32).ln()).abs() < 0.3, "{}", tape.scalar(loss));
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut s = EncoderState::<f64>::init(tiny(), 0, 1).unwrap();
        s.param_mut("classifier.w").unwrap().data_mut().fill(0.0);
        let x = sample(vec![3, 8, 9, 4], vec![0; 4]);
        let p = s.predict_proba(&[x.clone()], 4).unwrap()[0];
        assert_eq!(p, 0.5);
        let (h, _) = s.encode(&x).unwrap();
        assert_eq!(s.classify(&h).unwrap(), 0.0);
    }

    #[test]
    fn padding_does_not_change_real_rows() {
        let s = EncoderState::<f64>::init(tiny(), 0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_sample(&mut rng, 7);
        let run = |pad: usize| {
            let batch = Batch::from_samples(&[&x], pad);
            let mut tape = Tape::new();
            let p = s.leaves(&mut tape);
            let f = s.encode_on(&mut tape, &p, &batch, None).unwrap();
            let z = s.classify_on(&mut tape, &p, f.hidden, &batch).unwrap();
            (tape.value(f.hidden)[..7 * 8].to_vec(), tape.scalar(z))
        };
        let (h0, z0) = run(0);
        for pad in [9, 12] {
            let (h, z) = run(pad);
            assert!(h.iter().zip(&h0).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((z - z0).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_batch_matches_single_samples() {
        let s = EncoderState::<f64>::init(tiny(), 0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<LabeledSample> = (0..5).map(|i| random_sample(&mut rng, 3 + i)).collect();
        let packed = s.predict_logits(&xs, 5).unwrap();
        let single = s.predict_logits(&xs, 1).unwrap();
        assert!(packed.iter().zip(&single).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn inference_is_deterministic() {
        let s = EncoderState::<f32>::init(EncoderConfig { dropout_rate: 0.1, ..tiny() }, 0, 3).unwrap();
        let x = sample(vec![3, 8, 9, 10, 4], vec![0; 5]);
        assert_eq!(s.encode(&x).unwrap(), s.encode(&x).unwrap());
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let state = EncoderState::<f64>::init(tiny(), 0, 7).unwrap();
        let xs = [random_sample(&mut rng, 12), random_sample(&mut rng, 9)];
        let refs: Vec<&LabeledSample> = xs.iter().collect();
        let batch = Batch::from_samples(&refs, 0);
        let positions = [2, 5, 14, 17];
        let targets = [6, 9, 11, 5];
        let loss = |tape: &mut Tape<f64>, p: &[Var]| {
            let f = state.encode_on(tape, p, &batch, None).expect("forward");
            let m = state.mtl_logits_on(tape, p, f.hidden, &positions).expect("mtl");
            let m = tape.cross_entropy(m, &targets)?;
            let z = state.classify_on(tape, p, f.hidden, &batch).expect("classify");
            let c = tape.binary_cross_entropy(z, &[1.0, 0.0])?;
            tape.add(m, c)
        };
        let report = grad_check(loss, state.params(), GradCheckConfig { step: 1e-5, rel_tol: 1e-4, abs_tol: 1e-6 }).unwrap();
        assert!(report.passed, "{:?}", report.inputs.iter().filter(|r| !r.passed).collect::<Vec<_>>());
        assert_eq!(report.inputs.len(), state.params().len());
    }

    #[test]
    fn stage_controls_which_grads_exist() {
        let mut s = EncoderState::<f32>::init(tiny(), 0, 7).unwrap();
        s.set_stage(Stage::Finetune);
        let x = sample(vec![3, 8, 9, 4], vec![0; 4]);
        let batch = Batch::from_samples(&[&x], 0);
        let mut tape = Tape::new();
        let p = s.leaves(&mut tape);
        let f = s.encode_on(&mut tape, &p, &batch, None).unwrap();
        let z = s.classify_on(&mut tape, &p, f.hidden, &batch).unwrap();
        let loss = tape.binary_cross_entropy(z, &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        for (i, (name, _)) in s.params().iter().enumerate() {
            let active = s.stage_params(Stage::Finetune).contains(&i);
            assert_eq!(tape.grad(p[i]).is_some(), active, "{name}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..1000, lens in prop::collection::vec(1usize..12, 1..4), pad in 0usize..12) {
            let s = EncoderState::<f64>::init(tiny(), 0, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<LabeledSample> = lens.iter().map(|&l| random_sample(&mut rng, l)).collect();
            let refs: Vec<&LabeledSample> = xs.iter().collect();
            let batch = Batch::from_samples(&refs, pad);
            let mut tape = Tape::new();
            let p = s.leaves(&mut tape);
            let f = s.encode_on(&mut tape, &p, &batch, None).unwrap();
            for &a in &f.attention {
                let (probs, offsets) = tape.attention_probs(a).unwrap();
                for (span, &(start, len)) in batch.layout.spans.iter().enumerate() {
                    for h in 0..2 {
                        for i in 0..len {
                            let row = &probs[offsets[span] + h * len * len + i * len..][..len];
                            let total: f64 = row.iter().sum();
                            prop_assert!((total - 1.0).abs() < 1e-6);
                            for (j, &pj) in row.iter().enumerate() {
                                if batch.layout.key_padding[start + j] {
                                    prop_assert_eq!(pj, 0.0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#![allow(dead_code)]

use nsp_bert::model::{Batch, EncoderConfig, EncoderModel};
use nsp_bert::tokenizer::{EncodedPair, SPECIALS};
use nsp_bert::tuning::{objective_loss, LinearHead, Objective};
use nsp_tensor::gradcheck::{central_differences, relative_error, OpCheck, CASES, STEP};
use nsp_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Micro-preset dimensions with a small vocabulary.
pub fn micro_config(vocab: usize) -> EncoderConfig {
    EncoderConfig::preset(nsp_bert::Preset::Micro, vocab)
}

pub fn random_pair(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> EncodedPair {
    let first = SPECIALS.len();
    let a: Vec<usize> = (0..rng.random_range(1..6))
        .map(|_| rng.random_range(first..vocab))
        .collect();
    let b: Vec<usize> = (0..rng.random_range(1..6))
        .map(|_| rng.random_range(first..vocab))
        .collect();
    EncodedPair::from_ids(&a, &b, max_len).unwrap()
}

/// Finite-difference check of a whole-model objective. Every case draws a
/// fresh model and batch; two coordinates of every parameter tensor are
/// compared, word-embedding coordinates drawn from rows the batch uses.
pub fn encoder_gradcheck(
    name: &'static str,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng, usize) -> Objective,
    pairs_per_case: usize,
    with_head: bool,
) -> OpCheck {
    const VOCAB: usize = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for case in 0..CASES {
        let model = EncoderModel::new(micro_config(VOCAB), seed * 1000 + case as u64).unwrap();
        let head = with_head.then(|| LinearHead::new(3, model.config().hidden, case as u64));
        let pairs: Vec<EncodedPair> = (0..pairs_per_case)
            .map(|_| random_pair(&mut rng, VOCAB, 16))
            .collect();
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let batch = Batch::new(&refs).unwrap();
        let objective = make(&mut rng, pairs_per_case);

        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let hv = head
            .as_ref()
            .map(|h| (tape.leaf(&h.weight), tape.leaf(&h.bias)));
        let loss = objective_loss(
            &model,
            &mut tape,
            &bound,
            head.as_ref().zip(hv),
            &batch,
            &objective,
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut tensors: Vec<&nsp_tensor::Tensor> = model.params().iter().collect();
        if let Some(h) = &head {
            tensors.push(&h.weight);
            tensors.push(&h.bias);
        }
        let mut vars = bound.vars.clone();
        if let Some((w, b)) = hv {
            vars.push(w);
            vars.push(b);
        }
        let used: Vec<usize> = batch.ids.clone();
        let hidden = model.config().hidden;
        let mut coords = Vec::new();
        for (i, t) in tensors.iter().enumerate() {
            for _ in 0..2 {
                let j = if i == 0 {
                    used[rng.random_range(0..used.len())] * hidden + rng.random_range(0..hidden)
                } else {
                    rng.random_range(0..t.len())
                };
                coords.push((i, j));
            }
        }
        let analytic: Vec<f32> = coords
            .iter()
            .map(|&(i, j)| grads.get(vars[i]).map_or(0.0, |g| g[j]))
            .collect();

        let base: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let n_model = model.params().len();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let bound = model.bind_with(&mut tape, |tape, i, t| {
                tape.constant(t.shape(), vals[i].clone()).unwrap()
            });
            let hv = head.as_ref().map(|h| {
                (
                    tape.constant(h.weight.shape(), vals[n_model].clone())
                        .unwrap(),
                    tape.constant(h.bias.shape(), vals[n_model + 1].clone())
                        .unwrap(),
                )
            });
            let loss = objective_loss(
                &model,
                &mut tape,
                &bound,
                head.as_ref().zip(hv),
                &batch,
                &objective,
            )
            .unwrap();
            tape.value(loss)[0]
        };
        let numeric = central_differences(eval, &base, &coords, STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    OpCheck {
        name,
        cases: CASES,
        worst,
    }
}

/// The NSP-tuning loss: mean BCE of q(IsNext) over coupled instances.
pub fn nsp_tuning_gradcheck() -> OpCheck {
    encoder_gradcheck(
        "encoder_nsp_tuning_bce",
        41,
        |rng, n| {
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n / 2 {
                let gold = rng.random_range(0..2);
                targets.extend((0..2).map(|c| if c == gold { 1.0 } else { 0.0 }));
            }
            Objective::Bce(targets)
        },
        4,
        false,
    )
}

use diffvqa_core::checks::gradient_suite;
use diffvqa_core::model::{DiffVqaModel, ModelConfig, Vocabulary};
use diffvqa_core::optim::AdamConfig;
use diffvqa_core::registration::RegLossWeights;
use diffvqa_core::synth::{generate_pair, sample_seed, SynthConfig};
use diffvqa_core::train::{GradCam, OnesMask, Sample, Trainer};

fn toy_samples(n: u64) -> (Vocabulary, Vec<Sample>) {
    let vocab = Vocabulary::synthetic();
    let s = (0..n)
        .map(|i| {
            let p = generate_pair(sample_seed(17, i), &SynthConfig::default()).unwrap();
            Sample {
                question: vocab.encode(&p.question).unwrap(),
                answer: vocab.encode(&p.answer).unwrap(),
                answer_text: p.answer,
                main: p.main,
                reference: p.reference,
            }
        })
        .collect();
    (vocab, s)
}

fn trainer(vocab: Vocabulary, seed: u64) -> Trainer {
    let model = DiffVqaModel::new(ModelConfig::toy(), vocab, seed).unwrap();
    let adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    Trainer::new(model, adam, RegLossWeights::default())
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let reports = gradient_suite(3).unwrap();
    assert!(reports.len() > 10);
    for r in &reports {
        assert!(r.passed(), "{}: rel err {:e} > {:e}", r.name, r.max_rel_err, r.tol);
    }
}

/// The toy model memorizes a handful of pairs.
#[test]
fn overfits_a_small_batch() {
    let (vocab, batch) = toy_samples(4);
    let mut t = trainer(vocab, 1);
    let first = t.step_warmup(&batch).unwrap().l_lm;
    let mut last = first;
    for _ in 0..40 {
        last = t.step_warmup(&batch).unwrap().l_lm;
    }
    assert!(last < 0.3 * first, "l_lm {first} -> {last}");
}

#[test]
fn ones_mask_step_equals_warmup_step() {
    let (vocab, batch) = toy_samples(2);
    let mut a = trainer(vocab.clone(), 5);
    let mut b = trainer(vocab, 5);
    let la = a.step_warmup(&batch).unwrap();
    let lb = b.step_masked(&batch, &mut OnesMask).unwrap();
    assert_eq!(la.total, lb.total);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn masked_step_calls_gradcam_once_per_sample() {
    let (vocab, batch) = toy_samples(3);
    let mut t = trainer(vocab, 8);
    let mut cam = GradCam::default();
    let l = t.step_masked(&batch, &mut cam).unwrap();
    assert_eq!(cam.calls, l.masked);
    assert_eq!(l.masked + l.fallback, batch.len());
    assert!(l.total.is_finite());
}

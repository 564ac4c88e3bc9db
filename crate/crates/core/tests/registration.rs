use diffvqa_core::model::{DiffVqaModel, ModelConfig, Vocabulary};
use diffvqa_core::registration::{fit_affine_mse, reg_loss, warp_values, AffineParams, RegLossWeights};
use diffvqa_core::rng::{self, uniform};
use diffvqa_core::synth::{generate_pair, sample_seed, Change, StudyPair, SynthConfig};
use diffvqa_core::tensor::{Graph, Tensor};
use diffvqa_core::train::register;

#[test]
fn identity_is_exact() {
    let mut g = Graph::new();
    let th = g.constant(AffineParams::to_tensor(&[AffineParams::IDENTITY]));
    let l = reg_loss(&mut g, th, &RegLossWeights::default()).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let mut r = rng::stream(3, 0);
    let img = Tensor::from_fn(&[1, 1, 64, 64], |_| uniform(&mut r, 0.0, 1.0));
    let out = warp_values(&img, &[AffineParams::IDENTITY]).unwrap();
    assert!(out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let model = DiffVqaModel::new(ModelConfig::toy(), Vocabulary::synthetic(), 9).unwrap();
    let p = generate_pair(sample_seed(1, 0), &SynthConfig::default()).unwrap();
    let (theta, warped) = register(&model, &p.main, &p.reference).unwrap();
    assert_eq!(theta, AffineParams::IDENTITY);
    assert_eq!(warped, p.main);
}

/// Pairs that differ only by a translation + rotation nuisance warp.
fn nuisance_pairs(n: usize) -> Vec<StudyPair> {
    let cfg = SynthConfig {
        scale_range: (1.0, 1.0),
        ..SynthConfig::default()
    };
    (0..)
        .map(|i| generate_pair(sample_seed(21, i), &cfg).unwrap())
        .filter(|p| p.change == Change::Unchanged)
        .take(n)
        .collect()
}

/// Fitting by pixel MSE recovers the inverse of the nuisance warp.
#[test]
fn mse_fit_recovers_nuisance_warps() {
    let mut ok = 0;
    for p in nuisance_pairs(20) {
        let want = p.theta_star.inverse().unwrap();
        let fit = fit_affine_mse(&p.main, &p.reference, &RegLossWeights::default(), 300, 0.01).unwrap();
        let (a, b) = (fit.theta.translation_px(64, 64), want.translation_px(64, 64));
        let err = (a[0] - b[0]).abs().max((a[1] - b[1]).abs());
        if err <= 0.5 && (fit.theta.det() - 1.0).abs() <= 0.05 {
            ok += 1;
        }
    }
    assert!(ok >= 18, "{ok}/20 recovered");
}

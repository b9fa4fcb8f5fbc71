//! Analytic properties of the toy backends and the toy world.

use demorph_core::backends::{similarity, Backends};
use demorph_core::config::{BackendConfig, CorpusConfig, MorphMethod, RunConfig};
use demorph_core::tensor::Tensor;
use demorph_core::toyworld::*;
use demorph_core::training::{train, TrainState, TrainingSet};
use demorph_core::types::{FeatureMap, LatentCode};
use demorph_core::util::{normal_tensor, rng_for};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RENDERS: u64 = 100;

fn toy_world(corpus: &CorpusConfig) -> ToyWorld {
    ToyWorld::new(Backends::toy(&BackendConfig::toy()).unwrap(), corpus.id_dim).unwrap()
}

fn code(cfg: &BackendConfig, seed: u64) -> (FeatureMap, LatentCode) {
    let mut r = rng_for(seed, "analytic", 0);
    let f = FeatureMap::from_tensor(normal_tensor(&mut r, &cfg.feat_shape(), 0.3)).unwrap();
    let w = LatentCode::from_tensor(normal_tensor(&mut r, &[cfg.tail_layers(), cfg.latent_dim], 0.3)).unwrap();
    (f, w)
}

/// `synthesize(aF1 + bF2, aw1 + bw2) = a·synthesize(F1, w1) + b·synthesize(F2, w2)`
/// with `a + b = 1`, to 1e-6.
pub fn generator_is_affine() {
    let b = Backends::toy(&BackendConfig::toy()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for k in 0..RENDERS {
        let (f1, w1) = code(&b.config, 2 * k);
        let (f2, w2) = code(&b.config, 2 * k + 1);
        let a: f64 = r.random_range(-1.0..2.0);
        let mix = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| a * p + (1.0 - a) * q);
        let fm = FeatureMap::from_tensor(mix(f1.tensor(), f2.tensor())).unwrap();
        let wm = LatentCode::from_tensor(mix(w1.tensor(), w2.tensor())).unwrap();
        let lhs = b.generator.synthesize(&fm, &wm).unwrap();
        let i1 = b.generator.synthesize(&f1, &w1).unwrap();
        let i2 = b.generator.synthesize(&f2, &w2).unwrap();
        assert!(lhs.tensor().max_abs_diff(&mix(i1.tensor(), i2.tensor())) <= 1e-6);
    }
}

/// Document renders survive encode then synthesize to 1e-4, and blends of
/// them encode to the blend of the features to 1e-5.
pub fn encode_synthesize_round_trip() {
    let cfg = RunConfig::toy().corpus;
    let world = toy_world(&cfg);
    let b = &world.backends;
    let k = b.config.injection_layer_k;
    let mut r = rng_for(32, "ids", 0);
    let ids: Vec<ToyIdentity> = (0..=RENDERS).map(|i| sample_identity(&mut r, cfg.id_dim, format!("x{i}"))).collect();
    let docs: Vec<_> = ids.iter().map(|i| world.render(i, &CaptureParams::document(), &mut r).unwrap()).collect();
    for i in 0..RENDERS as usize {
        let (w, f) = b.encoder.encode(&docs[i]).unwrap();
        assert!(f.tensor().max_abs_diff(world.features(&ids[i]).unwrap().tensor()) <= 1e-5);
        let back = b.generator.synthesize(&f, &w.tail(k).unwrap()).unwrap();
        assert!(back.tensor().max_abs_diff(docs[i].tensor()) <= 1e-4);

        let alpha = 0.5;
        let morph = morph_blend(&docs[i], &docs[i + 1], alpha).unwrap();
        let (_, fm) = b.encoder.encode(&morph).unwrap();
        let fa = world.features(&ids[i]).unwrap();
        let fc = world.features(&ids[i + 1]).unwrap();
        let want = fa.tensor().zip_map(fc.tensor(), |x, y| alpha * x + (1.0 - alpha) * y);
        assert!(fm.tensor().max_abs_diff(&want) <= 1e-5);
    }
}

/// The frozen backends hash identically before and after 200 steps while
/// the trainable modules move.
pub fn frozen_digests_survive_training() {
    let mut cfg = RunConfig::toy();
    cfg.corpus.n_identities = 16;
    let world = ToyWorld::new(Backends::toy(&cfg.backend).unwrap(), cfg.corpus.id_dim).unwrap();
    let corpus = build_corpus(&cfg.corpus, &world).unwrap();
    let set = TrainingSet::from_corpus(&corpus).unwrap();
    let b = &world.backends;
    let frozen = b.frozen_digest();
    let parts = [b.encoder.parameter_digest(), b.generator.parameter_digest(), b.frs.parameter_digest(), b.perceptual.parameter_digest()];
    let mut st = TrainState::new(&cfg).unwrap();
    let modules = st.model.digest();
    train(&mut st, &set, &cfg, b, 200, |_, _| Ok(())).unwrap();
    assert_eq!(st.step, 200);
    assert_eq!(b.frozen_digest(), frozen);
    let after = [b.encoder.parameter_digest(), b.generator.parameter_digest(), b.frs.parameter_digest(), b.perceptual.parameter_digest()];
    assert_eq!(after, parts);
    assert_ne!(st.model.digest(), modules);
}

/// Share of held-out accepted blend morphs whose analytic demorph, built
/// from the morph and the partner's live reference, verifies against the
/// missing contributor's document at the corpus threshold.
pub fn blend_oracle_recovery_rate(corpus: &Corpus, world: &ToyWorld) -> f64 {
    let b = &world.backends;
    let k = b.config.injection_layer_k;
    let blends: Vec<&MorphEntry> = corpus.morphs_in(Split::Test, true).filter(|m| m.method == MorphMethod::Blend).collect();
    assert!(!blends.is_empty());
    let hits = blends
        .iter()
        .filter(|m| {
            let (a, c) = (&corpus.identities[m.a], &corpus.identities[m.c]);
            let (w, f_morph) = b.encoder.encode(&m.image).unwrap();
            let (_, f_ref) = b.encoder.encode(&c.live[0]).unwrap();
            let f_out = analytic_demorph_oracle(&f_morph, &f_ref, m.alpha).unwrap();
            let out = b.generator.synthesize(&f_out, &w.tail(k).unwrap()).unwrap();
            similarity(&b.frs.embed(&out).unwrap(), &b.frs.embed(&a.doc).unwrap()) >= corpus.tau()
        })
        .count();
    hits as f64 / blends.len() as f64
}

pub fn oracle_gate() -> f64 {
    let cfg = RunConfig::toy();
    let world = ToyWorld::new(Backends::toy(&cfg.backend).unwrap(), cfg.corpus.id_dim).unwrap();
    let corpus = build_corpus(&cfg.corpus, &world).unwrap();
    blend_oracle_recovery_rate(&corpus, &world)
}

#[cfg(test)]
mod tests {
    #[test]
    fn generator_is_affine() {
        super::generator_is_affine();
    }

    #[test]
    fn encode_synthesize_round_trip() {
        super::encode_synthesize_round_trip();
    }

    #[test]
    fn frozen_digests_survive_training() {
        super::frozen_digests_survive_training();
    }

    #[test]
    fn analytic_oracle_recovers_the_missing_contributor() {
        let rate = super::oracle_gate();
        assert!(rate >= 0.95, "{rate}");
    }
}

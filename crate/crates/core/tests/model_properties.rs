use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spacetoken::model::{build_example, embed_stream, embed_views, forward, init_params, CoordMode, ModelConfig, StreamRole};
use spacetoken::prompt::corpus_vocab;
use spacetoken::scene::{generate_scene, SceneConfig};
use spacetoken::tokens::StreamElement;
use spacetoken::train::{batch_objective, lm_labels, RegLossKind, TrainConfig};
use spacetoken_diff::{GradCheck, Tensor, IGNORE_INDEX};

fn small() -> ModelConfig {
    ModelConfig { width: 32, layers: 2, heads: 2, image: 16, patch: 8, ..ModelConfig::default() }
}

fn examples(cfg: &ModelConfig, seeds: &[u64]) -> Vec<spacetoken::model::Example> {
    let vocab = corpus_vocab();
    let sc = SceneConfig { image: cfg.image, ..SceneConfig::default() };
    seeds.iter().map(|&s| build_example(&generate_scene(s, &sc).unwrap(), &vocab, cfg).unwrap()).collect()
}

fn check(cfg: ModelConfig, loss: RegLossKind) {
    let vocab = corpus_vocab();
    // Zero-initialized biases map blank patches to all-zero rows, where layer
    // norm is nearly singular; jitter every parameter to a generic point.
    let mut store = init_params(&cfg, vocab.len(), 17).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (_, p) in store.iter_mut() {
        p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    let batch = examples(&cfg, &[2, 5]);
    let train = TrainConfig { loss, ..TrainConfig::default() };
    let ind = vocab.ind();
    let gc = GradCheck { step: 1e-5, floor: 1e-4, max_per_param: Some(24) };
    let report = gc
        .run(&store, |b| Ok::<_, spacetoken::Error>(batch_objective(b, &cfg, &train, &batch, ind, 0)?.0), 1e-4)
        .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passed(), "{:?} worst {} rel {:e}", cfg.mode, worst.name, worst.max_rel_err);
}

#[test]
fn spatial_model_gradients_match_finite_differences() {
    check(small(), RegLossKind::Huber);
}

#[test]
fn digit_model_gradients_match_finite_differences() {
    check(small().digit_baseline(), RegLossKind::Huber);
}

#[test]
fn learned_encoder_and_task_specific_gradients() {
    let cfg = ModelConfig { spatial_encoder: spacetoken::model::SpatialEncoder::LearnedMlp, task_specific: true, ..small() };
    check(cfg, RegLossKind::Mse);
}

#[test]
fn ignored_rows_receive_no_gradient() {
    let cfg = small();
    let vocab = corpus_vocab();
    let ex = &examples(&cfg, &[3])[0];
    let labels = lm_labels(ex.target.elements(), vocab.ind());
    let v = vocab.extended_len();
    let n = labels.len();
    let data: Vec<f64> = (0..n * v).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
    let logits = Tensor::param(&[n, v], data).unwrap();
    logits.cross_entropy(&labels).unwrap().backward().unwrap();
    let grad = logits.grad().unwrap();
    let elements = ex.target.elements();
    for (k, label) in labels.iter().enumerate() {
        let row = &grad[k * v..(k + 1) * v];
        if *label == IGNORE_INDEX {
            assert!(matches!(elements[k], StreamElement::Spatial { .. }));
            assert!(row.iter().all(|g| *g == 0.0));
        } else {
            assert!(row.iter().any(|g| *g != 0.0));
            if elements[k] == StreamElement::Indicator {
                assert_eq!(*label, vocab.ind());
            }
        }
    }
    assert_eq!(labels.iter().filter(|l| **l == IGNORE_INDEX).count(), cfg.horizon);
}

#[test]
fn flags_off_reduce_to_plain_transformer() {
    let vocab = corpus_vocab();
    let spatial = ModelConfig { inject_visual: false, encode_text_coords: false, encode_ego: false, ..small() };
    let plain = small().digit_baseline();
    let ps = init_params(&spatial, vocab.len(), 9).unwrap();
    let pp = init_params(&plain, vocab.len(), 9).unwrap();
    // The only extra parameters are the coordinate decoder and the scale.
    let extra: Vec<&str> = ps.names().filter(|n| !pp.contains(n)).collect();
    assert!(extra.iter().all(|n| n.starts_with("psi.") || *n == "pe.alpha"), "{extra:?}");
    assert!(pp.names().all(|n| ps.contains(n) && ps.get(n).unwrap().data == pp.get(n).unwrap().data));
    let extra_scalars: usize = extra.iter().map(|n| ps.get(n).unwrap().data.len()).sum();
    assert_eq!(ps.num_scalars() - extra_scalars, pp.num_scalars());

    // With shared weights and a coordinate-free prompt the two are the same function.
    let ex_s = &examples(&spatial, &[4])[0];
    let ex_p = &examples(&plain, &[4])[0];
    let (bs, bp) = (ps.bind_frozen(), pp.bind_frozen());
    let run = |cfg: &ModelConfig, b, ex: &spacetoken::model::Example| {
        let visual = embed_views(b, cfg, &ex.inputs).unwrap();
        let prompt = embed_stream(b, cfg, &ex.prompt, &ex.inputs, StreamRole::Prompt).unwrap();
        forward(b, cfg, &visual, &prompt).unwrap().logits.to_vec()
    };
    assert_eq!(ex_s.prompt, ex_p.prompt);
    assert_eq!(run(&spatial, &bs, ex_s), run(&plain, &bp, ex_p));
    assert_eq!(plain.mode, CoordMode::DigitText);
}

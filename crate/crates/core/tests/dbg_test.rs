// temporary debug: per-param gradcheck for the discriminator test
#[test]
fn debug_disc_gradcheck() {
    use egopath::discriminator::*;
    use egopath::backbone::VisualContext;
    use egopath::params::ParamStore;
    use egopath::tape::{gradcheck, Tape, Var};
    use egopath::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let cfg = DiscriminatorConfig {
        path_hidden: 6, intent_hidden: 4, feature_dim: 5, attn_dim: 4, embed_dim: 5, path_len: 4,
    };
    let disc = Discriminator::register(&mut store, "disc", cfg, &mut rng);
    let v_values = Tensor::randn(&[5, 5], 0.8, &mut rng);
    let paths: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 2], 1.0, &mut rng)).collect();
    let intents: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 9], 0.5, &mut rng)).collect();

    let build = |ps: &ParamStore, tape: &mut Tape| -> Var {
        let positions: Vec<Var> = paths.iter().map(|p| tape.constant(p.clone())).collect();
        let features = tape.constant(v_values.clone());
        let v = VisualContext { features, m: 5, dim: 5 };
        let out = disc.score_path(tape, ps, &positions, &v).unwrap();
        let ivars: Vec<Var> = intents.iter().map(|p| tape.constant(p.clone())).collect();
        let seq = disc.score_intentions(tape, ps, &ivars).unwrap();
        let s1 = tape.sum_all(out.realism);
        let sq = tape.mul(out.class_logits, out.class_logits);
        let s2 = tape.sum_all(sq);
        let s3 = tape.sum_all(seq.realism);
        let t = tape.add(s1, s2);
        tape.add(t, s3)
    };

    let mut tape = Tape::new();
    let root = build(&store, &mut tape);
    let grads = tape.backward(root);
    let mut acc = store.zeros_like();
    grads.accumulate_params(&tape, &mut acc, 1.0);
    for id in store.ids() {
        let err = gradcheck::max_rel_error(&store, &acc, &[id], 1e-6, |ps| {
            let mut t = Tape::new();
            let r = build(ps, &mut t);
            t.value(r).scalar_value()
        });
        println!("{:<22} err {:.3e}", store.name(id), err);
    }
}

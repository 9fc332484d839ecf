use reentry_core::corpus::{extract_instances, Vocabulary};
use reentry_core::labeling::TaskSet;
use reentry_core::model::{encode_instances, EncodedInstance, Model, ModelConfig};
use reentry_core::numerics::{Gradients, ParamId, Tape};
use reentry_core::synth::{generate_corpus, SynthConfig};
use reentry_core::training::{
    combine_losses, record_losses, train, LossVars, LossWeights, TrainConfig,
};

fn setup() -> (Model, Vec<EncodedInstance>) {
    let convs = generate_corpus(&SynthConfig::benchmark(25, 4)).unwrap();
    let vocab = Vocabulary::build(&convs, 1).unwrap();
    let insts = extract_instances(&convs, 2).unwrap();
    let cfg = ModelConfig {
        embed_dim: 5,
        hidden_dim: 4,
        ..ModelConfig::new(vocab.len())
    };
    (
        Model::new(cfg, 1).unwrap(),
        encode_instances(&insts, &vocab),
    )
}

/// Gradients of each of `pick(losses)` for one instance.
fn grads_of(
    model: &Model,
    inst: &EncodedInstance,
    pick: impl Fn(&LossVars) -> reentry_core::numerics::Var,
) -> Gradients {
    let w = LossWeights::default();
    let mut tape = Tape::new(&model.store);
    let vars = model.forward(&mut tape, inst, None).unwrap();
    let l = record_losses(&mut tape, &vars, inst, &w).unwrap();
    let mut g = Gradients::for_store(&model.store);
    tape.backward(pick(&l), &mut g).unwrap();
    g
}

fn all_zero(g: &Gradients, ids: &[ParamId]) -> bool {
    ids.iter().all(|id| g.is_zero(*id))
}

#[test]
fn heads_are_isolated() {
    let (model, data) = setup();
    let p = &model.params;
    let aux_heads: Vec<ParamId> = p.sp_head().into_iter().chain(p.rt_head()).collect();
    for inst in data.iter().take(10) {
        let main = grads_of(&model, inst, |l| l.main);
        assert!(all_zero(&main, &aux_heads));
        assert!(!all_zero(&main, &p.main_head()));

        let sp = grads_of(&model, inst, |l| l.sp);
        assert!(all_zero(&sp, &p.main_head()) && all_zero(&sp, &p.rt_head()));
        assert!(!all_zero(&sp, &p.sp_head()));

        let rt = grads_of(&model, inst, |l| l.rt);
        assert!(all_zero(&rt, &p.main_head()) && all_zero(&rt, &p.sp_head()));

        let ta = grads_of(&model, inst, |l| l.ta);
        assert!(all_zero(&ta, &p.main_head()) && all_zero(&ta, &aux_heads));
        assert!(!all_zero(&ta, &p.shared()));
    }
}

#[test]
fn total_gradient_is_weighted_sum_of_task_gradients() {
    let (model, data) = setup();
    let w = LossWeights {
        alpha_sp: 0.3,
        alpha_rt: 0.15,
        alpha_ta: 0.6,
        ..Default::default()
    };
    for inst in data.iter().take(6) {
        let mut tape = Tape::new(&model.store);
        let vars = model.forward(&mut tape, inst, None).unwrap();
        let l = record_losses(&mut tape, &vars, inst, &w).unwrap();
        let total = combine_losses(&mut tape, &l, &w, TaskSet::ALL).unwrap();
        let mut g_total = Gradients::for_store(&model.store);
        tape.backward(total, &mut g_total).unwrap();

        let mut g_sum = Gradients::for_store(&model.store);
        for (var, a) in [
            (l.main, 1.0),
            (l.sp, w.alpha_sp),
            (l.rt, w.alpha_rt),
            (l.ta, w.alpha_ta),
        ] {
            let mut g = Gradients::for_store(&model.store);
            tape.backward(var, &mut g).unwrap();
            g_sum.add_scaled(&g, a);
        }
        for id in model.store.ids() {
            for (x, y) in g_total.to_dense(id).iter().zip(g_sum.to_dense(id)) {
                assert!(
                    (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                    "{}: {x} vs {y}",
                    model.store.get(id).name
                );
            }
        }
    }
}

#[test]
fn zero_alphas_train_exactly_like_main_only() {
    let (model, data) = setup();
    let base = TrainConfig {
        lr: 5e-3,
        batch_size: 8,
        max_epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let zero_alpha = TrainConfig {
        tasks: TaskSet::ALL,
        alpha_sp: 0.0,
        alpha_rt: 0.0,
        alpha_ta: 0.0,
        ..base.clone()
    };
    let main_only = TrainConfig {
        tasks: TaskSet::NONE,
        ..base
    };
    let mut a = model.clone();
    let mut b = model.clone();
    let oa = train(&mut a, &data, &data, &zero_alpha, |_| Ok(())).unwrap();
    let ob = train(&mut b, &data, &data, &main_only, |_| Ok(())).unwrap();
    assert_eq!(a.store, b.store);
    let fa: Vec<f64> = oa.logs.iter().map(|l| l.train_loss.main).collect();
    let fb: Vec<f64> = ob.logs.iter().map(|l| l.train_loss.main).collect();
    assert_eq!(fa, fb);
    assert_ne!(a.store, model.store);
}

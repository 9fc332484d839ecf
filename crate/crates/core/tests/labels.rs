use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reentry_core::corpus::{build_histories, extract_instances, split, Conversation, Turn, UserId};
use reentry_core::labeling::{invert_labels, thread_pattern, TaskSet};
use reentry_core::synth::{generate_corpus, SynthConfig};

fn conversation(id: &str, authors: &[u8]) -> Conversation {
    let turns = authors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            Turn::new(
                UserId::new(format!("p{a}")).unwrap(),
                vec![format!("{id}.{i}")],
            )
            .unwrap()
        })
        .collect();
    Conversation::new(id, turns).unwrap()
}

fn random_authors(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(2..=12);
    let pool = rng.gen_range(1..=6);
    (0..len).map(|_| rng.gen_range(0..pool)).collect()
}

#[test]
fn labels_agree_with_brute_force_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for k in 0..10_000 {
        let authors = random_authors(&mut rng);
        let conv = conversation(&format!("c{k}"), &authors);
        let insts = extract_instances(std::slice::from_ref(&conv), 2).unwrap();
        assert_eq!(insts.len(), authors.len() - 1);
        for inst in &insts {
            let m = inst.position;
            let target = authors[m - 1];
            assert_eq!(inst.target.as_str(), format!("p{target}"));
            assert_eq!(inst.context.last().unwrap().author, inst.target);

            let mut distinct = authors[..m].to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(inst.y_sp, distinct.len() <= 2);

            let seen = authors[..m].iter().filter(|a| **a == target).count();
            assert_eq!(inst.y_rt, seen >= 2);

            let ta: Vec<bool> = authors[..m - 1].iter().map(|a| *a == target).collect();
            assert_eq!(inst.y_ta, ta);
            assert_eq!(inst.y_ta.iter().any(|y| *y), inst.y_rt);

            assert_eq!(inst.y_main, authors[m..].contains(&target));
            checked += 1;
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn double_inversion_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..200 {
        let conv = conversation(&format!("c{k}"), &random_authors(&mut rng));
        for inst in extract_instances(&[conv], 2).unwrap() {
            for tasks in ["", "sp", "rt", "ta", "sp,rt,ta"] {
                let t: TaskSet = tasks.parse().unwrap();
                let once = invert_labels(&inst, t);
                assert_eq!(once.y_main, inst.y_main);
                assert_eq!(invert_labels(&once, t), inst);
            }
        }
    }
}

#[test]
fn synthetic_corpus_satisfies_corpus_invariants() {
    let convs = generate_corpus(&SynthConfig {
        n_conversations: 300,
        seed: 5,
        n_users: 30,
        ..SynthConfig::default()
    })
    .unwrap();
    let parts = split(&convs, [0.8, 0.1, 0.1], 1).unwrap();
    let mut insts = extract_instances(&convs, 2).unwrap();
    let expected: usize = convs.iter().map(|c| c.turns.len() - 1).sum();
    assert_eq!(insts.len(), expected);
    build_histories(&mut insts, &parts.train, 4);
    for inst in &insts {
        assert!(inst.history.len() <= 4);
        for t in &inst.history.turns {
            assert_eq!(t.author, inst.target);
            assert!(!t.tokens.iter().any(|tok| tok.starts_with(&inst.conv_id)));
        }
        let own = convs.iter().find(|c| c.conv_id == inst.conv_id).unwrap();
        for h in &inst.history.turns {
            assert!(!own.turns.contains(h));
        }
    }
    let mut keys: Vec<(String, usize)> = insts
        .iter()
        .map(|i| (i.conv_id.clone(), i.position))
        .collect();
    let sorted = {
        let mut k = keys.clone();
        k.sort();
        k
    };
    assert_eq!(keys, sorted);
    keys.dedup();
    assert_eq!(keys.len(), insts.len());
}

proptest! {
    #[test]
    fn pattern_ignores_user_renaming(authors in prop::collection::vec(0u8..8, 1..15), shift in 1u8..50) {
        let turns = |offset: u8| -> Vec<Turn> {
            authors
                .iter()
                .map(|a| Turn::new(UserId::new(format!("n{}", a.wrapping_mul(7).wrapping_add(offset))).unwrap(), vec!["x".into()]).unwrap())
                .collect()
        };
        let a = thread_pattern(&turns(0)).unwrap();
        let b = thread_pattern(&turns(shift)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.as_str().starts_with('A'));
        prop_assert_eq!(a.len(), authors.len());
    }
}

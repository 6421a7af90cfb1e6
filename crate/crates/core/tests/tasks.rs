use proptest::prelude::*;
use rand::seq::SliceRandom;

use capkernel::tasks::induction::induction_oracle;
use capkernel::tasks::string_match::{contains, near_miss_count};
use capkernel::tasks::{
    build_grammar, cyk_oracle, gen_cfg, gen_induction, gen_rgg, mincut_oracle, sort_score, spp_oracle, CfgSampler,
    Generator, TaskError, TaskKind, TaskParams,
};
use capkernel::{rng, Exec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sort_score_vanishes_only_on_the_sorted_order(u in prop::collection::vec(0u32..20, 1..12), seed in any::<u64>()) {
        let mut rho = u.clone();
        rho.shuffle(&mut rng::stream(seed, &[]));
        let psi = sort_score(&u, &rho).unwrap();
        let sorted = rho.windows(2).all(|w| w[0] <= w[1]);
        prop_assert_eq!(psi == 0, sorted);
        let mut ascending = u.clone();
        ascending.sort_unstable();
        prop_assert_eq!(sort_score(&u, &ascending).unwrap(), 0);
    }

    #[test]
    fn sort_score_rejects_other_multisets(u in prop::collection::vec(0u32..20, 2..10)) {
        let mut rho = u.clone();
        rho[0] += 1;
        prop_assert!(matches!(sort_score(&u, &rho), Err(TaskError::NotPermutation)));
    }

    #[test]
    fn induction_label_is_recovered(t in 4usize..64, vocab in 2u32..1024, seed in any::<u64>()) {
        let s = gen_induction(t, vocab, None, &mut rng::stream(seed, &[])).unwrap();
        prop_assert_eq!(induction_oracle(&s.tokens), Some(s.label));
        let trigger = s.tokens[t - 1];
        let hits = s.tokens[..t - 1].iter().filter(|&&x| x == trigger).count();
        prop_assert_eq!(hits, 1);
    }

    #[test]
    fn near_misses_never_count_matches(text in prop::collection::vec(0u32..3, 0..40), pattern in prop::collection::vec(0u32..3, 3)) {
        let full = text.windows(3).filter(|w| *w == pattern.as_slice()).count();
        prop_assert_eq!(contains(&text, &pattern), full > 0);
        prop_assert!(near_miss_count(&text, &pattern) + full <= text.len().saturating_sub(2));
    }

    #[test]
    fn graph_oracles_are_label_invariant(t in 3usize..30, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let g = gen_rgg(t, 2.0, 2, false, &mut r).unwrap();
        let mut inner: Vec<usize> = (1..t - 1).collect();
        inner.shuffle(&mut r);
        let perm: Vec<usize> = std::iter::once(0).chain(inner).chain(std::iter::once(t - 1)).collect();
        let h = g.permuted(&perm);
        prop_assert_eq!(spp_oracle(&g), spp_oracle(&h));
        prop_assert_eq!(mincut_oracle(&g), mincut_oracle(&h));
        let cut = mincut_oracle(&g);
        prop_assert_eq!(cut > 0, spp_oracle(&g).is_some());
        prop_assert!(cut <= g.adj[0].len().min(g.adj[t - 1].len()));
    }
}

#[test]
fn cfg_samples_carry_their_membership() {
    let spec = build_grammar(3).unwrap();
    let sampler = CfgSampler::new(&spec, 24).unwrap();
    let mut r = rng::stream(4, &[]);
    for t in [2, 5, 11, 24] {
        for positive in [true, false] {
            let s = sampler.sample(t, positive, &mut r).unwrap();
            assert_eq!(s.tokens.len(), t);
            assert_eq!(cyk_oracle(&spec, &s.tokens), positive);
        }
    }
    let one = gen_cfg(&spec, 6, true, &mut rng::stream(5, &[])).unwrap();
    assert_eq!(one.derivation.unwrap().yield_tokens(), one.tokens);
}

#[test]
fn grammars_are_reproducible() {
    assert_eq!(build_grammar(17).unwrap(), build_grammar(17).unwrap());
}

#[test]
fn datasets_do_not_depend_on_the_worker_count() {
    for kind in TaskKind::ALL {
        let t = kind.min_size().max(8);
        let gen = Generator::new(TaskParams::new(kind), t).unwrap();
        let a = gen.dataset(t, 12, 99, Exec::Sequential).unwrap();
        let b = gen.dataset(t, 12, 99, Exec::Parallel).unwrap();
        assert_eq!(a, b, "{kind:?}");
        for inst in &a {
            assert_eq!(gen.oracle_label(inst).unwrap(), inst.label, "{kind:?}");
        }
    }
}

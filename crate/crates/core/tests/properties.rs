use pathnet::net::{init_weights, InitMode, Loss, Model, Network, WInit};
use pathnet::prune::{build_partition, l1_renormalize};
use pathnet::qmc::{invert_matrix, permutation_block, scramble, GeneratorMatrixSet, SobolInverse};
use pathnet::topology::{
    assign_signs, check_block_conflicts, coalesce_edges, generate_pseudo_paths, generate_quasi_paths, LayerSpec, SignPolicy,
};
use proptest::prelude::*;

fn gm() -> &'static GeneratorMatrixSet {
    GeneratorMatrixSet::joe_kuo()
}

fn pow2_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0u32..6, 2..5).prop_map(|v| v.into_iter().map(|e| 1usize << e).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocks_are_permutations(j in 0usize..200, k in 0u64..64, m in 0u32..10) {
        let mut block = permutation_block(j, k, m, gm()).unwrap();
        block.sort_unstable();
        prop_assert_eq!(block, (0..1u32 << m).collect::<Vec<_>>());
    }

    #[test]
    fn scrambled_inverse_roundtrip(seed in any::<u64>(), j in 0usize..64, i in any::<u32>()) {
        let s = scramble(gm(), seed);
        let c = s.matrix(j).unwrap();
        let inv = invert_matrix(c).unwrap();
        prop_assert!(c.mul(&inv).is_identity());
        let x = c.apply(i);
        prop_assert_eq!(SobolInverse::new(&s, j).unwrap().index_of(x), i);
    }

    #[test]
    fn quasi_valence_and_conflicts(sizes in pow2_sizes(), k in 1usize..4, seed in any::<u64>()) {
        let spec = LayerSpec::paths(sizes.clone()).unwrap();
        let max = *sizes.iter().max().unwrap();
        let paths = max * k;
        let dims: Vec<usize> = (1..=sizes.len()).collect();
        let t = generate_quasi_paths(spec, paths, gm(), &dims, seed).unwrap();
        for (l, &n) in sizes.iter().enumerate() {
            prop_assert!(t.valence(l).iter().all(|&v| v == paths / n));
        }
        let min = *sizes.iter().min().unwrap();
        prop_assert_eq!(check_block_conflicts(&t, min).unwrap().total_collisions(), 0);
        prop_assert_eq!(t.recompute(gm()).unwrap().unwrap(), t.table());
    }

    #[test]
    fn coalescing_conserves_paths(sizes in prop::collection::vec(1usize..12, 2..5), paths in 1usize..200, seed in any::<u64>()) {
        let spec = LayerSpec::paths(sizes.clone()).unwrap();
        let t = generate_pseudo_paths(spec, paths, seed).unwrap();
        let slots = coalesce_edges(&t);
        let dense: usize = sizes.windows(2).map(|w| w[0] * w[1]).sum();
        prop_assert!(slots.nonzero_weight_count() <= dense);
        for tr in &slots.transitions {
            prop_assert_eq!(tr.edges.iter().map(|e| e.multiplicity as usize).sum::<usize>(), paths);
            for (p, &s) in tr.path_to_slot.iter().enumerate() {
                let e = tr.edges[s as usize];
                prop_assert_eq!(e.from, t.index(tr.layer - 1, p));
                prop_assert_eq!(e.to, t.index(tr.layer, p));
            }
        }
    }

    #[test]
    fn half_split_balances(m in 1u32..6, e in 1u32..4, seed in any::<u64>()) {
        let n = 1usize << m;
        let paths = n << e;
        let spec = LayerSpec::paths(vec![n, n, n]).unwrap();
        let t = generate_quasi_paths(spec, paths, gm(), &[1, 2, 3], seed).unwrap();
        let t = assign_signs(t, SignPolicy::Ratio(0.5), None).unwrap();
        for l in 0..3 {
            let mut sum = vec![0i64; n];
            for p in 0..paths {
                sum[t.index(l, p) as usize] += t.sign(p) as i64;
            }
            prop_assert!(sum.iter().all(|&s| s == 0));
        }
    }

    #[test]
    fn relu_scale_invariance(seed in any::<u64>(), f in 0.1f64..10.0, unit in 0usize..5) {
        let mut net = Network::<f64>::dense(&[4, 5, 3], true, Loss::SquaredError).unwrap();
        init_weights(&mut net, InitMode::UniformRandom { seed }, WInit::Glorot);
        let x = [0.3, -0.7, 0.2, 0.9];
        let before = net.forward(&x).unwrap().logits().to_vec();
        for i in 0..4 {
            net.transition_mut(1).weights[unit * 4 + i] *= f;
        }
        net.bias_mut().unwrap()[0][unit] *= f;
        for o in 0..3 {
            net.transition_mut(2).weights[o * 5 + unit] /= f;
        }
        let after = net.forward(&x).unwrap().logits().to_vec();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn partitions_are_monotone(w in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let norm: f64 = w.iter().map(|v| v.abs()).sum();
        prop_assume!(norm > 1e-9);
        let w: Vec<f64> = w.iter().map(|v| v / norm).collect();
        let p = build_partition(&w).unwrap();
        prop_assert!(p.cumulative.windows(2).all(|c| c[0] <= c[1]));
        prop_assert_eq!(*p.cumulative.last().unwrap(), 1.0);
        for (k, &wk) in w.iter().enumerate() {
            let lo = if k == 0 { 0.0 } else { p.cumulative[k - 1] };
            prop_assert!((p.cumulative[k] - lo - wk.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn renormalization_keeps_function(seed in any::<u64>()) {
        let mut net = Network::<f64>::dense(&[5, 6, 4], true, Loss::SoftmaxCrossEntropy).unwrap();
        init_weights(&mut net, InitMode::UniformRandom { seed }, WInit::Glorot);
        let r = l1_renormalize(&net).unwrap();
        let x = [0.1, 0.5, -0.3, 0.8, -1.0];
        let a = net.forward(&x).unwrap().logits().to_vec();
        let b = r.logits(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
        }
        prop_assert_eq!(net.mac_count(), 5 * 6 + 6 * 4);
    }
}

#[test]
fn even_odd_does_not_always_balance() {
    // van der Corput over 4 neurons sends paths 0 and 4 to neuron 0
    let t = generate_quasi_paths(LayerSpec::paths(vec![4, 4]).unwrap(), 8, gm(), &[0, 1], 0).unwrap();
    let t = assign_signs(t, SignPolicy::EvenOdd, None).unwrap();
    let sum: i32 = (0..8).filter(|&p| t.index(0, p) == 0).map(|p| t.sign(p) as i32).sum();
    assert_eq!(sum, 2);
}

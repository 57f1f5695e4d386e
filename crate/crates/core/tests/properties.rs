mod common;

use std::rc::Rc;

use gcma_core::decoder::info_nce;
use gcma_core::dpeaks::{cluster_at, cluster_loss, cluster_loss_value, estimate_k, ClusterState, Distances, DEFAULT_PERCENTILES};
use gcma_core::encoder::{attention_graph, fuse, FeatureInput, GatEncoder};
use gcma_core::graph_io::synthetic::{attributed_sbm, gaussian_blobs, SbmSpec};
use gcma_core::graph_io::{apply_mask, read_dataset, sample_masks, write_dataset};
use gcma_core::metrics::{accuracy, ari, nmi};
use gcma_core::numeric::{Elementwise, ParamStore, SparseMatrix, Tape, Tensor2};
use gcma_core::selfopt::{kl_loss, kl_value, soft_assign, soft_assign_value, target_distribution};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Tensor2> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c).prop_map(move |v| Tensor2::from_vec(r, c, v).unwrap())
    })
}

fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(0.01..1.0f64, rows * cols).prop_map(move |v| {
        let mut t = Tensor2::from_vec(rows, cols, v).unwrap();
        for i in 0..rows {
            let s: f64 = t.row(i).iter().sum();
            t.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        t
    })
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn random_graph(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut seen = std::collections::BTreeSet::new();
    for &(a, b) in edges {
        let (a, b) = (a % n, b % n);
        if a != b {
            seen.insert((a.min(b), a.max(b)));
        }
    }
    let trip = seen.iter().flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)]).collect();
    SparseMatrix::from_triplets(n, trip).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spmm_matches_dense_product(
        n in 1usize..50,
        edges in prop::collection::vec((0usize..50, 0usize..50, -2.0..2.0f64), 0..200),
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut map = std::collections::BTreeMap::new();
        for (a, b, w) in edges {
            map.insert((a % n, b % n), w);
        }
        let a = SparseMatrix::from_triplets(n, map.into_iter().map(|((r, c), w)| (r, c, w)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor2::from_vec(n, cols, (0..n * cols).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let sparse = a.spmm(&x).unwrap();
        let dense = a.to_dense().matmul(&x).unwrap();
        for (s, d) in sparse.data().iter().zip(dense.data()) {
            prop_assert!((s - d).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(1..=8, 1..=8)) {
        let mut tape = Tape::new();
        let v = tape.constant(x.scale(10.0));
        let s = tape.elementwise(Elementwise::SoftmaxRow, v).unwrap();
        let s = tape.value(s);
        for i in 0..s.rows() {
            prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip_is_identity(seed in any::<u64>(), communities in 1usize..4) {
        let spec = SbmSpec { communities, size: 8, d_in: 12, words: 3, ..SbmSpec::default() };
        let g = attributed_sbm(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(&g.name);
        write_dataset(&g, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), g);
    }

    #[test]
    fn masks_remove_but_never_add(seed in any::<u64>(), p_edge in 0.0..=1.0f64, p_feat in 0.0..=1.0f64) {
        let g = attributed_sbm(&SbmSpec { communities: 2, size: 20, d_in: 10, ..SbmSpec::default() }, seed).unwrap();
        let masks = sample_masks(&g, p_edge, p_feat, seed).unwrap();
        prop_assert_eq!(&masks, &sample_masks(&g, p_edge, p_feat, seed).unwrap());
        let m = apply_mask(&g, &masks).unwrap();
        for (r, c, w) in m.adj_masked.entries() {
            prop_assert_eq!(g.adj().get(r, c), Some(w));
        }
        prop_assert!(m.adj_masked.is_symmetric());
        for i in 0..g.n() {
            let zero = m.features_masked.row(i).iter().all(|&x| x == 0.0);
            prop_assert_eq!(zero, !masks.feature_mask[i]);
            let touched = !masks.feature_mask[i] || m.adj_masked.row_len(i) < g.adj().row_len(i);
            prop_assert_eq!(m.masked_nodes.contains(&i), touched);
        }
    }

    #[test]
    fn gat_is_permutation_equivariant(
        n in 2usize..12,
        edges in prop::collection::vec((0usize..12, 0usize..12), 0..30),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = GatEncoder::new(&mut store, &mut rng, 3, 4, 2, 3);
        let adj = random_graph(n, &edges);
        let x = Tensor2::from_vec(n, 3, (0..n * 3).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // Node i of the original graph is node perm[i] of the permuted one.
        let padj = SparseMatrix::from_triplets(n, adj.entries().map(|(r, c, w)| (perm[r], perm[c], w)).collect()).unwrap();
        let mut px = Tensor2::zeros(n, 3);
        for i in 0..n {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let run = |adj: &SparseMatrix, x: &Tensor2| {
            let mut tape = Tape::new();
            let z = enc.encode_masked(&mut tape, &store, &attention_graph(adj), &FeatureInput::new(x)).unwrap();
            tape.value(z).clone()
        };
        let (z, pz) = (run(&adj, &x), run(&padj, &px));
        for i in 0..n {
            for (a, b) in z.row(i).iter().zip(pz.row(perm[i])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one(
        n in 1usize..12,
        edges in prop::collection::vec((0usize..12, 0usize..12), 0..30),
        wh in matrix(12..=12, 6..=6),
        a in matrix(3..=3, 2..=2),
        b in matrix(3..=3, 2..=2),
    ) {
        let adj = attention_graph(&random_graph(n, &edges));
        let mut tape = Tape::new();
        let wh = tape.constant(wh.select_rows(&(0..n).collect::<Vec<_>>()));
        let (a, b) = (tape.constant(a), tape.constant(b));
        let out = tape.gat_attention(wh, a, b, adj.clone(), 3, 0.2, true).unwrap();
        let alpha = tape.attention_coefficients(out).unwrap();
        for i in 0..n {
            for h in 0..3 {
                let s: f64 = (adj.row_ptr()[i]..adj.row_ptr()[i + 1]).map(|k| alpha[k * 3 + h]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fuse_is_linear(u in matrix(4..=4, 3..=3), v in matrix(4..=4, 3..=3), eps in -1.0..2.0f64, s in -5.0..5.0f64) {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor2::scalar(eps));
        let (cu, cv) = (tape.constant(u.clone()), tape.constant(v.clone()));
        let base = fuse(&mut tape, cu, cv, e).unwrap();
        let (su, sv) = (tape.constant(u.scale(s)), tape.constant(v.scale(s)));
        let scaled = fuse(&mut tape, su, sv, e).unwrap();
        for (a, b) in tape.value(base).data().iter().zip(tape.value(scaled).data()) {
            prop_assert!((a * s - b).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_is_nonnegative_and_scale_free(
        proj in matrix(2..=10, 4..=4),
        seed in any::<u64>(),
        scale in 0.01..100.0f64,
        xi in 0.05..2.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = proj.rows();
        let target = Tensor2::from_vec(n, 5, (0..n * 5).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let loss = |t: &Tensor2| {
            let mut tape = Tape::new();
            let p = tape.constant(proj.clone());
            // Project to the target width with a fixed map.
            let w = tape.constant(Tensor2::from_vec(4, 5, (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap());
            let p = tape.matmul(p, w).unwrap();
            let l = info_nce(&mut tape, p, t, xi).unwrap();
            tape.scalar(l)
        };
        let base = loss(&target);
        prop_assert!(base >= 0.0);
        prop_assert!((base - loss(&target.scale(scale))).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn sharper_temperature_helps_aligned_pairs(target in matrix(2..=8, 3..=3), xi in 0.05..2.0f64, shrink in 0.1..1.0f64) {
        let unit = target.l2_normalize_rows(0.0);
        for i in 0..unit.rows() {
            for j in 0..i {
                let c: f64 = unit.row(i).iter().zip(unit.row(j)).map(|(a, b)| a * b).sum();
                prop_assume!(c < 1.0 - 1e-6);
            }
        }
        let loss = |xi: f64| {
            let mut tape = Tape::new();
            let p = tape.constant(target.clone());
            let l = info_nce(&mut tape, p, &target, xi).unwrap();
            tape.scalar(l)
        };
        prop_assert!(loss(xi * shrink) <= loss(xi) + 1e-12);
    }

    #[test]
    fn dpeaks_matches_brute_force(points in matrix(2..=60, 1..=3), pct in 0.5..10.0f64) {
        let d_c = common::ref_cutoff(&points, pct);
        prop_assume!(d_c > 0.0);
        let dists = Distances::euclidean(&points);
        prop_assert_eq!(gcma_core::dpeaks::cutoff_distance(&dists, pct).unwrap(), d_c);
        let (state, profile) = cluster_at(&points, &dists, d_c).unwrap();
        let r = common::ref_peaks(&points, d_c);
        prop_assert_eq!(&profile.rho, &r.rho);
        prop_assert_eq!(&profile.delta, &r.delta);
        prop_assert_eq!(&profile.nn_higher, &r.nn);
        prop_assert_eq!(&state.centers, &r.centers);
        prop_assert_eq!(&state.labels, &r.labels);
    }

    #[test]
    fn centers_keep_their_labels_and_clusters_are_nonempty(points in matrix(2..=80, 2..=2), pct in 0.5..5.0f64) {
        let dists = Distances::euclidean(&points);
        let d_c = gcma_core::dpeaks::cutoff_distance(&dists, pct).unwrap();
        let (state, _) = cluster_at(&points, &dists, d_c).unwrap();
        prop_assert_eq!(state.k, state.centers.len());
        for (c, &i) in state.centers.iter().enumerate() {
            prop_assert_eq!(state.labels[i], c);
        }
        prop_assert!(state.sizes.iter().all(|&s| s > 0));
        prop_assert_eq!(state.sizes.iter().sum::<usize>(), points.rows());
    }

    #[test]
    fn cluster_loss_descends_with_frozen_labels(points in matrix(4..=30, 1..=4), seed in any::<u64>(), k in 1usize..4) {
        let n = points.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rand::Rng::random_range(&mut rng, 0..k) }).collect();
        let state = ClusterState::from_labels(&points, (0..k).collect(), labels.clone()).unwrap();
        let before = cluster_loss_value(&points, &state);
        let mut store = ParamStore::new();
        let id = store.insert("z", points.clone());
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let l = cluster_loss(&mut tape, z, &state).unwrap();
        tape.backward(l, &mut store).unwrap();
        let stepped = points.zip_map(store.grad(id), |x, g| x - 0.05 * g);
        let after_state = ClusterState::from_labels(&stepped, (0..k).collect(), labels).unwrap();
        prop_assert!(cluster_loss_value(&stepped, &after_state) <= before + 1e-12);
    }

    #[test]
    fn soft_assignment_rows_are_distributions(z in matrix(1..=10, 3..=3), mu in matrix(2..=5, 3..=3), dof in 0.5..3.0f64) {
        let q = soft_assign_value(&z, &mu, dof).unwrap();
        for i in 0..q.rows() {
            prop_assert!(q.row(i).iter().all(|&x| x > 0.0 && x < 1.0));
            prop_assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let p = target_distribution(&q).unwrap();
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(p in stochastic(6, 4), q in stochastic(6, 4)) {
        prop_assert!(kl_value(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_value(&q, &q).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn target_ignores_row_duplication(q in stochastic(5, 3)) {
        let p = target_distribution(&q).unwrap();
        let doubled = Tensor2::from_rows(&(0..10).map(|i| q.row(i % 5).to_vec()).collect::<Vec<_>>()).unwrap();
        let pd = target_distribution(&doubled).unwrap();
        for i in 0..10 {
            for (a, b) in pd.row(i).iter().zip(p.row(i % 5)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_training_descends_between_refreshes(z in matrix(6..=20, 2..=2), mu in matrix(2..=4, 2..=2)) {
        let p = Rc::new(target_distribution(&soft_assign_value(&z, &mu, 1.0).unwrap()).unwrap());
        let mut store = ParamStore::new();
        let id = store.insert("mu", mu);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let m = tape.param(&store, id);
            let q = soft_assign(&mut tape, zv, m, 1.0).unwrap();
            let l = kl_loss(&mut tape, p.clone(), q).unwrap();
            let value = tape.scalar(l);
            prop_assert!(value <= prev + 1e-12);
            prev = value;
            tape.backward(l, &mut store).unwrap();
            let step = store.value(id).zip_map(store.grad(id), |m, g| m - 1e-3 * g);
            *store.value_mut(id) = step;
            store.zero_grad();
        }
    }

    #[test]
    fn metrics_ignore_relabeling(
        (pred, truth) in (1usize..40).prop_flat_map(|n| (labels(n, 5), labels(n, 5))),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = pred.iter().map(|&l| perm[l] + 10).collect();
        prop_assert!((accuracy(&pred, &truth).unwrap() - accuracy(&relabeled, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&relabeled, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&pred, &truth).unwrap() - ari(&relabeled, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((accuracy(&truth, &pred).unwrap() - accuracy(&truth, &relabeled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_matches_exhaustive_search(
        (pred, truth) in (1usize..=30).prop_flat_map(|n| (labels(n, 6), labels(n, 6))),
    ) {
        prop_assert!((accuracy(&pred, &truth).unwrap() - common::brute_accuracy(&pred, &truth)).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_accuracy_is_majority_share(truth in (1usize..40).prop_flat_map(|n| labels(n, 4))) {
        let constant = vec![0; truth.len()];
        let majority = (0..4).map(|c| truth.iter().filter(|&&t| t == c).count()).max().unwrap();
        prop_assert!(accuracy(&constant, &truth).unwrap() >= majority as f64 / truth.len() as f64 - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimate_k_ignores_isometry_and_scale(
        k in 2usize..7,
        seed in any::<u64>(),
        angle in 0.0..std::f64::consts::TAU,
        shift in (-50.0..50.0f64, -50.0..50.0f64),
        scale in 0.01..100.0f64,
    ) {
        let (x, _) = gaussian_blobs(k, 30, 0.05, 0.5, 2.0, seed).unwrap();
        let (s, c) = angle.sin_cos();
        let mut moved = Tensor2::zeros(x.rows(), 2);
        for i in 0..x.rows() {
            let (a, b) = (x.get(i, 0), x.get(i, 1));
            moved.set(i, 0, scale * (c * a - s * b) + shift.0);
            moved.set(i, 1, scale * (s * a + c * b) + shift.1);
        }
        let base = estimate_k(&x, &DEFAULT_PERCENTILES).unwrap();
        let other = estimate_k(&moved, &DEFAULT_PERCENTILES).unwrap();
        prop_assert_eq!(base.state.k, other.state.k);
        prop_assert_eq!(base.state.labels, other.state.labels);
    }
}

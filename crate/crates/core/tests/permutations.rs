use mtv_autograd::{Graph, Tensor};
use mtvnet::tokenizer::{
    co_shift, co_unshift, cyclic_shift, cyclic_unshift, window_partition, window_reverse, LevelPlan,
};
use proptest::prelude::*;

fn grid(batch: usize, edge: usize, channels: usize, seed: u64) -> Tensor {
    // distinct values so any misplacement shows up
    Tensor::from_fn(&[batch, edge.pow(3), channels], |i| (i as f64 + 0.25) * (1.0 + seed as f64 * 1e-3))
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..3, prop::sample::select(vec![2usize, 4]), 1usize..4, 1usize..4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_then_reverse_is_identity((b, win, nw, c, seed) in geometry()) {
        let edge = win * nw;
        let t = grid(b, edge, c, seed % 1000);
        let w = window_partition(&t, win).unwrap();
        prop_assert_eq!(w.shape(), &[b * nw.pow(3), win.pow(3), c]);
        prop_assert_eq!(window_reverse(&w, edge).unwrap(), t);
    }

    #[test]
    fn partition_places_tokens_by_window_and_offset((b, win, nw, c, seed) in geometry()) {
        let edge = win * nw;
        let t = grid(b, edge, c, seed % 1000);
        let w = window_partition(&t, win).unwrap();
        let n = edge.pow(3);
        let nwin = nw.pow(3);
        for bi in 0..b {
            for wi in 0..nwin {
                let wc = [wi / (nw * nw), (wi / nw) % nw, wi % nw];
                for o in 0..win.pow(3) {
                    let oc = [o / (win * win), (o / win) % win, o % win];
                    let q: Vec<usize> = (0..3).map(|a| wc[a] * win + oc[a]).collect();
                    let src = (q[0] * edge + q[1]) * edge + q[2];
                    for ch in 0..c {
                        let got = w.data()[((bi * nwin + wi) * win.pow(3) + o) * c + ch];
                        prop_assert_eq!(got, t.data()[(bi * n + src) * c + ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn shift_then_unshift_is_identity((b, win, nw, c, seed) in geometry(), shift in 0usize..9) {
        let edge = win * nw;
        let t = grid(b, edge, c, seed % 1000);
        let s = cyclic_shift(&t, shift).unwrap();
        prop_assert_eq!(cyclic_unshift(&s, shift).unwrap(), t.clone());
        // the source at (shift, shift, shift) lands at the origin
        let k = shift % edge;
        let src = (k * edge + k) * edge + k;
        prop_assert_eq!(&s.data()[..c], &t.data()[src * c..(src + 1) * c]);
    }

    #[test]
    fn co_shift_round_trips_both_grids((b, _win, nw, c, seed) in geometry()) {
        let (m, cat) = (4, 2);
        let edge = m * nw;
        let ites = grid(b, edge, c, seed % 1000);
        let cats = grid(b, nw * cat, c, seed % 997);
        let (si, sc) = co_shift(&ites, &cats, m, cat).unwrap();
        let (ri, rc) = co_unshift(&si, &sc, m, cat).unwrap();
        prop_assert_eq!(ri, ites);
        prop_assert_eq!(rc, cats);
    }

    #[test]
    fn plan_partition_round_trips_on_the_graph(nw in 1usize..3, shifted in any::<bool>(), b in 1usize..3) {
        let (m, cat, c) = (4, 2, 3);
        let edge = m * nw;
        let plan = LevelPlan::new(b, edge, m, Some(cat), 1).unwrap();
        let mut g = Graph::new();
        let ites = grid(b, edge, c, 1);
        let cats = grid(b, nw * cat, c, 2);
        let iv = g.constant(ites.clone());
        let cv = g.constant(cats.clone());
        let pi = plan.partition_ites(&mut g, iv, shifted);
        let pc = plan.partition_cats(&mut g, cv, shifted);
        let ri = plan.reverse_ites(&mut g, pi, shifted);
        let rc = plan.reverse_cats(&mut g, pc, shifted);
        prop_assert_eq!(g.value(ri), &ites);
        prop_assert_eq!(g.value(rc), &cats);
    }
}

#[test]
fn partition_rejects_incompatible_grids() {
    assert!(window_partition(&grid(1, 6, 1, 0), 4).is_err());
    assert!(window_partition(&Tensor::zeros(&[1, 10, 2]), 2).is_err());
    assert!(window_reverse(&Tensor::zeros(&[3, 8, 1]), 4).is_err());
}

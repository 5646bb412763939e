mod common;

use std::sync::Arc;

use ndarray::{arr1, Array2};
use rand::Rng;

use mcg::contrastive::{icl_loss_value, memory_response_value};
use mcg::fusion::{lm_loss_value, vtm_loss, vtm_loss_graph, VtmPrediction};
use mcg::graph::Graph;
use mcg::layers::{attend, causal_mask};

use common::{
    attention_oracle, close, icl_oracle, lm_oracle, memory_oracle, random_mat, rng, vtm_oracle,
};

#[test]
fn attention_matches_loops() {
    let mut r = rng(21);
    for case in 0..60 {
        let heads = [1, 2, 4][case % 3];
        let d = heads * r.random_range(1..5);
        let nq = r.random_range(1..7);
        let nk = r.random_range(1..7);
        let q = random_mat(&mut r, nq, d, 2.0);
        let k = random_mat(&mut r, nk, d, 2.0);
        let v = random_mat(&mut r, nk, d, 2.0);
        let mask = match case % 4 {
            0 => None,
            1 if nq == nk => Some(causal_mask(nq)),
            _ => {
                let mut m = Array2::from_shape_fn((nq, nk), |_| r.random_bool(0.6));
                for i in 0..nq {
                    m[[i, r.random_range(0..nk)]] = true;
                }
                Some(Arc::new(m))
            }
        };
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let out = attend(&mut g, qv, kv, vv, heads, mask.clone());
        let want = attention_oracle(&q, &k, &v, heads, mask.as_deref());
        let got = g.value(out);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!(close(*a, *b, 1e-10), "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn memory_read_matches_loops() {
    let mut r = rng(22);
    for _ in 0..50 {
        let slots = r.random_range(1..6);
        let d = r.random_range(1..8);
        let memory = random_mat(&mut r, slots, d, 3.0);
        let u: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let (resp, rho) = memory_response_value(&memory, &u).unwrap();
        let rows: Vec<Vec<f64>> = memory.outer_iter().map(|x| x.to_vec()).collect();
        let (want_r, want_rho) = memory_oracle(&rows, &u);
        assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in resp.iter().zip(&want_r).chain(rho.iter().zip(&want_rho)) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn icl_matches_loops_and_uniform_value() {
    let mut r = rng(23);
    for b in 1..7 {
        let sim = random_mat(&mut r, b, b, 1.0);
        let tau = r.random_range(0.02..1.0);
        assert!(close(
            icl_loss_value(&sim, tau).unwrap(),
            icl_oracle(&sim, tau),
            1e-12
        ));
        let flat = Array2::from_elem((b, b), 0.3);
        assert!(close(
            icl_loss_value(&flat, tau).unwrap(),
            (b as f64).ln(),
            1e-12
        ));
    }
}

#[test]
fn lm_matches_loops() {
    let mut r = rng(24);
    for _ in 0..40 {
        let rows = r.random_range(1..8);
        let vocab = r.random_range(2..20);
        let logits = random_mat(&mut r, rows, vocab, 4.0);
        let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| r.random_bool(0.7)).collect();
        mask[r.random_range(0..rows)] = true;
        let got = lm_loss_value(&logits, &targets, &mask).unwrap();
        assert!(close(got, lm_oracle(&logits, &targets, &mask), 1e-12));
    }
    let flat = Array2::zeros((3, 17));
    assert!(close(
        lm_loss_value(&flat, &[0, 5, 16], &[true; 3]).unwrap(),
        17f64.ln(),
        1e-12
    ));
}

#[test]
fn vtm_matches_loops() {
    let mut r = rng(25);
    for _ in 0..40 {
        let n = r.random_range(1..8);
        let rows: Vec<([f64; 2], bool)> = (0..n)
            .map(|_| {
                (
                    [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)],
                    r.random_bool(0.5),
                )
            })
            .collect();
        let want = vtm_oracle(&rows);

        let mut g = Graph::new();
        let vars: Vec<_> = rows
            .iter()
            .map(|(l, m)| {
                (
                    g.constant(Array2::from_shape_vec((1, 2), l.to_vec()).unwrap()),
                    *m,
                )
            })
            .collect();
        let loss = vtm_loss_graph(&mut g, &vars);
        assert!(close(g.scalar(loss), want, 1e-12));

        let (pos, neg): (Vec<_>, Vec<_>) = rows.iter().partition(|(_, m)| *m);
        let pred = |l: &[f64; 2]| VtmPrediction::from_logits(arr1(l).view());
        let pos: Vec<_> = pos.iter().map(|(l, _)| pred(l).labeled(true)).collect();
        let neg: Vec<_> = neg.iter().map(|(l, _)| pred(l).labeled(false)).collect();
        assert!(close(vtm_loss(&pos, &neg), want, 1e-9));
    }
}

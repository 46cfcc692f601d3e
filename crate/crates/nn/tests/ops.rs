use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spmm_nn::{
    AttnSpec, Encoder, EncoderConfig, Graph, Init, ParamId, ParamStore, PvCell, SeqBatch, Tensor, Var,
};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_targets(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = random(rng, rows, cols);
    for r in 0..rows {
        let row = t.row_mut(r);
        row.iter_mut().for_each(|v| *v = v.abs() + 0.05);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Compares analytic gradients with central differences on every parameter
/// element.
fn gradcheck(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::inference(s);
        let l = f(&mut g);
        g.value(l).item()
    };
    let h = 1e-5;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut checked = 0;
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[j]);
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / denom < 1e-4 || (a - numeric).abs() < 1e-9,
                "{}[{j}]: analytic {a} numeric {numeric}",
                store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradcheck_dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, 3, 4), true);
    let w = store.add("w", random(&mut rng, 4, 5), true);
    let b = store.add("b", random(&mut rng, 1, 5), false);
    let m = store.add("m", random(&mut rng, 3, 5), true);
    let gain = store.add("gain", random(&mut rng, 1, 5), false);
    let bias = store.add("bias", random(&mut rng, 1, 5), false);
    let tau = store.add("tau", Tensor::scalar(0.7), false);
    let targets = random_targets(&mut rng, 6, 5);
    let targets2 = random_targets(&mut rng, 3, 3);
    gradcheck(&mut store, |g| {
        let (x, w, b, m) = (g.param(x), g.param(w), g.param(b), g.param(m));
        let y = g.linear(x, w, Some(b));
        let y = g.add(y, m);
        let (gn, bs) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(y, gn, bs);
        let y = g.gelu(y);
        let y = g.scale(y, 1.7);
        let z = g.gather_rows(y, &[2, 0, 2]);
        let y = g.concat_rows(&[y, z]);
        let n = g.l2_normalize(y);
        let t = g.param(tau);
        let y = g.div_scalar(n, t);
        let l1 = g.soft_cross_entropy(y, targets.clone(), vec![1.0, 0.5, 2.0, 0.0, 1.0, 0.3]);
        let sim = g.matmul(x, x, false, true);
        let wt = g.matmul(m, w, false, true);
        let wt = g.matmul(wt, x, true, false);
        let wt = g.matmul(x, wt, false, true);
        let c = g.concat_cols(&[sim, wt]);
        let cc = g.matmul(c, c, false, true);
        let l2 = g.soft_cross_entropy(cc, targets2.clone(), vec![1.0; 3]);
        g.sum(&[l1, l2])
    });
}

#[test]
fn gradcheck_matmul_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut store = ParamStore::new();
        let a = store.add("a", if ta { random(&mut rng, 4, 3) } else { random(&mut rng, 3, 4) }, true);
        let b = store.add("b", if tb { random(&mut rng, 2, 4) } else { random(&mut rng, 4, 2) }, true);
        let t = random_targets(&mut rng, 3, 2);
        gradcheck(&mut store, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.matmul(a, b, ta, tb);
            g.soft_cross_entropy(y, t.clone(), vec![1.0; 3])
        });
    }
}

#[test]
fn gradcheck_losses_and_pv_embed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let cls = store.add("cls", random(&mut rng, 1, 4), true);
    let unk = store.add("unk", random(&mut rng, 1, 4), true);
    let w = store.add("w", random(&mut rng, 1, 4), true);
    let b = store.add("b", random(&mut rng, 1, 4), false);
    let head = store.add("head", random(&mut rng, 4, 1), true);
    let head2 = store.add("head2", random(&mut rng, 4, 2), true);
    let cells = [PvCell::Cls, PvCell::Value(0.3), PvCell::Unknown, PvCell::Value(-1.2)];
    let bce_t = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let bce_w = Tensor::from_vec(4, 2, vec![1.0, 1.0, 0.5, 0.0, 1.0, 2.0, 1.0, 1.0]);
    gradcheck(&mut store, |g| {
        let (c, u, wv, bv) = (g.param(cls), g.param(unk), g.param(w), g.param(b));
        let e = g.pv_embed(&cells, c, u, wv, bv);
        let e = g.gelu(e);
        let h = g.param(head);
        let p = g.matmul(e, h, false, false);
        let l1 = g.weighted_squared_error(p, vec![0.1, -0.4, 2.0, 0.7], vec![0.5, 1.0, 0.0, 1.0]);
        let h2 = g.param(head2);
        let q = g.matmul(e, h2, false, false);
        let l2 = g.bce_with_logits(q, bce_t.clone(), bce_w.clone());
        g.sum(&[l1, l2])
    });
}

fn attn_spec(batch: usize, tq: usize, tk: usize, heads: usize, lens: Vec<usize>, causal: bool) -> AttnSpec {
    AttnSpec {
        batch,
        q_len: tq,
        k_len: tk,
        heads,
        key_lens: lens,
        causal,
    }
}

#[test]
fn gradcheck_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for causal in [false, true] {
        let mut store = ParamStore::new();
        let q = store.add("q", random(&mut rng, 2 * 3, 4), true);
        let k = store.add("k", random(&mut rng, 2 * 3, 4), true);
        let v = store.add("v", random(&mut rng, 2 * 3, 4), true);
        let t = random_targets(&mut rng, 6, 4);
        let spec = attn_spec(2, 3, 3, 2, vec![3, 2], causal);
        gradcheck(&mut store, |g| {
            let (q, k, v) = (g.param(q), g.param(k), g.param(v));
            let o = g.attention(q, k, v, spec.clone());
            g.soft_cross_entropy(o, t.clone(), vec![1.0; 6])
        });
    }
}

#[test]
fn gradcheck_cross_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        d_model: 4,
        heads: 2,
        layers: 1,
        d_ff: 6,
        cross: true,
    };
    let enc = {
        let mut init = Init { rng: &mut rng, std: 0.5 };
        Encoder::new(&mut store, "enc", cfg, &mut init)
    };
    let x = store.add("x", random(&mut rng, 2 * 3, 4), true);
    let c = store.add("c", random(&mut rng, 2 * 2, 4), true);
    let t = random_targets(&mut rng, 6, 4);
    gradcheck(&mut store, |g| {
        let (x, c) = (g.param(x), g.param(c));
        let out = enc.forward(
            g,
            SeqBatch { x, batch: 2, len: 3, lens: &[3, 2] },
            true,
            Some(SeqBatch { x: c, batch: 2, len: 2, lens: &[2, 1] }),
        );
        g.soft_cross_entropy(out.hidden, t.clone(), vec![1.0; 6])
    });
}

fn run_attention(q: Tensor, k: Tensor, v: Tensor, spec: AttnSpec) -> (Tensor, Vec<f64>) {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (q, k, v) = (g.input(q), g.input(k), g.input(v));
    let o = g.attention(q, k, v, spec);
    let probs = g.attention_probs(o).unwrap().1.to_vec();
    (g.value(o).clone(), probs)
}

#[test]
fn attention_hand_case() {
    let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (out, _) = run_attention(i2.clone(), i2.clone(), i2, attn_spec(1, 2, 2, 1, vec![2], false));
    // softmax([1/sqrt2, 0])
    let e = (1.0f64 / 2f64.sqrt()).exp();
    let hi = e / (e + 1.0);
    let lo = 1.0 / (e + 1.0);
    let expected = [hi, lo, lo, hi];
    for (a, b) in out.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_single_key_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&mut rng, 3, 4);
    let v = random(&mut rng, 1, 4);
    let (out, _) = run_attention(q, random(&mut rng, 1, 4), v.clone(), attn_spec(1, 3, 1, 2, vec![1], false));
    for r in 0..3 {
        assert_eq!(out.row(r), v.row(0));
    }
    let krow = random(&mut rng, 1, 4);
    let k = Tensor::from_rows(&vec![krow.row(0).to_vec(); 3]);
    let v = random(&mut rng, 3, 4);
    let (out, _) = run_attention(random(&mut rng, 2, 4), k, v.clone(), attn_spec(1, 2, 3, 1, vec![3], false));
    for j in 0..4 {
        let mean = (v.get(0, j) + v.get(1, j) + v.get(2, j)) / 3.0;
        assert!((out.get(0, j) - mean).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one_and_respect_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = attn_spec(2, 4, 5, 2, vec![5, 3], true);
    let (_, probs) = run_attention(random(&mut rng, 8, 6), random(&mut rng, 10, 6), random(&mut rng, 10, 6), spec.clone());
    for b in 0..2 {
        for h in 0..2 {
            for i in 0..4 {
                let row = &probs[((b * 2 + h) * 4 + i) * 5..][..5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, p) in row.iter().enumerate() {
                    if !spec.allowed(b, i, j) {
                        assert_eq!(*p, 0.0);
                    }
                }
            }
        }
    }
}

fn encode(store: &ParamStore, enc: &Encoder, x: &Tensor, causal: bool) -> Tensor {
    let mut g = Graph::inference(store);
    let xv = g.input(x.clone());
    let out = enc.forward(&mut g, SeqBatch { x: xv, batch: 1, len: x.rows(), lens: &[x.rows()] }, causal, None);
    g.value(out.hidden).clone()
}

#[test]
fn causal_encoder_ignores_future_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { d_model: 8, heads: 2, layers: 2, d_ff: 16, cross: false };
    let enc = Encoder::new(&mut store, "e", cfg, &mut Init { rng: &mut rng, std: 0.3 });
    let x = random(&mut rng, 5, 8);
    let base = encode(&store, &enc, &x, true);
    let mut y = x.clone();
    for v in y.row_mut(3) {
        *v += 0.5;
    }
    let pert = encode(&store, &enc, &y, true);
    for r in 0..3 {
        assert_eq!(base.row(r), pert.row(r));
    }
    assert_ne!(base.row(3), pert.row(3));
    let bidir = encode(&store, &enc, &x, false);
    assert_ne!(base.row(0), bidir.row(0));
}

#[test]
fn zero_layer_encoder_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { d_model: 4, heads: 1, layers: 0, d_ff: 4, cross: false };
    let enc = Encoder::new(&mut store, "e", cfg, &mut Init { rng: &mut rng, std: 0.02 });
    let x = random(&mut rng, 3, 4);
    assert_eq!(encode(&store, &enc, &x, false), x);
}

#[test]
fn pv_embedding_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let cls = store.add("cls", random(&mut rng, 1, 3), true);
    let unk = store.add("unk", random(&mut rng, 1, 3), true);
    let w = store.add("w", random(&mut rng, 1, 3), true);
    let b = store.add("b", random(&mut rng, 1, 3), false);
    let mut g = Graph::inference(&store);
    let (c, u, wv, bv) = (g.param(cls), g.param(unk), g.param(w), g.param(b));
    let e = g.pv_embed(&[PvCell::Cls, PvCell::Value(0.0), PvCell::Unknown, PvCell::Value(2.0)], c, u, wv, bv);
    let e = g.value(e);
    assert_eq!(e.row(0), store.get(cls).row(0));
    assert_eq!(e.row(1), store.get(b).row(0));
    assert_eq!(e.row(2), store.get(unk).row(0));
    for j in 0..3 {
        assert_eq!(e.get(3, j), 2.0 * store.get(w).get(0, j) + store.get(b).get(0, j));
    }
}

#[test]
fn shared_weights_across_role_swap() {
    // One cross encoder serves both directions; only the input roles change.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { d_model: 4, heads: 2, layers: 1, d_ff: 8, cross: true };
    let enc = Encoder::new(&mut store, "f", cfg, &mut Init { rng: &mut rng, std: 0.3 });
    let n_params = store.len();
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 2, 4);
    let mut g = Graph::new(&store);
    let (av, bv) = (g.input(a), g.input(b));
    let o1 = enc.forward(&mut g, SeqBatch { x: av, batch: 1, len: 3, lens: &[3] }, false, Some(SeqBatch { x: bv, batch: 1, len: 2, lens: &[2] }));
    let o2 = enc.forward(&mut g, SeqBatch { x: bv, batch: 1, len: 2, lens: &[2] }, true, Some(SeqBatch { x: av, batch: 1, len: 3, lens: &[3] }));
    assert_eq!(g.shape(o1.hidden), (3, 4));
    assert_eq!(g.shape(o2.hidden), (2, 4));
    assert_eq!(store.len(), n_params);
}

use spmm_nn::{ema_update, lr_schedule, AdamW, AdamWConfig, Checkpoint, CheckpointError, Graph, ParamStore, Tensor};

#[test]
fn adamw_matches_scalar_reference() {
    let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 };
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0), true);
    let mut opt = AdamW::new(&store, cfg);

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let lr = 0.1;
    for t in 1..=3 {
        // f(x) = x^2
        let mut grads = spmm_nn::Grads::zeros_like(&store);
        {
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let sq = g.matmul(p, p, false, false);
            grads.accumulate(&g.backward(sq), 1.0);
        }
        opt.step(&mut store, &grads, lr);

        let grad = 2.0 * x;
        x -= lr * 0.02 * x;
        m = 0.9 * m + (1.0 - 0.9) * grad;
        v = 0.999 * v + (1.0 - 0.999) * grad * grad;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        x -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert_eq!(store.get(id).item(), x, "step {t}");
    }
    assert!(x < 1.0);
}

#[test]
fn adamw_zero_grad_zero_decay_is_noop() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]), true);
    let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut grads = spmm_nn::Grads::zeros_like(&store);
    let mut g = Graph::new(&store);
    let p = g.param(id);
    let z = g.scale(p, 0.0);
    let ones = g.input(Tensor::from_vec(3, 1, vec![1.0; 3]));
    let s = g.matmul(z, ones, false, false);
    grads.accumulate(&g.backward(s), 1.0);
    drop(g);
    opt.step(&mut store, &grads, 0.1);
    assert_eq!(store.get(id).data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn schedule_endpoints() {
    assert_eq!(lr_schedule(0, 100, 10, 1e-4, 1e-5), 0.0);
    assert!((lr_schedule(10, 100, 10, 1e-4, 1e-5) - 1e-4).abs() < 1e-18);
    assert!((lr_schedule(100, 100, 10, 1e-4, 1e-5) - 1e-5).abs() < 1e-18);
    assert!((lr_schedule(5, 100, 10, 1e-4, 1e-5) - 5e-5).abs() < 1e-18);
    let mid = lr_schedule(55, 100, 10, 1e-4, 1e-5);
    assert!((mid - 5.5e-5).abs() < 1e-15);
}

#[test]
fn ema_identities_and_hand_arithmetic() {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
    let mut t = ParamStore::new();
    t.add("w", Tensor::from_vec(1, 2, vec![3.0, -1.0]), true);
    let orig = t.clone();
    ema_update(&mut t, &s, 1.0);
    assert_eq!(t.get(t.id("w").unwrap()).data(), orig.get(orig.id("w").unwrap()).data());
    let mut copy = t.clone();
    ema_update(&mut copy, &s, 0.0);
    assert_eq!(copy.get(copy.id("w").unwrap()).data(), &[1.0, 2.0]);

    let id = t.id("w").unwrap();
    ema_update(&mut t, &s, 0.995);
    ema_update(&mut t, &s, 0.995);
    let w0 = 0.005 * 1.0 + 0.995 * (0.005 * 1.0 + 0.995 * 3.0);
    let w1 = 0.005 * 2.0 + 0.995 * (0.005 * 2.0 + 0.995 * -1.0);
    assert_eq!(t.get(id).data(), &[w0, w1]);
}

#[test]
fn checkpoint_round_trip_and_bad_magic() {
    let mut store = ParamStore::new();
    store.add("a.w", Tensor::from_vec(2, 2, vec![0.1, f64::MIN_POSITIVE, -3.5, 1e300]), true);
    store.add("a.b", Tensor::zeros(1, 2), false);
    let mut ck = Checkpoint::new();
    ck.put_params("student", &store);
    ck.put_text("config", "x=1\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let mut restored = store.clone();
    for id in restored.ids().collect::<Vec<_>>() {
        restored.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 9.0);
    }
    back.load_params("student", &mut restored).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), restored.get(id));
    }
    assert_eq!(back.text("config").unwrap(), "x=1\n");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch { .. })));
    let mut bytes = ck.to_bytes();
    bytes[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch { .. })));
    let bytes = ck.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format(_))));
}

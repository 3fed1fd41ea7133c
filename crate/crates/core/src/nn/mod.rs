//! Minimal reverse-mode autodiff engine and layer library.
//!
//! Models run one tape per sample; batches fan out over `crate::par` and
//! reduce gradients in sample order, which keeps training bit-deterministic
//! regardless of thread count.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::Fwd;
pub use params::{Arr, GradStore, ParamId, ParamStore};
pub use tape::{NodeId, Tape};

#[cfg(test)]
mod gradcheck {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn randpos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn eval_loss(store: &ParamStore, ids: &[ParamId], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = ids.iter().map(|id| tape.param(store, *id)).collect();
        let out = build(&mut tape, &leaves);
        tape.scalar(out)
    }

    /// Central finite differences vs the tape's backward, every element of
    /// every input.
    fn check(inputs: &[Arr], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId, tol: f64) {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .iter()
            .enumerate()
            .map(|(i, a)| store.add(&format!("p{i}"), a.clone()))
            .collect();
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = ids.iter().map(|id| tape.param(&store, *id)).collect();
        let out = build(&mut tape, &leaves);
        assert_eq!(tape.value(out).len(), 1, "grad check target must be scalar");
        let mut grads = GradStore::new(&store);
        tape.backward(out, &mut grads);

        let eps = 1e-5;
        for id in &ids {
            let n = store.value(*id).len();
            for j in 0..n {
                let orig = store.value(*id).as_slice().unwrap()[j];
                let mut sp = store.clone();
                sp.value_mut(*id).as_slice_mut().unwrap()[j] = orig + eps;
                let lp = eval_loss(&sp, &ids, build);
                let mut sm = store.clone();
                sm.value_mut(*id).as_slice_mut().unwrap()[j] = orig - eps;
                let lm = eval_loss(&sm, &ids, build);
                let num = (lp - lm) / (2.0 * eps);
                let ana = grads
                    .get(*id)
                    .and_then(|g| g.iter().nth(j).copied())
                    .unwrap_or(0.0);
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    ((num - ana).abs() / denom) < tol,
                    "param {} elem {}: numeric {} vs analytic {}",
                    store.name(*id),
                    j,
                    num,
                    ana
                );
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        let target = randn(&mut rng, &[3, 4]);
        check(&[a.clone(), b.clone()], &|t, l| {
            let c = t.constant(target.clone());
            let s = t.add(l[0], l[1]);
            let s = t.sub(s, c);
            let m = t.mul(s, l[0]);
            let m = t.scale(m, 0.7);
            let m = t.shift(m, 0.3);
            let z = t.constant(target.clone());
            t.mse(m, z)
        }, 1e-6);
    }

    #[test]
    fn broadcast_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = randn(&mut rng, &[4, 3]);
        let row = randn(&mut rng, &[1, 3]);
        let col = randn(&mut rng, &[4, 1]);
        let tgt = randn(&mut rng, &[4, 3]);
        check(&[a, row.clone(), col], &|t, l| {
            let x = t.add_row(l[0], l[1]);
            let o = t.outer_add(l[2], l[1]);
            let y = t.add(x, o);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-6);
    }

    #[test]
    fn matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 2]);
        let c = randn(&mut rng, &[4, 5]);
        let tgt = randn(&mut rng, &[3, 4]);
        check(&[a, b, c], &|t, l| {
            let ab = t.matmul(l[0], l[1]); // 3x2
            let ac = t.matmul_nt(l[0], l[2]); // 3x4
            let tr = t.transpose(ab); // 2x3
            let m = t.matmul(tr, ac); // 2x4
            let s = t.sum_all(m);
            let c2 = t.constant(tgt.clone());
            let n = t.mse(ac, c2);
            t.add(s, n)
        }, 1e-6);
    }

    #[test]
    fn relu_softmax_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = randn(&mut rng, &[3, 6]);
        let p = randpos(&mut rng, &[3, 6]);
        let tgt = randpos(&mut rng, &[3, 6]);
        check(&[a, p], &|t, l| {
            let r = t.relu(l[0]);
            let s = t.softmax_rows(r);
            let lg = t.log_floor(l[1], 1e-9);
            let rc = t.reciprocal(l[1]);
            let x = t.add(s, lg);
            let x = t.add(x, rc);
            let c = t.constant(tgt.clone());
            t.mse(x, c)
        }, 1e-5);
    }

    #[test]
    fn norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, &[4, 6]);
        let g = randpos(&mut rng, &[1, 6]);
        let b = randn(&mut rng, &[1, 6]);
        let tgt = randn(&mut rng, &[4, 6]);
        check(&[x.clone(), g.clone(), b.clone()], &|t, l| {
            let y = t.layer_norm(l[0], l[1], l[2]);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-5);
        check(&[x, g, b], &|t, l| {
            let y = t.norm_cols(l[0], l[1], l[2]);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-5);
    }

    #[test]
    fn norm_channels_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = randn(&mut rng, &[3, 4, 5]);
        let g = randpos(&mut rng, &[1, 3]);
        let b = randn(&mut rng, &[1, 3]);
        let tgt = randn(&mut rng, &[3, 4, 5]);
        check(&[x, g, b], &|t, l| {
            let y = t.norm_channels(l[0], l[1], l[2]);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-5);
    }

    #[test]
    fn conv1d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, &[5, 2]);
        let w = randn(&mut rng, &[3 * 2, 3]);
        let b = randn(&mut rng, &[1, 3]);
        let tgt = randn(&mut rng, &[5, 3]);
        check(&[x, w, b], &|t, l| {
            let y = t.conv1d(l[0], l[1], l[2], 3);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-6);
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for stride in [(1, 1), (1, 2)] {
            let x = randn(&mut rng, &[2, 4, 6]);
            let w = randn(&mut rng, &[3 * 3 * 2, 3]);
            let b = randn(&mut rng, &[1, 3]);
            let wo = (6usize).div_ceil(stride.1);
            let tgt = randn(&mut rng, &[3, 4, wo]);
            check(&[x, w, b], &|t, l| {
                let y = t.conv2d(l[0], l[1], l[2], 3, stride);
                let c = t.constant(tgt.clone());
                t.mse(y, c)
            }, 1e-6);
        }
    }

    #[test]
    fn upsample_and_map_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, &[2, 3, 4]);
        let tgt = randn(&mut rng, &[3, 2 * 8]);
        check(&[x], &|t, l| {
            let up = t.upsample_w2(l[0]); // [2,3,8]
            let fr = t.frames_from_map(up); // 3 x 16
            let back = t.map_from_frames(fr, 2, 8);
            let fr2 = t.frames_from_map(back);
            let c = t.constant(tgt.clone());
            t.mse(fr2, c)
        }, 1e-6);
    }

    #[test]
    fn channel_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = randn(&mut rng, &[3, 4, 2]);
        let b = randn(&mut rng, &[1, 3]);
        let m = randn(&mut rng, &[4, 3]);
        let tgt = randn(&mut rng, &[3, 4, 2]);
        check(&[x, b, m], &|t, l| {
            let y = t.add_channel_bias(l[0], l[1]);
            let y = t.add_time_channel(y, l[2]);
            let c = t.constant(tgt.clone());
            t.mse(y, c)
        }, 1e-6);
    }

    #[test]
    fn gather_repeat_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let table = randn(&mut rng, &[5, 4]);
        let x = randn(&mut rng, &[3, 4]);
        let tgt = randn(&mut rng, &[6, 6]);
        check(&[table, x], &|t, l| {
            let e = t.embed_rows(l[0], &[4, 0, 4]); // repeated id exercises scatter-add
            let r = t.repeat_rows(l[1], &[2, 0, 4]); // 6 x 4
            let er = t.concat_rows(&[e, e]); // 6 x 4
            let wide = t.concat_cols(&[r, er]); // 6 x 8
            let sl = t.slice_cols(wide, 1, 6); // 6 x 6
            let c = t.constant(tgt.clone());
            t.mse(sl, c)
        }, 1e-6);
    }

    #[test]
    fn reductions_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randpos(&mut rng, &[4, 3]);
        let y = randn(&mut rng, &[4, 3]);
        let tgt = randn(&mut rng, &[1, 3]);
        check(&[x.clone(), y.clone()], &|t, l| {
            let m = t.mean_rows(l[0]);
            let c = t.constant(tgt.clone());
            let a = t.mse(m, c);
            let ss = t.row_sum_sq(l[1]);
            let b = t.sum_all(ss);
            let rn = t.row_normalize(l[0]);
            let l2 = t.l2_normalize_rows(l[1]);
            let d = t.mse(rn, l2);
            let e = t.l1(l[0], l[1]);
            let ab = t.add(a, b);
            let de = t.add(d, e);
            t.add(ab, de)
        }, 1e-5);
    }

    #[test]
    fn cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = randn(&mut rng, &[4, 5]);
        check(&[logits], &|t, l| t.cross_entropy_rows(l[0], &[2, 0, 4, 1]), 1e-6);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&mut rng, &[2, 2]));
        let b = store.add("b", randn(&mut rng, &[2, 2]));
        let mut tape = Tape::new();
        let la = tape.param(&store, a);
        let lb = tape.param(&store, b);
        let sg = tape.stop_grad(la);
        let y = tape.mul(sg, lb);
        let loss = tape.sum_all(y);
        let mut grads = GradStore::new(&store);
        tape.backward(loss, &mut grads);
        assert!(grads.get(a).is_none(), "stop_grad must block gradients");
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn multi_seed_backward_accumulates() {
        // Seeding two roots must equal the sum of separate sweeps.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&mut rng, &[2, 3]));
        let build = |tape: &mut Tape, store: &ParamStore| {
            let la = tape.param(store, a);
            let s1 = tape.row_sum_sq(la);
            let l1 = tape.sum_all(s1);
            let sm = tape.softmax_rows(la);
            let l2 = tape.sum_all(sm);
            (la, l1, l2)
        };
        let one = ndarray::ArrayD::from_elem(IxDyn(&[1, 1]), 1.0);
        let mut tape = Tape::new();
        let (_, l1, l2) = build(&mut tape, &store);
        let mut g_both = GradStore::new(&store);
        tape.backward_seeded(&[(l1, one.clone()), (l2, one.clone())], &mut g_both);
        let mut g_sep = GradStore::new(&store);
        let tape2 = {
            let mut t = Tape::new();
            let r = build(&mut t, &store);
            (t, r.1, r.2)
        };
        tape2.0.backward(tape2.1, &mut g_sep);
        tape2.0.backward(tape2.2, &mut g_sep);
        let gb = g_both.get(a).unwrap();
        let gs = g_sep.get(a).unwrap();
        for (x, y) in gb.iter().zip(gs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Every differentiable tape operation checked against central differences.

use krst_core::gradcheck::{finite_diff_check, GradCheckConfig, LossEval};
use krst_core::{ParamStore, Pool, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        let data = (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        s.insert(name, Tensor::matrix(r, c, data).unwrap()).unwrap();
    }
    s
}

/// Checks `sum(build(..) ⊙ R)` for a fixed random `R`.
fn check(shapes: &[(&str, usize, usize)], build: impl for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>) {
    let s = store(shapes, 17);
    let loss = |p: &ParamStore| -> Result<LossEval> {
        let mut t = Tape::new();
        let out = build(&mut t, p)?;
        let (r, c) = t.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weighted = t.mul_const(out, weights)?;
        let l = t.sum_all(weighted)?;
        LossEval::from_tape(&mut t, l)
    };
    let cfg = GradCheckConfig { min_coords: 400, ..GradCheckConfig::default() };
    let report = finite_diff_check(loss, &s, &cfg).unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn matmul_variants() {
    let shapes = [("a", 3, 4), ("b", 4, 2), ("bt", 2, 4), ("at", 4, 3)];
    check(&shapes, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.matmul(a, b)
    });
    check(&shapes, |t, s| {
        let (a, bt) = (t.param(s, "a")?, t.param(s, "bt")?);
        t.matmul_nt(a, bt)
    });
    check(&shapes, |t, s| {
        let (at, b) = (t.param(s, "at")?, t.param(s, "b")?);
        t.matmul_tn(at, b)
    });
}

#[test]
fn wide_matmul_nt_takes_the_transposed_path() {
    check(&[("a", 6, 5), ("b", 3, 5)], |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.matmul_nt(a, b)
    });
}

#[test]
fn elementwise_binary() {
    let shapes = [("a", 3, 4), ("b", 3, 4), ("row", 1, 4), ("col", 3, 1)];
    check(&shapes, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.add(a, b)
    });
    check(&shapes, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.sub(a, b)
    });
    check(&shapes, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.mul(a, b)
    });
    check(&shapes, |t, s| {
        let (a, r) = (t.param(s, "a")?, t.param(s, "row")?);
        t.add_row(a, r)
    });
    check(&shapes, |t, s| {
        let (a, c) = (t.param(s, "a")?, t.param(s, "col")?);
        t.mul_col(a, c)
    });
}

#[test]
fn scalar_maps() {
    let shapes = [("a", 2, 5)];
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.scale(a, -2.5))
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.add_scalar(a, 0.75))
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.relu(a))
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.sigmoid(a))
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.tanh(a))
    });
}

#[test]
fn softmax_and_log_softmax_on_both_axes() {
    for axis in [0, 1] {
        check(&[("a", 3, 4)], |t, s| {
            let a = t.param(s, "a")?;
            t.softmax(a, axis)
        });
        check(&[("a", 3, 4)], |t, s| {
            let a = t.param(s, "a")?;
            t.log_softmax(a, axis)
        });
    }
}

#[test]
fn reductions() {
    for pool in [Pool::Max, Pool::Mean, Pool::Sum] {
        for axis in [0, 1] {
            check(&[("a", 3, 4)], |t, s| {
                let a = t.param(s, "a")?;
                t.reduce(a, axis, pool)
            });
        }
        check(&[("a", 6, 4)], |t, s| {
            let a = t.param(s, "a")?;
            t.reduce_groups(a, 3, pool)
        });
    }
    check(&[("a", 3, 4)], |t, s| {
        let a = t.param(s, "a")?;
        t.sum_all(a)
    });
}

#[test]
fn shape_operations() {
    let shapes = [("a", 3, 4), ("b", 3, 2), ("c", 2, 4)];
    check(&shapes, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        t.concat_cols(a, b)
    });
    check(&shapes, |t, s| {
        let (a, c) = (t.param(s, "a")?, t.param(s, "c")?);
        t.concat_rows(&[a, c, a])
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        t.slice_cols(a, 1, 3)
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        t.slice_rows(a, 1, 3)
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        t.gather_rows(a, &[2, 0, 2, 1, 2])
    });
    check(&shapes, |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.transpose(a))
    });
}

#[test]
fn dropout_with_fixed_mask() {
    check(&[("a", 4, 5)], |t, s| {
        let a = t.param(s, "a")?;
        t.dropout(a, 0.3, true, &mut ChaCha8Rng::seed_from_u64(5))
    });
}

#[test]
fn composite_reuse_accumulates() {
    // `a` feeds three paths; its gradient is the sum over all of them.
    check(&[("a", 3, 3), ("w", 3, 3)], |t, s| {
        let (a, w) = (t.param(s, "a")?, t.param(s, "w")?);
        let p = t.matmul(a, w)?;
        let q = t.mul(p, a)?;
        let r = t.tanh(q);
        let sm = t.softmax(a, 1)?;
        let u = t.add(r, sm)?;
        t.add(u, a)
    });
}

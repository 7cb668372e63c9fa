use super::{Tape, Tensor, Var};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `inputs` with central differences
/// (step `1e-5`). `f` builds a scalar from the input leaves. Returns the
/// largest relative error over all input entries.
///
/// Differences below the rounding resolution of the difference quotient,
/// `64 eps max(1, |f|) / h`, count as agreement: there the numeric value is
/// rounding noise (typically around a gradient that is exactly zero).
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    const H: f64 = 1e-5;
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&mut t, &vars);
    let grads = t.backward(out).expect("scalar output");
    let resolution = 64.0 * f64::EPSILON * t.value(out).item().abs().max(1.0) / H;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        for e in 0..inputs[k].len() {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + H;
            let up = eval(&xs);
            xs[k].data_mut()[e] = orig - H;
            let down = eval(&xs);
            xs[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[e];
            if (a - numeric).abs() > resolution {
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        // small deterministic pseudo-random values in (-1, 1)
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_bias_tanh() {
        let err = grad_check(&[mat(4, 3, 1), mat(3, 5, 2), mat(1, 5, 3)], |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.tanh(h);
            t.sum(h)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_ops() {
        let err = grad_check(&[mat(3, 3, 4), mat(3, 3, 5)], |t, v| {
            let a = t.softplus(v[0]);
            let b = t.sigmoid(v[1]);
            let c = t.mul(a, b);
            let d = t.leaky_relu(v[0], 0.2);
            let e = t.sub(c, d);
            let f = t.exp(e);
            let g = t.add_scalar(f, 1.0);
            let h = t.log(g);
            let i = t.square(h);
            let j = t.scale(i, 0.3);
            t.mean(j)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn atan2_and_min() {
        let err = grad_check(&[mat(5, 1, 6), mat(5, 1, 7)], |t, v| {
            let a = t.atan2(v[0], v[1]);
            let b = t.abs(a);
            let c = t.scale(b, -1.0);
            let d = t.add_scalar(c, 2.0 * std::f64::consts::PI);
            let m = t.min(b, d);
            let s = t.square(m);
            t.sum(s)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn structural_ops() {
        let err = grad_check(&[mat(4, 3, 8), mat(4, 2, 9)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let s = t.slice_cols(c, 1, 4);
            let r = t.slice_rows(s, 1, 4);
            let g = t.gather_rows(r, &[0, 2, 2, 1, 0]);
            let seg = t.segment_sum(g, &[1, 0, 1, 1, 0], 2);
            let q = t.square(seg);
            t.sum(q)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn segment_softmax_and_scale_rows() {
        let err = grad_check(&[mat(5, 1, 10), mat(5, 3, 11)], |t, v| {
            let a = t.segment_softmax(v[0], &[0, 1, 0, 1, 1], 2).unwrap();
            let m = t.scale_rows(v[1], a);
            let s = t.segment_sum(m, &[0, 1, 0, 1, 1], 2);
            let q = t.tanh(s);
            let q = t.square(q);
            t.sum(q)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn batched_matvec() {
        let err = grad_check(&[mat(3, 6, 12), mat(3, 3, 13)], |t, v| {
            let y = t.batched_matvec(v[0], v[1], 2, 3);
            let y = t.tanh(y);
            t.sum(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn clamp_interior() {
        let err = grad_check(&[mat(2, 2, 14)], |t, v| {
            let c = t.clamp(v[0], -5.0, 5.0);
            let s = t.square(c);
            t.sum(s)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // 2x minus a constant copy of x: numeric slope 1, recorded slope 2
        let err = grad_check(&[mat(2, 2, 9)], |t, v| {
            let y = t.scale(v[0], 2.0);
            let c = t.constant(t.value(v[0]).clone());
            let d = t.scale(c, -1.0);
            let z = t.add(y, d);
            t.sum(z)
        });
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}

//! Elementwise, shape and reduction ops.

use super::{BackCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_at_axis, Real, Tensor};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// For each row-major position of `shape`, the offset `sum(idx[d] * strides[d])`.
fn strided_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn check_axis(rank: usize, axis: usize, op: &str) -> Result<()> {
    if axis >= rank {
        return Err(Error::config(format!(
            "{op}: axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx: &BackCtx<'_, T>| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx: &BackCtx<'_, T>| {
                vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|ctx: &BackCtx<'_, T>| {
                let ga = ctx.needs[0]
                    .then(|| ctx.grad.zip_with(ctx.inputs[1], |g, y| g * y).unwrap());
                let gb = ctx.needs[1]
                    .then(|| ctx.grad.zip_with(ctx.inputs[0], |g, x| g * x).unwrap());
                vec![ga, gb]
            }),
        ))
    }

    /// `a * factor`
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|x| x * f);
        self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| vec![Some(ctx.grad.map(|g| g * f))]),
        )
    }

    /// `a + offset`
    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let c = T::of(offset);
        let out = self.value(a).map(|x| x + c);
        self.push_op(
            out,
            &[a],
            Box::new(|ctx: &BackCtx<'_, T>| vec![Some(ctx.grad.clone())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(
            out,
            &[a],
            Box::new(|ctx: &BackCtx<'_, T>| {
                let g = ctx
                    .grad
                    .zip_with(ctx.output, |g, y| if y > T::zero() { g } else { T::zero() })
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![Some(ctx.grad.clone().reshape(&in_shape).unwrap())]
            }),
        ))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::config(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let in_strides = row_major_strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_map(&out_shape, &strides);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                for (&i, &v) in map.iter().zip(ctx.grad.data()) {
                    gd[i] = v;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::config("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Broadcasts `a` to `shape` (trailing-aligned, size-1 axes repeat).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if in_shape.len() > shape.len() {
            return Err(Error::config(format!(
                "expand: cannot broadcast {in_shape:?} to {shape:?}"
            )));
        }
        let lead = shape.len() - in_shape.len();
        let in_strides = row_major_strides(&in_shape);
        let mut strides = vec![0; shape.len()];
        for (d, &s) in in_shape.iter().enumerate() {
            let t = shape[lead + d];
            if s == t {
                strides[lead + d] = if s == 1 { 0 } else { in_strides[d] };
            } else if s != 1 {
                return Err(Error::config(format!(
                    "expand: cannot broadcast {in_shape:?} to {shape:?}"
                )));
            }
        }
        let map = strided_map(shape, &strides);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                for (&i, &v) in map.iter().zip(ctx.grad.data()) {
                    gd[i] = gd[i] + v;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        check_axis(in_shape.len(), axis, "select")?;
        let (outer, dim, inner) = split_at_axis(&in_shape, axis);
        if index >= dim {
            return Err(Error::config(format!(
                "select: index {index} out of range for extent {dim}"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                let src = ctx.grad.data();
                for o in 0..outer {
                    let base = (o * dim + index) * inner;
                    gd[base..base + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Stacks equally shaped vars along a new axis at position `axis`.
    pub fn stack(&mut self, items: &[Var], axis: usize) -> Result<Var> {
        let first = *items
            .first()
            .ok_or_else(|| Error::config("stack: empty input"))?;
        let item_shape = self.shape(first).to_vec();
        for &v in items {
            if self.shape(v) != item_shape.as_slice() {
                return Err(Error::config(format!(
                    "stack: shape mismatch {:?} vs {:?}",
                    item_shape,
                    self.shape(v)
                )));
            }
        }
        if axis > item_shape.len() {
            return Err(Error::config("stack: axis out of range"));
        }
        let n = items.len();
        let outer: usize = item_shape[..axis].iter().product();
        let inner: usize = item_shape[axis..].iter().product();
        let mut data = vec![T::zero(); outer * n * inner];
        for (i, &v) in items.iter().enumerate() {
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * n + i) * inner;
                data[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = item_shape.clone();
        out_shape.insert(axis, n);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            out,
            items,
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let src = ctx.grad.data();
                (0..n)
                    .map(|i| {
                        if !ctx.needs[i] {
                            return None;
                        }
                        let mut buf = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let s = (o * n + i) * inner;
                            buf.extend_from_slice(&src[s..s + inner]);
                        }
                        Some(Tensor::from_vec(&item_shape, buf).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat0(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items
            .first()
            .ok_or_else(|| Error::config("concat: empty input"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lens = Vec::with_capacity(items.len());
        let mut data = Vec::new();
        for &v in items {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::config(format!(
                    "concat: shape mismatch {:?} vs [_, {:?}]",
                    s, tail
                )));
            }
            lens.push(s[0]);
            data.extend_from_slice(self.value(v).data());
        }
        let mut out_shape = vec![lens.iter().sum()];
        out_shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&out_shape, data)?;
        let inner: usize = tail.iter().product();
        Ok(self.push_op(
            out,
            items,
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let src = ctx.grad.data();
                let mut start = 0;
                lens.iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let s = start;
                        start += len * inner;
                        ctx.needs[i].then(|| {
                            let mut shape = vec![len];
                            shape.extend_from_slice(&tail);
                            Tensor::from_vec(&shape, src[s..s + len * inner].to_vec()).unwrap()
                        })
                    })
                    .collect()
            }),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let in_shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| vec![Some(Tensor::full(&in_shape, ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axes` (removed from the output shape).
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce_axes(a, axes, false)
    }

    /// Mean over `axes` (removed from the output shape).
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce_axes(a, axes, true)
    }

    fn reduce_axes(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        for &ax in axes {
            check_axis(in_shape.len(), ax, "reduce")?;
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let out_strides = row_major_strides(&out_shape);
        let mut strides = vec![0; in_shape.len()];
        let mut k = 0;
        for (d, stride) in strides.iter_mut().enumerate() {
            if !axes.contains(&d) {
                *stride = out_strides[k];
                k += 1;
            }
        }
        let count: usize = axes.iter().map(|&d| in_shape[d]).product();
        let factor = if mean {
            T::one() / T::of(count.max(1) as f64)
        } else {
            T::one()
        };
        let map = strided_map(&in_shape, &strides);
        let out_n: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); out_n];
        for (&o, &v) in map.iter().zip(self.value(a).data()) {
            data[o] = data[o] + v;
        }
        for v in &mut data {
            *v = *v * factor;
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let gd = ctx.grad.data();
                let data = map.iter().map(|&o| gd[o] * factor).collect();
                vec![Some(Tensor::from_vec(&in_shape, data).unwrap())]
            }),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(shape.len(), axis, "softmax")?;
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..dim {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total = total + e;
                }
                for j in 0..dim {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let y = ctx.output.data();
                let gy = ctx.grad.data();
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * dim + j) * inner + i;
                        let dot: T = (0..dim).map(|j| y[at(j)] * gy[at(j)]).sum();
                        for j in 0..dim {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.output.shape(), g).unwrap())]
            }),
        ))
    }

    /// Scales each slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let shape = self.shape(a).to_vec();
        check_axis(shape.len(), axis, "l2_normalize")?;
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let sq: T = (0..dim).map(|j| src[at(j)] * src[at(j)]).sum();
                let n = sq.sqrt().max(T::of(EPS));
                norms[o * inner + i] = n;
                for j in 0..dim {
                    data[at(j)] = src[at(j)] / n;
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let y = ctx.output.data();
                let gy = ctx.grad.data();
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * dim + j) * inner + i;
                        let n = norms[o * inner + i];
                        let dot: T = (0..dim).map(|j| y[at(j)] * gy[at(j)]).sum();
                        for j in 0..dim {
                            g[at(j)] = (gy[at(j)] - y[at(j)] * dot) / n;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.output.shape(), g).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[4], &[1.0, 0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        // e / (e + 3) and 1 / (e + 3)
        let e = std::f64::consts::E;
        let want = [e / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0)];
        for (got, want) in tape.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        let rounded = [0.4754, 0.1749, 0.1749, 0.1749];
        for (got, want) in tape.value(y).data().iter().zip(rounded) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![1000.0, 999.0, -1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).all_finite());
        assert!((tape.value(y).sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permute_and_transpose() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn expand_broadcasts_and_rejects() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let y = tape.expand(x, &[3, 2, 2]).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
        assert!(tape.expand(x, &[3, 3]).is_err());
    }

    #[test]
    fn mean_axes_of_constant_is_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 5], 7.5));
        let y = tape.mean_axes(x, &[2, 3]).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn linear_map_has_exact_gradient() {
        let coef = t(&[6], &[-0.75, -0.5, -0.25, 0.25, 0.5, 0.75]);
        let point = t(&[6], &[0.125, -0.375, 0.5, 0.0, -0.25, 0.625]);
        let err = grad_check(
            |tape, x| {
                let c = tape.constant(coef.clone());
                let y = tape.mul(x, c)?;
                let y = tape.scale(y, 3.0);
                Ok(tape.sum_all(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_error <= 1e-10, "{}", err.max_rel_error);
    }

    #[test]
    fn softmax_dot_composite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::uniform(&[8], 1.0, &mut rng);
        let point = Tensor::<f64>::uniform(&[8], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let s = tape.softmax(x, 0)?;
                let c = tape.constant(w.clone());
                let y = tape.mul(s, c)?;
                Ok(tape.sum_all(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_error < 1e-6, "{}", err.max_rel_error);
    }

    #[test]
    fn shape_ops_pass_gradient_checks() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[3, 4, 2], 1.0, &mut rng);
            let err = grad_check(
                |tape, x| {
                    let p = tape.permute(x, &[1, 2, 0])?;
                    let n = tape.l2_normalize(p, 1)?;
                    let sm = tape.softmax(n, 2)?;
                    let s0 = tape.select(sm, 2, 0)?;
                    let s1 = tape.select(sm, 2, 1)?;
                    let st = tape.stack(&[s1, s0], 2)?;
                    let c = tape.constant(w.clone());
                    let prod = tape.mul(st, c)?;
                    let red = tape.mean_axes(prod, &[0, 2])?;
                    let e = tape.expand(red, &[5, 4])?;
                    let r = tape.relu(e);
                    let r = tape.reshape(r, &[20])?;
                    let sq = tape.mul(r, r)?;
                    Ok(tape.sum_all(sq))
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err.max_rel_error < 1e-4, "seed {seed}: {}", err.max_rel_error);
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat0(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let w = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_simplex(data in prop::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(t(&[3, 4], &data));
            let y = tape.softmax(x, 1).unwrap();
            let shifted = tape.add_scalar(x, shift);
            let ys = tape.softmax(shifted, 1).unwrap();
            let v = tape.value(y).data().to_vec();
            for r in 0..3 {
                let s: f64 = v[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(v[r * 4..r * 4 + 4].iter().all(|&p| p > 0.0));
            }
            for (a, b) in v.iter().zip(tape.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

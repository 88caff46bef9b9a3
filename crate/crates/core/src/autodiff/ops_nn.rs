//! Layer-level ops: dense products, batch normalization and the training losses.

use super::{BackCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Frozen { mean: Vec<T>, var: Vec<T>, eps: f64 },
}

/// Per-channel batch mean and biased variance from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> Tape<T> {
    /// `a [m,k] x b [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::config(format!("matmul expects 2-D operands, got {sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(Error::config(format!("matmul: inner dims differ {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, ctx.inputs[1].data(), &mut d);
                    Tensor::from_vec(&[m, k], d).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, ctx.inputs[0].data(), g, &mut d);
                    Tensor::from_vec(&[k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Fully-connected transform `x [B,in] -> x W^T + b`, with `W [out,in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let (&[bsz, fin], &[fout, fin2]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::config(format!("linear expects [B,in] and [out,in], got {sx:?}, {sw:?}")));
        };
        if fin != fin2 {
            return Err(Error::config(format!(
                "linear: input width {fin} but weight expects {fin2}"
            )));
        }
        let mut out = vec![T::zero(); bsz * fout];
        gemm_nt(bsz, fin, fout, self.value(x).data(), self.value(weight).data(), &mut out);
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::config(format!(
                    "linear: bias shape {:?}, expected [{fout}]",
                    self.shape(b)
                )));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o = *o + bv;
                }
            }
            parents.push(b);
        }
        let out = Tensor::from_vec(&[bsz, fout], out)?;
        Ok(self.push_op(
            out,
            &parents,
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); bsz * fin];
                    gemm_nn(bsz, fout, fin, g, ctx.inputs[1].data(), &mut d);
                    Tensor::from_vec(&[bsz, fin], d).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    gemm_tn(fout, bsz, fin, g, ctx.inputs[0].data(), &mut d);
                    Tensor::from_vec(&[fout, fin], d).unwrap()
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut d = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        Tensor::from_vec(&[fout], d).unwrap()
                    }));
                }
                grads
            }),
        ))
    }

    /// Per-channel normalization of `x [N,C,...]` followed by `gamma * x_hat + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::config("batch_norm expects [N,C,...]"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(format!(
                "batch_norm: affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let count = n * inner;
        let xd = self.value(x).data();
        let at = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if count < 2 {
                    return Err(Error::input("batch_norm in training mode needs >= 2 values per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            s = s + xd[at(b, ch, i)];
                        }
                    }
                    let m = s * inv;
                    let mut v = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            let d = xd[at(b, ch, i)] - m;
                            v = v + d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v * inv;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Frozen { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::config("batch_norm: running stats have wrong length"));
                }
                (mean, var, eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = at(b, ch, i);
                    let h = (xd[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = h;
                    out[idx] = gd[ch] * h + bd[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let out = Tensor::from_vec(&xs, out)?;
        let var_id = self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let at = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let idx = at(b, ch, i);
                            dgamma[ch] = dgamma[ch] + g[idx] * xhat[idx];
                            dbeta[ch] = dbeta[ch] + g[idx];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let inv_count = T::one() / T::of(count as f64);
                    for ch in 0..c {
                        let scale = gamma[ch] * inv_std[ch];
                        let (mg, mgx) = if train {
                            (dbeta[ch] * inv_count, dgamma[ch] * inv_count)
                        } else {
                            (T::zero(), T::zero())
                        };
                        for b in 0..n {
                            for i in 0..inner {
                                let idx = at(b, ch, i);
                                dx[idx] = scale * (g[idx] - mg - xhat[idx] * mgx);
                            }
                        }
                    }
                    Tensor::from_vec(&xs, dx).unwrap()
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        );
        Ok((var_id, stats))
    }

    /// Mean softmax cross-entropy of `logits [B,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let &[b, k] = s.as_slice() else {
            return Err(Error::config(format!("cross_entropy expects [B,K], got {s:?}")));
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::input(format!(
                "cross_entropy: {} labels for batch {b} with {k} classes",
                labels.len()
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / total;
            }
            loss = loss - (row[labels[r]] - max - total.ln());
        }
        let inv_b = T::one() / T::of(b as f64);
        let out = Tensor::scalar(loss * inv_b);
        let labels = labels.to_vec();
        Ok(self.push_op(
            out,
            &[logits],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let scale = ctx.grad.item() * inv_b;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] = g[r * k + l] - T::one();
                }
                g.iter_mut().for_each(|v| *v = *v * scale);
                vec![Some(Tensor::from_vec(&[b, k], g).unwrap())]
            }),
        ))
    }

    /// Batch-hard triplet loss on `features [B,D]` with Euclidean distance.
    ///
    /// For each anchor that has at least one positive and one negative in the
    /// batch, takes the farthest positive and nearest negative and averages
    /// `max(0, d_pos - d_neg + margin)` over those anchors.
    pub fn batch_hard_triplet(&mut self, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let s = self.shape(features).to_vec();
        let &[b, d] = s.as_slice() else {
            return Err(Error::config(format!("triplet expects [B,D], got {s:?}")));
        };
        if labels.len() != b {
            return Err(Error::input("triplet: label count differs from batch size"));
        }
        let f = self.value(features).data();
        let dist = pairwise_distances(f, b, d);
        let margin = T::of(margin);
        // (anchor, positive, negative, active)
        let mut picks: Vec<(usize, usize, usize, bool)> = Vec::new();
        let mut total = T::zero();
        for a in 0..b {
            let hardest_pos = (0..b)
                .filter(|&p| p != a && labels[p] == labels[a])
                .fold(None, |best: Option<usize>, p| match best {
                    Some(q) if dist[a * b + q] >= dist[a * b + p] => Some(q),
                    _ => Some(p),
                });
            let hardest_neg = (0..b)
                .filter(|&q| labels[q] != labels[a])
                .fold(None, |best: Option<usize>, q| match best {
                    Some(r) if dist[a * b + r] <= dist[a * b + q] => Some(r),
                    _ => Some(q),
                });
            if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
                let v = dist[a * b + p] - dist[a * b + n] + margin;
                let active = v > T::zero();
                if active {
                    total = total + v;
                }
                picks.push((a, p, n, active));
            }
        }
        if picks.is_empty() {
            return Err(Error::input(
                "triplet loss needs at least two identities and two samples of one identity",
            ));
        }
        let inv = T::one() / T::of(picks.len() as f64);
        let out = Tensor::scalar(total * inv);
        Ok(self.push_op(
            out,
            &[features],
            Box::new(move |ctx: &BackCtx<'_, T>| {
                let f = ctx.inputs[0].data();
                let scale = ctx.grad.item() * inv;
                let mut g = vec![T::zero(); b * d];
                for &(a, p, n, active) in &picks {
                    if !active {
                        continue;
                    }
                    for (other, sign) in [(p, T::one()), (n, -T::one())] {
                        let dd = dist[a * b + other];
                        for k in 0..d {
                            let diff = (f[a * d + k] - f[other * d + k]) / dd * sign * scale;
                            g[a * d + k] = g[a * d + k] + diff;
                            g[other * d + k] = g[other * d + k] - diff;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, d], g).unwrap())]
            }),
        ))
    }
}

fn pairwise_distances<T: Real>(f: &[T], b: usize, d: usize) -> Vec<T> {
    let floor = T::of(1e-12);
    let mut out = vec![T::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            let sq: T = (0..d)
                .map(|k| {
                    let diff = f[i * d + k] - f[j * d + k];
                    diff * diff
                })
                .sum();
            out[i * b + j] = sq.max(floor).sqrt();
        }
    }
    out
}

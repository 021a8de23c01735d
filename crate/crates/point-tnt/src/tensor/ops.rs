//! Element-wise, reduction and shape ops.
//!
//! Every op builds the output value eagerly and, when any input requires
//! gradients, registers a backward closure on the implicit tape. Reverse
//! transfers never hold two borrows of the same cell: values are copied out
//! first, then accumulated into the parents.

use super::flops::{self, cost};
use super::{shape_err, Element, Tensor};
use crate::{Error, Result};

/// sqrt(2/pi), the constant in the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        let out = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x + y)));
        flops::record(out.len() as u64);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            move |g, _| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(shape_err("sub", self, other));
        }
        let out = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x - y)));
        flops::record(out.len() as u64);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            move |g, _| {
                pa.accumulate_grad(g);
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                pb.accumulate_grad(&neg);
            },
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self, other));
        }
        let out = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x * y)));
        flops::record(out.len() as u64);
        let (pa, pb) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            move |g, _| {
                if need_a {
                    let da = pb.with_data(|b| zip_map(g, b, |gv, bv| gv * bv));
                    pa.accumulate_grad(&da);
                }
                if need_b {
                    let db = pa.with_data(|a| zip_map(g, a, |gv, av| gv * av));
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn neg_t(&self) -> Tensor<E> {
        let out = self.with_data(|a| a.iter().map(|&x| -x).collect::<Vec<E>>());
        flops::record(out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, _| {
            let da: Vec<E> = g.iter().map(|&v| -v).collect();
            pa.accumulate_grad(&da);
        })
    }

    /// c * x
    pub fn scale(&self, c: f64) -> Tensor<E> {
        let cc = E::from_f64(c);
        let out = self.with_data(|a| a.iter().map(|&x| cc * x).collect::<Vec<E>>());
        flops::record(out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, _| {
            let da: Vec<E> = g.iter().map(|&v| cc * v).collect();
            pa.accumulate_grad(&da);
        })
    }

    /// mul * x + add, element-wise.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor<E> {
        let (m, a) = (E::from_f64(mul), E::from_f64(add));
        let out = self.with_data(|d| d.iter().map(|&x| m * x + a).collect::<Vec<E>>());
        flops::record(2 * out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, _| {
            let da: Vec<E> = g.iter().map(|&v| m * v).collect();
            pa.accumulate_grad(&da);
        })
    }

    pub fn relu(&self) -> Tensor<E> {
        let out = self.with_data(|a| {
            a.iter()
                .map(|&x| if x > E::zero() { x } else { E::zero() })
                .collect::<Vec<E>>()
        });
        flops::record(out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, _| {
            let da = pa.with_data(|a| {
                zip_map(g, a, |gv, av| if av > E::zero() { gv } else { E::zero() })
            });
            pa.accumulate_grad(&da);
        })
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64(GELU_C);
        let aa = E::from_f64(GELU_A);
        let half = E::from_f64(0.5);
        let out = self.with_data(|d| {
            d.iter()
                .map(|&x| {
                    let u = c * (x + aa * x * x * x);
                    half * x * (E::one() + u.tanh_fast())
                })
                .collect::<Vec<E>>()
        });
        flops::record(cost::GELU_PER_ELEM * out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, _| {
            let da = pa.with_data(|d| {
                zip_map(g, d, |gv, x| {
                    let three = E::from_f64(3.0);
                    let u = c * (x + aa * x * x * x);
                    let t = u.tanh_fast();
                    let du = c * (E::one() + three * aa * x * x);
                    let deriv =
                        half * (E::one() + t) + half * x * (E::one() - t * t) * du;
                    gv * deriv
                })
            });
            pa.accumulate_grad(&da);
        })
    }

    /// Element-wise square root. Callers are expected to keep inputs
    /// strictly positive (add an epsilon) so the derivative stays finite.
    pub fn sqrt_elem(&self) -> Tensor<E> {
        let out = self.with_data(|d| d.iter().map(|&x| x.sqrt()).collect::<Vec<E>>());
        flops::record(out.len() as u64);
        let pa = self.clone();
        Tensor::from_op(self.shape(), out, vec![self.clone()], move |g, y| {
            let half = E::from_f64(0.5);
            let da = zip_map(g, y, |gv, yv| gv * half / yv);
            pa.accumulate_grad(&da);
        })
    }

    /// Adds a length-n bias vector to every row of an [.., n] tensor.
    /// This is the only broadcast the tensor core supports.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self.shape();
        let bshape = bias.shape();
        let n = *shape.last().unwrap_or(&0);
        if bshape.len() != 1 || bshape[0] != n || shape.is_empty() {
            return Err(shape_err("add_bias", self, bias));
        }
        let out = self.with_data(|d| {
            bias.with_data(|b| {
                let mut out = Vec::with_capacity(d.len());
                for row in d.chunks_exact(n) {
                    out.extend(row.iter().zip(b).map(|(&x, &bv)| x + bv));
                }
                out
            })
        });
        flops::record(out.len() as u64);
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), bias.clone()],
            move |g, _| {
                pa.accumulate_grad(g);
                let mut db = vec![E::default(); n];
                for row in g.chunks_exact(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                pb.accumulate_grad(&db);
            },
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.with_data(|d| d.iter().fold(E::default(), |acc, &x| acc + x));
        flops::record(self.numel() as u64);
        let pa = self.clone();
        let numel = self.numel();
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], move |g, _| {
            let da = vec![g[0]; numel];
            pa.accumulate_grad(&da);
        })
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&self) -> Tensor<E> {
        let numel = self.numel();
        let inv = E::from_f64(1.0 / numel as f64);
        let s = self.with_data(|d| d.iter().fold(E::default(), |acc, &x| acc + x) * inv);
        flops::record(numel as u64 + 1);
        let pa = self.clone();
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], move |g, _| {
            let da = vec![g[0] * inv; numel];
            pa.accumulate_grad(&da);
        })
    }

    /// Maximum over one axis. The subgradient routes to the first index
    /// attaining the maximum (ties break to the lowest index).
    pub fn reduce_max(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, len, inner, out_shape) = reduce_geometry(self, axis, "reduce_max")?;
        let mut out = vec![E::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        let v = d[base + i];
                        let oi = o * inner + i;
                        if v > out[oi] {
                            out[oi] = v;
                            arg[oi] = j;
                        }
                    }
                }
            }
        });
        flops::record(((len - 1) * outer * inner) as u64);
        let pa = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, _| {
                let mut da = vec![E::default(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let oi = o * inner + i;
                        da[(o * len + arg[oi]) * inner + i] = g[oi];
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// Mean over one axis.
    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, len, inner, out_shape) = reduce_geometry(self, axis, "reduce_mean")?;
        let inv = E::from_f64(1.0 / len as f64);
        let mut out = vec![E::default(); outer * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        });
        for v in out.iter_mut() {
            *v *= inv;
        }
        flops::record((len * outer * inner) as u64);
        let pa = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, _| {
                let mut da = vec![E::default(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            da[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// Reinterprets the buffer with a new shape (same element count).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.value(),
            vec![self.clone()],
            move |g, _| pa.accumulate_grad(g),
        ))
    }

    /// Concatenates tensors along the last axis; all other extents must match.
    pub fn concat_last(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_last of zero tensors".into()));
        }
        let first = parts[0].shape();
        if first.is_empty() {
            return Err(Error::Dimension("concat_last needs rank >= 1".into()));
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &parts[0], p));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                p.with_data(|d| out.extend_from_slice(&d[r * w..(r + 1) * w]));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let owned: Vec<Tensor<E>> = parts.to_vec();
        let handles = owned.clone();
        Ok(Tensor::from_op(shape, out, owned, move |g, _| {
            let mut offset = 0;
            for (p, &w) in handles.iter().zip(&widths) {
                let mut dp = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    let start = r * total + offset;
                    dp.extend_from_slice(&g[start..start + w]);
                }
                p.accumulate_grad(&dp);
                offset += w;
            }
        }))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Argument("stack of zero tensors".into()));
        }
        let base = parts[0].shape();
        for p in parts {
            if p.shape() != base {
                return Err(shape_err("stack", &parts[0], p));
            }
        }
        let step = parts[0].numel();
        let mut out = Vec::with_capacity(step * parts.len());
        for p in parts {
            p.with_data(|d| out.extend_from_slice(d));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let owned: Vec<Tensor<E>> = parts.to_vec();
        let handles = owned.clone();
        Ok(Tensor::from_op(shape, out, owned, move |g, _| {
            for (i, p) in handles.iter().enumerate() {
                p.accumulate_grad(&g[i * step..(i + 1) * step]);
            }
        }))
    }

    /// out[i] = x[i, idx[i]] for a rank-2 input; used to pick the label
    /// logit per row.
    pub fn take_per_row(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "take_per_row needs rank 2, got {shape:?}"
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        if idx.len() != m {
            return Err(Error::Argument(format!(
                "take_per_row: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Argument(format!(
                "take_per_row: column {bad} out of range (n = {n})"
            )));
        }
        let out =
            self.with_data(|d| idx.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect());
        let pa = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut da = vec![E::default(); m * n];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * n + j] = g[i];
                }
                pa.accumulate_grad(&da);
            },
        ))
    }
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn reduce_geometry<E: Element>(
    t: &Tensor<E>,
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::Dimension(format!("{op}: axis {axis} is empty")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape.remove(axis);
    Ok((outer, len, inner, out_shape))
}

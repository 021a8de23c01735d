//! Matrix products (plain and batched) and pairwise distances.

use super::flops::{self, cost};
use super::kernels::{matmul_acc, transpose};
use super::{shape_err, Element, Tensor};
use crate::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Standard matrix product: [m, k] @ [k, p] -> [m, p].
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::default(); m * p];
        self.with_data(|a| rhs.with_data(|b| matmul_acc(a, b, &mut out, m, k, p)));
        flops::record(cost::matmul_flops(m, k, p));
        let (pa, pb) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            vec![m, p],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let mut scratch = Vec::new();
                if need_a {
                    // dA = g @ B^T
                    let mut da = vec![E::default(); m * k];
                    pb.with_data(|b| {
                        transpose(b, k, p, &mut scratch);
                        matmul_acc(g, &scratch, &mut da, m, p, k);
                    });
                    pa.accumulate_grad(&da);
                }
                if need_b {
                    // dB = A^T @ g
                    let mut db = vec![E::default(); k * p];
                    pa.with_data(|a| {
                        transpose(a, m, k, &mut scratch);
                        matmul_acc(&scratch, g, &mut db, k, m, p);
                    });
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Batched matrix product: [B, m, k] @ [B, k, p] -> [B, m, p].
    pub fn bmm(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", self, rhs));
        }
        let (bn, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![E::default(); bn * m * p];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for i in 0..bn {
                    matmul_acc(
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * p..(i + 1) * k * p],
                        &mut out[i * m * p..(i + 1) * m * p],
                        m,
                        k,
                        p,
                    );
                }
            })
        });
        flops::record(bn as u64 * cost::matmul_flops(m, k, p));
        let (pa, pb) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            vec![bn, m, p],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let mut scratch = Vec::new();
                if need_a {
                    let mut da = vec![E::default(); bn * m * k];
                    pb.with_data(|b| {
                        for i in 0..bn {
                            transpose(&b[i * k * p..(i + 1) * k * p], k, p, &mut scratch);
                            matmul_acc(
                                &g[i * m * p..(i + 1) * m * p],
                                &scratch,
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                p,
                                k,
                            );
                        }
                    });
                    pa.accumulate_grad(&da);
                }
                if need_b {
                    let mut db = vec![E::default(); bn * k * p];
                    pa.with_data(|a| {
                        for i in 0..bn {
                            transpose(&a[i * m * k..(i + 1) * m * k], m, k, &mut scratch);
                            matmul_acc(
                                &scratch,
                                &g[i * m * p..(i + 1) * m * p],
                                &mut db[i * k * p..(i + 1) * k * p],
                                k,
                                m,
                                p,
                            );
                        }
                    });
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Batched product with the second operand transposed:
    /// [B, m, k] @ [B, p, k]^T -> [B, m, p]. This is the attention-logit
    /// shape Q K^T without materializing K^T in the graph.
    pub fn bmm_nt(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", self, rhs));
        }
        let (bn, m, k, p) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![E::default(); bn * m * p];
        let mut scratch = Vec::new();
        self.with_data(|a| {
            rhs.with_data(|b| {
                for i in 0..bn {
                    transpose(&b[i * p * k..(i + 1) * p * k], p, k, &mut scratch);
                    matmul_acc(
                        &a[i * m * k..(i + 1) * m * k],
                        &scratch,
                        &mut out[i * m * p..(i + 1) * m * p],
                        m,
                        k,
                        p,
                    );
                }
            })
        });
        flops::record(bn as u64 * cost::matmul_flops(m, k, p));
        let (pa, pb) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            vec![bn, m, p],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                if need_a {
                    // dA[i] = g[i] @ B[i]  ([m,p] @ [p,k])
                    let mut da = vec![E::default(); bn * m * k];
                    pb.with_data(|b| {
                        for i in 0..bn {
                            matmul_acc(
                                &g[i * m * p..(i + 1) * m * p],
                                &b[i * p * k..(i + 1) * p * k],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                p,
                                k,
                            );
                        }
                    });
                    pa.accumulate_grad(&da);
                }
                if need_b {
                    // dB[i] = g[i]^T @ A[i]  ([p,m] @ [m,k])
                    let mut db = vec![E::default(); bn * p * k];
                    let mut scratch = Vec::new();
                    pa.with_data(|a| {
                        for i in 0..bn {
                            transpose(&g[i * m * p..(i + 1) * m * p], m, p, &mut scratch);
                            matmul_acc(
                                &scratch,
                                &a[i * m * k..(i + 1) * m * k],
                                &mut db[i * p * k..(i + 1) * p * k],
                                p,
                                m,
                                k,
                            );
                        }
                    });
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose2 needs rank 2, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = Vec::new();
        self.with_data(|d| transpose(d, m, n, &mut out));
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut dt = Vec::new();
                transpose(g, n, m, &mut dt);
                pa.accumulate_grad(&dt);
            },
        ))
    }

    /// Squared Euclidean distances between the rows of two rank-2 tensors:
    /// out[i][j] = ||a_i - b_j||^2.
    pub fn pairwise_sq_dist(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("pairwise_sq_dist", self, rhs));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let out = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut out = Vec::with_capacity(m * n);
                for arow in a.chunks_exact(d) {
                    for brow in b.chunks_exact(d) {
                        let mut s = E::default();
                        for (&av, &bv) in arow.iter().zip(brow) {
                            let c = av - bv;
                            s += c * c;
                        }
                        out.push(s);
                    }
                }
                out
            })
        });
        flops::record(3 * (m * n * d) as u64);
        let (pa, pb) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let two = E::from_f64(2.0);
                if need_a {
                    let da = pa.with_data(|a| {
                        pb.with_data(|b| {
                            let mut da = vec![E::default(); m * d];
                            for i in 0..m {
                                for j in 0..n {
                                    let gv = g[i * n + j] * two;
                                    for c in 0..d {
                                        da[i * d + c] += gv * (a[i * d + c] - b[j * d + c]);
                                    }
                                }
                            }
                            da
                        })
                    });
                    pa.accumulate_grad(&da);
                }
                if need_b {
                    let db = pa.with_data(|a| {
                        pb.with_data(|b| {
                            let mut db = vec![E::default(); n * d];
                            for i in 0..m {
                                for j in 0..n {
                                    let gv = g[i * n + j] * two;
                                    for c in 0..d {
                                        db[j * d + c] += gv * (b[j * d + c] - a[i * d + c]);
                                    }
                                }
                            }
                            db
                        })
                    });
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap().value(), x.value());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng::from_seed(42);
        let a_data: Vec<f32> = (0..12).map(|_| rng::uniform(&mut r, -1.0, 1.0) as f32).collect();
        let b_data: Vec<f32> = (0..8).map(|_| rng::uniform(&mut r, -1.0, 1.0) as f32).collect();
        let a = Tensor::from_vec(&[3, 4], a_data.clone()).unwrap();
        let b = Tensor::from_vec(&[4, 2], b_data.clone()).unwrap();
        let c = a.matmul(&b).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0f32;
                for kk in 0..4 {
                    want += a_data[i * 4 + kk] * b_data[kk * 2 + j];
                }
                assert!((c[i * 2 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_grad_of_sum_is_transpose_product() {
        // d(sum(A B))/dA = ones @ B^T, i.e. row r -> row sums of B.
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![6.0, 15.0, 6.0, 15.0]);
        // dB = A^T @ ones: column sums of A broadcast
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn bmm_equals_per_slice_matmul() {
        let mut r = rng::from_seed(9);
        let a_data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..2 * 4 * 2).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let a = Tensor::from_vec(&[2, 3, 4], a_data.clone()).unwrap();
        let b = Tensor::from_vec(&[2, 4, 2], b_data.clone()).unwrap();
        let c = a.bmm(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        for i in 0..2 {
            let ai = Tensor::from_vec(&[3, 4], a_data[i * 12..(i + 1) * 12].to_vec()).unwrap();
            let bi = Tensor::from_vec(&[4, 2], b_data[i * 8..(i + 1) * 8].to_vec()).unwrap();
            let want = ai.matmul(&bi).unwrap().value();
            let got = &c.value()[i * 6..(i + 1) * 6];
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_nt_is_bmm_of_transpose() {
        let mut r = rng::from_seed(10);
        let q: Vec<f64> = (0..1 * 3 * 4).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let k: Vec<f64> = (0..1 * 5 * 4).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let qt = Tensor::from_vec(&[1, 3, 4], q.clone()).unwrap();
        let kt = Tensor::from_vec(&[1, 5, 4], k.clone()).unwrap();
        let got = qt.bmm_nt(&kt).unwrap().value();
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for c in 0..4 {
                    want += q[i * 4 + c] * k[j * 4 + c];
                }
                assert!((got[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_sq_dist_brute_force() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3, 2], vec![0.0, 0.0, 3.0, 4.0, 1.0, 0.0]).unwrap();
        let d = a.pairwise_sq_dist(&b).unwrap().value();
        assert_eq!(d, vec![0.0, 25.0, 1.0, 2.0, 13.0, 1.0]);
    }
}

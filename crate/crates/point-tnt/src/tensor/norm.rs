//! Normalization-style ops: softmax, layer norm, batch norm, dropout and
//! L2 row normalization.

use rand::RngCore;

use super::flops::{self, cost};
use super::{shape_err, Element, Tensor};
use crate::{Error, Result};

/// Train/eval switch for ops whose behaviour differs between the two
/// (dropout, batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<E: Element> Tensor<E> {
    /// Softmax over the last axis, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| {
            Error::Dimension("softmax_rows needs rank >= 1".into())
        })?;
        if n == 0 {
            return Err(Error::Dimension("softmax_rows: empty rows".into()));
        }
        let out = self.with_data(|d| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("softmax_rows: non-finite input".into()));
            }
            let mut out = Vec::with_capacity(d.len());
            for row in d.chunks_exact(n) {
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let start = out.len();
                let mut sum = E::default();
                for &v in row {
                    let e = (v - mx).exp_fast();
                    sum += e;
                    out.push(e);
                }
                let inv = E::one() / sum;
                for v in &mut out[start..] {
                    *v *= inv;
                }
            }
            Ok(out)
        })?;
        flops::record(cost::SOFTMAX_PER_ELEM * out.len() as u64);
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            move |g, y| {
                // dx = p .* (g - <g, p>) per row
                let mut da = Vec::with_capacity(g.len());
                for (grow, prow) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                    let mut dot = E::default();
                    for (&gv, &pv) in grow.iter().zip(prow) {
                        dot += gv * pv;
                    }
                    for (&gv, &pv) in grow.iter().zip(prow) {
                        da.push(pv * (gv - dot));
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// log(softmax) over the last axis; numerically stable.
    pub fn log_softmax_rows(&self) -> Result<Tensor<E>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| {
            Error::Dimension("log_softmax_rows needs rank >= 1".into())
        })?;
        if n == 0 {
            return Err(Error::Dimension("log_softmax_rows: empty rows".into()));
        }
        let out = self.with_data(|d| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("log_softmax_rows: non-finite input".into()));
            }
            let mut out = Vec::with_capacity(d.len());
            for row in d.chunks_exact(n) {
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = E::default();
                for &v in row {
                    sum += (v - mx).exp_fast();
                }
                let log_z = mx + sum.ln();
                out.extend(row.iter().map(|&v| v - log_z));
            }
            Ok(out)
        })?;
        flops::record(6 * out.len() as u64);
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            move |g, y| {
                // dx = g - softmax * sum(g) per row
                let mut da = Vec::with_capacity(g.len());
                for (grow, lrow) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                    let mut gsum = E::default();
                    for &gv in grow {
                        gsum += gv;
                    }
                    for (&gv, &lv) in grow.iter().zip(lrow) {
                        da.push(gv - lv.exp_fast() * gsum);
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// Per-row layer normalization over the last axis with learnable gain
    /// and bias: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let shape = self.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm needs rank >= 1".into()))?;
        if gain.shape() != vec![n] {
            return Err(shape_err("layer_norm gain", self, gain));
        }
        if bias.shape() != vec![n] {
            return Err(shape_err("layer_norm bias", self, bias));
        }
        if eps <= 0.0 {
            return Err(Error::Argument(format!("layer_norm eps {eps} must be > 0")));
        }
        let rows = self.numel() / n;
        let epse = E::from_f64(eps);
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut xhat = Vec::with_capacity(rows * n);
        let mut inv_std = Vec::with_capacity(rows);
        let out = self.with_data(|d| {
            gain.with_data(|gw| {
                bias.with_data(|bw| {
                    let mut out = Vec::with_capacity(d.len());
                    for row in d.chunks_exact(n) {
                        let mut mean = E::default();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = E::default();
                        for &v in row {
                            let c = v - mean;
                            var += c * c;
                        }
                        var *= inv_n;
                        let istd = E::one() / (var + epse).sqrt();
                        inv_std.push(istd);
                        for (j, &v) in row.iter().enumerate() {
                            let xh = (v - mean) * istd;
                            xhat.push(xh);
                            out.push(xh * gw[j] + bw[j]);
                        }
                    }
                    out
                })
            })
        });
        flops::record(cost::LAYER_NORM_PER_ELEM * out.len() as u64);
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        let need_x = self.requires_grad();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, _| {
                let mut dgain = vec![E::default(); n];
                let mut dbias = vec![E::default(); n];
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                }
                if need_x {
                    let dx = pg.with_data(|gw| {
                        let mut dx = Vec::with_capacity(g.len());
                        for (r, (grow, xrow)) in
                            g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate()
                        {
                            let istd = inv_std[r];
                            let mut m1 = E::default(); // mean of dxhat
                            let mut m2 = E::default(); // mean of dxhat .* xhat
                            for j in 0..n {
                                let dxh = grow[j] * gw[j];
                                m1 += dxh;
                                m2 += dxh * xrow[j];
                            }
                            m1 *= inv_n;
                            m2 *= inv_n;
                            for j in 0..n {
                                let dxh = grow[j] * gw[j];
                                dx.push((dxh - m1 - xrow[j] * m2) * istd);
                            }
                        }
                        dx
                    });
                    px.accumulate_grad(&dx);
                }
                pg.accumulate_grad(&dgain);
                pb.accumulate_grad(&dbias);
            },
        ))
    }

    /// L2-normalizes each row of a rank-2 tensor onto the unit sphere;
    /// `eps` guards the zero vector.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "l2_normalize_rows needs rank 2, got {shape:?}"
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let epse = E::from_f64(eps);
        let mut inv_norm = Vec::with_capacity(m);
        let out = self.with_data(|d| {
            let mut out = Vec::with_capacity(d.len());
            for row in d.chunks_exact(n) {
                let mut ss = E::default();
                for &v in row {
                    ss += v * v;
                }
                let inv = E::one() / (ss + epse).sqrt();
                inv_norm.push(inv);
                out.extend(row.iter().map(|&v| v * inv));
            }
            out
        });
        flops::record(cost::l2_normalize_flops(m, n));
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            move |g, _| {
                let dx = pa.with_data(|d| {
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, xrow)) in
                        g.chunks_exact(n).zip(d.chunks_exact(n)).enumerate()
                    {
                        let inv = inv_norm[r];
                        let mut dot = E::default();
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            dot += gv * xv;
                        }
                        // dx = g/s - x <g,x> / s^3
                        let k = dot * inv * inv * inv;
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            dx.push(gv * inv - xv * k);
                        }
                    }
                    dx
                });
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Dropout: in train mode keeps each element with probability `1 - rate`
    /// and scales by `1 / (1 - rate)`; identity in eval mode.
    pub fn dropout(&self, rate: f64, mode: Mode, rng: &mut impl RngCore) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} must be in [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            // Identity pass-through, still differentiable.
            let pa = self.clone();
            return Ok(Tensor::from_op(
                self.shape(),
                self.value(),
                vec![self.clone()],
                move |g, _| pa.accumulate_grad(g),
            ));
        }
        let keep = 1.0 - rate;
        let scale = E::from_f64(1.0 / keep);
        let mask: Vec<E> = (0..self.numel())
            .map(|_| {
                if crate::rng::unit(rng) < keep {
                    scale
                } else {
                    E::default()
                }
            })
            .collect();
        let out = self.with_data(|d| {
            d.iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect::<Vec<E>>()
        });
        flops::record(cost::DROPOUT_TRAIN_PER_ELEM * out.len() as u64);
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            move |g, _| {
                let da: Vec<E> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                pa.accumulate_grad(&da);
            },
        ))
    }
}

/// Batch normalization state: learnable affine plus running statistics
/// (updated in train mode, used in eval mode).
pub struct BatchNorm<E: Element> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
    pub running_mean: std::cell::RefCell<Vec<E>>,
    pub running_var: std::cell::RefCell<Vec<E>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gain: Tensor::full(&[features], E::one()),
            bias: Tensor::zeros(&[features]),
            running_mean: std::cell::RefCell::new(vec![E::default(); features]),
            running_var: std::cell::RefCell::new(vec![E::one(); features]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gain.numel()
    }

    /// Normalizes a [batch, features] tensor. Train mode uses batch
    /// statistics (batch size must be >= 2) and updates the running stats;
    /// eval mode uses the running stats.
    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let shape = x.shape();
        let n = self.features();
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::Dimension(format!(
                "batch_norm: expected [batch, {n}], got {shape:?}"
            )));
        }
        let b = shape[0];
        match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Argument(
                        "batch_norm in train mode needs batch size >= 2 (variance undefined)"
                            .into(),
                    ));
                }
                self.forward_train(x, b, n)
            }
            Mode::Eval => self.forward_eval(x, b, n),
        }
    }

    fn forward_train(&self, x: &Tensor<E>, b: usize, n: usize) -> Result<Tensor<E>> {
        let inv_b = E::from_f64(1.0 / b as f64);
        let epse = E::from_f64(self.eps);
        let mut mean = vec![E::default(); n];
        let mut var = vec![E::default(); n];
        x.with_data(|d| {
            for row in d.chunks_exact(n) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_b;
            }
            for row in d.chunks_exact(n) {
                for j in 0..n {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in var.iter_mut() {
                *v *= inv_b;
            }
        });
        // Running stats use the same biased variance; they only ever meet
        // eval-mode forwards of this same implementation.
        {
            let mom = E::from_f64(self.momentum);
            let keep = E::one() - mom;
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for j in 0..n {
                rm[j] = keep * rm[j] + mom * mean[j];
                rv[j] = keep * rv[j] + mom * var[j];
            }
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + epse).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * n);
        let out = x.with_data(|d| {
            self.gain.with_data(|gw| {
                self.bias.with_data(|bw| {
                    let mut out = Vec::with_capacity(d.len());
                    for row in d.chunks_exact(n) {
                        for j in 0..n {
                            let xh = (row[j] - mean[j]) * inv_std[j];
                            xhat.push(xh);
                            out.push(xh * gw[j] + bw[j]);
                        }
                    }
                    out
                })
            })
        });
        flops::record(cost::BATCH_NORM_TRAIN_PER_ELEM * out.len() as u64);
        let (px, pg, pb) = (x.clone(), self.gain.clone(), self.bias.clone());
        let need_x = x.requires_grad();
        Ok(Tensor::from_op(
            vec![b, n],
            out,
            vec![x.clone(), self.gain.clone(), self.bias.clone()],
            move |g, _| {
                let mut dgain = vec![E::default(); n];
                let mut dbias = vec![E::default(); n];
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                }
                if need_x {
                    // Per column: dx = gain*istd*(g - mean_B(g) - xhat*mean_B(g*xhat))
                    let dx = pg.with_data(|gw| {
                        let mut m1 = vec![E::default(); n];
                        let mut m2 = vec![E::default(); n];
                        for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                m1[j] += grow[j];
                                m2[j] += grow[j] * xrow[j];
                            }
                        }
                        for j in 0..n {
                            m1[j] *= inv_b;
                            m2[j] *= inv_b;
                        }
                        let mut dx = Vec::with_capacity(g.len());
                        for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                dx.push(
                                    gw[j] * inv_std[j] * (grow[j] - m1[j] - xrow[j] * m2[j]),
                                );
                            }
                        }
                        dx
                    });
                    px.accumulate_grad(&dx);
                }
                pg.accumulate_grad(&dgain);
                pb.accumulate_grad(&dbias);
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor<E>, b: usize, n: usize) -> Result<Tensor<E>> {
        let epse = E::from_f64(self.eps);
        let rm = self.running_mean.borrow().clone();
        let inv_std: Vec<E> = self
            .running_var
            .borrow()
            .iter()
            .map(|&v| E::one() / (v + epse).sqrt())
            .collect();
        let mut xhat = Vec::with_capacity(b * n);
        let out = x.with_data(|d| {
            self.gain.with_data(|gw| {
                self.bias.with_data(|bw| {
                    let mut out = Vec::with_capacity(d.len());
                    for row in d.chunks_exact(n) {
                        for j in 0..n {
                            let xh = (row[j] - rm[j]) * inv_std[j];
                            xhat.push(xh);
                            out.push(xh * gw[j] + bw[j]);
                        }
                    }
                    out
                })
            })
        });
        flops::record(cost::BATCH_NORM_EVAL_PER_ELEM * out.len() as u64);
        let (px, pg, pb) = (x.clone(), self.gain.clone(), self.bias.clone());
        let need_x = x.requires_grad();
        Ok(Tensor::from_op(
            vec![b, n],
            out,
            vec![x.clone(), self.gain.clone(), self.bias.clone()],
            move |g, _| {
                let mut dgain = vec![E::default(); n];
                let mut dbias = vec![E::default(); n];
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                }
                if need_x {
                    let dx = pg.with_data(|gw| {
                        let mut dx = Vec::with_capacity(g.len());
                        for grow in g.chunks_exact(n) {
                            for j in 0..n {
                                dx.push(grow[j] * gw[j] * inv_std[j]);
                            }
                        }
                        dx
                    });
                    px.accumulate_grad(&dx);
                }
                pg.accumulate_grad(&dgain);
                pb.accumulate_grad(&dbias);
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softmax_symmetric_row() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax_rows().unwrap().value(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let p = x.softmax_rows().unwrap().value();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1] >= 0.0 && p[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng::from_seed(5);
        let data: Vec<f32> = (0..20).map(|_| rng::uniform(&mut r, -4.0, 4.0) as f32).collect();
        let x = Tensor::from_vec(&[4, 5], data).unwrap();
        let p = x.softmax_rows().unwrap().value();
        for row in p.chunks_exact(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(
            x.softmax_rows(),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = Tensor::<f32>::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
        let gain = Tensor::full(&[4], 1.0f32);
        let bias = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().value();
        for v in y {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut r = rng::from_seed(6);
        let data: Vec<f64> = (0..8).map(|_| rng::uniform(&mut r, -3.0, 5.0)).collect();
        let x = Tensor::from_vec(&[1, 8], data).unwrap();
        let gain = Tensor::full(&[8], 1.0f64);
        let bias = Tensor::zeros(&[8]);
        let y = x.layer_norm(&gain, &bias, 1e-10).unwrap().value();
        let mean: f64 = y.iter().sum::<f64>() / 8.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gain = Tensor::zeros(&[2]);
        let bias = Tensor::from_vec(&[2], vec![5.0, -1.0]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().value();
        assert_eq!(y, vec![5.0, -1.0, 5.0, -1.0]);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut r = rng::from_seed(0);
        let x = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.dropout(0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(y.value(), x.value());
        let z = x.dropout(0.9, Mode::Eval, &mut r).unwrap();
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut r = rng::from_seed(1);
        let x = Tensor::<f32>::from_vec(&[1000], vec![1.0; 1000]).unwrap();
        let y = x.dropout(0.5, Mode::Train, &mut r).unwrap().value();
        let kept = y.iter().filter(|&&v| v != 0.0).count();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-6));
        assert!((300..700).contains(&kept), "kept {kept} of 1000");
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let mut r = rng::from_seed(2);
        let data: Vec<f64> = (0..32 * 3).map(|_| rng::uniform(&mut r, -2.0, 7.0)).collect();
        let x = Tensor::from_vec(&[32, 3], data).unwrap();
        let bn = BatchNorm::<f64>::new(3);
        let y = bn.forward(&x, Mode::Train).unwrap().value();
        for j in 0..3 {
            let col: Vec<f64> = (0..32).map(|i| y[i * 3 + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_train() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let bn = BatchNorm::<f32>::new(3);
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let x = Tensor::<f32>::from_vec(&[2, 3], vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = x.l2_normalize_rows(1e-12).unwrap().value();
        for row in y.chunks_exact(3) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

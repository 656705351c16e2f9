//! Independent double-double (roughly 30 significant digits) evaluation of the
//! per-bag training loss. Central differences of this function have a
//! rounding floor near 1e-25, so they can check analytic gradients whose
//! magnitude sits far below what f64 differences resolve at `h = 1e-5`.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use aem_core::model::{AttentionParams, ModelParams};
use aem_core::objectives::RegKind;
use aem_core::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale(self, s: f64) -> Dd {
        // exact for powers of two
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN2 * Dd::from(k)).scale(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..=20 {
            term = term * r / Dd::from(i as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    pub fn ln(self) -> Dd {
        assert!(self.is_positive(), "ln of non-positive value");
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..3 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn sqrt(self) -> Dd {
        let s = Dd::from(self.hi.sqrt());
        s + (self - s * s) / s.scale(2.0)
    }

    pub fn tanh(self) -> Dd {
        if (-self).is_positive() {
            return -(-self).tanh();
        }
        let e = (-self.scale(2.0)).exp();
        (Dd::ONE - e) / (Dd::ONE + e)
    }

    pub fn sigmoid(self) -> Dd {
        Dd::ONE / (Dd::ONE + (-self).exp())
    }

    pub fn relu(self) -> Dd {
        if self.is_positive() {
            self
        } else {
            Dd::ZERO
        }
    }

    fn cmp(self, other: Dd) -> Ordering {
        (self - other).hi.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let p = self.hi * y.hi;
        let e = self.hi.mul_add(y.hi, -p) + (self.hi * y.lo + self.lo * y.hi);
        quick_two_sum(p, e)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::from(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::from(q2);
        let q3 = r.hi / y.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

fn sum(values: impl IntoIterator<Item = Dd>) -> Dd {
    values.into_iter().fold(Dd::ZERO, |a, b| a + b)
}

/// Row-major `rows × cols` view into a flat value list.
struct View<'a> {
    v: &'a [Dd],
    cols: usize,
}

impl View<'_> {
    fn at(&self, r: usize, c: usize) -> Dd {
        self.v[r * self.cols + c]
    }
}

fn softmax(s: &[Dd]) -> Vec<Dd> {
    let m = s.iter().copied().max_by(|a, b| a.cmp(*b)).expect("nonempty");
    let e: Vec<Dd> = s.iter().map(|&x| (x - m).exp()).collect();
    let z = sum(e.iter().copied());
    e.into_iter().map(|x| x / z).collect()
}

fn gated_map(h: &[Vec<Dd>], v: &View, u: &View, w: &View) -> Vec<Dd> {
    let scores: Vec<Dd> = h
        .iter()
        .map(|hn| {
            sum((0..v.cols).map(|l| {
                let pv = sum(hn.iter().enumerate().map(|(e, &x)| x * v.at(e, l)));
                let pu = sum(hn.iter().enumerate().map(|(e, &x)| x * u.at(e, l)));
                pv.tanh() * pu.sigmoid() * w.at(l, 0)
            }))
        })
        .collect();
    softmax(&scores)
}

fn regularizer(kind: RegKind, a: &[Dd]) -> Dd {
    match kind {
        RegKind::None => Dd::ZERO,
        RegKind::Aem => sum(a.iter().filter(|x| x.is_positive()).map(|&x| x * x.ln())),
        RegKind::Kl => {
            let n = Dd::from(a.len() as f64);
            -n.ln() - sum(a.iter().map(|x| x.ln())) / n
        }
    }
}

/// Total loss `ce + λ·reg` at parameter values `values`, laid out in the
/// traversal order of `params.tensors()`; `params` supplies only the shapes
/// and the variant.
pub fn bag_loss_dd(
    params: &ModelParams,
    values: &[Dd],
    x: &Matrix,
    label: usize,
    kind: RegKind,
    lambda: f64,
) -> Dd {
    let mut views = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        let (r, c) = t.value.shape();
        views.push(View {
            v: &values[offset..offset + r * c],
            cols: c,
        });
        offset += r * c;
    }
    let (wr, br) = (&views[0], &views[1]);
    let (wc, bc) = (&views[views.len() - 2], &views[views.len() - 1]);
    let e_dim = wr.cols;
    let h: Vec<Vec<Dd>> = (0..x.rows())
        .map(|n| {
            (0..e_dim)
                .map(|j| {
                    let pre = sum((0..x.cols()).map(|d| Dd::from(x.get(n, d)) * wr.at(d, j)));
                    (pre + br.at(0, j)).relu()
                })
                .collect()
        })
        .collect();
    let maps: Vec<Vec<Dd>> = match &params.attention {
        AttentionParams::Gated(_) => vec![gated_map(&h, &views[2], &views[3], &views[4])],
        AttentionParams::MultiHead(heads) => (0..heads.len())
            .map(|k| gated_map(&h, &views[2 + 3 * k], &views[3 + 3 * k], &views[4 + 3 * k]))
            .collect(),
        AttentionParams::DualStream(_) => {
            let (score, query) = (&views[2], &views[3]);
            let u: Vec<Dd> = h
                .iter()
                .map(|hn| sum(hn.iter().enumerate().map(|(e, &v)| v * score.at(e, 0))))
                .collect();
            let mut c = 0;
            for (i, &ui) in u.iter().enumerate() {
                if ui.cmp(u[c]) == Ordering::Greater {
                    c = i;
                }
            }
            let q: Vec<Vec<Dd>> = h
                .iter()
                .map(|hn| {
                    (0..query.cols)
                        .map(|l| sum(hn.iter().enumerate().map(|(e, &v)| v * query.at(e, l))))
                        .collect()
                })
                .collect();
            let scale = Dd::from(query.cols as f64).sqrt();
            let raw: Vec<Dd> = q
                .iter()
                .map(|qn| sum(qn.iter().zip(&q[c]).map(|(&a, &b)| a * b)) / scale)
                .collect();
            vec![softmax(&raw)]
        }
    };
    let k = Dd::from(maps.len() as f64);
    let a: Vec<Dd> = (0..h.len())
        .map(|n| sum(maps.iter().map(|m| m[n])) / k)
        .collect();
    let z: Vec<Dd> = (0..e_dim)
        .map(|j| sum(h.iter().zip(&a).map(|(hn, &an)| an * hn[j])))
        .collect();
    let logits: Vec<Dd> = (0..wc.cols)
        .map(|c| sum(z.iter().enumerate().map(|(j, &zj)| zj * wc.at(j, c))) + bc.at(0, c))
        .collect();
    let m = logits.iter().copied().max_by(|a, b| a.cmp(*b)).expect("classes");
    let lse = m + sum(logits.iter().map(|&l| (l - m).exp())).ln();
    let ce = lse - logits[label];
    if kind == RegKind::None {
        return ce;
    }
    let reg = sum(maps.iter().map(|m| regularizer(kind, m))) / k;
    ce + Dd::from(lambda) * reg
}

/// Central differences of [`bag_loss_dd`] at step `h`, one per parameter value.
pub fn central_differences_dd(
    params: &ModelParams,
    x: &Matrix,
    label: usize,
    kind: RegKind,
    lambda: f64,
    h: f64,
) -> Vec<f64> {
    let base: Vec<Dd> = params.flat_values().into_iter().map(Dd::from).collect();
    let step = Dd::from(h);
    let mut probe = base.clone();
    (0..base.len())
        .map(|i| {
            probe[i] = base[i] + step;
            let plus = bag_loss_dd(params, &probe, x, label, kind, lambda);
            probe[i] = base[i] - step;
            let minus = bag_loss_dd(params, &probe, x, label, kind, lambda);
            probe[i] = base[i];
            ((plus - minus) / step.scale(2.0)).to_f64()
        })
        .collect()
}

/// Sanity checks of the arithmetic against known identities.
pub fn self_check() -> bool {
    let third = Dd::ONE / Dd::from(3.0);
    let two = Dd::from(2.0);
    let e = Dd::ONE.exp();
    (third * Dd::from(3.0) - Dd::ONE).to_f64().abs() < 1e-31
        && (e.hi - std::f64::consts::E).abs() <= f64::EPSILON * 3.0
        && (e.ln() - Dd::ONE).to_f64().abs() < 1e-28
        && (two.ln() - Dd::LN2).to_f64().abs() < 1e-28
        && (two.sqrt() * two.sqrt() - two).to_f64().abs() < 1e-30
        && (Dd::from(0.3).tanh().to_f64() - 0.3f64.tanh()).abs() < 1e-16
        && (Dd::from(-2.0).sigmoid().to_f64() - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-16
}

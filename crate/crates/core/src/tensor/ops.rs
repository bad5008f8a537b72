use std::rc::Rc;

use ndarray::{s, Axis, Zip};

use super::{sum_to_shape, Array, Tape, Var};

impl Tape {
    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() + b.value();
        let (sa, sb) = (a.value().shape().to_vec(), b.value().shape().to_vec());
        self.record(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g.clone(), &sa)),
                need[1].then(|| sum_to_shape(g.clone(), &sb)),
            ]
        })
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() - b.value();
        let (sa, sb) = (a.value().shape().to_vec(), b.value().shape().to_vec());
        self.record(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g.clone(), &sa)),
                need[1].then(|| sum_to_shape(-g, &sb)),
            ]
        })
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() * b.value();
        let (va, vb) = (a.rc(), b.rc());
        self.record(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g * &*vb, va.shape())),
                need[1].then(|| sum_to_shape(g * &*va, vb.shape())),
            ]
        })
    }

    pub fn scale(&self, a: &Var, factor: f64) -> Var {
        let out = a.value() * factor;
        self.record(out, &[a], move |g, _| vec![Some(g * factor)])
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        let out = a.value() + c;
        self.record(out, &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self, a: &Var) -> Var {
        let out = a.value().mapv(|v| v * v);
        let va = a.rc();
        self.record(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*va).for_each(|d, &x| *d *= 2.0 * x);
            vec![Some(d)]
        })
    }

    pub fn sqrt(&self, a: &Var) -> Var {
        let out = a.value().mapv(f64::sqrt);
        let root = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*root).for_each(|d, &r| *d /= 2.0 * r);
            vec![Some(d)]
        })
    }

    pub fn recip(&self, a: &Var) -> Var {
        let out = a.value().mapv(|v| 1.0 / v);
        let inv = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*inv).for_each(|d, &r| *d *= -r * r);
            vec![Some(d)]
        })
    }

    pub fn relu(&self, a: &Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&self, a: &Var, slope: f64) -> Var {
        let out = a.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        let va = a.rc();
        self.record(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*va).for_each(|d, &x| {
                if x <= 0.0 {
                    *d *= slope;
                }
            });
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let s = Rc::new(out.clone());
        self.record(out, &[a], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*s).for_each(|d, &s| *d *= s * (1.0 - s));
            vec![Some(d)]
        })
    }

    /// Sum of every element, as a `(1, 1, 1, 1)` value.
    pub fn sum_all(&self, a: &Var) -> Var {
        let total = a.value().sum();
        let dim = a.value().raw_dim();
        self.record(
            Array::from_elem((1, 1, 1, 1), total),
            &[a],
            move |g, _| vec![Some(Array::from_elem(dim.clone(), g[[0, 0, 0, 0]]))],
        )
    }

    /// Sum over `axes`, keeping them as singleton dimensions.
    pub fn sum_axes(&self, a: &Var, axes: &[usize]) -> Var {
        let mut out = a.value().clone();
        for &ax in axes {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let dim = a.value().raw_dim();
        self.record(out, &[a], move |g, _| {
            let full = g
                .broadcast(dim.clone())
                .expect("reduced gradient broadcasts back")
                .to_owned();
            vec![Some(full)]
        })
    }

    /// Mean over `axes`, keeping them as singleton dimensions.
    pub fn mean_axes(&self, a: &Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| a.value().shape()[ax]).product();
        let summed = self.sum_axes(a, axes);
        self.scale(&summed, 1.0 / count as f64)
    }

    /// Picks `inside` where `mask > 0.5` and `outside` elsewhere. The mask
    /// broadcasts against the operands and is never differentiated.
    pub fn select(&self, mask: &Array, inside: &Var, outside: &Var) -> Var {
        assert_eq!(inside.shape(), outside.shape(), "select operand shapes");
        let m = mask
            .broadcast(inside.value().raw_dim())
            .expect("select mask must broadcast to operands")
            .to_owned();
        let mut out = outside.value().clone();
        Zip::from(&mut out)
            .and(inside.value())
            .and(&m)
            .for_each(|o, &i, &mk| {
                if mk > 0.5 {
                    *o = i;
                }
            });
        let m = Rc::new(m);
        self.record(out, &[inside, outside], move |g, need| {
            let pick = |take_inside: bool| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*m).for_each(|d, &mk| {
                    if (mk > 0.5) != take_inside {
                        *d = 0.0;
                    }
                });
                d
            };
            vec![need[0].then(|| pick(true)), need[1].then(|| pick(false))]
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat: batch/spatial dims must match");
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        self.record(out, parts, move |g, need| {
            let mut start = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| {
                    let piece = n.then(|| g.slice(s![.., start..start + w, .., ..]).to_owned());
                    start += w;
                    piece
                })
                .collect()
        })
    }

    /// Items `start..start + len` along the batch axis.
    pub fn narrow_batch(&self, a: &Var, start: usize, len: usize) -> Var {
        let out = a.value().slice(s![start..start + len, .., .., ..]).to_owned();
        let dim = a.value().raw_dim();
        self.record(out, &[a], move |g, _| {
            let mut full = Array::zeros(dim.clone());
            full.slice_mut(s![start..start + len, .., .., ..]).assign(g);
            vec![Some(full)]
        })
    }

    /// Splits each `(C, m, m)` map into an `n × n` grid of square patches.
    /// Patch `(i, j)` of batch item `b` lands at index `b·n² + i·n + j`.
    pub fn patchify(&self, a: &Var, n: usize) -> Var {
        let out = patchify_array(a.value(), n);
        self.record(out, &[a], move |g, _| vec![Some(unpatchify_array(g, n))])
    }

    /// Inverse of [`Tape::patchify`]: tiles `B·n²` patches back into `B` maps.
    pub fn unpatchify(&self, a: &Var, n: usize) -> Var {
        let out = unpatchify_array(a.value(), n);
        self.record(out, &[a], move |g, _| vec![Some(patchify_array(g, n))])
    }
}

pub(crate) fn patchify_array(a: &Array, n: usize) -> Array {
    let [b, c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]];
    assert!(n > 0 && h % n == 0 && w % n == 0, "patchify: {h}x{w} not divisible by {n}");
    let (ph, pw) = (h / n, w / n);
    let mut out = Array::zeros((b * n * n, c, ph, pw));
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                out.slice_mut(s![bi * n * n + i * n + j, .., .., ..])
                    .assign(&a.slice(s![bi, .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw]));
            }
        }
    }
    out
}

pub(crate) fn unpatchify_array(a: &Array, n: usize) -> Array {
    let [bn, c, ph, pw] = [a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]];
    assert!(n > 0 && bn % (n * n) == 0, "unpatchify: {bn} patches is not a multiple of {n}²");
    let b = bn / (n * n);
    let mut out = Array::zeros((b, c, ph * n, pw * n));
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                out.slice_mut(s![bi, .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw])
                    .assign(&a.slice(s![bi * n * n + i * n + j, .., .., ..]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: (usize, usize, usize, usize)) -> Array {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_shape_vec(shape, (0..len).map(|v| v as f64 * 0.1 - 1.0).collect()).unwrap()
    }

    #[test]
    fn patch_tiling_round_trips() {
        let a = ramp((2, 3, 8, 8));
        let p = patchify_array(&a, 4);
        assert_eq!(p.shape(), &[32, 3, 2, 2]);
        assert_eq!(unpatchify_array(&p, 4), a);
        // patch (1, 2) of batch 1 covers rows 2..4 and columns 4..6
        assert_eq!(p[[16 + 4 + 2, 1, 0, 1]], a[[1, 1, 2, 5]]);
    }

    #[test]
    fn select_routes_gradients_by_mask() {
        let tape = Tape::new();
        let a = tape.leaf(Array::from_elem((1, 2, 1, 2), 1.0));
        let b = tape.leaf(Array::from_elem((1, 2, 1, 2), 2.0));
        let mask = Array::from_shape_vec((1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let y = tape.select(&mask, &a, &b);
        assert_eq!(y.value()[[0, 1, 0, 0]], 1.0);
        assert_eq!(y.value()[[0, 1, 0, 1]], 2.0);
        let grads = tape.backward(&tape.sum_all(&y));
        assert_eq!(grads.get(&a).unwrap()[[0, 0, 0, 1]], 0.0);
        assert_eq!(grads.get(&b).unwrap()[[0, 0, 0, 1]], 1.0);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(ramp((2, 3, 2, 2)));
        let s = tape.leaf(Array::from_elem((2, 3, 1, 1), 2.0));
        let y = tape.sum_all(&tape.mul(&x, &s));
        let grads = tape.backward(&y);
        let gs = grads.get(&s).unwrap();
        let expected: f64 = x.value().slice(s![0, 0, .., ..]).sum();
        assert!((gs[[0, 0, 0, 0]] - expected).abs() < 1e-12);
        assert!(grads.get(&x).unwrap().iter().all(|&v| v == 2.0));
    }
}

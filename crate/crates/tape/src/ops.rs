//! Primitive operations and their forward evaluation.

use crate::conv;
use crate::{Tape, Value, Var};
use ndarray::{Array2, ArrayD, Axis, Ix4, IxDyn, Slice};
use std::sync::Arc;

/// The primitive set. Every variant's backward rule (see `grad.rs`) is built
/// from variants of this same enum, so gradients can be differentiated again.
#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    PowConst(Var, f64),
    ClampMin(Var, f64),
    /// Sum of all elements, producing a 0-d scalar.
    Sum(Var),
    /// Broadcast a 0-d scalar to the given shape.
    FillLike(Var, Vec<usize>),
    /// Broadcast a `[C]` vector over an `(N, C, H, W)` shape.
    BroadcastChan(Var, Vec<usize>),
    /// Reduce `(N, C, H, W)` to `[C]` by summing over batch and space.
    SumToChan(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    /// Adjoint of `Conv2d` in its input: maps an output-shaped cotangent
    /// back to input shape `(h, w)`.
    ConvInputGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        hw: (usize, usize),
    },
    /// Adjoint of `Conv2d` in its weights, for kernel size `khw`.
    ConvWeightGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
        khw: (usize, usize),
    },
    /// Depthwise valid-mode correlation with a fixed symmetric kernel.
    BlurValid { x: Var, kernel: Arc<Array2<f64>> },
    /// Depthwise full-mode correlation; adjoint of `BlurValid` for
    /// symmetric kernels.
    BlurFull { x: Var, kernel: Arc<Array2<f64>> },
    AvgPool2(Var),
    Upsample2(Var),
    /// Concatenate two `(N, C, H, W)` tensors along the channel axis.
    ConcatC(Var, Var),
    SliceC {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Embed channels into a zero tensor with `total` channels at `start`.
    PadC {
        x: Var,
        start: usize,
        total: usize,
    },
    Crop2d {
        x: Var,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    /// Embed a spatial block into an `(h, w)` zero canvas at `(top, left)`.
    PadInsert2d {
        x: Var,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
}

fn as4<'a>(v: &'a Value, what: &str) -> ndarray::ArrayView4<'a, f64> {
    v.view()
        .into_dimensionality::<Ix4>()
        .unwrap_or_else(|_| panic!("{what}: expected a 4-d (N,C,H,W) tensor, got {:?}", v.shape()))
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let (va, vb) = (self.val(a), self.val(b));
        self.push(&*va + &*vb, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let (va, vb) = (self.val(a), self.val(b));
        self.push(&*va - &*vb, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let (va, vb) = (self.val(a), self.val(b));
        self.push(&*va * &*vb, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "div");
        let (va, vb) = (self.val(a), self.val(b));
        self.push(&*va / &*vb, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| -x), Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| x * c), Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| x + c), Op::AddScalar(a, c))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.val(a);
        self.push(va.mapv(f64::abs), Op::Abs(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let va = self.val(a);
        self.push(
            va.mapv(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn pow_const(&self, a: Var, c: f64) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| x.powf(c)), Op::PowConst(a, c))
    }

    pub fn clamp_min(&self, a: Var, m: f64) -> Var {
        let va = self.val(a);
        self.push(va.mapv(|x| x.max(m)), Op::ClampMin(a, m))
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.val(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), va.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn fill_like(&self, scalar: Var, shape: &[usize]) -> Var {
        let v = self.val(scalar);
        assert_eq!(v.ndim(), 0, "fill_like: source must be 0-d");
        let x = *v.first().unwrap();
        self.push(
            ArrayD::from_elem(IxDyn(shape), x),
            Op::FillLike(scalar, shape.to_vec()),
        )
    }

    /// `b` is `[C]`; result has the given `(N, C, H, W)` shape.
    pub fn broadcast_chan(&self, b: Var, shape: &[usize]) -> Var {
        let vb = self.val(b);
        assert_eq!(vb.ndim(), 1, "broadcast_chan: bias must be 1-d");
        assert_eq!(shape.len(), 4, "broadcast_chan: target must be 4-d");
        assert_eq!(vb.len(), shape[1], "broadcast_chan: channel count mismatch");
        let mut out = ArrayD::zeros(IxDyn(shape));
        {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for c in 0..shape[1] {
                o4.index_axis_mut(Axis(1), c).fill(vb[c]);
            }
        }
        self.push(out, Op::BroadcastChan(b, shape.to_vec()))
    }

    pub fn sum_to_chan(&self, a: Var) -> Var {
        let va = self.val(a);
        let v4 = as4(&va, "sum_to_chan");
        let c = v4.shape()[1];
        let mut out = ndarray::Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = v4.index_axis(Axis(1), ci).sum();
        }
        self.push(out.into_dyn(), Op::SumToChan(a))
    }

    /// 2-d cross-correlation with zero padding.
    /// `x`: `(N, Cin, H, W)`, `w`: `(Cout, Cin, kh, kw)`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.val(x), self.val(w));
        let out = conv::conv2d(&as4(&vx, "conv2d.x"), &as4(&vw, "conv2d.w"), stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_input_grad(&self, g: Var, w: Var, stride: usize, pad: usize, hw: (usize, usize)) -> Var {
        let (vg, vw) = (self.val(g), self.val(w));
        let out = conv::conv2d_input_grad(
            &as4(&vg, "conv_input_grad.g"),
            &as4(&vw, "conv_input_grad.w"),
            stride,
            pad,
            hw,
        );
        self.push(out.into_dyn(), Op::ConvInputGrad { g, w, stride, pad, hw })
    }

    pub fn conv_weight_grad(&self, x: Var, g: Var, stride: usize, pad: usize, khw: (usize, usize)) -> Var {
        let (vx, vg) = (self.val(x), self.val(g));
        let out = conv::conv2d_weight_grad(
            &as4(&vx, "conv_weight_grad.x"),
            &as4(&vg, "conv_weight_grad.g"),
            stride,
            pad,
            khw,
        );
        self.push(out.into_dyn(), Op::ConvWeightGrad { x, g, stride, pad, khw })
    }

    pub fn blur_valid(&self, x: Var, kernel: Arc<Array2<f64>>) -> Var {
        let vx = self.val(x);
        let out = conv::blur_valid(&as4(&vx, "blur_valid"), &kernel);
        self.push(out.into_dyn(), Op::BlurValid { x, kernel })
    }

    pub fn blur_full(&self, x: Var, kernel: Arc<Array2<f64>>) -> Var {
        let vx = self.val(x);
        let out = conv::blur_full(&as4(&vx, "blur_full"), &kernel);
        self.push(out.into_dyn(), Op::BlurFull { x, kernel })
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.val(x);
        let out = conv::avg_pool2(&as4(&vx, "avg_pool2"));
        self.push(out.into_dyn(), Op::AvgPool2(x))
    }

    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.val(x);
        let out = conv::upsample2(&as4(&vx, "upsample2"));
        self.push(out.into_dyn(), Op::Upsample2(x))
    }

    pub fn concat_c(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let (a4, b4) = (as4(&va, "concat_c.a"), as4(&vb, "concat_c.b"));
        assert_eq!(a4.shape()[0], b4.shape()[0], "concat_c: batch mismatch");
        assert_eq!(&a4.shape()[2..], &b4.shape()[2..], "concat_c: spatial mismatch");
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).unwrap();
        self.push(out.into_dyn(), Op::ConcatC(a, b))
    }

    pub fn slice_c(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.val(x);
        let x4 = as4(&vx, "slice_c");
        assert!(start + len <= x4.shape()[1], "slice_c: channel range out of bounds");
        let out = x4
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.push(out.into_dyn(), Op::SliceC { x, start, len })
    }

    pub fn pad_c(&self, x: Var, start: usize, total: usize) -> Var {
        let vx = self.val(x);
        let x4 = as4(&vx, "pad_c");
        let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert!(start + c <= total, "pad_c: channel range out of bounds");
        let mut out = ndarray::Array4::<f64>::zeros((n, total, h, w));
        out.slice_axis_mut(Axis(1), Slice::from(start..start + c))
            .assign(&x4);
        self.push(out.into_dyn(), Op::PadC { x, start, total })
    }

    pub fn crop2d(&self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let vx = self.val(x);
        let x4 = as4(&vx, "crop2d");
        assert!(
            top + h <= x4.shape()[2] && left + w <= x4.shape()[3],
            "crop2d: window out of bounds"
        );
        let out = x4
            .slice_axis(Axis(2), Slice::from(top..top + h))
            .slice_axis(Axis(3), Slice::from(left..left + w))
            .to_owned();
        self.push(out.into_dyn(), Op::Crop2d { x, top, left, h, w })
    }

    pub fn pad_insert2d(&self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let vx = self.val(x);
        let x4 = as4(&vx, "pad_insert2d");
        let (n, c, hi, wi) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert!(top + hi <= h && left + wi <= w, "pad_insert2d: block out of bounds");
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        out.slice_axis_mut(Axis(2), Slice::from(top..top + hi))
            .slice_axis_mut(Axis(3), Slice::from(left..left + wi))
            .assign(&x4);
        self.push(out.into_dyn(), Op::PadInsert2d { x, top, left, h, w })
    }

    /// Convenience: `x + bias` with `bias` broadcast over `(N, ·, H, W)`.
    pub fn add_chan_bias(&self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x);
        let b = self.broadcast_chan(bias, &shape);
        self.add(x, b)
    }
}

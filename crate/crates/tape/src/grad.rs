//! Reverse sweep. Backward rules emit tape nodes, so the result of `grad`
//! can be differentiated again.

use crate::{Op, Tape, Value, Var};
use ndarray::{ArrayD, IxDyn};

impl Tape {
    /// Gradient of a 0-d `output` with respect to each var in `wrt`.
    ///
    /// Vars that the output does not depend on get a fresh zero leaf of the
    /// matching shape. The returned vars live on this tape and carry full
    /// history; `detach` them to stop further differentiation.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.val(output).ndim(),
            0,
            "grad: output must be a 0-d scalar"
        );
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        grads[output.0] = Some(self.constant(1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let out = Var(id);
            for (input, contrib) in self.vjp(&op, out, g) {
                if input.0 >= grads.len() {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.leaf(ArrayD::zeros(IxDyn(&self.shape(*v)))),
            })
            .collect()
    }

    /// Contributions of `g` (cotangent of `out`) to each input of `op`.
    fn vjp(&self, op: &Op, out: Var, g: Var) -> Vec<(Var, Var)> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.neg(g))],
            Op::Mul(a, b) => vec![(a, self.mul(g, b)), (b, self.mul(g, a))],
            Op::Div(a, b) => {
                let ga = self.div(g, b);
                // d/db (a/b) = -out/b
                let gb = self.neg(self.div(self.mul(g, out), b));
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::AddScalar(a, _) => vec![(a, g)],
            Op::Tanh(a) => {
                // 1 - tanh^2, written in terms of the recorded output
                let one_minus = self.add_scalar(self.neg(self.mul(out, out)), 1.0);
                vec![(a, self.mul(g, one_minus))]
            }
            Op::Sigmoid(a) => {
                let one_minus = self.add_scalar(self.neg(out), 1.0);
                let d = self.mul(out, one_minus);
                vec![(a, self.mul(g, d))]
            }
            Op::Abs(a) => {
                let sign = self.leaf(self.val(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                vec![(a, self.mul(g, sign))]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.leaf(self.val(a).mapv(|x| if x > 0.0 { 1.0 } else { slope }));
                vec![(a, self.mul(g, mask))]
            }
            Op::PowConst(a, c) => {
                let d = self.scale(self.pow_const(a, c - 1.0), c);
                vec![(a, self.mul(g, d))]
            }
            Op::ClampMin(a, m) => {
                let mask = self.leaf(self.val(a).mapv(|x| if x > m { 1.0 } else { 0.0 }));
                vec![(a, self.mul(g, mask))]
            }
            Op::Sum(a) => {
                let shape = self.shape(a);
                vec![(a, self.fill_like(g, &shape))]
            }
            Op::FillLike(a, _) => vec![(a, self.sum(g))],
            Op::BroadcastChan(a, _) => vec![(a, self.sum_to_chan(g))],
            Op::SumToChan(a) => {
                let shape = self.shape(a);
                vec![(a, self.broadcast_chan(g, &shape))]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let gx = self.conv_input_grad(g, w, stride, pad, (xs[2], xs[3]));
                let gw = self.conv_weight_grad(x, g, stride, pad, (ws[2], ws[3]));
                vec![(x, gx), (w, gw)]
            }
            Op::ConvInputGrad { g: gin, w, stride, pad, .. } => {
                // out = A_w^T gin; <u, A_w^T gin> = <conv(u, w), gin>
                let ws = self.shape(w);
                let gg = self.conv2d(g, w, stride, pad);
                let gw = self.conv_weight_grad(g, gin, stride, pad, (ws[2], ws[3]));
                vec![(gin, gg), (w, gw)]
            }
            Op::ConvWeightGrad { x, g: gin, stride, pad, .. } => {
                // out = B_x^T gin; <u, B_x^T gin> = <conv(x, u), gin>
                let xs = self.shape(x);
                let gx = self.conv_input_grad(gin, g, stride, pad, (xs[2], xs[3]));
                let gg = self.conv2d(x, g, stride, pad);
                vec![(x, gx), (gin, gg)]
            }
            Op::BlurValid { x, ref kernel } => vec![(x, self.blur_full(g, kernel.clone()))],
            Op::BlurFull { x, ref kernel } => vec![(x, self.blur_valid(g, kernel.clone()))],
            Op::AvgPool2(x) => vec![(x, self.scale(self.upsample2(g), 0.25))],
            Op::Upsample2(x) => vec![(x, self.scale(self.avg_pool2(g), 4.0))],
            Op::ConcatC(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                vec![(a, self.slice_c(g, 0, ca)), (b, self.slice_c(g, ca, cb))]
            }
            Op::SliceC { x, start, .. } => {
                let total = self.shape(x)[1];
                vec![(x, self.pad_c(g, start, total))]
            }
            Op::PadC { x, start, .. } => {
                let len = self.shape(x)[1];
                vec![(x, self.slice_c(g, start, len))]
            }
            Op::Crop2d { x, top, left, .. } => {
                let xs = self.shape(x);
                vec![(x, self.pad_insert2d(g, top, left, xs[2], xs[3]))]
            }
            Op::PadInsert2d { x, top, left, .. } => {
                let xs = self.shape(x);
                vec![(x, self.crop2d(g, top, left, xs[2], xs[3]))]
            }
        }
    }

    /// Squared Frobenius norm of a set of vars, as a tape scalar.
    pub fn sq_norm(&self, vars: &[Var]) -> Var {
        let mut acc = self.constant(0.0);
        for &v in vars {
            let sq = self.mul(v, v);
            acc = self.add(acc, self.sum(sq));
        }
        acc
    }
}

/// Plain-array helper: elementwise finite check.
pub fn all_finite(v: &Value) -> bool {
    v.iter().all(|x| x.is_finite())
}

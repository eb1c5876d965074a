//! Differentiable operations on [`Var`].
//!
//! Shape errors here are programming errors and panic with the offending
//! shapes; callers validate user-facing inputs before building graphs.

use std::rc::Rc;

use crate::autograd::Backward;
use crate::{ConvGeom, Scalar, SpatialMap, Tensor, Var};

fn expect<T>(r: crate::Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => panic!("{e}"),
    }
}

macro_rules! backward_op {
    ($name:ident $(, $field:ident : $ty:ty)*) => {
        struct $name<T: Scalar> {
            $($field: $ty,)*
            _t: std::marker::PhantomData<T>,
        }
    };
}

backward_op!(AddOp);
impl<T: Scalar> Backward<T> for AddOp<T> {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

backward_op!(SubOp);
impl<T: Scalar> Backward<T> for SubOp<T> {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), needs[1].then(|| g.neg())]
    }
}

backward_op!(MulOp);
impl<T: Scalar> Backward<T> for MulOp<T> {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![needs[0].then(|| g.mul(&x[1])), needs[1].then(|| g.mul(&x[0]))]
    }
}

backward_op!(DivOp);
impl<T: Scalar> Backward<T> for DivOp<T> {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, x: &[Var<T>], out: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let ga = g.div(&x[1]);
        let gb = needs[1].then(|| ga.mul(out).neg());
        vec![needs[0].then_some(ga), gb]
    }
}

backward_op!(ScaleOp, factor: T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.scale(self.factor))]
    }
}

backward_op!(IdentityGradOp);
impl<T: Scalar> Backward<T> for IdentityGradOp<T> {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone())]
    }
}

backward_op!(ExpOp);
impl<T: Scalar> Backward<T> for ExpOp<T> {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(out))]
    }
}

backward_op!(LnOp);
impl<T: Scalar> Backward<T> for LnOp<T> {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.div(&x[0]))]
    }
}

backward_op!(SqrtOp);
impl<T: Scalar> Backward<T> for SqrtOp<T> {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.div(out).scale(T::lit(0.5)))]
    }
}

backward_op!(SquareOp);
impl<T: Scalar> Backward<T> for SquareOp<T> {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&x[0]).scale(T::lit(2.0)))]
    }
}

backward_op!(SigmoidOp);
impl<T: Scalar> Backward<T> for SigmoidOp<T> {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let slope = out.mul(&out.neg().add_scalar(T::one()));
        vec![Some(g.mul(&slope))]
    }
}

backward_op!(LeakyReluOp, slope: T);
impl<T: Scalar> Backward<T> for LeakyReluOp<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let slope = self.slope;
        let mask = x[0].value().map(|v| if v > T::zero() { T::one() } else { slope });
        vec![Some(g.mul(&Var::constant(mask)))]
    }
}

backward_op!(BroadcastOp);
impl<T: Scalar> Backward<T> for BroadcastOp<T> {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.sum_to(x[0].shape()))]
    }
}

backward_op!(SumToOp);
impl<T: Scalar> Backward<T> for SumToOp<T> {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.broadcast_to(x[0].shape()))]
    }
}

backward_op!(ReshapeOp);
impl<T: Scalar> Backward<T> for ReshapeOp<T> {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.reshape(x[0].shape()))]
    }
}

backward_op!(PermuteOp, perm: Vec<usize>);
impl<T: Scalar> Backward<T> for PermuteOp<T> {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let mut inverse = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(g.permute(&inverse))]
    }
}

backward_op!(MatmulOp, trans_a: bool, trans_b: bool);
impl<T: Scalar> Backward<T> for MatmulOp<T> {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let (a, b) = (&x[0], &x[1]);
        let (ta, tb) = (self.trans_a, self.trans_b);
        let ga = needs[0].then(|| {
            if ta {
                b.matmul_t(g, tb, true)
            } else {
                g.matmul_t(b, false, !tb)
            }
        });
        let gb = needs[1].then(|| {
            if tb {
                g.matmul_t(a, true, ta)
            } else {
                a.matmul_t(g, !ta, false)
            }
        });
        vec![ga, gb]
    }
}

backward_op!(Im2ColOp, geom: ConvGeom);
impl<T: Scalar> Backward<T> for Im2ColOp<T> {
    fn name(&self) -> &'static str {
        "im2col"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.col2im(&self.geom))]
    }
}

backward_op!(Col2ImOp, geom: ConvGeom);
impl<T: Scalar> Backward<T> for Col2ImOp<T> {
    fn name(&self) -> &'static str {
        "col2im"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.im2col(&self.geom))]
    }
}

backward_op!(ConcatOp);
impl<T: Scalar> Backward<T> for ConcatOp<T> {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        x.iter()
            .zip(needs)
            .map(|(input, &need)| {
                let len = input.shape()[0];
                let part = need.then(|| g.narrow0(start, len));
                start += len;
                part
            })
            .collect()
    }
}

backward_op!(NarrowOp, start: usize);
impl<T: Scalar> Backward<T> for NarrowOp<T> {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.pad0(self.start, x[0].shape()[0]))]
    }
}

backward_op!(PadOp, start: usize);
impl<T: Scalar> Backward<T> for PadOp<T> {
    fn name(&self) -> &'static str {
        "pad"
    }
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.narrow0(self.start, x[0].shape()[0]))]
    }
}

backward_op!(SpatialMapOp, map: Rc<SpatialMap<T>>, transpose: bool);
impl<T: Scalar> Backward<T> for SpatialMapOp<T> {
    fn name(&self) -> &'static str {
        "spatial_map"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.spatial_map(&self.map, !self.transpose))]
    }
}

macro_rules! make {
    ($name:ident) => {
        $name::<T> {
            _t: std::marker::PhantomData,
        }
    };
    ($name:ident { $($field:ident : $val:expr),* }) => {
        $name::<T> {
            $($field: $val,)*
            _t: std::marker::PhantomData,
        }
    };
}

impl<T: Scalar> Var<T> {
    fn same_shape(&self, other: &Self, name: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Self) -> Self {
        self.same_shape(other, "add");
        let v = expect(self.value().zip_map(other.value(), |a, b| a + b));
        Var::from_op(v, make!(AddOp), vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.same_shape(other, "sub");
        let v = expect(self.value().zip_map(other.value(), |a, b| a - b));
        Var::from_op(v, make!(SubOp), vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.same_shape(other, "mul");
        let v = expect(self.value().zip_map(other.value(), |a, b| a * b));
        Var::from_op(v, make!(MulOp), vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Self) -> Self {
        self.same_shape(other, "div");
        let v = expect(self.value().zip_map(other.value(), |a, b| a / b));
        Var::from_op(v, make!(DivOp), vec![self.clone(), other.clone()])
    }

    /// `self + other`, broadcasting `other` up to `self`'s shape.
    pub fn add_b(&self, other: &Self) -> Self {
        self.add(&other.broadcast_to(self.shape()))
    }

    pub fn sub_b(&self, other: &Self) -> Self {
        self.sub(&other.broadcast_to(self.shape()))
    }

    pub fn mul_b(&self, other: &Self) -> Self {
        self.mul(&other.broadcast_to(self.shape()))
    }

    pub fn div_b(&self, other: &Self) -> Self {
        self.div(&other.broadcast_to(self.shape()))
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn scale(&self, factor: T) -> Self {
        let v = self.value().map(|a| a * factor);
        Var::from_op(v, make!(ScaleOp { factor: factor }), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: T) -> Self {
        let v = self.value().map(|a| a + c);
        Var::from_op(v, make!(IdentityGradOp), vec![self.clone()])
    }

    pub fn exp(&self) -> Self {
        let v = self.value().map(T::exp);
        Var::from_op(v, make!(ExpOp), vec![self.clone()])
    }

    pub fn ln(&self) -> Self {
        let v = self.value().map(T::ln);
        Var::from_op(v, make!(LnOp), vec![self.clone()])
    }

    pub fn sqrt(&self) -> Self {
        let v = self.value().map(T::sqrt);
        Var::from_op(v, make!(SqrtOp), vec![self.clone()])
    }

    pub fn square(&self) -> Self {
        let v = self.value().map(|a| a * a);
        Var::from_op(v, make!(SquareOp), vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Self {
        let v = self.value().map(|a| {
            // split by sign so exp never overflows
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        });
        Var::from_op(v, make!(SigmoidOp), vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let v = self.value().map(|a| if a > T::zero() { a } else { a * slope });
        Var::from_op(v, make!(LeakyReluOp { slope: slope }), vec![self.clone()])
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self) -> Self {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Self {
        let n = self.numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let v = expect(self.value().broadcast_to(shape));
        Var::from_op(v, make!(BroadcastOp), vec![self.clone()])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let v = expect(self.value().sum_to(shape));
        Var::from_op(v, make!(SumToOp), vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let v = expect(self.value().reshape(shape.to_vec()));
        Var::from_op(v, make!(ReshapeOp), vec![self.clone()])
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        let v = expect(self.value().permute(perm));
        Var::from_op(v, make!(PermuteOp { perm: perm.to_vec() }), vec![self.clone()])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` with optional transposes of either operand.
    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Self {
        let v = expect(Tensor::matmul(self.value(), other.value(), trans_a, trans_b));
        Var::from_op(
            v,
            make!(MatmulOp {
                trans_a: trans_a,
                trans_b: trans_b
            }),
            vec![self.clone(), other.clone()],
        )
    }

    pub fn im2col(&self, geom: &ConvGeom) -> Self {
        let v = expect(self.value().im2col(geom));
        Var::from_op(v, make!(Im2ColOp { geom: *geom }), vec![self.clone()])
    }

    pub fn col2im(&self, geom: &ConvGeom) -> Self {
        let v = expect(self.value().col2im(geom));
        Var::from_op(v, make!(Col2ImOp { geom: *geom }), vec![self.clone()])
    }

    /// Concatenation along the leading axis.
    pub fn concat0(parts: &[&Self]) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = expect(Tensor::concat0(&values));
        Var::from_op(v, make!(ConcatOp), parts.iter().map(|&p| p.clone()).collect())
    }

    pub fn narrow0(&self, start: usize, len: usize) -> Self {
        if start == 0 && len == self.shape()[0] {
            return self.clone();
        }
        let v = expect(self.value().narrow0(start, len));
        Var::from_op(v, make!(NarrowOp { start: start }), vec![self.clone()])
    }

    pub fn pad0(&self, start: usize, total: usize) -> Self {
        let v = expect(self.value().pad0(start, total));
        Var::from_op(v, make!(PadOp { start: start }), vec![self.clone()])
    }

    pub fn spatial_map(&self, map: &Rc<SpatialMap<T>>, transpose: bool) -> Self {
        let v = expect(self.value().spatial_map(map, transpose));
        Var::from_op(
            v,
            make!(SpatialMapOp {
                map: Rc::clone(map),
                transpose: transpose
            }),
            vec![self.clone()],
        )
    }
}

impl<T: Scalar> std::ops::Add for &Var<T> {
    type Output = Var<T>;
    fn add(self, rhs: Self) -> Var<T> {
        Var::add(self, rhs)
    }
}

impl<T: Scalar> std::ops::Sub for &Var<T> {
    type Output = Var<T>;
    fn sub(self, rhs: Self) -> Var<T> {
        Var::sub(self, rhs)
    }
}

impl<T: Scalar> std::ops::Mul for &Var<T> {
    type Output = Var<T>;
    fn mul(self, rhs: Self) -> Var<T> {
        Var::mul(self, rhs)
    }
}

impl<T: Scalar> std::ops::Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}

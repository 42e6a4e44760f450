use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{Float, NodeId, OpKind, Tape, Tensor, Var};

struct AddOp {
    inputs: [Option<NodeId>; 2],
}

impl<T: Float> Backward<T> for AddOp {
    fn kind(&self) -> OpKind {
        OpKind::Add
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(self.inputs.iter().map(|i| i.map(|_| g.to_vec())).collect())
    }
}

struct MulOp<T: Float> {
    inputs: [Option<NodeId>; 2],
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}

impl<T: Float> Backward<T> for MulOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::Mul
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        // d(a*b)/da = b, d(a*b)/db = a
        let ga = self.inputs[0].map(|_| mul_slices(self.b.data(), g));
        let gb = self.inputs[1].map(|_| mul_slices(self.a.data(), g));
        Ok(vec![ga, gb])
    }
}

fn mul_slices<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

struct ScaleOp<T> {
    inputs: [Option<NodeId>; 1],
    factor: T,
    kind: OpKind,
}

impl<T: Float> Backward<T> for ScaleOp<T> {
    fn kind(&self) -> OpKind {
        self.kind
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let f = self.factor;
        Ok(vec![Some(g.iter().map(|&v| v * f).collect())])
    }
}

struct ReluOp<T: Float> {
    inputs: [Option<NodeId>; 1],
    out: Arc<Tensor<T>>,
}

impl<T: Float> Backward<T> for ReluOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::Relu
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let z = T::zero();
        let grad = self
            .out
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &g)| if y > z { g } else { z })
            .collect();
        Ok(vec![Some(grad)])
    }
}

struct SigmoidOp<T: Float> {
    inputs: [Option<NodeId>; 1],
    out: Arc<Tensor<T>>,
}

impl<T: Float> Backward<T> for SigmoidOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::Sigmoid
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let one = T::one();
        let grad = self
            .out
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &g)| g * y * (one - y))
            .collect();
        Ok(vec![Some(grad)])
    }
}

struct SumOp {
    inputs: [Option<NodeId>; 1],
    numel: usize,
    mean: bool,
}

impl<T: Float> Backward<T> for SumOp {
    fn kind(&self) -> OpKind {
        OpKind::Sum
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut v = g[0];
        if self.mean {
            v /= T::of(self.numel as f64);
        }
        Ok(vec![Some(vec![v; self.numel])])
    }
}

struct ReshapeOp {
    inputs: [Option<NodeId>; 1],
}

impl<T: Float> Backward<T> for ReshapeOp {
    fn kind(&self) -> OpKind {
        OpKind::Reshape
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn same_shape<T: Float>(what: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: operand shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(out, AddOp { inputs: [a.node(), b.node()] }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = Tensor::new(a.shape(), mul_slices(a.data(), b.data()))?;
        Ok(self.record(
            out,
            MulOp {
                inputs: [a.node(), b.node()],
                a: a.value_arc(),
                b: b.value_arc(),
            },
        ))
    }

    pub fn add_scalar(&mut self, x: &Var<T>, s: T) -> Result<Var<T>> {
        let out = x.value().map(|v| v + s);
        Ok(self.record(
            out,
            ScaleOp {
                inputs: [x.node()],
                factor: T::one(),
                kind: OpKind::AddScalar,
            },
        ))
    }

    pub fn scale(&mut self, x: &Var<T>, s: T) -> Result<Var<T>> {
        let out = x.value().map(|v| v * s);
        Ok(self.record(
            out,
            ScaleOp {
                inputs: [x.node()],
                factor: s,
                kind: OpKind::Scale,
            },
        ))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let z = T::zero();
        let out = Arc::new(x.value().map(|v| if v > z { v } else { z }));
        Ok(self.record_shared(Arc::clone(&out), ReluOp { inputs: [x.node()], out }))
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = Arc::new(x.value().map(sigmoid_scalar));
        Ok(self.record_shared(Arc::clone(&out), SigmoidOp { inputs: [x.node()], out }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.reduce(x, false)
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.reduce(x, true)
    }

    fn reduce(&mut self, x: &Var<T>, mean: bool) -> Result<Var<T>> {
        let n = x.value().numel();
        let mut s = x.value().sum();
        if mean {
            s /= n.max(1) as f64;
        }
        Ok(self.record(
            Tensor::scalar(T::of(s)),
            SumOp {
                inputs: [x.node()],
                numel: n,
                mean,
            },
        ))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value().clone().reshape(shape)?;
        Ok(self.record(out, ReshapeOp { inputs: [x.node()] }))
    }

    /// Collapses all axes after the first: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| shape_err!("flatten: rank-0 tensor"))?;
        let d = x.value().numel() / n.max(1);
        self.reshape(x, &[n, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
    }

    #[test]
    fn sigmoid_in_open_unit_interval() {
        for &x in &[-30.0f64, -5.0, -1e-3, 0.0, 2.0, 30.0] {
            let y = sigmoid_scalar(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
        // float32 saturates numerically at large |x|; the range is open for moderate inputs
        for &x in &[-15.0f32, 15.0] {
            let y = sigmoid_scalar(x);
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        // subgradient 0 at the kink
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_backward() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f32>::new();
        let y = tape.leaf(Tensor::new(&[3], vec![0.5, -1.0, 3.0]).unwrap());
        let a = tape.sum(&y).unwrap();
        let b = tape.sum(&y).unwrap();
        let l = tape.add(&a, &b).unwrap();
        tape.backward(&l).unwrap();
        assert_eq!(tape.grad(&y).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        assert!(tape.backward(&s).is_err());
    }

    #[test]
    fn constants_do_not_record() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[4]));
        let b = tape.relu(&a).unwrap();
        assert!(b.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(&[2]));
        let b = tape.leaf(Tensor::ones(&[3]));
        assert!(tape.add(&a, &b).is_err());
    }
}

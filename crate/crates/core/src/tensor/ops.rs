use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// ReLU backward. The subgradient at exactly zero is taken as 0.
pub fn relu_grad(x: &Tensor4, dy: &Tensor4) -> Result<Tensor4> {
    x.ensure_same_shape(dy, "relu_grad")?;
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor4::new(x.shape(), data)
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.ensure_same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
    Tensor4::new(a.shape(), data)
}

/// Averages every `(n, c)` plane, producing an `(n, c, 1, 1)` tensor.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = (0..s.n * s.c).map(|i| x.plane(i / s.c, i % s.c).iter().sum::<f64>() * inv).collect();
    Tensor4::new(Shape4::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_grad(input_shape: Shape4, dy: &Tensor4) -> Result<Tensor4> {
    let expect = Shape4::new(input_shape.n, input_shape.c, 1, 1);
    if dy.shape() != expect {
        return Err(Error::Config(format!("global_avg_pool_grad: cotangent {} does not match {expect}", dy.shape())));
    }
    let inv = 1.0 / input_shape.plane() as f64;
    let plane = input_shape.plane();
    let mut dx = Tensor4::zeros(input_shape);
    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
        chunk.fill(dy.data()[i] * inv);
    }
    Ok(dx)
}

/// Batched affine map: `x` is `rows x inputs`, `weight` is `outputs x inputs`.
pub fn linear(x: &[f64], weight: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let outputs = bias.len();
    if outputs == 0 || !weight.len().is_multiple_of(outputs) {
        return Err(Error::Config(format!("linear: weight of length {} is not a multiple of {outputs} outputs", weight.len())));
    }
    let inputs = weight.len() / outputs;
    if inputs == 0 || !x.len().is_multiple_of(inputs) {
        return Err(Error::Config(format!("linear: input of length {} is not a multiple of {inputs} features", x.len())));
    }
    let mut out = Vec::with_capacity(x.len() / inputs * outputs);
    for row in x.chunks(inputs) {
        for (o, b) in bias.iter().enumerate() {
            let wrow = &weight[o * inputs..(o + 1) * inputs];
            out.push(b + wrow.iter().zip(row).map(|(w, v)| w * v).sum::<f64>());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Vec<f64>,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn linear_grad(x: &[f64], weight: &[f64], outputs: usize, dy: &[f64]) -> Result<LinearGrads> {
    if outputs == 0 || !dy.len().is_multiple_of(outputs) || !weight.len().is_multiple_of(outputs) {
        return Err(Error::Config(format!("linear_grad: cotangent of length {} does not fit {outputs} outputs", dy.len())));
    }
    let rows = dy.len() / outputs;
    let inputs = weight.len() / outputs;
    if rows * inputs != x.len() {
        return Err(Error::Config(format!("linear_grad: input of length {} does not match {rows} rows of {inputs}", x.len())));
    }
    let mut dx = vec![0.0; x.len()];
    let mut dweight = vec![0.0; weight.len()];
    let mut dbias = vec![0.0; outputs];
    for r in 0..rows {
        let xr = &x[r * inputs..(r + 1) * inputs];
        let dxr = &mut dx[r * inputs..(r + 1) * inputs];
        for o in 0..outputs {
            let g = dy[r * outputs + o];
            dbias[o] += g;
            let wrow = &weight[o * inputs..(o + 1) * inputs];
            let dwrow = &mut dweight[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dxr[i] += g * wrow[i];
                dwrow[i] += g * xr[i];
            }
        }
    }
    Ok(LinearGrads { dx, dweight, dbias })
}

/// Returns `(-ln softmax(logits)[label], softmax - onehot)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Input(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

use crate::error::Result;
use crate::tape::{Backward, BackwardCtx, Var};
use crate::tensor::Tensor;

const FRAC_1_SQRT_2PI: f32 = 0.398_942_3;

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * libm::expf(-0.5 * x * x);
    cdf + x * pdf
}

struct GeluBackward;

impl Backward for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let x = ctx.inputs[0].data();
        Ok(vec![Some(ctx.grad_out.iter().zip(x).map(|(g, &v)| g * gelu_grad_scalar(v)).collect())])
    }
}

pub fn gelu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
    let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
    x.tape().record(out, &[x], GeluBackward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0).abs() < 1e-4);
        // Phi(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-6);
    }
}

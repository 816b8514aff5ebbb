//! Closed-form diffusion arithmetic on image tensors.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::rng::{normal_vec, Rng};
use crate::schedule::ScheduleTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Row-major `C x H x W` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Argument(format!("empty image shape {shape:?}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Argument(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("image contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Argument(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn combine(&self, a: f64, other: &ImageTensor, b: f64) -> ImageTensor {
        ImageTensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        }
    }
}

/// Standard-normal noise with the shape of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw(ImageTensor);

impl NoiseDraw {
    pub fn sample(shape: Shape, rng: &mut Rng) -> Self {
        NoiseDraw(ImageTensor {
            shape,
            data: normal_vec(rng, shape.len()),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        NoiseDraw(ImageTensor::zeros(shape))
    }

    pub fn from_tensor(t: ImageTensor) -> Self {
        NoiseDraw(t)
    }

    pub fn into_tensor(self) -> ImageTensor {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0.0)
    }
}

impl Deref for NoiseDraw {
    type Target = ImageTensor;

    fn deref(&self) -> &ImageTensor {
        &self.0
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    table: &ScheduleTable,
) -> Result<ImageTensor> {
    table.check_step(t)?;
    x0.ensure_same_shape(eps, "forward_sample")?;
    let ab = table.alpha_bar(t);
    Ok(x0.combine(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Inverts [`forward_sample`] given the noise that produced `x_t`.
pub fn recover_x0(
    x_t: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    table: &ScheduleTable,
) -> Result<ImageTensor> {
    table.check_step(t)?;
    x_t.ensure_same_shape(eps, "recover_x0")?;
    let ab = table.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(x_t.combine(inv, eps, -(1.0 - ab).sqrt() * inv))
}

/// Mean of q(x_{t-1} | x_t, x0).
pub fn posterior_mean_from_x0(
    x_t: &ImageTensor,
    x0: &ImageTensor,
    t: usize,
    table: &ScheduleTable,
) -> Result<ImageTensor> {
    table.check_step(t)?;
    x_t.ensure_same_shape(x0, "posterior_mean_from_x0")?;
    let ab = table.alpha_bar(t);
    let ab_prev = table.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * table.beta(t) / (1.0 - ab);
    let ct = table.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(x0.combine(c0, x_t, ct))
}

/// Posterior mean expressed through a noise estimate.
pub fn posterior_mean_from_eps(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    table: &ScheduleTable,
) -> Result<ImageTensor> {
    table.check_step(t)?;
    x_t.ensure_same_shape(eps_hat, "posterior_mean_from_eps")?;
    let inv = 1.0 / table.alpha(t).sqrt();
    let ce = table.beta(t) / (1.0 - table.alpha_bar(t)).sqrt();
    Ok(x_t.combine(inv, eps_hat, -ce * inv))
}

/// Sum of squared residuals between the drawn and the predicted noise.
pub fn simple_mse_objective(eps: &ImageTensor, eps_hat: &ImageTensor) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "simple_mse_objective")?;
    Ok(eps
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schedule::{build_schedule, ScheduleConfig};

    fn table() -> ScheduleTable {
        build_schedule(&ScheduleConfig::default()).unwrap()
    }

    fn random(shape: Shape, seed: u64) -> ImageTensor {
        NoiseDraw::sample(shape, &mut seeded(seed)).0
    }

    fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    const S: Shape = Shape {
        channels: 3,
        height: 4,
        width: 5,
    };

    #[test]
    fn forward_with_zero_noise_or_zero_signal() {
        let tb = table();
        let x0 = random(S, 1);
        let eps = random(S, 2);
        let zero = ImageTensor::zeros(S);
        for t in [1, 17, 600] {
            let ab = tb.alpha_bar(t);
            let a = forward_sample(&x0, t, &zero, &tb).unwrap();
            assert!(max_abs_diff(&a, &x0.map(|v| v * ab.sqrt())) == 0.0);
            let b = forward_sample(&zero, t, &eps, &tb).unwrap();
            assert!(max_abs_diff(&b, &eps.map(|v| v * (1.0 - ab).sqrt())) == 0.0);
        }
    }

    #[test]
    fn forward_at_last_step_is_almost_pure_noise() {
        let tb = table();
        // Oracle: direct product of (1 - beta) from the closed-form betas.
        let mut abar = 1.0;
        for i in 0..600 {
            abar *= 1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 599.0);
        }
        let x0 = random(S, 3);
        let eps = random(S, 4);
        let xt = forward_sample(&x0, 600, &eps, &tb).unwrap();
        for ((&o, &x), &e) in xt.data().iter().zip(x0.data()).zip(eps.data()) {
            let expect = abar.sqrt() * x + (1.0 - abar).sqrt() * e;
            assert!((o - expect).abs() < 1e-12);
            assert!((o - e).abs() <= 0.05 * x.abs() + 0.002 * e.abs());
        }
    }

    #[test]
    fn recover_inverts_forward() {
        let tb = table();
        let x0 = random(S, 5);
        let eps = random(S, 6);
        for t in [1, 2, 300, 600] {
            let xt = forward_sample(&x0, t, &eps, &tb).unwrap();
            let back = recover_x0(&xt, &eps, t, &tb).unwrap();
            assert!(max_abs_diff(&back, &x0) < 1e-6, "t={t}");
        }
        let zero = ImageTensor::zeros(S);
        let back = recover_x0(&x0, &zero, 10, &tb).unwrap();
        let expect = x0.map(|v| v / tb.alpha_bar(10).sqrt());
        assert!(max_abs_diff(&back, &expect) < 1e-15);
    }

    #[test]
    fn posterior_at_first_step_is_x0() {
        let tb = table();
        let x0 = random(S, 7);
        let xt = random(S, 8);
        let mu = posterior_mean_from_x0(&xt, &x0, 1, &tb).unwrap();
        assert!(max_abs_diff(&mu, &x0) < 1e-12);
        let zero = ImageTensor::zeros(S);
        let mu0 = posterior_mean_from_x0(&zero, &zero, 33, &tb).unwrap();
        assert!(mu0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_routes_agree() {
        let tb = table();
        let mut rng = seeded(11);
        for k in 0..200u64 {
            let t = 1 + (crate::rng::mix64(k) % 600) as usize;
            let x0 = NoiseDraw::sample(S, &mut rng);
            let eps = NoiseDraw::sample(S, &mut rng);
            let xt = forward_sample(&x0, t, &eps, &tb).unwrap();
            let a = posterior_mean_from_x0(&xt, &x0, t, &tb).unwrap();
            let b = posterior_mean_from_eps(&xt, &eps, t, &tb).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn posterior_from_eps_special_cases() {
        let tb = table();
        let xt = random(S, 12);
        let zero = ImageTensor::zeros(S);
        let mu = posterior_mean_from_eps(&xt, &zero, 250, &tb).unwrap();
        let expect = xt.map(|v| v / tb.alpha(250).sqrt());
        assert!(max_abs_diff(&mu, &expect) < 1e-15);

        let x0 = random(S, 13);
        let eps = random(S, 14);
        let x1 = forward_sample(&x0, 1, &eps, &tb).unwrap();
        let mu1 = posterior_mean_from_eps(&x1, &eps, 1, &tb).unwrap();
        assert!(max_abs_diff(&mu1, &x0) < 1e-5);
    }

    #[test]
    fn mse_objective() {
        let eps = random(S, 15);
        assert_eq!(simple_mse_objective(&eps, &eps).unwrap(), 0.0);
        let ones = ImageTensor::filled(S, 1.0);
        let zero = ImageTensor::zeros(S);
        assert_eq!(simple_mse_objective(&ones, &zero).unwrap(), S.len() as f64);

        let other = random(S, 16);
        let got = simple_mse_objective(&eps, &other).unwrap();
        let diffs: Vec<f64> = eps
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        let mut oracle = 0.0;
        for d in diffs.iter().rev() {
            oracle += d * d;
        }
        assert!(((got - oracle) / oracle).abs() < 1e-9);
    }

    #[test]
    fn shape_and_step_errors() {
        let tb = table();
        let a = ImageTensor::zeros(S);
        let b = ImageTensor::zeros(Shape::new(1, 4, 5));
        assert!(forward_sample(&a, 1, &b, &tb).is_err());
        assert!(forward_sample(&a, 0, &a, &tb).is_err());
        assert!(forward_sample(&a, 601, &a, &tb).is_err());
        assert!(simple_mse_objective(&a, &b).is_err());
        assert!(ImageTensor::new(S, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(S, vec![f64::NAN; S.len()]).is_err());
    }

    #[test]
    fn forward_is_linear() {
        let tb = table();
        let (x1, x2, e1, e2) = (random(S, 20), random(S, 21), random(S, 22), random(S, 23));
        let t = 123;
        let lhs = forward_sample(&x1.combine(2.0, &x2, -0.5), t, &e1.combine(2.0, &e2, -0.5), &tb)
            .unwrap();
        let rhs = forward_sample(&x1, t, &e1, &tb)
            .unwrap()
            .combine(2.0, &forward_sample(&x2, t, &e2, &tb).unwrap(), -0.5);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn forward_marginal_statistics() {
        let tb = table();
        let shape = Shape::new(1, 2, 2);
        let x0 = ImageTensor::new(shape, vec![1.5, -0.7, 0.0, 2.0]).unwrap();
        let draws = 20_000;
        let mut rng = seeded(99);
        for t in [1, 300, 600] {
            let ab = tb.alpha_bar(t);
            let mut sum = [0.0; 4];
            let mut sq = [0.0; 4];
            for _ in 0..draws {
                let eps = NoiseDraw::sample(shape, &mut rng);
                let xt = forward_sample(&x0, t, &eps, &tb).unwrap();
                for (i, v) in xt.data().iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            let var_true = 1.0 - ab;
            for i in 0..4 {
                let mean = sum[i] / draws as f64;
                let var = sq[i] / draws as f64 - mean * mean;
                let se_mean = (var_true / draws as f64).sqrt();
                let se_var = var_true * (2.0 / (draws - 1) as f64).sqrt();
                assert!((mean - ab.sqrt() * x0.data()[i]).abs() < 4.0 * se_mean);
                assert!((var - var_true).abs() < 4.0 * se_var);
            }
        }
    }
}

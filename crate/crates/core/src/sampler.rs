//! Ancestral reverse sampling with mask fusion and ensemble uncertainty.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{layers::sigmoid, NoisePredictor, TreatmentDayPair, MASK_SESSIONS};
use crate::diffusion::{posterior_mean_from_eps, ImageTensor, NoiseDraw, Shape};
use crate::error::{Error, Result};
use crate::rng::{child_seed, seeded};
use crate::schedule::{mask_fusion_gamma, ScheduleTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(rename = "T_m")]
    pub fusion_steps: usize,
    pub ensembles: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fusion_steps: 10,
            ensembles: 5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, table: &ScheduleTable) -> Result<()> {
        if self.fusion_steps == 0 || self.fusion_steps > table.steps() {
            return Err(Error::config(
                "sampler.T_m",
                format!("must lie in 1..={}", table.steps()),
            ));
        }
        if self.ensembles == 0 {
            return Err(Error::config("sampler.ensembles", "must be at least 1"));
        }
        Ok(())
    }
}

/// One reverse trajectory: the generated future image and the fused masks
/// for `s1, s2, s3, f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub generated: ImageTensor,
    pub masks: ImageTensor,
    pub steps: usize,
    pub seed: u64,
}

/// Per-pixel ensemble mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub image_mean: ImageTensor,
    pub image_std: ImageTensor,
    pub mask_mean: ImageTensor,
    pub mask_std: ImageTensor,
}

impl UncertaintyMaps {
    pub fn from_samples(samples: &[SampleResult]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("ensemble needs at least one sample".into()))?;
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.generated).collect();
        let masks: Vec<&ImageTensor> = samples.iter().map(|s| &s.masks).collect();
        for s in samples {
            s.generated.ensure_same_shape(&first.generated, "ensemble image")?;
            s.masks.ensure_same_shape(&first.masks, "ensemble mask")?;
        }
        let (image_mean, image_std) = mean_std(&images)?;
        let (mask_mean, mask_std) = mean_std(&masks)?;
        Ok(Self {
            image_mean,
            image_std,
            mask_mean,
            mask_std,
        })
    }
}

fn mean_std(xs: &[&ImageTensor]) -> Result<(ImageTensor, ImageTensor)> {
    let shape = xs[0].shape();
    let k = xs.len() as f64;
    let mut mean = vec![0.0; shape.len()];
    for x in xs {
        mean.iter_mut().zip(x.data()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0; shape.len()];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / k).sqrt()).collect();
    Ok((ImageTensor::new(shape, mean)?, ImageTensor::new(shape, std)?))
}

/// `x_{t-1} = mu(x_t, eps_hat) + sqrt(beta_tilde_t) z`; `z` must be zero at `t = 1`.
pub fn reverse_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    table: &ScheduleTable,
    z: &NoiseDraw,
) -> Result<ImageTensor> {
    let mut mu = posterior_mean_from_eps(x_t, eps_hat, t, table)?;
    mu.ensure_same_shape(z, "reverse_step noise")?;
    if t == 1 {
        if !z.is_zero() {
            return Err(Error::Contract("noise must be zero at the final step t = 1".into()));
        }
        return Ok(mu);
    }
    let sd = table.beta_tilde(t).sqrt();
    mu.data_mut().iter_mut().zip(z.data()).for_each(|(m, z)| *m += sd * z);
    Ok(mu)
}

fn check_inputs<P: NoisePredictor + ?Sized>(sources: &[ImageTensor; 3], denoiser: &P) -> Result<Shape> {
    let shape = sources[0].shape();
    for s in &sources[1..] {
        s.ensure_same_shape(&sources[0], "source images")?;
    }
    if shape.channels != denoiser.channels() {
        return Err(Error::Argument(format!(
            "sources have {} channels, denoiser expects {}",
            shape.channels,
            denoiser.channels()
        )));
    }
    Ok(shape)
}

/// Runs the full reverse chain `t = T..1` from the seed in `cfg`.
pub fn sample<P: NoisePredictor + ?Sized>(
    sources: &[ImageTensor; 3],
    pairs: &[TreatmentDayPair; 4],
    denoiser: &P,
    cfg: &SamplerConfig,
    table: &ScheduleTable,
) -> Result<SampleResult> {
    cfg.validate(table)?;
    let shape = check_inputs(sources, denoiser)?;
    let mask_shape = Shape::new(MASK_SESSIONS, shape.height, shape.width);
    let gamma = mask_fusion_gamma(table, cfg.fusion_steps)?;
    let squash = denoiser.masks_are_logits();
    let mut rng = seeded(cfg.seed);
    let mut x = NoiseDraw::sample(shape, &mut rng).into_tensor();
    let mut masks = ImageTensor::zeros(mask_shape);
    for t in (1..=table.steps()).rev() {
        let out = denoiser.predict(sources, &x, pairs, t)?;
        out.mask_logits.ensure_same_shape(&masks, "denoiser mask output")?;
        if t <= cfg.fusion_steps {
            let w = table.alpha_bar(t) / gamma;
            for (m, &v) in masks.data_mut().iter_mut().zip(out.mask_logits.data()) {
                *m += w * if squash { sigmoid(v) } else { v };
            }
        }
        let z = if t > 1 {
            NoiseDraw::sample(shape, &mut rng)
        } else {
            NoiseDraw::zeros(shape)
        };
        x = reverse_step(&x, &out.eps_hat, t, table, &z)?;
    }
    Ok(SampleResult {
        generated: x,
        masks,
        steps: table.steps(),
        seed: cfg.seed,
    })
}

/// Runs `cfg.ensembles` independent chains in parallel; member `k` uses the
/// child seed `k` of `cfg.seed`. Results come back in member order.
pub fn run_ensemble<P: NoisePredictor + ?Sized>(
    sources: &[ImageTensor; 3],
    pairs: &[TreatmentDayPair; 4],
    denoiser: &P,
    cfg: &SamplerConfig,
    table: &ScheduleTable,
) -> Result<Vec<SampleResult>> {
    cfg.validate(table)?;
    (0..cfg.ensembles)
        .into_par_iter()
        .map(|k| {
            let member = SamplerConfig {
                seed: child_seed(cfg.seed, k as u64),
                ..cfg.clone()
            };
            sample(sources, pairs, denoiser, &member, table)
        })
        .collect()
}

/// Ensemble mean and spread of [`run_ensemble`].
pub fn ensemble<P: NoisePredictor + ?Sized>(
    sources: &[ImageTensor; 3],
    pairs: &[TreatmentDayPair; 4],
    denoiser: &P,
    cfg: &SamplerConfig,
    table: &ScheduleTable,
) -> Result<UncertaintyMaps> {
    UncertaintyMaps::from_samples(&run_ensemble(sources, pairs, denoiser, cfg, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserOutput, Treatment};
    use crate::rng::normal_vec;
    use crate::schedule::{build_schedule, ScheduleConfig};

    fn table() -> ScheduleTable {
        build_schedule(&ScheduleConfig::default()).unwrap()
    }

    fn random(shape: Shape, seed: u64) -> ImageTensor {
        ImageTensor::new(shape, normal_vec(&mut seeded(seed), shape.len())).unwrap()
    }

    fn pairs() -> [TreatmentDayPair; 4] {
        [0, 10, 20, 40].map(|d| TreatmentDayPair::new(Treatment::Crt, d))
    }

    /// Returns fixed outputs regardless of input.
    struct Constant {
        eps: f64,
        mask: f64,
        logits: bool,
    }

    impl NoisePredictor for Constant {
        fn channels(&self) -> usize {
            2
        }

        fn predict(
            &self,
            _: &[ImageTensor; 3],
            x_t: &ImageTensor,
            _: &[TreatmentDayPair; 4],
            _: usize,
        ) -> Result<DenoiserOutput> {
            let s = x_t.shape();
            Ok(DenoiserOutput {
                eps_hat: ImageTensor::filled(s, self.eps),
                mask_logits: ImageTensor::filled(Shape::new(4, s.height, s.width), self.mask),
            })
        }

        fn masks_are_logits(&self) -> bool {
            self.logits
        }
    }

    /// Optimal noise predictor for data x0 ~ N(mu, I).
    struct GaussianOracle {
        mu: Vec<f64>,
        table: ScheduleTable,
    }

    impl NoisePredictor for GaussianOracle {
        fn channels(&self) -> usize {
            1
        }

        fn predict(
            &self,
            _: &[ImageTensor; 3],
            x_t: &ImageTensor,
            _: &[TreatmentDayPair; 4],
            t: usize,
        ) -> Result<DenoiserOutput> {
            let ab = self.table.alpha_bar(t);
            let eps: Vec<f64> = x_t
                .data()
                .iter()
                .zip(&self.mu)
                .map(|(x, m)| (1.0 - ab).sqrt() * (x - ab.sqrt() * m))
                .collect();
            let s = x_t.shape();
            Ok(DenoiserOutput {
                eps_hat: ImageTensor::new(s, eps)?,
                mask_logits: ImageTensor::zeros(Shape::new(4, s.height, s.width)),
            })
        }
    }

    #[test]
    fn reverse_step_matches_hand_computation() {
        let tb = table();
        let s = Shape::new(2, 3, 3);
        for (i, t) in [2usize, 57, 300, 600].into_iter().enumerate() {
            let x = random(s, i as u64);
            let e = random(s, 10 + i as u64);
            let z = NoiseDraw::from_tensor(random(s, 20 + i as u64));
            let out = reverse_step(&x, &e, t, &tb, &z).unwrap();
            // Oracle coefficients from the closed-form betas.
            let beta = |k: usize| 1e-4 + (k - 1) as f64 * (0.02 - 1e-4) / 599.0;
            let abar = |k: usize| (1..=k).map(|j| 1.0 - beta(j)).product::<f64>();
            let (b, ab, abp) = (beta(t), abar(t), abar(t - 1));
            let var = (1.0 - abp) / (1.0 - ab) * b;
            for j in 0..s.len() {
                let want = (x.data()[j] - b / (1.0 - ab).sqrt() * e.data()[j]) / (1.0 - b).sqrt()
                    + var.sqrt() * z.data()[j];
                assert!((out.data()[j] - want).abs() < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn final_step_is_the_posterior_mean() {
        let tb = table();
        let s = Shape::new(1, 4, 4);
        let x = random(s, 1);
        let e = random(s, 2);
        let out = reverse_step(&x, &e, 1, &tb, &NoiseDraw::zeros(s)).unwrap();
        assert_eq!(out, posterior_mean_from_eps(&x, &e, 1, &tb).unwrap());
        let z = NoiseDraw::from_tensor(random(s, 3));
        let err = reverse_step(&x, &e, 1, &tb, &z).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let out = reverse_step(&x, &e, 80, &tb, &NoiseDraw::zeros(s)).unwrap();
        assert_eq!(out, posterior_mean_from_eps(&x, &e, 80, &tb).unwrap());
    }

    #[test]
    fn constant_masks_fuse_to_the_constant() {
        let tb = table();
        let srcs = [0, 1, 2].map(|i| random(Shape::new(2, 4, 4), i));
        let d = Constant { eps: 0.0, mask: 1.0, logits: false };
        let cfg = SamplerConfig { ensembles: 1, ..Default::default() };
        let r = sample(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert_eq!(r.masks.shape(), Shape::new(4, 4, 4));
        assert!(r.masks.data().iter().all(|&m| (m - 1.0).abs() < 1e-12));
        // Logit outputs are squashed: logit 0 fuses to one half.
        let d = Constant { eps: 0.0, mask: 0.0, logits: true };
        let r = sample(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert!(r.masks.data().iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn sampling_is_deterministic() {
        let tb = table();
        let srcs = [0, 1, 2].map(|i| random(Shape::new(2, 4, 4), i));
        let d = Constant { eps: 0.3, mask: -1.0, logits: true };
        let cfg = SamplerConfig { seed: 9, ..Default::default() };
        let a = sample(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        let b = sample(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert_eq!(a, b);
        let other = SamplerConfig { seed: 10, ..cfg.clone() };
        assert_ne!(a, sample(&srcs, &pairs(), &d, &other, &tb).unwrap());
        let e1 = ensemble(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert_eq!(e1, ensemble(&srcs, &pairs(), &d, &cfg, &tb).unwrap());
    }

    #[test]
    fn ensemble_matches_serial_members() {
        let tb = table();
        let srcs = [0, 1, 2].map(|i| random(Shape::new(2, 4, 4), i));
        let d = Constant { eps: 0.1, mask: 0.5, logits: true };
        let cfg = SamplerConfig { ensembles: 3, seed: 4, ..Default::default() };
        let serial: Vec<SampleResult> = (0..3)
            .map(|k| {
                let c = SamplerConfig { seed: child_seed(4, k), ..cfg.clone() };
                sample(&srcs, &pairs(), &d, &c, &tb).unwrap()
            })
            .collect();
        let par = ensemble(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert_eq!(par, UncertaintyMaps::from_samples(&serial).unwrap());
        assert!(par.image_std.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn single_member_has_zero_spread() {
        let tb = table();
        let srcs = [0, 1, 2].map(|i| random(Shape::new(2, 4, 4), i));
        let d = Constant { eps: 0.1, mask: 0.5, logits: true };
        let cfg = SamplerConfig { ensembles: 1, ..Default::default() };
        let u = ensemble(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
        assert!(u.image_std.data().iter().all(|&v| v == 0.0));
        assert!(u.mask_std.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_population_std() {
        let s = Shape::new(1, 2, 2);
        let m = Shape::new(4, 2, 2);
        let mk = |a: f64| SampleResult {
            generated: ImageTensor::filled(s, a),
            masks: ImageTensor::filled(m, a / 10.0),
            steps: 600,
            seed: 0,
        };
        let u = UncertaintyMaps::from_samples(&[mk(1.0), mk(4.0)]).unwrap();
        assert!(u.image_std.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(u.image_mean.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(u.mask_std.data().iter().all(|&v| (v - 0.15).abs() < 1e-15));
        assert!(UncertaintyMaps::from_samples(&[]).is_err());
    }

    #[test]
    fn gaussian_oracle_recovers_the_data_mean() {
        let tb = table();
        let s = Shape::new(1, 2, 2);
        let mu = vec![1.5, -0.5, 0.0, 3.0];
        let d = GaussianOracle { mu: mu.clone(), table: tb.clone() };
        let srcs = [0, 1, 2].map(|_| ImageTensor::zeros(s));
        let runs = 300;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for k in 0..runs {
            let cfg = SamplerConfig { seed: child_seed(77, k), ensembles: 1, ..Default::default() };
            let r = sample(&srcs, &pairs(), &d, &cfg, &tb).unwrap();
            for (j, v) in r.generated.data().iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let n = runs as f64;
        for j in 0..4 {
            let mean = sum[j] / n;
            let var = sq[j] / n - mean * mean;
            // Five standard errors of the mean for unit variance.
            assert!((mean - mu[j]).abs() < 5.0 / n.sqrt(), "pixel {j}: {mean}");
            assert!((var - 1.0).abs() < 0.3, "pixel {j}: {var}");
        }
    }

    #[test]
    fn input_errors() {
        let tb = table();
        let d = Constant { eps: 0.0, mask: 0.0, logits: true };
        let cfg = SamplerConfig::default();
        let bad = [
            ImageTensor::zeros(Shape::new(2, 4, 4)),
            ImageTensor::zeros(Shape::new(2, 4, 4)),
            ImageTensor::zeros(Shape::new(2, 2, 2)),
        ];
        assert!(matches!(sample(&bad, &pairs(), &d, &cfg, &tb), Err(Error::Argument(_))));
        let wrong_c = [0, 1, 2].map(|_| ImageTensor::zeros(Shape::new(3, 4, 4)));
        assert!(matches!(sample(&wrong_c, &pairs(), &d, &cfg, &tb), Err(Error::Argument(_))));
        let cfg = SamplerConfig { fusion_steps: 601, ..Default::default() };
        assert!(matches!(sample(&wrong_c, &pairs(), &d, &cfg, &tb), Err(Error::Config { .. })));
        let cfg = SamplerConfig { ensembles: 0, ..Default::default() };
        assert!(cfg.validate(&tb).is_err());
    }
}

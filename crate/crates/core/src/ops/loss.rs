use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower bound applied to the per-image MSE so the loss stays finite.
pub const MSE_FLOOR: f64 = 1e-12;

/// Per-image mean squared error over all channels and pixels.
pub fn per_image_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    ensure!(
        pred.shape() == target.shape(),
        "psnr_loss",
        "prediction {:?} and target {:?} differ",
        pred.shape(),
        target.shape()
    );
    let [n, ..] = pred.dims4("psnr_loss")?;
    let per = pred.len() / n.max(1);
    Ok(pred
        .data()
        .chunks(per.max(1))
        .zip(target.data().chunks(per.max(1)))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum::<f64>()
                / per as f64
        })
        .collect())
}

impl<T: Real> Tape<T> {
    /// Negative batch-mean PSNR (peak 1), each image's MSE floored at [`MSE_FLOOR`].
    pub fn psnr_loss(&self, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let mses = per_image_mse(pred.value(), target.value())?;
        let n = mses.len();
        let loss = mses
            .iter()
            .map(|&m| 10.0 * m.max(MSE_FLOOR).log10())
            .sum::<f64>()
            / n as f64;
        let (pv, tv) = (pred.arc(), target.arc());
        self.record(
            "psnr_loss",
            Tensor::scalar(T::of(loss)),
            &[pred, target],
            move |g, needs| {
                let per = pv.len() / n;
                let scale: Vec<f64> = mses
                    .iter()
                    .map(|&m| {
                        if m < MSE_FLOOR {
                            0.0
                        } else {
                            g.data()[0].as_f64() * 10.0 / (std::f64::consts::LN_10 * m) / n as f64
                                * 2.0
                                / per as f64
                        }
                    })
                    .collect();
                let diff: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .enumerate()
                    .map(|(i, (&p, &t))| T::of(scale[i / per]) * (p - t))
                    .collect();
                let gp =
                    needs[0].then(|| Tensor::from_vec(pv.shape(), diff.clone()).expect("shape"));
                let gt = needs[1].then(|| {
                    Tensor::from_vec(pv.shape(), diff.iter().map(|&v| -v).collect()).expect("shape")
                });
                vec![gp, gt]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(p: Tensor<f64>, t: Tensor<f64>) -> f64 {
        let tape = Tape::no_grad();
        tape.psnr_loss(&tape.constant(p), &tape.constant(t))
            .unwrap()
            .value()
            .data()[0]
    }

    #[test]
    fn perfect_prediction_saturates() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 0.5);
        assert!((loss_of(x.clone(), x) + 120.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_error_closed_form() {
        let t = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        let p = t.map(|v| v + 0.1);
        assert!((loss_of(p, t) + 20.0).abs() < 1e-9);
    }

    #[test]
    fn random_pair_matches_mse_then_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Tensor::<f64>::rand_uniform(&[3, 3, 5, 5], 0.0, 1.0, &mut rng);
        let t = Tensor::<f64>::rand_uniform(&[3, 3, 5, 5], 0.0, 1.0, &mut rng);
        let mut want = 0.0;
        for i in 0..3 {
            let mut se = 0.0;
            for j in 0..75 {
                se += (p.data()[i * 75 + j] - t.data()[i * 75 + j]).powi(2);
            }
            want += -10.0 * (1.0 / (se / 75.0)).log10();
        }
        want /= 3.0;
        assert!((loss_of(p, t) - want).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::<f32>::no_grad();
        let a = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(tape.psnr_loss(&a, &b).is_err());
    }
}

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{hinge, to_f64_vec};

fn ensure_finite(name: &str, t: &Tensor) -> Result<()> {
    if to_f64_vec(t)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {name} logits")));
    }
    Ok(())
}

/// Discriminator hinge loss. Real logits are pushed below -1 and fake
/// logits (combined with the layout head) above +1:
///
/// `mean(max(0, 1 + D_adv(Y))) + mean(max(0, 1 - D_adv(Y_hat) - lambda * D_obj(Y_hat, L)))`
///
/// With `obj_real`, the real term becomes
/// `max(0, 1 + D_adv(Y) + lambda * D_obj(Y, L))`.
pub fn d_loss(
    adv_real: &Tensor,
    adv_fake: &Tensor,
    obj_fake: &Tensor,
    lambda_obj: f64,
    obj_real: Option<&Tensor>,
) -> Result<Tensor> {
    ensure_finite("D_adv(real)", adv_real)?;
    ensure_finite("D_adv(fake)", adv_fake)?;
    ensure_finite("D_obj(fake)", obj_fake)?;
    let real_logit = match obj_real {
        Some(o) => {
            ensure_finite("D_obj(real)", o)?;
            (adv_real + o.affine(lambda_obj, 0.0)?)?
        }
        None => adv_real.clone(),
    };
    let real = hinge(&real_logit.affine(1.0, 1.0)?)?.mean_all()?;
    let fake_logit = (adv_fake + obj_fake.affine(lambda_obj, 0.0)?)?;
    let fake = hinge(&fake_logit.affine(-1.0, 1.0)?)?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator loss `mean(D_adv(Y_hat) + lambda * D_obj(Y_hat, L))`, minimised.
pub fn g_loss(adv_fake: &Tensor, obj_fake: &Tensor, lambda_obj: f64) -> Result<Tensor> {
    ensure_finite("D_adv(fake)", adv_fake)?;
    ensure_finite("D_obj(fake)", obj_fake)?;
    Ok((adv_fake + obj_fake.affine(lambda_obj, 0.0)?)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn printed_examples() {
        assert_eq!(s(d_loss(&t(&[-2.0]), &t(&[0.5]), &t(&[50.0]), 0.01, None).unwrap()), 0.0);
        assert_eq!(s(d_loss(&t(&[0.0]), &t(&[5.0]), &t(&[0.0]), 0.01, None).unwrap()), 1.0);
        assert_eq!(s(g_loss(&t(&[-3.0, -3.0]), &t(&[0.0, 0.0]), 0.01).unwrap()), -3.0);
        assert_eq!(s(g_loss(&t(&[0.0]), &t(&[123.0]), 0.0).unwrap()), 0.0);
    }

    #[test]
    fn zero_lambda_is_plain_hinge() {
        let (r, f) = ([0.3, -1.5, 2.0], [-0.2, 0.7, 3.0]);
        let got = s(d_loss(&t(&r), &t(&f), &t(&[9.0, -9.0, 4.0]), 0.0, None).unwrap());
        let want = r.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / 3.0
            + f.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / 3.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn real_object_term() {
        let got = s(d_loss(&t(&[-1.5]), &t(&[2.0]), &t(&[0.0]), 0.5, Some(&t(&[2.0]))).unwrap());
        assert_eq!(got, 0.5);
    }

    #[test]
    fn non_finite_logits() {
        let r = d_loss(&t(&[f64::NAN]), &t(&[0.0]), &t(&[0.0]), 0.01, None);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(matches!(g_loss(&t(&[0.0]), &t(&[f64::INFINITY]), 0.01), Err(Error::Numeric(_))));
    }

    #[test]
    fn opposite_directions_on_fake_logits() {
        let adv = Var::new(&[0.2f64, -0.4], &Device::Cpu).unwrap();
        let obj = Var::new(&[1.0f64, 3.0], &Device::Cpu).unwrap();
        let real = t(&[-0.5, 0.1]);
        let dg = d_loss(&real, adv.as_tensor(), obj.as_tensor(), 0.01, None).unwrap().backward().unwrap();
        let gg = g_loss(adv.as_tensor(), obj.as_tensor(), 0.01).unwrap().backward().unwrap();
        for v in [&adv, &obj] {
            let a = to_f64_vec(dg.get(v.as_tensor()).unwrap()).unwrap();
            let b = to_f64_vec(gg.get(v.as_tensor()).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x * y < 0.0, "{x} vs {y}");
            }
        }
    }
}

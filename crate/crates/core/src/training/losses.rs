//! Least-squares adversarial losses and the discriminator-feature distance.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::DiscriminatorResponse;

/// Weight `2^(-2l)` of hidden layer `l` (1-based) in the feature distance.
pub fn layer_weight(l: usize) -> f64 {
    0.25f64.powi(l as i32)
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(format!("{name} score batch")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{name} scores")));
    }
    Ok(())
}

fn mean_sq(scores: &[f64], target: f64) -> f64 {
    scores.iter().map(|s| (s - target) * (s - target)).sum::<f64>() / scores.len() as f64
}

/// `mean((D(x_real) - 1)²) + mean(D(x_fake)²)`.
pub fn loss_discriminator(real: &[f64], fake: &[f64]) -> Result<f64> {
    check_scores("real", real)?;
    check_scores("fake", fake)?;
    Ok(mean_sq(real, 1.0) + mean_sq(fake, 0.0))
}

/// `mean((D(x_fake) - 1)²)`.
pub fn loss_generator(fake: &[f64]) -> Result<f64> {
    check_scores("fake", fake)?;
    Ok(mean_sq(fake, 1.0))
}

/// `Σ_l 2^(-2l) · mean|D_l(a) - D_l(b)|` over all hidden layers.
pub fn lap1_distance(a: &DiscriminatorResponse, b: &DiscriminatorResponse) -> Result<f64> {
    if a.layer_activations.len() != b.layer_activations.len() {
        return Err(Error::Shape(format!(
            "responses have {} and {} layers",
            a.layer_activations.len(),
            b.layer_activations.len()
        )));
    }
    let mut total = 0.0;
    for (l, (x, y)) in a.layer_activations.iter().zip(&b.layer_activations).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "layer {} shapes {:?} vs {:?}",
                l + 1,
                x.shape(),
                y.shape()
            )));
        }
        let mad = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / x.len() as f64;
        total += layer_weight(l + 1) * mad;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("feature distance".into()));
    }
    Ok(total)
}

/// Graph form of [`loss_discriminator`] on `[N, 1]` score nodes.
pub fn discriminator_loss_graph(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let r = g.mean_squared_to(real, 1.0);
    let f = g.mean_squared_to(fake, 0.0);
    g.add(r, f)
}

pub fn generator_loss_graph(g: &mut Graph, fake: Var) -> Var {
    g.mean_squared_to(fake, 1.0)
}

/// Graph form of [`lap1_distance`] averaged over the batch. All samples
/// share a layer shape, so the batch mean of per-sample means is the mean
/// over the whole layer tensor.
pub fn lap1_graph(g: &mut Graph, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("feature distance needs matching nonempty layer lists".into()));
    }
    let mut total: Option<Var> = None;
    for (l, (&x, &y)) in a.iter().zip(b).enumerate() {
        let d = g.mean_abs_diff(x, y)?;
        let d = g.scale(d, layer_weight(l + 1));
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn resp(layers: Vec<Vec<f64>>) -> DiscriminatorResponse {
        DiscriminatorResponse {
            score: 0.0,
            layer_activations: layers
                .into_iter()
                .map(|v| Tensor::from_vec(&[1, 1, 1, v.len()], v).unwrap())
                .collect(),
        }
    }

    #[test]
    fn discriminator_loss_examples() {
        assert_eq!(loss_discriminator(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_discriminator(&[0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(loss_discriminator(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(matches!(
            loss_discriminator(&[f64::NAN], &[0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(loss_discriminator(&[], &[0.0]).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        assert_eq!(loss_generator(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(loss_generator(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(loss_generator(&[0.25, 0.75]).unwrap(), 0.3125);
        assert!(loss_generator(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn lap1_examples() {
        let a = resp(vec![vec![1.0, -2.0], vec![0.5; 3]]);
        assert_eq!(lap1_distance(&a, &a).unwrap(), 0.0);
        let b = resp(vec![vec![2.0, -1.0], vec![1.5; 3]]);
        assert_eq!(lap1_distance(&a, &b).unwrap(), 0.3125);
        let c = resp(vec![vec![0.0; 2]]);
        assert!(matches!(lap1_distance(&a, &c), Err(Error::Shape(_))));
        let d = resp(vec![vec![0.0; 2], vec![0.0; 4]]);
        assert!(matches!(lap1_distance(&a, &d), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::from_vec(&[3, 1], vec![0.2, 0.9, 1.4]).unwrap());
        let fake = g.constant(Tensor::from_vec(&[2, 1], vec![-0.3, 0.6]).unwrap());
        let ld = discriminator_loss_graph(&mut g, real, fake).unwrap();
        let lg = generator_loss_graph(&mut g, fake);
        assert_eq!(
            g.value(ld).item(),
            loss_discriminator(&[0.2, 0.9, 1.4], &[-0.3, 0.6]).unwrap()
        );
        assert_eq!(g.value(lg).item(), loss_generator(&[-0.3, 0.6]).unwrap());
    }
}

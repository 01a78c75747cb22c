use rand::Rng;

use crate::sparse_tensor::SparseTensor2D;

/// Kept positions of one dropout application, as dense `[B][C][H][W]`
/// indices of the input, and the scale applied to them.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub kept: Vec<usize>,
    pub scale: f64,
}

/// Drops each scalar with probability `p` and scales survivors by
/// `1/(1−p)`. The mask covers every position, zeros included, so the
/// gradient still reaches silent features through the kept ones. Outside
/// training, or with `p = 0`, returns `x` unchanged. Call once per
/// timestep so every step draws a fresh mask.
pub fn dropout_per_timestep<R: Rng + ?Sized>(
    x: &SparseTensor2D,
    p: f64,
    rng: &mut R,
    training: bool,
) -> (SparseTensor2D, Option<DropoutMask>) {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if !training || p == 0.0 {
        return (x.clone(), None);
    }
    let scale = 1.0 / (1.0 - p);
    let kept: Vec<usize> = (0..x.shape().dense_len())
        .filter(|_| rng.random::<f64>() >= p)
        .collect();
    let mut keep = vec![false; x.shape().dense_len()];
    for &i in &kept {
        keep[i] = true;
    }
    let shape = x.shape();
    let entries = x.iter().map(|(site, values)| {
        let out = values
            .iter()
            .enumerate()
            .map(|(c, v)| if keep[shape.dense_index(site, c)] { v * scale } else { 0.0 })
            .collect();
        (site, out)
    });
    let out = SparseTensor2D::from_entries(shape, entries).expect("entries come from a valid tensor");
    (out, Some(DropoutMask { kept, scale }))
}

/// Dropout on a flat vector, same semantics as [`dropout_per_timestep`].
pub fn dropout_vector<R: Rng + ?Sized>(x: &[f64], p: f64, rng: &mut R, training: bool) -> Vec<f64> {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if !training || p == 0.0 {
        return x.to_vec();
    }
    let scale = 1.0 / (1.0 - p);
    x.iter()
        .map(|v| if rng.random::<f64>() >= p { v * scale } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_tensor::{Shape2D, Site};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spikes() -> SparseTensor2D {
        let shape = Shape2D::new(1, 2, 4, 4);
        let entries = (0..4).map(|i| (Site::new(0, i, i), vec![1.0, 1.0])).collect::<Vec<_>>();
        SparseTensor2D::from_entries(shape, entries).unwrap()
    }

    #[test]
    fn zero_probability_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = spikes();
        assert_eq!(dropout_per_timestep(&x, 0.0, &mut rng, true).0, x);
        assert_eq!(dropout_per_timestep(&x, 0.5, &mut rng, false).0, x);
        assert_eq!(dropout_vector(&[1.0, 2.0], 0.5, &mut rng, false), vec![1.0, 2.0]);
    }

    #[test]
    fn kept_fraction_is_near_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.0; 100_000];
        let y = dropout_vector(&x, 0.5, &mut rng, true);
        let kept = y.iter().filter(|v| **v != 0.0).count() as f64 / x.len() as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
        assert!(y.iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn mask_covers_zeros_and_matches_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = spikes();
        let (y, mask) = dropout_per_timestep(&x, 0.5, &mut rng, true);
        let mask = mask.unwrap();
        let (input, dense) = (x.densify(), y.densify());
        let survivors: Vec<usize> = (0..dense.len()).filter(|i| dense[*i] != 0.0).collect();
        let kept_nonzero: Vec<usize> = mask.kept.iter().copied().filter(|i| input[*i] != 0.0).collect();
        assert_eq!(kept_nonzero, survivors);
        assert!(mask.kept.iter().any(|i| input[*i] == 0.0));
        assert!(survivors.iter().all(|i| dense[*i] == 2.0));
    }

    #[test]
    fn masks_differ_between_timesteps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = spikes();
        let masks: Vec<_> = (0..5)
            .map(|_| dropout_per_timestep(&x, 0.5, &mut rng, true).1.unwrap().kept)
            .collect();
        assert!(masks.windows(2).any(|w| w[0] != w[1]));
    }
}

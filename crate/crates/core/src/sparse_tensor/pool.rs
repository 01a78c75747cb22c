use super::{Shape2D, Site, SparseTensor2D};

/// 2×2 max pooling with stride 2 over present entries only.
pub fn sparse_max_pool2d(input: &SparseTensor2D) -> SparseTensor2D {
    sparse_max_pool2d_with_argmax(input).0
}

/// Same as [`sparse_max_pool2d`], also returning for every output scalar the
/// dense `[B][C][H][W]` index of the input scalar that won the window, as
/// `(output_index, input_index)` pairs. Ties go to the first entry in
/// `(y, x)` order.
pub fn sparse_max_pool2d_with_argmax(input: &SparseTensor2D) -> (SparseTensor2D, Vec<(usize, usize)>) {
    let in_shape = input.shape();
    let out_shape = Shape2D::new(
        in_shape.batch,
        in_shape.channels,
        in_shape.height.div_ceil(2),
        in_shape.width.div_ceil(2),
    );
    let c = in_shape.channels;
    let mut members: Vec<(Site, usize)> = input
        .sites()
        .iter()
        .enumerate()
        .map(|(entry, site)| (Site::new(site.b, site.x / 2, site.y / 2), entry))
        .collect();
    members.sort_unstable();
    let mut merged: Vec<(Site, Vec<usize>)> = Vec::new();
    for (site, entry) in members {
        match merged.last_mut() {
            Some((last, list)) if *last == site => list.push(entry),
            _ => merged.push((site, vec![entry])),
        }
    }

    let mut out = SparseTensor2D::empty(out_shape);
    let mut argmax = Vec::new();
    let mut vector = vec![0.0; c];
    let mut winners = vec![0usize; c];
    for (site, members) in merged {
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            for &entry in &members {
                let v = input.entry_values(entry)[ch];
                if v > best {
                    best = v;
                    winners[ch] = entry;
                }
            }
            vector[ch] = best;
        }
        if vector.iter().any(|v| *v != 0.0) {
            for ch in 0..c {
                if vector[ch] != 0.0 {
                    argmax.push((
                        out_shape.dense_index(site, ch),
                        in_shape.dense_index(input.sites()[winners[ch]], ch),
                    ));
                }
            }
            out.push_sorted(site, &vector);
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_max() {
        let input = SparseTensor2D::from_entries(
            Shape2D::new(1, 1, 4, 4),
            vec![(Site::new(0, 0, 0), vec![1.0]), (Site::new(0, 1, 1), vec![3.0])],
        )
        .unwrap();
        let out = sparse_max_pool2d(&input);
        assert_eq!(out.sites(), &[Site::new(0, 0, 0)]);
        assert_eq!(out.get(Site::new(0, 0, 0)).unwrap(), &[3.0]);
    }

    #[test]
    fn empty_input() {
        let out = sparse_max_pool2d(&SparseTensor2D::empty(Shape2D::new(1, 2, 5, 5)));
        assert!(out.is_empty());
        assert_eq!(out.shape(), Shape2D::new(1, 2, 3, 3));
    }

    #[test]
    fn random_input_matches_dense_oracle_on_occupied_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let shape = Shape2D::new(2, 2, rng.random_range(1..9), rng.random_range(1..9));
            let dense: Vec<f64> = (0..shape.dense_len())
                .map(|_| {
                    if rng.random::<f64>() < 0.25 {
                        rng.random_range(0.1..2.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let input = SparseTensor2D::sparsify(&dense, shape).unwrap();
            let out = sparse_max_pool2d(&input).densify();
            let (ho, wo) = (shape.height.div_ceil(2), shape.width.div_ceil(2));
            for b in 0..shape.batch {
                for ch in 0..shape.channels {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = 0.0f64;
                            for y in 2 * oy..(2 * oy + 2).min(shape.height) {
                                for x in 2 * ox..(2 * ox + 2).min(shape.width) {
                                    best = best.max(
                                        dense[((b * shape.channels + ch) * shape.height + y)
                                            * shape.width
                                            + x],
                                    );
                                }
                            }
                            let got = out[((b * shape.channels + ch) * ho + oy) * wo + ox];
                            assert_eq!(got, best);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn argmax_points_to_winning_scalar() {
        let input = SparseTensor2D::from_entries(
            Shape2D::new(1, 1, 2, 2),
            vec![(Site::new(0, 1, 0), vec![1.0]), (Site::new(0, 0, 1), vec![1.0])],
        )
        .unwrap();
        let (_, argmax) = sparse_max_pool2d_with_argmax(&input);
        // Tie: first in (y, x) order is (x=1, y=0), dense index 1.
        assert_eq!(argmax, vec![(0, 1)]);
    }
}

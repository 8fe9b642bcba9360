use super::{Nucleus, MICRONS_PER_PIXEL};

pub const TOPOLOGY_LEN: usize = 3;
/// Matches the 100 px cell-graph edge threshold.
pub const DEFAULT_RADIUS_UM: f64 = 54.9;

/// Neighbor count, mean neighbor distance (µm) and density per 10⁴ µm².
///
/// Neighbors are the other nuclei of `all` (by id) whose centroid lies
/// strictly closer than `radius_um`. With no neighbors the mean distance is
/// reported as `radius_um`.
pub fn topology_features(target: &Nucleus, all: &[Nucleus], radius_um: f64) -> [f64; TOPOLOGY_LEN] {
    let mut count = 0usize;
    let mut total = 0.0;
    for other in all.iter().filter(|o| o.id != target.id) {
        let d = centroid_distance_um(target, other);
        if d < radius_um {
            count += 1;
            total += d;
        }
    }
    let mean = if count == 0 { radius_um } else { total / count as f64 };
    let disk = std::f64::consts::PI * radius_um * radius_um;
    [count as f64, mean, count as f64 / disk * 1e4]
}

pub fn centroid_distance_um(a: &Nucleus, b: &Nucleus) -> f64 {
    let dx = a.centroid[0] - b.centroid[0];
    let dy = a.centroid[1] - b.centroid[1];
    dx.hypot(dy) * MICRONS_PER_PIXEL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nucfeat::{GrayTile, NucleusClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(id: u32, x: f64, y: f64) -> Nucleus {
        Nucleus {
            id,
            centroid: [x, y],
            contour: vec![[x - 1.0, y - 1.0], [x + 1.0, y - 1.0], [x + 1.0, y + 1.0], [x - 1.0, y + 1.0]],
            class: NucleusClass::Tumor,
            tile: GrayTile {
                width: 2,
                height: 2,
                pixels: vec![0; 4],
            },
        }
    }

    #[test]
    fn isolated_nucleus() {
        let n = at(0, 10.0, 10.0);
        assert_eq!(topology_features(&n, std::slice::from_ref(&n), DEFAULT_RADIUS_UM), [
            0.0,
            DEFAULT_RADIUS_UM,
            0.0
        ]);
    }

    #[test]
    fn pair_twenty_microns_apart() {
        let px = 20.0 / MICRONS_PER_PIXEL;
        let all = [at(0, 100.0, 100.0), at(1, 100.0 + px, 100.0)];
        for n in &all {
            let f = topology_features(n, &all, DEFAULT_RADIUS_UM);
            assert_eq!(f[0], 1.0);
            assert!((f[1] - 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn counts_match_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let all: Vec<Nucleus> = (0..n)
                .map(|i| at(i, rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0)))
                .collect();
            for a in &all {
                let mut expect = 0;
                for b in &all {
                    if a.id != b.id {
                        let d2 = (a.centroid[0] - b.centroid[0]).powi(2) + (a.centroid[1] - b.centroid[1]).powi(2);
                        if d2.sqrt() * MICRONS_PER_PIXEL < DEFAULT_RADIUS_UM {
                            expect += 1;
                        }
                    }
                }
                assert_eq!(topology_features(a, &all, DEFAULT_RADIUS_UM)[0], expect as f64);
            }
        }
    }
}

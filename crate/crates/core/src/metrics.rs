//! Point-cloud geometry metrics: Chamfer distance, minimum matching
//! distance and coverage.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldBundle;
use crate::geom::Vec3;

pub type PointCloud = Vec<Vec3>;

/// Density threshold at which one voxel diagonal of material has opacity
/// `1 - exp(-0.5)`.
pub fn default_threshold(field: &FieldBundle) -> f64 {
    0.5 / field.voxel_diagonal()
}

/// Samples `n` node positions uniformly, with replacement, among nodes whose
/// activated density exceeds `tau`.
pub fn extract_points<R: Rng + ?Sized>(field: &FieldBundle, shift: f64, tau: f64, n: usize, rng: &mut R) -> Result<PointCloud> {
    let dims = field.dims();
    let occupied: Vec<usize> = field
        .activated(shift)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i)
        .collect();
    if occupied.is_empty() {
        return Err(Error::Data("empty shape".into()));
    }
    Ok((0..n)
        .map(|_| {
            let i = occupied[rng.gen_range(0..occupied.len())];
            field.node_position([i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]])
        })
        .collect())
}

fn nearest_mean(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (*p - *q).dot(*p - *q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Symmetric sum of mean squared nearest-neighbour distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer of an empty cloud"));
    }
    Ok(nearest_mean(a, b) + nearest_mean(b, a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdCov {
    pub mmd: f64,
    pub cov: f64,
}

/// Minimum matching distance over references and the fraction of
/// references that are the nearest match of some generated cloud.
pub fn mmd_cov(generated: &[PointCloud], reference: &[PointCloud]) -> Result<MmdCov> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("mmd/cov needs non-empty sets"));
    }
    let pairs: Vec<(usize, usize)> = (0..generated.len())
        .flat_map(|g| (0..reference.len()).map(move |r| (g, r)))
        .collect();
    let cd = pairs
        .par_iter()
        .map(|&(g, r)| chamfer(&generated[g], &reference[r]))
        .collect::<Result<Vec<f64>>>()?;
    let nr = reference.len();
    let at = |g: usize, r: usize| cd[g * nr + r];
    let mmd = (0..nr)
        .map(|r| (0..generated.len()).map(|g| at(g, r)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / nr as f64;
    let mut covered = vec![false; nr];
    for g in 0..generated.len() {
        let best = (0..nr).min_by(|&a, &b| at(g, a).total_cmp(&at(g, b))).unwrap_or(0);
        covered[best] = true;
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / nr as f64;
    Ok(MmdCov { mmd, cov })
}

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub set_name: String,
    pub scores: MmdCov,
    pub n_gen: usize,
    pub n_ref: usize,
}

/// CSV text with values scaled by 100.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("set_name,mmd_x100,cov_x100,n_gen,n_ref\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.set_name,
            100.0 * r.scores.mmd,
            100.0 * r.scores.cov,
            r.n_gen,
            r.n_ref
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::ZERO];
        let b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn mmd_cov_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen: Vec<_> = (0..4).map(|_| cloud(&mut rng, 8)).collect();
        let refs: Vec<_> = (0..4).map(|_| cloud(&mut rng, 8)).collect();
        let brute_cd = |a: &PointCloud, b: &PointCloud| {
            let mut s1 = 0.0;
            for p in a {
                let mut m = f64::MAX;
                for q in b {
                    let d = (p.x() - q.x()).powi(2) + (p.y() - q.y()).powi(2) + (p.z() - q.z()).powi(2);
                    if d < m {
                        m = d;
                    }
                }
                s1 += m;
            }
            let mut s2 = 0.0;
            for q in b {
                let mut m = f64::MAX;
                for p in a {
                    let d = (p.x() - q.x()).powi(2) + (p.y() - q.y()).powi(2) + (p.z() - q.z()).powi(2);
                    if d < m {
                        m = d;
                    }
                }
                s2 += m;
            }
            s1 / a.len() as f64 + s2 / b.len() as f64
        };
        let mut mmd = 0.0;
        for r in &refs {
            let mut m = f64::MAX;
            for g in &gen {
                m = m.min(brute_cd(g, r));
            }
            mmd += m;
        }
        mmd /= refs.len() as f64;
        let mut hit = std::collections::BTreeSet::new();
        for g in &gen {
            let mut best = (f64::MAX, 0);
            for (i, r) in refs.iter().enumerate() {
                let d = brute_cd(g, r);
                if d < best.0 {
                    best = (d, i);
                }
            }
            hit.insert(best.1);
        }
        let got = mmd_cov(&gen, &refs).unwrap();
        assert_eq!(got.mmd, mmd);
        assert_eq!(got.cov, hit.len() as f64 / refs.len() as f64);

        let same = mmd_cov(&refs, &refs).unwrap();
        assert_eq!((same.mmd, same.cov), (0.0, 1.0));
        assert_eq!(mmd_cov(&gen[..1], &refs).unwrap().cov, 0.25);
    }

    #[test]
    fn single_voxel_extraction() {
        let mut density = Tensor::full(vec![1, 3, 3, 3], -30.0);
        density.data_mut()[13] = 10.0;
        let f = FieldBundle::new(density, Tensor::zeros(vec![3, 3, 3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = extract_points(&f, 0.0, default_threshold(&f), 20, &mut rng).unwrap();
        assert!(pts.iter().all(|p| p.norm() < 1e-12));
        let empty = FieldBundle::constant([3, 3, 3], -30.0, 3);
        let err = extract_points(&empty, 0.0, 1.0, 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("empty shape"));
    }

    #[test]
    fn extraction_is_uniform() {
        let mut density = Tensor::full(vec![1, 4, 4, 4], -30.0);
        let occupied = [1usize, 7, 20, 33, 50];
        for &i in &occupied {
            density.data_mut()[i] = 5.0;
        }
        let f = FieldBundle::new(density, Tensor::zeros(vec![3, 4, 4, 4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let pts = extract_points(&f, 0.0, 1.0, n, &mut rng).unwrap();
        let p = 1.0 / occupied.len() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for &i in &occupied {
            let target = f.node_position([i / 16, (i / 4) % 4, i % 4]);
            let count = pts.iter().filter(|q| (**q - target).norm() < 1e-12).count();
            assert!((count as f64 - n as f64 * p).abs() < 3.0 * sd, "{count}");
        }
    }

    proptest! {
        #[test]
        fn chamfer_rigid_invariant(seed in 0u64..1000, angle in -3.0f64..3.0, tx in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 10);
            let b = cloud(&mut rng, 7);
            let move_pt = |p: &Vec3| p.rotate_y(angle) + Vec3::new(tx, 0.3, -tx);
            let a2: Vec<_> = a.iter().map(move_pt).collect();
            let b2: Vec<_> = b.iter().map(move_pt).collect();
            let d = chamfer(&a, &b).unwrap();
            prop_assert!((d - chamfer(&a2, &b2).unwrap()).abs() < 1e-9);
            prop_assert!((d - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}

//! k-means++ seeding and Lloyd iterations for the RBF centers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `q × d`.
    pub centers: DMatrix<f64>,
    /// Mean distance of each center to its three nearest other centers.
    pub widths: DVector<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Squared distances between every row of `points` and every row of
/// `centers` (`N × q`).
pub fn squared_distances(points: &DMatrix<f64>, centers: &DMatrix<f64>) -> DMatrix<f64> {
    let pn: Vec<f64> = points.row_iter().map(|r| r.norm_squared()).collect();
    let cn: Vec<f64> = centers.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = points * centers.transpose();
    for (i, mut row) in d.row_iter_mut().enumerate() {
        for (h, v) in row.iter_mut().enumerate() {
            *v = (pn[i] + cn[h] - 2.0 * *v).max(0.0);
        }
    }
    d
}

fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn seed_plus_plus(points: &DMatrix<f64>, q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(q, d);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centers.set_row(0, &points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_rows(points, i, &centers, 0)).collect();
    for h in 1..q {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // all points already coincide with a center
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.set_row(h, &points.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist_rows(points, i, &centers, h));
        }
    }
    centers
}

fn assign(points: &DMatrix<f64>, centers: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let d = squared_distances(points, centers);
    let mut labels = Vec::with_capacity(points.nrows());
    let mut dist = Vec::with_capacity(points.nrows());
    for row in d.row_iter() {
        let (h, v) = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (h, &v)| if v < best.1 { (h, v) } else { best });
        labels.push(h);
        dist.push(v);
    }
    (labels, dist)
}

/// k-means on the rows of `points` with `q` clusters.
///
/// Stops after `max_iter` Lloyd iterations, when assignments stop changing,
/// or when the inertia changes by less than `1e−6` relative.
pub fn kmeans(points: &DMatrix<f64>, q: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let (n, d) = points.shape();
    if q == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one center".into()));
    }
    if n < q {
        return Err(Error::InvalidArgument(format!(
            "k-means subset has {n} points, fewer than the {q} requested centers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(points, q, &mut rng);
    let (mut labels, mut dist) = assign(points, &centers);
    let mut inertia: f64 = dist.iter().sum();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = DMatrix::zeros(q, d);
        let mut counts = vec![0usize; q];
        for (i, &h) in labels.iter().enumerate() {
            counts[h] += 1;
            let mut row = sums.row_mut(h);
            row += points.row(i);
        }
        let mut taken = vec![false; n];
        for h in 0..q {
            if counts[h] > 0 {
                let mean = sums.row(h) / counts[h] as f64;
                centers.set_row(h, &mean);
            } else {
                // move an empty cluster to the worst-served point
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                    .expect("n >= q");
                taken[far] = true;
                centers.set_row(h, &points.row(far));
            }
        }
        let (new_labels, new_dist) = assign(points, &centers);
        let new_inertia: f64 = new_dist.iter().sum();
        let unchanged = new_labels == labels;
        let small = (inertia - new_inertia).abs() <= 1e-6 * inertia.max(f64::MIN_POSITIVE);
        labels = new_labels;
        dist = new_dist;
        inertia = new_inertia;
        if unchanged || small {
            break;
        }
    }

    let widths = if q == 1 {
        let rms = (inertia / n as f64).sqrt();
        DVector::from_element(1, if rms > 0.0 { rms } else { 1.0 })
    } else {
        center_widths(&centers)
    };
    Ok(KMeansResult {
        centers,
        widths,
        inertia,
        iterations,
    })
}

/// Mean distance of each center to its (up to) three nearest other centers.
pub fn center_widths(centers: &DMatrix<f64>) -> DVector<f64> {
    let q = centers.nrows();
    let d2 = squared_distances(centers, centers);
    let k = 3.min(q.saturating_sub(1)).max(1);
    DVector::from_iterator(
        q,
        (0..q).map(|h| {
            let mut others: Vec<f64> = (0..q).filter(|&j| j != h).map(|j| d2[(h, j)].sqrt()).collect();
            others.sort_by(f64::total_cmp);
            let w = others.iter().take(k).sum::<f64>() / k as f64;
            if w > 0.0 {
                w
            } else {
                1.0
            }
        }),
    )
}

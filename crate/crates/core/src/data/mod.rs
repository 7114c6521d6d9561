//! Point clouds, their file formats, dataset splits and evaluation metrics.

mod cloud;
mod io;
mod metrics;

pub use cloud::{expand_channels, ChannelSelection, PointCloud, BUILTIN_CHANNELS};
pub use io::{format_cloud, load_cloud, parse_cloud, save_cloud, CloudFormat};
pub use metrics::{
    compute_iou, shapenet_miou, CategoryScore, IouReport, SegMetrics, ShapeNetReport, ShapeObject,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `0..len` with `seed` and cuts it into consecutive parts sized
/// by `fractions`. Cut points are rounded cumulative fractions, so the
/// parts are disjoint and cover every index.
pub fn split_dataset(len: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyInput("cannot split an empty dataset".into()));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidInput("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut parts = Vec::with_capacity(fractions.len());
    let mut cumulative = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cumulative += f;
        let end = if i + 1 == fractions.len() {
            len
        } else {
            ((cumulative * len as f64).round() as usize).clamp(start, len)
        };
        parts.push(order[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_split_takes_everything() {
        let parts = split_dataset(7, &[1.0], 3).unwrap();
        let mut all = parts[0].clone();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn halves_are_disjoint() {
        let parts = split_dataset(10, &[0.5, 0.5], 3).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (5, 5));
        assert!(parts[0].iter().all(|i| !parts[1].contains(i)));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(
            split_dataset(50, &[0.7, 0.2, 0.1], 9).unwrap(),
            split_dataset(50, &[0.7, 0.2, 0.1], 9).unwrap()
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(split_dataset(0, &[1.0], 0), Err(Error::EmptyInput(_))));
        assert!(split_dataset(5, &[0.5, 0.4], 0).is_err());
        assert!(split_dataset(5, &[1.5, -0.5], 0).is_err());
    }
}

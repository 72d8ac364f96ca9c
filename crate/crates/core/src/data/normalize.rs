use super::WellLog;

/// Lower bound applied to a channel's standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Pools every sample of every well, channel by channel.
    ///
    /// Panics on an empty slice or wells with differing channel counts.
    pub fn fit(wells: &[WellLog]) -> NormStats {
        assert!(!wells.is_empty(), "normalization needs at least one well");
        let channels = wells[0].channels.len();
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let n: usize = wells.iter().map(WellLog::len).sum();
            let m = wells.iter().map(|w| w.samples.row(c).iter().sum::<f64>()).sum::<f64>() / n as f64;
            let var = wells
                .iter()
                .map(|w| w.samples.row(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / n as f64;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        NormStats { mean, std }
    }

    /// Identity statistics for `channels` channels.
    pub fn identity(channels: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// `(x - mean) / std` per channel. Not idempotent: applying twice shifts
    /// the data again.
    pub fn apply(&self, well: &WellLog) -> WellLog {
        assert_eq!(well.channels.len(), self.mean.len(), "channel count differs from stats");
        let mut out = well.clone();
        let t = well.len();
        for (c, chunk) in out.samples.data_mut().chunks_mut(t).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Fits statistics on `train` and applies them to every well in `all`.
pub fn normalize_wells(train: &[WellLog], all: &[WellLog]) -> (Vec<WellLog>, NormStats) {
    let stats = NormStats::fit(train);
    (all.iter().map(|w| stats.apply(w)).collect(), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::LogChannel;

    fn well(id: &str, rows: &[Vec<f64>]) -> WellLog {
        let channels = [LogChannel::Gr, LogChannel::Res, LogChannel::Den][..rows.len()].to_vec();
        WellLog::new(id, 0.0, 0.5, channels, Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn training_wells_become_standard() {
        let a = well("a", &[vec![10.0, 20.0, 35.0, 41.0], vec![1.0, 1.5, 2.0, 8.0]]);
        let b = well("b", &[vec![55.0, 60.0, 12.0], vec![0.3, 0.2, 0.9]]);
        let (out, stats) = normalize_wells(&[a.clone(), b.clone()], &[a, b]);
        assert_eq!(stats.mean.len(), 2);
        for c in 0..2 {
            let pooled: Vec<f64> = out.iter().flat_map(|w| w.samples.row(c).to_vec()).collect();
            let n = pooled.len() as f64;
            let m = pooled.iter().sum::<f64>() / n;
            let v = pooled.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-6);
            assert!((v.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_floored() {
        let a = well("a", &[vec![7.0; 5]]);
        let (out, stats) = normalize_wells(std::slice::from_ref(&a), &[a.clone()]);
        assert_eq!(stats.std[0], STD_FLOOR);
        assert!(out[0].samples.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn test_wells_use_training_stats() {
        let train = well("t", &[vec![0.0, 2.0]]);
        let test = well("x", &[vec![100.0]]);
        let (out, stats) = normalize_wells(std::slice::from_ref(&train), &[train.clone(), test]);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(out[1].samples.data(), &[99.0]);
    }

    #[test]
    fn not_idempotent() {
        let a = well("a", &[vec![1.0, 3.0, 8.0]]);
        let stats = NormStats {
            mean: vec![2.0],
            std: vec![0.5],
        };
        let once = stats.apply(&a);
        let twice = stats.apply(&once);
        assert_ne!(once, twice);
    }
}

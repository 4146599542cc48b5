use super::FidResult;

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics of one synthetic set against a real set.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub intra_fid: FidResult,
    pub inter_fid: FidResult,
    /// Per synthetic volume.
    pub tv: Vec<f64>,
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn tv_mean_std(&self) -> (f64, f64) {
        mean_std(&self.tv)
    }

    pub fn to_key_values(&self) -> String {
        let (m, s) = self.tv_mean_std();
        let mut out = format!(
            "intra_fid={:.6}\nintra_fid_regularized={}\ninter_fid={:.6}\ninter_fid_regularized={}\nfid_epsilon={:e}\ntv_mean={m:.6}\ntv_std={s:.6}\ntv={m:.4}±{s:.4}\nvolumes={}\nintra_slices={}\ninter_slices={}\n",
            self.intra_fid.value,
            self.intra_fid.regularized,
            self.inter_fid.value,
            self.inter_fid.regularized,
            super::FID_EPSILON,
            self.tv.len(),
            self.intra_fid.syn_count,
            self.inter_fid.syn_count,
        );
        for s in &self.skipped {
            out.push_str(&format!("skipped={s}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let (m, s) = self.tv_mean_std();
        format!(
            "metric,value,std,regularized\nintra_fid,{},,{}\ninter_fid,{},,{}\ntv,{m},{s},\n",
            self.intra_fid.value, self.intra_fid.regularized, self.inter_fid.value, self.inter_fid.regularized
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_known_values() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}

/// Per-step training curve of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    /// Total loss per step.
    pub losses: Vec<f32>,
    /// Reconstruction (L1) part per step, for autoencoder stages.
    pub recon: Vec<f32>,
    /// Depth slice index reconstructed for each sample, per step (NHAE stage 2).
    pub slice_indices: Vec<Vec<usize>>,
}

impl StageReport {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f32, f32) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

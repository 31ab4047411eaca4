use std::fmt::Write as _;

use super::EvalOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores, their means, and the evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub shave: usize,
    pub ensemble: bool,
    /// Resolved configuration text echoed into the outputs, if any.
    pub config: Option<String>,
}

impl MetricReport {
    pub fn new(entries: Vec<ImageScore>, opts: &EvalOptions) -> Self {
        let n = entries.len().max(1) as f64;
        let mean_psnr = entries.iter().map(|e| e.psnr).sum::<f64>() / n;
        let mean_ssim = entries.iter().map(|e| e.ssim).sum::<f64>() / n;
        Self {
            entries,
            mean_psnr,
            mean_ssim,
            scale: opts.scale,
            shave: opts.shave,
            ensemble: opts.ensemble,
            config: None,
        }
    }

    pub fn with_config(mut self, text: impl Into<String>) -> Self {
        self.config = Some(text.into());
        self
    }

    fn header(&self) -> String {
        let mut s = format!(
            "# scale = {}\n# shave = {}\n# ensemble = {}\n",
            self.scale, self.shave, self.ensemble
        );
        if let Some(cfg) = &self.config {
            for line in cfg.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        s
    }

    /// Aligned text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut s = self.header();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM");
        for e in &self.entries {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", e.name, e.psnr, e.ssim);
        }
        let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", "mean", self.mean_psnr, self.mean_ssim);
        s
    }

    /// `name,psnr,ssim` rows after `#` comment lines echoing the settings.
    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("name,psnr,ssim\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.name, e.psnr, e.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }
}

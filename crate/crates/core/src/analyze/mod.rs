//! Post-hoc analysis of evaluation gate vectors.

mod gatelog;
mod pca;

pub use gatelog::GateLog;
pub use pca::{pca_reduce, Pca};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GateCategory {
    AlwaysOn,
    AlwaysOff,
    InputDependent,
}

impl GateCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            GateCategory::AlwaysOn => "always_on",
            GateCategory::AlwaysOff => "always_off",
            GateCategory::InputDependent => "input_dependent",
        }
    }
}

/// Category and on-count of every gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTaxonomy {
    pub num_samples: usize,
    pub categories: Vec<GateCategory>,
    pub on_counts: Vec<usize>,
    pub layers: Vec<u32>,
}

impl GateTaxonomy {
    pub fn count(&self, cat: GateCategory) -> usize {
        self.categories.iter().filter(|&&c| c == cat).count()
    }
}

/// Classifies each gate by whether it fired on all, none, or some samples.
pub fn classify_gates(log: &GateLog) -> Result<GateTaxonomy> {
    let n = log.num_samples();
    if n == 0 {
        return Err(Error::invalid("cannot classify gates of an empty log"));
    }
    let c = log.num_gates();
    let mut on_counts = vec![0usize; c];
    for s in 0..n {
        for (cnt, &b) in on_counts.iter_mut().zip(log.row(s)) {
            *cnt += b as usize;
        }
    }
    let categories = on_counts
        .iter()
        .map(|&k| match k {
            0 => GateCategory::AlwaysOff,
            k if k == n => GateCategory::AlwaysOn,
            _ => GateCategory::InputDependent,
        })
        .collect();
    Ok(GateTaxonomy {
        num_samples: n,
        categories,
        on_counts,
        layers: log.layer_ids().to_vec(),
    })
}

/// Category counts of one backbone layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerBreakdown {
    pub layer: u32,
    pub gates: usize,
    pub always_on: usize,
    pub always_off: usize,
    pub input_dependent: usize,
}

impl LayerBreakdown {
    pub fn fraction(&self, cat: GateCategory) -> f64 {
        let k = match cat {
            GateCategory::AlwaysOn => self.always_on,
            GateCategory::AlwaysOff => self.always_off,
            GateCategory::InputDependent => self.input_dependent,
        };
        k as f64 / self.gates as f64
    }
}

/// Per-layer category counts, in layer order.
pub fn layer_distribution(tax: &GateTaxonomy) -> Vec<LayerBreakdown> {
    let mut out: Vec<LayerBreakdown> = Vec::new();
    for (&layer, &cat) in tax.layers.iter().zip(&tax.categories) {
        if out.last().map_or(true, |r| r.layer != layer) {
            out.push(LayerBreakdown {
                layer,
                gates: 0,
                always_on: 0,
                always_off: 0,
                input_dependent: 0,
            });
        }
        let r = out.last_mut().expect("pushed");
        r.gates += 1;
        match cat {
            GateCategory::AlwaysOn => r.always_on += 1,
            GateCategory::AlwaysOff => r.always_off += 1,
            GateCategory::InputDependent => r.input_dependent += 1,
        }
    }
    out
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::invalid(format!("histogram needs bins > 0 and hi > lo, got {bins} over [{lo}, {hi}]")));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let b = self.counts.len();
        let i = ((v - self.lo) / (self.hi - self.lo) * b as f64).floor();
        (i.max(0.0) as usize).min(b - 1)
    }

    pub fn add(&mut self, v: f64) {
        let i = self.bin_of(v);
        self.counts[i] += 1;
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// On-counts of the input-dependent gates and their histogram over
/// `[0, num_samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OnCountHistogram {
    /// `(gate index, on-count)` for every input-dependent gate.
    pub gates: Vec<(usize, usize)>,
    pub histogram: Histogram,
}

pub fn on_count_histogram(tax: &GateTaxonomy, bins: usize) -> Result<OnCountHistogram> {
    let mut histogram = Histogram::new(0.0, tax.num_samples as f64, bins)?;
    let gates: Vec<(usize, usize)> = tax
        .categories
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == GateCategory::InputDependent)
        .map(|(j, _)| (j, tax.on_counts[j]))
        .collect();
    for &(_, k) in &gates {
        histogram.add(k as f64);
    }
    Ok(OnCountHistogram { gates, histogram })
}

/// Number of gates on per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FiredCounts {
    pub per_sample: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Over `[0, num_gates]`.
    pub histogram: Histogram,
}

pub fn fired_count_per_sample(log: &GateLog, bins: usize) -> Result<FiredCounts> {
    if log.num_samples() == 0 {
        return Err(Error::invalid("cannot count fired gates of an empty log"));
    }
    let per_sample: Vec<usize> = (0..log.num_samples())
        .map(|s| log.row(s).iter().map(|&b| b as usize).sum())
        .collect();
    let mut histogram = Histogram::new(0.0, log.num_gates().max(1) as f64, bins)?;
    for &k in &per_sample {
        histogram.add(k as f64);
    }
    Ok(FiredCounts {
        min: *per_sample.iter().min().expect("non-empty"),
        max: *per_sample.iter().max().expect("non-empty"),
        mean: per_sample.iter().sum::<usize>() as f64 / per_sample.len() as f64,
        per_sample,
        histogram,
    })
}

/// Gate vectors as a row-major `N x c` matrix of 0.0 / 1.0.
pub fn usage_matrix(log: &GateLog) -> Vec<f64> {
    (0..log.num_samples())
        .flat_map(|s| log.row(s).iter().map(|&b| b as f64))
        .collect()
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

/// Projects the gate vectors onto `k` principal components and writes one
/// row per sample: `label,pc1,...,pck`.
pub fn export_usage_vectors(log: &GateLog, k: usize, path: &Path) -> Result<Pca> {
    let pca = pca_reduce(&usage_matrix(log), log.num_samples(), log.num_gates(), k)?;
    let header = std::iter::once("label".to_string())
        .chain((1..=k).map(|i| format!("pc{i}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows = (0..log.num_samples()).map(|s| {
        let mut r = log.labels()[s].to_string();
        for v in &pca.projected[s * k..(s + 1) * k] {
            r.push_str(&format!(",{v}"));
        }
        r
    });
    write_csv(path, &header, rows)?;
    Ok(pca)
}

/// Summary of [`write_reports`].
#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub num_samples: usize,
    pub num_gates: usize,
    pub always_on: usize,
    pub always_off: usize,
    pub input_dependent: usize,
    pub fired_min: usize,
    pub fired_max: usize,
    pub fired_mean: f64,
    pub pca_explained_variance_ratio: Vec<f64>,
    pub pca_zero_variance_components: Vec<usize>,
}

/// Writes every analysis of `log` as CSV files into `out_dir`:
/// `gate_taxonomy.csv`, `layer_distribution.csv`, `on_count_histogram.csv`,
/// `fired_per_sample.csv`, `fired_histogram.csv`, `usage_pca.csv`,
/// `pca_variance.csv`, and `summary.json`.
pub fn write_reports(log: &GateLog, out_dir: &Path, pca_k: usize, bins: usize) -> Result<AnalysisSummary> {
    let tax = classify_gates(log)?;
    let sites = log.layer_map();
    write_csv(
        &out_dir.join("gate_taxonomy.csv"),
        "gate,layer,filter,category,on_count",
        sites.iter().enumerate().map(|(j, s)| {
            format!("{j},{},{},{},{}", s.layer, s.filter, tax.categories[j].as_str(), tax.on_counts[j])
        }),
    )?;
    write_csv(
        &out_dir.join("layer_distribution.csv"),
        "layer,gates,always_on,always_off,input_dependent,frac_always_on,frac_always_off,frac_input_dependent",
        layer_distribution(&tax).iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.layer,
                r.gates,
                r.always_on,
                r.always_off,
                r.input_dependent,
                r.fraction(GateCategory::AlwaysOn),
                r.fraction(GateCategory::AlwaysOff),
                r.fraction(GateCategory::InputDependent)
            )
        }),
    )?;
    let hist_rows = |h: &Histogram| -> Vec<String> {
        (0..h.counts.len())
            .map(|i| {
                let (lo, hi) = h.bin_edges(i);
                format!("{i},{lo},{hi},{}", h.counts[i])
            })
            .collect()
    };
    let on = on_count_histogram(&tax, bins)?;
    write_csv(&out_dir.join("on_count_histogram.csv"), "bin,lo,hi,count", hist_rows(&on.histogram))?;
    let fired = fired_count_per_sample(log, bins)?;
    write_csv(
        &out_dir.join("fired_per_sample.csv"),
        "sample,label,fired",
        fired
            .per_sample
            .iter()
            .enumerate()
            .map(|(s, k)| format!("{s},{},{k}", log.labels()[s])),
    )?;
    write_csv(&out_dir.join("fired_histogram.csv"), "bin,lo,hi,count", hist_rows(&fired.histogram))?;
    let pca = export_usage_vectors(log, pca_k, &out_dir.join("usage_pca.csv"))?;
    write_csv(
        &out_dir.join("pca_variance.csv"),
        "component,explained_variance_ratio",
        pca.explained_variance_ratio
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{},{r}", i + 1)),
    )?;
    let summary = AnalysisSummary {
        num_samples: log.num_samples(),
        num_gates: log.num_gates(),
        always_on: tax.count(GateCategory::AlwaysOn),
        always_off: tax.count(GateCategory::AlwaysOff),
        input_dependent: tax.count(GateCategory::InputDependent),
        fired_min: fired.min,
        fired_max: fired.max,
        fired_mean: fired.mean,
        pca_explained_variance_ratio: pca.explained_variance_ratio.clone(),
        pca_zero_variance_components: pca.zero_variance.clone(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&out_dir.join("summary.json"), |w| w.write_all(&json))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log() -> GateLog {
        // 3 samples, layers 0 (2 gates) and 1 (2 gates)
        GateLog::new(vec![1, 0, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0], vec![0, 1, 2], vec![0, 0, 1, 1]).unwrap()
    }

    #[test]
    fn taxonomy_and_layers() {
        let tax = classify_gates(&log()).unwrap();
        assert_eq!(
            tax.categories,
            vec![GateCategory::AlwaysOn, GateCategory::AlwaysOff, GateCategory::InputDependent, GateCategory::InputDependent]
        );
        let d = layer_distribution(&tax);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].always_on, d[0].always_off, d[1].input_dependent), (1, 1, 2));
        assert!(classify_gates(&GateLog::new(vec![], vec![], vec![0]).unwrap()).is_err());
    }

    #[test]
    fn histogram_edges() {
        let mut h = Histogram::new(0.0, 10.0, 5).unwrap();
        h.add(0.0);
        h.add(10.0);
        h.add(3.99);
        assert_eq!(h.counts, vec![1, 1, 0, 0, 1]);
        assert!(Histogram::new(0.0, 0.0, 3).is_err());
    }

    #[test]
    fn fired_counts() {
        let f = fired_count_per_sample(&log(), 4).unwrap();
        assert_eq!(f.per_sample, vec![2, 2, 2]);
        assert_eq!((f.min, f.max), (2, 2));
    }
}

//! Error metrics, the paired signed-rank test, cross-validation and the
//! ResBlock-count sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dti::{fa, md, TensorFitter};
use crate::dwi::{normalize_b0, Tissue};
use crate::error::{Error, Result};
use crate::grid::{Array4, Voxel};
use crate::harmonize::{harmonize_normalized, HarmonizeOptions};
use crate::io::PairedSubject;
use crate::model::{ModelKind, NetworkParams, NetworkSpec};
use crate::sh::{design_matrix, ShBasisSpec, ShVolume};
use crate::training::{train, ShPair, TrainConfig};

/// `‖y − ŷ‖² / ‖y‖²`.
pub fn nmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} vs {} values", y.len(), y_hat.len())));
    }
    let den: f64 = y.iter().map(|v| v * v).sum();
    if !(den > 0.0) {
        return Err(Error::Invalid("ground truth has zero norm".into()));
    }
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// Largest sample size that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative signed-rank sums.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Ranks of `values` (1-based), ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided signed-rank test of `a − b`. Zero differences are
/// dropped; the p-value is exact up to [`EXACT_MAX_N`] pairs and a
/// continuity-corrected normal approximation above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite paired difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    let (p, exact) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w), true)
    } else {
        let mean = total / 2.0;
        let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
            let t = j as f64;
            var -= (t * t * t - t) / 48.0;
            i += j;
        }
        let z = (w - mean + 0.5).min(0.0) / var.sqrt();
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * std.cdf(z)).min(1.0), false)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n,
        exact,
        degenerate: false,
    })
}

/// `min(1, 2·P(T⁺ ≤ w))` over all 2ⁿ sign assignments, counted on doubled
/// ranks so tied half-ranks stay integral.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: f64 = counts[..=limit.min(max)].iter().sum();
    let total = 2f64.powi(ranks.len() as i32);
    (2.0 * below / total).min(1.0)
}

/// `""`, `"*"` (p ≤ 0.05) or `"**"` (p ≤ 0.01).
pub fn stars(p: f64) -> &'static str {
    if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unharmonized,
    Shresnet,
    Golkov,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unharmonized => "unharmonized",
            Method::Shresnet => "shresnet",
            Method::Golkov => "golkov",
        }
    }

    fn from_model(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Shresnet => Method::Shresnet,
            ModelKind::Golkov => Method::Golkov,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Signal,
    Fa,
    Md,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Signal, Quantity::Fa, Quantity::Md];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Signal => "signal",
            Quantity::Fa => "fa",
            Quantity::Md => "md",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueName {
    White,
    Grey,
}

impl TissueName {
    pub fn name(self) -> &'static str {
        match self {
            TissueName::White => "white",
            TissueName::Grey => "grey",
        }
    }
}

impl From<Tissue> for TissueName {
    fn from(t: Tissue) -> Self {
        match t {
            Tissue::White => TissueName::White,
            Tissue::Grey => TissueName::Grey,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseEntry {
    pub subject: String,
    pub fold: usize,
    pub tissue: TissueName,
    pub quantity: Quantity,
    pub method: Method,
    pub nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub tissue: TissueName,
    pub quantity: Quantity,
    /// Method expected to be better.
    pub method: Method,
    pub reference: Method,
    pub mean_nmse: f64,
    pub reference_mean_nmse: f64,
    /// `100 · (reference − method) / reference` on the subject means.
    pub reduction_percent: f64,
    pub wilcoxon: WilcoxonResult,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: String,
    pub test: Vec<String>,
    /// Best validation loss per trained model.
    pub best_val_loss: Vec<(Method, f64)>,
    pub epochs: Vec<(Method, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldInfo>,
    pub entries: Vec<NmseEntry>,
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per subject, tissue, quantity and method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,fold,tissue,quantity,method,nmse\n");
        for e in &self.entries {
            let tissue = match e.tissue {
                TissueName::White => "white",
                TissueName::Grey => "grey",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:e}",
                e.subject,
                e.fold,
                tissue,
                e.quantity.name(),
                e.method.name(),
                e.nmse
            );
        }
        out
    }

    /// Per-subject NMSE values of one cell, in subject order.
    pub fn values(&self, tissue: TissueName, quantity: Quantity, method: Method) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.tissue == tissue && e.quantity == quantity && e.method == method)
            .map(|e| e.nmse)
            .collect()
    }

    pub fn mean(&self, tissue: TissueName, quantity: Quantity, method: Method) -> f64 {
        let v = self.values(tissue, quantity, method);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn comparison(&self, tissue: TissueName, quantity: Quantity, method: Method, reference: Method) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.tissue == tissue && c.quantity == quantity && c.method == method && c.reference == reference
        })
    }
}

/// Subjects held out, used for model selection and trained on in one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: Vec<usize>,
}

/// Contiguous test groups of near-equal size; the validation subject is the
/// first one after the group (cyclically); everything else trains.
pub fn fold_splits(n_subjects: usize, k: usize) -> Result<Vec<FoldSplit>> {
    if n_subjects < 3 {
        return Err(Error::Invalid(format!(
            "cross-validation needs at least 3 subjects, got {n_subjects}"
        )));
    }
    if k < 2 || k > n_subjects {
        return Err(Error::Invalid(format!(
            "{k} folds for {n_subjects} subjects; need 2 ≤ k ≤ n"
        )));
    }
    let base = n_subjects / k;
    let extra = n_subjects % k;
    let mut start = 0;
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = (start..start + size).collect();
        start += size;
        let validation = (start) % n_subjects;
        let train: Vec<usize> = (0..n_subjects)
            .filter(|i| !test.contains(i) && *i != validation)
            .collect();
        if train.is_empty() {
            return Err(Error::Invalid(format!(
                "fold {f} leaves no training subjects; use more folds"
            )));
        }
        out.push(FoldSplit {
            train,
            validation,
            test,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub sh: ShBasisSpec,
    pub models: Vec<ModelKind>,
    pub shresnet: NetworkSpec,
    pub golkov: NetworkSpec,
    pub train: TrainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            sh: ShBasisSpec::default(),
            models: vec![ModelKind::Shresnet, ModelKind::Golkov],
            shresnet: NetworkSpec::default(),
            golkov: NetworkSpec::golkov(150),
            train: TrainConfig::default(),
        }
    }
}

/// Subject prepared once for every fold: SH fits on both scanners plus the
/// normalized attenuations the metrics compare.
struct Prepared {
    pair: ShPair,
    source_norm: crate::dwi::NormalizedDwi,
    target_att: Array4,
    unharmonized: Array4,
    voxel_size: [f64; 3],
    subject: PairedSubject,
}

fn prepare(s: &PairedSubject, sh: ShBasisSpec) -> Result<Prepared> {
    let named = |e: Error| Error::Invalid(format!("subject {}: {e}", s.id));
    let src = normalize_b0(&s.source, &s.mask).map_err(named)?;
    let tgt = normalize_b0(&s.target, &s.mask).map_err(named)?;
    let source_sh = ShVolume::fit(&src, &s.mask, sh)?;
    let target_sh = ShVolume::fit(&tgt, &s.mask, sh)?;

    let unharmonized = if src.table.same_as(&tgt.table, 1e-9) {
        src.signal.clone()
    } else {
        let basis = design_matrix(&sh, &tgt.table.dirs)?;
        let dims = src.signal.spatial_dims();
        let mut out = Array4::zeros([dims[0], dims[1], dims[2], tgt.table.len()]);
        for v in s.mask.voxels() {
            let c = source_sh.coeffs.voxel(v);
            let row: Vec<f64> = (0..basis.nrows())
                .map(|j| (0..c.len()).map(|k| basis[(j, k)] * c[k]).sum())
                .collect();
            out.write_voxel(v, &row);
        }
        out
    };
    Ok(Prepared {
        pair: ShPair {
            id: s.id.clone(),
            source: source_sh,
            target: target_sh,
            target_table: tgt.table.clone(),
        },
        target_att: tgt.signal,
        unharmonized,
        voxel_size: s.source.voxel_size,
        source_norm: src,
        subject: s.clone(),
    })
}

fn tissue_metrics(att: &Array4, voxels: &[Voxel], fitter: &TensorFitter) -> Result<[Vec<f64>; 3]> {
    let mut signal = Vec::with_capacity(voxels.len() * att.channels());
    let mut fav = Vec::with_capacity(voxels.len());
    let mut mdv = Vec::with_capacity(voxels.len());
    let mut buf = vec![0.0; att.channels()];
    for &v in voxels {
        att.read_voxel(v, &mut buf);
        signal.extend_from_slice(&buf);
        let t = fitter.fit(&buf)?;
        fav.push(fa(&t));
        mdv.push(md(&t));
    }
    Ok([signal, fav, mdv])
}

/// K-fold cross-validation: per fold, trains each configured model on the
/// training subjects with the validation subject for model selection, then
/// harmonizes every test subject and scores it against its target scan.
pub fn cross_validate(subjects: &[PairedSubject], cfg: &CvConfig) -> Result<EvalReport> {
    let splits = fold_splits(subjects.len(), cfg.folds)?;
    let prepared: Vec<Prepared> = subjects.iter().map(|s| prepare(s, cfg.sh)).collect::<Result<_>>()?;
    let table = &prepared[0].pair.target_table;
    for p in &prepared[1..] {
        if !p.pair.target_table.same_as(table, 1e-9) {
            return Err(Error::Invalid(format!(
                "subject {} has a different target direction set",
                p.pair.id
            )));
        }
    }
    let fitter = TensorFitter::new(&table.bvals, &table.dirs)?;
    let target_gt = prepared[0].subject.target.table.clone();
    let opts = HarmonizeOptions {
        sh: cfg.sh,
        skip_projection: false,
    };

    let mut report = EvalReport {
        folds: Vec::new(),
        entries: Vec::new(),
        comparisons: Vec::new(),
    };
    for (f, split) in splits.iter().enumerate() {
        for &t in &split.test {
            assert!(!split.train.contains(&t) && split.validation != t);
        }
        let train_pairs: Vec<&ShPair> = split.train.iter().map(|&i| &prepared[i].pair).collect();
        let val = &prepared[split.validation].pair;
        let mut info = FoldInfo {
            fold: f,
            train: split.train.iter().map(|&i| subjects[i].id.clone()).collect(),
            validation: subjects[split.validation].id.clone(),
            test: split.test.iter().map(|&i| subjects[i].id.clone()).collect(),
            best_val_loss: Vec::new(),
            epochs: Vec::new(),
        };

        let mut models = Vec::new();
        for &kind in &cfg.models {
            let spec = match kind {
                ModelKind::Shresnet => cfg.shresnet.clone(),
                ModelKind::Golkov => cfg.golkov.clone(),
            };
            let seed = cfg.train.seed.wrapping_add(f as u64);
            let init = NetworkParams::build(spec, seed)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let out = train(init, &train_pairs, val, &tc)?;
            let m = Method::from_model(kind);
            info.best_val_loss.push((m, out.log.best_val_loss));
            info.epochs.push((m, out.log.records.len()));
            models.push((m, out.params));
        }

        for &t in &split.test {
            let p = &prepared[t];
            let mut outputs = vec![(Method::Unharmonized, p.unharmonized.clone())];
            for (m, params) in &models {
                let h = harmonize_normalized(params, &p.source_norm, &p.subject.mask, &target_gt, p.voxel_size, &opts)?;
                outputs.push((*m, h.attenuations));
            }
            for tissue in Tissue::ALL {
                let voxels = p.subject.mask.tissue_voxels(tissue);
                if voxels.is_empty() {
                    continue;
                }
                let truth = tissue_metrics(&p.target_att, &voxels, &fitter)?;
                for (m, att) in &outputs {
                    let est = tissue_metrics(att, &voxels, &fitter)?;
                    for (q, (y, yh)) in Quantity::ALL.iter().zip(truth.iter().zip(&est)) {
                        report.entries.push(NmseEntry {
                            subject: p.pair.id.clone(),
                            fold: f,
                            tissue: tissue.into(),
                            quantity: *q,
                            method: *m,
                            nmse: nmse(y, yh)?,
                        });
                    }
                }
            }
        }
        report.folds.push(info);
    }

    let mut pairs = Vec::new();
    for &kind in &cfg.models {
        pairs.push((Method::from_model(kind), Method::Unharmonized));
    }
    if cfg.models.contains(&ModelKind::Shresnet) && cfg.models.contains(&ModelKind::Golkov) {
        pairs.push((Method::Shresnet, Method::Golkov));
    }
    for tissue in Tissue::ALL.map(TissueName::from) {
        for q in Quantity::ALL {
            for &(m, r) in &pairs {
                let a = report.values(tissue, q, m);
                let b = report.values(tissue, q, r);
                if a.is_empty() {
                    continue;
                }
                let w = wilcoxon_signed_rank(&a, &b)?;
                let mean_a = a.iter().sum::<f64>() / a.len() as f64;
                let mean_b = b.iter().sum::<f64>() / b.len() as f64;
                report.comparisons.push(Comparison {
                    tissue,
                    quantity: q,
                    method: m,
                    reference: r,
                    mean_nmse: mean_a,
                    reference_mean_nmse: mean_b,
                    reduction_percent: 100.0 * (mean_b - mean_a) / mean_b,
                    stars: stars(w.p_value).to_string(),
                    wilcoxon: w,
                });
            }
        }
    }
    Ok(report)
}

/// ResBlock counts evaluated in the published sweep.
pub const SWEEP_PRESET: [usize; 7] = [1, 2, 3, 6, 7, 9, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_resblocks: usize,
    /// Mean best validation loss over folds, times 100.
    pub loss_x100: Option<f64>,
    pub fold_losses: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut head = String::from("ResBlocks");
        let mut row = String::from("MSE x100 ");
        for c in &self.cells {
            let v = match c.loss_x100 {
                Some(l) => format!("{l:.3}"),
                None => "failed".to_string(),
            };
            let w = v.len().max(c.n_resblocks.to_string().len());
            let _ = write!(head, " | {:>w$}", c.n_resblocks);
            let _ = write!(row, " | {v:>w$}");
        }
        format!("{head}\n{row}\n")
    }
}

/// Cross-validated best validation loss of SHResNet for each ResBlock count.
/// A failing cell is recorded with its error instead of aborting the sweep.
pub fn resblock_sweep(n_values: &[usize], subjects: &[PairedSubject], cfg: &CvConfig) -> Result<SweepTable> {
    if n_values.is_empty() || n_values.contains(&0) {
        return Err(Error::Invalid("ResBlock counts must be positive".into()));
    }
    let splits = fold_splits(subjects.len(), cfg.folds)?;
    let prepared: Vec<Prepared> = subjects.iter().map(|s| prepare(s, cfg.sh)).collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &n in n_values {
        let spec = NetworkSpec {
            n_resblocks: n,
            ..cfg.shresnet.clone()
        };
        let run = || -> Result<Vec<f64>> {
            let mut losses = Vec::new();
            for (f, split) in splits.iter().enumerate() {
                let train_pairs: Vec<&ShPair> = split.train.iter().map(|&i| &prepared[i].pair).collect();
                let seed = cfg.train.seed.wrapping_add(f as u64);
                let init = NetworkParams::build(spec.clone(), seed)?;
                let tc = TrainConfig { seed, ..cfg.train.clone() };
                let out = train(init, &train_pairs, &prepared[split.validation].pair, &tc)?;
                losses.push(out.log.best_val_loss);
            }
            Ok(losses)
        };
        cells.push(match run() {
            Ok(losses) => SweepCell {
                n_resblocks: n,
                loss_x100: Some(100.0 * losses.iter().sum::<f64>() / losses.len() as f64),
                fold_losses: losses,
                error: None,
            },
            Err(e) => SweepCell {
                n_resblocks: n,
                loss_x100: None,
                fold_losses: Vec::new(),
                error: Some(e.to_string()),
            },
        });
    }
    Ok(SweepTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(nmse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((nmse(&[3.0, 4.0], &[3.0, 0.0]).unwrap() - 0.64).abs() < 1e-15);
        assert!(nmse(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(nmse(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.5, 1.0, 1.5, 2.0, 2.5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.0625);
        let same = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(same.degenerate);
        assert_eq!(same.p_value, 1.0);
        let mut up = a;
        up[2] += 1.0;
        let one = wilcoxon_signed_rank(&up, &a).unwrap();
        assert_eq!((one.n, one.statistic, one.p_value), (1, 0.0, 1.0));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 + 1.0).collect();
        let b = vec![0.0; 40];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(stars(0.01), "**");
        assert_eq!(stars(0.02), "*");
        assert_eq!(stars(0.05), "*");
        assert_eq!(stars(0.06), "");
    }

    #[test]
    fn splits_cover_every_subject_once() {
        for (n, k) in [(10, 10), (10, 3), (5, 2), (3, 3)] {
            let s = fold_splits(n, k).unwrap();
            assert_eq!(s.len(), k);
            let mut tested: Vec<usize> = s.iter().flat_map(|f| f.test.clone()).collect();
            tested.sort();
            assert_eq!(tested, (0..n).collect::<Vec<_>>());
            for f in &s {
                assert!(!f.test.contains(&f.validation));
                assert!(f.train.iter().all(|t| !f.test.contains(t) && *t != f.validation));
                assert_eq!(f.train.len() + f.test.len() + 1, n);
            }
        }
        let ten = fold_splits(10, 10).unwrap();
        assert_eq!(ten[0].train.len(), 8);
        assert!(fold_splits(2, 2).is_err());
        assert!(fold_splits(10, 1).is_err());
    }

    #[test]
    fn sweep_table_layout() {
        let t = SweepTable {
            cells: vec![
                SweepCell {
                    n_resblocks: 1,
                    loss_x100: Some(0.375),
                    fold_losses: vec![],
                    error: None,
                },
                SweepCell {
                    n_resblocks: 11,
                    loss_x100: None,
                    fold_losses: vec![],
                    error: Some("x".into()),
                },
            ],
        };
        assert_eq!(t.render(), "ResBlocks |     1 |     11\nMSE x100  | 0.375 | failed\n");
    }
}

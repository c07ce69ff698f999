//! Tidy TSV files for plotting grid and partial-training results.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capgen::TransferMode;
use crate::error::{Error, Result};

use super::grid::{mean_std, read_results_csv, ResultRow, RowType};
use super::partial::PartialRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotFigure {
    /// Mean/std WMD per row, mode and corpus size (bar chart).
    WmdBySize,
    /// Language-model perplexity against caption WMD (scatter).
    PplxVsWmd,
    /// WMD against language-model training epochs (partial training).
    WmdByEpoch,
}

impl PlotFigure {
    pub const ALL: [PlotFigure; 3] = [PlotFigure::WmdBySize, PlotFigure::PplxVsWmd, PlotFigure::WmdByEpoch];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotFigure::WmdBySize => "wmd-by-size",
            PlotFigure::PplxVsWmd => "pplx-vs-wmd",
            PlotFigure::WmdByEpoch => "wmd-by-epoch",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tsv", self.as_str())
    }
}

impl FromStr for PlotFigure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PlotFigure::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown figure {s}")))
    }
}

fn group_name(t: RowType, mode: TransferMode) -> String {
    match t {
        RowType::NoTransfer => t.as_str().to_string(),
        _ => format!("{t}/{}", mode.as_str()),
    }
}

fn exponent_label(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ok rows grouped by cell, keeping the file's order of first appearance.
fn cells(rows: &[ResultRow]) -> Vec<Vec<&ResultRow>> {
    let mut order: Vec<String> = Vec::new();
    let mut m: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        if !m.contains_key(&r.cell) {
            order.push(r.cell.clone());
        }
        m.entry(r.cell.clone()).or_default().push(r);
    }
    order.into_iter().map(|c| m.remove(&c).expect("key recorded")).collect()
}

/// `group, x, y_mean, y_std, n` rows of WMD per cell.
pub fn wmd_by_size(rows: &[ResultRow]) -> Vec<Vec<String>> {
    cells(rows)
        .into_iter()
        .filter_map(|c| {
            let ys: Vec<f64> = c.iter().filter_map(|r| r.wmd).collect();
            if ys.is_empty() {
                return None;
            }
            let (m, s) = mean_std(&ys);
            Some(vec![
                group_name(c[0].row_type, c[0].mode),
                exponent_label(c[0].size_exponent),
                m.to_string(),
                s.to_string(),
                ys.len().to_string(),
            ])
        })
        .collect()
}

/// `group, size_label, corpus_size, perplexity, wmd, n` per cell that has
/// a language model; perplexity is the mean fair perplexity.
pub fn pplx_vs_wmd(rows: &[ResultRow]) -> Vec<Vec<String>> {
    cells(rows)
        .into_iter()
        .filter_map(|c| {
            let pairs: Vec<(f64, f64)> = c.iter().filter_map(|r| Some((r.lm_fair_perplexity?, r.wmd?))).collect();
            if pairs.is_empty() {
                return None;
            }
            let (p, _) = mean_std(&pairs.iter().map(|x| x.0).collect::<Vec<_>>());
            let (w, _) = mean_std(&pairs.iter().map(|x| x.1).collect::<Vec<_>>());
            Some(vec![
                group_name(c[0].row_type, c[0].mode),
                format!("x={}", exponent_label(c[0].size_exponent)),
                c[0].corpus_size.map_or_else(String::new, |n| n.to_string()),
                p.to_string(),
                w.to_string(),
                pairs.len().to_string(),
            ])
        })
        .collect()
}

/// `mode, epoch, wmd_mean, wmd_std, n, overfit_marker` per (mode, n); the
/// marker flags the earliest `n` at which any repeat overfitted.
pub fn wmd_by_epoch(rows: &[PartialRow]) -> Vec<Vec<String>> {
    let first_overfit = rows.iter().filter(|r| r.overfit).map(|r| r.n).min();
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut mode_order: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let m = r.mode.as_str().to_string();
        if !mode_order.contains(&m) {
            mode_order.push(m.clone());
        }
        if let Some(w) = r.wmd {
            groups.entry((m, r.n)).or_default().push(w);
        }
    }
    let mut out = Vec::new();
    for m in mode_order {
        for ((gm, n), ys) in &groups {
            if *gm != m {
                continue;
            }
            let (mean, std) = mean_std(ys);
            out.push(vec![
                m.clone(),
                n.to_string(),
                mean.to_string(),
                std.to_string(),
                ys.len().to_string(),
                (Some(*n) == first_overfit).to_string(),
            ]);
        }
    }
    out
}

/// Writes the TSV for `figure` from a results CSV (`results.csv` for the
/// grid figures, `partial.csv` for `wmd-by-epoch`). Returns the data rows
/// written.
pub fn emit_plot_data(results: &Path, figure: PlotFigure, out: &Path) -> Result<usize> {
    let (header, rows): (&[&str], Vec<Vec<String>>) = match figure {
        PlotFigure::WmdBySize => (
            &["group", "x", "y_mean", "y_std", "n"],
            wmd_by_size(&read_results_csv::<ResultRow>(results)?),
        ),
        PlotFigure::PplxVsWmd => (
            &["group", "size_label", "corpus_size", "perplexity", "wmd", "n"],
            pplx_vs_wmd(&read_results_csv::<ResultRow>(results)?),
        ),
        PlotFigure::WmdByEpoch => (
            &["mode", "epoch", "wmd_mean", "wmd_std", "n", "overfit_marker"],
            wmd_by_epoch(&read_results_csv::<PartialRow>(results)?),
        ),
    };
    if rows.is_empty() {
        return Err(Error::EmptyData(format!("no usable results in {}", results.display())));
    }
    write_tsv(out, header, &rows)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperopt::TrialStatus;

    fn result(cell: &str, t: RowType, mode: TransferMode, x: Option<f64>, repeat: usize, wmd: f64) -> ResultRow {
        ResultRow {
            cell: cell.into(),
            row_type: t,
            mode,
            frozen: mode == TransferMode::Frozen,
            size_exponent: x,
            corpus_size: x.map(|_| 100),
            repeat,
            seed: 0,
            status: TrialStatus::Ok,
            lm_val_perplexity: x.map(|_| 5.0),
            lm_fair_perplexity: x.map(|_| 6.0 + repeat as f64),
            lm_epochs: None,
            lm_vocab_size: None,
            cg_vocab_size: None,
            cg_epochs: None,
            cg_val_perplexity: None,
            cg_test_perplexity: None,
            cider: None,
            wmd: Some(wmd),
            wmd_skipped: Some(0),
            error: None,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn single_row_has_zero_std() {
        let rows = vec![result("no-transfer", RowType::NoTransfer, TransferMode::FineTuned, None, 0, 0.3)];
        let t = wmd_by_size(&rows);
        assert_eq!(t, vec![vec!["no-transfer", "none", "0.3", "0", "1"]]);
        assert!(pplx_vs_wmd(&rows).is_empty());
    }

    #[test]
    fn five_repeats_use_sample_std() {
        let ys = [0.10, 0.12, 0.11, 0.15, 0.09];
        let rows: Vec<ResultRow> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| result("same-captions/frozen/x=0", RowType::SameCaptions, TransferMode::Frozen, Some(0.0), i, y))
            .collect();
        let t = wmd_by_size(&rows);
        let mean = ys.iter().sum::<f64>() / 5.0;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / 4.0;
        assert_eq!(t[0][0], "same-captions/frozen");
        assert!((t[0][2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((t[0][3].parse::<f64>().unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(t[0][4], "5");
    }

    #[test]
    fn scatter_has_one_row_per_cell() {
        let mut rows = Vec::new();
        for (x, mode) in [(-1.0, TransferMode::Frozen), (-1.0, TransferMode::FineTuned), (0.0, TransferMode::Frozen)] {
            let cell = format!("general-text/{}/x={x}", mode.as_str());
            for r in 0..3 {
                rows.push(result(&cell, RowType::GeneralText, mode, Some(x), r, 0.1));
            }
        }
        rows.push(result("no-transfer", RowType::NoTransfer, TransferMode::FineTuned, None, 0, 0.2));
        let s = pplx_vs_wmd(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0][3], "7");
    }

    #[test]
    fn figure_names_roundtrip() {
        for f in PlotFigure::ALL {
            assert_eq!(f.as_str().parse::<PlotFigure>().unwrap(), f);
        }
        assert!("bars".parse::<PlotFigure>().is_err());
    }
}

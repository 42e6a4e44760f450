//! Trains one variant per attention-site subset under a shared configuration.
//!
//! The table is written as `ablation.md` (markdown) and `ablation.tsv` with
//! columns `sites`, `blocks`, `params`, `loss`, `top1`, `top5`, `k`,
//! `best_top1`, `best_epoch`.

use std::fs;
use std::path::Path;

use crate::arch::build_res3atn;
use crate::data::ClipDataset;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::trainer::train;

/// No attention, each single site, and each pair of sites.
pub fn standard_grid() -> Vec<Vec<usize>> {
    vec![vec![], vec![1], vec![2], vec![3], vec![1, 2], vec![1, 3], vec![2, 3]]
}

/// `standard_grid` plus all three sites.
pub fn full_grid() -> Vec<Vec<usize>> {
    let mut g = standard_grid();
    g.push(vec![1, 2, 3]);
    g
}

pub fn sites_label(sites: &[usize]) -> String {
    let inner: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sites: Vec<usize>,
    pub params: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub k: usize,
    pub best_top1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let k = self.rows.first().map_or(5, |r| r.k);
        let mut s = format!(
            "| sites | blocks | params | eval loss | top-1 | top-{k} | best top-1 | best epoch |\n|---|---|---|---|---|---|---|---|\n"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.4} | {:.2} | {:.2} | {:.2} | {} |\n",
                sites_label(&r.sites),
                r.sites.len(),
                r.params,
                r.loss,
                r.top1,
                r.top5,
                r.best_top1,
                r.best_epoch
            ));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sites\tblocks\tparams\tloss\ttop1\ttop5\tk\tbest_top1\tbest_epoch\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                sites_label(&r.sites),
                r.sites.len(),
                r.params,
                r.loss,
                r.top1,
                r.top5,
                r.k,
                r.best_top1,
                r.best_epoch
            ));
        }
        s
    }

    /// Pairs `(a, b)` of rows where `a`'s sites are a strict subset of `b`'s
    /// but `a` does not have fewer parameters.
    pub fn inclusion_violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for a in &self.rows {
            for b in &self.rows {
                let subset = a.sites.len() < b.sites.len() && a.sites.iter().all(|s| b.sites.contains(s));
                if subset && a.params >= b.params {
                    out.push((sites_label(&a.sites), sites_label(&b.sites)));
                }
            }
        }
        out
    }

    /// Pairs `(a, b)` with fewer blocks in `a` but at least as many parameters.
    pub fn count_violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for a in &self.rows {
            for b in &self.rows {
                if a.sites.len() < b.sites.len() && a.params >= b.params {
                    out.push((sites_label(&a.sites), sites_label(&b.sites)));
                }
            }
        }
        out
    }
}

/// Trains every subset in `grid` with `base`'s seed and settings. With
/// `out_dir` set, each variant writes to a `sites_<...>` subdirectory and the
/// table goes to `ablation.md` / `ablation.tsv`.
pub fn ablation_run(
    base: &RunConfig,
    grid: &[Vec<usize>],
    train_set: &ClipDataset,
    eval_set: &ClipDataset,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let configs = grid
        .iter()
        .map(|sites| {
            let mut cfg = base.clone();
            cfg.network.attention_sites = sites.clone();
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = AblationTable::default();
    for cfg in &configs {
        let sites = cfg.network.sites().into_iter().collect::<Vec<_>>();
        let dir = out_dir.map(|d| {
            let tag: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
            let tag = if tag.is_empty() { "none".to_string() } else { tag.join("_") };
            d.join(format!("sites_{tag}"))
        });
        let params = build_res3atn::<f32>(&cfg.network)?.param_count();
        let report = train(cfg, train_set, eval_set, dir.as_deref())?;
        let e = &report.final_eval;
        table.rows.push(AblationRow {
            sites,
            params,
            loss: e.loss,
            top1: e.top1,
            top5: e.top5,
            k: e.k,
            best_top1: report.best_top1,
            best_epoch: report.best_epoch,
        });
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let md = d.join("ablation.md");
        fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let tsv = d.join("ablation.tsv");
        fs::write(&tsv, table.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sites: &[usize], params: usize) -> AblationRow {
        AblationRow {
            sites: sites.to_vec(),
            params,
            loss: 0.0,
            top1: 0.0,
            top5: 0.0,
            k: 4,
            best_top1: 0.0,
            best_epoch: 0,
        }
    }

    #[test]
    fn grids() {
        assert_eq!(standard_grid().len(), 7);
        assert_eq!(full_grid().len(), 8);
        assert_eq!(sites_label(&[]), "{}");
        assert_eq!(sites_label(&[1, 3]), "{1,3}");
    }

    #[test]
    fn violations() {
        let t = AblationTable {
            rows: vec![row(&[], 1), row(&[3], 10), row(&[1, 2], 8)],
        };
        assert!(t.inclusion_violations().is_empty());
        assert_eq!(t.count_violations(), vec![("{3}".to_string(), "{1,2}".to_string())]);
        assert_eq!(t.to_markdown().lines().count(), 5);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let cfg = RunConfig::desk();
        let ds = ClipDataset::default();
        assert!(ablation_run(&cfg, &[], &ds, &ds, None).is_err());
        assert!(ablation_run(&cfg, &[vec![4]], &ds, &ds, None).is_err());
    }
}

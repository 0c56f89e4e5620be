//! CSV emission for the diversity and cost figures.
//!
//! | file              | columns                                                   |
//! |-------------------|-----------------------------------------------------------|
//! | `fig2_cls.csv`    | dataset, encoding, mean_sim, n_instances                  |
//! | `fig5_patch.csv`  | dataset, encoding, filter_fraction, mean_sim, n_instances |
//! | `fig6_flops.csv`  | arch, strategy, C, N, flops                               |
//! | `encoder_cost.csv`| component, C, N, D, depth, heads, flops, attention_flops, params |
//!
//! Rows keep the order of the input slices.

use std::path::{Path, PathBuf};

use super::diversity::{DiversityReport, TokenSource};
use super::flops::CostReport;
use super::AnalysisError;

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

fn writer(header: &[&str]) -> csv::Writer<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory writer");
    w
}

pub fn fig2_csv(reports: &[DiversityReport]) -> String {
    let mut w = writer(&["dataset", "encoding", "mean_sim", "n_instances"]);
    for r in reports.iter().filter(|r| r.source == TokenSource::Cls) {
        w.write_record([
            r.dataset.clone(),
            r.mode.to_string(),
            format!("{:.6}", r.mean_similarity()),
            r.n_instances().to_string(),
        ])
        .expect("in-memory writer");
    }
    finish(w)
}

pub fn fig5_csv(reports: &[DiversityReport]) -> String {
    let mut w = writer(&[
        "dataset",
        "encoding",
        "filter_fraction",
        "mean_sim",
        "n_instances",
    ]);
    for r in reports.iter().filter(|r| r.source == TokenSource::Patch) {
        w.write_record([
            r.dataset.clone(),
            r.mode.to_string(),
            format!("{}", r.filter_fraction),
            format!("{:.6}", r.mean_similarity()),
            r.n_instances().to_string(),
        ])
        .expect("in-memory writer");
    }
    finish(w)
}

pub fn fig6_csv(reports: &[CostReport]) -> String {
    let mut w = writer(&["arch", "strategy", "C", "N", "flops"]);
    for r in reports {
        let Some(arch) = r.arch else { continue };
        let strategy = match r.component {
            super::Component::PoolerJap => "jap",
            super::Component::PoolerDcp => "dcp",
            _ => continue,
        };
        w.write_record([
            arch.to_string(),
            strategy.to_string(),
            r.channels.to_string(),
            r.tokens.to_string(),
            r.flops.to_string(),
        ])
        .expect("in-memory writer");
    }
    finish(w)
}

pub fn encoder_cost_csv(reports: &[CostReport]) -> String {
    let mut w = writer(&[
        "component",
        "C",
        "N",
        "D",
        "depth",
        "heads",
        "flops",
        "attention_flops",
        "params",
    ]);
    for r in reports.iter().filter(|r| r.arch.is_none()) {
        w.write_record([
            r.component.as_str().to_string(),
            r.channels.to_string(),
            r.tokens.to_string(),
            r.dim.to_string(),
            r.depth.to_string(),
            r.heads.to_string(),
            r.flops.to_string(),
            r.attention_flops.to_string(),
            r.params.to_string(),
        ])
        .expect("in-memory writer");
    }
    finish(w)
}

/// Paths written by [`emit_figures`].
#[derive(Debug, Clone, PartialEq)]
pub struct FigureBundle {
    pub files: Vec<PathBuf>,
}

/// Writes every figure CSV into `dir`; empty inputs give header-only files.
pub fn emit_figures(
    dir: &Path,
    diversity: &[DiversityReport],
    costs: &[CostReport],
) -> Result<FigureBundle, AnalysisError> {
    std::fs::create_dir_all(dir)?;
    let outputs = [
        ("fig2_cls.csv", fig2_csv(diversity)),
        ("fig5_patch.csv", fig5_csv(diversity)),
        ("fig6_flops.csv", fig6_csv(costs)),
        ("encoder_cost.csv", encoder_cost_csv(costs)),
    ];
    let mut files = Vec::new();
    for (name, body) in outputs {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        files.push(path);
    }
    Ok(FigureBundle { files })
}

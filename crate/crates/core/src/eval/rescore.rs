use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::probe::AttributeProbe;
use crate::denoiser::Condition;
use crate::edit::{EditSet, EditSpec, Editor, Init};
use crate::error::{Error, Result};
use crate::schedule::LatentState;

/// Images an edit is measured on.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalSet {
    /// Generated images, one per seed.
    Seeds(Vec<u64>),
    /// Real images, edited through inversion.
    Images {
        images: LatentState,
        ids: Vec<String>,
        refine_iters: usize,
    },
}

impl EvalSet {
    pub fn len(&self) -> usize {
        match self {
            EvalSet::Seeds(s) => s.len(),
            EvalSet::Images { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            EvalSet::Seeds(s) => s.iter().map(|s| format!("seed-{s}")).collect(),
            EvalSet::Images { ids, .. } => ids.clone(),
        }
    }

    /// Output of the edit pipeline for `edits` on every evaluation image.
    pub fn run(&self, editor: &Editor, edits: &EditSet) -> Result<Array2<f64>> {
        match self {
            EvalSet::Seeds(seeds) => Ok(editor
                .sample_edited(&Init::Seeds(seeds.clone()), &Condition::Null, 1.0, edits)?
                .image
                .x),
            EvalSet::Images {
                images,
                refine_iters,
                ..
            } => Ok(editor.edit_real(images, edits, *refine_iters)?.image.x),
        }
    }
}

/// Probabilities, failing with the offending image's id when the probe
/// returns anything outside `[0, 1]`.
pub fn checked_classify(
    probe: &dyn AttributeProbe,
    x: &Array2<f64>,
    ids: &[String],
) -> Result<Array2<f64>> {
    let p = probe.classify(x);
    if p.dim() != (x.nrows(), probe.attributes().len()) {
        return Err(Error::Evaluation {
            image: "*".into(),
            msg: format!("probe returned {:?} scores", p.dim()),
        });
    }
    for (row, id) in p.axis_iter(Axis(0)).zip(ids) {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Evaluation {
                image: id.clone(),
                msg: "probe produced an invalid probability".into(),
            });
        }
    }
    Ok(p)
}

/// Mean per-attribute probability change, in percentage points, caused by
/// each edit row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescoreMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Column ranges of mutually exclusive attribute groups.
    pub groups: Vec<Range<usize>>,
    pub values: Array2<f64>,
    /// `key: value` lines written above the table.
    pub preamble: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowAnnotation {
    /// Column of the largest increase.
    pub matched: usize,
    pub diagonal: f64,
    /// Largest-magnitude entry outside the matched column's group.
    pub largest_off: Option<(usize, f64)>,
}

impl RescoreMatrix {
    pub fn group_of(&self, col: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&col))
    }

    pub fn annotate(&self) -> Vec<RowAnnotation> {
        self.values
            .axis_iter(Axis(0))
            .map(|row| {
                let (matched, diagonal) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a });
                let g = self.group_of(matched);
                let largest_off = row
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(j, _)| self.group_of(j) != g)
                    .fold(None, |a: Option<(usize, f64)>, (j, v)| match a {
                        Some((_, best)) if best.abs() >= v.abs() => a,
                        _ => Some((j, v)),
                    });
                RowAnnotation {
                    matched,
                    diagonal,
                    largest_off,
                }
            })
            .collect()
    }

    /// Comma-separated table with a `#`-prefixed metadata preamble and a
    /// trailing annotation of each row's largest off-diagonal entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.preamble {
            writeln!(out, "# {k}: {v}").expect("string write");
        }
        write!(out, "edit").expect("string write");
        for c in &self.cols {
            write!(out, ",{c}").expect("string write");
        }
        writeln!(out, ",largest_off_diagonal").expect("string write");
        for ((label, row), ann) in self
            .rows
            .iter()
            .zip(self.values.axis_iter(Axis(0)))
            .zip(self.annotate())
        {
            write!(out, "{label}").expect("string write");
            for v in row {
                write!(out, ",{v:.4}").expect("string write");
            }
            match ann.largest_off {
                Some((j, v)) => writeln!(out, ",{}={v:.4}", self.cols[j]),
                None => writeln!(out, ","),
            }
            .expect("string write");
        }
        out
    }
}

/// Rescoring over arbitrary edit sets, one matrix row per set. The baseline
/// is the same pipeline with no edits, so an all-zero edit scores exactly 0.
pub fn rescore_sets(
    editor: &Editor,
    rows: &[(String, EditSet)],
    eval: &EvalSet,
    probe: &dyn AttributeProbe,
) -> Result<RescoreMatrix> {
    let cols = probe.attributes();
    if cols.is_empty() {
        return Err(Error::invalid("probe has no attributes"));
    }
    if eval.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let ids = eval.ids();
    let before = checked_classify(probe, &eval.run(editor, &EditSet::default())?, &ids)?;
    let mut values = Array2::zeros((rows.len(), cols.len()));
    for (r, (_, edits)) in rows.iter().enumerate() {
        let after = checked_classify(probe, &eval.run(editor, edits)?, &ids)?;
        let delta: Array1<f64> = (&after - &before).mean_axis(Axis(0)).expect("non-empty") * 100.0;
        values.row_mut(r).assign(&delta);
    }
    let seeds = match eval {
        EvalSet::Seeds(s) => s.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
        EvalSet::Images { .. } => "real images".into(),
    };
    Ok(RescoreMatrix {
        rows: rows.iter().map(|(l, _)| l.clone()).collect(),
        cols,
        groups: probe.groups(),
        values,
        preamble: vec![
            ("probe".into(), probe.id()),
            ("eval_size".into(), eval.len().to_string()),
            ("eval_seeds".into(), seeds),
        ],
    })
}

/// One row per single edit, labelled `d<k>@<scale>`.
pub fn rescore(
    editor: &Editor,
    edits: &[EditSpec],
    eval: &EvalSet,
    probe: &dyn AttributeProbe,
) -> Result<RescoreMatrix> {
    let rows: Vec<(String, EditSet)> = edits
        .iter()
        .map(|e| {
            (
                format!("d{}@{}", e.direction, e.scale),
                EditSet::single(e.clone()),
            )
        })
        .collect();
    let mut m = rescore_sets(editor, &rows, eval, probe)?;
    let windows: Vec<String> = edits
        .iter()
        .map(|e| format!("[{}, {}]", e.window.start, e.window.end))
        .collect();
    m.preamble.push(("windows".into(), windows.join(" ")));
    Ok(m)
}

//! Challenge metrics: DICE, average volume difference and lesion-wise F1 over
//! 3D connected components, with per-scanner aggregation.
//!
//! Grids are `u8` arrays where any nonzero voxel is foreground. The optional
//! `ignore` grid removes voxels from both prediction and truth before
//! anything is counted.

mod components;
mod report;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{dims, LabelMask};

pub use components::{connected_components_3d, dilate, Connectivity};
pub use report::{evaluate_cases, overall_line, parse_report_csv, write_report, CaseFailure, EvalItem, GroupSummary, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub connectivity: Connectivity,
    /// Cube radius used to grow P and G before lesion overlap tests; 0 means
    /// exact overlap.
    pub dilation_radius: usize,
    /// Treat truth label 2 as "not evaluated".
    pub ignore_label2: bool,
    /// DICE when both P and G are empty.
    pub dice_empty: f64,
    /// F1 when no lesion exists on either side.
    pub f1_empty: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::TwentySix,
            dilation_radius: 0,
            ignore_label2: true,
            dice_empty: 1.0,
            f1_empty: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub scanner: String,
    pub dice: f64,
    /// `None` when the truth volume is zero.
    pub avd: Option<f64>,
    pub f1: f64,
    pub n_truth: usize,
    pub n_detected: usize,
    pub n_false: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionF1 {
    pub f1: f64,
    pub n_truth: usize,
    /// Truth lesions touched by the prediction (N_T).
    pub n_detected: usize,
    /// Predicted components touching no truth lesion (N_F).
    pub n_false: usize,
}

fn check_shapes(p: ArrayView3<u8>, g: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>) -> Result<()> {
    if p.shape() != g.shape() || ignore.is_some_and(|i| i.shape() != p.shape()) {
        return Err(Error::Shape(format!(
            "prediction {:?}, truth {:?}, ignore {:?}",
            p.shape(),
            g.shape(),
            ignore.map(|i| i.shape().to_vec())
        )));
    }
    Ok(())
}

/// `(|P|, |G|, |P ∩ G|)` over non-ignored voxels.
fn counts(p: ArrayView3<u8>, g: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>) -> (usize, usize, usize) {
    let (mut np, mut ng, mut both) = (0, 0, 0);
    let mut visit = |pv: u8, gv: u8, iv: u8| {
        if iv != 0 {
            return;
        }
        let (a, b) = (pv != 0, gv != 0);
        np += a as usize;
        ng += b as usize;
        both += (a && b) as usize;
    };
    match ignore {
        Some(i) => Zip::from(p).and(g).and(i).for_each(|&a, &b, &c| visit(a, b, c)),
        None => Zip::from(p).and(g).for_each(|&a, &b| visit(a, b, 0)),
    }
    (np, ng, both)
}

pub fn dice(p: ArrayView3<u8>, g: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>) -> Result<f64> {
    dice_with(p, g, ignore, 1.0)
}

pub fn dice_with(p: ArrayView3<u8>, g: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>, empty: f64) -> Result<f64> {
    check_shapes(p, g, ignore)?;
    let (np, ng, both) = counts(p, g, ignore);
    if np + ng == 0 {
        return Ok(empty);
    }
    Ok(2.0 * both as f64 / (np + ng) as f64)
}

/// `|V_P − V_G| / V_G` as a ratio.
pub fn avd(p: ArrayView3<u8>, g: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>) -> Result<f64> {
    check_shapes(p, g, ignore)?;
    let (np, ng, _) = counts(p, g, ignore);
    if ng == 0 {
        return Err(Error::EmptyTruth);
    }
    Ok((np as f64 - ng as f64).abs() / ng as f64)
}

fn masked(a: ArrayView3<u8>, ignore: Option<ArrayView3<u8>>) -> Array3<u8> {
    match ignore {
        Some(i) => Zip::from(a).and(i).map_collect(|&v, &ig| u8::from(v != 0 && ig == 0)),
        None => a.mapv(|v| u8::from(v != 0)),
    }
}

pub fn lesion_f1(p: ArrayView3<u8>, g: ArrayView3<u8>, connectivity: Connectivity) -> Result<LesionF1> {
    lesion_f1_with(p, g, None, &MetricsConfig {
        connectivity,
        ..MetricsConfig::default()
    })
}

pub fn lesion_f1_with(
    p: ArrayView3<u8>,
    g: ArrayView3<u8>,
    ignore: Option<ArrayView3<u8>>,
    cfg: &MetricsConfig,
) -> Result<LesionF1> {
    check_shapes(p, g, ignore)?;
    let p = masked(p, ignore);
    let g = masked(g, ignore);
    let (p_lab, np) = connected_components_3d(p.view(), cfg.connectivity);
    let (g_lab, ng) = connected_components_3d(g.view(), cfg.connectivity);
    let (p_hit, g_hit) = if cfg.dilation_radius > 0 {
        (dilate(p.view(), cfg.dilation_radius), dilate(g.view(), cfg.dilation_radius))
    } else {
        (p.clone(), g.clone())
    };
    let mut truth_found = vec![false; ng + 1];
    let mut pred_true = vec![false; np + 1];
    Zip::from(&g_lab).and(&p_hit).for_each(|&l, &hit| {
        if l != 0 && hit != 0 {
            truth_found[l as usize] = true;
        }
    });
    Zip::from(&p_lab).and(&g_hit).for_each(|&l, &hit| {
        if l != 0 && hit != 0 {
            pred_true[l as usize] = true;
        }
    });
    let n_detected = truth_found.iter().filter(|&&b| b).count();
    let n_false = np - pred_true.iter().filter(|&&b| b).count();
    let f1 = if n_detected + n_false > 0 {
        n_detected as f64 / (n_detected + n_false) as f64
    } else if ng == 0 {
        cfg.f1_empty
    } else {
        0.0
    };
    Ok(LesionF1 {
        f1,
        n_truth: ng,
        n_detected,
        n_false,
    })
}

/// Scores one predicted label mask against truth. Prediction foreground is
/// label 1; truth label 2 is ignored when configured.
pub fn evaluate_case(
    case_id: &str,
    scanner: &str,
    pred: &LabelMask,
    truth: &LabelMask,
    cfg: &MetricsConfig,
) -> Result<CaseMetrics> {
    if dims(&pred.data) != dims(&truth.data) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let p = pred.data.mapv(|v| u8::from(v == 1));
    let g = truth.data.mapv(|v| u8::from(v == 1));
    let ignore = cfg.ignore_label2.then(|| truth.data.mapv(|v| u8::from(v == 2)));
    let iv = ignore.as_ref().map(|i| i.view());
    let d = dice_with(p.view(), g.view(), iv, cfg.dice_empty)?;
    let a = match avd(p.view(), g.view(), iv) {
        Ok(a) => Some(a),
        Err(Error::EmptyTruth) => {
            log::warn!("{case_id}: empty truth, AVD undefined and left out of aggregates");
            None
        }
        Err(e) => return Err(e),
    };
    let l = lesion_f1_with(p.view(), g.view(), iv, cfg)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        scanner: scanner.to_string(),
        dice: d,
        avd: a,
        f1: l.f1,
        n_truth: l.n_truth,
        n_detected: l.n_detected,
        n_false: l.n_false,
    })
}

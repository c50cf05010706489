//! Browser bindings for three small interactive views of the library.

use std::fmt::Write as _;

use wasm_bindgen::prelude::*;

use shufflemixer::attention::{rotation_restore, transpose_shuffle, WindowGrid};
use shufflemixer::complexity::{flops_attention, flops_mixing, AttentionKind, CostModel, MixingKind};
use shufflemixer::metrics::{evaluate, MaskVolume};
use shufflemixer::Tensor;

/// Window id of every token of a `side × side` slice before the shuffle,
/// followed by the original window id of the token found at each position
/// after it (`2·side²` values, row-major).
pub fn shuffle_layout(side: usize, window: usize) -> Result<Vec<u32>, String> {
    let grid = WindowGrid::new(side, side, window).map_err(|e| e.to_string())?;
    let ids = Tensor::<f64>::from_fn(&[1, side, side, 1], |i| {
        ((i / side / window) * grid.cols() + (i % side) / window) as f64
    });
    let shuffled = transpose_shuffle(&ids, &grid).map_err(|e| e.to_string())?;
    if rotation_restore(&shuffled, &grid).map_err(|e| e.to_string())? != ids {
        return Err("rotation restore did not invert the shuffle".into());
    }
    Ok(ids.data().iter().chain(shuffled.data()).map(|&v| v as u32).collect())
}

/// `name=value` lines of analytic FLOPs for one block's token volume.
pub fn complexity_lines(h: u32, w: u32, d: u32, c: u32, m: u32, ratio: u32) -> Result<String, String> {
    let cm =
        CostModel::new(h.into(), w.into(), d.into(), c.into(), m.into(), ratio.into()).map_err(|e| e.to_string())?;
    let mut out = String::new();
    for (name, v) in [
        ("msa", flops_attention(&cm, AttentionKind::PureMsa)),
        ("w_msa", flops_attention(&cm, AttentionKind::WindowMsa)),
        ("a_mlp_m", flops_mixing(&cm, MixingKind::AxialMlp)),
        ("d_mlp_m", flops_mixing(&cm, MixingKind::DenseMlp)),
        ("d_msa_m", flops_mixing(&cm, MixingKind::DenseMsa)),
    ] {
        writeln!(out, "{name}={v}").unwrap();
    }
    Ok(out)
}

fn ball(side: usize, centre: [f64; 3], r: f64) -> MaskVolume {
    MaskVolume::from_fn([side; 3], |i, j, k| {
        let d = [i as f64 - centre[0], j as f64 - centre[1], k as f64 - centre[2]];
        d.iter().map(|x| x * x).sum::<f64>() <= r * r
    })
}

/// Overlap metrics of two spheres in a `side³` grid; the second is moved
/// `shift` voxels along the first axis.
pub fn sphere_lines(side: usize, r_pred: f64, r_true: f64, shift: f64) -> Result<String, String> {
    if !(2..=96).contains(&side) {
        return Err(format!("side {side} outside 2..=96"));
    }
    let c = (side as f64 - 1.0) / 2.0;
    let truth = ball(side, [c, c, c], r_true);
    let pred = ball(side, [c + shift, c, c], r_pred);
    let m = evaluate(&pred, &truth).map_err(|e| e.to_string())?;
    let hd = m.hd95.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    Ok(format!(
        "dice={:.4}\njaccard={:.4}\nprecision={:.4}\nrecall={:.4}\nhd95={hd}\npred_voxels={}\ntrue_voxels={}\n",
        m.dice,
        m.jaccard,
        m.precision,
        m.recall,
        pred.count(),
        truth.count()
    ))
}

#[wasm_bindgen]
pub fn shuffle(side: usize, window: usize) -> Result<Vec<u32>, JsError> {
    shuffle_layout(side, window).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn complexity(h: u32, w: u32, d: u32, c: u32, m: u32, ratio: u32) -> Result<String, JsError> {
    complexity_lines(h, w, d, c, m, ratio).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sphere_metrics(side: usize, r_pred: f64, r_true: f64, shift: f64) -> Result<String, JsError> {
    sphere_lines(side, r_pred, r_true, shift).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_shuffled_window_holds_one_token_per_window() {
        let v = shuffle_layout(8, 4).unwrap();
        let after = &v[64..];
        for wr in 0..2 {
            for wc in 0..2 {
                let mut seen: Vec<u32> = (0..16).map(|t| after[(wr * 4 + t / 4) * 8 + wc * 4 + t % 4]).collect();
                seen.sort();
                assert_eq!(seen, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
            }
        }
        assert!(shuffle_layout(6, 4).is_err());
    }

    #[test]
    fn complexity_hand_value() {
        let text = complexity_lines(8, 8, 1, 4, 4, 1).unwrap();
        assert!(text.contains("w_msa=12288\n") && text.contains("msa=36864\n"));
    }

    #[test]
    fn identical_spheres_score_one() {
        let text = sphere_lines(24, 6.0, 6.0, 0.0).unwrap();
        assert!(text.starts_with("dice=1.0000\n"));
        assert!(text.contains("hd95=0.0000"));
        assert!(sphere_lines(1, 1.0, 1.0, 0.0).is_err());
    }
}

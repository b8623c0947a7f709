use serde::{Deserialize, Serialize};

use crate::dataset::{make_batch, Sample};
use crate::nets::{forward, Branch, ForwardOptions, ModelWeights, NetConfig, NetsError};

use super::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCam {
    pub branch: Branch,
    /// Feature-map resolution.
    pub feat_height: usize,
    pub feat_width: usize,
    /// Normalized map at feature resolution, row-major.
    pub map: Vec<f32>,
    /// Input resolution of the branch.
    pub height: usize,
    pub width: usize,
    /// `map` bilinearly resized to the input.
    pub upsampled: Vec<f32>,
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn bilinear_upsample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let coord = |d: usize, dn: usize, sn: usize| {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let at = |yy: usize, xx: usize| src[yy * sw + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Gradient-weighted class activation map of one sample at the last
/// feature map of `branch`. Channel weights are the spatial means of
/// d(steering)/d(feature); the weighted sum is rectified and min-max
/// normalized, so an all-zero map stays all-zero.
pub fn grad_cam(weights: &ModelWeights, sample: &Sample, cfg: &NetConfig, branch: Branch) -> Result<GradCam> {
    let batch = make_batch(&[sample], cfg, weights.arch);
    let opts = ForwardOptions {
        track_inputs: true,
        ..ForwardOptions::eval()
    };
    let mut f = forward(weights, &batch, opts)?;
    let feat = f.feature(branch).ok_or(NetsError::NoBranch {
        arch: weights.arch,
        branch,
    })?;
    let a = f.tape.value(feat)?.clone();
    let (c, fh, fw) = match a.shape() {
        [1, c, h, w] => (*c, *h, *w),
        other => unreachable!("feature maps are [1, C, H, W], got {other:?}"),
    };
    let mut g = f.tape.backward_retain(f.output, &[feat])?;
    let grad = g.take(feat).unwrap_or_else(|| vec![0.0; a.len()]);
    let hw = fh * fw;
    let mut cam = vec![0f64; hw];
    for k in 0..c {
        let gk = &grad[k * hw..(k + 1) * hw];
        let alpha = gk.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        for (m, &v) in cam.iter_mut().zip(&a.data()[k * hw..(k + 1) * hw]) {
            *m += alpha * v as f64;
        }
    }
    for m in &mut cam {
        *m = m.max(0.0);
    }
    let (lo, hi) = cam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let map: Vec<f32> = if hi > lo {
        cam.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else if hi > 0.0 {
        vec![1.0; hw]
    } else {
        vec![0.0; hw]
    };
    let (height, width) = match branch {
        Branch::Rgb => (cfg.rgb_height, cfg.rgb_width),
        Branch::Dmap => (cfg.dmap_height, cfg.dmap_width),
    };
    let upsampled = bilinear_upsample(&map, fh, fw, height, width);
    Ok(GradCam {
        branch,
        feat_height: fh,
        feat_width: fw,
        map,
        height,
        width,
        upsampled,
    })
}

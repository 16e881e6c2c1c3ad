//! Residual box targets with a direction bit, and BEV corner targets.

use crate::error::{Error, Result};
use crate::geometry::{bev_corners, wrap_angle, OrientedBox3D};

/// `|cos Δθ|` below this is treated as exactly perpendicular: `Δζ = 0`, `δ = 0`.
pub const PERPENDICULAR_COS: f64 = 1e-12;

/// Residual targets in the order
/// `(Δx, Δy, Δz_b, Δz_t, Δw, Δh, Δl, Δη, Δζ)` plus the direction bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTargets {
    pub du: [f64; 9],
    pub direction: bool,
}

impl ResidualTargets {
    pub const DX: usize = 0;
    pub const DY: usize = 1;
    pub const DZ_BOTTOM: usize = 2;
    pub const DZ_TOP: usize = 3;
    pub const DW: usize = 4;
    pub const DH: usize = 5;
    pub const DL: usize = 6;
    pub const SIN: usize = 7;
    pub const ABS_COS: usize = 8;

    /// Targets that decode to the anchor itself.
    pub fn identity() -> Self {
        let mut du = [0.0; 9];
        du[Self::ABS_COS] = 1.0;
        Self { du, direction: true }
    }

    pub fn direction_target(&self) -> f64 {
        if self.direction {
            1.0
        } else {
            0.0
        }
    }
}

/// Eight BEV corner differences `(Δc₁..Δc₄, Δd₁..Δd₄)`: x offsets then y
/// offsets, in the corner order of [`bev_corners`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerTargets {
    pub dv: [f64; 8],
}

fn anchor_diagonal(anchor: &OrientedBox3D) -> f64 {
    anchor.l.hypot(anchor.w)
}

pub fn encode_residual(gt: &OrientedBox3D, anchor: &OrientedBox3D) -> ResidualTargets {
    let diag = anchor_diagonal(anchor);
    let d_theta = gt.yaw - anchor.yaw;
    let (sin, mut cos) = d_theta.sin_cos();
    if cos.abs() < PERPENDICULAR_COS {
        cos = 0.0;
    }
    ResidualTargets {
        du: [
            (gt.cx - anchor.cx) / diag,
            (gt.cy - anchor.cy) / diag,
            gt.bottom() - anchor.bottom(),
            gt.top() - anchor.top(),
            (gt.w / anchor.w).ln(),
            (gt.h / anchor.h).ln(),
            (gt.l / anchor.l).ln(),
            sin,
            cos.abs(),
        ],
        direction: cos > 0.0,
    }
}

/// Inverts [`encode_residual`]. Height and vertical center come from the
/// decoded bottom and top faces; the `Δh` entry is not used.
pub fn decode_residual(targets: &ResidualTargets, anchor: &OrientedBox3D) -> Result<OrientedBox3D> {
    let du = &targets.du;
    if !(-1.0..=1.0).contains(&du[ResidualTargets::SIN]) {
        return Err(Error::Contract(format!("sin residual {} outside [-1, 1]", du[ResidualTargets::SIN])));
    }
    let diag = anchor_diagonal(anchor);
    let bottom = anchor.bottom() + du[ResidualTargets::DZ_BOTTOM];
    let top = anchor.top() + du[ResidualTargets::DZ_TOP];
    let h = top - bottom;
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Inversion(format!("decoded top face {top} is not above bottom face {bottom}")));
    }
    let sign = if targets.direction { 1.0 } else { -1.0 };
    let d_theta = du[ResidualTargets::SIN].atan2(sign * du[ResidualTargets::ABS_COS]);
    Ok(OrientedBox3D {
        cx: anchor.cx + du[ResidualTargets::DX] * diag,
        cy: anchor.cy + du[ResidualTargets::DY] * diag,
        cz: 0.5 * (bottom + top),
        l: anchor.l * du[ResidualTargets::DL].exp(),
        w: anchor.w * du[ResidualTargets::DW].exp(),
        h,
        yaw: wrap_angle(anchor.yaw + d_theta),
    })
}

fn corner_vector(b: &OrientedBox3D) -> [f64; 8] {
    let c = bev_corners(b).vertices;
    [c[0][0], c[1][0], c[2][0], c[3][0], c[0][1], c[1][1], c[2][1], c[3][1]]
}

/// Training-only auxiliary targets; never decoded.
pub fn encode_corners(gt: &OrientedBox3D, anchor: &OrientedBox3D) -> CornerTargets {
    let g = corner_vector(gt);
    let a = corner_vector(anchor);
    let mut dv = [0.0; 8];
    for k in 0..8 {
        dv[k] = g[k] - a[k];
    }
    CornerTargets { dv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn anchor() -> OrientedBox3D {
        OrientedBox3D::new(0.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0)
    }

    #[test]
    fn identity_targets() {
        let a = anchor();
        let t = encode_residual(&a, &a);
        assert_eq!(t, ResidualTargets::identity());
        assert_eq!(decode_residual(&t, &a).unwrap(), a);
    }

    #[test]
    fn perpendicular_boundary() {
        let a = anchor();
        let g = OrientedBox3D { yaw: FRAC_PI_2, ..a };
        let t = encode_residual(&g, &a);
        assert_eq!(t.du[ResidualTargets::SIN], 1.0);
        assert_eq!(t.du[ResidualTargets::ABS_COS], 0.0);
        assert!(!t.direction);
        let back = decode_residual(&t, &a).unwrap();
        assert!((back.yaw - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn worked_example_matches_scalar_evaluation() {
        let g = OrientedBox3D::new(1.0, 2.0, -0.5, 4.0, 2.0, 1.5, 0.3);
        let a = anchor();
        let t = encode_residual(&g, &a);
        let d = (3.9f64 * 3.9 + 1.6 * 1.6).sqrt();
        let want = [
            1.0 / d,
            2.0 / d,
            (-0.5 - 0.75) - (-1.0 - 0.78),
            (-0.5 + 0.75) - (-1.0 + 0.78),
            (2.0f64 / 1.6).ln(),
            (1.5f64 / 1.56).ln(),
            (4.0f64 / 3.9).ln(),
            0.3f64.sin(),
            0.3f64.cos(),
        ];
        for (k, (got, w)) in t.du.iter().zip(want).enumerate() {
            assert!((got - w).abs() < 1e-15, "field {k}: {got} vs {w}");
        }
        assert!(t.direction);
    }

    #[test]
    fn flipped_heading_uses_direction_bit() {
        let a = anchor();
        let g = OrientedBox3D::new(0.3, -0.2, -0.9, 4.1, 1.7, 1.5, 2.8);
        let t = encode_residual(&g, &a);
        assert!(!t.direction);
        let back = decode_residual(&t, &a).unwrap();
        assert!((back.yaw - g.yaw).abs() < 1e-12);
    }

    #[test]
    fn inversion_errors() {
        let a = anchor();
        let mut t = ResidualTargets::identity();
        t.du[ResidualTargets::DZ_TOP] = -2.0;
        assert!(matches!(decode_residual(&t, &a), Err(Error::Inversion(_))));
        let mut t = ResidualTargets::identity();
        t.du[ResidualTargets::SIN] = 1.5;
        assert!(decode_residual(&t, &a).is_err());
    }

    #[test]
    fn corner_targets() {
        let a = anchor();
        assert_eq!(encode_corners(&a, &a).dv, [0.0; 8]);
        let g = OrientedBox3D { cx: a.cx + 1.0, ..a };
        let t = encode_corners(&g, &a);
        for k in 0..8 {
            let want = if k < 4 { 1.0 } else { 0.0 };
            assert!((t.dv[k] - want).abs() < 1e-12);
        }
    }
}

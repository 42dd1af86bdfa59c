//! Phase wrapping helpers shared by every stage.

use std::f64::consts::{PI, TAU};

/// Wrap an angle into `(-π, π]`. `+π` maps to itself, `-π` maps to `+π`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let w = x - TAU * ((x - PI) / TAU).ceil();
    // guard the rounding edge where x - PI is a tiny positive multiple of TAU
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Distance between two angles modulo 2π, in `[0, π]`.
#[inline]
pub fn circular_distance(a: f64, b: f64) -> f64 {
    wrap(a - b).abs()
}

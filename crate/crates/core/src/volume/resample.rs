//! Cubic B-spline volume resampling.
//!
//! The resampler converts samples to B-spline coefficients with the standard
//! causal/anticausal recursive prefilter (pole `sqrt(3) - 2`), so evaluating
//! the spline at the original grid reproduces the input. Out-of-range indices
//! reflect about the end samples (mirror boundary). Output voxel centers sit
//! at `(i + 0.5) * spacing`, which keeps the physical field of view aligned
//! between input and output grids.

use super::{Volume3D, VolumeError};

/// Pole of the cubic B-spline prefilter.
const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Resample a volume to a new physical spacing by cubic B-spline interpolation.
///
/// Output dims are `round(dim * spacing / target)` per axis, at least 1.
pub fn resample_bspline(
    vol: &Volume3D,
    target_spacing: (f64, f64, f64),
) -> Result<Volume3D, VolumeError> {
    let ts = [target_spacing.0, target_spacing.1, target_spacing.2];
    if ts.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(VolumeError::InvalidSpacing(target_spacing));
    }
    let (nz, ny, nx) = vol.dims();
    let (dz, dy, dx) = vol.spacing();
    let in_dims = [nz, ny, nx];
    let in_sp = [dz, dy, dx];

    let out_dims: Vec<usize> = (0..3)
        .map(|a| ((in_dims[a] as f64 * in_sp[a] / ts[a]).round() as usize).max(1))
        .collect();

    // samples -> interpolation coefficients, axis by axis
    let mut coeffs: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();
    prefilter_axis(&mut coeffs, in_dims, 0);
    prefilter_axis(&mut coeffs, in_dims, 1);
    prefilter_axis(&mut coeffs, in_dims, 2);

    // per-axis evaluation tables: 4 mirrored tap indices + 4 weights
    let tables: Vec<(Vec<[usize; 4]>, Vec<[f64; 4]>)> = (0..3)
        .map(|a| build_axis_table(out_dims[a], ts[a], in_dims[a], in_sp[a]))
        .collect();

    let (oz, oy, ox) = (out_dims[0], out_dims[1], out_dims[2]);
    let mut out = Vec::with_capacity(oz * oy * ox);
    let plane = ny * nx;
    for z in 0..oz {
        let (zi, zw) = (&tables[0].0[z], &tables[0].1[z]);
        for y in 0..oy {
            let (yi, yw) = (&tables[1].0[y], &tables[1].1[y]);
            for x in 0..ox {
                let (xi, xw) = (&tables[2].0[x], &tables[2].1[x]);
                let mut acc = 0.0f64;
                for k in 0..4 {
                    let base_z = zi[k] * plane;
                    let mut acc_y = 0.0f64;
                    for j in 0..4 {
                        let row = base_z + yi[j] * nx;
                        let s = xw[0] * coeffs[row + xi[0]]
                            + xw[1] * coeffs[row + xi[1]]
                            + xw[2] * coeffs[row + xi[2]]
                            + xw[3] * coeffs[row + xi[3]];
                        acc_y += yw[j] * s;
                    }
                    acc += zw[k] * acc_y;
                }
                out.push(acc as f32);
            }
        }
    }

    // rounding can leave constants a hair outside the domain
    if vol.domain() == super::Domain::Unit {
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Volume3D::from_vec((oz, oy, ox), target_spacing, vol.domain(), out)
}

/// Map an output index to a continuous input-grid coordinate.
#[inline]
fn input_coord(i_out: usize, out_sp: f64, in_sp: f64) -> f64 {
    (i_out as f64 + 0.5) * (out_sp / in_sp) - 0.5
}

fn build_axis_table(
    out_n: usize,
    out_sp: f64,
    in_n: usize,
    in_sp: f64,
) -> (Vec<[usize; 4]>, Vec<[f64; 4]>) {
    let mut idx = Vec::with_capacity(out_n);
    let mut wts = Vec::with_capacity(out_n);
    for i in 0..out_n {
        let t = input_coord(i, out_sp, in_sp);
        let base = t.floor();
        let frac = t - base;
        let b = base as isize;
        idx.push([
            mirror(b - 1, in_n),
            mirror(b, in_n),
            mirror(b + 1, in_n),
            mirror(b + 2, in_n),
        ]);
        wts.push(cubic_weights(frac));
    }
    (idx, wts)
}

/// Cubic B-spline basis weights for a fractional offset `t` in [0, 1).
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let omt = 1.0 - t;
    [
        omt * omt * omt / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Reflect an index about the end samples (period `2n - 2`).
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Run the recursive prefilter along one axis of a z-major buffer.
fn prefilter_axis(data: &mut [f64], dims: [usize; 3], axis: usize) {
    let (nz, ny, nx) = (dims[0], dims[1], dims[2]);
    let n = match axis {
        0 => nz,
        1 => ny,
        _ => nx,
    };
    if n == 1 {
        return;
    }
    let mut line = vec![0.0f64; n];
    match axis {
        0 => {
            let stride = ny * nx;
            for y in 0..ny {
                for x in 0..nx {
                    let base = y * nx + x;
                    for (k, v) in line.iter_mut().enumerate() {
                        *v = data[base + k * stride];
                    }
                    filter_line(&mut line);
                    for (k, v) in line.iter().enumerate() {
                        data[base + k * stride] = *v;
                    }
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    let base = z * ny * nx + x;
                    for (k, v) in line.iter_mut().enumerate() {
                        *v = data[base + k * nx];
                    }
                    filter_line(&mut line);
                    for (k, v) in line.iter().enumerate() {
                        data[base + k * nx] = *v;
                    }
                }
            }
        }
        _ => {
            for row in data.chunks_mut(nx) {
                filter_line(row);
            }
        }
    }
}

/// In-place sample-to-coefficient transform for one line, mirror boundaries.
fn filter_line(c: &mut [f64]) {
    let n = c.len();
    if n == 1 {
        return;
    }
    let z = POLE;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= lambda;
    }
    c[0] = initial_causal(c, z);
    for i in 1..n {
        c[i] += z * c[i - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for i in (0..n - 1).rev() {
        c[i] = z * (c[i + 1] - c[i]);
    }
}

fn initial_causal(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    // horizon beyond which z^k underflows past f64 precision
    let horizon = (f64::EPSILON.ln() / z.abs().ln()).ceil() as usize;
    if horizon < n {
        let mut zk = z;
        let mut sum = c[0];
        for &v in c.iter().take(horizon).skip(1) {
            sum += zk * v;
            zk *= z;
        }
        sum
    } else {
        // exact closed form over the full mirrored period
        let mut zk = z;
        let iz = 1.0 / z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for &v in c.iter().take(n - 1).skip(1) {
            sum += (zk + z2n) * v;
            zk *= z;
            z2n *= iz;
        }
        sum / (1.0 - zk * zk)
    }
}

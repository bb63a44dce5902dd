//! Rotation representations: axis-angle, 3x3 matrices, and the continuous
//! 6-D encoding (first two matrix columns).
//!
//! The differentiable paths are generic over [`Real`] so that forward-mode
//! dual numbers can flow through them.

use num_dual::DualNum;

use crate::error::{FlagError, Result};

/// Scalar usable in the kinematic chain: `f64` or a dual number over it.
pub trait Real: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Real for T {}

pub type Mat3<T = f64> = [[T; 3]; 3];
pub type Vec3<T = f64> = [T; 3];

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::from(1.0), T::from(0.0));
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [[T::from(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat_vec<T: Real>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose<T: Copy>(a: &Mat3<T>) -> Mat3<T> {
    [[a[0][0], a[1][0], a[2][0]], [a[0][1], a[1][1], a[2][1]], [a[0][2], a[1][2], a[2][2]]]
}

/// Rodrigues' formula. Below 1e-8 rad the sinc-type coefficients switch to
/// their Taylor expansions so the map stays smooth through zero.
pub fn axis_angle_to_matrix<T: Real>(aa: &Vec3<T>) -> Mat3<T> {
    let [x, y, z] = *aa;
    let theta_sq = x * x + y * y + z * z;
    let (a, b) = if theta_sq.re() < 1e-16 {
        (T::from(1.0) - theta_sq / 6.0, T::from(0.5) - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (T::from(1.0) - theta.cos()) / theta_sq)
    };
    let zero = T::from(0.0);
    let k = [[zero, -z, y], [z, zero, -x], [-y, x, zero]];
    let k2 = mat_mul(&k, &k);
    let mut r = identity::<T>();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Matrix logarithm on SO(3), returning an axis-angle with magnitude in [0, pi].
pub fn matrix_to_axis_angle(r: &Mat3) -> Vec3 {
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let s = 0.5 * norm(&v);
    let c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-8 {
        return [0.5 * v[0], 0.5 * v[1], 0.5 * v[2]];
    }
    if std::f64::consts::PI - theta > 1e-4 {
        let k = theta / (2.0 * s);
        return [k * v[0], k * v[1], k * v[2]];
    }
    // Near pi the antisymmetric part vanishes; read the axis off R + I.
    let b = [
        [r[0][0] + 1.0, r[0][1], r[0][2]],
        [r[1][0], r[1][1] + 1.0, r[1][2]],
        [r[2][0], r[2][1], r[2][2] + 1.0],
    ];
    let col = (0..3)
        .max_by(|&i, &j| b[i][i].partial_cmp(&b[j][j]).unwrap())
        .unwrap();
    let mut axis = [b[0][col], b[1][col], b[2][col]];
    let n = norm(&axis);
    axis.iter_mut().for_each(|a| *a /= n);
    if axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2] < 0.0 {
        axis.iter_mut().for_each(|a| *a = -*a);
    }
    [axis[0] * theta, axis[1] * theta, axis[2] * theta]
}

/// Wraps an axis-angle so its magnitude lies in [0, pi].
pub fn canonicalize_axis_angle(aa: Vec3) -> Vec3 {
    use std::f64::consts::{PI, TAU};
    let theta = norm(&aa);
    if theta <= PI {
        return aa;
    }
    let mut wrapped = theta % TAU;
    if wrapped > PI {
        wrapped -= TAU;
    }
    let k = wrapped / theta;
    [aa[0] * k, aa[1] * k, aa[2] * k]
}

/// First two columns of `r`, column-major: `(r00, r10, r20, r01, r11, r21)`.
pub fn rot6d_encode<T: Copy>(r: &Mat3<T>) -> [T; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Gram-Schmidt decoding of a 6-D rotation code.
pub fn rot6d_decode(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(&a1);
    if n1 < 1e-12 {
        return Err(FlagError::Degenerate("6-D rotation: first column is zero".into()));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(&u);
    if n2 < 1e-12 * norm(&a2).max(1.0) {
        return Err(FlagError::Degenerate("6-D rotation: columns are collinear".into()));
    }
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let b3 = cross(&b1, &b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

pub fn norm(v: &Vec3) -> f64 {
    dot(v, v).sqrt()
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn determinant(r: &Mat3) -> f64 {
    dot(&[r[0][0], r[1][0], r[2][0]], &cross(&[r[0][1], r[1][1], r[2][1]], &[r[0][2], r[1][2], r[2][2]]))
}

/// Squared Frobenius distance.
pub fn frobenius_sq<T: Real>(a: &Mat3<T>, b: &Mat3) -> T {
    let mut s = T::from(0.0);
    for i in 0..3 {
        for j in 0..3 {
            let d = a[i][j] - b[i][j];
            s += d * d;
        }
    }
    s
}

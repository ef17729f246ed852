//! Small fixed-size linear algebra for camera calibration.

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];
pub type Vec3 = [f64; 3];

pub fn mat3_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[c][r]))
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat3_inverse(m: &Mat3) -> Option<Mat3> {
    let det = mat3_det(m);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

pub fn rotation(pose: &Mat4) -> Mat3 {
    [0, 1, 2].map(|r| [pose[r][0], pose[r][1], pose[r][2]])
}

pub fn translation(pose: &Mat4) -> Vec3 {
    [pose[0][3], pose[1][3], pose[2][3]]
}

pub fn pose_from(rot: &Mat3, t: Vec3) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        m[r][..3].copy_from_slice(&rot[r]);
        m[r][3] = t[r];
    }
    m[3][3] = 1.0;
    m
}

/// Applies a rigid camera-to-world pose to a camera-frame point.
pub fn to_world(pose: &Mat4, p: Vec3) -> Vec3 {
    let r = mat3_vec(&rotation(pose), p);
    let t = translation(pose);
    [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
}

/// Inverse of [`to_world`] for rigid poses.
pub fn to_camera(pose: &Mat4, p: Vec3) -> Vec3 {
    let t = translation(pose);
    mat3_vec(&mat3_transpose(&rotation(pose)), [p[0] - t[0], p[1] - t[1], p[2] - t[2]])
}

/// True when the rotation block is orthonormal with determinant +1.
pub fn is_rigid(pose: &Mat4, tol: f64) -> bool {
    let r = rotation(pose);
    let rrt = mat3_mul(&r, &mat3_transpose(&r));
    let ortho = (0..3).all(|i| (0..3).all(|j| (rrt[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < tol));
    ortho && (mat3_det(&r) - 1.0).abs() < tol && pose[3] == [0.0, 0.0, 0.0, 1.0]
}

/// `(cos, sin)` of `quarter` right angles, exact.
pub fn quarter_turn(quarter: i32) -> (f64, f64) {
    match quarter.rem_euclid(4) {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        _ => (0.0, -1.0),
    }
}

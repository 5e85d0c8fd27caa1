//! View-dependent color from real spherical harmonics up to degree 3.
//!
//! Basis ordering and signs follow the usual radiance-field convention
//! (real SH with the Condon-Shortley phase), with a `+0.5` offset and clamping
//! to `[0, 1]`.

use crate::geometry::{ShCoefficients, Vec3, SH_COEFFS};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients used by bands `0..=degree`.
pub fn coeffs_for_degree(degree: usize) -> usize {
    (degree.min(MAX_SH_DEGREE) + 1).pow(2)
}

/// Basis values `Y_k(dir)`; entries past `degree` are zero.
pub fn sh_basis(dir: &Vec3, degree: usize) -> [f64; SH_COEFFS] {
    let mut y = [0.0; SH_COEFFS];
    y[0] = SH_C0;
    if degree == 0 {
        return y;
    }
    let (x, yy, z) = (dir.x, dir.y, dir.z);
    y[1] = -SH_C1 * yy;
    y[2] = SH_C1 * z;
    y[3] = -SH_C1 * x;
    if degree == 1 {
        return y;
    }
    let (xx, y2, zz) = (x * x, yy * yy, z * z);
    let (xy, yz, xz) = (x * yy, yy * z, x * z);
    y[4] = SH_C2[0] * xy;
    y[5] = SH_C2[1] * yz;
    y[6] = SH_C2[2] * (2.0 * zz - xx - y2);
    y[7] = SH_C2[3] * xz;
    y[8] = SH_C2[4] * (xx - y2);
    if degree == 2 {
        return y;
    }
    y[9] = SH_C3[0] * yy * (3.0 * xx - y2);
    y[10] = SH_C3[1] * xy * z;
    y[11] = SH_C3[2] * yy * (4.0 * zz - xx - y2);
    y[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * y2);
    y[13] = SH_C3[4] * x * (4.0 * zz - xx - y2);
    y[14] = SH_C3[5] * z * (xx - y2);
    y[15] = SH_C3[6] * x * (xx - 3.0 * y2);
    y
}

/// Color before clamping: `sum_k c_k Y_k(dir) + 0.5`.
pub fn sh_eval_raw(sh: &ShCoefficients, basis: &[f64; SH_COEFFS], degree: usize) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for (coef, y) in sh.iter().zip(basis).take(coeffs_for_degree(degree)) {
        for ch in 0..3 {
            rgb[ch] += coef[ch] * y;
        }
    }
    rgb
}

pub fn sh_eval(sh: &ShCoefficients, dir: &Vec3) -> [f64; 3] {
    sh_eval_degree(sh, dir, MAX_SH_DEGREE)
}

pub fn sh_eval_degree(sh: &ShCoefficients, dir: &Vec3, degree: usize) -> [f64; 3] {
    let basis = sh_basis(dir, degree);
    sh_eval_raw(sh, &basis, degree).map(|c| c.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    // Associated Legendre P_l^m(x) with the Condon-Shortley phase, by recurrence.
    fn legendre(l: usize, m: usize, x: f64) -> f64 {
        let mut pmm = 1.0;
        let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
        if l == m {
            return pmm;
        }
        let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
        if l == m + 1 {
            return pmmp1;
        }
        let mut pll = 0.0;
        for ll in (m + 2)..=l {
            pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
            pmm = pmmp1;
            pmmp1 = pll;
        }
        pll
    }

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    fn real_sh(l: usize, m: i64, dir: &Vec3) -> f64 {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let am = m.unsigned_abs() as usize;
        let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
        let p = legendre(l, am, theta.cos());
        match m.cmp(&0) {
            std::cmp::Ordering::Equal => k * p,
            std::cmp::Ordering::Greater => 2f64.sqrt() * k * (m as f64 * phi).cos() * p,
            std::cmp::Ordering::Less => 2f64.sqrt() * k * (am as f64 * phi).sin() * p,
        }
    }

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn basis_matches_legendre_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let d = random_dir(&mut rng);
            let y = sh_basis(&d, 3);
            let mut k = 0;
            for l in 0..=3usize {
                for m in -(l as i64)..=(l as i64) {
                    let expected = real_sh(l, m, &d);
                    assert!(
                        (y[k] - expected).abs() < 1e-6,
                        "l={l} m={m}: {} vs {expected}",
                        y[k]
                    );
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mid_gray() {
        let sh = [[0.0; 3]; SH_COEFFS];
        assert_eq!(sh_eval(&sh, &Vec3::z()), [0.5; 3]);
    }

    #[test]
    fn band_zero_is_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0] = [0.7, -0.4, 1.1];
        let expected = sh_eval(&sh, &Vec3::x());
        for ch in 0..3 {
            let k = sh[0][ch];
            assert_eq!(expected[ch], (k * SH_C0 + 0.5).clamp(0.0, 1.0));
        }
        for _ in 0..100 {
            assert_eq!(sh_eval(&sh, &random_dir(&mut rng)), expected);
        }
    }

    #[test]
    fn odd_bands_reflect_about_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut sh = [[0.0; 3]; SH_COEFFS];
            for k in (1..4).chain(9..16) {
                sh[k] = [0; 3].map(|_| rng.gen_range(-0.3..0.3));
            }
            let d = random_dir(&mut rng);
            let a = sh_eval_raw(&sh, &sh_basis(&d, 3), 3);
            let b = sh_eval_raw(&sh, &sh_basis(&(-d), 3), 3);
            for ch in 0..3 {
                assert!((a[ch] - 0.5 + (b[ch] - 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degree_truncation() {
        let d = Vec3::new(0.3, -0.4, 0.866).normalize();
        let full = sh_basis(&d, 3);
        for degree in 0..=3 {
            let y = sh_basis(&d, degree);
            let n = coeffs_for_degree(degree);
            assert_eq!(&y[..n], &full[..n]);
            assert!(y[n..].iter().all(|&v| v == 0.0));
        }
    }
}

//! Binary scene checkpoint:
//!
//! ```text
//! "UTRC" | version u32 | count u64 | sh_degree u8 | meta_len u32 | meta (JSON)
//! then per triangle, as f32: 9 vertex coords, 48 SH (coefficient-major,
//! RGB inner), opacity logit, sigma
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{Triangle, Vec3, SH_COEFFS};

use super::{read_file, write_file_atomic, IoError};

pub const MAGIC: &[u8; 4] = b"UTRC";
pub const VERSION: u32 = 1;
pub const SH_DEGREE: u8 = 3;
pub const FLOATS_PER_TRIANGLE: usize = 9 + 3 * SH_COEFFS + 2;

/// Free-form run information stored with the soup.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    /// Training iterations completed.
    pub iteration: usize,
    pub init_opacity: Option<f64>,
    pub init_sigma: Option<f64>,
    pub seed: Option<u64>,
    /// Effective training config, when saved by the trainer.
    pub config: Option<serde_json::Value>,
}

pub fn encode_checkpoint(soup: &[Triangle], meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(21 + meta_json.len() + soup.len() * FLOATS_PER_TRIANGLE * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(soup.len() as u64).to_le_bytes());
    out.push(SH_DEGREE);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for tri in soup {
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for v in &tri.vertices {
            v.iter().for_each(|&c| put(c));
        }
        for c in &tri.sh {
            c.iter().for_each(|&x| put(x));
        }
        put(tri.opacity_logit);
        put(tri.sigma);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IoError::Malformed(format!(
                "truncated checkpoint while reading {what}"
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], IoError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<Triangle>, CheckpointMeta), IoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if &cur.array::<4>("magic")? != MAGIC {
        return Err(IoError::Malformed("bad magic, expected UTRC".into()));
    }
    let version = u32::from_le_bytes(cur.array("version")?);
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(cur.array("count")?);
    let degree = cur.array::<1>("sh degree")?[0];
    if degree != SH_DEGREE {
        return Err(IoError::Malformed(format!(
            "SH degree {degree}, expected {SH_DEGREE}"
        )));
    }
    let meta_len = u32::from_le_bytes(cur.array("metadata length")?) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| IoError::Malformed(format!("metadata: {e}")))?;
    let payload = &bytes[cur.pos..];
    let expected = (count as u128) * (FLOATS_PER_TRIANGLE as u128) * 4;
    if payload.len() as u128 != expected {
        return Err(IoError::Malformed(format!(
            "header says {count} triangles ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let soup = payload
        .chunks_exact(FLOATS_PER_TRIANGLE * 4)
        .enumerate()
        .map(|(i, chunk)| {
            let f: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                return Err(IoError::Malformed(format!(
                    "triangle {i}: field {j} is not finite"
                )));
            }
            let vertices = std::array::from_fn(|j| Vec3::new(f[3 * j], f[3 * j + 1], f[3 * j + 2]));
            let sh = std::array::from_fn(|k| [f[9 + 3 * k], f[10 + 3 * k], f[11 + 3 * k]]);
            Ok(Triangle {
                vertices,
                sh,
                opacity_logit: f[FLOATS_PER_TRIANGLE - 2],
                sigma: f[FLOATS_PER_TRIANGLE - 1],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((soup, meta))
}

pub fn save_checkpoint(
    path: &Path,
    soup: &[Triangle],
    meta: &CheckpointMeta,
) -> Result<(), IoError> {
    write_file_atomic(path, &encode_checkpoint(soup, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<Triangle>, CheckpointMeta), IoError> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_soup(seed: u64, n: usize) -> Vec<Triangle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut t = Triangle::new(
                    [0; 3].map(|_| Vec3::from_fn(|_, _| rng.gen_range(-3.0..3.0))),
                    rng.gen_range(0.01..0.99),
                    rng.gen_range(0.01..4.0),
                );
                for c in t.sh.iter_mut().flatten() {
                    *c = rng.gen_range(-1.0..1.0);
                }
                t.snap_to_f32();
                t
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let soup = random_soup(1, 50);
        let meta = CheckpointMeta {
            iteration: 1234,
            init_opacity: Some(0.28),
            init_sigma: Some(1.0),
            seed: Some(9),
            config: Some(serde_json::json!({"k": 16})),
        };
        let bytes = encode_checkpoint(&soup, &meta);
        assert_eq!(
            bytes.len(),
            4 + 4 + 8 + 1 + 4 + serde_json::to_vec(&meta).unwrap().len() + 50 * 59 * 4
        );
        let (back, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, soup);
        assert_eq!(encode_checkpoint(&back, &m), bytes);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode_checkpoint(&random_soup(2, 3), &CheckpointMeta::default());
        assert_eq!(&bytes[..4], b"UTRC");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes[16], 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let soup = random_soup(3, 2);
        let good = encode_checkpoint(&soup, &CheckpointMeta::default());

        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(IoError::UnsupportedVersion(2))
        ));

        let mut v = good.clone();
        v[0] = b'X';
        assert!(matches!(decode_checkpoint(&v), Err(IoError::Malformed(_))));

        let v = &good[..good.len() - 4];
        assert!(matches!(decode_checkpoint(v), Err(IoError::Malformed(_))));

        let mut v = good.clone();
        let last = v.len() - 4;
        v[last..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_checkpoint(&v).unwrap_err().to_string();
        assert!(err.contains("triangle 1"), "{err}");
    }
}

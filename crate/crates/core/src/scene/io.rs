//! Binary scene file (`.3dbf`) and a JSON debug export.
//!
//! Layout, all little-endian: magic `"3DBF"`, version u32, count u32,
//! embed_dim u32, then per primitive `mean[3] cov[6] opacity rgb[3]
//! embedding[d]` as f64 followed by one origin byte (0 observed, 1 imagined).
//! The covariance stores the upper triangle row by row: xx xy xz yy yz zz.

use std::io::{self, Read, Write};

use serde::Serialize;

use super::{GaussianPrimitive, Origin, SceneBelief};
use crate::geometry::{Mat3, Vec3};

pub const SCENE_MAGIC: &[u8; 4] = b"3DBF";
pub const SCENE_VERSION: u32 = 1;
/// Fixed f64 fields per record before the embedding.
const RECORD_FLOATS: usize = 13;

pub fn write_scene<W: Write>(mut w: W, belief: &SceneBelief) -> io::Result<()> {
    let dim = belief.primitives.first().map_or(0, |p| p.embedding.len());
    if belief.primitives.iter().any(|p| p.embedding.len() != dim) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "mixed embedding dimensions"));
    }
    let count = u32::try_from(belief.primitives.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "too many primitives"))?;
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for p in &belief.primitives {
        let c = &p.covariance;
        let mut vals = Vec::with_capacity(RECORD_FLOATS + dim);
        vals.extend(p.mean.iter().copied());
        vals.extend([c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]]);
        vals.push(p.opacity);
        vals.extend(p.appearance);
        vals.extend(&p.embedding);
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[match p.origin {
            Origin::Observed => 0u8,
            Origin::Imagined => 1u8,
        }])?;
    }
    Ok(())
}

pub fn read_scene<R: Read>(mut r: R) -> io::Result<SceneBelief> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u32s = [0u8; 12];
    r.read_exact(&mut u32s)?;
    let field = |i: usize| u32::from_le_bytes(u32s[i * 4..i * 4 + 4].try_into().unwrap());
    let (version, count, dim) = (field(0), field(1) as usize, field(2) as usize);
    if version != SCENE_VERSION {
        return Err(bad(format!("unsupported scene version {version}")));
    }
    let mut primitives = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; (RECORD_FLOATS + dim) * 8 + 1];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let f: Vec<f64> = buf[..buf.len() - 1]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let origin = match buf[buf.len() - 1] {
            0 => Origin::Observed,
            1 => Origin::Imagined,
            b => return Err(bad(format!("bad origin byte {b}"))),
        };
        let cov = Mat3::new(f[3], f[4], f[5], f[4], f[6], f[7], f[5], f[7], f[8]);
        let prim = GaussianPrimitive::from_stored(
            Vec3::new(f[0], f[1], f[2]),
            cov,
            f[9],
            [f[10], f[11], f[12]],
            f[13..].to_vec(),
            origin,
        )
        .map_err(|e| bad(e.to_string()))?;
        primitives.push(prim);
    }
    Ok(SceneBelief {
        primitives,
        ..SceneBelief::default()
    })
}

#[derive(Serialize)]
struct PrimitiveText<'a> {
    mean: [f64; 3],
    covariance: [f64; 6],
    opacity: f64,
    rgb: [f64; 3],
    embedding: &'a [f64],
    origin: Origin,
}

#[derive(Serialize)]
struct SceneText<'a> {
    step: u64,
    hypothesis_id: u32,
    rng_seed: u64,
    primitives: Vec<PrimitiveText<'a>>,
}

/// Pretty-printed JSON of the whole belief, for inspection.
pub fn scene_to_text(belief: &SceneBelief) -> String {
    let text = SceneText {
        step: belief.step,
        hypothesis_id: belief.hypothesis_id,
        rng_seed: belief.rng_seed,
        primitives: belief
            .primitives
            .iter()
            .map(|p| {
                let c = &p.covariance;
                PrimitiveText {
                    mean: [p.mean.x, p.mean.y, p.mean.z],
                    covariance: [c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]],
                    opacity: p.opacity,
                    rgb: p.appearance,
                    embedding: &p.embedding,
                    origin: p.origin,
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&text).expect("scene text serializes")
}

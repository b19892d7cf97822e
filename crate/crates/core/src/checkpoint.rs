//! Bit-exact binary checkpoints of the full optimization state.
//!
//! Everything needed to resume a run deterministically is serialized:
//! every parameter tensor (exact f64 bits), the per-tensor Adam moments,
//! the estimated trajectory, the keyframe list, and the RNG position.
//! Writes go to a temporary file in the target directory followed by an
//! atomic rename, so a crash never leaves a truncated checkpoint behind.

use crate::error::{Error, Result};
use crate::params::{AdamState, ParamStore};
use crate::pose::CameraPose;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEMSLAM\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    /// Index of the next frame to process.
    pub next_frame: usize,
    /// Estimated pose per processed frame, in frame order.
    pub poses: Vec<CameraPose>,
    /// Frame indices selected as keyframes.
    pub keyframes: Vec<usize>,
    /// ChaCha seed and stream position of the run RNG.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_array<W: Write>(w: &mut W, a: &Array2<f64>) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(a.nrows() as u64)?;
    w.write_u64::<LittleEndian>(a.ncols() as u64)?;
    for v in a.iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let rows = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    if rows.saturating_mul(cols) > (1 << 28) {
        return Err(ck_err(format!("implausible tensor shape {rows}x{cols}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let bits = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        data.push(f64::from_bits(bits));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| ck_err(e.to_string()))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    if len > (1 << 16) {
        return Err(ck_err("implausible string length"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| ck_err(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| ck_err(e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
            w.get_ref().sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.next_frame as u64)?;
        w.write_all(&self.rng_seed)?;
        w.write_u128::<LittleEndian>(self.rng_word_pos)?;

        w.write_u64::<LittleEndian>(self.store.tensors.len() as u64)?;
        for (name, t) in &self.store.tensors {
            write_string(w, name)?;
            write_array(w, t)?;
        }
        w.write_u64::<LittleEndian>(self.store.adam.len() as u64)?;
        for (name, st) in &self.store.adam {
            write_string(w, name)?;
            w.write_u64::<LittleEndian>(st.t)?;
            write_array(w, &st.m)?;
            write_array(w, &st.v)?;
        }
        w.write_u64::<LittleEndian>(self.poses.len() as u64)?;
        for p in &self.poses {
            let q = p.rotation.quaternion();
            for v in [
                p.translation[0],
                p.translation[1],
                p.translation[2],
                q.i,
                q.j,
                q.k,
                q.w,
            ] {
                w.write_u64::<LittleEndian>(v.to_bits())?;
            }
        }
        w.write_u64::<LittleEndian>(self.keyframes.len() as u64)?;
        for &k in &self.keyframes {
            w.write_u64::<LittleEndian>(k as u64)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| ck_err(e.to_string()))?;
        if &magic != MAGIC {
            return Err(ck_err(format!("{}: not a checkpoint file", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        if version != VERSION {
            return Err(ck_err(format!(
                "{}: unsupported checkpoint version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let next_frame = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed).map_err(|e| ck_err(e.to_string()))?;
        let rng_word_pos = r.read_u128::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;

        let mut store = ParamStore::new();
        let n_tensors = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        for _ in 0..n_tensors {
            let name = read_string(&mut r)?;
            let t = read_array(&mut r)?;
            store.tensors.insert(name, t);
        }
        let n_adam = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        for _ in 0..n_adam {
            let name = read_string(&mut r)?;
            let t = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
            let m = read_array(&mut r)?;
            let v = read_array(&mut r)?;
            store.adam.insert(name, AdamState { m, v, t });
        }
        let n_poses = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        let mut poses = Vec::with_capacity(n_poses as usize);
        for _ in 0..n_poses {
            let mut v = [0.0; 7];
            for slot in v.iter_mut() {
                *slot = f64::from_bits(
                    r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?,
                );
            }
            // saved quaternions are already unit; renormalizing here would
            // break the bit-exact resume guarantee
            let rotation = nalgebra::UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
                v[6], v[3], v[4], v[5],
            ));
            poses.push(CameraPose::new(rotation, nalgebra::Vector3::new(v[0], v[1], v[2])));
        }
        let n_kf = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
        let mut keyframes = Vec::with_capacity(n_kf as usize);
        for _ in 0..n_kf {
            keyframes
                .push(r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize);
        }
        Ok(Checkpoint { store, next_frame, poses, keyframes, rng_seed, rng_word_pos })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        // deliberately awkward values: subnormals, negative zero, extremes
        store.insert(
            "a.plane",
            Array2::from_shape_fn((7, 5), |_| rng.gen_range(-1.0..1.0) * 1e-300),
        );
        store.insert("b.weird", ndarray::arr2(&[[-0.0, f64::MIN_POSITIVE, 1e308, -1e-308]]));
        store.adam.insert(
            "a.plane".into(),
            AdamState {
                m: Array2::from_shape_fn((7, 5), |_| rng.gen_range(-1.0..1.0)),
                v: Array2::from_shape_fn((7, 5), |_| rng.gen_range(0.0..1.0)),
                t: 42,
            },
        );
        let poses = (0..4)
            .map(|i| {
                CameraPose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::new(
                        0.1 * i as f64,
                        -0.05,
                        0.2,
                    )),
                    Vector3::new(i as f64, 0.5, -2.0),
                )
            })
            .collect();
        Checkpoint {
            store,
            next_frame: 37,
            poses,
            keyframes: vec![0, 10, 20, 30],
            rng_seed: [7u8; 32],
            rng_word_pos: 123456789012345,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.next_frame, ck.next_frame);
        assert_eq!(back.keyframes, ck.keyframes);
        assert_eq!(back.rng_seed, ck.rng_seed);
        assert_eq!(back.rng_word_pos, ck.rng_word_pos);
        assert_eq!(back.store.checksum(), ck.store.checksum());
        for (name, t) in &ck.store.tensors {
            let b = &back.store.tensors[name];
            assert_eq!(t.dim(), b.dim());
            for (x, y) in t.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {name} not bit-exact");
            }
        }
        for (name, st) in &ck.store.adam {
            let b = &back.store.adam[name];
            assert_eq!(st.t, b.t);
            assert_eq!(st.m, b.m);
            assert_eq!(st.v, b.v);
        }
        for (p, q) in ck.poses.iter().zip(back.poses.iter()) {
            assert_eq!(p.translation, q.translation);
            assert_eq!(p.rotation.quaternion().coords, q.rotation.quaternion().coords);
        }
    }

    #[test]
    fn save_replaces_existing_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let mut ck = sample_checkpoint();
        ck.save(&path).unwrap();
        ck.next_frame = 99;
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.next_frame, 99);
        // no stray temp file
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&cut).is_err());
        let foreign = dir.path().join("foreign.bin");
        std::fs::write(&foreign, b"definitely not a checkpoint").unwrap();
        let err = Checkpoint::load(&foreign).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"));
    }

    #[test]
    fn rejects_future_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rng_state_roundtrips_through_seed_and_word_pos() {
        let mut rng = ChaCha8Rng::from_seed([3u8; 32]);
        let _burn: f64 = rng.gen();
        let _burn: u64 = rng.gen();
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        let expect: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let mut restored = ChaCha8Rng::from_seed(seed);
        restored.set_word_pos(pos);
        let got: [f64; 4] = [restored.gen(), restored.gen(), restored.gen(), restored.gen()];
        assert_eq!(expect, got);
    }
}

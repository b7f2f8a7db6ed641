//! Trajectory datasets and their binary file format.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic       8 bytes "STDIMDAT"
//! version     u32     1
//! env_id      u16 length + UTF-8
//! height      u16
//! width       u16
//! n_vars      u16
//! n_vars × {  name (u16 length + UTF-8), category u8, min u8, max u8 }
//! policy      u16 length + UTF-8
//! epsilon     f64
//! seed        u64
//! workers     u32
//! n_episodes  u32
//! n_episodes × {
//!     id u64, n_frames u32,
//!     timesteps u32 × n_frames,
//!     pixels u8 × n_frames·height·width,
//!     labels u8 × n_frames·n_vars   (frame-major, variable-table order)
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::spriteworld::{Category, VariableSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"STDIMDAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub policy: String,
    pub epsilon: f64,
    pub seed: u64,
    pub workers: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub id: u64,
    pub timesteps: Vec<u32>,
    /// `len × height × width`
    pub pixels: Vec<u8>,
    /// `len × n_vars`
    pub labels: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub env_id: String,
    pub height: usize,
    pub width: usize,
    pub variables: Vec<VariableSpec>,
    pub provenance: Provenance,
    pub episodes: Vec<Episode>,
    /// Flat index of each episode's first frame.
    offsets: Vec<usize>,
}

impl TrajectoryDataset {
    pub fn new(
        env_id: impl Into<String>,
        height: usize,
        width: usize,
        variables: Vec<VariableSpec>,
        provenance: Provenance,
        episodes: Vec<Episode>,
    ) -> Result<Self> {
        let mut ds = Self {
            env_id: env_id.into(),
            height,
            width,
            variables,
            provenance,
            episodes,
            offsets: Vec::new(),
        };
        ds.validate()?;
        ds.offsets = ds
            .episodes
            .iter()
            .scan(0, |acc, e| {
                let start = *acc;
                *acc += e.len();
                Some(start)
            })
            .collect();
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("dataset", d));
        if self.height == 0 || self.width == 0 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad(format!("frame size {}×{}", self.height, self.width));
        }
        for (i, v) in self.variables.iter().enumerate() {
            if self.variables[..i].iter().any(|w| w.name == v.name) {
                return bad(format!("duplicate variable `{}`", v.name));
            }
            if v.min > v.max {
                return bad(format!("variable `{}` has min > max", v.name));
            }
        }
        let nv = self.variables.len();
        let px = self.height * self.width;
        for e in &self.episodes {
            let n = e.len();
            if e.pixels.len() != n * px || e.labels.len() != n * nv {
                return bad(format!("episode {} has inconsistent block sizes", e.id));
            }
            if e.timesteps.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!("episode {} timesteps are not increasing", e.id));
            }
            if nv == 0 {
                continue;
            }
            for row in e.labels.chunks_exact(nv) {
                for (v, &l) in self.variables.iter().zip(row) {
                    if l < v.min || l > v.max {
                        return bad(format!("label {l} of `{}` outside {}..={}", v.name, v.min, v.max));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// `(episode index, position within the episode)` of a flat frame index.
    pub fn locate(&self, frame: usize) -> (usize, usize) {
        let e = self.offsets.partition_point(|&o| o <= frame) - 1;
        (e, frame - self.offsets[e])
    }

    pub fn episode_offset(&self, episode: usize) -> usize {
        self.offsets[episode]
    }

    pub fn pixels(&self, frame: usize) -> &[u8] {
        let (e, i) = self.locate(frame);
        let px = self.frame_len();
        &self.episodes[e].pixels[i * px..(i + 1) * px]
    }

    pub fn labels(&self, frame: usize) -> &[u8] {
        let (e, i) = self.locate(frame);
        let nv = self.num_variables();
        &self.episodes[e].labels[i * nv..(i + 1) * nv]
    }

    /// Label of variable `var` for every frame, in flat order.
    pub fn label_column(&self, var: usize) -> Vec<u8> {
        let nv = self.num_variables();
        self.episodes
            .iter()
            .flat_map(|e| e.labels.chunks_exact(nv).map(move |row| row[var]))
            .collect()
    }

    /// Frames scaled to `[0, 1]` as a `[n, 1, H, W]` tensor.
    pub fn frames_tensor<T: Scalar>(&self, frames: &[usize]) -> Result<Tensor<T>> {
        if frames.is_empty() {
            return Err(Error::InsufficientData("no frames selected".into()));
        }
        let scale = T::of(1.0 / 255.0);
        let mut data = Vec::with_capacity(frames.len() * self.frame_len());
        for &f in frames {
            if f >= self.num_frames() {
                return Err(Error::Index {
                    op: "frames_tensor",
                    index: f,
                    bound: self.num_frames(),
                });
            }
            data.extend(self.pixels(f).iter().map(|&p| T::of(p as f64) * scale));
        }
        Tensor::new(&[frames.len(), 1, self.height, self.width], data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.env_id)?;
        w.write_all(&(self.height as u16).to_le_bytes())?;
        w.write_all(&(self.width as u16).to_le_bytes())?;
        w.write_all(&(self.variables.len() as u16).to_le_bytes())?;
        for v in &self.variables {
            write_str(w, &v.name)?;
            w.write_all(&[v.category.code(), v.min, v.max])?;
        }
        let p = &self.provenance;
        write_str(w, &p.policy)?;
        w.write_all(&p.epsilon.to_le_bytes())?;
        w.write_all(&p.seed.to_le_bytes())?;
        w.write_all(&p.workers.to_le_bytes())?;
        w.write_all(&(self.episodes.len() as u32).to_le_bytes())?;
        for e in &self.episodes {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&(e.len() as u32).to_le_bytes())?;
            let ts: Vec<u8> = e.timesteps.iter().flat_map(|t| t.to_le_bytes()).collect();
            w.write_all(&ts)?;
            w.write_all(&e.pixels)?;
            w.write_all(&e.labels)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Version {
                what: "dataset",
                found: version,
                expected: VERSION,
            });
        }
        let env_id = read_str(r)?;
        let height = u16::from_le_bytes(read_array(r)?) as usize;
        let width = u16::from_le_bytes(read_array(r)?) as usize;
        let n_vars = u16::from_le_bytes(read_array(r)?) as usize;
        let mut variables = Vec::with_capacity(n_vars);
        for _ in 0..n_vars {
            let name = read_str(r)?;
            let [code, min, max] = read_array(r)?;
            let category =
                Category::from_code(code).ok_or_else(|| Error::format("dataset", format!("category code {code}")))?;
            variables.push(VariableSpec {
                name,
                category,
                min,
                max,
            });
        }
        let policy = read_str(r)?;
        let epsilon = f64::from_le_bytes(read_array(r)?);
        let seed = u64::from_le_bytes(read_array(r)?);
        let workers = u32::from_le_bytes(read_array(r)?);
        let n_episodes = u32::from_le_bytes(read_array(r)?) as usize;
        let mut episodes = Vec::with_capacity(n_episodes.min(1 << 16));
        for _ in 0..n_episodes {
            let id = u64::from_le_bytes(read_array(r)?);
            let n = u32::from_le_bytes(read_array(r)?) as usize;
            let timesteps = read_vec(r, n * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let pixels = read_vec(r, n * height * width)?;
            let labels = read_vec(r, n * n_vars)?;
            episodes.push(Episode {
                id,
                timesteps,
                pixels,
                labels,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("dataset", "trailing bytes after last episode"));
        }
        Self::new(
            env_id,
            height,
            width,
            variables,
            Provenance {
                policy,
                epsilon,
                seed,
                workers,
            },
            episodes,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let b = s.as_bytes();
    if b.len() > u16::MAX as usize {
        return Err(Error::format("dataset", "string field too long"));
    }
    w.write_all(&(b.len() as u16).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("dataset", "truncated file"),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(len as u64).read_to_end(&mut v)?;
    if v.len() != len {
        return Err(Error::format("dataset", "truncated file"));
    }
    Ok(v)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    String::from_utf8(read_vec(r, len)?).map_err(|_| Error::format("dataset", "string field is not UTF-8"))
}

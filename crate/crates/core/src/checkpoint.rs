//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ERL2"  u32 version  u32 section_count
//! section: u32 name_len, name (UTF-8), u8 kind, body
//!   kind 0, network: u32 layers, then per layer
//!           u32 out, u32 in, u8 activation, out·in f64 weights (row-major), out f64 bias
//!   kind 1, policy table: u32 count, u32 rows, u32 cols, count·rows·cols f64 (row-major)
//!   kind 2, text: u32 len, UTF-8 bytes
//! ```
//!
//! Floats are stored as raw bit patterns, so a round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::nn::{Activation, Dense, Mlp};
use crate::policy::{PolicyRepresentation, SharedRepresentation};
use crate::value::{Critic, PeVfa};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ERL2";
pub const VERSION: u32 = 1;

const KIND_NETWORK: u8 = 0;
const KIND_POLICIES: u8 = 1;
const KIND_TEXT: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Network(Mlp),
    Policies(Vec<PolicyRepresentation>),
    Text(String),
}

/// An ordered set of named sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    sections: Vec<(String, Section)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, section: Section) {
        self.sections.push((name.into(), section));
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("missing section '{name}'")))
    }

    pub fn network(&self, name: &str) -> Result<&Mlp> {
        match self.get(name)? {
            Section::Network(m) => Ok(m),
            _ => Err(Error::Checkpoint(format!(
                "section '{name}' is not a network"
            ))),
        }
    }

    pub fn policies(&self, name: &str) -> Result<&[PolicyRepresentation]> {
        match self.get(name)? {
            Section::Policies(p) => Ok(p),
            _ => Err(Error::Checkpoint(format!(
                "section '{name}' is not a policy table"
            ))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Section::Text(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("section '{name}' is not text"))),
        }
    }

    /// Networks named `prefix.0`, `prefix.1`, … in order.
    pub fn network_list(&self, prefix: &str) -> Vec<&Mlp> {
        (0..)
            .map_while(|i| match self.get(&format!("{prefix}.{i}")) {
                Ok(Section::Network(m)) => Some(m),
                _ => None,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.sections.len())?;
        for (name, section) in &self.sections {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Network(m) => {
                    out.push(KIND_NETWORK);
                    put_u32(&mut out, m.layers().len())?;
                    for l in m.layers() {
                        put_u32(&mut out, l.outputs())?;
                        put_u32(&mut out, l.inputs())?;
                        out.push(l.activation().tag());
                        put_f64s(&mut out, l.weight().iter());
                        put_f64s(&mut out, l.bias().iter());
                    }
                }
                Section::Policies(ps) => {
                    out.push(KIND_POLICIES);
                    let (rows, cols) = ps.first().map_or((0, 0), |p| p.matrix().dim());
                    if ps.iter().any(|p| p.matrix().dim() != (rows, cols)) {
                        return Err(Error::Checkpoint(format!(
                            "policy table '{name}' has mixed shapes"
                        )));
                    }
                    put_u32(&mut out, ps.len())?;
                    put_u32(&mut out, rows)?;
                    put_u32(&mut out, cols)?;
                    for p in ps {
                        put_f64s(&mut out, p.matrix().iter());
                    }
                }
                Section::Text(t) => {
                    out.push(KIND_TEXT);
                    put_u32(&mut out, t.len())?;
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        let mut seen = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = r.string(len)?;
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate section '{name}'")));
            }
            let section = match r.u8()? {
                KIND_NETWORK => {
                    let n = r.u32()?;
                    let mut layers = Vec::with_capacity(n.min(64));
                    for _ in 0..n {
                        let (o, i) = (r.u32()?, r.u32()?);
                        let act = Activation::from_tag(r.u8()?)
                            .ok_or_else(|| Error::Checkpoint("unknown activation tag".into()))?;
                        let w = r.f64s(
                            o.checked_mul(i)
                                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                        )?;
                        let b = r.f64s(o)?;
                        let w = Array2::from_shape_vec((o, i), w)
                            .map_err(|e| Error::Checkpoint(e.to_string()))?;
                        layers.push(Dense::new(w, Array1::from(b), act).map_err(corrupt)?);
                    }
                    Section::Network(Mlp::new(layers).map_err(corrupt)?)
                }
                KIND_POLICIES => {
                    let (n, rows, cols) = (r.u32()?, r.u32()?, r.u32()?);
                    let mut ps = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        let v = r.f64s(
                            rows.checked_mul(cols)
                                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                        )?;
                        let m = Array2::from_shape_vec((rows, cols), v)
                            .map_err(|e| Error::Checkpoint(e.to_string()))?;
                        ps.push(PolicyRepresentation::new(m).map_err(corrupt)?);
                    }
                    Section::Policies(ps)
                }
                KIND_TEXT => {
                    let len = r.u32()?;
                    Section::Text(r.string(len)?)
                }
                other => return Err(Error::Checkpoint(format!("unknown section kind {other}"))),
            };
            sections.push((name, section));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Archive { sections })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Everything a finished (or aborted) run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub config: String,
    pub encoder: SharedRepresentation,
    pub rl_policy: PolicyRepresentation,
    pub population: Vec<PolicyRepresentation>,
    pub champion: PolicyRepresentation,
    pub critic: Critic,
    pub pevfa: PeVfa,
}

impl RunCheckpoint {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push("config", Section::Text(self.config.clone()));
        a.push("encoder", Section::Network(self.encoder.encoder().clone()));
        a.push("rl_policy", Section::Policies(vec![self.rl_policy.clone()]));
        a.push("population", Section::Policies(self.population.clone()));
        a.push("champion", Section::Policies(vec![self.champion.clone()]));
        for (i, h) in self.critic.heads().iter().enumerate() {
            a.push(format!("critic.{i}"), Section::Network(h.clone()));
        }
        a.push(
            "pevfa.encoder",
            Section::Network(self.pevfa.encoder().clone()),
        );
        for (i, h) in self.pevfa.heads().iter().enumerate() {
            a.push(format!("pevfa.head.{i}"), Section::Network(h.clone()));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let single = |name: &str| -> Result<PolicyRepresentation> {
            match a.policies(name)? {
                [p] => Ok(p.clone()),
                ps => Err(Error::Checkpoint(format!(
                    "'{name}' holds {} policies, expected 1",
                    ps.len()
                ))),
            }
        };
        let encoder = SharedRepresentation::new(a.network("encoder")?.clone()).map_err(corrupt)?;
        let state_dim = encoder.state_dim();
        let rl_policy = single("rl_policy")?;
        let action_dim = rl_policy.action_dim();
        let critic = Critic::from_heads(
            state_dim,
            action_dim,
            a.network_list("critic").into_iter().cloned().collect(),
        )
        .map_err(corrupt)?;
        let pevfa = PeVfa::from_parts(
            state_dim,
            action_dim,
            a.network("pevfa.encoder")?.clone(),
            a.network_list("pevfa.head").into_iter().cloned().collect(),
        )
        .map_err(corrupt)?;
        let cp = RunCheckpoint {
            config: a.text("config")?.to_string(),
            encoder,
            rl_policy,
            population: a.policies("population")?.to_vec(),
            champion: single("champion")?,
            critic,
            pevfa,
        };
        let d = cp.encoder.feature_dim();
        for p in cp.population.iter().chain([&cp.rl_policy, &cp.champion]) {
            if p.feature_dim() != d || p.action_dim() != action_dim {
                return Err(Error::Checkpoint(
                    "policy shape does not match the encoder".into(),
                ));
            }
        }
        Ok(cp)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameters;
    use crate::policy::{policy_forward, ActionSpec};
    use crate::value::PeVfaShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> RunCheckpoint {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let encoder = SharedRepresentation::init(4, &[6, 5], &mut r).unwrap();
        let pevfa = PeVfa::init(
            &PeVfaShape {
                state_dim: 4,
                action_dim: 2,
                feature_dim: 5,
                encoder_widths: vec![7, 3],
                head_hidden: vec![6],
                twin: true,
            },
            &mut r,
        )
        .unwrap();
        let mut champion = PolicyRepresentation::init(5, 2, &mut r);
        champion.matrix_mut()[[0, 0]] = -0.0;
        champion.matrix_mut()[[1, 1]] = f64::MIN_POSITIVE / 4.0;
        RunCheckpoint {
            config: "env = pointmass\n".into(),
            rl_policy: PolicyRepresentation::init(5, 2, &mut r),
            population: (0..3)
                .map(|_| PolicyRepresentation::init(5, 2, &mut r))
                .collect(),
            champion,
            critic: Critic::init(4, 2, &[6], true, &mut r),
            encoder,
            pevfa,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cp = sample();
        let bytes = cp.to_archive().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ERL2");
        let back = RunCheckpoint::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(
            back.champion
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            cp.champion
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert_eq!(back.encoder.checksum(), cp.encoder.checksum());
        assert_eq!(back.critic.checksum(), cp.critic.checksum());
        assert_eq!(back.pevfa.checksum(), cp.pevfa.checksum());
        assert_eq!(back, cp);
        assert_eq!(back.to_archive().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn reloaded_policy_acts_identically() {
        let cp = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.erl2");
        cp.write(&path).unwrap();
        let back = RunCheckpoint::read(&path).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let states = Array2::from_shape_fn((64, 4), |_| r.random_range(-1.0..1.0));
        let spec = ActionSpec::symmetric(2, 1.0);
        let a = policy_forward(&cp.encoder, &cp.champion, &spec, states.view()).unwrap();
        let b = policy_forward(&back.encoder, &back.champion, &spec, states.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_archive().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Archive::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Archive::from_bytes(&long),
            Err(Error::Checkpoint(_))
        ));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(
            Archive::from_bytes(&version),
            Err(Error::Checkpoint(_))
        ));
        let missing = Archive::new().to_bytes().unwrap();
        assert!(RunCheckpoint::from_archive(&Archive::from_bytes(&missing).unwrap()).is_err());
    }
}

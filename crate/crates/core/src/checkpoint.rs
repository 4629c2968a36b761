//! Versioned binary checkpoints.
//!
//! Layout: magic `GFDMCKPT`, u32 version, u32 data dimension, f64 H, u8 schedule code,
//! then tagged sections `[tag: 4 bytes][len: u64][payload]` until end of file.
//! Readers skip unknown tags. All numbers are little-endian; scalars are stored as f64 bits.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::datasets::Standardizer;
use crate::error::{Error, Result};
use crate::grid::{SpaceGrid, SpaceGridDoc};
use crate::nn::{Dense, ScoreNet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::{Schedule, ScheduleKind};
use crate::score::TrainConfig;
use crate::tables::{KernelTables, TableSpec};

pub const MAGIC: &[u8; 8] = b"GFDMCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the tables and sample from a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub dim: usize,
    pub schedule: Schedule<T>,
    pub grid: SpaceGrid<T>,
    pub table_spec: TableSpec,
    pub tables_hash: [u8; 32],
    pub train: TrainConfig,
    /// Free-form run description (the CLI stores its config text here).
    pub run_config: String,
    pub net: ScoreNet<T>,
    pub ema: ScoreNet<T>,
    pub standardizer: Standardizer<T>,
    pub rng: Rng,
    pub steps_done: u64,
    pub final_loss: Option<T>,
}

/// SHA-256 over every stored table array.
pub fn tables_hash<T: Scalar>(tables: &KernelTables<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut put = |v: &[T]| v.iter().for_each(|x| h.update(x.f64().to_le_bytes()));
    put(&tables.times);
    put(&tables.c_vals);
    put(&tables.sigma2);
    for group in [
        &tables.sigma2_i,
        &tables.tau2_i,
        &tables.tau2_tilde_i,
        &tables.yz_i,
        &tables.xcov_i,
        &tables.xzcov_i,
        &tables.xy_total,
        &tables.xz_total,
        &tables.rho_i,
    ] {
        group.iter().for_each(|row| put(row));
    }
    put(&tables.g_inner);
    h.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn vec<T: Scalar>(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(x.f64()));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend(v);
    }
    fn section(&mut self, tag: &[u8; 4], payload: Buf) {
        self.0.extend(tag);
        self.u64(payload.0.len() as u64);
        self.0.extend(payload.0);
    }
}

struct Cur<'a> {
    data: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

impl<'a> Cur<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| corrupt("length"))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.usize()?;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(corrupt("vector length"));
        }
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn put_net<T: Scalar>(net: &ScoreNet<T>) -> Buf {
    let mut b = Buf::default();
    b.u64(net.dim as u64);
    b.vec(net.freqs.as_slice().expect("contiguous"));
    b.u64(net.layers.len() as u64);
    for l in &net.layers {
        b.u64(l.w.nrows() as u64);
        b.u64(l.w.ncols() as u64);
        b.vec(&l.w.iter().copied().collect::<Vec<_>>());
        b.vec(l.b.as_slice().expect("contiguous"));
    }
    b
}

fn get_net<T: Scalar>(c: &mut Cur) -> Result<ScoreNet<T>> {
    let dim = c.usize()?;
    let freqs = Array1::from(c.vec::<T>()?);
    let n_layers = c.usize()?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let (rows, cols) = (c.usize()?, c.usize()?);
        let w = Array2::from_shape_vec((rows, cols), c.vec::<T>()?).map_err(|_| corrupt("layer shape"))?;
        let b = Array1::from(c.vec::<T>()?);
        if b.len() != cols {
            return Err(corrupt("bias length"));
        }
        layers.push(Dense { w, b });
    }
    Ok(ScoreNet { dim, freqs, layers })
}

fn train_text(cfg: &TrainConfig) -> String {
    format!(
        "batch_size = {}\nsteps = {}\nlr = {:?}\nema_decay = {:?}\nseed = {}\neps_t = {:?}\nlambda_kind = \"{}\"\n",
        cfg.batch_size, cfg.steps, cfg.lr, cfg.ema_decay, cfg.seed, cfg.eps_t, cfg.lambda_kind
    )
}

fn parse_train(text: &str) -> Result<TrainConfig> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        batch_size: usize,
        steps: usize,
        lr: f64,
        ema_decay: f64,
        seed: u64,
        eps_t: f64,
        lambda_kind: String,
    }
    let d: Doc = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("train section: {e}")))?;
    Ok(TrainConfig {
        batch_size: d.batch_size,
        steps: d.steps,
        lr: d.lr,
        ema_decay: d.ema_decay,
        seed: d.seed,
        eps_t: d.eps_t,
        lambda_kind: d.lambda_kind.parse()?,
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Buf::default();
        out.0.extend(MAGIC);
        out.u32(VERSION);
        out.u32(self.dim as u32);
        out.f64(self.grid.hurst.value().f64());
        out.u8(self.schedule.kind.code());

        let s = &self.schedule;
        let mut b = Buf::default();
        b.u8(s.kind.code());
        for v in [s.sigma_min, s.sigma_max, s.beta_min, s.beta_max, s.horizon, s.norm_factor] {
            b.f64(v.f64());
        }
        out.section(b"SCHD", b);

        let doc = self.grid.to_doc();
        let mut b = Buf::default();
        b.f64(doc.h);
        b.u64(doc.m as u64);
        b.f64(doc.r);
        for v in [&doc.eta, &doc.x, &doc.q_raw, &doc.q] {
            b.f64s(v);
        }
        b.f64(doc.rescale_a);
        b.f64(doc.horizon_t);
        out.section(b"GRID", b);

        let mut b = Buf::default();
        b.u64(self.table_spec.inner_steps as u64);
        b.u64(self.table_spec.output_steps as u64);
        b.0.extend(self.tables_hash);
        out.section(b"TABL", b);

        let mut b = Buf::default();
        b.bytes(train_text(&self.train).as_bytes());
        b.bytes(self.run_config.as_bytes());
        out.section(b"CONF", b);

        out.section(b"NETW", put_net(&self.net));
        out.section(b"NEMA", put_net(&self.ema));

        let mut b = Buf::default();
        b.vec(&self.standardizer.mean);
        b.vec(&self.standardizer.std);
        out.section(b"STDZ", b);

        let mut b = Buf::default();
        b.0.extend(self.rng.get_seed());
        b.u64(self.rng.get_stream());
        b.0.extend(self.rng.get_word_pos().to_le_bytes());
        out.section(b"RNGS", b);

        let mut b = Buf::default();
        b.u64(self.steps_done);
        b.u8(u8::from(self.final_loss.is_some()));
        b.f64(self.final_loss.map_or(0.0, |v| v.f64()));
        out.section(b"LOSS", b);
        out.0
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut c = Cur::new(data);
        if c.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let dim = c.u32()? as usize;
        let h = c.f64()?;
        let kind_code = c.u8()?;

        let (mut schedule, mut grid, mut tabl, mut conf) = (None, None, None, None);
        let (mut net, mut ema, mut stdz, mut rng, mut loss) = (None, None, None, None, None);
        while !c.done() {
            let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
            let len = c.usize()?;
            let mut p = Cur::new(c.take(len)?);
            match &tag {
                b"SCHD" => {
                    let kind = ScheduleKind::from_code(p.u8()?).ok_or_else(|| corrupt("schedule kind"))?;
                    let mut v = [0.0; 6];
                    for x in &mut v {
                        *x = p.f64()?;
                    }
                    schedule = Some(Schedule {
                        kind,
                        sigma_min: T::of(v[0]),
                        sigma_max: T::of(v[1]),
                        beta_min: T::of(v[2]),
                        beta_max: T::of(v[3]),
                        horizon: T::of(v[4]),
                        norm_factor: T::of(v[5]),
                    });
                }
                b"GRID" => {
                    let (h, m, r) = (p.f64()?, p.usize()?, p.f64()?);
                    let (eta, x, q_raw, q) = (p.vec()?, p.vec()?, p.vec()?, p.vec()?);
                    let doc = SpaceGridDoc { h, m, r, eta, x, q_raw, q, rescale_a: p.f64()?, horizon_t: p.f64()? };
                    grid = Some(SpaceGrid::from_doc(&doc)?);
                }
                b"TABL" => {
                    let spec = TableSpec { inner_steps: p.usize()?, output_steps: p.usize()? };
                    let hash: [u8; 32] = p.take(32)?.try_into().unwrap();
                    tabl = Some((spec, hash));
                }
                b"CONF" => {
                    let train = parse_train(std::str::from_utf8(p.bytes()?).map_err(|_| corrupt("utf-8"))?)?;
                    let run = String::from_utf8(p.bytes()?.to_vec()).map_err(|_| corrupt("utf-8"))?;
                    conf = Some((train, run));
                }
                b"NETW" => net = Some(get_net(&mut p)?),
                b"NEMA" => ema = Some(get_net(&mut p)?),
                b"STDZ" => stdz = Some(Standardizer { mean: p.vec()?, std: p.vec()? }),
                b"RNGS" => {
                    use rand::SeedableRng;
                    let seed: [u8; 32] = p.take(32)?.try_into().unwrap();
                    let stream = p.u64()?;
                    let pos = u128::from_le_bytes(p.take(16)?.try_into().unwrap());
                    let mut r = Rng::from_seed(seed);
                    r.set_stream(stream);
                    r.set_word_pos(pos);
                    rng = Some(r);
                }
                b"LOSS" => {
                    let steps = p.u64()?;
                    let has = p.u8()? != 0;
                    let v = p.f64()?;
                    loss = Some((steps, has.then(|| T::of(v))));
                }
                _ => log::debug!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(&tag)),
            }
        }
        let missing = |name: &str| Error::Checkpoint(format!("missing section {name}"));
        let schedule = schedule.ok_or_else(|| missing("SCHD"))?;
        let grid: SpaceGrid<T> = grid.ok_or_else(|| missing("GRID"))?;
        let (table_spec, tables_hash) = tabl.ok_or_else(|| missing("TABL"))?;
        let (train, run_config) = conf.ok_or_else(|| missing("CONF"))?;
        let (steps_done, final_loss) = loss.ok_or_else(|| missing("LOSS"))?;
        if grid.hurst.value().f64() != h || schedule.kind.code() != kind_code {
            return Err(Error::Checkpoint("header disagrees with the grid or schedule section".into()));
        }
        let ckpt = Self {
            dim,
            schedule,
            grid,
            table_spec,
            tables_hash,
            train,
            run_config,
            net: net.ok_or_else(|| missing("NETW"))?,
            ema: ema.ok_or_else(|| missing("NEMA"))?,
            standardizer: stdz.ok_or_else(|| missing("STDZ"))?,
            rng: rng.ok_or_else(|| missing("RNGS"))?,
            steps_done,
            final_loss,
        };
        if ckpt.net.dim != dim || ckpt.ema.dim != dim || ckpt.standardizer.mean.len() != dim {
            return Err(Error::Checkpoint("section dimensions disagree with the header".into()));
        }
        Ok(ckpt)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    /// Rebuilds the kernel tables and checks them against the stored hash.
    pub fn rebuild_tables(&self) -> Result<KernelTables<T>> {
        let tables = KernelTables::build(&self.schedule, &self.grid, self.table_spec)?;
        if tables_hash(&tables) != self.tables_hash {
            return Err(Error::Checkpoint("rebuilt kernel tables do not match the stored hash".into()));
        }
        Ok(tables)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::HurstIndex;
    use crate::nn::NetConfig;
    use crate::rng::substream;
    use rand::Rng as _;

    fn sample_checkpoint() -> Checkpoint<f64> {
        let grid = SpaceGrid::build(HurstIndex::new(0.25).unwrap(), 4, 1.35, 1.0).unwrap();
        let schedule = Schedule::new(ScheduleKind::Fvp);
        let spec = TableSpec { inner_steps: 1000, output_steps: 100 };
        let tables = KernelTables::build(&schedule, &grid, spec).unwrap();
        let cfg = NetConfig { dim: 2, hidden: vec![5, 3], n_freq: 2, freq_scale: 16.0 };
        let net = ScoreNet::new(&cfg, &mut substream(1, 0));
        let mut rng = substream(1, 1);
        let _: u64 = rng.random();
        Checkpoint {
            dim: 2,
            schedule,
            grid,
            table_spec: spec,
            tables_hash: tables_hash(&tables),
            train: TrainConfig::default(),
            run_config: "H = 0.25\n".into(),
            ema: net.zeroed(),
            net,
            standardizer: Standardizer { mean: vec![0.1, -0.2], std: vec![1.5, 0.7] },
            rng,
            steps_done: 3,
            final_loss: Some(0.123456789),
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample_checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.rebuild_tables().is_ok());
    }

    #[test]
    fn unknown_sections_are_skipped() {
        let c = sample_checkpoint();
        let mut bytes = c.to_bytes();
        bytes.extend(b"XTRA");
        bytes.extend(5u64.to_le_bytes());
        bytes.extend(b"hello");
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn version_mismatch_and_truncation_fail() {
        let mut bytes = sample_checkpoint().to_bytes();
        let err = Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        assert!(Checkpoint::<f64>::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn tampered_tables_hash_is_detected() {
        let mut c = sample_checkpoint();
        c.tables_hash[0] ^= 1;
        assert!(c.rebuild_tables().is_err());
    }
}

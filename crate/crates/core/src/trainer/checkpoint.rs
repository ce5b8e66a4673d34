//! Binary checkpoint container: magic `SCFG`, a format version, then named
//! chunks, each `name[4] | len u64 | payload | crc32 u32`, little endian.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{anchor_param_count, Moments, TrainState};
use crate::config::RunConfig;
use crate::decoders::{DecoderSet, Mlp};
use crate::error::{Error, Result};
use crate::scaffold::{Anchor, AnchorGrid, RefinementAccumulator, VoxelKey, VoxelStat};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SCFG";
const CHUNKS: [&[u8; 4]; 7] = [
    b"CONF", b"ANCH", b"DECO", b"MOMT", b"RNG ", b"STAT", b"ACCU",
];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("{} is truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(Error::Integrity(format!(
                "{} declares more data than it holds",
                self.what
            )));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn fill(&mut self, out: &mut [f64]) -> Result<()> {
        out.iter_mut().try_for_each(|v| {
            *v = self.f64()?;
            Ok(())
        })
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!(
                "{} has trailing bytes",
                self.what
            )));
        }
        Ok(())
    }
}

fn moments(w: &mut Writer, m: &Moments) {
    w.f64s(&m.m);
    w.f64s(&m.v);
}

fn read_moments(r: &mut Reader) -> Result<Moments> {
    Ok(Moments {
        m: r.f64s()?,
        v: r.f64s()?,
    })
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut chunks: Vec<Writer> = Vec::new();

    let mut w = Writer::default();
    w.bytes(state.config.to_toml().as_bytes());
    chunks.push(w);

    let mut w = Writer::default();
    let k = state.decoders.k;
    w.f64(state.grid.voxel_size);
    w.u64(k as u64);
    w.u64(state.grid.len() as u64);
    for a in &state.grid.anchors {
        a.position.iter().for_each(|v| w.f64(*v));
        a.feature.iter().for_each(|v| w.f64(*v));
        a.log_offset_scale.iter().for_each(|v| w.f64(*v));
        a.log_base_scale.iter().for_each(|v| w.f64(*v));
        a.offsets.as_flattened().iter().for_each(|v| w.f64(*v));
        w.u32(a.level);
    }
    chunks.push(w);

    let mut w = Writer::default();
    w.u64(k as u64);
    for net in &state.decoders.nets {
        w.u64(net.in_dim as u64);
        w.u64(net.out_dim as u64);
        w.f64s(&net.params);
    }
    chunks.push(w);

    let mut w = Writer::default();
    moments(&mut w, &state.anchor_moments);
    state
        .decoder_moments
        .iter()
        .for_each(|m| moments(&mut w, m));
    chunks.push(w);

    let mut w = Writer::default();
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    chunks.push(w);

    let mut w = Writer::default();
    w.u64(state.iteration);
    w.u64(state.skipped_updates);
    w.u32(state.white_scene as u32);
    w.u64(state.view_queue.len() as u64);
    state.view_queue.iter().for_each(|v| w.u64(*v as u64));
    chunks.push(w);

    let mut w = Writer::default();
    let acc = &state.accumulator;
    w.f64s(&acc.level_sizes);
    for level in &acc.voxels {
        w.u64(level.len() as u64);
        for (key, stat) in level {
            key.0.iter().for_each(|c| w.i64(*c));
            w.f64(stat.grad_sum);
            w.u64(stat.count);
        }
    }
    w.f64s(&acc.opacity_sum);
    w.u64(acc.visits.len() as u64);
    acc.visits.iter().for_each(|v| w.u64(*v));
    chunks.push(w);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
    for (name, chunk) in CHUNKS.iter().zip(chunks) {
        out.extend_from_slice(*name);
        out.extend_from_slice(&(chunk.0.len() as u64).to_le_bytes());
        out.extend_from_slice(&chunk.0);
        out.extend_from_slice(&crc32fast::hash(&chunk.0).to_le_bytes());
    }
    out
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)
        .map_err(|_| Error::Integrity("file is too short to be a checkpoint".into()))?
        != MAGIC
    {
        return Err(Error::Integrity(
            "missing SCFG magic; not a checkpoint".into(),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != CHUNKS.len() {
        return Err(Error::Integrity(format!(
            "expected {} chunks, found {count}",
            CHUNKS.len()
        )));
    }
    let mut payloads = Vec::with_capacity(count);
    for name in CHUNKS {
        let got = r.take(4)?;
        if got != name {
            return Err(Error::Integrity(format!(
                "expected chunk {:?}, found {:?}",
                String::from_utf8_lossy(name),
                String::from_utf8_lossy(got)
            )));
        }
        let len = r.len(1)?;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        if crc != crc32fast::hash(payload) {
            return Err(Error::Integrity(format!(
                "checksum mismatch in chunk {:?}",
                String::from_utf8_lossy(name)
            )));
        }
        payloads.push(payload);
    }
    r.finish()?;

    let mut c = Reader::new(payloads[0], "config chunk");
    let text = std::str::from_utf8(c.bytes()?)
        .map_err(|_| Error::Integrity("config chunk is not UTF-8".into()))?;
    c.finish()?;
    let config = RunConfig::from_toml_str(text, "checkpoint config")?;

    let mut c = Reader::new(payloads[1], "anchor chunk");
    let voxel_size = c.f64()?;
    let k = c.u64()? as usize;
    let n = c.len(8 * anchor_param_count(k))?;
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pos = [0.0; 3];
        c.fill(&mut pos)?;
        let mut a = Anchor::new(Vector3::from(pos), k, 1.0, 1);
        c.fill(&mut a.feature)?;
        c.fill(&mut a.log_offset_scale)?;
        c.fill(&mut a.log_base_scale)?;
        c.fill(a.offsets.as_flattened_mut())?;
        a.level = c.u32()?;
        anchors.push(a);
    }
    c.finish()?;
    let grid = AnchorGrid::from_anchors(anchors, voxel_size)
        .map_err(|e| Error::Integrity(e.to_string()))?;

    let mut c = Reader::new(payloads[2], "decoder chunk");
    let dk = c.u64()? as usize;
    let mut decoders = DecoderSet::zeros(dk);
    for net in decoders.nets.iter_mut() {
        let (i, o) = (c.u64()? as usize, c.u64()? as usize);
        let params = c.f64s()?;
        if i != net.in_dim || o != net.out_dim || params.len() != Mlp::param_count(i, o) {
            return Err(Error::Integrity("decoder shapes do not match k".into()));
        }
        net.params = params;
    }
    c.finish()?;

    let mut c = Reader::new(payloads[3], "moment chunk");
    let anchor_moments = read_moments(&mut c)?;
    let mut decoder_moments: [Moments; 5] = Default::default();
    for m in decoder_moments.iter_mut() {
        *m = read_moments(&mut c)?;
    }
    c.finish()?;

    let mut c = Reader::new(payloads[4], "rng chunk");
    let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
    let stream = c.u64()?;
    let word_pos = u128::from_le_bytes(c.take(16)?.try_into().unwrap());
    c.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut c = Reader::new(payloads[5], "state chunk");
    let iteration = c.u64()?;
    let skipped_updates = c.u64()?;
    let white_scene = c.u32()? != 0;
    let q = c.len(8)?;
    let view_queue = (0..q)
        .map(|_| c.u64().map(|v| v as usize))
        .collect::<Result<_>>()?;
    c.finish()?;

    let mut c = Reader::new(payloads[6], "accumulator chunk");
    let level_sizes = c.f64s()?;
    let mut voxels = Vec::with_capacity(level_sizes.len());
    for _ in 0..level_sizes.len() {
        let n = c.len(40)?;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let key = VoxelKey([c.i64()?, c.i64()?, c.i64()?]);
            let stat = VoxelStat {
                grad_sum: c.f64()?,
                count: c.u64()?,
            };
            map.insert(key, stat);
        }
        voxels.push(map);
    }
    let opacity_sum = c.f64s()?;
    let nv = c.len(8)?;
    let visits = (0..nv).map(|_| c.u64()).collect::<Result<_>>()?;
    c.finish()?;

    let state = TrainState {
        config,
        grid,
        decoders,
        anchor_moments,
        decoder_moments,
        iteration,
        accumulator: RefinementAccumulator {
            level_sizes,
            voxels,
            opacity_sum,
            visits,
        },
        rng,
        view_queue,
        skipped_updates,
        white_scene,
    };
    state
        .check_consistency()
        .map_err(|_| Error::Integrity("moments do not match the stored parameters".into()))?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Versioned single-file checkpoint container.
//!
//! Layout: magic "EIGC", format version (u32 LE), scalar dtype tag, then a
//! section count and that many named sections. Every section is a length-
//! prefixed blob; tensors are (dtype, ndim, dims..., little-endian data).
//! Save -> load -> save is byte-identical: sections are written in a fixed
//! order and all structured payloads serialize deterministically.

use super::{init_state, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nn::{Adam, Float, Param};
use ndarray::{Array1, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EIGC";
const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;
const MAX_NDIM: usize = 8;
const MAX_TENSOR_ELEMS: usize = 1 << 27;
const MAX_ENTRIES: usize = 4096;

#[derive(Serialize, Deserialize)]
struct Counters {
    step: u64,
    epoch: u64,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<F: Float>(out: &mut Vec<u8>, t: &ArrayD<F>) {
    out.push(F::DTYPE_TAG);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    let std = t.as_standard_layout();
    for &v in std.iter() {
        v.write_le(out);
    }
}

fn put_named_tensor<F: Float>(out: &mut Vec<u8>, name: &str, t: &ArrayD<F>) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    put_tensor(out, t);
}

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos.checked_add(n).map_or(true, |end| end > self.bytes.len()) {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("name length {len} out of range")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }

    fn tensor<F: Float>(&mut self) -> Result<ArrayD<F>> {
        let dtype = self.u8()?;
        if dtype != F::DTYPE_TAG {
            return Err(Error::Checkpoint(format!(
                "tensor dtype tag {dtype} does not match requested scalar"
            )));
        }
        let ndim = self.u8()? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!("ndim {ndim} out of range")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut elems: usize = 1;
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            elems = elems
                .checked_mul(d)
                .filter(|&e| e <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
            dims.push(d);
        }
        let raw = self.take(elems * F::BYTE_WIDTH)?;
        let data: Vec<F> = raw
            .chunks_exact(F::BYTE_WIDTH)
            .map(|c| F::read_le(c))
            .collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }

    fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parameter tensors then buffer tensors, each group count-prefixed. The
/// two groups are appended in separate borrow scopes by the caller.
fn params_part<F: Float>(out: &mut Vec<u8>, params: &[(String, &mut Param<F>)]) {
    put_u32(out, params.len() as u32);
    for (name, p) in params.iter() {
        put_named_tensor(out, name, &p.value);
    }
}

fn buffers_part<F: Float>(out: &mut Vec<u8>, buffers: &[(String, &mut Array1<F>)]) {
    put_u32(out, buffers.len() as u32);
    for (name, b) in buffers.iter() {
        put_named_tensor(out, name, &b.view().to_owned().into_dyn());
    }
}

/// Parse a net section into owned (params, buffers) tensor lists.
fn parse_net<F: Float>(
    payload: &[u8],
    section: &str,
) -> Result<(Vec<(String, ArrayD<F>)>, Vec<(String, ArrayD<F>)>)> {
    let mut cur = Cursor::new(payload);
    let mut groups = Vec::new();
    for what in ["parameter", "buffer"] {
        let count = cur.u32()? as usize;
        if count > MAX_ENTRIES {
            return Err(Error::Checkpoint(format!(
                "{section}: {what} count out of range"
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.name()?;
            let t = cur.tensor::<F>()?;
            entries.push((name, t));
        }
        groups.push(entries);
    }
    if !cur.finished() {
        return Err(Error::Checkpoint(format!(
            "{section}: trailing bytes in section"
        )));
    }
    let buffers = groups.pop().unwrap();
    let params = groups.pop().unwrap();
    Ok((params, buffers))
}

fn apply_params<F: Float>(
    targets: &mut [(String, &mut Param<F>)],
    loaded: Vec<(String, ArrayD<F>)>,
    section: &str,
) -> Result<()> {
    if loaded.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "{section}: {} parameters in file, {} expected",
            loaded.len(),
            targets.len()
        )));
    }
    for ((name, p), (file_name, t)) in targets.iter_mut().zip(loaded) {
        if &file_name != name {
            return Err(Error::Checkpoint(format!(
                "{section}: parameter '{file_name}' where '{name}' expected"
            )));
        }
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{section}.{name}: shape {:?} vs expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn apply_buffers<F: Float>(
    targets: &mut [(String, &mut Array1<F>)],
    loaded: Vec<(String, ArrayD<F>)>,
    section: &str,
) -> Result<()> {
    if loaded.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "{section}: {} buffers in file, {} expected",
            loaded.len(),
            targets.len()
        )));
    }
    for ((name, b), (file_name, t)) in targets.iter_mut().zip(loaded) {
        if &file_name != name {
            return Err(Error::Checkpoint(format!(
                "{section}: buffer '{file_name}' where '{name}' expected"
            )));
        }
        if t.ndim() != 1 || t.len() != b.len() {
            return Err(Error::Checkpoint(format!(
                "{section}.{name}: buffer shape {:?} vs expected {}",
                t.shape(),
                b.len()
            )));
        }
        **b = t.into_dimensionality::<ndarray::Ix1>().unwrap();
    }
    Ok(())
}

fn adam_payload<F: Float>(opt: &Adam<F>) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, opt.t);
    put_u32(&mut out, opt.m.len() as u32);
    for (m, v) in opt.m.iter().zip(opt.v.iter()) {
        put_tensor(&mut out, m);
        put_tensor(&mut out, v);
    }
    out
}

fn restore_adam<F: Float>(payload: &[u8], opt: &mut Adam<F>, section: &str) -> Result<()> {
    let mut cur = Cursor::new(payload);
    opt.t = cur.u64()?;
    let count = cur.u32()? as usize;
    if count > MAX_ENTRIES {
        return Err(Error::Checkpoint(format!(
            "{section}: optimizer slot count out of range"
        )));
    }
    opt.m.clear();
    opt.v.clear();
    for _ in 0..count {
        opt.m.push(cur.tensor::<F>()?);
        opt.v.push(cur.tensor::<F>()?);
    }
    if !cur.finished() {
        return Err(Error::Checkpoint(format!(
            "{section}: trailing bytes in section"
        )));
    }
    Ok(())
}

/// Serialize the whole training state.
pub fn checkpoint_to_bytes<F: Float>(state: &mut TrainState<F>) -> Result<Vec<u8>> {
    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
    sections.push(("config", serde_json::to_vec(&state.config)?));
    sections.push((
        "counters",
        serde_json::to_vec(&Counters {
            step: state.step,
            epoch: state.epoch,
        })?,
    ));
    sections.push(("rng", serde_json::to_vec(&state.rng)?));

    let mut prior = Vec::new();
    prior.push(state.prior_trainable as u8);
    put_tensor(&mut prior, &state.prior.logits.value);
    sections.push(("prior", prior));

    let mut gen_payload = Vec::new();
    params_part(&mut gen_payload, &state.gen.params_mut());
    buffers_part(&mut gen_payload, &state.gen.buffers_mut());
    sections.push(("gen", gen_payload));

    let mut trunk_payload = Vec::new();
    params_part(&mut trunk_payload, &state.trunk.params_mut());
    buffers_part(&mut trunk_payload, &state.trunk.buffers_mut());
    sections.push(("trunk", trunk_payload));

    let mut d_payload = Vec::new();
    params_part(&mut d_payload, &state.d_head.params_mut());
    buffers_part::<F>(&mut d_payload, &[]);
    sections.push(("d_head", d_payload));

    let mut q_payload = Vec::new();
    params_part(&mut q_payload, &state.q_head.params_mut());
    buffers_part(&mut q_payload, &state.q_head.buffers_mut());
    sections.push(("q_head", q_payload));
    sections.push(("opt_d", adam_payload(&state.opt_d)));
    sections.push(("opt_g", adam_payload(&state.opt_g)));
    sections.push(("opt_prior", adam_payload(&state.opt_prior)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(F::DTYPE_TAG);
    put_u32(&mut out, sections.len() as u32);
    for (name, payload) in &sections {
        put_section(&mut out, name, payload);
    }
    Ok(out)
}

/// Parse a checkpoint back into a full training state. Network shapes are
/// rebuilt from the embedded config, then every tensor is overwritten from
/// the file; any structural mismatch is an error and no partial state
/// escapes.
pub fn checkpoint_from_bytes<F: Float>(bytes: &[u8]) -> Result<TrainState<F>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dtype = cur.u8()?;
    if dtype != F::DTYPE_TAG {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype tag {dtype} does not match requested scalar"
        )));
    }
    let n_sections = cur.u32()? as usize;
    if n_sections > 64 {
        return Err(Error::Checkpoint("section count out of range".into()));
    }
    let mut sections: Vec<(String, &[u8])> = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = cur.name()?;
        let len = cur.u64()?;
        if len > bytes.len() as u64 {
            return Err(Error::Checkpoint("section length out of range".into()));
        }
        let payload = cur.take(len as usize)?;
        sections.push((name, payload));
    }
    if !cur.finished() {
        return Err(Error::Checkpoint("trailing bytes after sections".into()));
    }
    let get = |name: &str| -> Result<&[u8]> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Checkpoint(format!("missing section '{name}'")))
    };

    let config: TrainConfig = serde_json::from_slice(get("config")?)?;
    let mut state = init_state::<F>(&config)?;

    let counters: Counters = serde_json::from_slice(get("counters")?)?;
    state.step = counters.step;
    state.epoch = counters.epoch;
    state.rng = serde_json::from_slice::<ChaCha8Rng>(get("rng")?)?;

    {
        let mut pc = Cursor::new(get("prior")?);
        state.prior_trainable = pc.u8()? != 0;
        let logits = pc.tensor::<F>()?;
        if logits.shape() != state.prior.logits.value.shape() {
            return Err(Error::Checkpoint("prior logits shape mismatch".into()));
        }
        state.prior.logits.value = logits;
        if !pc.finished() {
            return Err(Error::Checkpoint("trailing bytes in prior section".into()));
        }
    }

    let (p, b) = parse_net::<F>(get("gen")?, "gen")?;
    apply_params(&mut state.gen.params_mut(), p, "gen")?;
    apply_buffers(&mut state.gen.buffers_mut(), b, "gen")?;
    let (p, b) = parse_net::<F>(get("trunk")?, "trunk")?;
    apply_params(&mut state.trunk.params_mut(), p, "trunk")?;
    apply_buffers(&mut state.trunk.buffers_mut(), b, "trunk")?;
    let (p, b) = parse_net::<F>(get("d_head")?, "d_head")?;
    apply_params(&mut state.d_head.params_mut(), p, "d_head")?;
    apply_buffers::<F>(&mut [], b, "d_head")?;
    let (p, b) = parse_net::<F>(get("q_head")?, "q_head")?;
    apply_params(&mut state.q_head.params_mut(), p, "q_head")?;
    apply_buffers(&mut state.q_head.buffers_mut(), b, "q_head")?;
    restore_adam(get("opt_d")?, &mut state.opt_d, "opt_d")?;
    restore_adam(get("opt_g")?, &mut state.opt_g, "opt_g")?;
    restore_adam(get("opt_prior")?, &mut state.opt_prior, "opt_prior")?;
    Ok(state)
}

/// Write a checkpoint file (parent directories are created).
pub fn checkpoint_save<F: Float>(state: &mut TrainState<F>, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(state)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a checkpoint file.
pub fn checkpoint_load<F: Float>(path: &Path) -> Result<TrainState<F>> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImbalancedSplit, SplitSource};
    use crate::model::NetworkConfig;
    use crate::training::{run_training, train_step, Baseline, TrainConfig};
    use crate::data::LabeledImageSet;
    use ndarray::Array4;

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::mnist_defaults(Baseline::Elastic, 13);
        cfg.net = NetworkConfig {
            image_side: 8,
            image_channels: 1,
            noise_dim: 4,
            code_dim: 3,
            continuous_dim: 1,
            feature_dim: 6,
            gen_fc: 8,
            gen_channels: (4, 3),
            trunk_channels: (3, 4),
            trunk_fc: 8,
        };
        cfg.batch_size = 4;
        cfg.epochs = 2;
        cfg.split = Some(
            ImbalancedSplit::new(vec![0.5, 0.3, 0.2], SplitSource::Generated { seed: 0 }).unwrap(),
        );
        cfg
    }

    fn small_dataset(n: usize) -> LabeledImageSet {
        let images = Array4::from_shape_fn((n, 1, 8, 8), |(i, _, y, x)| {
            (((i * 64 + y * 8 + x) as f32) * 0.043).cos()
        });
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        LabeledImageSet::new(images, labels, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small_config();
        let data = small_dataset(12);
        let mut out = run_training::<f32>(&cfg, &data, None).unwrap();
        let bytes1 = checkpoint_to_bytes(&mut out.state).unwrap();
        let mut reloaded = checkpoint_from_bytes::<f32>(&bytes1).unwrap();
        let bytes2 = checkpoint_to_bytes(&mut reloaded).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let cfg = small_config();
        let data = small_dataset(8);
        let mut out = run_training::<f32>(&cfg, &data, None).unwrap();
        let bytes = checkpoint_to_bytes(&mut out.state).unwrap();
        for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                checkpoint_from_bytes::<f32>(&bytes[..cut]).is_err(),
                "accepted truncation at {cut}"
            );
        }
        let mut garbled = bytes.clone();
        garbled[0] ^= 0xff;
        assert!(checkpoint_from_bytes::<f32>(&garbled).is_err());
        // dtype mismatch
        assert!(checkpoint_from_bytes::<f64>(&bytes).is_err());
        // version bump
        let mut vbump = bytes.clone();
        vbump[4] = 99;
        assert!(checkpoint_from_bytes::<f32>(&vbump).is_err());
        // trailing garbage
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(checkpoint_from_bytes::<f32>(&extended).is_err());
    }

    #[test]
    fn resume_continues_identically() {
        // Train 2 epochs straight vs 1 epoch, checkpoint, resume 1 epoch:
        // identical loss sequences and final parameters.
        let data = small_dataset(12);
        let mut cfg2 = small_config();
        cfg2.epochs = 2;
        let full = run_training::<f32>(&cfg2, &data, None).unwrap();

        let mut cfg1 = small_config();
        cfg1.epochs = 1;
        let mut half = run_training::<f32>(&cfg1, &data, None).unwrap();
        let bytes = checkpoint_to_bytes(&mut half.state).unwrap();
        let mut resumed = checkpoint_from_bytes::<f32>(&bytes).unwrap();

        // Drive the second epoch manually with the same batching scheme.
        let n = data.len();
        let steps = n / cfg1.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut resumed.rng);
        let mut extra = Vec::new();
        for chunk in order.chunks(cfg1.batch_size).take(steps) {
            let batch = crate::training::batch_to::<f32>(&data.images, chunk);
            extra.push(train_step(&mut resumed, &batch).unwrap());
        }
        let all: Vec<f64> = half
            .losses
            .iter()
            .chain(extra.iter())
            .map(|r| r.total)
            .collect();
        let reference: Vec<f64> = full.losses.iter().map(|r| r.total).collect();
        assert_eq!(all.len(), reference.len());
        for (a, b) in all.iter().zip(reference.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "loss sequences diverged");
        }
        assert_eq!(resumed.step, full.state.step);
    }
}

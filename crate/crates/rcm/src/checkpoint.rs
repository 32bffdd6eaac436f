//! Binary container for named tensor leaves, and the trainer state file
//! built on top of it.
//!
//! Layout of a parameter blob:
//!
//! ```text
//! magic "RCMF" | version u32 | total elements u64 | leaf count u32
//! per leaf: name len u16, name bytes, rank u8, dims u32..., element offset u64
//! data: little-endian f32, leaves in flattening order
//! ```
//!
//! Values are rounded to 32 bits by every primitive in the default
//! precision mode, so the f32 data section round-trips bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const PARAM_MAGIC: [u8; 4] = *b"RCMF";
pub const STATE_MAGIC: [u8; 4] = *b"RCMS";
pub const FORMAT_VERSION: u32 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Write a parameter set into the binary container.
pub fn write_param_set(w: &mut impl Write, params: &ParamSet) -> Result<()> {
    w.write_all(&PARAM_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.num_elements() as u64).to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += t.numel() as u64;
    }
    for (_, t) in params.iter() {
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a parameter set from the binary container.
pub fn read_param_set(r: &mut impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != PARAM_MAGIC {
        return Err(Error::BadMagic { expected: PARAM_MAGIC, found: magic });
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let total = read_u64(r, "element count")?;
    let leaf_count = read_u32(r, "leaf count")?;

    let mut leaves = Vec::with_capacity(leaf_count as usize);
    let mut expected_offset = 0u64;
    for i in 0..leaf_count {
        let name_len = read_u16(r, "leaf name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "leaf name")?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Malformed { what: "leaf name", detail: e.to_string() })?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, "leaf rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r, "leaf dim")? as usize);
        }
        let offset = read_u64(r, "leaf offset")?;
        if offset != expected_offset {
            return Err(Error::Malformed {
                what: "leaf table",
                detail: format!("leaf {i} offset {offset}, expected {expected_offset}"),
            });
        }
        expected_offset += shape.iter().product::<usize>() as u64;
        leaves.push((name, shape));
    }
    if expected_offset != total {
        return Err(Error::Malformed {
            what: "leaf table",
            detail: format!("leaves cover {expected_offset} elements, header says {total}"),
        });
    }

    let mut params = ParamSet::new();
    for (name, shape) in leaves {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(r, &mut buf, "leaf data")?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_param_set(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    read_param_set(&mut bytes.as_slice())
}

/// A metric-log row: one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: u32,
    pub scm: f64,
    pub dmd: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Counters observable from outside a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCounters {
    /// Generator passes taken by the score-regularisation term.
    pub dmd_generator_passes: u64,
    /// Batch elements skipped because their target was non-finite.
    pub skipped_nonfinite: u64,
}

/// Full trainer state: enough to resume a run bit-identically.
#[derive(Debug, Clone)]
pub struct RunState {
    pub seed: u64,
    pub stage_index: u32,
    pub step_in_stage: u64,
    pub global_step: u64,
    pub ema_decay: f64,
    pub counters: RunCounters,
    pub metrics: Vec<MetricRow>,
    pub student: ParamSet,
    pub ema: ParamSet,
    pub opt_m: ParamSet,
    pub opt_v: ParamSet,
    pub opt_t: u64,
}

pub fn write_run_state(w: &mut impl Write, s: &RunState) -> Result<()> {
    w.write_all(&STATE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&s.seed.to_le_bytes())?;
    w.write_all(&s.stage_index.to_le_bytes())?;
    w.write_all(&s.step_in_stage.to_le_bytes())?;
    w.write_all(&s.global_step.to_le_bytes())?;
    w.write_all(&s.ema_decay.to_le_bytes())?;
    w.write_all(&s.counters.dmd_generator_passes.to_le_bytes())?;
    w.write_all(&s.counters.skipped_nonfinite.to_le_bytes())?;
    w.write_all(&s.opt_t.to_le_bytes())?;
    w.write_all(&(s.metrics.len() as u64).to_le_bytes())?;
    for m in &s.metrics {
        w.write_all(&m.step.to_le_bytes())?;
        w.write_all(&m.stage.to_le_bytes())?;
        for v in [m.scm, m.dmd, m.total, m.grad_norm, m.lr] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for part in [&s.student, &s.ema, &s.opt_m, &s.opt_v] {
        write_param_set(w, part)?;
    }
    Ok(())
}

pub fn read_run_state(r: &mut impl Read) -> Result<RunState> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "state magic")?;
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic { expected: STATE_MAGIC, found: magic });
    }
    let version = read_u32(r, "state version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let seed = read_u64(r, "seed")?;
    let stage_index = read_u32(r, "stage index")?;
    let step_in_stage = read_u64(r, "step in stage")?;
    let global_step = read_u64(r, "global step")?;
    let ema_decay = read_f64(r, "ema decay")?;
    let counters = RunCounters {
        dmd_generator_passes: read_u64(r, "dmd counter")?,
        skipped_nonfinite: read_u64(r, "skip counter")?,
    };
    let opt_t = read_u64(r, "optimizer step")?;
    let n_metrics = read_u64(r, "metric count")?;
    let mut metrics = Vec::with_capacity(n_metrics as usize);
    for _ in 0..n_metrics {
        metrics.push(MetricRow {
            step: read_u64(r, "metric step")?,
            stage: read_u32(r, "metric stage")?,
            scm: read_f64(r, "metric scm")?,
            dmd: read_f64(r, "metric dmd")?,
            total: read_f64(r, "metric total")?,
            grad_norm: read_f64(r, "metric grad norm")?,
            lr: read_f64(r, "metric lr")?,
        });
    }
    let student = read_param_set(r)?;
    let ema = read_param_set(r)?;
    let opt_m = read_param_set(r)?;
    let opt_v = read_param_set(r)?;
    Ok(RunState {
        seed,
        stage_index,
        step_in_stage,
        global_step,
        ema_decay,
        counters,
        metrics,
        student,
        ema,
        opt_m,
        opt_v,
        opt_t,
    })
}

pub fn save_run_state(path: &Path, s: &RunState) -> Result<()> {
    let mut buf = Vec::new();
    write_run_state(&mut buf, s)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_run_state(path: &Path) -> Result<RunState> {
    let bytes = std::fs::read(path)?;
    read_run_state(&mut bytes.as_slice())
}

/// Write the metric log as CSV.
pub fn write_metrics_csv(path: &Path, metrics: &[MetricRow]) -> Result<()> {
    let mut out = String::from("step,stage,scm,dmd,total,grad_norm,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.step, m.stage, m.scm, m.dmd, m.total, m.grad_norm, m.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DeterministicRng;

    fn sample_params() -> ParamSet {
        let mut rng = DeterministicRng::seed_from(1);
        let mut p = ParamSet::new();
        p.insert("layer.w", rng.normal_tensor(&[3, 4]));
        p.insert("layer.b", rng.normal_tensor(&[1, 4]));
        p.insert("scalar", Tensor::scalar(0.5));
        p
    }

    #[test]
    fn params_round_trip_bitwise() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_param_set(&mut buf, &p).unwrap();
        let q = read_param_set(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        // Byte-level idempotence: save(load(save(x))) == save(x).
        let mut buf2 = Vec::new();
        write_param_set(&mut buf2, &q).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_param_set(&mut buf, &p).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_param_set(&mut buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_param_set(&mut buf, &p).unwrap();
        buf[4] = 9;
        assert!(matches!(
            read_param_set(&mut buf.as_slice()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_param_set(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_param_set(&mut buf.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn run_state_round_trip() {
        let p = sample_params();
        let state = RunState {
            seed: 7,
            stage_index: 2,
            step_in_stage: 13,
            global_step: 113,
            ema_decay: 0.99,
            counters: RunCounters { dmd_generator_passes: 5, skipped_nonfinite: 1 },
            metrics: vec![MetricRow {
                step: 1,
                stage: 0,
                scm: 0.25,
                dmd: 0.0,
                total: 0.25,
                grad_norm: 1.5,
                lr: 1e-3,
            }],
            student: p.clone(),
            ema: p.clone(),
            opt_m: p.zeros_like(),
            opt_v: p.zeros_like(),
            opt_t: 113,
        };
        let mut buf = Vec::new();
        write_run_state(&mut buf, &state).unwrap();
        let back = read_run_state(&mut buf.as_slice()).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.metrics, state.metrics);
        assert_eq!(back.student, state.student);
        assert_eq!(back.counters, state.counters);
        let mut buf2 = Vec::new();
        write_run_state(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }
}

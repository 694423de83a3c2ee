//! Binary checkpoint format.
//!
//! Layout: magic `MSED`, format version (u32 LE), a length-prefixed
//! `key=value` metadata block (one pair per line), the named tensors, and
//! a trailing CRC32 of everything before it. Each tensor is name length
//! (u32), name bytes, rank (u32), dims (u32 each), then f32 LE data.
//!
//! The metadata embeds the architecture, so `load_*` rebuilds the network
//! and then overwrites every parameter, batch-norm statistic, and
//! optimizer slot from the file; a round trip is bitwise exact.

use super::PipelineError;
use crate::nn::{build_fusion_mlp, build_sedensenet, FusionNet, HeadKind, Network, NetworkSpec};
use crate::optim::{AdamState, Optimizer, SgdState};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MSED";

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// Validation metric of the stored weights (accuracy, or MSE for the
    /// regression backbone).
    pub best_metric: f64,
    /// 1-based epoch that produced them.
    pub epoch: usize,
    /// Run seed, so a resumed or inspected run can be tied to its draws.
    pub seed: u64,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, dims.len() as u32);
    for &d in dims {
        push_u32(buf, d as u32);
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// `kv` keys common to both checkpoint kinds.
fn push_meta(kv: &mut Vec<(String, String)>, meta: &CheckpointMeta) {
    kv.push(("best_metric".into(), format!("{}", meta.best_metric)));
    kv.push(("epoch".into(), format!("{}", meta.epoch)));
    kv.push(("seed".into(), format!("{}", meta.seed)));
}

fn push_optimizer_meta(kv: &mut Vec<(String, String)>, opt: Option<&Optimizer<f32>>) {
    match opt {
        None => kv.push(("optimizer".into(), "none".into())),
        Some(Optimizer::Sgd(s)) => {
            kv.push(("optimizer".into(), "sgd".into()));
            kv.push(("opt_lr".into(), format!("{}", s.lr)));
            kv.push(("opt_momentum".into(), format!("{}", s.momentum)));
        }
        Some(Optimizer::Adam(a)) => {
            kv.push(("optimizer".into(), "adam".into()));
            kv.push(("opt_lr".into(), format!("{}", a.lr)));
            kv.push(("opt_beta1".into(), format!("{}", a.beta1)));
            kv.push(("opt_beta2".into(), format!("{}", a.beta2)));
            kv.push(("opt_eps".into(), format!("{}", a.eps)));
            kv.push(("opt_t".into(), format!("{}", a.t)));
        }
    }
}

fn optimizer_tensors(
    buf: &mut Vec<u8>,
    params: &[crate::nn::Param<f32>],
    opt: Option<&Optimizer<f32>>,
) -> usize {
    match opt {
        None => 0,
        Some(Optimizer::Sgd(s)) => {
            for (slot, p) in params.iter().enumerate() {
                let v = s.velocity(slot);
                push_tensor(buf, &format!("opt.{}.v", p.name), &[v.len()], v);
            }
            params.len()
        }
        Some(Optimizer::Adam(a)) => {
            for (slot, p) in params.iter().enumerate() {
                let (m1, m2) = a.moments(slot);
                push_tensor(buf, &format!("opt.{}.m1", p.name), &[m1.len()], m1);
                push_tensor(buf, &format!("opt.{}.m2", p.name), &[m2.len()], m2);
            }
            2 * params.len()
        }
    }
}

fn finish(path: &Path, kv: Vec<(String, String)>, tensors: Vec<u8>) -> Result<(), PipelineError> {
    let mut block = String::new();
    for (k, v) in &kv {
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    let mut buf = Vec::with_capacity(block.len() + tensors.len() + 16);
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, block.len() as u32);
    buf.extend_from_slice(block.as_bytes());
    buf.extend_from_slice(&tensors);
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    std::fs::write(path, &buf).map_err(|e| io_err(path, e))
}

fn store_tensors(store: &crate::nn::ParamStore<f32>, buf: &mut Vec<u8>) -> usize {
    for p in &store.params {
        push_tensor(buf, &p.name, p.value.shape(), p.value.data());
    }
    for s in &store.bn {
        push_tensor(buf, &format!("{}.mean", s.name), &[s.mean.len()], &s.mean);
        push_tensor(buf, &format!("{}.var", s.name), &[s.var.len()], &s.var);
    }
    store.params.len() + 2 * store.bn.len()
}

pub fn save_backbone(
    path: &Path,
    net: &Network<f32>,
    opt: Option<&Optimizer<f32>>,
    meta: &CheckpointMeta,
) -> Result<(), PipelineError> {
    let spec = &net.spec;
    let mut kv = vec![(
        "kind".into(),
        match spec.head {
            HeadKind::Classification => "classification".to_string(),
            HeadKind::Regression => "regression".to_string(),
        },
    )];
    kv.push(("growth_rate".into(), format!("{}", spec.growth_rate)));
    kv.push((
        "modules_per_block".into(),
        format!("{}", spec.modules_per_block),
    ));
    kv.push(("num_blocks".into(), format!("{}", spec.num_blocks)));
    kv.push(("compression".into(), format!("{}", spec.compression)));
    kv.push(("se_ratio".into(), format!("{}", spec.se_ratio)));
    kv.push(("input_h".into(), format!("{}", spec.input.0)));
    kv.push(("input_w".into(), format!("{}", spec.input.1)));
    kv.push(("input_c".into(), format!("{}", spec.input.2)));
    kv.push(("num_classes".into(), format!("{}", spec.num_classes)));
    push_meta(&mut kv, meta);
    push_optimizer_meta(&mut kv, opt);

    let mut tensors = Vec::new();
    let mut count = store_tensors(&net.store, &mut tensors);
    count += optimizer_tensors(&mut tensors, &net.store.params, opt);
    kv.push(("tensors".into(), format!("{count}")));
    finish(path, kv, tensors)
}

pub fn save_fusion(
    path: &Path,
    net: &FusionNet<f32>,
    opt: Option<&Optimizer<f32>>,
    meta: &CheckpointMeta,
) -> Result<(), PipelineError> {
    let mut kv = vec![("kind".into(), "fusion".to_string())];
    kv.push(("in_dim".into(), format!("{}", net.in_dim)));
    kv.push(("num_classes".into(), format!("{}", net.num_classes)));
    push_meta(&mut kv, meta);
    push_optimizer_meta(&mut kv, opt);

    let mut tensors = Vec::new();
    let mut count = store_tensors(&net.store, &mut tensors);
    count += optimizer_tensors(&mut tensors, &net.store.params, opt);
    kv.push(("tensors".into(), format!("{count}")));
    finish(path, kv, tensors)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt(
                self.path,
                format!(
                    "truncated: wanted {n} bytes at offset {} of {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), PipelineError> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| corrupt(self.path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel = dims.iter().product::<usize>();
        let raw = self.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, dims, data))
    }
}

struct RawCheckpoint {
    kv: BTreeMap<String, String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl RawCheckpoint {
    fn read(path: &Path) -> Result<Self, PipelineError> {
        let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
        if buf.len() < 16 {
            return Err(corrupt(path, format!("file too short ({} bytes)", buf.len())));
        }
        let crc_stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let crc_actual = crc32fast::hash(&buf[..buf.len() - 4]);
        if crc_stored != crc_actual {
            return Err(corrupt(
                path,
                format!("CRC mismatch: stored {crc_stored:08x}, computed {crc_actual:08x}"),
            ));
        }
        let mut r = Reader {
            buf: &buf[..buf.len() - 4],
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(corrupt(path, "bad magic: not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                path,
                format!("unsupported version {version}; this build reads version {CHECKPOINT_VERSION}"),
            ));
        }
        let block_len = r.u32()? as usize;
        let block = std::str::from_utf8(r.take(block_len)?)
            .map_err(|_| corrupt(path, "metadata block is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in block.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(path, format!("metadata line without `=`: `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let want: usize = kv
            .get("tensors")
            .ok_or_else(|| corrupt(path, "metadata missing `tensors`"))?
            .parse()
            .map_err(|_| corrupt(path, "bad `tensors` count"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..want {
            let (name, dims, data) = r.tensor()?;
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(corrupt(path, format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != r.buf.len() {
            return Err(corrupt(
                path,
                format!("{} trailing bytes after last tensor", r.buf.len() - r.pos),
            ));
        }
        Ok(Self { kv, tensors })
    }

    fn field<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T, PipelineError> {
        self.kv
            .get(key)
            .ok_or_else(|| corrupt(path, format!("metadata missing `{key}`")))?
            .parse()
            .map_err(|_| corrupt(path, format!("bad value for metadata key `{key}`")))
    }

    fn meta(&self, path: &Path) -> Result<CheckpointMeta, PipelineError> {
        Ok(CheckpointMeta {
            best_metric: self.field(path, "best_metric")?,
            epoch: self.field(path, "epoch")?,
            seed: self.field(path, "seed")?,
        })
    }

    /// Remove and return a tensor, enforcing its dims.
    fn expect(
        &mut self,
        path: &Path,
        name: &str,
        dims: &[usize],
    ) -> Result<Vec<f32>, PipelineError> {
        let (got_dims, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| corrupt(path, format!("missing tensor `{name}`")))?;
        if got_dims != dims {
            return Err(corrupt(
                path,
                format!("tensor `{name}` has shape {got_dims:?} but the architecture expects {dims:?}"),
            ));
        }
        Ok(data)
    }

    fn fill_store(
        &mut self,
        path: &Path,
        store: &mut crate::nn::ParamStore<f32>,
    ) -> Result<(), PipelineError> {
        for p in &mut store.params {
            let data = self.expect(path, &p.name, p.value.shape())?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for s in &mut store.bn {
            let mean = self.expect(path, &format!("{}.mean", s.name), &[s.mean.len()])?;
            let var = self.expect(path, &format!("{}.var", s.name), &[s.var.len()])?;
            s.mean.copy_from_slice(&mean);
            s.var.copy_from_slice(&var);
        }
        Ok(())
    }

    fn optimizer(
        &mut self,
        path: &Path,
        store: &crate::nn::ParamStore<f32>,
    ) -> Result<Option<Optimizer<f32>>, PipelineError> {
        let kind = self
            .kv
            .get("optimizer")
            .ok_or_else(|| corrupt(path, "metadata missing `optimizer`"))?
            .clone();
        let sizes = store.sizes();
        match kind.as_str() {
            "none" => Ok(None),
            "sgd" => {
                let mut s = SgdState::new(
                    self.field::<f32>(path, "opt_lr")?,
                    self.field::<f32>(path, "opt_momentum")?,
                    &sizes,
                );
                for (slot, p) in store.params.iter().enumerate() {
                    let v = self.expect(path, &format!("opt.{}.v", p.name), &[sizes[slot]])?;
                    s.velocity_mut(slot).copy_from_slice(&v);
                }
                Ok(Some(Optimizer::Sgd(s)))
            }
            "adam" => {
                let mut a = AdamState::new(
                    self.field::<f32>(path, "opt_lr")?,
                    self.field::<f32>(path, "opt_beta1")?,
                    self.field::<f32>(path, "opt_beta2")?,
                    &sizes,
                );
                a.eps = self.field::<f32>(path, "opt_eps")?;
                a.t = self.field::<u64>(path, "opt_t")?;
                for (slot, p) in store.params.iter().enumerate() {
                    let m1 = self.expect(path, &format!("opt.{}.m1", p.name), &[sizes[slot]])?;
                    let m2 = self.expect(path, &format!("opt.{}.m2", p.name), &[sizes[slot]])?;
                    let (f, s2) = a.moments_mut(slot);
                    f.copy_from_slice(&m1);
                    s2.copy_from_slice(&m2);
                }
                Ok(Some(Optimizer::Adam(a)))
            }
            other => Err(corrupt(path, format!("unknown optimizer kind `{other}`"))),
        }
    }

    fn finish(self, path: &Path) -> Result<(), PipelineError> {
        if let Some(name) = self.tensors.keys().next() {
            return Err(corrupt(path, format!("unexpected tensor `{name}`")));
        }
        Ok(())
    }
}

pub fn load_backbone(
    path: &Path,
) -> Result<(Network<f32>, Option<Optimizer<f32>>, CheckpointMeta), PipelineError> {
    let mut raw = RawCheckpoint::read(path)?;
    let head = match raw.field::<String>(path, "kind")?.as_str() {
        "classification" => HeadKind::Classification,
        "regression" => HeadKind::Regression,
        other => return Err(corrupt(path, format!("not a backbone checkpoint (kind `{other}`)"))),
    };
    let spec = NetworkSpec {
        growth_rate: raw.field(path, "growth_rate")?,
        modules_per_block: raw.field(path, "modules_per_block")?,
        num_blocks: raw.field(path, "num_blocks")?,
        compression: raw.field(path, "compression")?,
        se_ratio: raw.field(path, "se_ratio")?,
        input: (
            raw.field(path, "input_h")?,
            raw.field(path, "input_w")?,
            raw.field(path, "input_c")?,
        ),
        num_classes: raw.field(path, "num_classes")?,
        head,
    };
    let mut net = build_sedensenet::<f32>(&spec, 0)?;
    raw.fill_store(path, &mut net.store)?;
    let opt = raw.optimizer(path, &net.store)?;
    let meta = raw.meta(path)?;
    raw.finish(path)?;
    Ok((net, opt, meta))
}

pub fn load_fusion(
    path: &Path,
) -> Result<(FusionNet<f32>, Option<Optimizer<f32>>, CheckpointMeta), PipelineError> {
    let mut raw = RawCheckpoint::read(path)?;
    let kind: String = raw.field(path, "kind")?;
    if kind != "fusion" {
        return Err(corrupt(path, format!("not a fusion checkpoint (kind `{kind}`)")));
    }
    let in_dim: usize = raw.field(path, "in_dim")?;
    let num_classes: usize = raw.field(path, "num_classes")?;
    let mut net = build_fusion_mlp::<f32>(in_dim, 0, num_classes, 0);
    raw.fill_store(path, &mut net.store)?;
    let opt = raw.optimizer(path, &net.store)?;
    let meta = raw.meta(path)?;
    raw.finish(path)?;
    Ok((net, opt, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            best_metric: 0.8125,
            epoch: 7,
            seed: 42,
        }
    }

    fn desk_net(seed: u64) -> Network<f32> {
        build_sedensenet(&NetworkSpec::desk(HeadKind::Classification), seed).unwrap()
    }

    fn stores_equal(a: &crate::nn::ParamStore<f32>, b: &crate::nn::ParamStore<f32>) -> bool {
        a.params.len() == b.params.len()
            && a.params.iter().zip(&b.params).all(|(x, y)| {
                x.name == y.name
                    && x.value.shape() == y.value.shape()
                    && x.value.data() == y.value.data()
            })
            && a.bn.len() == b.bn.len()
            && a.bn
                .iter()
                .zip(&b.bn)
                .all(|(x, y)| x.name == y.name && x.mean == y.mean && x.var == y.var)
    }

    #[test]
    fn backbone_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        let mut net = desk_net(3);
        // Perturb running stats so they are not at their init values.
        for s in &mut net.store.bn {
            for (i, m) in s.mean.iter_mut().enumerate() {
                *m = 0.01 * (i as f32 + 1.0);
            }
        }
        let sizes = net.store.sizes();
        let mut sgd = SgdState::new(0.05_f32, 0.7, &sizes);
        for slot in 0..sizes.len() {
            for (i, v) in sgd.velocity_mut(slot).iter_mut().enumerate() {
                *v = (slot as f32) + 1e-3 * i as f32;
            }
        }
        let opt = Optimizer::Sgd(sgd);
        save_backbone(&path, &net, Some(&opt), &meta()).unwrap();

        let (loaded, loaded_opt, loaded_meta) = load_backbone(&path).unwrap();
        assert!(stores_equal(&net.store, &loaded.store));
        assert_eq!(loaded.spec, net.spec);
        assert_eq!(loaded_meta, meta());
        match loaded_opt.unwrap() {
            Optimizer::Sgd(s) => {
                assert_eq!(s.lr, 0.05);
                assert_eq!(s.momentum, 0.7);
                for slot in 0..sizes.len() {
                    if let Optimizer::Sgd(orig) = &opt {
                        assert_eq!(s.velocity(slot), orig.velocity(slot));
                    }
                }
            }
            _ => panic!("wrong optimizer kind"),
        }
    }

    #[test]
    fn adam_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.ckpt");
        let net: Network<f32> =
            build_sedensenet(&NetworkSpec::desk(HeadKind::Regression), 5).unwrap();
        let sizes = net.store.sizes();
        let mut adam = AdamState::new(1e-3_f32, 0.9, 0.999, &sizes);
        adam.t = 123;
        for slot in 0..sizes.len() {
            let (m1, m2) = adam.moments_mut(slot);
            for (i, v) in m1.iter_mut().enumerate() {
                *v = 1e-4 * i as f32;
            }
            for (i, v) in m2.iter_mut().enumerate() {
                *v = 1e-6 * (i as f32 + 1.0);
            }
        }
        save_backbone(&path, &net, Some(&Optimizer::Adam(adam)), &meta()).unwrap();
        let (_, opt, _) = load_backbone(&path).unwrap();
        match opt.unwrap() {
            Optimizer::Adam(a) => {
                assert_eq!(a.t, 123);
                assert_eq!(a.eps, 1e-8);
                let (m1, m2) = a.moments(1);
                assert_eq!(m1[2], 2e-4);
                assert_eq!(m2[0], 1e-6);
            }
            _ => panic!("wrong optimizer kind"),
        }
    }

    #[test]
    fn fusion_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion.ckpt");
        let net: FusionNet<f32> = build_fusion_mlp(24, 24, 5, 9);
        save_fusion(&path, &net, None, &meta()).unwrap();
        let (loaded, opt, m) = load_fusion(&path).unwrap();
        assert!(stores_equal(&net.store, &loaded.store));
        assert_eq!(loaded.in_dim, 48);
        assert_eq!(loaded.num_classes, 5);
        assert!(opt.is_none());
        assert_eq!(m.best_metric, 0.8125);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_backbone(&path, &desk_net(1), None, &meta()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        // Re-stamp the CRC so the magic check itself is what fires.
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_backbone(&path, &desk_net(1), None, &meta()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported version 99"), "{err}");
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_backbone(&path, &desk_net(1), None, &meta()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Cut the file short: the CRC no longer matches.
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("CRC mismatch"), "{err}");

        // Flip one payload byte.
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("CRC mismatch"), "{err}");

        // Practically empty file.
        std::fs::write(&path, b"MS").unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
    }

    #[test]
    fn shape_mismatch_against_embedded_spec_is_detected() {
        // Write a file whose metadata claims growth rate 8 but whose
        // tensors come from a growth-6 network.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = desk_net(1);
        let mut kv = vec![("kind".to_string(), "classification".to_string())];
        for (k, v) in [
            ("growth_rate", "8"),
            ("modules_per_block", "2"),
            ("num_blocks", "2"),
            ("compression", "0.5"),
            ("se_ratio", "4"),
            ("input_h", "32"),
            ("input_w", "32"),
            ("input_c", "3"),
            ("num_classes", "5"),
            ("optimizer", "none"),
        ] {
            kv.push((k.to_string(), v.to_string()));
        }
        push_meta(&mut kv, &meta());
        let mut tensors = Vec::new();
        let count = store_tensors(&net.store, &mut tensors);
        kv.push(("tensors".to_string(), format!("{count}")));
        finish(&path, kv, tensors).unwrap();
        let err = load_backbone(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("has shape") && msg.contains("expects"),
            "{msg}"
        );
    }

    #[test]
    fn missing_tensor_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = desk_net(1);
        save_backbone(&path, &net, None, &meta()).unwrap();
        // Rebuild the file with the tensor count bumped but nothing else;
        // the reader then runs out of bytes while parsing.
        let bytes = std::fs::read(&path).unwrap();
        let block_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let block = std::str::from_utf8(&bytes[12..12 + block_len]).unwrap();
        let bumped = block.replace(
            &format!("tensors={}", net.store.params.len() + 2 * net.store.bn.len()),
            &format!("tensors={}", net.store.params.len() + 2 * net.store.bn.len() + 1),
        );
        assert_ne!(bumped, block);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
        out.extend_from_slice(bumped.as_bytes());
        out.extend_from_slice(&bytes[12 + block_len..bytes.len() - 4]);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &out).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn desk_checkpoint_is_small() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = desk_net(1);
        let sizes = net.store.sizes();
        let opt = Optimizer::Adam(AdamState::new(1e-3_f32, 0.9, 0.999, &sizes));
        save_backbone(&path, &net, Some(&opt), &meta()).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert!(len < 10 * 1024 * 1024, "desk checkpoint is {len} bytes");
    }
}

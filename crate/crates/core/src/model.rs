//! Bottleneck classifier: encoder features, a sigmoid concept layer, and a
//! task head that reads the features concatenated with the concepts.
//!
//! The concept activations are clamped away from 0 and 1 so downstream
//! losses and interventions never see saturated values. The forward pass is
//! split into `encode` / `concept_forward` / `task_forward` so test-time
//! concept intervention can replace individual concept slots between the
//! two heads without touching the encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneKind};
use crate::error::{Error, Result};
use crate::nn::{Dropout, Linear, Param, Relu, Scalar, Tensor};

pub const CONCEPT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ForwardOutput<R> {
    pub logits: Tensor<R>,
    /// Post-sigmoid concept activations, clamped to (0, 1).
    pub concepts: Tensor<R>,
}

#[derive(Debug, Clone)]
pub struct BottleneckModel<R> {
    pub backbone: Backbone<R>,
    concept_head: Linear<R>,
    task_hidden: Linear<R>,
    task_relu: Relu<R>,
    task_dropout: Dropout,
    task_out: Linear<R>,
    n_concepts: usize,
    dropout_p: f64,
    /// Clamped concept activations cached for the sigmoid backward.
    cached_concepts: Option<Tensor<R>>,
    feature_dim: usize,
}

impl<R: Scalar> BottleneckModel<R> {
    pub fn new(
        kind: BackboneKind,
        width_scale: f64,
        n_concepts: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_concepts == 0 {
            return Err(Error::validation("model needs at least one concept"));
        }
        let backbone = Backbone::new(kind, width_scale, rng)?;
        let zdim = backbone.feature_dim();
        let hidden = (zdim / 4).max(1);
        let concept_head = Linear::new(rng, zdim, n_concepts);
        let task_hidden = Linear::new(rng, zdim + n_concepts, hidden);
        // Small init keeps initial logits near zero.
        let task_out = Linear::with_init_std(rng, hidden, 2, 0.01);
        Ok(BottleneckModel {
            backbone,
            concept_head,
            task_hidden,
            task_relu: Relu::new(),
            task_dropout: Dropout::new(dropout_p),
            task_out,
            n_concepts,
            dropout_p,
            cached_concepts: None,
            feature_dim: zdim,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_p
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<()> {
        if x.shape.len() != 5 || x.shape[1] != 1 {
            return Err(Error::validation(format!(
                "expected input [n, 1, d, h, w], got {:?}",
                x.shape
            )));
        }
        let min = self.backbone.min_input_size();
        if x.shape[2..].iter().any(|&s| s < min) {
            return Err(Error::validation(format!(
                "input {:?} is smaller than the backbone minimum {min}",
                &x.shape[2..]
            )));
        }
        Ok(())
    }

    /// Encoder features for a batch of volumes.
    pub fn encode(&mut self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.check_input(x)?;
        Ok(self.backbone.forward(x))
    }

    /// Sigmoid concept predictions from encoder features.
    pub fn concept_forward(&mut self, z: &Tensor<R>) -> Tensor<R> {
        let raw = self.concept_head.forward(z);
        let mut c = raw;
        for v in &mut c.data {
            let s = 1.0 / (1.0 + (-v.to_f64()).exp());
            *v = R::from_f64(s.clamp(CONCEPT_CLAMP, 1.0 - CONCEPT_CLAMP));
        }
        self.cached_concepts = Some(c.clone());
        c
    }

    /// Task logits from features and (possibly intervened) concepts.
    pub fn task_forward(
        &mut self,
        z: &Tensor<R>,
        c: &Tensor<R>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<R> {
        let n = z.shape[0];
        let mut joint = Tensor::zeros(vec![n, self.feature_dim + self.n_concepts]);
        for s in 0..n {
            let dst = &mut joint.data[s * (self.feature_dim + self.n_concepts)..];
            dst[..self.feature_dim]
                .copy_from_slice(&z.data[s * self.feature_dim..(s + 1) * self.feature_dim]);
            dst[self.feature_dim..self.feature_dim + self.n_concepts]
                .copy_from_slice(&c.data[s * self.n_concepts..(s + 1) * self.n_concepts]);
        }
        let h = self.task_relu.forward(&self.task_hidden.forward(&joint));
        let h = self.task_dropout.forward(&h, train, rng);
        self.task_out.forward(&h)
    }

    pub fn forward(
        &mut self,
        x: &Tensor<R>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<R>> {
        let z = self.encode(x)?;
        let concepts = self.concept_forward(&z);
        let logits = self.task_forward(&z, &concepts, train, rng);
        Ok(ForwardOutput { logits, concepts })
    }

    /// Backpropagate task and concept gradients (already scaled by their
    /// loss weights) down through the shared encoder.
    pub fn backward(&mut self, d_logits: &Tensor<R>, d_concepts: &Tensor<R>) {
        let dh = self
            .task_out
            .backward(d_logits, true)
            .expect("task head gradient");
        let dh = self.task_relu.backward(&self.task_dropout.backward(&dh));
        let djoint = self
            .task_hidden
            .backward(&dh, true)
            .expect("task hidden gradient");

        let n = djoint.shape[0];
        let mut dz = Tensor::zeros(vec![n, self.feature_dim]);
        let mut dc = d_concepts.clone();
        for s in 0..n {
            let src = &djoint.data[s * (self.feature_dim + self.n_concepts)..];
            dz.data[s * self.feature_dim..(s + 1) * self.feature_dim]
                .copy_from_slice(&src[..self.feature_dim]);
            for k in 0..self.n_concepts {
                let i = s * self.n_concepts + k;
                dc.data[i] = dc.data[i] + src[self.feature_dim + k];
            }
        }

        // Through the sigmoid: dc/d(raw) = c(1 - c) on the clamped value.
        let c = self
            .cached_concepts
            .take()
            .expect("model backward without forward");
        let mut dc_raw = dc;
        for (g, &cv) in dc_raw.data.iter_mut().zip(&c.data) {
            let cf = cv.to_f64();
            *g = R::from_f64(g.to_f64() * cf * (1.0 - cf));
        }
        let dz_concepts = self
            .concept_head
            .backward(&dc_raw, true)
            .expect("concept head gradient");
        for (a, &b) in dz.data.iter_mut().zip(&dz_concepts.data) {
            *a = *a + b;
        }
        self.backbone.backward(&dz);
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Param<R>)) {
        self.backbone.for_each_param("backbone", f);
        self.concept_head.for_each_param("concept_head", f);
        self.task_hidden.for_each_param("task.hidden", f);
        self.task_out.for_each_param("task.out", f);
    }

    /// Freeze the whole encoder, then re-enable the named stages.
    pub fn set_encoder_trainable_stages(&mut self, stages: &[String]) -> Result<()> {
        for name in crate::backbone::STAGE_NAMES {
            self.backbone.set_stage_trainable(name, false)?;
        }
        for s in stages {
            self.backbone.set_stage_trainable(s, true)?;
        }
        Ok(())
    }

    pub fn freeze_encoder(&mut self) -> Result<()> {
        self.set_encoder_trainable_stages(&[])
    }
}

pub const CKPT_MANIFEST_EXT: &str = "ckptmf";
pub const CKPT_PAYLOAD_EXT: &str = "ckptbin";

fn ckpt_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (
        stem.with_extension(CKPT_MANIFEST_EXT),
        stem.with_extension(CKPT_PAYLOAD_EXT),
    )
}

/// Write all parameters as little-endian f32 with a text manifest carrying
/// the architecture fingerprint, per-parameter offsets, and a payload crc.
pub fn save_checkpoint<R: Scalar>(stem: &Path, model: &mut BottleneckModel<R>) -> Result<()> {
    let (mf_path, bin_path) = ckpt_paths(stem);
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = String::new();
    let mut offset = 0usize;
    model.for_each_param(&mut |name, p| {
        let shape: Vec<String> = p.shape.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            entries,
            "param {name} shape={} offset={offset} len={}",
            shape.join(","),
            p.numel()
        );
        for &v in &p.data {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        offset += p.numel();
    });
    let mut manifest = String::new();
    let _ = writeln!(manifest, "ckptfmt = 1");
    let _ = writeln!(manifest, "backbone = {}", model.backbone.kind.name());
    let _ = writeln!(manifest, "width_scale = {}", model.backbone.width_scale);
    let _ = writeln!(manifest, "n_concepts = {}", model.n_concepts);
    let _ = writeln!(manifest, "crc32 = {:#010x}", crc32fast::hash(&payload));
    manifest.push_str(&entries);
    fs::write(&mf_path, manifest).map_err(|e| Error::io(&mf_path, e))?;
    fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))
}

/// Read the architecture fingerprint (backbone, width scale, concept
/// count) from a checkpoint manifest without touching the payload.
pub fn checkpoint_arch(stem: &Path) -> Result<(BackboneKind, f64, usize)> {
    let (mf_path, _) = ckpt_paths(stem);
    let text = fs::read_to_string(&mf_path).map_err(|e| Error::io(&mf_path, e))?;
    let bad = |reason: String| Error::format(&mf_path, reason);
    let mut backbone = None;
    let mut width = None;
    let mut n_concepts = None;
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with("param ") {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            match k {
                "backbone" => backbone = Some(BackboneKind::parse(v)?),
                "width_scale" => {
                    width = Some(
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad width_scale '{v}'")))?,
                    )
                }
                "n_concepts" => {
                    n_concepts = Some(
                        v.parse::<usize>()
                            .map_err(|_| bad(format!("bad n_concepts '{v}'")))?,
                    )
                }
                _ => {}
            }
        }
    }
    Ok((
        backbone.ok_or_else(|| bad("manifest misses backbone".into()))?,
        width.ok_or_else(|| bad("manifest misses width_scale".into()))?,
        n_concepts.ok_or_else(|| bad("manifest misses n_concepts".into()))?,
    ))
}

/// Restore parameters saved by [`save_checkpoint`]. The architecture
/// fingerprint must match exactly. In strict mode the parameter sets must
/// match one-to-one; lenient mode loads the intersection and returns how
/// many parameters were filled.
pub fn load_checkpoint<R: Scalar>(
    stem: &Path,
    model: &mut BottleneckModel<R>,
    strict: bool,
) -> Result<usize> {
    let (mf_path, bin_path) = ckpt_paths(stem);
    let text = fs::read_to_string(&mf_path).map_err(|e| Error::io(&mf_path, e))?;
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let bad = |reason: String| Error::format(&mf_path, reason);

    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("ckptfmt = 1") {
        return Err(bad("expected 'ckptfmt = 1' header".into()));
    }
    let mut backbone = None;
    let mut width = None;
    let mut n_concepts = None;
    let mut crc = None;
    struct Entry {
        shape: Vec<usize>,
        offset: usize,
        len: usize,
    }
    let mut entries: std::collections::HashMap<String, Entry> = std::collections::HashMap::new();
    for line in lines {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("param ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| bad("param line misses name".into()))?
                .to_string();
            let mut shape = None;
            let mut offset = None;
            let mut len = None;
            for kv in parts {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad field '{kv}'")))?;
                match k {
                    "shape" => {
                        shape = Some(
                            v.split(',')
                                .map(|s| s.parse::<usize>())
                                .collect::<std::result::Result<Vec<_>, _>>()
                                .map_err(|_| bad(format!("bad shape '{v}'")))?,
                        )
                    }
                    "offset" => {
                        offset =
                            Some(v.parse().map_err(|_| bad(format!("bad offset '{v}'")))?)
                    }
                    "len" => len = Some(v.parse().map_err(|_| bad(format!("bad len '{v}'")))?),
                    other => return Err(bad(format!("unknown param field '{other}'"))),
                }
            }
            let entry = Entry {
                shape: shape.ok_or_else(|| bad(format!("{name} misses shape")))?,
                offset: offset.ok_or_else(|| bad(format!("{name} misses offset")))?,
                len: len.ok_or_else(|| bad(format!("{name} misses len")))?,
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(bad(format!("duplicate param '{name}'")));
            }
        } else if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            match k {
                "backbone" => backbone = Some(v.to_string()),
                "width_scale" => {
                    width = Some(
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad width_scale '{v}'")))?,
                    )
                }
                "n_concepts" => {
                    n_concepts = Some(
                        v.parse::<usize>()
                            .map_err(|_| bad(format!("bad n_concepts '{v}'")))?,
                    )
                }
                "crc32" => {
                    let raw = v.trim_start_matches("0x");
                    crc = Some(
                        u32::from_str_radix(raw, 16)
                            .map_err(|_| bad(format!("bad crc '{v}'")))?,
                    )
                }
                other => return Err(bad(format!("unknown manifest key '{other}'"))),
            }
        } else {
            return Err(bad(format!("unparseable line '{line}'")));
        }
    }

    let fp_backbone = backbone.ok_or_else(|| bad("manifest misses backbone".into()))?;
    if fp_backbone != model.backbone.kind.name() {
        return Err(Error::validation(format!(
            "checkpoint is for backbone '{fp_backbone}', model is '{}'",
            model.backbone.kind.name()
        )));
    }
    let fp_width = width.ok_or_else(|| bad("manifest misses width_scale".into()))?;
    if fp_width != model.backbone.width_scale {
        return Err(Error::validation(format!(
            "checkpoint width_scale {fp_width} does not match model {}",
            model.backbone.width_scale
        )));
    }
    let fp_nc = n_concepts.ok_or_else(|| bad("manifest misses n_concepts".into()))?;
    if fp_nc != model.n_concepts {
        return Err(Error::validation(format!(
            "checkpoint n_concepts {fp_nc} does not match model {}",
            model.n_concepts
        )));
    }
    let crc = crc.ok_or_else(|| bad("manifest misses crc32".into()))?;
    let actual = crc32fast::hash(&payload);
    if actual != crc {
        return Err(Error::corrupt(
            &bin_path,
            format!("checksum mismatch: manifest {crc:#010x}, payload {actual:#010x}"),
        ));
    }

    let mut loaded = 0usize;
    let mut missing: Vec<String> = Vec::new();
    let mut result = Ok(());
    model.for_each_param(&mut |name, p| {
        if result.is_err() {
            return;
        }
        match entries.remove(&name) {
            None => missing.push(name),
            Some(e) => {
                if e.shape != p.shape || e.len != p.numel() {
                    result = Err(Error::validation(format!(
                        "checkpoint shape {:?} does not match '{name}' {:?}",
                        e.shape, p.shape
                    )));
                    return;
                }
                let start = e.offset * 4;
                let end = start + e.len * 4;
                if end > payload.len() {
                    result = Err(Error::corrupt(
                        &bin_path,
                        format!("'{name}' extends past the payload"),
                    ));
                    return;
                }
                for (i, chunk) in payload[start..end].chunks_exact(4).enumerate() {
                    let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                    p.data[i] = R::from_f64(v as f64);
                }
                p.zero_grad();
                loaded += 1;
            }
        }
    });
    result?;
    if strict {
        if let Some(name) = missing.first() {
            return Err(Error::validation(format!(
                "checkpoint misses parameter '{name}'"
            )));
        }
        if let Some(name) = entries.keys().next() {
            return Err(Error::validation(format!(
                "checkpoint has unknown parameter '{name}'"
            )));
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss;
    use crate::seed::{self, tag};

    fn rng(v: u64) -> ChaCha8Rng {
        seed::stream(v, &[tag("model-test")])
    }

    fn tiny_model(seed_value: u64) -> BottleneckModel<f64> {
        let mut r = rng(seed_value);
        BottleneckModel::new(BackboneKind::ResNet34, 0.05, 4, 0.0, &mut r).unwrap()
    }

    fn tiny_model_f32(seed_value: u64) -> BottleneckModel<f32> {
        let mut r = rng(seed_value);
        BottleneckModel::new(BackboneKind::ResNet34, 0.05, 4, 0.0, &mut r).unwrap()
    }

    fn input(n: usize, edge: usize) -> Tensor<f64> {
        let total = n * edge * edge * edge;
        Tensor::new(
            vec![n, 1, edge, edge, edge],
            (0..total).map(|i| ((i * 31) % 89) as f64 / 89.0).collect(),
        )
    }

    #[test]
    fn forward_produces_bounded_concepts_and_two_logits() {
        let mut m = tiny_model(1);
        let mut r = rng(2);
        let out = m.forward(&input(2, 8), false, &mut r).unwrap();
        assert_eq!(out.logits.shape, vec![2, 2]);
        assert_eq!(out.concepts.shape, vec![2, 4]);
        for &c in &out.concepts.data {
            assert!(c >= CONCEPT_CLAMP && c <= 1.0 - CONCEPT_CLAMP);
        }
    }

    #[test]
    fn rejects_undersized_input() {
        let mut m = tiny_model(1);
        let mut r = rng(2);
        let bad = Tensor::new(vec![1, 1, 2, 2, 2], vec![0.0; 8]);
        assert!(m.forward(&bad, false, &mut r).is_err());
        let not_single_channel = Tensor::new(vec![1, 2, 8, 8, 8], vec![0.0; 1024]);
        assert!(m.forward(&not_single_channel, false, &mut r).is_err());
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let mut a = tiny_model(7);
        let mut b = tiny_model(7);
        let mut ra = rng(3);
        let mut rb = rng(3);
        let x = input(1, 8);
        let oa = a.forward(&x, false, &mut ra).unwrap();
        let ob = b.forward(&x, false, &mut rb).unwrap();
        assert_eq!(oa.logits.data, ob.logits.data);
        assert_eq!(oa.concepts.data, ob.concepts.data);
    }

    #[test]
    fn intervention_changes_logits_through_the_task_head_only() {
        let mut m = tiny_model(5);
        let mut r = rng(6);
        let x = input(1, 8);
        let z = m.encode(&x).unwrap();
        let c = m.concept_forward(&z);
        let base = m.task_forward(&z, &c, false, &mut r);
        let mut edited = c.clone();
        edited.data[2] = 1.0 - CONCEPT_CLAMP;
        let mut r2 = rng(6);
        let after = m.task_forward(&z, &edited, false, &mut r2);
        assert_ne!(base.data, after.data);
        // Composed forward agrees with the split path.
        let mut m2 = tiny_model(5);
        let mut r3 = rng(6);
        let full = m2.forward(&x, false, &mut r3).unwrap();
        assert_eq!(full.logits.data, base.data);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut m = tiny_model(9);
        let x = input(2, 8);
        let labels = [1u8, 0];
        let targets = [0.8, 0.2, 0.4, 0.6, 0.1, 0.9, 0.5, 0.5];
        let (alpha, beta, gamma, smoothing) = (0.01, 1.0, 2.0, 0.05);

        let loss_of = |m: &mut BottleneckModel<f64>| -> f64 {
            let mut r = rng(10);
            let out = m.forward(&x, false, &mut r).unwrap();
            let (task, _) = loss::focal_loss(&out.logits, &labels, gamma, smoothing);
            let (concept, _) = loss::concept_mse(&out.concepts, &targets);
            loss::total_loss(task, concept, alpha, beta)
        };

        // Analytic pass.
        let mut r = rng(10);
        let out = m.forward(&x, false, &mut r).unwrap();
        let (_, mut d_logits) = loss::focal_loss(&out.logits, &labels, gamma, smoothing);
        let (_, mut d_concepts) = loss::concept_mse(&out.concepts, &targets);
        for g in &mut d_logits.data {
            *g *= beta;
        }
        for g in &mut d_concepts.data {
            *g *= alpha;
        }
        m.zero_grad();
        m.backward(&d_logits, &d_concepts);

        let mut samples = Vec::new();
        m.for_each_param(&mut |name, p| {
            samples.push((name, p.grad[p.numel() / 2]));
        });

        let h = 1e-5;
        for (pi, (name, analytic)) in samples.iter().enumerate().step_by(5) {
            let mut orig = 0.0;
            let set = |v: f64, m: &mut BottleneckModel<f64>| {
                m.for_each_param(&mut |n, p| {
                    if n == *name {
                        let mid = p.numel() / 2;
                        p.data[mid] = v;
                    }
                });
            };
            m.for_each_param(&mut |n, p| {
                if n == *name {
                    orig = p.data[p.numel() / 2];
                }
            });
            set(orig + h, &mut m);
            let fp = loss_of(&mut m);
            set(orig - h, &mut m);
            let fm = loss_of(&mut m);
            set(orig, &mut m);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "param {pi} '{name}': analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        // Stored precision is f32, so the exact guarantee holds for f32 models.
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut a = tiny_model_f32(11);
        save_checkpoint(&stem, &mut a).unwrap();

        let mut b = tiny_model_f32(12); // different weights, same architecture
        let loaded = load_checkpoint(&stem, &mut b, true).unwrap();
        let mut count = 0;
        a.for_each_param(&mut |_, _| count += 1);
        assert_eq!(loaded, count);

        let x32 = {
            let x = input(1, 8);
            Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v as f32).collect())
        };
        let mut ra = rng(13);
        let mut rb = rng(13);
        let oa = a.forward(&x32, false, &mut ra).unwrap();
        let ob = b.forward(&x32, false, &mut rb).unwrap();
        assert_eq!(oa.logits.data, ob.logits.data);
        assert_eq!(oa.concepts.data, ob.concepts.data);
    }

    #[test]
    fn checkpoint_arch_reads_the_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut a = tiny_model(20);
        save_checkpoint(&stem, &mut a).unwrap();
        let (kind, width, nc) = checkpoint_arch(&stem).unwrap();
        assert_eq!(kind, BackboneKind::ResNet34);
        assert_eq!(width, 0.05);
        assert_eq!(nc, 4);
    }

    #[test]
    fn checkpoint_rejects_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut a = tiny_model(14);
        save_checkpoint(&stem, &mut a).unwrap();
        let mut r = rng(15);
        let mut wrong_nc =
            BottleneckModel::<f64>::new(BackboneKind::ResNet34, 0.05, 5, 0.0, &mut r).unwrap();
        assert!(load_checkpoint(&stem, &mut wrong_nc, true).is_err());
        let mut wrong_width =
            BottleneckModel::<f64>::new(BackboneKind::ResNet34, 0.1, 4, 0.0, &mut r).unwrap();
        assert!(load_checkpoint(&stem, &mut wrong_width, true).is_err());
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut a = tiny_model(16);
        save_checkpoint(&stem, &mut a).unwrap();
        let bin = stem.with_extension(CKPT_PAYLOAD_EXT);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[8] ^= 0xff;
        fs::write(&bin, bytes).unwrap();
        let err = load_checkpoint(&stem, &mut a, true).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn lenient_load_tolerates_a_missing_entry() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut a = tiny_model(17);
        save_checkpoint(&stem, &mut a).unwrap();
        // Drop one param line; offsets of the others stay valid.
        let mf = stem.with_extension(CKPT_MANIFEST_EXT);
        let text = fs::read_to_string(&mf).unwrap();
        let filtered: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with("param task.out.bias "))
            .collect();
        fs::write(&mf, filtered.join("\n") + "\n").unwrap();

        let mut strict_target = tiny_model(18);
        assert!(load_checkpoint(&stem, &mut strict_target, true).is_err());

        let mut lenient_target = tiny_model(18);
        let mut count = 0;
        lenient_target.for_each_param(&mut |_, _| count += 1);
        let loaded = load_checkpoint(&stem, &mut lenient_target, false).unwrap();
        assert_eq!(loaded, count - 1);
    }

    #[test]
    fn stage_freeze_controls_trainable_flags() {
        let mut m = tiny_model(19);
        m.freeze_encoder().unwrap();
        let mut any_backbone_trainable = false;
        let mut heads_trainable = true;
        m.for_each_param(&mut |name, p| {
            if name.starts_with("backbone.") {
                any_backbone_trainable |= p.trainable;
            } else {
                heads_trainable &= p.trainable;
            }
        });
        assert!(!any_backbone_trainable);
        assert!(heads_trainable);

        m.set_encoder_trainable_stages(&["stage3".into(), "stage4".into()])
            .unwrap();
        m.for_each_param(&mut |name, p| {
            let expect = !name.starts_with("backbone.")
                || name.starts_with("backbone.stage3.")
                || name.starts_with("backbone.stage4.");
            assert_eq!(p.trainable, expect, "{name}");
        });
    }
}

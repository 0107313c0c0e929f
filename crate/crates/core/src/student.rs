//! The student network.
//!
//! ```text
//! features ─ enc1 ─ silu ─ enc2 ─ ℓ2-normalize ─ z ─┐
//!                                                   ├─ concat ─ head ─ logit
//! biomarkers ─ bio ─ silu ──────────────────────────┘
//! ```
//!
//! All parameters live in one flat buffer so optimizers and finite-difference checks can
//! treat them uniformly; [`Layout`] maps layer names to slices of it.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{read_matrix, write_matrix};
use crate::matrix::{self, Matrix};

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU, `x * sigmoid(x)`. Smooth everywhere, so finite differences behave.
#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentDims {
    /// Input feature width (f).
    pub features: usize,
    /// Embedding width (d); must match the teacher embedding width when distilling.
    pub embed: usize,
    /// Biomarker width (m).
    pub biomarkers: usize,
    /// Biomarker embedding width (h).
    pub bio_hidden: usize,
    /// Hidden width between the two encoder layers.
    pub encoder_hidden: usize,
}

impl StudentDims {
    /// Dims with the encoder hidden width equal to the embedding width.
    pub fn new(features: usize, embed: usize, biomarkers: usize, bio_hidden: usize) -> Self {
        Self {
            features,
            embed,
            biomarkers,
            bio_hidden,
            encoder_hidden: embed,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.features,
            self.embed,
            self.biomarkers,
            self.bio_hidden,
            self.encoder_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("student dims must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlot {
    pub rows: usize,
    pub cols: usize,
    pub weight: usize,
    pub bias: usize,
}

impl DenseSlot {
    fn weight_len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub enc1: DenseSlot,
    pub enc2: DenseSlot,
    pub bio: DenseSlot,
    pub head: DenseSlot,
    pub len: usize,
}

impl Layout {
    fn new(d: &StudentDims) -> Self {
        let mut cursor = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = DenseSlot {
                rows,
                cols,
                weight: cursor,
                bias: cursor + rows * cols,
            };
            cursor += rows * cols + rows;
            s
        };
        let enc1 = slot(d.encoder_hidden, d.features);
        let enc2 = slot(d.embed, d.encoder_hidden);
        let bio = slot(d.bio_hidden, d.biomarkers);
        let head = slot(1, d.embed + d.bio_hidden);
        Layout {
            enc1,
            enc2,
            bio,
            head,
            len: cursor,
        }
    }

    pub fn slots(&self) -> [(&'static str, DenseSlot); 4] {
        [
            ("enc1", self.enc1),
            ("enc2", self.enc2),
            ("bio", self.bio),
            ("head", self.head),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub dims: StudentDims,
    pub seed: u64,
    layout: Layout,
    values: Vec<f64>,
}

/// Parameter gradients, laid out like [`StudentParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &StudentParams) -> Self {
        Self {
            values: vec![0.0; p.values.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub features: Vec<f64>,
    pub biomarkers: Vec<f64>,
    pub enc_pre: Vec<f64>,
    pub enc_hidden: Vec<f64>,
    /// Encoder output before normalization.
    pub enc_out: Vec<f64>,
    pub enc_norm: f64,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    pub bio_pre: Vec<f64>,
    pub bio_embedding: Vec<f64>,
    pub logit: f64,
}

fn affine(values: &[f64], slot: DenseSlot, input: &[f64]) -> Vec<f64> {
    let w = &values[slot.weight..slot.weight + slot.weight_len()];
    let b = &values[slot.bias..slot.bias + slot.rows];
    w.chunks_exact(slot.cols)
        .zip(b)
        .map(|(row, bias)| matrix::dot(row, input) + bias)
        .collect()
}

/// Accumulates `d_out ⊗ input` into the slot's weight gradient and `d_out` into its bias;
/// returns `Wᵀ d_out`.
fn affine_backward(
    values: &[f64],
    grads: &mut [f64],
    slot: DenseSlot,
    input: &[f64],
    d_out: &[f64],
) -> Vec<f64> {
    let mut d_in = vec![0.0; slot.cols];
    for (r, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let w_row = &values[slot.weight + r * slot.cols..slot.weight + (r + 1) * slot.cols];
        let gw_row = &mut grads[slot.weight + r * slot.cols..slot.weight + (r + 1) * slot.cols];
        for c in 0..slot.cols {
            gw_row[c] += g * input[c];
            d_in[c] += g * w_row[c];
        }
        grads[slot.bias + r] += g;
    }
    d_in
}

impl StudentParams {
    /// Uniform initialization in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init(dims: StudentDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut values = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, slot) in layout.slots() {
            let bound = 1.0 / (slot.cols as f64).sqrt();
            for v in &mut values[slot.weight..slot.bias + slot.rows] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            dims,
            seed,
            layout,
            values,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weights(&self, slot: DenseSlot) -> &[f64] {
        &self.values[slot.weight..slot.weight + slot.weight_len()]
    }

    pub fn weights_mut(&mut self, slot: DenseSlot) -> &mut [f64] {
        &mut self.values[slot.weight..slot.weight + slot.weight_len()]
    }

    pub fn bias(&self, slot: DenseSlot) -> &[f64] {
        &self.values[slot.bias..slot.bias + slot.rows]
    }

    pub fn bias_mut(&mut self, slot: DenseSlot) -> &mut [f64] {
        &mut self.values[slot.bias..slot.bias + slot.rows]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, features: &[f64], biomarkers: &[f64]) -> Result<ForwardTrace> {
        if features.len() != self.dims.features || biomarkers.len() != self.dims.biomarkers {
            return Err(Error::Shape(format!(
                "student expects {} features and {} biomarkers, got {} and {}",
                self.dims.features,
                self.dims.biomarkers,
                features.len(),
                biomarkers.len()
            )));
        }
        let l = &self.layout;
        let enc_pre = affine(&self.values, l.enc1, features);
        let enc_hidden: Vec<f64> = enc_pre.iter().map(|&x| silu(x)).collect();
        let enc_out = affine(&self.values, l.enc2, &enc_hidden);
        let enc_norm = matrix::norm(&enc_out);
        if enc_norm == 0.0 || !enc_norm.is_finite() {
            return Err(Error::ZeroNorm("student encoder output".into()));
        }
        let embedding: Vec<f64> = enc_out.iter().map(|v| v / enc_norm).collect();
        let bio_pre = affine(&self.values, l.bio, biomarkers);
        let bio_embedding: Vec<f64> = bio_pre.iter().map(|&x| silu(x)).collect();
        let head_w = self.weights(l.head);
        let (wz, wb) = head_w.split_at(self.dims.embed);
        let logit =
            matrix::dot(wz, &embedding) + matrix::dot(wb, &bio_embedding) + self.bias(l.head)[0];
        Ok(ForwardTrace {
            features: features.to_vec(),
            biomarkers: biomarkers.to_vec(),
            enc_pre,
            enc_hidden,
            enc_out,
            enc_norm,
            embedding,
            bio_pre,
            bio_embedding,
            logit,
        })
    }

    /// Adds the parameter gradients for upstream gradients `d_embedding` (w.r.t. the unit
    /// embedding) and `d_logit` into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        d_embedding: &[f64],
        d_logit: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        let d = self.dims.embed;
        if d_embedding.len() != d || grads.values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "embedding gradient of length {} for embedding width {d}",
                d_embedding.len()
            )));
        }
        let l = &self.layout;
        let g = &mut grads.values;

        let mut head_in = trace.embedding.clone();
        head_in.extend_from_slice(&trace.bio_embedding);
        let d_head_in = affine_backward(&self.values, g, l.head, &head_in, &[d_logit]);
        let (d_z_head, d_bio_emb) = d_head_in.split_at(d);

        // Through z = u / ‖u‖: du = (I - z zᵀ) dz / ‖u‖.
        let dz: Vec<f64> = d_embedding.iter().zip(d_z_head).map(|(a, b)| a + b).collect();
        let radial = matrix::dot(&trace.embedding, &dz);
        let d_enc_out: Vec<f64> = dz
            .iter()
            .zip(&trace.embedding)
            .map(|(g, z)| (g - radial * z) / trace.enc_norm)
            .collect();

        let d_hidden = affine_backward(&self.values, g, l.enc2, &trace.enc_hidden, &d_enc_out);
        let d_enc_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.enc_pre)
            .map(|(g, &x)| g * silu_grad(x))
            .collect();
        affine_backward(&self.values, g, l.enc1, &trace.features, &d_enc_pre);

        let d_bio_pre: Vec<f64> = d_bio_emb
            .iter()
            .zip(&trace.bio_pre)
            .map(|(g, &x)| g * silu_grad(x))
            .collect();
        affine_backward(&self.values, g, l.bio, &trace.biomarkers, &d_bio_pre);
        Ok(())
    }

    pub fn backward(&self, trace: &ForwardTrace, d_embedding: &[f64], d_logit: f64) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(trace, d_embedding, d_logit, &mut grads)?;
        Ok(grads)
    }

    /// Writes `<stem>.manifest` (seed, dims, layer shapes) and `<stem>.bin` (one sidecar
    /// matrix block per weight and bias, in manifest order).
    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<()> {
        let manifest_path = dir.join(format!("{stem}.manifest"));
        let bin_path = dir.join(format!("{stem}.bin"));
        let d = &self.dims;
        let mut manifest = format!(
            "seed,{}\ndims,{},{},{},{},{}\n",
            self.seed, d.features, d.embed, d.biomarkers, d.bio_hidden, d.encoder_hidden
        );
        let f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut out = BufWriter::new(f);
        for (name, slot) in self.layout.slots() {
            manifest.push_str(&format!("layer,{name}.weight,{},{}\n", slot.rows, slot.cols));
            manifest.push_str(&format!("layer,{name}.bias,1,{}\n", slot.rows));
            let w = Matrix::from_vec(slot.rows, slot.cols, self.weights(slot).to_vec())?;
            let b = Matrix::from_vec(1, slot.rows, self.bias(slot).to_vec())?;
            write_matrix(&mut out, &w).map_err(|e| Error::io(&bin_path, e))?;
            write_matrix(&mut out, &b).map_err(|e| Error::io(&bin_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&bin_path, e))?;
        std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Reads a checkpoint back; values pass through `f32` on disk.
    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{stem}.manifest"));
        let bin_path = dir.join(format!("{stem}.bin"));
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut seed = None;
        let mut dims = None;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Parse {
                    line: i as u64 + 1,
                    message: format!("bad number {s:?} in checkpoint manifest"),
                })
            };
            match f.first().copied() {
                Some("seed") if f.len() == 2 => seed = Some(num(f[1])?),
                Some("dims") if f.len() == 6 => {
                    let v = f[1..].iter().map(|s| num(s).map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
                    dims = Some(StudentDims {
                        features: v[0],
                        embed: v[1],
                        biomarkers: v[2],
                        bio_hidden: v[3],
                        encoder_hidden: v[4],
                    });
                }
                _ => {}
            }
        }
        let (seed, dims) = seed.zip(dims).ok_or_else(|| {
            Error::Validation(format!("{} lacks seed or dims", manifest_path.display()))
        })?;
        let mut params = StudentParams::init(dims, seed)?;
        let f = std::fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut input = BufReader::new(f);
        for (_, slot) in params.layout.slots() {
            let w = read_matrix(&mut input).map_err(|e| Error::io(&bin_path, e))?;
            let b = read_matrix(&mut input).map_err(|e| Error::io(&bin_path, e))?;
            if w.rows() != slot.rows || w.cols() != slot.cols || b.cols() != slot.rows {
                return Err(Error::Shape("checkpoint block shape mismatch".into()));
            }
            params.weights_mut(slot).copy_from_slice(w.as_slice());
            params.bias_mut(slot).copy_from_slice(b.as_slice());
        }
        if input.fill_buf().map_err(|e| Error::io(&bin_path, e))?.is_empty() {
            Ok(params)
        } else {
            Err(Error::Validation(format!("trailing bytes in {}", bin_path.display())))
        }
    }
}

pub fn init_student(dims: StudentDims, seed: u64) -> Result<StudentParams> {
    StudentParams::init(dims, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(seed: u64) -> StudentParams {
        StudentParams::init(StudentDims::new(3, 4, 2, 2), seed).unwrap()
    }

    fn inputs(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, c)
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        assert_eq!(tiny(7), tiny(7));
        assert_ne!(tiny(7).values(), tiny(8).values());
        assert!(init_student(StudentDims::new(1, 1, 1, 1), 0).is_ok());
        assert!(init_student(StudentDims::new(0, 1, 1, 1), 0).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = StudentParams::init(StudentDims::new(16, 8, 4, 4), 3).unwrap();
        for (_, slot) in p.layout().slots() {
            let bound = 1.0 / (slot.cols as f64).sqrt();
            assert!(p.weights(slot).iter().chain(p.bias(slot)).all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn embedding_is_unit_norm() {
        for seed in 0..10 {
            let (x, c) = inputs(seed);
            let t = tiny(seed).forward(&x, &c).unwrap();
            assert!((matrix::norm(&t.embedding) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_gives_bias_logit() {
        let mut p = tiny(1);
        let head = p.layout().head;
        p.weights_mut(head).iter_mut().for_each(|w| *w = 0.0);
        p.bias_mut(head)[0] = 0.37;
        for seed in 0..5 {
            let (x, c) = inputs(seed);
            assert_eq!(p.forward(&x, &c).unwrap().logit, 0.37);
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let p = tiny(11);
        let (x, c) = inputs(12);
        let v = p.values();
        // enc1: 4x3 then 4 bias; enc2: 4x4 then 4; bio: 2x2 then 2; head: 1x6 then 1.
        let act = |t: f64| t / (1.0 + (-t).exp());
        let mut off = 0;
        let mut h1 = [0.0; 4];
        for r in 0..4 {
            let mut s = v[12 + r];
            for k in 0..3 {
                s += v[r * 3 + k] * x[k];
            }
            h1[r] = act(s);
        }
        off += 16;
        let mut u = [0.0; 4];
        for r in 0..4 {
            let mut s = v[off + 16 + r];
            for k in 0..4 {
                s += v[off + r * 4 + k] * h1[k];
            }
            u[r] = s;
        }
        off += 20;
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] + u[3] * u[3]).sqrt();
        let mut b = [0.0; 2];
        for r in 0..2 {
            let mut s = v[off + 4 + r];
            for k in 0..2 {
                s += v[off + r * 2 + k] * c[k];
            }
            b[r] = act(s);
        }
        off += 6;
        let mut logit = v[off + 6];
        for k in 0..4 {
            logit += v[off + k] * u[k] / n;
        }
        for k in 0..2 {
            logit += v[off + 4 + k] * b[k];
        }
        let t = p.forward(&x, &c).unwrap();
        assert!((t.logit - logit).abs() < 1e-12, "{} vs {logit}", t.logit);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = tiny(2);
        let (x, c) = inputs(3);
        let t = p.forward(&x, &c).unwrap();
        let g = p.backward(&t, &[0.0; 4], 0.0).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_one() {
        let p = tiny(2);
        let (x, c) = inputs(3);
        let t = p.forward(&x, &c).unwrap();
        let g = p.backward(&t, &[0.0; 4], 1.0).unwrap();
        assert_eq!(g.values[p.layout().head.bias], 1.0);
    }

    /// Scalar objective used by the finite-difference check: a fixed linear functional of the
    /// unit embedding plus a multiple of the logit.
    fn objective(p: &StudentParams, x: &[f64], c: &[f64], a: &[f64], b: f64) -> f64 {
        let t = p.forward(x, c).unwrap();
        matrix::dot(a, &t.embedding) + b * t.logit
    }

    #[test]
    fn backward_matches_central_differences() {
        for seed in 0..5 {
            let p = tiny(seed);
            let (x, c) = inputs(seed + 100);
            let a = [0.3, -0.7, 0.2, 0.5];
            let b = -0.4;
            let t = p.forward(&x, &c).unwrap();
            let g = p.backward(&t, &a, b).unwrap();
            let eps = 1e-4;
            let mut worst: f64 = 0.0;
            for i in 0..p.values().len() {
                let mut plus = p.clone();
                plus.values_mut()[i] += eps;
                let mut minus = p.clone();
                minus.values_mut()[i] -= eps;
                let fd = (objective(&plus, &x, &c, &a, b) - objective(&minus, &x, &c, &a, b)) / (2.0 * eps);
                let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn embedding_directional_derivative_is_tangent() {
        let p = tiny(5);
        let (x, c) = inputs(6);
        let base = p.forward(&x, &c).unwrap().embedding;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir: Vec<f64> = (0..p.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut q = p.clone();
            q.values_mut().iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
            q.forward(&x, &c).unwrap().embedding
        };
        let (zp, zm) = (shifted(h), shifted(-h));
        let deriv: Vec<f64> = zp.iter().zip(&zm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(matrix::dot(&deriv, &base).abs() < 1e-6);
    }

    #[test]
    fn scaling_last_encoder_layer_keeps_embedding() {
        let p = tiny(4);
        let (x, c) = inputs(5);
        let mut q = p.clone();
        let slot = q.layout().enc2;
        q.weights_mut(slot).iter_mut().for_each(|w| *w *= 2.0);
        q.bias_mut(slot).iter_mut().for_each(|w| *w *= 2.0);
        let a = p.forward(&x, &c).unwrap().embedding;
        let b = q.forward(&x, &c).unwrap().embedding;
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_checks() {
        let p = tiny(0);
        assert!(p.forward(&[1.0; 2], &[1.0; 2]).is_err());
        let t = p.forward(&[1.0; 3], &[1.0; 2]).unwrap();
        assert!(p.backward(&t, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny(21);
        p.save_checkpoint(dir.path(), "student").unwrap();
        let q = StudentParams::load_checkpoint(dir.path(), "student").unwrap();
        assert_eq!(q.dims, p.dims);
        assert_eq!(q.seed, 21);
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}

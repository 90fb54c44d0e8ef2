//! Local-linearity and teacher/student alignment measurements.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_batch, sample_seeds, AttackConfig, InnerKind, InnerObjective};
use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::loss::ce_rows;
use crate::model::Mlp;
use crate::seed::derive_seed;
use crate::tape::{LeafKind, Tape};
use crate::tensor::Tensor;

const CHUNK: usize = 256;
const MIN_GRAD_NORM: f64 = 1e-12;

/// Which scalarization of the model defines "the input gradient".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientProbe {
    /// `d CE(f(x), y) / dx` at the true label.
    #[default]
    CrossEntropy,
    /// Gradient of the largest logit (lowest index on ties).
    MaxLogit,
}

fn default_noise() -> f64 {
    8.0 / 255.0
}

fn default_probes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearityProbeConfig {
    /// Per-element bound of the uniform noise.
    #[serde(default = "default_noise")]
    pub noise_magnitude: f64,
    #[serde(default = "default_probes")]
    pub num_probes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LinearityProbeConfig {
    fn default() -> Self {
        LinearityProbeConfig {
            noise_magnitude: default_noise(),
            num_probes: 1,
            seed: 0,
        }
    }
}

impl LinearityProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_magnitude > 0.0) || self.num_probes == 0 {
            return contract("probe needs noise_magnitude > 0 and num_probes >= 1");
        }
        Ok(())
    }

    /// Uniform noise in `[-m, m]^d` for `(sample, probe)`.
    pub fn noise(&self, dim: usize, sample: usize, probe: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, sample as u64, probe as u64));
        let u = Uniform::new_inclusive(-self.noise_magnitude, self.noise_magnitude).expect("positive magnitude");
        Tensor::vector((0..dim).map(|_| u.sample(&mut rng)).collect())
    }
}

fn remainder_norm(jac: &Tensor, clean: &[f64], shifted: &[f64], eps: &Tensor) -> Result<f64> {
    let lin = jac.matvec(eps)?;
    let mut acc = 0.0;
    for ((&fs, &fc), &l) in shifted.iter().zip(clean).zip(lin.data()) {
        let r = fs - fc - l;
        acc += r * r;
    }
    Ok(libm::sqrt(acc))
}

fn l2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().fold(0.0, |a, &x| a + x * x))
}

/// `||f(x+e) - f(x) - J e|| / ||f(x+e)||` for one sample.
pub fn remainder_proportion(model: &Mlp, x: &Tensor, noise: &Tensor) -> Result<f64> {
    noise.expect_shape(x.shape())?;
    let jac = model.input_jacobian(x)?;
    let clean = model.forward(x)?;
    let shifted = model.forward(&x.add(noise)?)?;
    let denom = shifted.norm_l2();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("model output at x + noise is zero".into()));
    }
    Ok(remainder_norm(&jac, clean.data(), shifted.data(), noise)? / denom)
}

/// Mean remainder proportion over rows and probes; probes where the output
/// is exactly zero are left out.
pub fn mean_remainder(model: &Mlp, xs: &Tensor, probe: &LinearityProbeConfig, first_index: usize) -> Result<f64> {
    probe.validate()?;
    let (n, d) = (xs.rows(), xs.cols());
    if n == 0 {
        return contract("empty batch");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let rows: Vec<&[f64]> = (start..end).map(|i| xs.row(i)).collect();
        let batch = Tensor::stack_rows(&rows)?;
        let jacs = model.batch_input_jacobians(&batch)?;
        let clean = model.logits_batch(&batch)?;
        for p in 0..probe.num_probes {
            let mut shifted = batch.clone();
            let noises: Vec<Tensor> = (start..end)
                .map(|i| probe.noise(d, first_index + i, p))
                .collect();
            for (r, nz) in noises.iter().enumerate() {
                for (v, &e) in shifted.data_mut()[r * d..(r + 1) * d].iter_mut().zip(nz.data()) {
                    *v += e;
                }
            }
            let out = model.logits_batch(&shifted)?;
            for (r, nz) in noises.iter().enumerate() {
                let denom = l2(out.row(r));
                if !(denom > 0.0) {
                    continue;
                }
                total += remainder_norm(&jacs[r], clean.row(r), out.row(r), nz)? / denom;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("model output is zero at every probe".into()));
    }
    Ok(total / count as f64)
}

/// Per-row input gradients `[b x d]` under the chosen probe.
pub fn input_gradients(model: &Mlp, xs: &Tensor, labels: &[usize], probe: GradientProbe) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, LeafKind::Constant)?;
    let input = tape.input(xs.clone());
    let logits = p.logits(&mut tape, input)?;
    let rows = match probe {
        GradientProbe::CrossEntropy => ce_rows(&mut tape, logits, labels)?,
        GradientProbe::MaxLogit => {
            let z = tape.value(logits).clone();
            let k = z.cols();
            let mut mask = Tensor::zeros(z.shape());
            for i in 0..z.rows() {
                let top = argmax(z.row(i));
                mask.data_mut()[i * k + top] = 1.0;
            }
            let m = tape.constant(mask);
            let picked = tape.mul(logits, m)?;
            tape.sum_rows(picked)?
        }
    };
    let total = tape.sum(rows)?;
    let mut g = tape.backprop_scalar(total, &[input])?;
    Ok(g.remove(input).expect("requested leaf"))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn paired_gradients(
    teacher: &Mlp,
    student: &Mlp,
    data: &Dataset,
    probe: GradientProbe,
    mut visit: impl FnMut(&[f64], &[f64]),
) -> Result<()> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (xs, ys) = data.gather(chunk);
        let gt = input_gradients(teacher, &xs, &ys, probe)?;
        let gs = input_gradients(student, &xs, &ys, probe)?;
        for r in 0..xs.rows() {
            visit(gt.row(r), gs.row(r));
        }
    }
    Ok(())
}

/// Mean `||g_T(x) - g_S(x)||_2` over the dataset.
pub fn gradient_distance(teacher: &Mlp, student: &Mlp, data: &Dataset, probe: GradientProbe) -> Result<f64> {
    let mut total = 0.0;
    paired_gradients(teacher, student, data, probe, |t, s| {
        let d: Vec<f64> = t.iter().zip(s).map(|(a, b)| a - b).collect();
        total += l2(&d);
    })?;
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSummary {
    pub mean: f64,
    /// Samples left out because a gradient norm fell below `1e-12`.
    pub skipped: usize,
}

/// Mean cosine between teacher and student input gradients.
pub fn gradient_cosine(teacher: &Mlp, student: &Mlp, data: &Dataset, probe: GradientProbe) -> Result<CosineSummary> {
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    paired_gradients(teacher, student, data, probe, |t, s| {
        let (nt, ns) = (l2(t), l2(s));
        if nt < MIN_GRAD_NORM || ns < MIN_GRAD_NORM {
            skipped += 1;
            return;
        }
        let dot = t.iter().zip(s).fold(0.0, |a, (x, y)| a + x * y);
        total += (dot / (nt * ns)).clamp(-1.0, 1.0);
        used += 1;
    })?;
    if used == 0 {
        return Err(Error::Degenerate("every sample had a vanishing input gradient".into()));
    }
    Ok(CosineSummary {
        mean: total / used as f64,
        skipped,
    })
}

/// `||f_T(x+d) - f_S(x+d)||_2`.
pub fn pointwise_distance(teacher: &Mlp, student: &Mlp, x: &Tensor, delta: &Tensor) -> Result<f64> {
    delta.expect_shape(x.shape())?;
    let p = x.add(delta)?;
    Ok(teacher.forward(&p)?.sub(&student.forward(&p)?)?.norm_l2())
}

/// Terms of the point-wise distance bound at `(x, delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseBound {
    pub distance: f64,
    /// `||f_T(x) - f_S(x)||`
    pub clean_gap: f64,
    /// `||(J_T - J_S) delta||`
    pub jacobian_term: f64,
    /// `||f_T(x+d) - f_T(x) - J_T d||`
    pub teacher_remainder: f64,
    pub student_remainder: f64,
}

impl PointwiseBound {
    pub fn upper_bound(&self) -> f64 {
        self.clean_gap + self.jacobian_term + self.teacher_remainder + self.student_remainder
    }
}

pub fn pointwise_decomposition(teacher: &Mlp, student: &Mlp, x: &Tensor, delta: &Tensor) -> Result<PointwiseBound> {
    delta.expect_shape(x.shape())?;
    let p = x.add(delta)?;
    let (jt, js) = (teacher.input_jacobian(x)?, student.input_jacobian(x)?);
    let (ft, fs) = (teacher.forward(x)?, student.forward(x)?);
    let (ftp, fsp) = (teacher.forward(&p)?, student.forward(&p)?);
    let jdiff = jt.sub(&js)?;
    Ok(PointwiseBound {
        distance: ftp.sub(&fsp)?.norm_l2(),
        clean_gap: ft.sub(&fs)?.norm_l2(),
        jacobian_term: jdiff.matvec(delta)?.norm_l2(),
        teacher_remainder: remainder_norm(&jt, ft.data(), ftp.data(), delta)?,
        student_remainder: remainder_norm(&js, fs.data(), fsp.data(), delta)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub gd: f64,
    pub gc: f64,
    pub gd_max_logit: f64,
    pub gc_max_logit: f64,
    pub gc_skipped: usize,
    pub pw_uniform: f64,
    pub pw_adv: f64,
    /// Mean remainder proportion of the student.
    pub remainder: f64,
}

/// All alignment measurements over a dataset.
///
/// The adversarial perturbation is crafted against the student with `inner`;
/// uniform perturbations come from `probe`.
pub fn alignment_report(
    teacher: &Mlp,
    student: &Mlp,
    data: &Dataset,
    inner: InnerKind,
    attack: &AttackConfig,
    probe: &LinearityProbeConfig,
    seed: u64,
) -> Result<AlignmentReport> {
    probe.validate()?;
    let gd = gradient_distance(teacher, student, data, GradientProbe::CrossEntropy)?;
    let gc = gradient_cosine(teacher, student, data, GradientProbe::CrossEntropy)?;
    let gd_ml = gradient_distance(teacher, student, data, GradientProbe::MaxLogit)?;
    let gc_ml = gradient_cosine(teacher, student, data, GradientProbe::MaxLogit)?;
    let pw_uniform = mean_pointwise_uniform(teacher, student, data, probe)?;
    let pw_adv = mean_pointwise_adversarial(teacher, student, data, inner, attack, seed)?;
    let remainder = mean_remainder(student, &data.inputs, probe, 0)?;
    Ok(AlignmentReport {
        gd,
        gc: gc.mean,
        gd_max_logit: gd_ml,
        gc_max_logit: gc_ml.mean,
        gc_skipped: gc.skipped,
        pw_uniform,
        pw_adv,
        remainder,
    })
}

fn batch_gap(teacher: &Mlp, student: &Mlp, points: &Tensor) -> Result<Vec<f64>> {
    let t = teacher.logits_batch(points)?;
    let s = student.logits_batch(points)?;
    Ok((0..points.rows())
        .map(|r| {
            let d: Vec<f64> = t.row(r).iter().zip(s.row(r)).map(|(a, b)| a - b).collect();
            l2(&d)
        })
        .collect())
}

/// Mean point-wise distance under uniform noise from `probe`.
pub fn mean_pointwise_uniform(teacher: &Mlp, student: &Mlp, data: &Dataset, probe: &LinearityProbeConfig) -> Result<f64> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let d = data.dim();
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for p in 0..probe.num_probes {
        for chunk in idx.chunks(CHUNK) {
            let (mut xs, _) = data.gather(chunk);
            for (r, &i) in chunk.iter().enumerate() {
                let nz = probe.noise(d, i, p);
                for (v, &e) in xs.data_mut()[r * d..(r + 1) * d].iter_mut().zip(nz.data()) {
                    *v += e;
                }
            }
            total += batch_gap(teacher, student, &xs)?.iter().sum::<f64>();
        }
    }
    Ok(total / (data.len() * probe.num_probes) as f64)
}

/// Mean point-wise distance at perturbations crafted against the student.
pub fn mean_pointwise_adversarial(
    teacher: &Mlp,
    student: &Mlp,
    data: &Dataset,
    inner: InnerKind,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let obj = InnerObjective::new(inner, student, Some(teacher))?;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (xs, ys) = data.gather(chunk);
        let (delta, _) = pgd_batch(&obj, &xs, &ys, attack, &sample_seeds(seed, chunk))?;
        total += batch_gap(teacher, student, &xs.add(&delta)?)?.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

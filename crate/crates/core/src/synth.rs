//! Synthetic disjoint cohorts driven by a shared latent factor.
//!
//! Every patient draws a latent `t ~ N(0, I)`. Labels follow a logistic link on `w·t + b`.
//! Both cohorts see biomarkers through the same map `A`, the teacher cohort gets a strong
//! noisy copy of `t` as its embedding and the student cohort gets a weak one as features.
//! All random draws are taken in a fixed order and scaled afterwards, so changing a noise
//! level leaves every other quantity untouched.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RawCohortFile, RawRow};
use crate::matrix::{dot, Matrix};
use crate::metrics::auc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_mri: usize,
    pub n_fundus: usize,
    pub latent_dim: usize,
    /// Total biomarker columns, the last `n_categorical` of which are categorical.
    pub biomarker_dim: usize,
    pub n_categorical: usize,
    pub teacher_dim: usize,
    pub feature_dim: usize,
    pub biomarker_noise: f64,
    pub feature_noise: f64,
    pub teacher_noise: f64,
    /// Scale of the latent signal in the student features, in [0, 1].
    pub fundus_signal_strength: f64,
    /// Norm of the label direction `w`.
    pub label_scale: f64,
    pub prevalence: f64,
    /// Label is `w·t + b > 0` instead of a Bernoulli draw.
    pub deterministic_labels: bool,
    /// Fraction of numeric biomarker cells left empty.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_mri: 295,
            n_fundus: 112,
            latent_dim: 8,
            biomarker_dim: 16,
            n_categorical: 2,
            teacher_dim: 64,
            feature_dim: 64,
            biomarker_noise: 0.3,
            feature_noise: 0.2,
            teacher_noise: 0.1,
            fundus_signal_strength: 1.0,
            label_scale: 1.5,
            prevalence: 0.5,
            deterministic_labels: false,
            missing_rate: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_mri", self.n_mri),
            ("n_fundus", self.n_fundus),
            ("latent_dim", self.latent_dim),
            ("biomarker_dim", self.biomarker_dim),
            ("teacher_dim", self.teacher_dim),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_categorical >= self.biomarker_dim {
            return Err(Error::Config("need at least one numeric biomarker".into()));
        }
        for (name, v) in [
            ("biomarker_noise", self.biomarker_noise),
            ("feature_noise", self.feature_noise),
            ("teacher_noise", self.teacher_noise),
            ("label_scale", self.label_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("fundus_signal_strength", self.fundus_signal_strength),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("prevalence must lie in (0, 1), got {}", self.prevalence)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `key=value` override using the same syntax as the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config field {key:?}")));
        }
        table.insert(key.to_string(), crate::trainer::parse_override(value));
        *self = Self::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        Ok(())
    }
}

/// Generator state kept for diagnostics. Nothing downstream of ingest can see it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mri_latents: Matrix,
    pub fundus_latents: Matrix,
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohorts {
    /// Teacher cohort, carrying embeddings.
    pub mri: RawCohortFile,
    /// Student cohort, carrying features.
    pub fundus: RawCohortFile,
    pub truth: GroundTruth,
}

impl SynthCohorts {
    /// Writes `mri.csv`, `mri.schema`, `fundus.csv` and `fundus.schema` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.mri.save(&dir.join("mri.csv"), &dir.join("mri.schema"))?;
        self.fundus.save(&dir.join("fundus.csv"), &dir.join("fundus.schema"))
    }

    pub fn fundus_oracle_auc(&self) -> Result<f64> {
        oracle_auc(&self.truth.fundus_latents, &self.fundus.labels(), &self.truth.w, self.truth.b)
    }
}

/// AUC of the generating probabilities `sigmoid(w·t + b)`.
pub fn oracle_auc(latents: &Matrix, labels: &[u8], w: &[f64], b: f64) -> Result<f64> {
    let scores: Vec<f64> = latents
        .iter_rows()
        .map(|t| 1.0 / (1.0 + (-(dot(w, t) + b)).exp()))
        .collect();
    auc(&scores, labels)
}

struct Maps {
    w: Vec<f64>,
    /// `biomarker_dim × latent_dim`.
    a: Matrix,
    offsets: Vec<f64>,
    scales: Vec<f64>,
    teacher: Matrix,
    feature: Matrix,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| dot(r, v)).collect()
}

fn draw_maps(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Maps {
    let l = cfg.latent_dim;
    let inv = 1.0 / (l as f64).sqrt();
    let raw_w: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
    let wn = raw_w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Maps {
        w: raw_w.iter().map(|x| cfg.label_scale * x / wn).collect(),
        a: gaussian_matrix(rng, cfg.biomarker_dim, l, inv),
        offsets: (0..cfg.biomarker_dim).map(|_| rng.random_range(-50.0..150.0)).collect(),
        scales: (0..cfg.biomarker_dim).map(|_| rng.random_range(0.5..20.0)).collect(),
        teacher: gaussian_matrix(rng, cfg.teacher_dim, l, inv),
        feature: gaussian_matrix(rng, cfg.feature_dim, l, inv),
    }
}

/// Intercept making the expected prevalence over `margins` equal to `target`.
fn solve_intercept(margins: &[f64], target: f64) -> f64 {
    let mean_p = |b: f64| margins.iter().map(|m| 1.0 / (1.0 + (-(m + b)).exp())).sum::<f64>() / margins.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Drawn {
    latents: Matrix,
    uniforms: Vec<f64>,
    bio_noise: Matrix,
    missing: Matrix,
    modality_noise: Matrix,
}

fn draw_cohort(cfg: &SynthConfig, n: usize, modality_dim: usize, rng: &mut ChaCha8Rng) -> Drawn {
    let latents = gaussian_matrix(rng, n, cfg.latent_dim, 1.0);
    let bio_noise = gaussian_matrix(rng, n, cfg.biomarker_dim, 1.0);
    let missing = Matrix::from_vec(
        n,
        cfg.biomarker_dim,
        (0..n * cfg.biomarker_dim).map(|_| rng.random::<f64>()).collect(),
    )
    .expect("sized above");
    let modality_noise = gaussian_matrix(rng, n, modality_dim, 1.0);
    let uniforms = (0..n).map(|_| rng.random::<f64>()).collect();
    Drawn {
        latents,
        uniforms,
        bio_noise,
        missing,
        modality_noise,
    }
}

fn labels_for(cfg: &SynthConfig, margins: &[f64], b: f64, uniforms: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let draw = |u: &[f64]| -> Vec<u8> {
        margins
            .iter()
            .zip(u)
            .map(|(m, &u)| {
                let positive = if cfg.deterministic_labels {
                    m + b > 0.0
                } else {
                    u < 1.0 / (1.0 + (-(m + b)).exp())
                };
                u8::from(positive)
            })
            .collect()
    };
    let mut labels = draw(uniforms);
    // Redraw the label noise until prevalence is within 0.1 of the target.
    for _ in 0..1000 {
        let rate = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / labels.len() as f64;
        if cfg.deterministic_labels || (rate - cfg.prevalence).abs() <= 0.1 {
            break;
        }
        let fresh: Vec<f64> = (0..labels.len()).map(|_| rng.random()).collect();
        labels = draw(&fresh);
    }
    labels
}

fn categorical_value(x: f64, levels: usize) -> String {
    // Cut points at standard normal terciles or the median.
    let level = match levels {
        2 => usize::from(x > 0.0),
        _ => usize::from(x > -0.43) + usize::from(x > 0.43),
    };
    format!("c{level}")
}

#[allow(clippy::too_many_arguments)]
fn build_cohort(
    cfg: &SynthConfig,
    maps: &Maps,
    drawn: &Drawn,
    labels: &[u8],
    prefix: &str,
    modality: &Matrix,
    modality_scale: f64,
    teacher: bool,
) -> RawCohortFile {
    let n_num = cfg.biomarker_dim - cfg.n_categorical;
    let mut rows = Vec::with_capacity(labels.len());
    for (i, t) in drawn.latents.iter_rows().enumerate() {
        let clean = matvec(&maps.a, t);
        let signal: Vec<f64> = clean
            .iter()
            .zip(drawn.bio_noise.row(i))
            .map(|(c, e)| c + cfg.biomarker_noise * e)
            .collect();
        let numeric = (0..n_num)
            .map(|j| {
                (drawn.missing.get(i, j) >= cfg.missing_rate)
                    .then(|| maps.offsets[j] + maps.scales[j] * signal[j])
            })
            .collect();
        let categorical = (n_num..cfg.biomarker_dim)
            .map(|j| {
                let spread = (1.0 + cfg.biomarker_noise * cfg.biomarker_noise).sqrt();
                categorical_value(signal[j] / spread, 2 + (j - n_num) % 2)
            })
            .collect();
        let values: Vec<f64> = matvec(modality, t)
            .iter()
            .zip(drawn.modality_noise.row(i))
            .map(|(s, e)| modality_scale * s + if teacher { cfg.teacher_noise } else { cfg.feature_noise } * e)
            .collect();
        rows.push(RawRow {
            patient_id: format!("{prefix}{:04}", i + 1),
            label: labels[i],
            numeric,
            categorical,
            embedding: teacher.then(|| values.clone()),
            feature: (!teacher).then_some(values),
        });
    }
    let width = modality.rows();
    let names = |stem: &str| (0..width).map(|j| format!("{stem}_{j:03}")).collect::<Vec<_>>();
    RawCohortFile {
        numeric_names: (0..n_num).map(|j| format!("bio{:02}", j + 1)).collect(),
        categorical_names: (n_num..cfg.biomarker_dim).map(|j| format!("cat{:02}", j + 1)).collect(),
        embedding_names: if teacher { names("emb") } else { Vec::new() },
        feature_names: if teacher { Vec::new() } else { names("feat") },
        rows,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCohorts> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let maps = draw_maps(cfg, &mut rng);
    rng.set_stream(1);
    let mri = draw_cohort(cfg, cfg.n_mri, cfg.teacher_dim, &mut rng);
    rng.set_stream(2);
    let fundus = draw_cohort(cfg, cfg.n_fundus, cfg.feature_dim, &mut rng);

    let margins = |d: &Drawn| -> Vec<f64> { d.latents.iter_rows().map(|t| dot(&maps.w, t)).collect() };
    let (mri_margins, fundus_margins) = (margins(&mri), margins(&fundus));
    let all: Vec<f64> = mri_margins.iter().chain(&fundus_margins).copied().collect();
    let b = solve_intercept(&all, cfg.prevalence);
    rng.set_stream(3);
    let mri_labels = labels_for(cfg, &mri_margins, b, &mri.uniforms, &mut rng);
    let fundus_labels = labels_for(cfg, &fundus_margins, b, &fundus.uniforms, &mut rng);

    let mri_file = build_cohort(cfg, &maps, &mri, &mri_labels, "M", &maps.teacher, 1.0, true);
    let fundus_file = build_cohort(
        cfg,
        &maps,
        &fundus,
        &fundus_labels,
        "F",
        &maps.feature,
        cfg.fundus_signal_strength,
        false,
    );
    Ok(SynthCohorts {
        mri: mri_file,
        fundus: fundus_file,
        truth: GroundTruth {
            mri_latents: mri.latents,
            fundus_latents: fundus.latents,
            w: maps.w,
            b,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::cosine_distance;

    fn small() -> SynthConfig {
        SynthConfig {
            n_mri: 60,
            n_fundus: 40,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_cohorts() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().fundus, generate(&other).unwrap().fundus);
    }

    #[test]
    fn shapes_ids_and_prevalence() {
        let s = generate(&SynthConfig::default()).unwrap();
        assert_eq!(s.mri.len(), 295);
        assert_eq!(s.fundus.len(), 112);
        assert_eq!(s.mri.rows[0].patient_id, "M0001");
        assert_eq!(s.fundus.rows[111].patient_id, "F0112");
        assert_eq!(s.mri.numeric_names.len() + s.mri.categorical_names.len(), 16);
        assert_eq!(s.mri.embedding_names.len(), 64);
        assert!(s.mri.feature_names.is_empty());
        assert_eq!(s.fundus.feature_names.len(), 64);
        for cohort in [&s.mri, &s.fundus] {
            let rate = cohort.labels().iter().map(|&y| f64::from(y)).sum::<f64>() / cohort.len() as f64;
            assert!((rate - 0.5).abs() <= 0.1, "prevalence {rate}");
        }
        crate::ingest::assert_disjoint_ids(&s.mri.ids(), &s.fundus.ids()).unwrap();
    }

    #[test]
    fn noise_levels_do_not_shift_other_draws() {
        let a = generate(&small()).unwrap();
        let b = generate(&SynthConfig {
            teacher_noise: 0.7,
            ..small()
        })
        .unwrap();
        assert_eq!(a.fundus, b.fundus);
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.mri, b.mri);
    }

    #[test]
    fn noiseless_cohorts_are_functions_of_the_latent() {
        let cfg = SynthConfig {
            biomarker_noise: 0.0,
            feature_noise: 0.0,
            teacher_noise: 0.0,
            fundus_signal_strength: 1.0,
            missing_rate: 0.0,
            n_categorical: 0,
            latent_dim: 4,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        let maps = draw_maps(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        for (row, t) in s.fundus.rows.iter().zip(s.truth.fundus_latents.iter_rows()) {
            assert_eq!(row.feature.as_ref().unwrap(), &matvec(&maps.feature, t));
        }
        for (row, t) in s.mri.rows.iter().zip(s.truth.mri_latents.iter_rows()) {
            assert_eq!(row.embedding.as_ref().unwrap(), &matvec(&maps.teacher, t));
        }
        // Nearest teacher by biomarker cosine equals nearest by latent cosine: with a
        // full-column-rank A and no noise, biomarkers are an affine image of the latent,
        // so compare in the centered space.
        let centered = |row: &RawRow| -> Vec<f64> {
            row.numeric
                .iter()
                .enumerate()
                .map(|(j, v)| (v.unwrap() - maps.offsets[j]) / maps.scales[j])
                .collect()
        };
        let nearest = |q: &[f64], pts: &[Vec<f64>]| -> usize {
            (0..pts.len())
                .min_by(|&a, &b| cosine_distance(q, &pts[a]).total_cmp(&cosine_distance(q, &pts[b])))
                .unwrap()
        };
        let teacher_bio: Vec<Vec<f64>> = s.mri.rows.iter().map(centered).collect();
        let teacher_lat: Vec<Vec<f64>> = s.truth.mri_latents.iter_rows().map(<[f64]>::to_vec).collect();
        let mut agree = 0;
        for (row, t) in s.fundus.rows.iter().zip(s.truth.fundus_latents.iter_rows()) {
            let by_bio = nearest(&centered(row), &teacher_bio);
            let by_lat = nearest(t, &teacher_lat);
            agree += usize::from(by_bio == by_lat);
        }
        // A is a random 16x4 map, not an isometry, so agreement is high but not total.
        assert!(agree * 2 > s.fundus.len(), "{agree}/{}", s.fundus.len());
    }

    #[test]
    fn oracle_auc_cases() {
        let cfg = SynthConfig {
            deterministic_labels: true,
            ..small()
        };
        assert_eq!(generate(&cfg).unwrap().fundus_oracle_auc().unwrap(), 1.0);
        let cfg = SynthConfig {
            label_scale: 0.0,
            n_fundus: 2000,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        let o = s.fundus_oracle_auc().unwrap();
        assert!((o - 0.5).abs() < 0.05, "{o}");
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            fundus_signal_strength: 1.5,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig { n_mri: 0, ..small() }.validate().is_err());
        assert!(SynthConfig {
            teacher_noise: -1.0,
            ..small()
        }
        .validate()
        .is_err());
        let cfg = SynthConfig::default();
        assert_eq!(SynthConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let mut cfg = SynthConfig::default();
        cfg.set("n_fundus", "40").unwrap();
        assert_eq!(cfg.n_fundus, 40);
    }

    #[test]
    fn emitted_files_reload_identically() {
        let s = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        for (stem, cohort) in [("mri", &s.mri), ("fundus", &s.fundus)] {
            let schema = crate::ingest::Schema::load(&dir.path().join(format!("{stem}.schema"))).unwrap();
            let back = crate::ingest::load_cohort(&dir.path().join(format!("{stem}.csv")), &schema).unwrap();
            assert_eq!(&back, cohort);
        }
    }
}

//! Synthetic weight pairs and adapters with known subspaces, principal
//! angles and component norms.
//!
//! A pair is built from one random orthogonal frame per side. The source
//! range takes the first `rank_s` frame vectors; each target range vector is
//! `cos θ_i a_i + sin θ_i f_i` with `f_i` a fresh frame vector, so the
//! principal angles are exactly `θ_i`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decompose::{ComponentNorms, DecomposedDelta};
use crate::error::{Error, Result};
use crate::io::adapter::{AdapterModule, AdapterSet, FORMAT_VERSION, KEY_FORMAT_VERSION};
use crate::io::archive::{serialize_archive, write_atomic, DType, Tensor};
use crate::linalg::{Matrix, SpectralBases, WeightMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shape: (usize, usize),
    pub rank_s: usize,
    pub rank_t: usize,
    /// Radians, one per common direction (`min(rank_s, rank_t)` entries),
    /// applied to both column and row spaces.
    pub principal_angles: Vec<f64>,
    pub seed: u64,
    /// Strictly decreasing positive singular values; at least
    /// `max(rank_s, rank_t)` entries. Empty selects `r, r-1, ..., 1`.
    #[serde(default)]
    pub singular_value_profile: Vec<f64>,
}

impl SynthSpec {
    fn profile(&self) -> Vec<f64> {
        let r = self.rank_s.max(self.rank_t);
        if self.singular_value_profile.is_empty() {
            (0..r).map(|i| (r - i) as f64).collect()
        } else {
            self.singular_value_profile.clone()
        }
    }

    fn fresh_directions(&self) -> usize {
        let common = self.rank_s.min(self.rank_t);
        self.principal_angles.iter().filter(|&&t| t > 0.0).count() + (self.rank_t - common)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.shape;
        let bad = |msg: String| Err(Error::Spec(msg));
        if m == 0 || n == 0 {
            return bad(format!("shape {m}x{n} must be positive"));
        }
        let limit = m.min(n);
        if self.rank_s > limit || self.rank_t > limit {
            return bad(format!(
                "ranks ({}, {}) exceed min(m, n) = {limit}",
                self.rank_s, self.rank_t
            ));
        }
        let common = self.rank_s.min(self.rank_t);
        if self.principal_angles.len() != common {
            return bad(format!(
                "{} principal angles given, {common} needed",
                self.principal_angles.len()
            ));
        }
        if let Some(t) = self
            .principal_angles
            .iter()
            .find(|t| !(0.0..=FRAC_PI_2 + 1e-12).contains(*t))
        {
            return bad(format!("angle {t} outside [0, pi/2]"));
        }
        let needed = self.rank_s + self.fresh_directions();
        if needed > limit {
            return bad(format!(
                "angles need {needed} orthogonal directions but min(m, n) = {limit}"
            ));
        }
        let profile = self.profile();
        if profile.len() < self.rank_s.max(self.rank_t) {
            return bad(format!("singular value profile has {} entries", profile.len()));
        }
        if profile.iter().any(|s| !(s.is_finite() && *s > 0.0)) || profile.windows(2).any(|w| w[0] <= w[1]) {
            return bad("singular value profile must be positive and strictly decreasing".into());
        }
        Ok(())
    }

    /// `Σ cos²θ_i / min(rank_s, rank_t)`, or `None` when a side has rank 0.
    pub fn expected_similarity(&self) -> Option<f64> {
        let k = self.rank_s.min(self.rank_t);
        (k > 0).then(|| self.principal_angles.iter().map(|t| t.cos().powi(2)).sum::<f64>() / k as f64)
    }
}

/// Bases used to build a pair; `*_u` are column-space, `*_v` row-space.
#[derive(Debug, Clone)]
pub struct PairTruth {
    pub source_u: Matrix,
    pub source_v: Matrix,
    pub target_u: Matrix,
    pub target_v: Matrix,
    pub expected_similarity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub source: WeightMatrix,
    pub target: WeightMatrix,
    pub truth: PairTruth,
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix).
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let qr = gaussian(n, n, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn rotated_bases(frame: &Matrix, rank_s: usize, rank_t: usize, angles: &[f64]) -> (Matrix, Matrix) {
    let dim = frame.nrows();
    let source = frame.columns(0, rank_s).into_owned();
    let mut target = Matrix::zeros(dim, rank_t);
    let mut fresh = rank_s;
    for (i, &theta) in angles.iter().enumerate() {
        let mut col = frame.column(i) * theta.cos();
        if theta > 0.0 {
            col += frame.column(fresh) * theta.sin();
            fresh += 1;
        }
        target.set_column(i, &col);
    }
    for j in angles.len()..rank_t {
        target.set_column(j, &frame.column(fresh));
        fresh += 1;
    }
    (source, target)
}

fn assemble(u: &Matrix, sigma: &[f64], v: &Matrix, shape: (usize, usize)) -> Result<WeightMatrix> {
    if u.ncols() == 0 {
        return WeightMatrix::new(Matrix::zeros(shape.0, shape.1));
    }
    let mut us = u.clone();
    for (j, s) in sigma[..u.ncols()].iter().enumerate() {
        us.column_mut(j).scale_mut(*s);
    }
    WeightMatrix::new(us * v.transpose())
}

pub fn generate_model_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let (m, n) = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left = random_orthogonal(m, &mut rng);
    let right = random_orthogonal(n, &mut rng);
    let (su, tu) = rotated_bases(&left, spec.rank_s, spec.rank_t, &spec.principal_angles);
    let (sv, tv) = rotated_bases(&right, spec.rank_s, spec.rank_t, &spec.principal_angles);
    let profile = spec.profile();
    Ok(SynthPair {
        source: assemble(&su, &profile, &sv, spec.shape)?,
        target: assemble(&tu, &profile, &tv, spec.shape)?,
        truth: PairTruth {
            source_u: su,
            source_v: sv,
            target_u: tu,
            target_v: tv,
            expected_similarity: spec.expected_similarity(),
        },
    })
}

/// Coefficients of the two cross blocks: `upper` is r×(n−r) (range rows,
/// null columns), `lower` is (m−r)×r.
#[derive(Debug, Clone)]
pub struct CrossCoeffs {
    pub upper: Matrix,
    pub lower: Matrix,
}

fn coeff_shape(name: &str, c: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if c.shape() != (rows, cols) {
        return Err(Error::shape(format!(
            "{name} coefficients are {}x{}, expected {rows}x{cols}",
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(())
}

/// Builds `ΔW = U∥ P V∥ᵀ + U⊥ Q V⊥ᵀ (+ cross blocks)` and the decomposition
/// it must produce.
pub fn generate_adapter(
    bases: &SpectralBases,
    par_coeffs: &Matrix,
    perp_coeffs: &Matrix,
    cross: Option<&CrossCoeffs>,
) -> Result<(Matrix, DecomposedDelta)> {
    let (m, n) = bases.source_shape();
    let r = bases.rank();
    coeff_shape("range", par_coeffs, r, r)?;
    coeff_shape("nullspace", perp_coeffs, m - r, n - r)?;
    let par = bases.u_par() * par_coeffs * bases.v_par().transpose();
    let perp = bases.u_perp() * perp_coeffs * bases.v_perp().transpose();
    let (residual, cross_norm) = match cross {
        Some(c) => {
            coeff_shape("upper cross", &c.upper, r, n - r)?;
            coeff_shape("lower cross", &c.lower, m - r, r)?;
            let res = bases.u_par() * &c.upper * bases.v_perp().transpose()
                + bases.u_perp() * &c.lower * bases.v_par().transpose();
            (res, (c.upper.norm_squared() + c.lower.norm_squared()).sqrt())
        }
        None => (Matrix::zeros(m, n), 0.0),
    };
    let delta = &par + &perp + &residual;
    let norms = ComponentNorms {
        total: (par_coeffs.norm_squared() + perp_coeffs.norm_squared() + cross_norm * cross_norm).sqrt(),
        par: par_coeffs.norm(),
        perp: perp_coeffs.norm(),
        residual: cross_norm,
    };
    Ok((
        delta,
        DecomposedDelta {
            par,
            perp,
            residual,
            norms,
        },
    ))
}

/// Rank budget of a generated factored adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterRecipe {
    /// Stored adapter rank; unused capacity is zero-padded.
    pub rank: usize,
    pub par_rank: usize,
    pub perp_rank: usize,
    /// Rank of each of the two cross blocks.
    pub cross_rank: usize,
}

impl Default for AdapterRecipe {
    fn default() -> Self {
        Self {
            rank: 8,
            par_rank: 4,
            perp_rank: 4,
            cross_rank: 0,
        }
    }
}

/// Factored adapter with rank-limited blocks, built directly from the bases
/// so the factors are exact. Returns `(up, down, expected norms)`.
pub fn generate_factored_adapter(
    bases: &SpectralBases,
    recipe: &AdapterRecipe,
    rng: &mut impl Rng,
) -> Result<(Matrix, Matrix, ComponentNorms)> {
    let (m, n) = bases.source_shape();
    let r = bases.rank();
    let null_dim = (m - r).min(n - r);
    let par_rank = recipe.par_rank.min(r);
    let perp_rank = recipe.perp_rank.min(null_dim);
    let cross_rank = recipe.cross_rank.min(r).min(null_dim);
    let used = par_rank + perp_rank + 2 * cross_rank;
    if used > recipe.rank {
        return Err(Error::Spec(format!(
            "adapter blocks need rank {used} but the adapter rank is {}",
            recipe.rank
        )));
    }
    let magnitude = rng.gen_range(0.5..2.0);
    // each block is (left basis · a) (bᵀ · right basisᵀ)
    let mut ups = Vec::new();
    let mut downs = Vec::new();
    let mut sq = [0.0f64; 3];
    let mut block = |lb: &Matrix, rb: &Matrix, k: usize, slot: usize, rng: &mut dyn rand::RngCore| {
        if k == 0 {
            return;
        }
        let a = gaussian(lb.ncols(), k, rng) * magnitude;
        let b = gaussian(rb.ncols(), k, rng);
        sq[slot] += (&a * b.transpose()).norm_squared();
        ups.push(lb * a);
        downs.push((rb * b).transpose());
    };
    block(bases.u_par(), bases.v_par(), par_rank, 0, rng);
    block(bases.u_perp(), bases.v_perp(), perp_rank, 1, rng);
    block(bases.u_par(), bases.v_perp(), cross_rank, 2, rng);
    block(bases.u_perp(), bases.v_par(), cross_rank, 2, rng);

    let mut up = Matrix::zeros(m, recipe.rank);
    let mut down = Matrix::zeros(recipe.rank, n);
    let mut col = 0;
    for (u, d) in ups.iter().zip(&downs) {
        up.columns_mut(col, u.ncols()).copy_from(u);
        down.rows_mut(col, d.nrows()).copy_from(d);
        col += u.ncols();
    }
    let norms = ComponentNorms {
        total: (sq[0] + sq[1] + sq[2]).sqrt(),
        par: sq[0].sqrt(),
        perp: sq[1].sqrt(),
        residual: sq[2].sqrt(),
    };
    Ok((up, down, norms))
}

/// One module of a synthetic checkpoint pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModuleSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub rank_s: usize,
    pub rank_t: usize,
    /// Full list of angles; takes precedence over `angle`.
    #[serde(default)]
    pub principal_angles: Option<Vec<f64>>,
    /// One angle (radians) for every common direction.
    #[serde(default)]
    pub angle: Option<f64>,
    #[serde(default)]
    pub singular_value_profile: Vec<f64>,
}

/// A whole synthetic source/target checkpoint pair plus a source adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModelSpec {
    pub seed: u64,
    pub modules: Vec<SynthModuleSpec>,
    /// Omit to skip adapter generation.
    #[serde(default)]
    pub adapter: Option<AdapterRecipe>,
}

impl SynthModelSpec {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Spec(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::Spec(e.to_string()))
        };
        parsed
    }

    fn pair_spec(&self, index: usize) -> Result<SynthSpec> {
        let m = &self.modules[index];
        let common = m.rank_s.min(m.rank_t);
        let principal_angles = match (&m.principal_angles, m.angle) {
            (Some(list), _) => list.clone(),
            (None, Some(a)) => vec![a; common],
            (None, None) => vec![0.0; common],
        };
        Ok(SynthSpec {
            shape: m.shape,
            rank_s: m.rank_s,
            rank_t: m.rank_t,
            principal_angles,
            seed: self.seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            singular_value_profile: m.singular_value_profile.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleTruth {
    pub name: String,
    pub shape: (usize, usize),
    pub rank_s: usize,
    pub rank_t: usize,
    pub principal_angles: Vec<f64>,
    pub expected_similarity: Option<f64>,
    pub adapter_norms: Option<ComponentNorms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub schema: String,
    pub seed: u64,
    pub modules: Vec<ModuleTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub source: BTreeMap<String, Tensor>,
    pub target: BTreeMap<String, Tensor>,
    pub adapter: Option<AdapterSet>,
    pub truth: SynthTruth,
}

pub fn generate_bundle(spec: &SynthModelSpec) -> Result<SynthBundle> {
    if spec.modules.is_empty() {
        return Err(Error::Spec("no modules".into()));
    }
    let mut source = BTreeMap::new();
    let mut target = BTreeMap::new();
    let mut adapter = spec.adapter.map(|_| AdapterSet::default());
    let mut truths = Vec::new();
    for (i, module) in spec.modules.iter().enumerate() {
        let pair_spec = spec.pair_spec(i)?;
        let pair = generate_model_pair(&pair_spec)
            .map_err(|e| Error::Spec(format!("module `{}`: {e}", module.name)))?;
        let weight_name = format!("{}.weight", module.name);
        if source.contains_key(&weight_name) {
            return Err(Error::Spec(format!("duplicate module `{}`", module.name)));
        }
        source.insert(weight_name.clone(), Tensor::from_matrix(pair.source.as_matrix(), DType::F64));
        target.insert(weight_name, Tensor::from_matrix(pair.target.as_matrix(), DType::F64));

        let mut adapter_norms = None;
        if let (Some(recipe), Some(set)) = (&spec.adapter, adapter.as_mut()) {
            // bases straight from the construction, so the expected norms are exact
            let bases = truth_bases(&pair, pair_spec.shape)?;
            let mut rng = ChaCha8Rng::seed_from_u64(pair_spec.seed ^ 0xADA9_7E55);
            let (up, down, norms) = generate_factored_adapter(&bases, recipe, &mut rng)?;
            set.modules.insert(module.name.clone(), AdapterModule::new(up, down, 1.0)?);
            adapter_norms = Some(norms);
        }
        truths.push(ModuleTruth {
            name: module.name.clone(),
            shape: module.shape,
            rank_s: module.rank_s,
            rank_t: module.rank_t,
            principal_angles: pair_spec.principal_angles.clone(),
            expected_similarity: pair_spec.expected_similarity(),
            adapter_norms,
        });
    }
    if let Some(set) = adapter.as_mut() {
        set.metadata.insert(KEY_FORMAT_VERSION.into(), FORMAT_VERSION.into());
    }
    Ok(SynthBundle {
        source,
        target,
        adapter,
        truth: SynthTruth {
            schema: "synth/1".into(),
            seed: spec.seed,
            modules: truths,
        },
    })
}

/// Source-side bases of a generated pair completed to full orthogonal frames.
fn truth_bases(pair: &SynthPair, shape: (usize, usize)) -> Result<SpectralBases> {
    let complete = |basis: &Matrix, dim: usize| -> Matrix {
        // orthogonal complement via the full QR of [basis | I]
        let mut stacked = Matrix::zeros(dim, basis.ncols() + dim);
        stacked.columns_mut(0, basis.ncols()).copy_from(basis);
        stacked.columns_mut(basis.ncols(), dim).fill_with_identity();
        let q = stacked.transpose().transpose().qr().q();
        let mut full = Matrix::zeros(dim, dim);
        full.columns_mut(0, basis.ncols()).copy_from(basis);
        let rest = dim - basis.ncols();
        full.columns_mut(basis.ncols(), rest)
            .copy_from(&q.columns(basis.ncols(), rest));
        full
    };
    let u = complete(&pair.truth.source_u, shape.0);
    let v = complete(&pair.truth.source_v, shape.1);
    let r = pair.truth.source_u.ncols();
    let sigma = crate::linalg::svd_full(&pair.source)?.singular_values;
    SpectralBases::from_svd_at_rank(&u, &v, &sigma, r)
}

/// File names written by [`write_bundle`].
pub const SOURCE_FILE: &str = "source.safetensors";
pub const TARGET_FILE: &str = "target.safetensors";
pub const ADAPTER_FILE: &str = "adapter.safetensors";
pub const TRUTH_FILE: &str = "truth.json";

pub fn write_bundle(bundle: &SynthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let empty = BTreeMap::new();
    write_atomic(&dir.join(SOURCE_FILE), &serialize_archive(&bundle.source, &empty)?)?;
    write_atomic(&dir.join(TARGET_FILE), &serialize_archive(&bundle.target, &empty)?)?;
    if let Some(a) = &bundle.adapter {
        write_atomic(&dir.join(ADAPTER_FILE), &a.to_bytes(DType::F64)?)?;
    }
    let mut truth = serde_json::to_vec_pretty(&bundle.truth).map_err(|e| Error::Spec(e.to_string()))?;
    truth.push(b'\n');
    write_atomic(&dir.join(TRUTH_FILE), &truth)
}

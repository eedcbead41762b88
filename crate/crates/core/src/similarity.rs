//! Subspace similarity between weight matrices and source→target module pairing.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpectralBases, WeightMatrix};

/// Default pairing threshold on the combined score.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Scores closer than this rank as tied during greedy selection, so
/// rounding noise in the SVD cannot reorder equal-similarity candidates.
pub const SCORE_TIE_QUANTUM: f64 = 1e-9;

/// How left and right similarities fold into the score that is thresholded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Mean,
    Min,
}

impl Combine {
    pub fn apply(self, left: f64, right: f64) -> f64 {
        match self {
            Combine::Mean => 0.5 * (left + right),
            Combine::Min => left.min(right),
        }
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Combine::Mean),
            "min" => Ok(Combine::Min),
            other => Err(Error::Config(format!("unknown combine rule `{other}` (mean|min)"))),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Mean => "mean",
            Combine::Min => "min",
        })
    }
}

/// Pair selection strategy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Highest combined score first, ties by (source index, target index).
    #[default]
    Greedy,
    /// Maximum total combined score over all admissible pairs.
    Optimal,
}

impl FromStr for Matching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Matching::Greedy),
            "optimal" => Ok(Matching::Optimal),
            other => Err(Error::Config(format!(
                "unknown matching `{other}` (greedy|optimal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub left: f64,
    pub right: f64,
    pub combined: f64,
}

impl SimilarityScore {
    pub fn new(left: f64, right: f64, combine: Combine) -> Self {
        Self {
            left,
            right,
            combined: combine.apply(left, right),
        }
    }
}

/// `‖aᵀb‖_F² / min(r_a, r_b)`: the mean squared cosine of the principal
/// angles between `span(a)` and `span(b)`. Both inputs must be
/// column-orthonormal.
pub fn subspace_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "subspaces live in R^{} and R^{}",
            a.nrows(),
            b.nrows()
        )));
    }
    let k = a.ncols().min(b.ncols());
    if k == 0 {
        return Err(Error::DegenerateSubspace(format!(
            "similarity needs non-empty bases, got ranks {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let cross = a.tr_mul(b);
    Ok(cross.norm_squared() / k as f64)
}

/// Left and right similarity of two same-shape weights from their bases.
pub fn bases_similarity(
    source: &SpectralBases,
    target: &SpectralBases,
    combine: Combine,
) -> Result<SimilarityScore> {
    if source.source_shape() != target.source_shape() {
        return Err(Error::shape(format!(
            "cannot compare a {:?} weight with a {:?} weight",
            source.source_shape(),
            target.source_shape()
        )));
    }
    let left = subspace_similarity(source.u_par(), target.u_par())?;
    let right = subspace_similarity(source.v_par(), target.v_par())?;
    Ok(SimilarityScore::new(left, right, combine))
}

/// Decomposes both weights and compares their column and row spaces.
pub fn module_similarity(
    w_s: &WeightMatrix,
    w_t: &WeightMatrix,
    rel_tol: f64,
    combine: Combine,
) -> Result<SimilarityScore> {
    if w_s.shape() != w_t.shape() {
        return Err(Error::shape(format!(
            "source is {:?}, target is {:?}",
            w_s.shape(),
            w_t.shape()
        )));
    }
    let bs = SpectralBases::compute(w_s, rel_tol)?;
    let bt = SpectralBases::compute(w_t, rel_tol)?;
    bases_similarity(&bs, &bt, combine)
}

/// Similarity for every (source, target) pair; `None` where the pair is
/// not a candidate (shape mismatch or a rank-0 side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub scores: Vec<Vec<Option<SimilarityScore>>>,
}

impl ScoreMatrix {
    /// Builds a matrix from explicit combined scores; `left = right = combined`.
    pub fn from_combined(
        sources: Vec<String>,
        targets: Vec<String>,
        combined: &[Vec<Option<f64>>],
    ) -> Result<Self> {
        if combined.len() != sources.len() || combined.iter().any(|r| r.len() != targets.len()) {
            return Err(Error::shape("score rows must match sources x targets"));
        }
        let scores = combined
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| {
                        c.map(|c| SimilarityScore {
                            left: c,
                            right: c,
                            combined: c,
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            sources,
            targets,
            scores,
        })
    }

    pub fn get(&self, source: usize, target: usize) -> Option<SimilarityScore> {
        self.scores[source][target]
    }
}

/// Computes the score matrix in parallel over source modules.
pub fn score_matrix(
    sources: &[(String, &SpectralBases)],
    targets: &[(String, &SpectralBases)],
    combine: Combine,
) -> ScoreMatrix {
    let scores = sources
        .par_iter()
        .map(|(_, s)| {
            targets
                .iter()
                .map(|(_, t)| bases_similarity(s, t, combine).ok())
                .collect()
        })
        .collect();
    ScoreMatrix {
        sources: sources.iter().map(|(id, _)| id.clone()).collect(),
        targets: targets.iter().map(|(id, _)| id.clone()).collect(),
        scores,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePair {
    pub source: String,
    pub target: String,
    pub score: SimilarityScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePairing {
    /// Ordered by source position in the input list.
    pub pairs: Vec<ModulePair>,
    pub unmatched_sources: Vec<String>,
    pub threshold: f64,
}

impl ModulePairing {
    pub fn score_for(&self, source: &str, target: &str) -> Option<SimilarityScore> {
        self.pairs
            .iter()
            .find(|p| p.source == source && p.target == target)
            .map(|p| p.score)
    }
}

/// Selects at most one target per source and one source per target among
/// candidates whose combined score reaches `threshold`.
pub fn select_pairs(scores: &ScoreMatrix, threshold: f64, matching: Matching) -> Result<ModulePairing> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    if scores.sources.is_empty() {
        return Err(Error::EmptyModel);
    }
    let mut candidates = Vec::new();
    for (i, row) in scores.scores.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if let Some(s) = s {
                if s.combined >= threshold {
                    candidates.push((i, j, s.combined));
                }
            }
        }
    }
    let chosen = match matching {
        Matching::Greedy => greedy(candidates, scores.sources.len(), scores.targets.len()),
        Matching::Optimal => optimal(&candidates, scores.sources.len(), scores.targets.len()),
    };

    let mut target_of = vec![None; scores.sources.len()];
    for (i, j) in chosen {
        target_of[i] = Some(j);
    }
    let mut pairs = Vec::new();
    let mut unmatched_sources = Vec::new();
    for (i, t) in target_of.into_iter().enumerate() {
        match t {
            Some(j) => pairs.push(ModulePair {
                source: scores.sources[i].clone(),
                target: scores.targets[j].clone(),
                score: scores.get(i, j).expect("chosen pair has a score"),
            }),
            None => unmatched_sources.push(scores.sources[i].clone()),
        }
    }
    Ok(ModulePairing {
        pairs,
        unmatched_sources,
        threshold,
    })
}

fn greedy(mut candidates: Vec<(usize, usize, f64)>, n_src: usize, n_tgt: usize) -> Vec<(usize, usize)> {
    let key = |s: f64| (s / SCORE_TIE_QUANTUM).round() as i64;
    candidates.sort_by(|a, b| {
        key(b.2)
            .cmp(&key(a.2))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut src_used = vec![false; n_src];
    let mut tgt_used = vec![false; n_tgt];
    let mut out = Vec::new();
    for (i, j, _) in candidates {
        if !src_used[i] && !tgt_used[j] {
            src_used[i] = true;
            tgt_used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Maximum-weight assignment (Hungarian algorithm on a padded square cost
/// matrix). Inadmissible cells get weight zero and are dropped afterwards.
fn optimal(candidates: &[(usize, usize, f64)], n_src: usize, n_tgt: usize) -> Vec<(usize, usize)> {
    let n = n_src.max(n_tgt);
    let mut weight = vec![vec![0.0f64; n]; n];
    let mut admissible = vec![vec![false; n]; n];
    for &(i, j, w) in candidates {
        // shift so that an admissible zero score still beats an empty cell
        weight[i][j] = w + 1.0;
        admissible[i][j] = true;
    }
    let assignment = hungarian_max(&weight);
    let mut out: Vec<(usize, usize)> = assignment
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < n_src && j < n_tgt && admissible[i][j])
        .collect();
    out.sort_unstable();
    out
}

/// Returns, for each row, the column assigned in a maximum-weight perfect
/// matching of a square matrix.
fn hungarian_max(weight: &[Vec<f64>]) -> Vec<usize> {
    let n = weight.len();
    if n == 0 {
        return Vec::new();
    }
    let max_w = weight
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max);
    // cost[i][j] = max_w - weight[i][j]; 1-based potentials as in the classic e-maxx formulation
    let cost = |i: usize, j: usize| max_w - weight[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j].total_cmp(&delta) == Ordering::Less {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Decomposes every module and pairs them. Convenience wrapper over
/// [`score_matrix`] and [`select_pairs`] with greedy matching.
pub fn pair_modules(
    source: &[(String, WeightMatrix)],
    target: &[(String, WeightMatrix)],
    threshold: f64,
    rel_tol: f64,
    combine: Combine,
) -> Result<ModulePairing> {
    if source.is_empty() {
        return Err(Error::EmptyModel);
    }
    let decompose = |mods: &[(String, WeightMatrix)]| -> Result<Vec<(String, SpectralBases)>> {
        mods.par_iter()
            .map(|(id, w)| Ok((id.clone(), SpectralBases::compute(w, rel_tol)?)))
            .collect()
    };
    let sb = decompose(source)?;
    let tb = decompose(target)?;
    let sref: Vec<_> = sb.iter().map(|(id, b)| (id.clone(), b)).collect();
    let tref: Vec<_> = tb.iter().map(|(id, b)| (id.clone(), b)).collect();
    select_pairs(&score_matrix(&sref, &tref, combine), threshold, Matching::Greedy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DEFAULT_RANK_TOL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cols(m: usize, idx: &[usize]) -> Matrix {
        Matrix::from_fn(m, idx.len(), |i, j| if i == idx[j] { 1.0 } else { 0.0 })
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn identical_and_orthogonal_subspaces() {
        let a = cols(4, &[0, 1]);
        assert!((subspace_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = cols(4, &[2, 3]);
        assert_eq!(subspace_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn forty_five_degrees() {
        let a = cols(2, &[0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let b = Matrix::from_column_slice(2, 1, &[s, s]);
        // dense route: ‖aᵀb‖² by explicit sum
        let dense: f64 = (0..2).map(|i| a[(i, 0)] * b[(i, 0)]).sum::<f64>().powi(2);
        let fast = subspace_similarity(&a, &b).unwrap();
        assert!((fast - 0.5).abs() < 1e-15);
        assert!((fast - dense).abs() < 1e-15);
    }

    #[test]
    fn similarity_errors() {
        assert!(matches!(
            subspace_similarity(&cols(3, &[0]), &cols(4, &[0])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            subspace_similarity(&Matrix::zeros(3, 0), &cols(3, &[0])),
            Err(Error::DegenerateSubspace(_))
        ));
    }

    #[test]
    fn module_similarity_examples() {
        let w = WeightMatrix::new(random(6, 5, 3)).unwrap();
        let s = module_similarity(&w, &w, DEFAULT_RANK_TOL, Combine::Mean).unwrap();
        assert!((s.left - 1.0).abs() < 1e-8 && (s.right - 1.0).abs() < 1e-8);

        let d = |v: [f64; 4]| {
            WeightMatrix::new(Matrix::from_diagonal(&nalgebra::DVector::from_row_slice(&v))).unwrap()
        };
        let s = module_similarity(&d([1., 1., 0., 0.]), &d([0., 0., 1., 1.]), DEFAULT_RANK_TOL, Combine::Mean)
            .unwrap();
        assert!(s.left.abs() < 1e-12 && s.right.abs() < 1e-12);

        let a = WeightMatrix::new(random(3, 4, 1)).unwrap();
        let b = WeightMatrix::new(random(4, 3, 1)).unwrap();
        assert!(matches!(
            module_similarity(&a, &b, DEFAULT_RANK_TOL, Combine::Mean),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn combine_rules() {
        assert_eq!(Combine::Mean.apply(0.6, 1.0), 0.8);
        assert_eq!(Combine::Min.apply(0.6, 1.0), 0.6);
        assert_eq!("min".parse::<Combine>().unwrap(), Combine::Min);
        assert!("max".parse::<Combine>().is_err());
    }

    #[test]
    fn greedy_on_explicit_matrix() {
        let m = ScoreMatrix::from_combined(
            ids("s", 2),
            ids("t", 3),
            &[
                vec![Some(0.95), Some(0.3), Some(0.1)],
                vec![Some(0.9), Some(0.85), Some(0.2)],
            ],
        )
        .unwrap();
        let p = select_pairs(&m, 0.8, Matching::Greedy).unwrap();
        let got: Vec<_> = p.pairs.iter().map(|p| (p.source.as_str(), p.target.as_str())).collect();
        assert_eq!(got, vec![("s0", "t0"), ("s1", "t1")]);
        assert!(p.unmatched_sources.is_empty());
    }

    #[test]
    fn below_threshold_is_unmatched() {
        let m = ScoreMatrix::from_combined(ids("s", 1), ids("t", 1), &[vec![Some(0.6)]]).unwrap();
        let p = select_pairs(&m, 0.8, Matching::Greedy).unwrap();
        assert!(p.pairs.is_empty());
        assert_eq!(p.unmatched_sources, vec!["s0".to_string()]);
    }

    #[test]
    fn greedy_ties_break_lexicographically() {
        let m = ScoreMatrix::from_combined(
            ids("s", 2),
            ids("t", 2),
            &[vec![Some(0.9), Some(0.9)], vec![Some(0.9), Some(0.9)]],
        )
        .unwrap();
        let p = select_pairs(&m, 0.8, Matching::Greedy).unwrap();
        assert_eq!(p.pairs[0].target, "t0");
        assert_eq!(p.pairs[1].target, "t1");
    }

    #[test]
    fn rounding_noise_does_not_reorder_ties() {
        let m = ScoreMatrix::from_combined(
            ids("s", 2),
            ids("t", 2),
            &[
                vec![Some(1.0 - 3e-15), Some(1.0)],
                vec![Some(1.0), Some(1.0 - 1e-15)],
            ],
        )
        .unwrap();
        let p = select_pairs(&m, 0.8, Matching::Greedy).unwrap();
        assert_eq!(p.pairs[0].target, "t0");
        assert_eq!(p.pairs[1].target, "t1");
    }

    #[test]
    fn optimal_beats_greedy_when_greedy_is_myopic() {
        // greedy takes (s0,t0)=0.95 and strands s1; optimal pairs both
        let m = ScoreMatrix::from_combined(
            ids("s", 2),
            ids("t", 2),
            &[vec![Some(0.95), Some(0.9)], vec![Some(0.9), None]],
        )
        .unwrap();
        let g = select_pairs(&m, 0.8, Matching::Greedy).unwrap();
        assert_eq!(g.pairs.len(), 1);
        let o = select_pairs(&m, 0.8, Matching::Optimal).unwrap();
        let got: Vec<_> = o.pairs.iter().map(|p| (p.source.as_str(), p.target.as_str())).collect();
        assert_eq!(got, vec![("s0", "t1"), ("s1", "t0")]);
    }

    #[test]
    fn optimal_respects_threshold_and_rectangular_shapes() {
        let m = ScoreMatrix::from_combined(
            ids("s", 3),
            ids("t", 2),
            &[
                vec![Some(0.5), Some(0.99)],
                vec![Some(0.85), Some(0.9)],
                vec![Some(0.7), Some(0.2)],
            ],
        )
        .unwrap();
        let o = select_pairs(&m, 0.8, Matching::Optimal).unwrap();
        let got: Vec<_> = o.pairs.iter().map(|p| (p.source.as_str(), p.target.as_str())).collect();
        assert_eq!(got, vec![("s0", "t1"), ("s1", "t0")]);
        assert_eq!(o.unmatched_sources, vec!["s2".to_string()]);
    }

    #[test]
    fn empty_sources_rejected() {
        let m = ScoreMatrix::from_combined(vec![], ids("t", 1), &[]).unwrap();
        assert!(matches!(select_pairs(&m, 0.8, Matching::Greedy), Err(Error::EmptyModel)));
        assert!(matches!(
            pair_modules(&[], &[], 0.8, DEFAULT_RANK_TOL, Combine::Mean),
            Err(Error::EmptyModel)
        ));
    }

    #[test]
    fn identical_module_lists_self_pair() {
        let mods: Vec<_> = (0..3)
            .map(|i| (format!("m{i}"), WeightMatrix::new(random(8, 6, 40 + i)).unwrap()))
            .collect();
        // make ranks deficient so the bases are informative
        let mods: Vec<_> = mods
            .into_iter()
            .map(|(id, w)| {
                let f = crate::linalg::truncated_svd(&w, 2).unwrap();
                (id, WeightMatrix::new(f.product()).unwrap())
            })
            .collect();
        let p = pair_modules(&mods, &mods, 0.8, DEFAULT_RANK_TOL, Combine::Mean).unwrap();
        assert_eq!(p.pairs.len(), 3);
        for pair in &p.pairs {
            assert_eq!(pair.source, pair.target);
            assert!((pair.score.combined - 1.0).abs() < 1e-8);
        }
    }
}

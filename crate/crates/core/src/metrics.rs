//! Generation metrics over embedding sets: FID, Diversity, MModality,
//! Matching score and R-Precision, plus the tabulated evaluation suite.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::tmr::retrieval_pool;

pub const DIVERSITY_PAIRS: usize = 300;
pub const MMODALITY_GENERATIONS: usize = 10;
pub const REPETITIONS: usize = 5;
pub const R_PRECISION_POOL: usize = 32;
pub const TMR_R_PRECISION_POOL: usize = 256;

fn to_matrix(a: &Array) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0).max(1.0);
    (mean, cov)
}

/// Fréchet distance together with the numerical repairs that were needed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fid {
    pub value: f64,
    /// Ridge added to both covariances because a set had no more rows than columns.
    pub shrinkage: f64,
    /// Count of negative eigenvalues clipped to zero in the square root.
    pub clipped: usize,
}

pub fn fid(real: &Array, gen: &Array) -> Result<Fid> {
    if real.cols() != gen.cols() || real.rows() < 2 || gen.rows() < 2 {
        return Err(Error::shape("fid", format!("{:?} vs {:?}", real.shape(), gen.shape())));
    }
    if !real.all_finite() || !gen.all_finite() {
        return Err(Error::NonFinite { what: "fid features".into() });
    }
    let d = real.cols();
    let (m1, mut s1) = moments(&to_matrix(real));
    let (m2, mut s2) = moments(&to_matrix(gen));
    let shrinkage = if real.rows() <= d || gen.rows() <= d { 1e-6 } else { 0.0 };
    if shrinkage > 0.0 {
        s1 += DMatrix::identity(d, d) * shrinkage;
        s2 += DMatrix::identity(d, d) * shrinkage;
    }
    // Tr((S1 S2)^{1/2}) = Tr((S1^{1/2} S2 S1^{1/2})^{1/2}), the latter symmetric.
    let e1 = SymmetricEigen::new(s1.clone());
    let mut clipped = 0;
    let mut root = |v: f64| {
        if v < 0.0 {
            clipped += 1;
            0.0
        } else {
            v.sqrt()
        }
    };
    let sq1 = &e1.eigenvectors * DMatrix::from_diagonal(&e1.eigenvalues.map(&mut root)) * e1.eigenvectors.transpose();
    let mut inner = &sq1 * &s2 * &sq1;
    inner = (&inner + inner.transpose()) * 0.5;
    let e = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|&v| root(v)).sum();
    let diff = &m1 - &m2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "fid value".into() });
    }
    Ok(Fid { value: value.max(0.0), shrinkage, clipped })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    pub value: f64,
    pub pairs: usize,
    /// True when fewer distinct pairs exist than requested.
    pub clamped: bool,
}

/// Mean distance over seeded distinct unordered pairs.
pub fn diversity(features: &Array, pair_count: usize, seed: u64) -> Result<Diversity> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 items, got {n}")));
    }
    let available = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if available <= pair_count {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = BTreeSet::new();
        let mut out = Vec::with_capacity(pair_count);
        while out.len() < pair_count {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i != j && set.insert((i.min(j), i.max(j))) {
                out.push((i.min(j), i.max(j)));
            }
        }
        out
    };
    let total: f64 = pairs.iter().map(|&(i, j)| dist(features.row(i), features.row(j))).sum();
    Ok(Diversity { value: total / pairs.len() as f64, pairs: pairs.len(), clamped: available < pair_count })
}

/// Mean over prompts of the mean pairwise distance among that prompt's generations.
pub fn mmodality(groups: &[Array]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Invalid("mmodality needs at least one prompt".into()));
    }
    let mut total = 0.0;
    for (t, g) in groups.iter().enumerate() {
        let n = g.rows();
        if n < 2 {
            return Err(Error::Invalid(format!("prompt {t} has {n} generations, need at least 2")));
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += dist(g.row(i), g.row(j));
            }
        }
        total += s / (n * (n - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}

pub fn matching_score(text: &Array, motion: &Array) -> Result<f64> {
    if text.shape() != motion.shape() || text.rows() == 0 {
        return Err(Error::shape("matching score", format!("{:?} vs {:?}", text.shape(), motion.shape())));
    }
    Ok((0..text.rows()).map(|i| dist(text.row(i), motion.row(i))).sum::<f64>() / text.rows() as f64)
}

/// Motion-to-text Top-1/2/3 accuracy in pools of `pool` texts: the paired
/// text plus seeded negatives, ranked by Euclidean distance.
pub fn r_precision(text: &Array, motion: &Array, pool: usize, seed: u64) -> Result<[f64; 3]> {
    if text.shape() != motion.shape() {
        return Err(Error::shape("r-precision", format!("{:?} vs {:?}", text.shape(), motion.shape())));
    }
    let n = text.rows();
    if n < pool {
        return Err(Error::Invalid(format!("r-precision pool of {pool} needs at least {pool} items, got {n}")));
    }
    let mut hits = [0usize; 3];
    for i in 0..n {
        let cands = retrieval_pool(i, n, pool, seed)?;
        let d_gt = dist(motion.row(i), text.row(i));
        // rank = candidates strictly closer, or equally close with lower index
        let rank = cands[1..]
            .iter()
            .filter(|&&j| {
                let d = dist(motion.row(i), text.row(j));
                d < d_gt || (d == d_gt && j < i)
            })
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// Row-wise unit-norm copy.
pub fn l2_normalize(a: &Array) -> Array {
    let mut out = a.clone();
    let k = out.cols();
    for row in out.data_mut().chunks_mut(k) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    fn cell(opt: &Option<Self>) -> String {
        match opt {
            Some(s) => format!("{:.4}±{:.4}", s.mean, s.std),
            None => "n/a".into(),
        }
    }
}

/// Features of one evaluation repetition of a system.
#[derive(Clone, Debug)]
pub struct Generated {
    /// Motion embeddings paired row-for-row with the suite's text embeddings.
    pub motion: Array,
    /// Per-prompt repeated generations for MModality, if collected.
    pub groups: Vec<Array>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub system: String,
    pub fid: Option<Stat>,
    pub tmr_r_precision: [Option<Stat>; 3],
    pub r_precision: [Option<Stat>; 3],
    pub tmr_matching: Option<Stat>,
    pub matching: Option<Stat>,
    pub mmodality: Option<Stat>,
    pub diversity: Option<Stat>,
}

impl SuiteRow {
    pub const HEADER: &'static str = "system\tFID\tTMR-R-Precision(256) Top1\tTop2\tTop3\tR-Precision(32) Top1\tTop2\tTop3\tTMR-Matching\tMatching\tMModality\tDiversity";

    pub fn to_tsv(&self) -> String {
        let mut cells = vec![self.system.clone(), Stat::cell(&self.fid)];
        cells.extend(self.tmr_r_precision.iter().map(Stat::cell));
        cells.extend(self.r_precision.iter().map(Stat::cell));
        for s in [&self.tmr_matching, &self.matching, &self.mmodality, &self.diversity] {
            cells.push(Stat::cell(s));
        }
        cells.join("\t")
    }
}

/// Metrics of one system over `reps` repetitions. Both metric families use
/// the retrieval model's embeddings: the plain columns rank raw means in
/// pools of 32, the prefixed columns rank unit-normalized means in pools of
/// 256. Metrics that cannot be computed at this scale are reported as n/a.
pub fn evaluate_system(
    system: &str,
    text: &Array,
    real_motion: &Array,
    reps: usize,
    seed: u64,
    mut generate: impl FnMut(usize) -> Result<Generated>,
) -> Result<SuiteRow> {
    if text.shape() != real_motion.shape() {
        return Err(Error::shape("evaluation", format!("{:?} vs {:?}", text.shape(), real_motion.shape())));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 11];
    let mut missing = [false; 11];
    let text_n = l2_normalize(text);
    for rep in 0..reps.max(1) {
        let s = seed.wrapping_add(rep as u64);
        let g = generate(rep)?;
        if g.motion.shape() != text.shape() {
            return Err(Error::shape("evaluation", format!("generated {:?} for texts {:?}", g.motion.shape(), text.shape())));
        }
        let motion_n = l2_normalize(&g.motion);
        let mut put = |c: usize, v: Option<f64>| match v {
            Some(x) => cols[c].push(x),
            None => missing[c] = true,
        };
        put(0, fid(real_motion, &g.motion).ok().map(|f| f.value));
        let tmr_r = r_precision(&text_n, &motion_n, TMR_R_PRECISION_POOL, s).ok();
        let r = r_precision(text, &g.motion, R_PRECISION_POOL, s).ok();
        for k in 0..3 {
            put(1 + k, tmr_r.map(|v| v[k]));
            put(4 + k, r.map(|v| v[k]));
        }
        put(7, matching_score(&text_n, &motion_n).ok());
        put(8, matching_score(text, &g.motion).ok());
        put(9, if g.groups.is_empty() { None } else { Some(mmodality(&g.groups)?) });
        put(10, Some(diversity(&g.motion, DIVERSITY_PAIRS, s)?.value));
    }
    let stat = |c: usize| (!missing[c] && !cols[c].is_empty()).then(|| Stat::of(&cols[c]));
    Ok(SuiteRow {
        system: system.to_string(),
        fid: stat(0),
        tmr_r_precision: [stat(1), stat(2), stat(3)],
        r_precision: [stat(4), stat(5), stat(6)],
        tmr_matching: stat(7),
        matching: stat(8),
        mmodality: stat(9),
        diversity: stat(10),
    })
}

/// Tab-separated report with the substitution note on the extractor.
pub fn format_report(rows: &[SuiteRow], extractor: &str) -> String {
    let mut s = format!("# features: {extractor} (both plain and TMR- columns)\n{}\n", SuiteRow::HEADER);
    for r in rows {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn randn(n: usize, k: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::new(&[n, k], (0..n * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let x = randn(200, 6, 1);
        let y = randn(150, 6, 2);
        assert!(fid(&x, &x).unwrap().value <= 1e-6);
        let (a, b) = (fid(&x, &y).unwrap().value, fid(&y, &x).unwrap().value);
        assert!((a - b).abs() < 1e-9, "{a} {b}");
        assert!(fid(&randn(3, 6, 3), &x).unwrap().shrinkage > 0.0);
    }

    #[test]
    fn diversity_cases() {
        let two = Array::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = diversity(&two, DIVERSITY_PAIRS, 0).unwrap();
        assert_eq!((d.value, d.pairs, d.clamped), (5.0, 1, true));
        let same = Array::full(&[40, 3], 1.5);
        assert_eq!(diversity(&same, 300, 0).unwrap().value, 0.0);
        assert!(diversity(&Array::zeros(&[1, 3]), 300, 0).is_err());
        assert_eq!(diversity(&randn(100, 3, 0), 300, 0).unwrap().pairs, 300);
    }

    #[test]
    fn mmodality_brute_force() {
        let groups: Vec<Array> = (0..4).map(|s| randn(5, 3, s)).collect();
        let mut want = 0.0;
        for g in &groups {
            let mut s = 0.0;
            let mut c = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        s += dist(g.row(i), g.row(j));
                        c += 1.0;
                    }
                }
            }
            want += s / c;
        }
        assert!((mmodality(&groups).unwrap() - want / 4.0).abs() < 1e-12);
        assert!(mmodality(&[randn(1, 3, 0)]).is_err());
    }

    #[test]
    fn r_precision_aligned_and_monotone() {
        let x = randn(64, 8, 5);
        assert_eq!(r_precision(&x, &x, 32, 0).unwrap(), [1.0, 1.0, 1.0]);
        let y = randn(64, 8, 6);
        let r = r_precision(&x, &y, 32, 0).unwrap();
        assert!(r[0] <= r[1] && r[1] <= r[2]);
        assert!(r_precision(&x, &y, 65, 0).is_err());
    }

    #[test]
    fn matching_identical_is_zero() {
        let x = randn(10, 4, 1);
        assert_eq!(matching_score(&x, &x).unwrap(), 0.0);
    }
}

//! Attention dumps, token-level acoustic embeddings, cosine neighbours and
//! a 2-D principal component projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use log::info;

use crate::ctc::{alignment_to_segments, best_path_decode, collapse, ctc_forced_align, LogPosteriorGrid};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::CassNat;
use crate::nn::{ForwardCtx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Which attention layers to dump.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSelector {
    All,
    /// Self-attention of the last SAD block and of the last MAD block.
    Last,
    Named(Vec<String>),
}

/// Layer and 1-based head selection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSelector {
    pub layers: LayerSelector,
    pub heads: Option<RangeInclusive<usize>>,
}

impl AttentionSelector {
    pub fn all() -> Self {
        Self { layers: LayerSelector::All, heads: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub layer: String,
    /// 1-based.
    pub head: usize,
    pub weights: Tensor,
}

/// Decodes `x` (or force-aligns it to `labels`) with weight retention on and
/// returns the selected heads' weight matrices in forward order.
pub fn dump_attention(
    model: &CassNat,
    store: &ParamStore,
    x: &Tensor,
    labels: Option<&[usize]>,
    selector: &AttentionSelector,
) -> Result<Vec<AttentionDump>> {
    let heads = model.cfg.n_heads;
    if let Some(r) = &selector.heads {
        if *r.start() == 0 || *r.end() > heads || r.is_empty() {
            return Err(Error::Usage(format!("head range {}-{} outside 1-{heads}", r.start(), r.end())));
        }
    }
    let wanted: Option<Vec<String>> = match &selector.layers {
        LayerSelector::All => None,
        LayerSelector::Last => {
            let mut v = Vec::new();
            if !model.sad.is_empty() {
                v.push(format!("sad.{}.self", model.sad.len() - 1));
            }
            v.push(format!("mad.{}.self", model.mad.len() - 1));
            Some(v)
        }
        LayerSelector::Named(v) => Some(v.clone()),
    };
    let mut ctx = ForwardCtx::new(store, Mode::Eval).retain_attention();
    let xv = ctx.tape.constant(x.clone());
    let enc = model.encode(&mut ctx, xv, false)?;
    let lp = ctx.tape.value(enc.ctc_final);
    let grid = LogPosteriorGrid::from_log_probs(lp.rows(), lp.cols(), lp.data().to_vec())?;
    let path = match labels {
        Some(y) => ctc_forced_align(&grid, y)?,
        None => best_path_decode(&grid),
    };
    if collapse(&path.labels).is_empty() {
        return Err(Error::NoTokens);
    }
    model.decode_segments(&mut ctx, enc.h, &alignment_to_segments(&path)?)?;
    let records = ctx.attention_records();
    if let Some(names) = &wanted {
        if let Some(n) = names.iter().find(|n| !records.iter().any(|r| &r.layer == *n)) {
            let known: Vec<&str> = records.iter().filter(|r| r.head == 0).map(|r| r.layer.as_str()).collect();
            return Err(Error::Usage(format!("unknown attention layer {n}; available: {}", known.join(", "))));
        }
    }
    Ok(records
        .iter()
        .filter(|r| wanted.as_ref().is_none_or(|w| w.contains(&r.layer)))
        .filter(|r| selector.heads.as_ref().is_none_or(|h| h.contains(&(r.head + 1))))
        .map(|r| AttentionDump { layer: r.layer.clone(), head: r.head + 1, weights: ctx.tape.value(r.weights).clone() })
        .collect())
}

pub fn format_attention(dumps: &[AttentionDump]) -> String {
    let mut s = String::new();
    for d in dumps {
        let w = &d.weights;
        writeln!(s, "# layer={} head={} rows={} cols={}", d.layer, d.head, w.rows(), w.cols()).unwrap();
        for r in 0..w.rows() {
            let row: Vec<String> = w.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
    }
    s
}

/// Per-token running means of embedding vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    entries: BTreeMap<usize, (Vec<f64>, usize)>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: usize, v: &[f64]) -> Result<()> {
        if let Some((first, _)) = self.entries.values().next() {
            if first.len() != v.len() {
                return Err(Error::dim("embedding table", format!("width {} vs {}", v.len(), first.len())));
            }
        }
        let (mean, count) = self.entries.entry(token).or_insert_with(|| (vec![0.0; v.len()], 0));
        *count += 1;
        let k = *count as f64;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / k;
        }
        Ok(())
    }

    pub fn get(&self, token: usize) -> Option<(&[f64], usize)> {
        self.entries.get(&token).map(|(m, c)| (m.as_slice(), *c))
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, (m, c)) in &self.entries {
            let v: Vec<String> = m.iter().map(|x| x.to_string()).collect();
            writeln!(s, "{t}\t{c}\t{}", v.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::ConfigLine { line: i + 1, detail: what.to_string() };
            let mut cols = line.split('\t');
            let token: usize = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad token id"))?;
            let count: usize = cols.next().and_then(|s| s.parse().ok()).filter(|c| *c >= 1).ok_or_else(|| bad("bad count"))?;
            let mean: Vec<f64> = cols
                .next()
                .ok_or_else(|| bad("missing vector"))?
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad vector value"))?;
            if *width.get_or_insert(mean.len()) != mean.len() || cols.next().is_some() {
                return Err(bad("inconsistent row"));
            }
            if entries.insert(token, (mean, count)).is_some() {
                return Err(bad("duplicate token"));
            }
        }
        Ok(Self { entries })
    }
}

/// Which representation counts as a token's acoustic embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmbeddingTap {
    #[default]
    Extractor,
    DecoderOutput,
}

/// Force-aligns every utterance to its reference and averages the tapped
/// per-token vectors by reference token. Returns the table and the number of
/// utterances skipped as infeasible.
pub fn extract_embeddings(
    model: &CassNat,
    store: &ParamStore,
    data: &[Utterance],
    tap: EmbeddingTap,
) -> Result<(EmbeddingTable, usize)> {
    let mut table = EmbeddingTable::new();
    let mut skipped = 0;
    for u in data {
        let mut ctx = ForwardCtx::new(store, Mode::Eval);
        let art = match model.forward_train(&mut ctx, &u.features, &u.labels) {
            Ok(a) => a,
            Err(Error::Infeasible { .. }) | Err(Error::Usage(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let v = match tap {
            EmbeddingTap::Extractor => art.decoder.embeddings,
            EmbeddingTap::DecoderOutput => art.decoder.states,
        };
        let m = ctx.tape.value(v);
        for (r, &t) in u.labels.iter().enumerate() {
            table.add(t, m.row(r))?;
        }
    }
    if skipped > 0 {
        info!("skipped {skipped} infeasible utterances");
    }
    Ok((table, skipped))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// The `n` tokens most cosine-similar to `token`, best first; ties go to
/// the lower token id.
pub fn cosine_neighbors(table: &EmbeddingTable, token: usize, n: usize) -> Result<Vec<(usize, f64)>> {
    let (q, _) = table.get(token).ok_or_else(|| Error::Usage(format!("token {token} not in table")))?;
    if table.len() <= n {
        return Err(Error::Usage(format!("table has {} tokens; cannot list {n} neighbours", table.len())));
    }
    let mut sims = Vec::with_capacity(table.len() - 1);
    for (&t, (v, _)) in &table.entries {
        if t != token {
            sims.push((t, cosine(q, v)?));
        }
    }
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(n);
    Ok(sims)
}

/// Fraction of `pairs` whose members appear in each other's top-`k`
/// cosine neighbours.
pub fn mutual_top_k_rate(table: &EmbeddingTable, pairs: &[(usize, usize)], k: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Usage("no pairs to check".into()));
    }
    let mut hits = 0;
    for &(a, b) in pairs {
        let na = cosine_neighbors(table, a, k)?;
        let nb = cosine_neighbors(table, b, k)?;
        hits += usize::from(na.iter().any(|n| n.0 == b) && nb.iter().any(|n| n.0 == a));
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    const THRESHOLD: f64 = 1e-12;
    const MAX_SWEEPS: usize = 100;
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::dim("jacobi_eigen", "matrix is not square"));
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let off = |a: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > THRESHOLD * scale {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Degenerate(format!("Jacobi did not converge in {MAX_SWEEPS} sweeps")));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
                for row in v.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut e: Vec<f64> = (0..n).map(|k| v[k][i]).collect();
            if e.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
                e.iter_mut().for_each(|x| *x = -*x);
            }
            e
        })
        .collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each axis (the top two covariance eigenvalues).
    pub variances: [f64; 2],
    pub axes: [Vec<f64>; 2],
}

impl Pca2d {
    /// Share of total variance captured by each axis.
    pub fn explained_ratio(&self, total: f64) -> [f64; 2] {
        [self.variances[0] / total, self.variances[1] / total]
    }
}

/// Projects centred vectors onto the top two eigenvectors of their sample
/// covariance.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Pca2d> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Usage(format!("PCA needs at least 2 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::dim("pca_2d", "vectors must share a width of at least 2"));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for c in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|x| *x /= (n - 1) as f64);
    if cov.iter().flatten().all(|x| *x == 0.0) {
        return Err(Error::Degenerate("all vectors are identical".into()));
    }
    let (values, vectors) = jacobi_eigen(&cov)?;
    let axes = [vectors[0].clone(), vectors[1].clone()];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let coords = centred.iter().map(|c| [dot(c, &axes[0]), dot(c, &axes[1])]).collect();
    Ok(Pca2d { coords, variances: [values[0].max(0.0), values[1].max(0.0)], axes })
}

pub fn format_pca(tokens: &[usize], pca: &Pca2d) -> String {
    let mut s = String::new();
    for (t, c) in tokens.iter().zip(&pca.coords) {
        writeln!(s, "{t}\t{}\t{}", c[0], c[1]).unwrap();
    }
    s
}

/// Row sums of every dump, for checking the softmax contract.
pub fn row_sums(dump: &AttentionDump) -> Vec<f64> {
    (0..dump.weights.rows()).map(|r| dump.weights.row(r).iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn toy() -> (CassNat, ParamStore) {
        let cfg = ModelConfig {
            feat_dim: 8,
            frontend_channels: 2,
            d_att: 8,
            n_heads: 2,
            d_ff: 12,
            n_enc: 2,
            enc_middle: 1,
            n_sad: 1,
            n_mad: 2,
            mad_middle: 1,
            k_enc: 3,
            k_dec: 2,
            enc_kernel: 3,
            dec_kernel: 3,
            vocab: 4,
            ..ModelConfig::default()
        };
        CassNat::build(&cfg, 5).unwrap()
    }

    fn features(frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([frames, 8], (0..frames * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn streaming_mean_matches_two_pass() {
        let vs = random_vectors(50, 6, 1);
        let mut table = EmbeddingTable::new();
        for (i, v) in vs.iter().enumerate() {
            table.add(1 + i % 3, v).unwrap();
        }
        for t in 1..=3 {
            let members: Vec<&Vec<f64>> = vs.iter().enumerate().filter(|(i, _)| 1 + i % 3 == t).map(|(_, v)| v).collect();
            let (mean, count) = table.get(t).unwrap();
            assert_eq!(count, members.len());
            for j in 0..6 {
                let want = members.iter().map(|v| v[j]).sum::<f64>() / members.len() as f64;
                assert!((mean[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_and_pair_means() {
        let mut t = EmbeddingTable::new();
        t.add(4, &[1.5, -2.0]).unwrap();
        assert_eq!(t.get(4), Some((&[1.5, -2.0][..], 1)));
        t.add(4, &[0.5, 1.0]).unwrap();
        assert_eq!(t.get(4), Some((&[1.0, -0.5][..], 2)));
        assert!(t.add(5, &[1.0]).is_err());
    }

    #[test]
    fn table_text_round_trip() {
        let mut t = EmbeddingTable::new();
        for (i, v) in random_vectors(7, 4, 2).iter().enumerate() {
            t.add(i % 4 + 1, v).unwrap();
        }
        assert_eq!(EmbeddingTable::from_text(&t.to_text()).unwrap(), t);
        assert!(matches!(EmbeddingTable::from_text("1\t0\t1 2\n"), Err(Error::ConfigLine { line: 1, .. })));
        assert!(matches!(EmbeddingTable::from_text("1\t1\t1 2\n2\t1\t1\n"), Err(Error::ConfigLine { line: 2, .. })));
    }

    fn table_of(vs: &[Vec<f64>]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new();
        for (i, v) in vs.iter().enumerate() {
            t.add(i + 1, v).unwrap();
        }
        t
    }

    #[test]
    fn duplicate_and_orthogonal_neighbours() {
        let t = table_of(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0]]);
        let n = cosine_neighbors(&t, 1, 2).unwrap();
        assert_eq!(n[0].0, 3);
        assert!((n[0].1 - 1.0).abs() < 1e-15);
        assert_eq!(n[1], (2, 0.0));
        assert!(matches!(cosine_neighbors(&t, 1, 3), Err(Error::Usage(_))));
        assert!(matches!(cosine_neighbors(&t, 9, 1), Err(Error::Usage(_))));
        let z = table_of(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(cosine_neighbors(&z, 1, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn neighbours_match_exhaustive_scan() {
        let vs = random_vectors(15, 5, 3);
        let t = table_of(&vs);
        for q in 1..=15 {
            let got = cosine_neighbors(&t, q, 14).unwrap();
            let mut want: Vec<(usize, f64)> = (1..=15)
                .filter(|&k| k != q)
                .map(|k| {
                    let (a, b) = (&vs[q - 1], &vs[k - 1]);
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    (k, dot / (norm(a) * norm(b)))
                })
                .collect();
            want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0);
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutual_rate_counts_pairs() {
        let t = table_of(&[vec![1.0, 0.1], vec![1.0, 0.2], vec![-1.0, 1.0], vec![-1.0, 1.1]]);
        assert_eq!(mutual_top_k_rate(&t, &[(1, 2), (3, 4)], 1).unwrap(), 1.0);
        assert_eq!(mutual_top_k_rate(&t, &[(1, 3), (3, 4)], 1).unwrap(), 0.5);
    }

    fn oracle_top2(vs: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let n = vs.len();
        let d = vs[0].len();
        let x = DMatrix::from_fn(n, d, |i, j| vs[i][j]);
        let mean = x.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = c.transpose() * &c / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let vals = idx[..2].iter().map(|&i| eig.eigenvalues[i]).collect();
        let axes = DMatrix::from_fn(d, 2, |r, k| eig.eigenvectors[(r, idx[k])]);
        (vals, c * axes)
    }

    fn assert_matches_oracle(vs: &[Vec<f64>], tol: f64) {
        let p = pca_2d(vs).unwrap();
        let (vals, proj) = oracle_top2(vs);
        for k in 0..2 {
            assert!((p.variances[k] - vals[k]).abs() < tol);
            let sign = (0..vs.len())
                .map(|i| proj[(i, k)] * p.coords[i][k])
                .sum::<f64>()
                .signum();
            for i in 0..vs.len() {
                assert!((p.coords[i][k] - sign * proj[(i, k)]).abs() < tol, "axis {k} row {i}");
            }
        }
    }

    #[test]
    fn pca_matches_dense_oracle() {
        for seed in 0..10 {
            assert_matches_oracle(&random_vectors(12, 8, seed), 1e-8);
        }
    }

    #[test]
    fn jacobi_sign_and_orthonormality() {
        let vs = random_vectors(20, 6, 11);
        let p = pca_2d(&vs).unwrap();
        for a in &p.axes {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            assert!(*a.iter().find(|x| x.abs() > 1e-12).unwrap() > 0.0);
        }
        let dot: f64 = p.axes[0].iter().zip(&p.axes[1]).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (u, v) = (random_vectors(1, 5, 5).remove(0), random_vectors(1, 5, 6).remove(0));
        let vs: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                u.iter().zip(&v).map(|(x, y)| a * x + b * y + 3.0).collect()
            })
            .collect();
        let p = pca_2d(&vs).unwrap();
        let mean: Vec<f64> = (0..5).map(|j| vs.iter().map(|w| w[j]).sum::<f64>() / 10.0).collect();
        for (w, c) in vs.iter().zip(&p.coords) {
            for j in 0..5 {
                let r = mean[j] + c[0] * p.axes[0][j] + c[1] * p.axes[1][j];
                assert!((r - w[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn isotropic_variances_equal() {
        let vs = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let p = pca_2d(&vs).unwrap();
        assert!((p.variances[0] - p.variances[1]).abs() < 1e-12);
    }

    #[test]
    fn pca_errors_and_two_points() {
        assert!(matches!(pca_2d(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]), Err(Error::Degenerate(_))));
        assert!(matches!(pca_2d(&[vec![1.0, 2.0]]), Err(Error::Usage(_))));
        let p = pca_2d(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.coords.len(), 2);
        assert!((p.coords[0][0].abs() - 2.5).abs() < 1e-12);
        assert_eq!(format_pca(&[1, 2], &p).lines().count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pca_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..6.28) {
            let vs = random_vectors(10, 3, seed);
            let (c, s) = (angle.cos(), angle.sin());
            let rotated: Vec<Vec<f64>> = vs.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]).collect();
            let (a, b) = (pca_2d(&vs).unwrap(), pca_2d(&rotated).unwrap());
            for k in 0..2 {
                prop_assert!((a.variances[k] - b.variances[k]).abs() < 1e-9);
                for i in 0..10 {
                    prop_assert!((a.coords[i][k].abs() - b.coords[i][k].abs()).abs() < 1e-7);
                }
            }
        }

        #[test]
        fn neighbours_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let vs = random_vectors(8, 4, seed);
            let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let (a, b) = (table_of(&vs), table_of(&scaled));
            for q in 1..=8 {
                let ra: Vec<usize> = cosine_neighbors(&a, q, 7).unwrap().iter().map(|n| n.0).collect();
                let rb: Vec<usize> = cosine_neighbors(&b, q, 7).unwrap().iter().map(|n| n.0).collect();
                prop_assert_eq!(ra, rb);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (model, store) = toy();
        let x = features(24, 7);
        let y = [1, 2, 3];
        let dumps = dump_attention(&model, &store, &x, Some(&y), &AttentionSelector::all()).unwrap();
        // 2 encoder, tae, sad self, 2 × (mad self, mad cross); two heads each
        assert_eq!(dumps.len(), 2 * (2 + 1 + 1 + 4));
        for d in &dumps {
            for s in row_sums(d) {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let text = format_attention(&dumps);
        assert!(text.starts_with("# layer=encoder.0.self head=1 rows=6 cols=6\n"));
        assert!(text.contains("# layer=tae.cross head=2 rows=3 cols=6\n"));
    }

    #[test]
    fn last_layer_selection_and_single_token() {
        let (model, store) = toy();
        let x = features(16, 8);
        let sel = AttentionSelector { layers: LayerSelector::Last, heads: Some(1..=2) };
        let dumps = dump_attention(&model, &store, &x, Some(&[2]), &sel).unwrap();
        let names: Vec<(&str, usize)> = dumps.iter().map(|d| (d.layer.as_str(), d.head)).collect();
        assert_eq!(names, [("sad.0.self", 1), ("sad.0.self", 2), ("mad.1.self", 1), ("mad.1.self", 2)]);
        for d in &dumps {
            assert_eq!(d.weights, Tensor::new([1, 1], vec![1.0]).unwrap());
        }
        let bad = AttentionSelector { layers: LayerSelector::All, heads: Some(2..=3) };
        assert!(matches!(dump_attention(&model, &store, &x, Some(&[2]), &bad), Err(Error::Usage(_))));
        let unknown = AttentionSelector { layers: LayerSelector::Named(vec!["mad.9.self".into()]), heads: None };
        assert!(matches!(dump_attention(&model, &store, &x, Some(&[2]), &unknown), Err(Error::Usage(_))));
    }

    #[test]
    fn embeddings_average_extractor_rows() {
        let (model, store) = toy();
        let utts: Vec<Utterance> = (0..3)
            .map(|i| Utterance {
                features: features(20, 20 + i),
                labels: vec![1, 3],
                durations: vec![10, 10],
                lead_silence: 0,
                trail_silence: 0,
            })
            .collect();
        let (table, skipped) = extract_embeddings(&model, &store, &utts, EmbeddingTap::Extractor).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(table.tokens(), [1, 3]);
        let mut sum = [0.0; 8];
        for u in &utts {
            let mut ctx = ForwardCtx::new(&store, Mode::Eval);
            let art = model.forward_train(&mut ctx, &u.features, &u.labels).unwrap();
            for (s, v) in sum.iter_mut().zip(ctx.tape.value(art.decoder.embeddings).row(1)) {
                *s += v / 3.0;
            }
        }
        let (mean, count) = table.get(3).unwrap();
        assert_eq!(count, 3);
        for (a, b) in mean.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
        let short = Utterance { features: features(8, 1), labels: vec![1, 2, 1, 2, 1], ..utts[0].clone() };
        let (_, skipped) = extract_embeddings(&model, &store, &[short], EmbeddingTap::DecoderOutput).unwrap();
        assert_eq!(skipped, 1);
    }
}

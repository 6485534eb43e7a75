//! CTC machinery: loss, forced alignment, best-path and n-best alignment
//! decoding, collapse, alignment-to-segment mapping and trigger expansion.
//!
//! Label id 0 is the blank everywhere. Segments are 1-based and inclusive.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{log_sum_exp, Tensor};

pub const BLANK: usize = 0;

/// Per-frame log-probabilities over the vocabulary (blank included).
#[derive(Clone, Debug, PartialEq)]
pub struct LogPosteriorGrid {
    frames: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogPosteriorGrid {
    /// Builds a grid from `frames × vocab` log-scores, renormalizing each row.
    /// Entries may be `-inf` (probability zero) but never NaN or `+inf`.
    pub fn from_log_probs(frames: usize, vocab: usize, mut data: Vec<f64>) -> Result<Self> {
        if frames == 0 || vocab < 2 {
            return Err(Error::dim("log_posterior_grid", format!("need T' >= 1 and V >= 2, got {frames}x{vocab}")));
        }
        if data.len() != frames * vocab {
            return Err(Error::dim("log_posterior_grid", format!("{} entries for {frames}x{vocab}", data.len())));
        }
        if let Some(index) = data.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "log_posterior_grid".into(), index });
        }
        for (t, row) in data.chunks_mut(vocab).enumerate() {
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(Error::NonFinite { op: "log_posterior_grid row".into(), index: t * vocab });
            }
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Self { frames, vocab, data })
    }

    /// Builds a grid from per-frame probability rows (normalized on the way in).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let vocab = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::dim("log_posterior_grid", "ragged probability rows"));
        }
        let data = rows.iter().flatten().map(|p| p.ln()).collect();
        Self::from_log_probs(rows.len(), vocab, data)
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (t, v) = logits.expect_matrix("log_posterior_grid")?;
        Self::from_log_probs(t, v, logits.log_softmax_lastdim()?.into_data())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.vocab + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum of the path's per-frame log-probabilities.
    pub fn path_log_prob(&self, labels: &[usize]) -> f64 {
        labels.iter().enumerate().map(|(t, &k)| self.at(t, k)).sum()
    }
}

/// Frame-level label path.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPath {
    pub labels: Vec<usize>,
    pub log_prob: f64,
}

impl AlignmentPath {
    pub fn tokens(&self) -> Vec<usize> {
        collapse(&self.labels)
    }
}

/// Merges repeats, then drops blanks.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Minimum number of frames a path for `labels` needs: one per token plus a
/// separating blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(grid: &LogPosteriorGrid, labels: &[usize]) -> Result<()> {
    if let Some(pos) = labels.iter().position(|&l| l == BLANK) {
        return Err(Error::Usage(format!("label sequence contains blank at position {pos}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= grid.vocab) {
        return Err(Error::Usage(format!("label {l} outside vocabulary of size {}", grid.vocab)));
    }
    let required = min_frames(labels);
    if grid.frames < required {
        return Err(Error::Infeasible { frames: grid.frames, required });
    }
    Ok(())
}

/// Blank-interleaved extended label sequence.
fn extend(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered directly from `s - 2`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn forward_vars(grid: &LogPosteriorGrid, ext: &[usize]) -> Vec<f64> {
    let (t_max, s_max) = (grid.frames, ext.len());
    let mut alpha = vec![f64::NEG_INFINITY; t_max * s_max];
    alpha[0] = grid.at(0, ext[0]);
    if s_max > 1 {
        alpha[1] = grid.at(0, ext[1]);
    }
    for t in 1..t_max {
        for s in 0..s_max {
            let prev = &alpha[(t - 1) * s_max..t * s_max];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if can_skip(ext, s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_max + s] = a + grid.at(t, ext[s]);
        }
    }
    alpha
}

fn backward_vars(grid: &LogPosteriorGrid, ext: &[usize]) -> Vec<f64> {
    let (t_max, s_max) = (grid.frames, ext.len());
    let mut beta = vec![f64::NEG_INFINITY; t_max * s_max];
    let last = (t_max - 1) * s_max;
    beta[last + s_max - 1] = grid.at(t_max - 1, ext[s_max - 1]);
    if s_max > 1 {
        beta[last + s_max - 2] = grid.at(t_max - 1, ext[s_max - 2]);
    }
    for t in (0..t_max - 1).rev() {
        for s in 0..s_max {
            let next = &beta[(t + 1) * s_max..(t + 2) * s_max];
            let mut b = next[s];
            if s + 1 < s_max {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_max && can_skip(ext, s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_max + s] = b + grid.at(t, ext[s]);
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], t_max: usize, s_max: usize) -> f64 {
    let last = &alpha[(t_max - 1) * s_max..];
    if s_max > 1 {
        lse2(last[s_max - 1], last[s_max - 2])
    } else {
        last[0]
    }
}

/// Negative log of the total probability of every path collapsing to `labels`.
pub fn ctc_loss(grid: &LogPosteriorGrid, labels: &[usize]) -> Result<f64> {
    check_labels(grid, labels)?;
    let ext = extend(labels);
    let alpha = forward_vars(grid, &ext);
    Ok(-total_log_prob(&alpha, grid.frames, ext.len()))
}

/// CTC loss plus its gradient with respect to each grid entry, treating the
/// entries as independent log-probabilities: `∂L/∂lp[t,k] = −occupancy(t,k)`.
pub fn ctc_loss_and_grad(grid: &LogPosteriorGrid, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(grid, labels)?;
    let ext = extend(labels);
    let s_max = ext.len();
    let alpha = forward_vars(grid, &ext);
    let beta = backward_vars(grid, &ext);
    let log_p = total_log_prob(&alpha, grid.frames, s_max);
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss".into(), index: 0 });
    }
    let mut grad = vec![0.0; grid.frames * grid.vocab];
    for t in 0..grid.frames {
        for (s, &k) in ext.iter().enumerate() {
            let lp = grid.at(t, k);
            let ab = alpha[t * s_max + s] + beta[t * s_max + s];
            if ab == f64::NEG_INFINITY || lp == f64::NEG_INFINITY {
                continue;
            }
            grad[t * grid.vocab + k] -= (ab - lp - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Records the CTC loss of the log-probability matrix `log_probs` (`T'×V`) on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let value = tape.value(log_probs);
    let (t, v) = value.expect_matrix("ctc_loss")?;
    let grid = LogPosteriorGrid::from_log_probs(t, v, value.data().to_vec())?;
    let (loss, grad) = ctc_loss_and_grad(&grid, labels)?;
    tape.scalar_with_grad(log_probs, loss, grad)
}

/// Viterbi forced alignment: the most probable path collapsing to `labels`.
///
/// Ties prefer the predecessor with the higher extended-state index, so labels
/// are emitted as early as possible.
pub fn ctc_forced_align(grid: &LogPosteriorGrid, labels: &[usize]) -> Result<AlignmentPath> {
    check_labels(grid, labels)?;
    let ext = extend(labels);
    let (t_max, s_max) = (grid.frames, ext.len());
    let mut delta = vec![f64::NEG_INFINITY; t_max * s_max];
    let mut back = vec![0usize; t_max * s_max];
    delta[0] = grid.at(0, ext[0]);
    if s_max > 1 {
        delta[1] = grid.at(0, ext[1]);
    }
    for t in 1..t_max {
        for s in 0..s_max {
            let prev = (t - 1) * s_max;
            let mut best = delta[prev + s];
            let mut arg = s;
            if s >= 1 && delta[prev + s - 1] > best {
                best = delta[prev + s - 1];
                arg = s - 1;
            }
            if can_skip(&ext, s) && delta[prev + s - 2] > best {
                best = delta[prev + s - 2];
                arg = s - 2;
            }
            delta[t * s_max + s] = best + grid.at(t, ext[s]);
            back[t * s_max + s] = arg;
        }
    }
    let last = (t_max - 1) * s_max;
    let mut s = s_max - 1;
    if s_max > 1 && delta[last + s_max - 2] > delta[last + s_max - 1] {
        s = s_max - 2;
    }
    let log_prob = delta[last + s];
    if log_prob == f64::NEG_INFINITY {
        return Err(Error::Degenerate("every collapsing path has probability zero".into()));
    }
    let mut path = vec![0; t_max];
    for t in (0..t_max).rev() {
        path[t] = ext[s];
        if t > 0 {
            s = back[t * s_max + s];
        }
    }
    Ok(AlignmentPath { labels: path, log_prob })
}

/// Per-frame argmax; ties go to the lower label id.
pub fn best_path_decode(grid: &LogPosteriorGrid) -> AlignmentPath {
    let mut labels = Vec::with_capacity(grid.frames);
    let mut log_prob = 0.0;
    for t in 0..grid.frames {
        let row = grid.row(t);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        labels.push(best);
        log_prob += row[best];
    }
    AlignmentPath { labels, log_prob }
}

fn rank(a: &AlignmentPath, b: &AlignmentPath) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.labels.cmp(&b.labels))
}

/// The `beam` most probable frame-level paths, best first.
///
/// Frames are conditionally independent, so a frame-synchronous beam that
/// keeps the top `beam` prefixes is exact. Equal scores are ordered
/// lexicographically by label sequence.
pub fn beam_align_nbest(grid: &LogPosteriorGrid, beam: usize) -> Result<Vec<AlignmentPath>> {
    if beam == 0 {
        return Err(Error::Usage("beam must be at least 1".into()));
    }
    let mut hyps = vec![AlignmentPath { labels: Vec::new(), log_prob: 0.0 }];
    for t in 0..grid.frames {
        let row = grid.row(t);
        let mut next = Vec::with_capacity(hyps.len() * grid.vocab);
        for h in &hyps {
            for (k, &lp) in row.iter().enumerate() {
                let mut labels = Vec::with_capacity(grid.frames);
                labels.extend_from_slice(&h.labels);
                labels.push(k);
                next.push(AlignmentPath { labels, log_prob: h.log_prob + lp });
            }
        }
        next.sort_by(rank);
        next.truncate(beam);
        hyps = next;
    }
    Ok(hyps)
}

/// One token's acoustic span, frames 1-based inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub token: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSegmentation {
    segments: Vec<Segment>,
}

impl TokenSegmentation {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::NoTokens);
        }
        for w in segments.windows(2) {
            if w[1].start < w[0].start || w[1].end < w[0].end {
                return Err(Error::Usage(format!("segments out of order: {:?} then {:?}", w[0], w[1])));
            }
        }
        if let Some(s) = segments.iter().find(|s| s.start == 0 || s.start > s.end || s.token == BLANK) {
            return Err(Error::Usage(format!("invalid segment {s:?}")));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.token).collect()
    }

    /// Largest frame index referenced.
    pub fn last_frame(&self) -> usize {
        self.segments.iter().map(|s| s.end).max().unwrap_or(0)
    }
}

impl fmt::Display for TokenSegmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            writeln!(f, "{}\t{}\t{}", s.token, s.start, s.end)?;
        }
        Ok(())
    }
}

/// Maps an alignment to per-token spans `(t_{u-1}, t_u]` where `t_u` is the
/// last frame of token `u`'s emission run. Leading and separating blanks
/// belong to the following token; trailing blanks belong to none.
pub fn alignment_to_segments(path: &AlignmentPath) -> Result<TokenSegmentation> {
    let labels = &path.labels;
    let mut segments = Vec::new();
    let mut prev_end = 0;
    for (t, &l) in labels.iter().enumerate() {
        let run_ends = l != BLANK && labels.get(t + 1) != Some(&l);
        if run_ends {
            segments.push(Segment { token: l, start: prev_end + 1, end: t + 1 });
            prev_end = t + 1;
        }
    }
    TokenSegmentation::new(segments)
}

/// Widens every span by `context` frames on each side, clipped to `[1, frames]`.
pub fn expand_segments(seg: &TokenSegmentation, context: usize, frames: usize) -> TokenSegmentation {
    let segments = seg
        .segments
        .iter()
        .map(|s| Segment {
            token: s.token,
            start: s.start.saturating_sub(context).max(1),
            end: (s.end + context).min(frames),
        })
        .collect();
    TokenSegmentation { segments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 1;
    const B: usize = 2;

    fn uniform(frames: usize, vocab: usize) -> LogPosteriorGrid {
        LogPosteriorGrid::from_log_probs(frames, vocab, vec![0.0; frames * vocab]).unwrap()
    }

    fn path(labels: &[usize]) -> AlignmentPath {
        AlignmentPath { labels: labels.to_vec(), log_prob: 0.0 }
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[A, A, 0, A]), vec![A, A]);
        assert_eq!(collapse(&[0, A, A, 0, B]), vec![A, B]);
    }

    #[test]
    fn loss_single_frame_certainty() {
        let g = LogPosteriorGrid::from_probs(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(ctc_loss(&g, &[A]).unwrap(), 0.0);
    }

    #[test]
    fn loss_uniform_examples() {
        // 6 of 27 frame paths collapse to [a]; only (a, blank, a) collapses to [a, a].
        let g = uniform(3, 3);
        assert!((ctc_loss(&g, &[A]).unwrap() - (-(6.0f64 / 27.0).ln())).abs() < 1e-12);
        assert!((ctc_loss(&g, &[A, A]).unwrap() - 27f64.ln()).abs() < 1e-12);
        assert!((ctc_loss(&g, &[A]).unwrap() - 1.5041).abs() < 1e-4);
        assert!((ctc_loss(&g, &[A, A]).unwrap() - 3.2958).abs() < 1e-4);
    }

    #[test]
    fn loss_errors() {
        let g = uniform(2, 3);
        assert!(matches!(ctc_loss(&g, &[A, A]), Err(Error::Infeasible { frames: 2, required: 3 })));
        assert!(matches!(ctc_loss(&g, &[0]), Err(Error::Usage(_))));
        let msg = ctc_loss(&g, &[A, A]).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('3'));
    }

    #[test]
    fn forced_align_worked_example() {
        // columns: blank, a, b
        let g = LogPosteriorGrid::from_probs(&[
            vec![0.2, 0.7, 0.1],
            vec![0.3, 0.6, 0.1],
            vec![0.8, 0.1, 0.1],
        ])
        .unwrap();
        let p = ctc_forced_align(&g, &[A]).unwrap();
        assert_eq!(p.labels, vec![A, A, 0]);
        assert!((p.log_prob.exp() - 0.336).abs() < 1e-12);
    }

    #[test]
    fn forced_align_one_hot_is_verbatim() {
        let labels = [1, 2, 1, 3];
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let g = LogPosteriorGrid::from_probs(&rows).unwrap();
        let p = ctc_forced_align(&g, &labels).unwrap();
        assert_eq!(p.labels, labels);
        assert_eq!(p.log_prob, 0.0);
    }

    #[test]
    fn forced_align_tie_break_emits_early() {
        let p = ctc_forced_align(&uniform(4, 3), &[A]).unwrap();
        assert_eq!(p.labels, vec![A, 0, 0, 0]);
    }

    #[test]
    fn best_path_examples() {
        let g = LogPosteriorGrid::from_probs(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(best_path_decode(&g).labels, vec![2, 0, 1]);
        assert_eq!(best_path_decode(&uniform(5, 4)).labels, vec![0; 5]);
    }

    #[test]
    fn beam_one_matches_best_path() {
        let g = uniform(3, 3);
        let b = beam_align_nbest(&g, 1).unwrap();
        assert_eq!(b[0].labels, best_path_decode(&g).labels);
        assert!(beam_align_nbest(&g, 0).is_err());
    }

    #[test]
    fn segments_examples() {
        let s = alignment_to_segments(&path(&[0, A, A, 0, B])).unwrap();
        assert_eq!(
            s.segments(),
            &[Segment { token: A, start: 1, end: 3 }, Segment { token: B, start: 4, end: 5 }]
        );
        let s = alignment_to_segments(&path(&[A, 0, A])).unwrap();
        assert_eq!(
            s.segments(),
            &[Segment { token: A, start: 1, end: 1 }, Segment { token: A, start: 2, end: 3 }]
        );
        let s = alignment_to_segments(&path(&[0, A, 0, 0])).unwrap();
        assert_eq!(s.segments(), &[Segment { token: A, start: 1, end: 2 }]);
        assert!(matches!(alignment_to_segments(&path(&[0, 0])), Err(Error::NoTokens)));
    }

    #[test]
    fn expansion_examples() {
        // token spans (t_{u-1}, t_u] = [2, 3] become [t_{u-1}, t_u + 1] = [1, 4]
        let s = TokenSegmentation::new(vec![
            Segment { token: A, start: 1, end: 1 },
            Segment { token: B, start: 2, end: 3 },
            Segment { token: A, start: 4, end: 6 },
        ])
        .unwrap();
        let e = expand_segments(&s, 1, 6);
        assert_eq!(e.segments()[1], Segment { token: B, start: 1, end: 4 });
        assert_eq!(e.segments()[0], Segment { token: A, start: 1, end: 2 });
        assert_eq!(e.segments()[2], Segment { token: A, start: 3, end: 6 });
        assert_eq!(expand_segments(&s, 0, 6), s);
        let full = TokenSegmentation::new(vec![Segment { token: A, start: 1, end: 6 }]).unwrap();
        assert_eq!(expand_segments(&full, 3, 6), full);
    }

    #[test]
    fn display_is_tab_separated() {
        let s = alignment_to_segments(&path(&[0, A, A, 0, B])).unwrap();
        assert_eq!(s.to_string(), "1\t1\t3\n2\t4\t5\n");
    }

    /// Every frame path with its log-probability, in lexicographic order.
    fn enumerate(grid: &LogPosteriorGrid) -> Vec<(Vec<usize>, f64)> {
        let (t, v) = (grid.frames(), grid.vocab());
        let mut out = Vec::new();
        for code in 0..v.pow(t as u32) {
            let mut labels = vec![0; t];
            let mut c = code;
            for i in (0..t).rev() {
                labels[i] = c % v;
                c /= v;
            }
            let mut lp = 0.0;
            for (i, &k) in labels.iter().enumerate() {
                lp += grid.at(i, k);
            }
            out.push((labels, lp));
        }
        out
    }

    fn grid_strategy(max_t: usize, max_v: usize) -> impl Strategy<Value = LogPosteriorGrid> {
        (1..=max_t, 2..=max_v).prop_flat_map(|(t, v)| {
            prop::collection::vec(-3.0f64..3.0, t * v)
                .prop_map(move |x| LogPosteriorGrid::from_logits(&Tensor::new([t, v], x).unwrap()).unwrap())
        })
    }

    fn labels_for(v: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1..v, 1..=3)
    }

    proptest! {
        #[test]
        fn loss_and_viterbi_match_enumeration(
            (grid, labels) in grid_strategy(6, 3).prop_flat_map(|g| { let v = g.vocab(); (Just(g), labels_for(v)) })
        ) {
            prop_assume!(min_frames(&labels) <= grid.frames());
            let paths: Vec<_> = enumerate(&grid).into_iter().filter(|(p, _)| collapse(p) == labels).collect();
            let total = paths.iter().map(|(_, lp)| lp.exp()).sum::<f64>();
            let best = paths.iter().map(|(_, lp)| *lp).fold(f64::NEG_INFINITY, f64::max);
            let loss = ctc_loss(&grid, &labels).unwrap();
            prop_assert!((loss + total.ln()).abs() < 1e-9, "{loss} vs {}", -total.ln());
            let forced = ctc_forced_align(&grid, &labels).unwrap();
            prop_assert!((forced.log_prob - best).abs() < 1e-9);
            prop_assert!((grid.path_log_prob(&forced.labels) - forced.log_prob).abs() < 1e-12);
            prop_assert_eq!(collapse(&forced.labels), labels.clone());
            prop_assert!(loss <= -forced.log_prob + 1e-12);
            let seg = alignment_to_segments(&forced).unwrap();
            prop_assert_eq!(seg.tokens(), labels);
            prop_assert!(seg.segments().windows(2).all(|w| w[0].end < w[1].start));
        }

        #[test]
        fn beam_matches_exhaustive_order(grid in grid_strategy(4, 3)) {
            let mut all = enumerate(&grid);
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let beam = beam_align_nbest(&grid, all.len() + 3).unwrap();
            prop_assert_eq!(beam.len(), all.len());
            for (got, (labels, lp)) in beam.iter().zip(&all) {
                prop_assert_eq!(&got.labels, labels);
                prop_assert!((got.log_prob - lp).abs() < 1e-12);
            }
            let top3 = beam_align_nbest(&grid, 3).unwrap();
            prop_assert!(top3.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            prop_assert_eq!(&top3[..], &beam[..top3.len()]);
        }

        #[test]
        fn best_path_is_framewise_argmax(grid in grid_strategy(6, 4)) {
            let p = best_path_decode(&grid);
            for t in 0..grid.frames() {
                let row = grid.row(t);
                let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                prop_assert_eq!(p.labels[t], arg);
            }
        }

        #[test]
        fn expansion_preserves_order(
            (ends, context) in (prop::collection::vec(1usize..4, 1..5), 0usize..4)
        ) {
            let mut segs = Vec::new();
            let mut prev = 0;
            for (i, step) in ends.iter().enumerate() {
                segs.push(Segment { token: i % 2 + 1, start: prev + 1, end: prev + step });
                prev += step;
            }
            let frames = prev + 2;
            let seg = TokenSegmentation::new(segs).unwrap();
            let wide = expand_segments(&seg, context, frames);
            prop_assert_eq!(wide.tokens(), seg.tokens());
            for w in wide.segments() {
                prop_assert!(1 <= w.start && w.start <= w.end && w.end <= frames);
            }
            for w in wide.segments().windows(2) {
                prop_assert!(w[0].start <= w[1].start && w[0].end <= w[1].end);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for (t, v, labels) in [(5, 3, vec![1, 2]), (6, 4, vec![3, 3, 1]), (4, 2, vec![1])] {
            let x = Tensor::new([t, v], (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let r = grad_check(
                |tape, xv| {
                    let lp = tape.log_softmax(xv)?;
                    ctc_loss_on_tape(tape, lp, &labels)
                },
                &x,
                1e-5,
                1e-4,
                50,
                1,
            )
            .unwrap();
            assert!(r.passed(), "{:?}", r.worst());
        }
    }
}

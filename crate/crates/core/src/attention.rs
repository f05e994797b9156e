//! Decoupled transformer attention.
//!
//! Joint text+image attention maps are sliced into four quadrants (text-text,
//! text-image, image-text, image-image) and the value features into a text and
//! an image half, per attention head. The quadrants can be cached on the
//! inversion branch and replaced or averaged into the editing branch, with no
//! renormalization: regions are substituted raw, so recomposed rows may stop
//! being stochastic (their sums stay in [0, 2]).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BlockKind {
    Multi,
    Single,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Multi => write!(f, "multi"),
            BlockKind::Single => write!(f, "single"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionError {
    BadSplit { n_cond: usize, total: usize },
    QuadrantShape { region: &'static str, expected: (usize, usize), got: (usize, usize) },
    HeadCountMismatch { left: usize, right: usize },
    CacheMiss { key: CacheKey },
    DuplicateCacheEntry { key: CacheKey },
    WordIndexOutOfRange { index: usize, n_cond: usize },
    EmptyRecord,
    GridMismatch { expected: usize, got: usize },
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionError::BadSplit { n_cond, total } => {
                write!(f, "text token count {n_cond} must be in 1..{total}")
            }
            AttentionError::QuadrantShape { region, expected, got } => write!(
                f,
                "region {region}: shape {}x{} does not match {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            AttentionError::HeadCountMismatch { left, right } => {
                write!(f, "head count mismatch: {left} vs {right}")
            }
            AttentionError::CacheMiss { key } => write!(
                f,
                "no cached attention for evaluation {} / {} block layer {}",
                key.fe_index, key.kind, key.layer
            ),
            AttentionError::DuplicateCacheEntry { key } => write!(
                f,
                "cache already holds evaluation {} / {} block layer {}",
                key.fe_index, key.kind, key.layer
            ),
            AttentionError::WordIndexOutOfRange { index, n_cond } => {
                write!(f, "word index {index} out of range for {n_cond} text tokens")
            }
            AttentionError::EmptyRecord => write!(f, "run record holds no evaluations"),
            AttentionError::GridMismatch { expected, got } => {
                write!(f, "image token count {got} does not match grid size {expected}")
            }
        }
    }
}

impl core::error::Error for AttentionError {}

/// One head's quadrants and value split.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAttention {
    pub m_cc: Mat,
    pub m_ci: Mat,
    pub m_ic: Mat,
    pub m_ii: Mat,
    pub v_c: Mat,
    pub v_i: Mat,
}

/// All heads of one layer's attention, decoupled at the text/image boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledAttention {
    pub n_cond: usize,
    pub n_image: usize,
    pub heads: Vec<HeadAttention>,
}

impl DecoupledAttention {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Row sums of the recomposed maps; stays within [0, 2] after any
    /// manipulation because each quadrant row sums to at most 1.
    pub fn recomposed_row_sums(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for head in &self.heads {
            for q in 0..self.n_cond {
                let s: f64 = head.m_cc.row(q).iter().sum::<f64>()
                    + head.m_ci.row(q).iter().sum::<f64>();
                out.push(s);
            }
            for q in 0..self.n_image {
                let s: f64 = head.m_ic.row(q).iter().sum::<f64>()
                    + head.m_ii.row(q).iter().sum::<f64>();
                out.push(s);
            }
        }
        out
    }
}

fn split_one(map: &Mat, values: &Mat, n_cond: usize) -> Result<HeadAttention, AttentionError> {
    let total = map.rows();
    if n_cond == 0 || n_cond >= total {
        return Err(AttentionError::BadSplit { n_cond, total });
    }
    if map.cols() != total {
        return Err(AttentionError::QuadrantShape {
            region: "joint map",
            expected: (total, total),
            got: (map.rows(), map.cols()),
        });
    }
    if values.rows() != total {
        return Err(AttentionError::QuadrantShape {
            region: "joint values",
            expected: (total, values.cols()),
            got: (values.rows(), values.cols()),
        });
    }
    Ok(HeadAttention {
        m_cc: map.block(0, n_cond, 0, n_cond),
        m_ci: map.block(0, n_cond, n_cond, total),
        m_ic: map.block(n_cond, total, 0, n_cond),
        m_ii: map.block(n_cond, total, n_cond, total),
        v_c: values.row_block(0, n_cond),
        v_i: values.row_block(n_cond, total),
    })
}

/// Slice per-head joint attention maps and values at the text/image boundary.
/// Text tokens come first, matching the stream concatenation order.
pub fn decompose_attention(
    maps: &[Mat],
    values: &[Mat],
    n_cond: usize,
) -> Result<DecoupledAttention, AttentionError> {
    if maps.len() != values.len() {
        return Err(AttentionError::HeadCountMismatch { left: maps.len(), right: values.len() });
    }
    let mut heads = Vec::with_capacity(maps.len());
    for (m, v) in maps.iter().zip(values) {
        heads.push(split_one(m, v, n_cond)?);
    }
    let n_image = maps[0].rows() - n_cond;
    Ok(DecoupledAttention { n_cond, n_image, heads })
}

fn join_one(head: &HeadAttention, n_cond: usize, n_image: usize) -> Result<(Mat, Mat), AttentionError> {
    let check = |region: &'static str, m: &Mat, rows: usize, cols: usize| {
        if m.rows() != rows || m.cols() != cols {
            Err(AttentionError::QuadrantShape {
                region,
                expected: (rows, cols),
                got: (m.rows(), m.cols()),
            })
        } else {
            Ok(())
        }
    };
    check("m_cc", &head.m_cc, n_cond, n_cond)?;
    check("m_ci", &head.m_ci, n_cond, n_image)?;
    check("m_ic", &head.m_ic, n_image, n_cond)?;
    check("m_ii", &head.m_ii, n_image, n_image)?;
    if head.v_c.rows() != n_cond || head.v_i.rows() != n_image || head.v_c.cols() != head.v_i.cols()
    {
        return Err(AttentionError::QuadrantShape {
            region: "values",
            expected: (n_cond + n_image, head.v_c.cols()),
            got: (head.v_c.rows() + head.v_i.rows(), head.v_i.cols()),
        });
    }
    let total = n_cond + n_image;
    let mut map = Mat::zeros(total, total);
    map.set_block(0, 0, &head.m_cc);
    map.set_block(0, n_cond, &head.m_ci);
    map.set_block(n_cond, 0, &head.m_ic);
    map.set_block(n_cond, n_cond, &head.m_ii);
    let values = Mat::vstack(&head.v_c, &head.v_i);
    Ok((map, values))
}

/// Exact inverse of [`decompose_attention`].
pub fn recompose_attention(d: &DecoupledAttention) -> Result<(Vec<Mat>, Vec<Mat>), AttentionError> {
    let mut maps = Vec::with_capacity(d.heads.len());
    let mut values = Vec::with_capacity(d.heads.len());
    for head in &d.heads {
        let (m, v) = join_one(head, d.n_cond, d.n_image)?;
        maps.push(m);
        values.push(v);
    }
    Ok((maps, values))
}

/// What to do with one region when merging the cached inversion branch into
/// the editing branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionOp {
    /// Keep the editing branch's region.
    None,
    /// Substitute the cached region.
    Replace,
    /// Elementwise average of cached and current.
    Mean,
}

/// Per-region operations for the four map quadrants and two value halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionOps {
    pub m_cc: RegionOp,
    pub m_ii: RegionOp,
    pub m_ci: RegionOp,
    pub m_ic: RegionOp,
    pub v_c: RegionOp,
    pub v_i: RegionOp,
}

impl RegionOps {
    pub fn none() -> Self {
        RegionOps::splat(RegionOp::None)
    }

    pub fn splat(op: RegionOp) -> Self {
        RegionOps { m_cc: op, m_ii: op, m_ci: op, m_ic: op, v_c: op, v_i: op }
    }

    /// The general-purpose editing recipe: replace both cross-attention
    /// quadrants, average the image value half.
    pub fn editing_default() -> Self {
        RegionOps {
            m_cc: RegionOp::None,
            m_ii: RegionOp::None,
            m_ci: RegionOp::Replace,
            m_ic: RegionOp::Replace,
            v_c: RegionOp::None,
            v_i: RegionOp::Mean,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == RegionOps::none()
    }
}

/// Which blocks a plan touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockScope {
    pub multi: bool,
    pub single: bool,
    /// Restrict to specific layer indices within each selected kind; `None`
    /// means every layer.
    pub layers: Option<Vec<usize>>,
}

impl BlockScope {
    pub fn all() -> Self {
        BlockScope { multi: true, single: true, layers: None }
    }

    pub fn single_only() -> Self {
        BlockScope { multi: false, single: true, layers: None }
    }

    pub fn contains(&self, kind: BlockKind, layer: usize) -> bool {
        let kind_ok = match kind {
            BlockKind::Multi => self.multi,
            BlockKind::Single => self.single,
        };
        let layer_ok = match &self.layers {
            Some(list) => list.contains(&layer),
            None => true,
        };
        kind_ok && layer_ok
    }
}

/// A full manipulation plan: region operations, block scope, and the
/// function-evaluation indices at which attention is saved/merged.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationPlan {
    pub ops: RegionOps,
    pub scope: BlockScope,
    /// 1-based function-evaluation indices (inversion counts them down from
    /// N*r, editing counts up from 1, so index k pairs the k-th-from-last
    /// inversion evaluation with the k-th editing evaluation).
    pub d_list: Vec<u64>,
}

impl ManipulationPlan {
    /// Pure reconstruction: nothing saved, nothing touched.
    pub fn reconstruction() -> Self {
        ManipulationPlan { ops: RegionOps::none(), scope: BlockScope::all(), d_list: Vec::new() }
    }

    /// Single-stream blocks, first evaluation, replace cross maps + mean V_I.
    pub fn editing_default() -> Self {
        ManipulationPlan {
            ops: RegionOps::editing_default(),
            scope: BlockScope::single_only(),
            d_list: alloc::vec![1],
        }
    }

    /// True when applying the plan can never change an evaluation.
    pub fn is_empty(&self) -> bool {
        self.d_list.is_empty()
            || self.ops.is_none()
            || (!self.scope.multi && !self.scope.single)
    }

    pub fn applies_at(&self, fe_index: u64) -> bool {
        self.d_list.contains(&fe_index)
    }
}

fn merge_region(current: &Mat, cached: &Mat, op: RegionOp, region: &'static str) -> Result<Mat, AttentionError> {
    if (current.rows(), current.cols()) != (cached.rows(), cached.cols()) {
        return Err(AttentionError::QuadrantShape {
            region,
            expected: (current.rows(), current.cols()),
            got: (cached.rows(), cached.cols()),
        });
    }
    Ok(match op {
        RegionOp::None => current.clone(),
        RegionOp::Replace => cached.clone(),
        RegionOp::Mean => {
            let mut out = current.clone();
            for (o, c) in out.data_mut().iter_mut().zip(cached.data()) {
                *o = (*o + *c) / 2.0;
            }
            out
        }
    })
}

/// Merge the cached inversion-branch attention into the editing branch,
/// region by region and head by head.
pub fn manipulate(
    current: &DecoupledAttention,
    cached: &DecoupledAttention,
    ops: &RegionOps,
) -> Result<DecoupledAttention, AttentionError> {
    if current.n_heads() != cached.n_heads() {
        return Err(AttentionError::HeadCountMismatch {
            left: current.n_heads(),
            right: cached.n_heads(),
        });
    }
    let mut heads = Vec::with_capacity(current.n_heads());
    for (cur, old) in current.heads.iter().zip(&cached.heads) {
        heads.push(HeadAttention {
            m_cc: merge_region(&cur.m_cc, &old.m_cc, ops.m_cc, "m_cc")?,
            m_ci: merge_region(&cur.m_ci, &old.m_ci, ops.m_ci, "m_ci")?,
            m_ic: merge_region(&cur.m_ic, &old.m_ic, ops.m_ic, "m_ic")?,
            m_ii: merge_region(&cur.m_ii, &old.m_ii, ops.m_ii, "m_ii")?,
            v_c: merge_region(&cur.v_c, &old.v_c, ops.v_c, "v_c")?,
            v_i: merge_region(&cur.v_i, &old.v_i, ops.v_i, "v_i")?,
        });
    }
    Ok(DecoupledAttention { n_cond: current.n_cond, n_image: current.n_image, heads })
}

/// (function-evaluation index, block kind, layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CacheKey {
    pub fe_index: u64,
    pub kind: BlockKind,
    pub layer: usize,
}

/// Inversion-branch attention snapshots. One immutable entry per key.
#[derive(Debug, Default)]
pub struct AttentionCache {
    entries: BTreeMap<CacheKey, DecoupledAttention>,
}

impl AttentionCache {
    pub fn new() -> Self {
        AttentionCache { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: CacheKey, att: DecoupledAttention) -> Result<(), AttentionError> {
        if self.entries.contains_key(&key) {
            return Err(AttentionError::DuplicateCacheEntry { key });
        }
        self.entries.insert(key, att);
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<&DecoupledAttention> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }
}

/// Error surfaced by a hook while an evaluation is in flight.
#[derive(Clone, Debug, PartialEq)]
pub struct HookError {
    pub message: String,
}

impl From<AttentionError> for HookError {
    fn from(e: AttentionError) -> Self {
        HookError { message: alloc::format!("{e}") }
    }
}

impl fmt::Display for HookError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "attention hook failed: {}", self.message)
    }
}

impl core::error::Error for HookError {}

/// The seam through which a caller observes or rewrites a layer's attention.
/// Returned quadrant shapes must equal the input shapes.
pub trait AttentionHook {
    fn on_attention(
        &mut self,
        kind: BlockKind,
        layer: usize,
        att: DecoupledAttention,
    ) -> Result<DecoupledAttention, HookError>;
}

/// Pass-through hook; changes nothing.
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn on_attention(
        &mut self,
        _kind: BlockKind,
        _layer: usize,
        att: DecoupledAttention,
    ) -> Result<DecoupledAttention, HookError> {
        Ok(att)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookMode {
    /// Store in-scope snapshots, pass attention through unmodified.
    Save,
    /// Merge the matching snapshot into in-scope attention.
    Manipulate,
}

/// Hook wired to one function evaluation of one branch.
pub struct CacheHook<'a> {
    cache: &'a mut AttentionCache,
    fe_index: u64,
    mode: HookMode,
    plan: &'a ManipulationPlan,
}

/// Build the hook used at evaluation `fe_index` in `mode`.
pub fn cache_hook<'a>(
    cache: &'a mut AttentionCache,
    fe_index: u64,
    mode: HookMode,
    plan: &'a ManipulationPlan,
) -> CacheHook<'a> {
    CacheHook { cache, fe_index, mode, plan }
}

impl AttentionHook for CacheHook<'_> {
    fn on_attention(
        &mut self,
        kind: BlockKind,
        layer: usize,
        att: DecoupledAttention,
    ) -> Result<DecoupledAttention, HookError> {
        if !self.plan.scope.contains(kind, layer) {
            return Ok(att);
        }
        let key = CacheKey { fe_index: self.fe_index, kind, layer };
        match self.mode {
            HookMode::Save => {
                self.cache.insert(key, att.clone())?;
                Ok(att)
            }
            HookMode::Manipulate => {
                let cached = self.cache.get(&key).ok_or(AttentionError::CacheMiss { key })?;
                Ok(manipulate(&att, cached, &self.plan.ops)?)
            }
        }
    }
}

/// Head-averaged cross-attention quadrants of one block in one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub kind: BlockKind,
    pub layer: usize,
    /// n_image x n_cond.
    pub m_ic: Mat,
    /// n_cond x n_image.
    pub m_ci: Mat,
}

/// Per-evaluation block records for response-map aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub blocks: Vec<BlockRecord>,
}

/// A whole sampling run's worth of recorded cross-attention.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub evals: Vec<EvalRecord>,
}

impl RunRecord {
    pub fn new() -> Self {
        RunRecord::default()
    }

    pub fn begin_eval(&mut self) {
        self.evals.push(EvalRecord::default());
    }
}

/// Hook that records head-averaged cross quadrants into the current
/// evaluation of a [`RunRecord`]. Attention passes through unmodified.
pub struct RecordingHook<'a> {
    record: &'a mut RunRecord,
}

impl<'a> RecordingHook<'a> {
    pub fn new(record: &'a mut RunRecord) -> Self {
        RecordingHook { record }
    }
}

fn head_mean(heads: &[HeadAttention], pick: impl Fn(&HeadAttention) -> &Mat) -> Mat {
    let first = pick(&heads[0]);
    let mut acc = Mat::zeros(first.rows(), first.cols());
    for h in heads {
        acc.add_assign(pick(h));
    }
    acc.scale_assign(1.0 / heads.len() as f64);
    acc
}

impl AttentionHook for RecordingHook<'_> {
    fn on_attention(
        &mut self,
        kind: BlockKind,
        layer: usize,
        att: DecoupledAttention,
    ) -> Result<DecoupledAttention, HookError> {
        let eval = self
            .record
            .evals
            .last_mut()
            .ok_or_else(|| HookError { message: "recording hook used before begin_eval".into() })?;
        eval.blocks.push(BlockRecord {
            kind,
            layer,
            m_ic: head_mean(&att.heads, |h| &h.m_ic),
            m_ci: head_mean(&att.heads, |h| &h.m_ci),
        });
        Ok(att)
    }
}

/// Word-pixel response map for one text token.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub word_index: usize,
    /// grid_h x grid_w aggregate.
    pub grid: Mat,
    /// Bilinearly upsampled to the requested output resolution.
    pub resized: Mat,
}

/// Corner-aligned bilinear resize.
pub fn bilinear_resize(src: &Mat, out_h: usize, out_w: usize) -> Mat {
    assert!(src.rows() > 0 && src.cols() > 0 && out_h > 0 && out_w > 0);
    let map = |i: usize, out_n: usize, src_n: usize| -> f64 {
        if out_n <= 1 || src_n <= 1 {
            0.0
        } else {
            i as f64 * (src_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    Mat::from_fn(out_h, out_w, |i, j| {
        let y = map(i, out_h, src.rows());
        let x = map(j, out_w, src.cols());
        let y0 = libm::floor(y) as usize;
        let x0 = libm::floor(x) as usize;
        let y1 = (y0 + 1).min(src.rows() - 1);
        let x1 = (x0 + 1).min(src.cols() - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        src.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + src.get(y0, x1) * (1.0 - fy) * fx
            + src.get(y1, x0) * fy * (1.0 - fx)
            + src.get(y1, x1) * fy * fx
    })
}

/// Aggregate recorded cross-attention into per-word response maps:
/// average M_IC + M_CI^T over blocks within each evaluation, average over
/// evaluations, take column `g`, reshape to the token grid, upsample.
pub fn aggregate_response_maps(
    record: &RunRecord,
    word_indices: &[usize],
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<ResponseMap>, AttentionError> {
    if record.evals.is_empty() || record.evals.iter().any(|e| e.blocks.is_empty()) {
        return Err(AttentionError::EmptyRecord);
    }
    let first = &record.evals[0].blocks[0];
    let n_image = first.m_ic.rows();
    let n_cond = first.m_ic.cols();
    if n_image != grid_h * grid_w {
        return Err(AttentionError::GridMismatch { expected: grid_h * grid_w, got: n_image });
    }
    for &g in word_indices {
        if g >= n_cond {
            return Err(AttentionError::WordIndexOutOfRange { index: g, n_cond });
        }
    }

    let mut total = Mat::zeros(n_image, n_cond);
    for eval in &record.evals {
        let mut per_eval = Mat::zeros(n_image, n_cond);
        for block in &eval.blocks {
            per_eval.add_assign(&block.m_ic);
            per_eval.add_assign(&block.m_ci.transpose());
        }
        per_eval.scale_assign(1.0 / eval.blocks.len() as f64);
        total.add_assign(&per_eval);
    }
    total.scale_assign(1.0 / record.evals.len() as f64);

    let mut out = Vec::with_capacity(word_indices.len());
    for &g in word_indices {
        let grid = Mat::from_fn(grid_h, grid_w, |y, x| total.get(y * grid_w + x, g));
        let resized = bilinear_resize(&grid, out_h, out_w);
        out.push(ResponseMap { word_index: g, grid, resized });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::vec;

    fn random_stochastic(rng: &mut SeededRng, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::from_fn(rows, cols, |_, _| rng.next_normal());
        m.softmax_rows();
        m
    }

    fn random_snapshot(rng: &mut SeededRng, n_cond: usize, n_image: usize, heads: usize, d_head: usize) -> (Vec<Mat>, Vec<Mat>) {
        let total = n_cond + n_image;
        let maps: Vec<Mat> = (0..heads).map(|_| random_stochastic(rng, total, total)).collect();
        let vals: Vec<Mat> =
            (0..heads).map(|_| Mat::from_fn(total, d_head, |_, _| rng.next_normal())).collect();
        (maps, vals)
    }

    #[test]
    fn two_by_two_quadrants() {
        let m = Mat::from_vec(2, 2, vec![0.7, 0.3, 0.4, 0.6]);
        let v = Mat::from_vec(2, 1, vec![1.0, 2.0]);
        let d = decompose_attention(&[m], &[v], 1).unwrap();
        let h = &d.heads[0];
        assert_eq!(h.m_cc.data(), &[0.7]);
        assert_eq!(h.m_ci.data(), &[0.3]);
        assert_eq!(h.m_ic.data(), &[0.4]);
        assert_eq!(h.m_ii.data(), &[0.6]);
        assert_eq!(h.v_c.data(), &[1.0]);
        assert_eq!(h.v_i.data(), &[2.0]);
    }

    #[test]
    fn identity_map_gives_identity_blocks() {
        let n = 5;
        let n_cond = 2;
        let m = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
        let v = Mat::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        let d = decompose_attention(&[m], &[v], n_cond).unwrap();
        let h = &d.heads[0];
        assert!(h.m_ci.data().iter().all(|&x| x == 0.0));
        assert!(h.m_ic.data().iter().all(|&x| x == 0.0));
        for i in 0..n_cond {
            assert_eq!(h.m_cc.get(i, i), 1.0);
        }
        for i in 0..n - n_cond {
            assert_eq!(h.m_ii.get(i, i), 1.0);
        }
    }

    #[test]
    fn decompose_recompose_is_bitwise_identity() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let (maps, vals) = random_snapshot(&mut rng, 3, 9, 2, 4);
            let d = decompose_attention(&maps, &vals, 3).unwrap();
            let (maps2, vals2) = recompose_attention(&d).unwrap();
            assert_eq!(maps, maps2);
            assert_eq!(vals, vals2);
        }
    }

    #[test]
    fn split_bounds_rejected() {
        let m = Mat::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let v = Mat::from_vec(2, 1, vec![0.0, 0.0]);
        assert!(matches!(
            decompose_attention(&[m.clone()], &[v.clone()], 0),
            Err(AttentionError::BadSplit { .. })
        ));
        assert!(matches!(
            decompose_attention(&[m], &[v], 2),
            Err(AttentionError::BadSplit { .. })
        ));
    }

    #[test]
    fn manipulate_semantics() {
        let mut rng = SeededRng::new(5);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 2, 3);
        let cur = decompose_attention(&maps, &vals, 2).unwrap();
        let (maps2, vals2) = random_snapshot(&mut rng, 2, 4, 2, 3);
        let old = decompose_attention(&maps2, &vals2, 2).unwrap();

        // all-none is the identity on the current branch
        let out = manipulate(&cur, &old, &RegionOps::none()).unwrap();
        assert_eq!(out, cur);

        // all-replace returns the cached branch
        let out = manipulate(&cur, &old, &RegionOps::splat(RegionOp::Replace)).unwrap();
        assert_eq!(out, old);

        // mean is the elementwise average and is symmetric
        let ab = manipulate(&cur, &old, &RegionOps::splat(RegionOp::Mean)).unwrap();
        let ba = manipulate(&old, &cur, &RegionOps::splat(RegionOp::Mean)).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(
            ab.heads[0].m_cc.get(0, 0),
            (cur.heads[0].m_cc.get(0, 0) + old.heads[0].m_cc.get(0, 0)) / 2.0
        );
    }

    #[test]
    fn mean_on_scalar_region() {
        let mk = |x: f64| {
            decompose_attention(
                &[Mat::from_vec(2, 2, vec![x, 1.0 - x, 0.5, 0.5])],
                &[Mat::from_vec(2, 1, vec![0.0, 0.0])],
                1,
            )
            .unwrap()
        };
        let cur = mk(0.4);
        let old = mk(0.2);
        let mut ops = RegionOps::none();
        ops.m_cc = RegionOp::Mean;
        let out = manipulate(&cur, &old, &ops).unwrap();
        // exactly (0.4 + 0.2) / 2, which sits one ulp from the 0.3 literal
        assert_eq!(out.heads[0].m_cc.get(0, 0), (0.4 + 0.2) / 2.0);
        assert!((out.heads[0].m_cc.get(0, 0) - 0.3).abs() <= f64::EPSILON);
        // untouched regions stay current
        assert_eq!(out.heads[0].m_ci, cur.heads[0].m_ci);
    }

    #[test]
    fn manipulation_shape_mismatch_names_region() {
        let mut rng = SeededRng::new(9);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 1, 3);
        let cur = decompose_attention(&maps, &vals, 2).unwrap();
        let (maps2, vals2) = random_snapshot(&mut rng, 3, 3, 1, 3);
        let old = decompose_attention(&maps2, &vals2, 3).unwrap();
        let err = manipulate(&cur, &old, &RegionOps::splat(RegionOp::Replace)).unwrap_err();
        assert!(matches!(err, AttentionError::QuadrantShape { region: "m_cc", .. }));
    }

    #[test]
    fn post_manipulation_row_sums_stay_in_unit_to_two_band() {
        let mut rng = SeededRng::new(21);
        let (maps, vals) = random_snapshot(&mut rng, 3, 6, 2, 4);
        let cur = decompose_attention(&maps, &vals, 3).unwrap();
        let (maps2, vals2) = random_snapshot(&mut rng, 3, 6, 2, 4);
        let old = decompose_attention(&maps2, &vals2, 3).unwrap();
        let mut ops = RegionOps::none();
        ops.m_ci = RegionOp::Replace; // break row stochasticity on purpose
        let out = manipulate(&cur, &old, &ops).unwrap();
        for s in out.recomposed_row_sums() {
            assert!((0.0..=2.0).contains(&s), "row sum {s}");
        }
    }

    #[test]
    fn cache_save_then_manipulate_roundtrip() {
        let mut rng = SeededRng::new(3);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 2, 4);
        let att = decompose_attention(&maps, &vals, 2).unwrap();

        let plan = ManipulationPlan {
            ops: RegionOps::splat(RegionOp::Replace),
            scope: BlockScope::all(),
            d_list: vec![1],
        };
        let mut cache = AttentionCache::new();
        {
            let mut h = cache_hook(&mut cache, 1, HookMode::Save, &plan);
            let out = h.on_attention(BlockKind::Single, 0, att.clone()).unwrap();
            assert_eq!(out, att);
        }
        assert_eq!(cache.len(), 1);

        // all-replace with cached == current is the identity
        let mut h = cache_hook(&mut cache, 1, HookMode::Manipulate, &plan);
        let out = h.on_attention(BlockKind::Single, 0, att.clone()).unwrap();
        assert_eq!(out, att);
    }

    #[test]
    fn manipulate_before_save_is_cache_miss() {
        let mut rng = SeededRng::new(4);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 1, 4);
        let att = decompose_attention(&maps, &vals, 2).unwrap();
        let plan = ManipulationPlan {
            ops: RegionOps::splat(RegionOp::Replace),
            scope: BlockScope::all(),
            d_list: vec![1],
        };
        let mut cache = AttentionCache::new();
        let mut h = cache_hook(&mut cache, 1, HookMode::Manipulate, &plan);
        let err = h.on_attention(BlockKind::Multi, 0, att).unwrap_err();
        assert!(err.message.contains("no cached attention"));
        assert!(err.message.contains("multi"));
    }

    #[test]
    fn out_of_scope_blocks_pass_through_unsaved() {
        let mut rng = SeededRng::new(6);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 1, 4);
        let att = decompose_attention(&maps, &vals, 2).unwrap();
        let plan = ManipulationPlan {
            ops: RegionOps::splat(RegionOp::Replace),
            scope: BlockScope::single_only(),
            d_list: vec![1],
        };
        let mut cache = AttentionCache::new();
        let mut h = cache_hook(&mut cache, 1, HookMode::Save, &plan);
        let out = h.on_attention(BlockKind::Multi, 0, att.clone()).unwrap();
        assert_eq!(out, att);
        assert!(cache.is_empty());
    }

    #[test]
    fn duplicate_cache_entry_rejected() {
        let mut rng = SeededRng::new(8);
        let (maps, vals) = random_snapshot(&mut rng, 2, 4, 1, 4);
        let att = decompose_attention(&maps, &vals, 2).unwrap();
        let key = CacheKey { fe_index: 1, kind: BlockKind::Single, layer: 0 };
        let mut cache = AttentionCache::new();
        cache.insert(key, att.clone()).unwrap();
        assert!(matches!(
            cache.insert(key, att),
            Err(AttentionError::DuplicateCacheEntry { .. })
        ));
    }

    #[test]
    fn degenerate_single_eval_single_block_aggregation() {
        let mut rng = SeededRng::new(12);
        let gh = 2;
        let gw = 3;
        let n_image = gh * gw;
        let n_cond = 2;
        let m_ic = random_stochastic(&mut rng, n_image, n_cond);
        let m_ci = random_stochastic(&mut rng, n_cond, n_image);
        let mut record = RunRecord::new();
        record.begin_eval();
        record.evals[0].blocks.push(BlockRecord {
            kind: BlockKind::Multi,
            layer: 0,
            m_ic: m_ic.clone(),
            m_ci: m_ci.clone(),
        });
        let maps = aggregate_response_maps(&record, &[0, 1], gh, gw, gh, gw).unwrap();
        let expected = {
            let mut e = m_ic.clone();
            e.add_assign(&m_ci.transpose());
            e
        };
        for rm in &maps {
            for y in 0..gh {
                for x in 0..gw {
                    assert_eq!(rm.grid.get(y, x), expected.get(y * gw + x, rm.word_index));
                }
            }
        }
    }

    #[test]
    fn uniform_attention_gives_constant_maps() {
        let gh = 2;
        let gw = 2;
        let n_image = 4;
        let n_cond = 2;
        let m_ic = Mat::from_fn(n_image, n_cond, |_, _| 1.0 / (n_cond + n_image) as f64);
        let m_ci = Mat::from_fn(n_cond, n_image, |_, _| 1.0 / (n_cond + n_image) as f64);
        let mut record = RunRecord::new();
        for _ in 0..3 {
            record.begin_eval();
            for layer in 0..2 {
                record.evals.last_mut().unwrap().blocks.push(BlockRecord {
                    kind: BlockKind::Single,
                    layer,
                    m_ic: m_ic.clone(),
                    m_ci: m_ci.clone(),
                });
            }
        }
        let maps = aggregate_response_maps(&record, &[1], gh, gw, 8, 8).unwrap();
        let first = maps[0].resized.get(0, 0);
        assert!(maps[0].resized.data().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn response_map_entries_bounded_by_two() {
        let mut rng = SeededRng::new(13);
        let gh = 3;
        let gw = 3;
        let mut record = RunRecord::new();
        for _ in 0..4 {
            record.begin_eval();
            for layer in 0..3 {
                record.evals.last_mut().unwrap().blocks.push(BlockRecord {
                    kind: BlockKind::Single,
                    layer,
                    m_ic: random_stochastic(&mut rng, 9, 4),
                    m_ci: random_stochastic(&mut rng, 4, 9),
                });
            }
        }
        let maps = aggregate_response_maps(&record, &[0, 3], gh, gw, 16, 16).unwrap();
        for rm in &maps {
            for &v in rm.grid.data().iter().chain(rm.resized.data()) {
                assert!((0.0..=2.0).contains(&v), "entry {v}");
            }
        }
    }

    #[test]
    fn word_index_out_of_range_rejected() {
        let mut record = RunRecord::new();
        record.begin_eval();
        record.evals[0].blocks.push(BlockRecord {
            kind: BlockKind::Single,
            layer: 0,
            m_ic: Mat::zeros(4, 2),
            m_ci: Mat::zeros(2, 4),
        });
        assert!(matches!(
            aggregate_response_maps(&record, &[2], 2, 2, 4, 4),
            Err(AttentionError::WordIndexOutOfRange { index: 2, n_cond: 2 })
        ));
    }

    #[test]
    fn bilinear_resize_corner_alignment() {
        let src = Mat::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let out = bilinear_resize(&src, 3, 3);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 2), 1.0);
        assert_eq!(out.get(2, 0), 2.0);
        assert_eq!(out.get(2, 2), 3.0);
        assert_eq!(out.get(1, 1), 1.5);
    }
}

//! Dense and gaze attention over a [`LayerHeadCache`], the unit-masked
//! context-token prefill, and the analytic backward pass.
//!
//! A gaze key set lists cache positions in a fixed order: every text
//! position, then every context position (unit by unit), then the visual
//! positions of the selected regions in ascending region id.

use crate::error::{check_len, GazeError, Result};
use crate::kv_store::{LayerHeadCache, RegionTable, Segment};
use crate::numerics::{axpy, dot_unchecked, softmax_stable, vec_mat, Matrix, Precision};
use crate::routing::{route, Selection};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GazeKeySet {
    pub indices: Vec<usize>,
}

impl GazeKeySet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    /// Softmax weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// Attended cache positions.
    pub indices: Vec<usize>,
}

impl AttentionOutput {
    /// Weight placed on each cache position; zero where not attended.
    pub fn weights_over(&self, cache_len: usize) -> Vec<f64> {
        let mut full = vec![0.0; cache_len];
        for (&pos, &w) in self.indices.iter().zip(&self.weights) {
            full[pos] = w;
        }
        full
    }
}

/// `softmax(q·Kᵀ/√d)·V` over explicit rows. Returns `(output, weights)`.
pub fn softmax_attention(query: &[f64], keys: &[&[f64]], values: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() {
        return Err(GazeError::Contract("attention over an empty key set".into()));
    }
    check_len("softmax_attention values", keys.len(), values.len())?;
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = Vec::with_capacity(keys.len());
    for k in keys {
        check_len("softmax_attention key width", d, k.len())?;
        scores.push(dot_unchecked(query, k) * scale);
    }
    let weights = softmax_stable(&scores)?;
    let dv = values[0].len();
    let mut out = vec![0.0; dv];
    for (w, v) in weights.iter().zip(values) {
        check_len("softmax_attention value width", dv, v.len())?;
        axpy(*w, v, &mut out);
    }
    Ok((out, weights))
}

/// Gradients of [`softmax_attention`] given its forward weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradients {
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

pub fn softmax_attention_backward(
    query: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    weights: &[f64],
    upstream: &[f64],
) -> Result<RowGradients> {
    check_len("attention backward keys", weights.len(), keys.len())?;
    check_len("attention backward values", weights.len(), values.len())?;
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();

    // dL/dp_i = g·v_i ; dL/ds_i = p_i (dL/dp_i - Σ_j p_j dL/dp_j)
    let dp: Vec<f64> = values.iter().map(|v| dot_unchecked(upstream, v)).collect();
    let mean: f64 = weights.iter().zip(&dp).map(|(p, g)| p * g).sum();

    let mut dq = vec![0.0; d];
    let mut dk = Vec::with_capacity(keys.len());
    let mut dv = Vec::with_capacity(keys.len());
    for i in 0..keys.len() {
        let ds = weights[i] * (dp[i] - mean) * scale;
        axpy(ds, keys[i], &mut dq);
        dk.push(query.iter().map(|q| ds * q).collect());
        dv.push(upstream.iter().map(|g| weights[i] * g).collect());
    }
    Ok(RowGradients {
        query: dq,
        keys: dk,
        values: dv,
    })
}

type Rows<'a> = Vec<&'a [f64]>;

fn gather<'a>(cache: &'a LayerHeadCache, indices: &[usize]) -> Result<(Rows<'a>, Rows<'a>)> {
    let mut keys = Vec::with_capacity(indices.len());
    let mut values = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= cache.len() {
            return Err(GazeError::Index {
                context: "attended position",
                index: i,
                len: cache.len(),
            });
        }
        keys.push(cache.key(i));
        values.push(cache.value(i));
    }
    Ok((keys, values))
}

/// Attention of `query` over the listed cache positions.
pub fn dense_attention(query: &[f64], cache: &LayerHeadCache, attended: &[usize]) -> Result<AttentionOutput> {
    if attended.is_empty() {
        return Err(GazeError::Contract("dense_attention needs at least one position".into()));
    }
    check_len("dense_attention query", cache.dim(), query.len())?;
    let (keys, values) = gather(cache, attended)?;
    let (output, weights) = softmax_attention(query, &keys, &values)?;
    Ok(AttentionOutput {
        output,
        weights,
        indices: attended.to_vec(),
    })
}

/// Attention over every cache position, in cache order.
pub fn full_attention(query: &[f64], cache: &LayerHeadCache) -> Result<AttentionOutput> {
    let all: Vec<usize> = (0..cache.len()).collect();
    dense_attention(query, cache, &all)
}

pub fn assemble_gaze_set(cache: &LayerHeadCache, selection: &Selection, table: &RegionTable) -> Result<GazeKeySet> {
    let mut indices: Vec<usize> = cache.positions(Segment::Text).collect();
    indices.extend(cache.positions(Segment::Context));
    for id in selection.sorted_ids() {
        let region = table.region(id)?;
        for &pos in &region.token_indices {
            if pos >= cache.len() || cache.segment(pos) != Segment::Visual {
                return Err(GazeError::Layout(format!(
                    "region {id} position {pos} is not a visual cache row"
                )));
            }
        }
        indices.extend_from_slice(&region.token_indices);
    }
    Ok(GazeKeySet { indices })
}

/// Attention restricted to text, all context rows, and the selected regions.
pub fn gaze_attention(
    query: &[f64],
    cache: &LayerHeadCache,
    selection: &Selection,
    table: &RegionTable,
) -> Result<AttentionOutput> {
    let set = assemble_gaze_set(cache, selection, table)?;
    dense_attention(query, cache, &set.indices)
}

/// Route `query` afresh and attend over the resulting gaze set.
pub fn route_and_attend(
    query: &[f64],
    cache: &LayerHeadCache,
    table: &RegionTable,
    k: usize,
) -> Result<(Selection, AttentionOutput)> {
    let selection = route(query, table, k)?;
    let out = gaze_attention(query, cache, &selection, table)?;
    Ok((selection, out))
}

/// Gradients with respect to the query and every cache row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub query: Vec<f64>,
    /// `N × d`; zero outside the attended set.
    pub keys: Matrix,
    /// `N × d`; zero outside the attended set.
    pub values: Matrix,
}

/// Backward pass of [`gaze_attention`] with the selection held fixed.
///
/// `forward` must come from the same query, cache and selection; its index
/// list is checked against the reassembled gaze set.
pub fn gaze_attention_backward(
    query: &[f64],
    cache: &LayerHeadCache,
    selection: &Selection,
    table: &RegionTable,
    forward: &AttentionOutput,
    upstream: &[f64],
) -> Result<AttentionGrad> {
    check_len("gaze backward upstream", cache.dim(), upstream.len())?;
    let set = assemble_gaze_set(cache, selection, table)?;
    if set.indices != forward.indices {
        return Err(GazeError::Contract(
            "selection differs from the one used in the forward pass".into(),
        ));
    }
    attention_backward(query, cache, forward, upstream)
}

/// Backward pass of [`dense_attention`] over `forward.indices`.
pub fn attention_backward(
    query: &[f64],
    cache: &LayerHeadCache,
    forward: &AttentionOutput,
    upstream: &[f64],
) -> Result<AttentionGrad> {
    let (keys, values) = gather(cache, &forward.indices)?;
    let rows = softmax_attention_backward(query, &keys, &values, &forward.weights, upstream)?;
    let d = cache.dim();
    let mut dk = Matrix::zeros(cache.len(), d);
    let mut dv = Matrix::zeros(cache.len(), d);
    for (slot, &pos) in forward.indices.iter().enumerate() {
        axpy(1.0, &rows.keys[slot], dk.row_mut(pos));
        axpy(1.0, &rows.values[slot], dv.row_mut(pos));
    }
    Ok(AttentionGrad {
        query: rows.query,
        keys: dk,
        values: dv,
    })
}

/// Query/key/value projections from input features (`d_in × d` each).
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl Projections {
    pub fn input_dim(&self) -> usize {
        self.key.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.key.cols()
    }
}

/// Prefill record of one context token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextToken {
    pub unit: usize,
    /// Slot within the unit's context block.
    pub slot: usize,
    /// Cache position of the stored row.
    pub position: usize,
    pub query: Vec<f64>,
    /// Key and value projected from the embedding (the token's layer input).
    pub input_key: Vec<f64>,
    pub input_value: Vec<f64>,
    /// Cache positions visible during prefill: the unit's visual rows, the
    /// unit's earlier context tokens, then itself.
    pub attended: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ContextToken {
    pub fn weight_on(&self, position: usize) -> f64 {
        self.attended
            .iter()
            .position(|&p| p == position)
            .map_or(0.0, |i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefill {
    pub cache: LayerHeadCache,
    pub context: Vec<ContextToken>,
    /// Cache positions of each unit's visual rows.
    pub unit_visual: Vec<std::ops::Range<usize>>,
}

/// Build a cache from per-unit visual features and per-unit context
/// embeddings.
///
/// Layout: for each unit, its visual rows followed by its context rows.
/// Visual keys and values are projections of the features. Each context
/// token attends only to its own unit's visual rows, earlier context tokens
/// of the unit, and itself; its stored key is its projected key and its
/// stored value is the output of that masked attention.
pub fn prefill_with_context(
    layer: usize,
    head: usize,
    precision: Precision,
    unit_features: &[Matrix],
    context_embeddings: &[Matrix],
    proj: &Projections,
) -> Result<Prefill> {
    check_len("prefill context blocks", unit_features.len(), context_embeddings.len())?;
    let d = proj.model_dim();
    let mut cache = LayerHeadCache::with_precision(layer, head, d, precision);
    let mut context = Vec::new();
    let mut unit_visual = Vec::with_capacity(unit_features.len());

    for (u, (features, embeds)) in unit_features.iter().zip(context_embeddings).enumerate() {
        if features.rows() == 0 {
            return Err(GazeError::Layout(format!("unit {u} has no visual rows")));
        }
        check_len("prefill feature width", proj.input_dim(), features.cols())?;
        check_len("prefill context width", proj.input_dim(), embeds.cols())?;
        let keys = features.matmul(&proj.key)?;
        let values = features.matmul(&proj.value)?;
        let visual = cache.append_kv(&keys, &values, Segment::Visual, Some(u))?;

        let c = embeds.rows();
        let ctx_q = embeds.matmul(&proj.query)?;
        let ctx_k = embeds.matmul(&proj.key)?;
        let ctx_v = embeds.matmul(&proj.value)?;
        let first_ctx = visual.end;
        let mut outputs = Matrix::zeros(c, d);
        for j in 0..c {
            let mut k_rows: Vec<&[f64]> = visual.clone().map(|p| cache.key(p)).collect();
            let mut v_rows: Vec<&[f64]> = visual.clone().map(|p| cache.value(p)).collect();
            for jj in 0..=j {
                k_rows.push(ctx_k.row(jj));
                v_rows.push(ctx_v.row(jj));
            }
            let (out, weights) = softmax_attention(ctx_q.row(j), &k_rows, &v_rows)?;
            outputs.row_mut(j).copy_from_slice(&out);
            context.push(ContextToken {
                unit: u,
                slot: j,
                position: first_ctx + j,
                query: ctx_q.row(j).to_vec(),
                input_key: ctx_k.row(j).to_vec(),
                input_value: ctx_v.row(j).to_vec(),
                attended: visual.clone().chain(first_ctx..=first_ctx + j).collect(),
                weights,
            });
        }
        if c > 0 {
            cache.append_kv(&ctx_k, &outputs, Segment::Context, Some(u))?;
        }
        unit_visual.push(visual);
    }
    Ok(Prefill {
        cache,
        context,
        unit_visual,
    })
}

/// Project a feature row and append it as a text position.
pub fn append_text_token(cache: &mut LayerHeadCache, feature: &[f64], proj: &Projections) -> Result<usize> {
    let k = vec_mat(feature, &proj.key)?;
    let v = vec_mat(feature, &proj.value)?;
    cache.append_row(&k, &v, Segment::Text, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::refresh_descriptors;
    use crate::layout::{tile_regions, BlockExtents, TokenVolume};
    use crate::numerics::{central_difference, SeededStream};

    fn random_cache(s: &mut SeededStream, text: usize, volume: &TokenVolume, d: usize) -> LayerHeadCache {
        let mut c = LayerHeadCache::new(0, 0, d);
        let n = volume.visual_tokens();
        let vk = Matrix::random_normal(n, d, 1.0, s);
        let vv = Matrix::random_normal(n, d, 1.0, s);
        c.append_kv(&vk, &vv, Segment::Visual, Some(0)).unwrap();
        if text > 0 {
            let tk = Matrix::random_normal(text, d, 1.0, s);
            let tv = Matrix::random_normal(text, d, 1.0, s);
            c.append_kv(&tk, &tv, Segment::Text, None).unwrap();
        }
        c
    }

    /// Straightforward reference written without the shared kernels.
    fn reference_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
        let d = q.len() as f64;
        let s: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).fold(0.0f64, |a, (x, y)| x.mul_add(*y, a)) / d.sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        (0..values[0].len())
            .map(|j| e.iter().zip(values).map(|(w, v)| w * v[j]).sum::<f64>() / z)
            .collect()
    }

    #[test]
    fn single_pair_returns_value() {
        let mut c = LayerHeadCache::new(0, 0, 3);
        c.append_row(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Segment::Text, None).unwrap();
        let out = dense_attention(&[0.3, -1.0, 2.0], &c, &[0]).unwrap();
        assert_eq!(out.output, vec![4.0, 5.0, 6.0]);
        assert_eq!(out.weights, vec![1.0]);
        assert!(dense_attention(&[0.0; 3], &c, &[]).is_err());
        assert!(dense_attention(&[0.0; 3], &c, &[1]).is_err());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut c = LayerHeadCache::new(0, 0, 2);
        c.append_row(&[1.0, 1.0], &[2.0, 0.0], Segment::Text, None).unwrap();
        c.append_row(&[1.0, 1.0], &[0.0, 4.0], Segment::Text, None).unwrap();
        let out = full_attention(&[0.7, 0.1], &c).unwrap();
        assert!((out.output[0] - 1.0).abs() < 1e-15);
        assert!((out.output[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dense_matches_reference_seeded() {
        let mut s = SeededStream::new(31);
        let d = 6;
        let mut c = LayerHeadCache::new(0, 0, d);
        let keys: Vec<Vec<f64>> = (0..8).map(|_| s.normal_vec(d, 1.0)).collect();
        let values: Vec<Vec<f64>> = (0..8).map(|_| s.normal_vec(d, 1.0)).collect();
        for (k, v) in keys.iter().zip(&values) {
            c.append_row(k, v, Segment::Text, None).unwrap();
        }
        let q = s.normal_vec(d, 1.0);
        let out = full_attention(&q, &c).unwrap();
        let expect = reference_attention(&q, &keys, &values);
        for (o, e) in out.output.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
        assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaze_set_composition() {
        let mut s = SeededStream::new(3);
        let v = TokenVolume::new(1, 4, 4).unwrap();
        let mut c = random_cache(&mut s, 2, &v, 4);
        let ctx = Matrix::random_normal(2, 4, 1.0, &mut s);
        c.append_kv(&ctx, &ctx, Segment::Context, Some(0)).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(1, 2, 2)).unwrap();
        let table = refresh_descriptors(&c, &regions).unwrap();

        let empty = assemble_gaze_set(&c, &Selection::empty(4), &table).unwrap();
        assert_eq!(empty.indices, vec![16, 17, 18, 19]);

        let all = assemble_gaze_set(&c, &Selection::all(4), &table).unwrap();
        let mut sorted = all.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..c.len()).collect::<Vec<_>>());

        let sel = Selection { region_ids: vec![3, 1], scores: vec![0.0; 4] };
        let set = assemble_gaze_set(&c, &sel, &table).unwrap();
        assert_eq!(set.indices, vec![16, 17, 18, 19, 2, 3, 6, 7, 10, 11, 14, 15]);

        let bad = Selection { region_ids: vec![4], scores: vec![0.0; 5] };
        assert!(matches!(assemble_gaze_set(&c, &bad, &table), Err(GazeError::Index { .. })));
    }

    #[test]
    fn worked_example_gaze_set_size() {
        // 8 units × 24×24, 6×6 regions, K = 20, |C| = 4
        let d = 2;
        let units = 8;
        let ctx = 4;
        let v = TokenVolume::new(units, 24, 24).unwrap().with_frame_gap(ctx);
        let mut c = LayerHeadCache::new(0, 0, d);
        let zeros = Matrix::zeros(576, d);
        let czeros = Matrix::zeros(ctx, d);
        for u in 0..units {
            c.append_kv(&zeros, &zeros, Segment::Visual, Some(u)).unwrap();
            c.append_kv(&czeros, &czeros, Segment::Context, Some(u)).unwrap();
        }
        let regions = tile_regions(&v, BlockExtents::new(1, 6, 6)).unwrap();
        assert_eq!(regions.len(), 128);
        let table = refresh_descriptors(&c, &regions).unwrap();
        let sel = crate::routing::top_k(&vec![0.0; 128], 20).unwrap();
        let set = assemble_gaze_set(&c, &sel, &table).unwrap();
        assert_eq!(set.len(), 752);
    }

    #[test]
    fn full_selection_equals_dense() {
        let mut s = SeededStream::new(77);
        for text in [0, 5] {
            let v = TokenVolume::new(1, 6, 6).unwrap();
            let c = random_cache(&mut s, text, &v, 8);
            let regions = tile_regions(&v, BlockExtents::new(1, 3, 3)).unwrap();
            let table = refresh_descriptors(&c, &regions).unwrap();
            let q = s.normal_vec(8, 1.0);
            let (sel, gaze) = route_and_attend(&q, &c, &table, 4).unwrap();
            assert_eq!(sel.len(), 4);
            let dense = full_attention(&q, &c).unwrap();
            for j in 0..8 {
                assert!((gaze.output[j] - dense.output[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_only_cache_gaze_equals_dense() {
        let mut c = LayerHeadCache::new(0, 0, 3);
        let mut s = SeededStream::new(1);
        for _ in 0..4 {
            c.append_row(&s.normal_vec(3, 1.0), &s.normal_vec(3, 1.0), Segment::Text, None).unwrap();
        }
        let table = refresh_descriptors(&c, &[]).unwrap();
        let q = s.normal_vec(3, 1.0);
        let g = gaze_attention(&q, &c, &Selection::empty(0), &table).unwrap();
        assert_eq!(g.output, full_attention(&q, &c).unwrap().output);
    }

    #[test]
    fn needle_region_dominates() {
        // region 0 keys aligned with the query (q·k = 20·√d), others orthogonal;
        // values are one-hot by region
        let d = 16;
        let v = TokenVolume::new(1, 4, 4).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(1, 2, 2)).unwrap();
        let mut q = vec![0.0; d];
        q[0] = 1.0;
        let mut c = LayerHeadCache::new(0, 0, d);
        for pos in 0..16 {
            let g = regions.iter().position(|r| r.token_indices.contains(&pos)).unwrap();
            let mut k = vec![0.0; d];
            if g == 0 {
                k[0] = 20.0 * (d as f64).sqrt();
            } else {
                k[1 + g] = 1.0;
            }
            let mut val = vec![0.0; d];
            val[g] = 1.0;
            c.append_row(&k, &val, Segment::Visual, Some(0)).unwrap();
        }
        let table = refresh_descriptors(&c, &regions).unwrap();
        for k in [1, 2, 4] {
            let (sel, out) = route_and_attend(&q, &c, &table, k).unwrap();
            assert_eq!(sel.region_ids[0], 0);
            // closed form: 4 tokens at logit 20 vs 4(k-1) at 0
            let w = 1.0 / (1.0 + (k as f64 - 1.0) * (-20.0f64).exp());
            assert!(out.output[0] > 0.99);
            assert!((out.output[0] - w).abs() < 1e-12);
        }
    }

    fn random_prefill(s: &mut SeededStream, units: usize, per_unit: usize, c: usize, d_in: usize, d: usize) -> (Prefill, Projections) {
        let proj = Projections {
            query: Matrix::random_normal(d_in, d, 0.5, s),
            key: Matrix::random_normal(d_in, d, 0.5, s),
            value: Matrix::random_normal(d_in, d, 0.5, s),
        };
        let feats: Vec<Matrix> = (0..units).map(|_| Matrix::random_normal(per_unit, d_in, 1.0, s)).collect();
        let ctx: Vec<Matrix> = (0..units).map(|_| Matrix::random_normal(c, d_in, 1.0, s)).collect();
        (prefill_with_context(0, 0, Precision::Double, &feats, &ctx, &proj).unwrap(), proj)
    }

    #[test]
    fn context_mask_excludes_other_units() {
        let mut s = SeededStream::new(5);
        let (p, _) = random_prefill(&mut s, 2, 6, 3, 4, 4);
        for tok in p.context.iter().filter(|t| t.unit == 1) {
            for pos in 0..p.cache.len() {
                if p.cache.unit_id(pos) == Some(0) {
                    assert_eq!(tok.weight_on(pos), 0.0);
                }
            }
            // later context tokens of the same unit are also invisible
            for later in p.context.iter().filter(|t| t.unit == 1 && t.slot > tok.slot) {
                assert_eq!(tok.weight_on(later.position), 0.0);
            }
            assert!(tok.weight_on(tok.position) > 0.0);
            assert!((tok.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn context_summary_of_constant_values() {
        // visual values all equal v; one context token whose own value is also v
        let d = 3;
        let proj = Projections {
            query: Matrix::identity_like(d, d),
            key: Matrix::identity_like(d, d),
            value: Matrix::from_rows(&[vec![0.0; 3], vec![0.0; 3], vec![1.0, 2.0, 3.0]]).unwrap(),
        };
        let mut feats = Matrix::random_normal(5, d, 1.0, &mut SeededStream::new(2));
        for r in 0..5 {
            feats.row_mut(r)[2] = 1.0;
        }
        let ctx = Matrix::from_rows(&[vec![0.3, -0.2, 1.0]]).unwrap();
        let p = prefill_with_context(0, 0, Precision::Double, &[feats], &[ctx], &proj).unwrap();
        let stored = p.cache.value(5);
        for (a, b) in stored.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_rows_layout() {
        let mut s = SeededStream::new(6);
        let (p, _) = random_prefill(&mut s, 8, 5, 4, 3, 3);
        let ctx: Vec<usize> = p.cache.positions(Segment::Context).collect();
        assert_eq!(ctx.len(), 32);
        for u in 0..8 {
            let start = u * 9 + 5;
            assert_eq!(&ctx[u * 4..u * 4 + 4], &[start, start + 1, start + 2, start + 3]);
            assert!((start..start + 4).all(|pos| p.cache.unit_id(pos) == Some(u)));
        }
        assert_eq!(p.unit_visual[1], 9..14);
    }

    #[test]
    fn empty_unit_is_layout_error() {
        let proj = Projections {
            query: Matrix::zeros(2, 2),
            key: Matrix::zeros(2, 2),
            value: Matrix::zeros(2, 2),
        };
        let r = prefill_with_context(0, 0, Precision::Double, &[Matrix::zeros(0, 2)], &[Matrix::zeros(1, 2)], &proj);
        assert!(matches!(r, Err(GazeError::Layout(_))));
    }

    fn gaze_fixture(seed: u64) -> (LayerHeadCache, RegionTable, Selection, Vec<f64>) {
        let mut s = SeededStream::new(seed);
        let v = TokenVolume::new(1, 2, 4).unwrap();
        let mut c = random_cache(&mut s, 2, &v, 8);
        let ctx = Matrix::random_normal(2, 8, 1.0, &mut s);
        c.append_kv(&ctx, &ctx, Segment::Context, Some(0)).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(1, 2, 2)).unwrap();
        let table = refresh_descriptors(&c, &regions).unwrap();
        let q = s.normal_vec(8, 1.0);
        let sel = route(&q, &table, 1).unwrap();
        (c, table, sel, q)
    }

    #[test]
    fn backward_zero_upstream() {
        let (c, t, sel, q) = gaze_fixture(1);
        let fwd = gaze_attention(&q, &c, &sel, &t).unwrap();
        let g = gaze_attention_backward(&q, &c, &sel, &t, &fwd, &[0.0; 8]).unwrap();
        assert!(g.query.iter().all(|x| *x == 0.0));
        assert!(g.keys.as_slice().iter().all(|x| *x == 0.0));
        assert!(g.values.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn backward_masks_unselected_and_rejects_mismatch() {
        let (c, t, sel, q) = gaze_fixture(2);
        let fwd = gaze_attention(&q, &c, &sel, &t).unwrap();
        let up = vec![1.0; 8];
        let g = gaze_attention_backward(&q, &c, &sel, &t, &fwd, &up).unwrap();
        let other = 1 - sel.region_ids[0];
        for &pos in &t.region(other).unwrap().token_indices {
            assert!(g.keys.row(pos).iter().all(|x| *x == 0.0));
            assert!(g.values.row(pos).iter().all(|x| *x == 0.0));
        }
        let wrong = Selection { region_ids: vec![other], scores: sel.scores.clone() };
        assert!(matches!(
            gaze_attention_backward(&q, &c, &wrong, &t, &fwd, &up),
            Err(GazeError::Contract(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10 {
            let (c, t, sel, q) = gaze_fixture(100 + seed);
            let mut s = SeededStream::new(seed);
            let up = s.normal_vec(8, 1.0);
            let fwd = gaze_attention(&q, &c, &sel, &t).unwrap();
            let g = gaze_attention_backward(&q, &c, &sel, &t, &fwd, &up).unwrap();
            let set = fwd.indices.clone();
            let loss = |qq: &[f64], keys: &[f64], values: &[f64]| {
                let d = 8;
                let kr: Vec<&[f64]> = set.iter().map(|&p| &keys[p * d..(p + 1) * d]).collect();
                let vr: Vec<&[f64]> = set.iter().map(|&p| &values[p * d..(p + 1) * d]).collect();
                let (o, _) = softmax_attention(qq, &kr, &vr).unwrap();
                o.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let (kf, vf) = (c.keys_flat().to_vec(), c.values_flat().to_vec());
            let check = |analytic: &[f64], numeric: &[f64]| {
                for (a, n) in analytic.iter().zip(numeric) {
                    assert!((a - n).abs() <= f64::max(1e-7, 1e-5 * a.abs()), "{a} vs {n}");
                }
            };
            check(&g.query, &central_difference(|x| loss(x, &kf, &vf), &q, 1e-5).unwrap());
            check(g.keys.as_slice(), &central_difference(|x| loss(&q, x, &vf), &kf, 1e-5).unwrap());
            check(g.values.as_slice(), &central_difference(|x| loss(&q, &kf, x), &vf, 1e-5).unwrap());
        }
    }
}

//! Batch embedding: samples → tape nodes for the representation network.

use std::rc::Rc;

use super::{Dataset, EncodedSample, FeatureSchema};
use crate::tensorcore::{Element, NodeId, Tape, Tensor, TensorError};

/// Embedding width for item-like vocabularies (item, category, brand).
pub const ID_EMBED: usize = 32;
/// Embedding width for everything else (user, position, time bucket).
pub const SMALL_EMBED: usize = 8;
/// Dense standardization floor for near-constant columns.
pub const STD_FLOOR: f32 = 1e-6;

/// Per-column mean/std of the three dense groups, fitted on the training
/// split and applied identically everywhere else (serving consistency).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStats {
    pub user_mean: Vec<f32>,
    pub user_std: Vec<f32>,
    pub item_mean: Vec<f32>,
    pub item_std: Vec<f32>,
    pub inter_mean: Vec<f32>,
    pub inter_std: Vec<f32>,
}

fn column_stats(rows: usize, width: usize, mut col: impl FnMut(usize, usize) -> f32) -> (Vec<f32>, Vec<f32>) {
    // f64 accumulation; count stats over ~1e5 rows would lose digits in f32
    let mut sum = vec![0.0f64; width];
    let mut sq = vec![0.0f64; width];
    for r in 0..rows {
        for c in 0..width {
            let v = col(r, c) as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let n = rows.max(1) as f64;
    let mean: Vec<f32> = sum.iter().map(|&s| (s / n) as f32).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(&q, &m)| ((q / n - (m as f64) * (m as f64)).max(0.0)).sqrt() as f32)
        .collect();
    (mean, std)
}

impl DenseStats {
    /// Fit on a dataset (normally the training split).
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len();
        let s = &data.schema;
        let (user_mean, user_std) =
            column_stats(n, s.user_dense, |r, c| data.samples[r].user_dense[c]);
        let (item_mean, item_std) =
            column_stats(n, s.item_dense, |r, c| data.samples[r].item_dense[c]);
        let (inter_mean, inter_std) =
            column_stats(n, s.inter_dense, |r, c| data.samples[r].inter_dense[c]);
        DenseStats {
            user_mean,
            user_std,
            item_mean,
            item_std,
            inter_mean,
            inter_std,
        }
    }

    #[inline]
    fn apply(mean: &[f32], std: &[f32], raw: &[f32], out: &mut Vec<f32>) {
        for c in 0..raw.len() {
            out.push((raw[c] - mean[c]) / std[c].max(STD_FLOOR));
        }
    }

    /// Standardized dense matrix for a batch, one group.
    fn matrix(
        mean: &[f32],
        std: &[f32],
        samples: &[&EncodedSample],
        pick: impl Fn(&EncodedSample) -> &[f32],
    ) -> Tensor {
        let width = mean.len();
        let mut data = Vec::with_capacity(samples.len() * width);
        for s in samples {
            Self::apply(mean, std, pick(s), &mut data);
        }
        Tensor::from_vec(&[samples.len(), width], data).expect("widths agree")
    }

    /// Flatten to named tensors for checkpointing, in a fixed order.
    pub fn to_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let t = |v: &Vec<f32>| Tensor::from_vec(&[v.len()], v.clone()).expect("same length");
        vec![
            ("norm/user_dense_mean", t(&self.user_mean)),
            ("norm/user_dense_std", t(&self.user_std)),
            ("norm/item_dense_mean", t(&self.item_mean)),
            ("norm/item_dense_std", t(&self.item_std)),
            ("norm/inter_dense_mean", t(&self.inter_mean)),
            ("norm/inter_dense_std", t(&self.inter_std)),
        ]
    }

    /// Rebuild from checkpoint tensors; `get` looks a name up.
    pub fn from_tensors(
        mut get: impl FnMut(&str) -> Option<Tensor>,
    ) -> Option<Self> {
        Some(DenseStats {
            user_mean: get("norm/user_dense_mean")?.data().to_vec(),
            user_std: get("norm/user_dense_std")?.data().to_vec(),
            item_mean: get("norm/item_dense_mean")?.data().to_vec(),
            item_std: get("norm/item_dense_std")?.data().to_vec(),
            inter_mean: get("norm/inter_dense_mean")?.data().to_vec(),
            inter_std: get("norm/inter_dense_std")?.data().to_vec(),
        })
    }
}

/// Tape handles of the six embedding tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbedTableIds {
    pub user: NodeId,
    pub item: NodeId,
    pub category: NodeId,
    pub brand: NodeId,
    pub position: NodeId,
    pub time_bucket: NodeId,
}

/// The embedded views of one batch, ready for the representation network.
pub struct EmbeddedBatch {
    /// B×(8+user_dense): user embedding ‖ standardized user stats.
    pub e_u: NodeId,
    /// B×(96+item_dense): item ‖ category ‖ brand ‖ standardized item stats.
    pub e_i: NodeId,
    /// B×inter_dense: standardized user-item interaction stats.
    pub e_ui: NodeId,
    /// B×16: position ‖ time-bucket context embeddings.
    pub e_c: NodeId,
    /// (B·t)×96 behavior sequence, invalid rows exactly zero.
    pub e_seq: NodeId,
    /// Validity of each (B·t) sequence row; shared with attention masks.
    pub seq_mask: Rc<[bool]>,
    pub rows: usize,
}

/// Embed a batch of samples onto the tape.
///
/// Sequence rows are left-padded: a history of length L occupies the last L
/// of the `t` slots, oldest first; the mask marks the padding invalid and
/// the padded rows of `e_seq` are forced to zero (padding shares id 0 with
/// real OOV lookups, so masking is what keeps it out of the math).
pub fn embed_batch<T: Element>(
    tape: &mut Tape<T>,
    tables: &EmbedTableIds,
    schema: &FeatureSchema,
    stats: &DenseStats,
    samples: &[&EncodedSample],
) -> Result<EmbeddedBatch, TensorError> {
    let b = samples.len();
    let t = schema.seq_len;

    let user_ids: Vec<u32> = samples.iter().map(|s| s.user).collect();
    let item_ids: Vec<u32> = samples.iter().map(|s| s.item).collect();
    let cat_ids: Vec<u32> = samples.iter().map(|s| s.category).collect();
    let brand_ids: Vec<u32> = samples.iter().map(|s| s.brand).collect();
    let pos_ids: Vec<u32> = samples.iter().map(|s| s.position).collect();
    let tb_ids: Vec<u32> = samples.iter().map(|s| s.time_bucket).collect();

    let mut seq_item = vec![0u32; b * t];
    let mut seq_cat = vec![0u32; b * t];
    let mut seq_brand = vec![0u32; b * t];
    let mut mask = vec![false; b * t];
    for (si, s) in samples.iter().enumerate() {
        let len = s.seq.len().min(t);
        let start = t - len;
        for (j, ev) in s.seq[s.seq.len() - len..].iter().enumerate() {
            let row = si * t + start + j;
            seq_item[row] = ev.item;
            seq_cat[row] = ev.category;
            seq_brand[row] = ev.brand;
            mask[row] = true;
        }
    }
    let seq_mask: Rc<[bool]> = mask.into();

    let user_emb = tape.embed_lookup(tables.user, &user_ids)?;
    let item_emb = tape.embed_lookup(tables.item, &item_ids)?;
    let cat_emb = tape.embed_lookup(tables.category, &cat_ids)?;
    let brand_emb = tape.embed_lookup(tables.brand, &brand_ids)?;
    let pos_emb = tape.embed_lookup(tables.position, &pos_ids)?;
    let tb_emb = tape.embed_lookup(tables.time_bucket, &tb_ids)?;

    let user_dense = tape.constant(&DenseStats::matrix(
        &stats.user_mean,
        &stats.user_std,
        samples,
        |s| &s.user_dense,
    ));
    let item_dense = tape.constant(&DenseStats::matrix(
        &stats.item_mean,
        &stats.item_std,
        samples,
        |s| &s.item_dense,
    ));
    let e_ui = tape.constant(&DenseStats::matrix(
        &stats.inter_mean,
        &stats.inter_std,
        samples,
        |s| &s.inter_dense,
    ));

    let e_u = tape.concat_cols(&[user_emb, user_dense])?;
    let e_i = tape.concat_cols(&[item_emb, cat_emb, brand_emb, item_dense])?;
    let e_c = tape.concat_cols(&[pos_emb, tb_emb])?;

    let s_item = tape.embed_lookup(tables.item, &seq_item)?;
    let s_cat = tape.embed_lookup(tables.category, &seq_cat)?;
    let s_brand = tape.embed_lookup(tables.brand, &seq_brand)?;
    let seq_raw = tape.concat_cols(&[s_item, s_cat, s_brand])?;

    let width = 3 * ID_EMBED;
    let mut mask_rows = Vec::with_capacity(b * t * width);
    for &valid in seq_mask.iter() {
        let v = if valid { 1.0 } else { 0.0 };
        mask_rows.extend(std::iter::repeat(v).take(width));
    }
    let mask_m = tape.constant(&Tensor::from_vec(&[b * t, width], mask_rows)?);
    let e_seq = tape.mul(seq_raw, mask_m)?;

    Ok(EmbeddedBatch {
        e_u,
        e_i,
        e_ui,
        e_c,
        e_seq,
        seq_mask,
        rows: b,
    })
}

/// Table shapes for a schema, in checkpoint naming order.
pub fn table_shapes(schema: &FeatureSchema) -> [(&'static str, [usize; 2]); 6] {
    [
        ("embed/user", [schema.users, SMALL_EMBED]),
        ("embed/item", [schema.items, ID_EMBED]),
        ("embed/category", [schema.categories, ID_EMBED]),
        ("embed/brand", [schema.brands, ID_EMBED]),
        ("embed/position", [schema.positions, SMALL_EMBED]),
        ("embed/time_bucket", [schema.time_buckets, SMALL_EMBED]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurespace::{OccasionTag, SeqEvent};
    use chrono::NaiveDate;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            users: 5,
            items: 6,
            categories: 4,
            brands: 3,
            positions: 4,
            time_buckets: 4,
            user_dense: 2,
            item_dense: 1,
            inter_dense: 1,
            seq_len: 3,
        }
    }

    fn sample(user: u32, seq: Vec<SeqEvent>) -> EncodedSample {
        EncodedSample {
            date: NaiveDate::from_ymd_opt(2026, 1, 1).unwrap(),
            occasion: OccasionTag::NP,
            user,
            item: 1,
            category: 2,
            brand: 1,
            user_dense: vec![1.0, 3.0],
            item_dense: vec![2.0],
            inter_dense: vec![0.0],
            position: 1,
            time_bucket: 2,
            seq,
            click: true,
            purchase: false,
        }
    }

    fn stats() -> DenseStats {
        DenseStats {
            user_mean: vec![0.0, 2.0],
            user_std: vec![1.0, 2.0],
            item_mean: vec![0.0],
            item_std: vec![1.0],
            inter_mean: vec![0.0],
            inter_std: vec![0.0], // exercises the floor
        }
    }

    fn tables(tape: &mut Tape<f32>, s: &FeatureSchema) -> EmbedTableIds {
        let mk = |tape: &mut Tape<f32>, rows: usize, cols: usize, fill: f32| {
            let data = (0..rows * cols).map(|i| fill + i as f32 * 0.01).collect();
            tape.param(&Tensor::from_vec(&[rows, cols], data).unwrap())
        };
        EmbedTableIds {
            user: mk(tape, s.users, SMALL_EMBED, 0.1),
            item: mk(tape, s.items, ID_EMBED, 0.2),
            category: mk(tape, s.categories, ID_EMBED, 0.3),
            brand: mk(tape, s.brands, ID_EMBED, 0.4),
            position: mk(tape, s.positions, SMALL_EMBED, 0.5),
            time_bucket: mk(tape, s.time_buckets, SMALL_EMBED, 0.6),
        }
    }

    #[test]
    fn shapes_and_padding() {
        let s = schema();
        let mut tape: Tape<f32> = Tape::new();
        let tb = tables(&mut tape, &s);
        let a = sample(1, vec![SeqEvent { item: 2, category: 1, brand: 1 }]);
        let b = sample(2, vec![]);
        let batch = embed_batch(&mut tape, &tb, &s, &stats(), &[&a, &b]).unwrap();

        assert_eq!(tape.dims(batch.e_u), &[2, SMALL_EMBED + 2]);
        assert_eq!(tape.dims(batch.e_i), &[2, 3 * ID_EMBED + 1]);
        assert_eq!(tape.dims(batch.e_ui), &[2, 1]);
        assert_eq!(tape.dims(batch.e_c), &[2, 2 * SMALL_EMBED]);
        assert_eq!(tape.dims(batch.e_seq), &[6, 3 * ID_EMBED]);

        // sample a: two padding rows then the event; sample b: all padding
        let m: Vec<bool> = batch.seq_mask.to_vec();
        assert_eq!(m, vec![false, false, true, false, false, false]);
        let v = tape.value(batch.e_seq);
        let w = 3 * ID_EMBED;
        assert!(v[..2 * w].iter().all(|&x| x == 0.0), "padding rows must be zero");
        assert!(v[2 * w..3 * w].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn dense_standardization_applies_fitted_stats() {
        let s = schema();
        let mut tape: Tape<f32> = Tape::new();
        let tb = tables(&mut tape, &s);
        let a = sample(1, vec![]);
        let batch = embed_batch(&mut tape, &tb, &s, &stats(), &[&a]).unwrap();
        let eu = tape.value(batch.e_u);
        // user_dense [1,3] with mean [0,2] std [1,2] → [1.0, 0.5]
        assert!((eu[SMALL_EMBED] - 1.0).abs() < 1e-6);
        assert!((eu[SMALL_EMBED + 1] - 0.5).abs() < 1e-6);
        // inter std 0 floors, not divides by zero
        assert!(tape.value(batch.e_ui)[0].is_finite());
    }

    #[test]
    fn gradients_reach_embedding_tables() {
        let s = schema();
        let mut tape: Tape<f32> = Tape::new();
        let tb = tables(&mut tape, &s);
        let a = sample(1, vec![SeqEvent { item: 2, category: 1, brand: 1 }]);
        let batch = embed_batch(&mut tape, &tb, &s, &stats(), &[&a]).unwrap();
        let m1 = tape.mean_rows(batch.e_seq).unwrap();
        let l = tape.mean_rows(m1).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(tb.item).unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn fit_computes_population_stats() {
        let s = schema();
        let mut a = sample(1, vec![]);
        let mut b = sample(2, vec![]);
        a.user_dense = vec![1.0, 0.0];
        b.user_dense = vec![3.0, 0.0];
        let ds = Dataset::new(s, vec![a, b]);
        let st = DenseStats::fit(&ds);
        assert!((st.user_mean[0] - 2.0).abs() < 1e-6);
        assert!((st.user_std[0] - 1.0).abs() < 1e-6);
        assert_eq!(st.user_std[1], 0.0);
    }

    #[test]
    fn stats_tensor_round_trip() {
        let st = stats();
        let tensors: std::collections::BTreeMap<String, Tensor> = st
            .to_tensors()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let back = DenseStats::from_tensors(|k| tensors.get(k).cloned()).unwrap();
        assert_eq!(back, st);
    }
}

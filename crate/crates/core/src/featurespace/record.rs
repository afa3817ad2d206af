//! One log line → one encoded sample.

use chrono::NaiveDate;

use super::{DataError, FeatureSchema, OccasionTag};

/// Line layout, tab-separated:
/// `date  occasion  user  item  category  brand  user_dense  item_dense
///  inter_dense  position  time_bucket  behavior_seq  click  purchase`
const FIELD_COUNT: usize = 14;

/// One event of a behavior sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqEvent {
    pub item: u32,
    pub category: u32,
    pub brand: u32,
}

/// A fully decoded click record, ids already folded into the schema's
/// vocabularies (out-of-range → the OOV index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub date: NaiveDate,
    pub occasion: OccasionTag,
    pub user: u32,
    pub item: u32,
    pub category: u32,
    pub brand: u32,
    pub user_dense: Vec<f32>,
    pub item_dense: Vec<f32>,
    pub inter_dense: Vec<f32>,
    pub position: u32,
    pub time_bucket: u32,
    /// Most recent `seq_len` events, oldest first; may be shorter.
    pub seq: Vec<SeqEvent>,
    pub click: bool,
    pub purchase: bool,
}

fn fold_oov(id: u64, vocab: usize) -> u32 {
    if id >= vocab as u64 {
        0
    } else {
        id as u32
    }
}

fn parse_id(
    raw: &str,
    vocab: usize,
    field: &'static str,
    line: usize,
) -> Result<u32, DataError> {
    let id: u64 = raw.parse().map_err(|_| DataError::BadField {
        line,
        field,
        value: raw.to_string(),
    })?;
    Ok(fold_oov(id, vocab))
}

fn parse_dense(
    raw: &str,
    want: usize,
    field: &'static str,
    line: usize,
) -> Result<Vec<f32>, DataError> {
    let mut out = Vec::with_capacity(want);
    if !raw.is_empty() {
        for part in raw.split(',') {
            let v: f32 = part.parse().map_err(|_| DataError::BadField {
                line,
                field,
                value: part.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadField {
                    line,
                    field,
                    value: part.to_string(),
                });
            }
            out.push(v);
        }
    }
    if out.len() != want {
        return Err(DataError::DenseWidth {
            line,
            field,
            want,
            got: out.len(),
        });
    }
    Ok(out)
}

fn parse_flag(raw: &str, field: &'static str, line: usize) -> Result<bool, DataError> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(DataError::BadField {
            line,
            field,
            value: raw.to_string(),
        }),
    }
}

/// Decode one TSV line. `line` is the 1-based line number used in errors.
pub fn encode_record(
    raw: &str,
    schema: &FeatureSchema,
    line: usize,
) -> Result<EncodedSample, DataError> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != FIELD_COUNT {
        return Err(DataError::FieldCount {
            line,
            want: FIELD_COUNT,
            got: fields.len(),
        });
    }

    let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d").map_err(|_| DataError::BadField {
        line,
        field: "date",
        value: fields[0].to_string(),
    })?;
    let occasion = OccasionTag::parse(fields[1]).ok_or_else(|| DataError::BadField {
        line,
        field: "occasion",
        value: fields[1].to_string(),
    })?;

    let user = parse_id(fields[2], schema.users, "user", line)?;
    let item = parse_id(fields[3], schema.items, "item", line)?;
    let category = parse_id(fields[4], schema.categories, "category", line)?;
    let brand = parse_id(fields[5], schema.brands, "brand", line)?;

    let user_dense = parse_dense(fields[6], schema.user_dense, "user_dense", line)?;
    let item_dense = parse_dense(fields[7], schema.item_dense, "item_dense", line)?;
    let inter_dense = parse_dense(fields[8], schema.inter_dense, "inter_dense", line)?;

    let position = parse_id(fields[9], schema.positions, "position", line)?;
    let time_bucket = parse_id(fields[10], schema.time_buckets, "time_bucket", line)?;

    let mut seq = Vec::new();
    if !fields[11].is_empty() {
        for trip in fields[11].split(',') {
            let mut it = trip.split(':');
            let (Some(i), Some(c), Some(b), None) = (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(DataError::BadField {
                    line,
                    field: "behavior_seq",
                    value: trip.to_string(),
                });
            };
            seq.push(SeqEvent {
                item: parse_id(i, schema.items, "behavior_seq", line)?,
                category: parse_id(c, schema.categories, "behavior_seq", line)?,
                brand: parse_id(b, schema.brands, "behavior_seq", line)?,
            });
        }
    }
    // keep only the most recent window
    if seq.len() > schema.seq_len {
        seq.drain(..seq.len() - schema.seq_len);
    }

    let click = parse_flag(fields[12], "click", line)?;
    let purchase = parse_flag(fields[13], "purchase", line)?;
    if purchase && !click {
        return Err(DataError::PurchaseWithoutClick { line });
    }

    Ok(EncodedSample {
        date,
        occasion,
        user,
        item,
        category,
        brand,
        user_dense,
        item_dense,
        inter_dense,
        position,
        time_bucket,
        seq,
        click,
        purchase,
    })
}

//! Reference attention baselines: dense global self-attention and
//! criss-cross (row + column) attention. Forward only.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{shape_err, LgaError, Result};
use crate::instrument::{self, with_category, CostCategory};
use crate::tensor::{conv1x1_grouped, FeatureMap, GroupedLinear};

/// Node limit for the dense path outside of benchmarks.
pub const DENSE_ATTENTION_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: GroupedLinear,
    pub key: GroupedLinear,
    pub value: GroupedLinear,
    /// Criss-cross passes; ignored by dense attention.
    pub recurrence: usize,
}

impl AttentionParams {
    pub fn new(
        query: GroupedLinear,
        key: GroupedLinear,
        value: GroupedLinear,
        recurrence: usize,
    ) -> Result<Self> {
        let c = query.in_channels();
        if key.in_channels() != c || value.in_channels() != c {
            return Err(shape_err(
                "AttentionParams::new",
                format!("all projections reading {c} channels"),
                format!("key {} / value {}", key.in_channels(), value.in_channels()),
            ));
        }
        if query.out_channels() != key.out_channels() {
            return Err(shape_err(
                "AttentionParams::new",
                format!("key width {}", query.out_channels()),
                key.out_channels(),
            ));
        }
        if query.out_channels() > c {
            return Err(LgaError::Config(format!(
                "query/key width {} exceeds input channels {c}",
                query.out_channels()
            )));
        }
        if recurrence == 0 {
            return Err(LgaError::Config("recurrence must be at least 1".into()));
        }
        Ok(Self {
            query,
            key,
            value,
            recurrence,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        qk_channels: usize,
        value_channels: usize,
        recurrence: usize,
    ) -> Result<Self> {
        Self::new(
            GroupedLinear::random(rng, channels, qk_channels, 1, false)?,
            GroupedLinear::random(rng, channels, qk_channels, 1, false)?,
            GroupedLinear::random(rng, channels, value_channels, 1, false)?,
            recurrence,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.query.in_channels()
    }

    fn project(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
        if x.channels() != self.in_channels() {
            return Err(shape_err(
                "attention",
                format!("{} channels", self.in_channels()),
                x.channels(),
            ));
        }
        with_category(CostCategory::OtherConv, || {
            Ok((
                conv1x1_grouped(x, &self.query)?,
                conv1x1_grouped(x, &self.key)?,
                conv1x1_grouped(x, &self.value)?,
            ))
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax in place; returns nothing, logits become weights.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// `softmax(Q K^T) V` over all node pairs, one query row at a time.
///
/// Memory stays `O(N)`; this is the kernel the wall-time benchmark times.
pub fn attend_dense(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> FeatureMap {
    let n = q.num_nodes();
    let cv = v.channels();
    let mut out = FeatureMap::zeros(q.height(), q.width(), cv);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let qi = q.node(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(qi, k.node(j));
        }
        softmax_in_place(&mut logits);
        let dst = out.node_mut(i);
        for (j, &a) in logits.iter().enumerate() {
            for (o, &vv) in dst.iter_mut().zip(v.node(j)) {
                *o += a * vv;
            }
        }
    }
    instrument::record(
        CostCategory::InfoPropagation,
        (n * n * (q.channels() + cv)) as u64,
    );
    out
}

pub fn dense_attention(x: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    guard_dense(x.num_nodes())?;
    let (q, k, v) = p.project(x)?;
    Ok(attend_dense(&q, &k, &v))
}

/// The full `N x N` attention matrix (rows are queries).
pub fn dense_attention_weights(x: &FeatureMap, p: &AttentionParams) -> Result<DMatrix<f64>> {
    let n = x.num_nodes();
    guard_dense(n)?;
    let (q, k, _) = p.project(x)?;
    let mut m = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(q.node(i), k.node(j));
        }
        softmax_in_place(&mut row);
        for j in 0..n {
            m[(i, j)] = row[j];
        }
    }
    Ok(m)
}

fn guard_dense(n: usize) -> Result<()> {
    if n > DENSE_ATTENTION_LIMIT {
        return Err(LgaError::TooLarge {
            what: "dense attention",
            n,
            limit: DENSE_ATTENTION_LIMIT,
        });
    }
    Ok(())
}

/// Positions attended by `(y, x)`: its whole row, then the rest of its
/// column. The position itself appears once.
pub fn crisscross_set(
    y: usize,
    x: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = usize> {
    let row = (0..width).map(move |xx| y * width + xx);
    let col = (0..height)
        .filter(move |&yy| yy != y)
        .map(move |yy| yy * width + x);
    row.chain(col)
}

/// One criss-cross pass given projected queries, keys and values.
pub fn attend_crisscross(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> FeatureMap {
    let (h, w) = (q.height(), q.width());
    let cv = v.channels();
    let mut out = FeatureMap::zeros(h, w, cv);
    let mut logits = Vec::with_capacity(h + w);
    let mut idx = Vec::with_capacity(h + w);
    for y in 0..h {
        for x in 0..w {
            let n = y * w + x;
            idx.clear();
            idx.extend(crisscross_set(y, x, h, w));
            logits.clear();
            logits.extend(idx.iter().map(|&j| dot(q.node(n), k.node(j))));
            softmax_in_place(&mut logits);
            let dst = out.node_mut(n);
            for (&j, &a) in idx.iter().zip(&logits) {
                for (o, &vv) in dst.iter_mut().zip(v.node(j)) {
                    *o += a * vv;
                }
            }
        }
    }
    let per_position = if h * w == 0 { 0 } else { h + w - 1 };
    instrument::record(
        CostCategory::InfoPropagation,
        (h * w * per_position * (q.channels() + cv)) as u64,
    );
    out
}

/// `R` chained criss-cross passes. Chaining needs the value width to equal
/// the input width when `R > 1`.
pub fn crisscross_attention(x: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    if p.recurrence > 1 && p.value.out_channels() != p.in_channels() {
        return Err(LgaError::Config(format!(
            "recurrence {} needs value channels ({}) equal to input channels ({})",
            p.recurrence,
            p.value.out_channels(),
            p.in_channels()
        )));
    }
    let mut cur = x.clone();
    for _ in 0..p.recurrence {
        let (q, k, v) = p.project(&cur)?;
        cur = attend_crisscross(&q, &k, &v);
    }
    Ok(cur)
}

/// First-pass attention weights per position, in [`crisscross_set`] order.
pub fn crisscross_weights(x: &FeatureMap, p: &AttentionParams) -> Result<Vec<Vec<f64>>> {
    let (q, k, _) = p.project(x)?;
    let (h, w) = (x.height(), x.width());
    let mut all = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            let n = y * w + xx;
            let mut logits: Vec<f64> = crisscross_set(y, xx, h, w)
                .map(|j| dot(q.node(n), k.node(j)))
                .collect();
            softmax_in_place(&mut logits);
            all.push(logits);
        }
    }
    Ok(all)
}

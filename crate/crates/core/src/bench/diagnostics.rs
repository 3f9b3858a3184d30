//! Post-training measurements: rank allocation statistics and task-embedding
//! quality.

use crate::bench::tasks::{Suite, CHUNK};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::transformer::Model;

/// Mean selected rank per task from a task × rank count matrix.
pub fn mean_selected_rank(allocation: &[Vec<u64>]) -> Vec<f64> {
    allocation
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            let weighted: u64 = row.iter().enumerate().map(|(k, c)| (k as u64 + 1) * c).sum();
            weighted as f64 / total.max(1) as f64
        })
        .collect()
}

/// Share of all selections that went to ranks `1..=max_rank`.
pub fn low_rank_share(allocation: &[Vec<u64>], max_rank: usize) -> f64 {
    let total: u64 = allocation.iter().flatten().sum();
    let low: u64 = allocation
        .iter()
        .map(|row| row.iter().take(max_rank).sum::<u64>())
        .sum();
    low as f64 / total.max(1) as f64
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length series of at least 2 points".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Index of the row of `table` most cosine-similar to `v` (ties: lowest).
pub fn nearest_row(v: &[f64], table: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, row) in table.iter().enumerate() {
        let sim = cosine(v, row);
        if sim > best_sim {
            best = k;
            best_sim = sim;
        }
    }
    best
}

/// Pooled MoRE-site inputs of `inputs` run as `task`; one `n × h` row set per
/// site, in site order.
pub fn pooled_representations(model: &mut Model, inputs: &[Vec<usize>], task: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let sites = model.more_layers().len();
    let mut per_site = vec![Vec::with_capacity(inputs.len()); sites];
    for chunk in inputs.chunks(CHUNK) {
        let Model { params, backbone } = &mut *model;
        let mut s = Session::new(params);
        let out = backbone.forward(&mut s, chunk, Some(task))?;
        for (i, pooled) in out.pooled.iter().enumerate() {
            let v = s.graph.value(pooled.pooled);
            per_site[i].extend((0..v.rows()).map(|r| v.row_slice(r).to_vec()));
        }
    }
    Ok(per_site)
}

fn embedding_tables(model: &Model) -> Vec<Vec<Vec<f64>>> {
    model
        .more_layers()
        .iter()
        .map(|m| {
            let t = model.params.get(m.embeddings.table);
            (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
        })
        .collect()
}

/// Fraction of (held-out sample, site) pairs whose nearest task embedding is
/// the sample's own task.
pub fn retrieval_accuracy(suite: &Suite, model: &mut Model) -> Result<f64> {
    let tables = embedding_tables(model);
    if tables.is_empty() {
        return Err(Error::InvalidArgument("model has no MoRE sites".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, task) in suite.tasks.iter().enumerate() {
        let inputs: Vec<_> = task.eval.iter().map(|s| s.tokens.clone()).collect();
        let reps = pooled_representations(model, &inputs, t)?;
        for (site, rows) in reps.iter().enumerate() {
            for h in rows {
                hits += usize::from(nearest_row(h, &tables[site]) == t);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Mean over MoRE sites of the cosine similarity between the embeddings of
/// tasks `a` and `b`.
pub fn embedding_similarity(model: &Model, a: usize, b: usize) -> Result<f64> {
    let tables = embedding_tables(model);
    if tables.is_empty() {
        return Err(Error::InvalidArgument("model has no MoRE sites".into()));
    }
    let rows = tables[0].len();
    if a >= rows || b >= rows {
        return Err(Error::UnknownTask {
            task: a.max(b),
            num_tasks: rows,
        });
    }
    Ok(tables.iter().map(|t| cosine(&t[a], &t[b])).sum::<f64>() / tables.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        // Ties: ranks (1.5, 1.5, 3) vs (1, 2, 3).
        let rho = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((rho - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn allocation_summaries() {
        let alloc = vec![vec![2, 0, 0, 0], vec![0, 0, 0, 2]];
        assert_eq!(mean_selected_rank(&alloc), vec![1.0, 4.0]);
        assert_eq!(low_rank_share(&alloc, 3), 0.5);
    }

    #[test]
    fn nearest_row_by_angle() {
        let table = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(nearest_row(&[0.1, 5.0], &table), 1);
        assert_eq!(nearest_row(&[3.0, 0.0], &table), 0);
    }
}

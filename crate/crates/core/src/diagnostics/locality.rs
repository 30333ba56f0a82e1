//! Where attention goes: the condition token, grid neighbors of the token
//! being predicted, or anywhere else.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TraceLevel};
use crate::numerics::Real;

/// Head-averaged attention statistics of one query row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct LocalityCell {
    pub mass_on_condition: f64,
    pub mass_on_neighbors: f64,
    pub mass_elsewhere: f64,
    /// Attention-weighted Euclidean grid distance from the predicted token to
    /// the attended tokens, normalized over token keys. Zero at step 0.
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalityProfile {
    pub grid_side: usize,
    pub traces: usize,
    /// `[layer][step]`; step `t` is the query row predicting token `t`.
    pub cells: Vec<Vec<LocalityCell>>,
    /// `[layer]`, row-major `T × T` attention averaged over traces and heads.
    pub mean_attention: Vec<Vec<f64>>,
}

/// Layer averages over steps `1..T` (step 0 sees only the condition).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub mass_on_condition: f64,
    pub mass_on_neighbors: f64,
    pub mass_elsewhere: f64,
    pub mean_distance: f64,
}

impl LocalityProfile {
    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// `layer` is 1-based.
    pub fn summary(&self, layer: usize) -> LayerSummary {
        let cells = &self.cells[layer - 1][1..];
        let n = cells.len().max(1) as f64;
        let avg = |f: fn(&LocalityCell) -> f64| cells.iter().map(f).sum::<f64>() / n;
        LayerSummary {
            layer,
            mass_on_condition: avg(|c| c.mass_on_condition),
            mass_on_neighbors: avg(|c| c.mass_on_neighbors),
            mass_elsewhere: avg(|c| c.mass_elsewhere),
            mean_distance: avg(|c| c.mean_distance),
        }
    }
}

/// Key `j ≥ 1` holds token `j − 1`; query row `t` predicts token `t`.
fn coords(i: usize, g: usize) -> (f64, f64) {
    ((i / g) as f64, (i % g) as f64)
}

fn is_neighbor(t: usize, tok: usize, g: usize) -> bool {
    let (a, b) = (t / g, t % g);
    let (c, d) = (tok / g, tok % g);
    a.abs_diff(c) <= 1 && b.abs_diff(d) <= 1
}

/// Running sums over traces; [`LocalityAccumulator::finish`] averages them.
pub struct LocalityAccumulator {
    grid_side: usize,
    seq_len: usize,
    layers: usize,
    count: usize,
    cells: Vec<Vec<LocalityCell>>,
    mean_attention: Vec<Vec<f64>>,
}

impl LocalityAccumulator {
    pub fn new(grid_side: usize, layers: usize) -> Self {
        let t = grid_side * grid_side;
        LocalityAccumulator {
            grid_side,
            seq_len: t,
            layers,
            count: 0,
            cells: vec![vec![LocalityCell::default(); t]; layers],
            mean_attention: vec![vec![0.0; t * t]; layers],
        }
    }

    pub fn add<F: Real>(&mut self, trace: &ForwardTrace<F>) -> Result<()> {
        if trace.level != TraceLevel::Full {
            return Err(Error::invalid("attention locality needs full traces"));
        }
        let (t_n, g) = (self.seq_len, self.grid_side);
        if trace.seq_len != t_n || trace.attention.len() != self.layers {
            return Err(Error::shape(
                "attention_locality",
                format!("trace T={} L={} vs grid {g}² and L={}", trace.seq_len, trace.attention.len(), self.layers),
            ));
        }
        let heads = trace.heads;
        let inv_h = 1.0 / heads as f64;
        let mut row = vec![0.0f64; t_n];
        for l in 0..self.layers {
            let a = &trace.attention[l];
            for t in 0..t_n {
                row.iter_mut().for_each(|x| *x = 0.0);
                for h in 0..heads {
                    let base = (h * t_n + t) * t_n;
                    for (r, &p) in row.iter_mut().zip(&a[base..base + t_n]) {
                        *r += p.to_f64().unwrap() * inv_h;
                    }
                }
                let cond = row[0];
                let (mut near, mut far, mut dist) = (0.0, 0.0, 0.0);
                let (qy, qx) = coords(t, g);
                for j in 1..=t {
                    let tok = j - 1;
                    if is_neighbor(t, tok, g) {
                        near += row[j];
                    } else {
                        far += row[j];
                    }
                    let (ky, kx) = coords(tok, g);
                    dist += row[j] * ((qy - ky).powi(2) + (qx - kx).powi(2)).sqrt();
                }
                let token_mass = near + far;
                let cell = &mut self.cells[l][t];
                cell.mass_on_condition += cond;
                cell.mass_on_neighbors += near;
                cell.mass_elsewhere += far;
                cell.mean_distance += if token_mass > 0.0 { dist / token_mass } else { 0.0 };
                let m = &mut self.mean_attention[l][t * t_n..(t + 1) * t_n];
                for (x, &r) in m.iter_mut().zip(&row) {
                    *x += r;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<LocalityProfile> {
        if self.count == 0 {
            return Err(Error::invalid("attention locality over an empty trace set"));
        }
        let inv = 1.0 / self.count as f64;
        let cells = self
            .cells
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|c| LocalityCell {
                        mass_on_condition: c.mass_on_condition * inv,
                        mass_on_neighbors: c.mass_on_neighbors * inv,
                        mass_elsewhere: c.mass_elsewhere * inv,
                        mean_distance: c.mean_distance * inv,
                    })
                    .collect()
            })
            .collect();
        let mean_attention =
            self.mean_attention.into_iter().map(|m| m.into_iter().map(|x| x * inv).collect()).collect();
        Ok(LocalityProfile { grid_side: self.grid_side, traces: self.count, cells, mean_attention })
    }
}

pub fn attention_locality<F: Real>(traces: &[ForwardTrace<F>], grid_side: usize) -> Result<LocalityProfile> {
    let first = traces.first().ok_or_else(|| Error::invalid("attention locality over an empty trace set"))?;
    if first.level != TraceLevel::Full {
        return Err(Error::invalid("attention locality needs full traces"));
    }
    let mut acc = LocalityAccumulator::new(grid_side, first.attention.len());
    for t in traces {
        acc.add(t)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    /// A one-layer, one-head trace with the given attention rows.
    fn synthetic(t: usize, rows: impl Fn(usize) -> Vec<f64>) -> ForwardTrace<f64> {
        let mut att = Vec::with_capacity(t * t);
        for q in 0..t {
            att.extend(rows(q));
        }
        ForwardTrace {
            level: TraceLevel::Full,
            seq_len: t,
            heads: 1,
            hidden: vec![Tensor::zeros(&[t, 2])],
            attention: vec![att],
            final_hidden: Tensor::zeros(&[t, 2]),
            logits: Tensor::zeros(&[t, 2]),
        }
    }

    #[test]
    fn all_mass_on_condition() {
        let tr = synthetic(9, |_| {
            let mut r = vec![0.0; 9];
            r[0] = 1.0;
            r
        });
        let p = attention_locality(&[tr], 3).unwrap();
        for c in &p.cells[0] {
            assert_eq!((c.mass_on_condition, c.mass_on_neighbors, c.mass_elsewhere), (1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn uniform_rows_give_bucket_fractions() {
        let (g, t) = (4, 16);
        let tr = synthetic(t, |q| (0..t).map(|j| if j <= q { 1.0 / (q + 1) as f64 } else { 0.0 }).collect());
        let p = attention_locality(&[tr], g).unwrap();
        for q in 0..t {
            let near = (0..q).filter(|&tok| is_neighbor(q, tok, g)).count();
            let n = (q + 1) as f64;
            let c = p.cells[0][q];
            assert!((c.mass_on_condition - 1.0 / n).abs() < 1e-15);
            assert!((c.mass_on_neighbors - near as f64 / n).abs() < 1e-15);
            assert!((c.mass_elsewhere - (q - near) as f64 / n).abs() < 1e-15);
        }
        // step 5 on a 4-grid is (1,1): visible neighbors are tokens 0, 1, 2, 4
        assert!((p.cells[0][5].mass_on_neighbors - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn buckets_partition_real_attention() {
        use crate::data::TokenSequence;
        use crate::model::{forward_batch, ModelConfig};
        use rand::{Rng, SeedableRng};
        let c = ModelConfig { seq_len: 16, ..ModelConfig::micro() };
        let p = crate::gradsuite::check_point(&c, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let seqs: Vec<_> = (0..6)
            .map(|_| TokenSequence::new((0..16).map(|_| rng.random_range(0..c.vocab)).collect(), rng.random_range(0..=c.classes)))
            .collect();
        let traces = forward_batch(&p, &c, &seqs, &[], TraceLevel::Full).unwrap();
        let prof = attention_locality(&traces, 4).unwrap();
        for l in 0..c.layers {
            for q in 0..16 {
                let cell = prof.cells[l][q];
                let s = cell.mass_on_condition + cell.mass_on_neighbors + cell.mass_elsewhere;
                assert!((s - 1.0).abs() < 1e-6);
                // loop oracle straight from the per-head weights
                let (mut cond, mut near) = (0.0, 0.0);
                for tr in &traces {
                    for h in 0..c.heads {
                        cond += tr.attention_weight(l, h, q, 0) / (c.heads * traces.len()) as f64;
                        for j in 1..=q {
                            let (dy, dx) = ((q / 4).abs_diff((j - 1) / 4), (q % 4).abs_diff((j - 1) % 4));
                            if dy <= 1 && dx <= 1 {
                                near += tr.attention_weight(l, h, q, j) / (c.heads * traces.len()) as f64;
                            }
                        }
                    }
                }
                assert!((cell.mass_on_condition - cond).abs() < 1e-6);
                assert!((cell.mass_on_neighbors - near).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn logits_only_traces_are_rejected() {
        let mut tr = synthetic(4, |_| vec![1.0, 0.0, 0.0, 0.0]);
        tr.level = TraceLevel::LogitsOnly;
        assert!(attention_locality(&[tr], 2).is_err());
    }
}

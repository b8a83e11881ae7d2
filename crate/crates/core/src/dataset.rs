//! Trajectory storage and the count-based empirical MDP.
//!
//! Trajectories are stored column-wise per level so that the level-`h` slice
//! the estimators iterate over is contiguous.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{QmmrError, Result};
use crate::mdp::{MdpShape, Occupancy, Policy, QTable};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub mdp_hash: String,
    pub behavior_hash: String,
    pub seed: u64,
}

/// `n` trajectories `(s_h, a_h, r_h)` for `h = 0..=H`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    states: Vec<Vec<usize>>,
    actions: Vec<Vec<usize>>,
    rewards: Vec<Vec<f64>>,
    provenance: Option<Provenance>,
}

/// One trajectory as written to JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    n: usize,
    horizon: usize,
    provenance: Option<Provenance>,
}

impl TrajectoryDataset {
    /// Builds a dataset from row records. Level-0 rewards must be zero.
    pub fn from_records(
        records: &[TrajectoryRecord],
        provenance: Option<Provenance>,
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| QmmrError::validation("a dataset needs at least one trajectory"))?;
        let levels = first.s.len();
        if levels < 2 {
            return Err(QmmrError::validation(
                "trajectories must cover at least levels 0 and 1",
            ));
        }
        let mut ds = TrajectoryDataset {
            states: vec![Vec::with_capacity(records.len()); levels],
            actions: vec![Vec::with_capacity(records.len()); levels],
            rewards: vec![Vec::with_capacity(records.len()); levels],
            provenance,
        };
        for (i, rec) in records.iter().enumerate() {
            if rec.s.len() != levels || rec.a.len() != levels || rec.r.len() != levels {
                return Err(QmmrError::validation(format!(
                    "trajectory {i} does not have {levels} (s, a, r) triples"
                )));
            }
            if rec.r[0] != 0.0 {
                return Err(QmmrError::validation(format!(
                    "trajectory {i} has nonzero r_0"
                )));
            }
            for h in 0..levels {
                ds.states[h].push(rec.s[h]);
                ds.actions[h].push(rec.a[h]);
                ds.rewards[h].push(rec.r[h]);
            }
        }
        Ok(ds)
    }

    pub(crate) fn from_columns(
        states: Vec<Vec<usize>>,
        actions: Vec<Vec<usize>>,
        rewards: Vec<Vec<f64>>,
        provenance: Option<Provenance>,
    ) -> Self {
        TrajectoryDataset {
            states,
            actions,
            rewards,
            provenance,
        }
    }

    pub fn n(&self) -> usize {
        self.states[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// Global state ids at level `h`.
    pub fn states(&self, h: usize) -> &[usize] {
        &self.states[h]
    }

    pub fn actions(&self, h: usize) -> &[usize] {
        &self.actions[h]
    }

    pub fn rewards(&self, h: usize) -> &[f64] {
        &self.rewards[h]
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn record(&self, i: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            s: self.states.iter().map(|l| l[i]).collect(),
            a: self.actions.iter().map(|l| l[i]).collect(),
            r: self.rewards.iter().map(|l| l[i]).collect(),
        }
    }

    /// Sum of rewards along trajectory `i`.
    pub fn trajectory_return(&self, i: usize) -> f64 {
        self.rewards.iter().map(|l| l[i]).sum()
    }

    /// Checks that every slot holds a state of its own level and a legal action.
    pub fn validate(&self, shape: &MdpShape) -> Result<()> {
        if self.horizon() != shape.horizon() {
            return Err(QmmrError::mismatch(
                "dataset horizon",
                shape.horizon(),
                self.horizon(),
            ));
        }
        for h in 0..=self.horizon() {
            for (i, (&s, &a)) in self.states[h].iter().zip(&self.actions[h]).enumerate() {
                if shape.local(h, s).is_none() {
                    return Err(QmmrError::validation(format!(
                        "trajectory {i}: state {s} does not belong to level {h}"
                    )));
                }
                if a >= shape.num_actions(h) {
                    return Err(QmmrError::validation(format!(
                        "trajectory {i}: action {a} is not admissible at level {h}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Local pair index of every sample at level `h`.
    pub fn pairs(&self, shape: &MdpShape, h: usize) -> Vec<usize> {
        self.states[h]
            .iter()
            .zip(&self.actions[h])
            .map(|(&s, &a)| {
                let local = shape.local(h, s).expect("dataset validated against shape");
                shape.pair(h, local, a)
            })
            .collect()
    }

    /// Appends the trajectories of `other`; provenance of `self` is kept.
    pub fn concat(&self, other: &TrajectoryDataset) -> Result<Self> {
        if self.horizon() != other.horizon() {
            return Err(QmmrError::mismatch(
                "dataset horizon",
                self.horizon(),
                other.horizon(),
            ));
        }
        let join = |a: &Vec<Vec<usize>>, b: &Vec<Vec<usize>>| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().chain(y).copied().collect())
                .collect()
        };
        Ok(TrajectoryDataset {
            states: join(&self.states, &other.states),
            actions: join(&self.actions, &other.actions),
            rewards: self
                .rewards
                .iter()
                .zip(&other.rewards)
                .map(|(x, y)| x.iter().chain(y).copied().collect())
                .collect(),
            provenance: self.provenance.clone(),
        })
    }

    /// `(1/n) sum_i g(s_h^(i), a_h^(i))` with global state ids.
    pub fn empirical_expectation(&self, h: usize, mut g: impl FnMut(usize, usize) -> f64) -> f64 {
        let total: f64 = self.states[h]
            .iter()
            .zip(&self.actions[h])
            .map(|(&s, &a)| g(s, a))
            .sum();
        total / self.n() as f64
    }

    /// Header line with provenance followed by one JSON object per trajectory.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            n: self.n(),
            horizon: self.horizon(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for i in 0..self.n() {
            serde_json::to_writer(&mut out, &self.record(i))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(QmmrError::validation("empty dataset file")),
        };
        let mut records = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<TrajectoryRecord>(&line)?);
        }
        if records.len() != header.n {
            return Err(QmmrError::mismatch(
                "dataset trajectories",
                header.n,
                records.len(),
            ));
        }
        let ds = Self::from_records(&records, header.provenance)?;
        if ds.horizon() != header.horizon {
            return Err(QmmrError::mismatch(
                "dataset horizon",
                header.horizon,
                ds.horizon(),
            ));
        }
        Ok(ds)
    }

    /// Long-format CSV: `trajectory,level,state,action,reward`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "trajectory,level,state,action,reward")?;
        for i in 0..self.n() {
            for h in 0..=self.horizon() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    i, h, self.states[h][i], self.actions[h][i], self.rewards[h][i]
                )?;
            }
        }
        Ok(())
    }
}

/// Count-based model of the data. Unvisited pairs have no reward estimate and
/// no transition row; exact evaluation treats them as absorbing zero-value
/// cells, so occupancy mass reaching them is not propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMdp {
    shape: MdpShape,
    n: usize,
    counts: Vec<Vec<usize>>,
    reward_hat: Vec<Vec<Option<f64>>>,
    /// `[h][pair * |S_{h+1}| + s']`; rows of unvisited pairs are zero.
    transition_hat: Vec<Vec<f64>>,
}

impl EmpiricalMdp {
    pub fn build(ds: &TrajectoryDataset, shape: &MdpShape) -> Result<Self> {
        ds.validate(shape)?;
        let horizon = shape.horizon();
        let n = ds.n();
        let mut counts = Vec::with_capacity(horizon + 1);
        let mut reward_hat = Vec::with_capacity(horizon + 1);
        let mut transition_hat = Vec::with_capacity(horizon);
        for h in 0..=horizon {
            let pairs = ds.pairs(shape, h);
            let np = shape.num_pairs(h);
            let mut c = vec![0usize; np];
            let mut cell_rewards = vec![Vec::new(); np];
            for (i, &p) in pairs.iter().enumerate() {
                c[p] += 1;
                cell_rewards[p].push(ds.rewards(h)[i]);
            }
            // Sorted summation keeps the estimate independent of trajectory order.
            let r = cell_rewards
                .into_iter()
                .zip(&c)
                .map(|(mut rs, &k)| {
                    (k > 0).then(|| {
                        rs.sort_by(f64::total_cmp);
                        rs.iter().sum::<f64>() / k as f64
                    })
                })
                .collect();
            if h < horizon {
                let next = shape.num_states(h + 1);
                let mut t = vec![0usize; np * next];
                for (i, &p) in pairs.iter().enumerate() {
                    let s_next = shape.local(h + 1, ds.states(h + 1)[i]).expect("validated");
                    t[p * next + s_next] += 1;
                }
                let rows = t
                    .iter()
                    .enumerate()
                    .map(|(idx, &k)| {
                        let total = c[idx / next];
                        if total == 0 {
                            0.0
                        } else {
                            k as f64 / total as f64
                        }
                    })
                    .collect();
                transition_hat.push(rows);
            }
            counts.push(c);
            reward_hat.push(r);
        }
        Ok(EmpiricalMdp {
            shape: shape.clone(),
            n,
            counts,
            reward_hat,
            transition_hat,
        })
    }

    pub fn shape(&self) -> &MdpShape {
        &self.shape
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self, h: usize) -> &[usize] {
        &self.counts[h]
    }

    pub fn is_visited(&self, h: usize, pair: usize) -> bool {
        self.counts[h][pair] > 0
    }

    /// Unvisited pairs at level `h`.
    pub fn unvisited(&self, h: usize) -> Vec<usize> {
        (0..self.shape.num_pairs(h))
            .filter(|&p| !self.is_visited(h, p))
            .collect()
    }

    /// True when every pair at every level `1..=H` appears in the data.
    pub fn has_full_support(&self) -> bool {
        (1..=self.shape.horizon()).all(|h| self.counts[h].iter().all(|&c| c > 0))
    }

    /// Empirical marginal `d_h^D`.
    pub fn data_distribution(&self, h: usize) -> Vec<f64> {
        self.counts[h]
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }

    pub fn reward_hat(&self, h: usize, pair: usize) -> Option<f64> {
        self.reward_hat[h][pair]
    }

    pub fn transition_row(&self, h: usize, pair: usize) -> Option<&[f64]> {
        let next = self.shape.num_states(h + 1);
        self.is_visited(h, pair)
            .then(|| &self.transition_hat[h][pair * next..(pair + 1) * next])
    }

    /// Bellman evaluation of `pi` in the empirical model; unvisited pairs get 0.
    pub fn exact_q(&self, pi: &Policy) -> Result<QTable> {
        pi.validate(&self.shape)?;
        let shape = &self.shape;
        let horizon = shape.horizon();
        let mut levels = vec![Vec::new(); horizon + 1];
        for h in (0..=horizon).rev() {
            let next_values: Vec<f64> = if h < horizon {
                let na = shape.num_actions(h + 1);
                (0..shape.num_states(h + 1))
                    .map(|s| {
                        pi.dist(h + 1, s)
                            .iter()
                            .zip(&levels[h + 1][s * na..(s + 1) * na])
                            .map(|(p, q): (&f64, &f64)| p * q)
                            .sum()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            levels[h] = (0..shape.num_pairs(h))
                .map(|pair| match self.reward_hat(h, pair) {
                    None => 0.0,
                    Some(r) if h < horizon => {
                        let row = self.transition_row(h, pair).expect("visited");
                        r + row
                            .iter()
                            .zip(&next_values)
                            .map(|(p, v)| p * v)
                            .sum::<f64>()
                    }
                    Some(r) => r,
                })
                .collect();
        }
        Ok(QTable { levels })
    }

    /// Occupancy of `pi` in the empirical model. Mass arriving at unvisited
    /// pairs is recorded there but not propagated further.
    pub fn exact_occupancy(&self, pi: &Policy) -> Result<Occupancy> {
        pi.validate(&self.shape)?;
        let shape = &self.shape;
        let mut levels = vec![vec![1.0]];
        for h in 0..shape.horizon() {
            let mut state_mass = vec![0.0; shape.num_states(h + 1)];
            for (pair, &d) in levels[h].iter().enumerate() {
                if let Some(row) = self.transition_row(h, pair) {
                    for (s, &p) in row.iter().enumerate() {
                        state_mass[s] += d * p;
                    }
                }
            }
            let next = state_mass
                .iter()
                .enumerate()
                .flat_map(|(s, &m)| pi.dist(h + 1, s).iter().map(move |q| m * q))
                .collect();
            levels.push(next);
        }
        Ok(Occupancy { levels })
    }

    /// Certainty-equivalence return of `pi`.
    pub fn exact_return(&self, pi: &Policy) -> Result<f64> {
        Ok(self.exact_q(pi)?.levels[0][0])
    }
}

//! Attention map reuse across consecutive layers.

use std::fmt;

use crate::error::{config, Result};
use crate::layers::{build, LayerShape, ModelConfig, ModelWeights, RunOptions};
use crate::profile::{AttentionCounter, NoProbe};
use crate::tensor::Matrix;

/// One group: the leader computes the maps, members reuse them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReuseGroup {
    pub leader: usize,
    pub members: Vec<usize>,
}

impl ReuseGroup {
    pub fn size(&self) -> usize {
        1 + self.members.len()
    }
}

/// What a layer does with attention maps under a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leader { group: usize, followers: usize },
    Follower { group: usize },
}

/// Partition of the layers into consecutive reuse groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReuseSchedule {
    groups: Vec<ReuseGroup>,
    roles: Vec<Role>,
}

impl ReuseSchedule {
    /// Builds a schedule from explicit groups, e.g. `[[0, 1, 2], [3]]`.
    pub fn from_groups(groups: &[Vec<usize>], num_layers: usize) -> Result<Self> {
        let mut next = 0;
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            if g.is_empty() {
                return config("reuse group is empty");
            }
            let expected: Vec<usize> = (next..next + g.len()).collect();
            if *g != expected {
                return config(format!(
                    "reuse group {g:?} must be the consecutive layers {expected:?}"
                ));
            }
            out.push(ReuseGroup {
                leader: g[0],
                members: g[1..].to_vec(),
            });
            next += g.len();
        }
        if next != num_layers {
            return config(format!(
                "reuse groups cover {next} layers, model has {num_layers}"
            ));
        }
        let mut roles = Vec::with_capacity(num_layers);
        for (i, g) in out.iter().enumerate() {
            roles.push(Role::Leader {
                group: i,
                followers: g.members.len(),
            });
            roles.extend(g.members.iter().map(|_| Role::Follower { group: i }));
        }
        Ok(Self { groups: out, roles })
    }

    /// `B` singleton groups.
    pub fn baseline(num_layers: usize) -> Self {
        let groups: Vec<Vec<usize>> = (0..num_layers).map(|i| vec![i]).collect();
        Self::from_groups(&groups, num_layers).expect("singletons partition the layers")
    }

    pub fn groups(&self) -> &[ReuseGroup] {
        &self.groups
    }

    pub fn num_layers(&self) -> usize {
        self.roles.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// `M` when every group has the same size.
    pub fn group_size(&self) -> Option<usize> {
        let m = self.groups[0].size();
        self.groups.iter().all(|g| g.size() == m).then_some(m)
    }

    pub fn role(&self, layer: usize) -> Role {
        self.roles[layer]
    }

    pub fn is_leader(&self, layer: usize) -> bool {
        matches!(self.roles[layer], Role::Leader { .. })
    }

    pub fn leaders(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().map(|g| g.leader)
    }

    pub fn groups_as_lists(&self) -> Vec<Vec<usize>> {
        self.groups
            .iter()
            .map(|g| {
                std::iter::once(g.leader)
                    .chain(g.members.iter().copied())
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for ReuseSchedule {
    /// `AxB` for uniform schedules, the group list otherwise.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.group_size() {
            Some(m) => write!(f, "{m}x{}", self.group_count()),
            None => write!(f, "{:?}", self.groups_as_lists()),
        }
    }
}

/// Parses `"AxB"`: `B` groups of `A` consecutive layers.
pub fn parse_reuse_config(text: &str, num_layers: usize) -> Result<ReuseSchedule> {
    let parsed = text.trim().split_once(['x', 'X']).and_then(|(a, b)| {
        Some((
            a.trim().parse::<usize>().ok()?,
            b.trim().parse::<usize>().ok()?,
        ))
    });
    let Some((a, b)) = parsed.filter(|&(a, b)| a > 0 && b > 0) else {
        return config(format!(
            "reuse config {text:?} is not of the form AxB with positive integers"
        ));
    };
    if a * b != num_layers {
        return config(format!(
            "reuse config {a}x{b} covers {} layers, model has L = {num_layers}",
            a * b
        ));
    }
    let groups: Vec<Vec<usize>> = (0..b).map(|g| (g * a..(g + 1) * a).collect()).collect();
    ReuseSchedule::from_groups(&groups, num_layers)
}

/// Freshly initialized weights for a reuse model: values and the output
/// projection doubled in every layer, no query/key/positional/persistent-key
/// parameters in followers.
pub fn build_reuse_model(cfg: &ModelConfig, schedule: &ReuseSchedule) -> Result<ModelWeights> {
    let cfg = ModelConfig {
        value_mult: 2,
        ..cfg.clone()
    };
    cfg.validate()?;
    if schedule.num_layers() != cfg.num_layers {
        return config(format!(
            "schedule covers {} layers, config has L = {}",
            schedule.num_layers(),
            cfg.num_layers
        ));
    }
    let shapes: Vec<LayerShape> = (0..cfg.num_layers)
        .map(|i| LayerShape {
            heads: cfg.heads,
            computes_map: schedule.is_leader(i),
        })
        .collect();
    Ok(build(&cfg, &shapes, true))
}

/// Stacked forward pass in which followers apply their leader's maps to
/// their own values.
pub fn reuse_forward(
    weights: &ModelWeights,
    schedule: &ReuseSchedule,
    x: &Matrix,
    counter: &mut AttentionCounter,
) -> Result<Matrix> {
    let opts = RunOptions {
        schedule: Some(schedule),
        ..RunOptions::default()
    };
    weights.run(x, &opts, counter, &mut NoProbe)
}

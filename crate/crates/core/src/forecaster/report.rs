use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: String,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub trainable_fraction: f64,
    pub groups: Vec<GroupCount>,
}

/// Group of a parameter by name.
pub fn group_of(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else if name.starts_with("patch.") {
        "patch_embedder"
    } else if name == "tpc.ts_tokens" {
        "ts_tokens"
    } else if name.starts_with("tpc.") {
        "tpc"
    } else if name.starts_with("head.") {
        "output_head"
    } else if name.starts_with("lora.") {
        "lora"
    } else {
        "other"
    }
}

pub const GROUPS: [&str; 7] = [
    "backbone",
    "patch_embedder",
    "ts_tokens",
    "tpc",
    "output_head",
    "lora",
    "other",
];

/// Exact counts per group; groups with no parameters are omitted.
pub fn param_report(store: &ParamStore) -> ParamReport {
    let mut groups: Vec<GroupCount> = GROUPS
        .iter()
        .map(|g| GroupCount {
            group: g.to_string(),
            total: 0,
            trainable: 0,
        })
        .collect();
    for (_, p) in store.iter() {
        let gi = GROUPS.iter().position(|g| *g == group_of(&p.name)).expect("known group");
        groups[gi].total += p.value.numel();
        if p.trainable {
            groups[gi].trainable += p.value.numel();
        }
    }
    groups.retain(|g| g.total > 0);
    let total = store.total_count();
    let trainable = store.trainable_count();
    ParamReport {
        total,
        trainable,
        trainable_fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        groups,
    }
}

impl ParamReport {
    pub fn group(&self, name: &str) -> Option<&GroupCount> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>10}\n", "group", "total", "trainable");
        for g in &self.groups {
            s += &format!("{:<16} {:>10} {:>10}\n", g.group, g.total, g.trainable);
        }
        s += &format!("{:<16} {:>10} {:>10}\n", "all", self.total, self.trainable);
        s += &format!("trainable fraction: {:.4}\n", self.trainable_fraction);
        s
    }
}

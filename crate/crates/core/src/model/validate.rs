use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{is_valid_affinity, parse_resource, BackendKind, EXTERNAL_STORE};
use crate::manifest::WorkloadManifest;

/// One broken rule, naming the offending entity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl Violation {
    fn new(entity: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn is_token(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

/// Checks every type invariant and cross-reference of a manifest. Returns an
/// empty list iff the manifest is valid.
pub fn validate_manifest(m: &WorkloadManifest) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut backends = BTreeSet::new();
    let mut pilot_ids = BTreeSet::new();
    for p in &m.pilots {
        let who = format!("pilot {}", p.id);
        if !is_token(p.id.as_str()) {
            out.push(Violation::new(&who, "id must be a non-empty token"));
        }
        if !pilot_ids.insert(p.id.as_str()) {
            out.push(Violation::new(&who, "duplicate pilot id"));
        }
        if p.id.as_str() == EXTERNAL_STORE {
            out.push(Violation::new(&who, "id `external` is reserved"));
        }
        if p.cores < 1 {
            out.push(Violation::new(&who, "cores ≥ 1"));
        }
        if p.walltime_s < 1 {
            out.push(Violation::new(&who, "walltime_s ≥ 1"));
        }
        if !is_valid_affinity(&p.affinity) {
            out.push(Violation::new(&who, format!("invalid affinity label `{}`", p.affinity)));
        }
        match parse_resource(&p.resource) {
            Some((kind, _)) => {
                backends.insert(kind);
            }
            None => out.push(Violation::new(
                &who,
                format!(
                    "unsupported resource `{}` (expected local:// or sim://<site>)",
                    p.resource
                ),
            )),
        }
    }
    if backends.len() > 1 {
        out.push(Violation::new("manifest", "pilots mix sim:// and local:// resources"));
    }
    let sim = backends.contains(&BackendKind::Sim);

    // DU ids produced by each CU, for the single-producer rule
    let mut producers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for cu in &m.compute_units {
        for d in &cu.output_data {
            producers.entry(d.as_str()).or_default().push(cu.id.as_str());
        }
    }

    let mut du_ids = BTreeSet::new();
    for du in &m.data_units {
        let who = format!("du {}", du.id);
        if !is_token(du.id.as_str()) {
            out.push(Violation::new(&who, "id must be a non-empty token"));
        }
        if !du_ids.insert(du.id.as_str()) {
            out.push(Violation::new(&who, "duplicate data unit id"));
        }
        if du.files.is_empty() {
            out.push(Violation::new(&who, "files must be non-empty"));
        }
        for f in &du.files {
            let path = std::path::Path::new(f);
            if f.is_empty()
                || path.is_absolute()
                || path.components().any(|c| matches!(c, std::path::Component::ParentDir))
            {
                out.push(Violation::new(&who, format!("file `{f}` must be a relative path")));
            }
        }
        if !du.affinity.is_empty() && !is_valid_affinity(&du.affinity) {
            out.push(Violation::new(
                &who,
                format!("invalid affinity label `{}`", du.affinity),
            ));
        }
        if sim && du.size_bytes.is_none() {
            out.push(Violation::new(&who, "size_bytes required with sim pilots"));
        }
        let produced_by = producers.get(du.id.as_str()).map_or(&[][..], |v| v.as_slice());
        match du.initial_store.as_deref() {
            None => match produced_by.len() {
                0 => out.push(Violation::new(
                    &who,
                    "no initial_store and not produced by any compute unit",
                )),
                1 => {}
                _ => out.push(Violation::new(&who, "produced by more than one compute unit")),
            },
            Some(store) => {
                if store != EXTERNAL_STORE && !pilot_ids.contains(store) {
                    out.push(Violation::new(&who, format!("unresolved initial_store \"{store}\"")));
                }
                if !produced_by.is_empty() {
                    out.push(Violation::new(
                        &who,
                        "output data unit must not declare an initial_store",
                    ));
                }
            }
        }
    }

    let mut cu_ids = BTreeSet::new();
    for cu in &m.compute_units {
        let who = format!("cu {}", cu.id);
        if !is_token(cu.id.as_str()) {
            out.push(Violation::new(&who, "id must be a non-empty token"));
        }
        if !cu_ids.insert(cu.id.as_str()) {
            out.push(Violation::new(&who, "duplicate compute unit id"));
        }
        if cu.cores < 1 {
            out.push(Violation::new(&who, "cores ≥ 1"));
        }
        if cu.executable.is_empty() {
            out.push(Violation::new(&who, "executable must be non-empty"));
        }
        for d in cu.input_data.iter().chain(&cu.output_data) {
            if !du_ids.contains(d.as_str()) {
                out.push(Violation::new(&who, format!("unresolved DU \"{d}\"")));
            }
        }
        if cu.input_data.iter().any(|d| cu.output_data.contains(d)) {
            out.push(Violation::new(&who, "a data unit cannot be both input and output"));
        }
        match cu.sim_duration_s {
            Some(d) if !(d.is_finite() && d > 0.0) => out.push(Violation::new(&who, "sim_duration_s > 0")),
            None if sim => out.push(Violation::new(&who, "sim_duration_s required with sim pilots")),
            _ => {}
        }
    }

    if let Some(bw) = &m.bandwidth {
        for problem in bw.problems() {
            out.push(Violation::new("bandwidth", problem));
        }
    }
    if m.t_max_s == Some(0) {
        out.push(Violation::new("manifest", "t_max_s must be positive"));
    }

    if let Some(cu) = dependency_cycle(m) {
        out.push(Violation::new(format!("cu {cu}"), "data dependency cycle"));
    }

    out
}

/// A CU on a cycle of "needs an output of" edges, if any.
fn dependency_cycle(m: &WorkloadManifest) -> Option<String> {
    let producer: BTreeMap<&str, &str> = m
        .compute_units
        .iter()
        .flat_map(|cu| cu.output_data.iter().map(move |d| (d.as_str(), cu.id.as_str())))
        .collect();
    let deps: BTreeMap<&str, Vec<&str>> = m
        .compute_units
        .iter()
        .map(|cu| {
            let ds = cu
                .input_data
                .iter()
                .filter_map(|d| producer.get(d.as_str()).copied())
                .collect();
            (cu.id.as_str(), ds)
        })
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit<'a>(
        n: &'a str,
        deps: &BTreeMap<&'a str, Vec<&'a str>>,
        marks: &mut BTreeMap<&'a str, Mark>,
    ) -> Option<&'a str> {
        match marks.get(n) {
            Some(Mark::Active) => return Some(n),
            Some(Mark::Done) => return None,
            None => {}
        }
        marks.insert(n, Mark::Active);
        for &d in deps.get(n).into_iter().flatten() {
            if let Some(c) = visit(d, deps, marks) {
                return Some(c);
            }
        }
        marks.insert(n, Mark::Done);
        None
    }

    let mut marks = BTreeMap::new();
    deps.keys().find_map(|n| visit(n, &deps, &mut marks)).map(str::to_owned)
}

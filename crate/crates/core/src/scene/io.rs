//! JSON-lines scene files, one scene per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{compute_attributes, PredicateMatrix, SceneGraphSample, SceneInstance, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub n_obj: usize,
    pub n_rel: usize,
    /// Reject unknown fields instead of warning about them.
    pub strict: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    split: Split,
    instances: Vec<InstanceRecord>,
    relations: Vec<RelationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual_features: Option<Vec<Vec<f64>>>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    id: u32,
    class: usize,
    points: Vec<[f64; 3]>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationRecord {
    subject_id: u32,
    object_id: u32,
    predicates: Vec<usize>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

pub fn load_scene_file(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Vec<SceneGraphSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_lines(&text, opts)
}

pub fn parse_scene_lines(text: &str, opts: LoadOptions) -> Result<Vec<SceneGraphSample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 1;
        let record: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Validation {
            scene: scene_id_hint(line),
            line: line_no,
            detail: format!("malformed record: {e}"),
        })?;
        out.push(validate(record, line_no, opts)?);
    }
    Ok(out)
}

fn scene_id_hint(line: &str) -> String {
    serde_json::from_str::<Value>(line)
        .ok()
        .and_then(|v| v.get("scene_id").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_else(|| "<unknown>".to_owned())
}

fn validate(rec: SceneRecord, line: usize, opts: LoadOptions) -> Result<SceneGraphSample> {
    let scene = rec.scene_id.clone();
    let fail = |detail: String| Error::Validation {
        scene: scene.clone(),
        line,
        detail,
    };

    let mut unknown: Vec<String> = rec.extra.keys().cloned().collect();
    unknown.extend(rec.instances.iter().flat_map(|i| i.extra.keys().map(|k| format!("instances.{k}"))));
    unknown.extend(rec.relations.iter().flat_map(|r| r.extra.keys().map(|k| format!("relations.{k}"))));
    if !unknown.is_empty() {
        let list = unknown.into_iter().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>().join(", ");
        if opts.strict {
            return Err(fail(format!("unknown fields: {list}")));
        }
        log::warn!("scene '{scene}' (line {line}): ignoring unknown fields: {list}");
    }

    let mut slot: HashMap<u32, usize> = HashMap::new();
    let mut instances = Vec::with_capacity(rec.instances.len());
    for inst in rec.instances {
        if slot.insert(inst.id, instances.len()).is_some() {
            return Err(fail(format!("duplicate instance id {}", inst.id)));
        }
        if inst.class >= opts.n_obj {
            return Err(fail(format!(
                "instance {} class {} out of range [0, {})",
                inst.id, inst.class, opts.n_obj
            )));
        }
        if inst.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail(format!("instance {} has non-finite coordinates", inst.id)));
        }
        let instance = SceneInstance {
            id: inst.id,
            points: inst.points,
            class: inst.class,
        };
        compute_attributes(&instance).map_err(|e| fail(e.to_string()))?;
        instances.push(instance);
    }
    if instances.is_empty() {
        return Err(fail("scene has no instances".into()));
    }

    let mut predicates = PredicateMatrix::new(instances.len(), opts.n_rel);
    for rel in rec.relations {
        let lookup = |id: u32| {
            slot.get(&id)
                .copied()
                .ok_or_else(|| fail(format!("relation references missing instance id {id}")))
        };
        let (i, j) = (lookup(rel.subject_id)?, lookup(rel.object_id)?);
        if i == j {
            return Err(fail(format!("self-relation on instance {}", rel.subject_id)));
        }
        if rel.predicates.is_empty() {
            return Err(fail(format!(
                "relation {} -> {} lists no predicates",
                rel.subject_id, rel.object_id
            )));
        }
        for p in rel.predicates {
            if p >= opts.n_rel {
                return Err(fail(format!("predicate {p} out of range [0, {})", opts.n_rel)));
            }
            predicates.set(i, j, p)?;
        }
    }

    if let Some(vis) = &rec.visual_features {
        if vis.len() != instances.len() {
            return Err(fail(format!(
                "visual_features has {} rows for {} instances",
                vis.len(),
                instances.len()
            )));
        }
        let width = vis[0].len();
        if width == 0 || vis.iter().any(|r| r.len() != width) {
            return Err(fail("visual_features rows must share a positive width".into()));
        }
        if vis.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("visual_features contains non-finite values".into()));
        }
    }

    Ok(SceneGraphSample {
        scene_id: rec.scene_id,
        split: rec.split,
        instances,
        predicates,
        visual_features: rec.visual_features,
    })
}

/// Serializes one scene as a single JSON line (no trailing newline).
pub fn scene_to_line(sample: &SceneGraphSample) -> Result<String> {
    let k = sample.k();
    let mut relations = Vec::new();
    for (i, j) in super::edge_pairs(k) {
        let labels = sample.predicates.labels(i, j);
        if !labels.is_empty() {
            relations.push(RelationRecord {
                subject_id: sample.instances[i].id,
                object_id: sample.instances[j].id,
                predicates: labels,
                extra: BTreeMap::new(),
            });
        }
    }
    let rec = SceneRecord {
        scene_id: sample.scene_id.clone(),
        split: sample.split,
        instances: sample
            .instances
            .iter()
            .map(|i| InstanceRecord {
                id: i.id,
                class: i.class,
                points: i.points.clone(),
                extra: BTreeMap::new(),
            })
            .collect(),
        relations,
        visual_features: sample.visual_features.clone(),
        extra: BTreeMap::new(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn write_scene_file(path: impl AsRef<Path>, samples: &[SceneGraphSample]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in samples {
        text.push_str(&scene_to_line(s)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTS: LoadOptions = LoadOptions {
        n_obj: 4,
        n_rel: 3,
        strict: true,
    };

    fn line(relations: &str) -> String {
        format!(
            r#"{{"scene_id":"s0","split":"train","instances":[{{"id":1,"class":0,"points":[[0,0,0],[1,1,1]]}},{{"id":2,"class":3,"points":[[2,0,0],[3,1,1]]}}],"relations":{relations}}}"#
        )
    }

    #[test]
    fn well_formed_scene() {
        let s = parse_scene_lines(&line(r#"[{"subject_id":1,"object_id":2,"predicates":[2]}]"#), OPTS).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].k(), 2);
        assert_eq!(s[0].predicates.relations(), vec![(0, 2, 1)]);
    }

    #[test]
    fn missing_instance_reference() {
        let err = parse_scene_lines(&line(r#"[{"subject_id":1,"object_id":99,"predicates":[0]}]"#), OPTS)
            .unwrap_err();
        match err {
            Error::Validation { scene, line, detail } => {
                assert_eq!(scene, "s0");
                assert_eq!(line, 1);
                assert!(detail.contains("99"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predicate_out_of_range() {
        let err = parse_scene_lines(&line(r#"[{"subject_id":1,"object_id":2,"predicates":[3]}]"#), OPTS)
            .unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn self_relation_rejected() {
        assert!(parse_scene_lines(&line(r#"[{"subject_id":1,"object_id":1,"predicates":[0]}]"#), OPTS).is_err());
    }

    #[test]
    fn duplicate_instance_id_rejected() {
        let text = r#"{"scene_id":"d","split":"train","instances":[{"id":1,"class":0,"points":[[0,0,0]]},{"id":1,"class":0,"points":[[0,0,0]]}],"relations":[]}"#;
        let err = parse_scene_lines(text, OPTS).unwrap_err();
        assert!(err.to_string().contains("duplicate instance id"));
    }

    #[test]
    fn class_out_of_range() {
        let text = r#"{"scene_id":"c","split":"train","instances":[{"id":1,"class":4,"points":[[0,0,0]]}],"relations":[]}"#;
        assert!(parse_scene_lines(text, OPTS).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{\"scene_id\":\"bad\"", line("[]"));
        match parse_scene_lines(&text, OPTS).unwrap_err() {
            Error::Validation { scene, line, .. } => {
                assert_eq!(line, 2);
                assert_eq!(scene, "<unknown>");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_strict_vs_lenient() {
        let text = line("[]").replacen("\"split\"", "\"color\":1,\"split\"", 1);
        assert!(parse_scene_lines(&text, OPTS).is_err());
        let lenient = LoadOptions { strict: false, ..OPTS };
        assert_eq!(parse_scene_lines(&text, lenient).unwrap().len(), 1);
    }

    #[test]
    fn write_then_load_round_trips() {
        let s = parse_scene_lines(&line(r#"[{"subject_id":2,"object_id":1,"predicates":[0,1]}]"#), OPTS).unwrap();
        let text = scene_to_line(&s[0]).unwrap();
        let back = parse_scene_lines(&text, OPTS).unwrap();
        assert_eq!(back, s);
    }
}

//! Model JSON schema, ground-truth JSON, and the trace CSV. The schema
//! is a stable contract: ground-truth reads reject unknown fields so
//! that drift is caught instead of silently ignored.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::em::{EMConfig, EMTrace, InitMethod};
use crate::error::{Error, Result};
use crate::labeling::{PartLabeling, TransformSet};
use crate::rigid::RigidTransform;
use crate::skeleton::{ArticulatedModel, Joint};

use super::write_atomic;

#[derive(Debug, Serialize, Deserialize)]
struct TransformJson {
    /// [w, x, y, z]
    quaternion: [f64; 4],
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct PartJson {
    id: usize,
    vertex_indices: Vec<usize>,
    /// One transform per instance.
    transforms: Vec<TransformJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JointJson {
    parts: [usize; 2],
    position: [f64; 3],
    residual: f64,
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq)]
pub struct ParamsJson {
    pub initial_part_count: usize,
    pub init_method: String,
    pub tau: f64,
    pub sigma_multiple: f64,
    pub delta_start_frac: f64,
    pub delta_growth: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub gamma: f64,
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub template: String,
    pub instances: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelJson {
    parts: Vec<PartJson>,
    joints: Vec<JointJson>,
    params: ParamsJson,
    meta: ModelMeta,
}

impl From<&EMConfig> for ParamsJson {
    fn from(c: &EMConfig) -> Self {
        ParamsJson {
            initial_part_count: c.initial_part_count,
            init_method: match c.init_method {
                InitMethod::Patches => "patches".into(),
                InitMethod::Clustering => "cluster".into(),
            },
            tau: c.tau,
            sigma_multiple: c.sigma_multiple,
            delta_start_frac: c.delta_start_frac,
            delta_growth: c.delta_growth,
            max_iterations: c.max_iterations,
            epsilon: c.epsilon,
            gamma: c.gamma,
        }
    }
}

/// A model reloaded from JSON. Adjacency is not serialized; joints carry
/// the pairs.
#[derive(Debug)]
pub struct LoadedModel {
    pub labeling: PartLabeling,
    pub transforms: TransformSet,
    pub joints: Vec<Joint>,
    pub params: ParamsJson,
    pub meta: ModelMeta,
}

/// Writes the model JSON atomically.
pub fn save_model(
    model: &ArticulatedModel,
    config: &EMConfig,
    meta: &ModelMeta,
    path: &Path,
) -> Result<()> {
    let parts = (0..model.labeling.part_count())
        .map(|p| PartJson {
            id: p,
            vertex_indices: model.labeling.part_vertices(p),
            transforms: (0..model.transforms.instance_count())
                .map(|i| {
                    let t = model.transforms.get(i, p);
                    TransformJson {
                        quaternion: t.quaternion_wxyz(),
                        translation: t.translation().into(),
                    }
                })
                .collect(),
        })
        .collect();
    let joints = model
        .joints
        .iter()
        .map(|j| JointJson {
            parts: [j.parts.0, j.parts.1],
            position: j.position.coords.into(),
            residual: j.residual,
        })
        .collect();
    let doc = ModelJson {
        parts,
        joints,
        params: config.into(),
        meta: meta.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let doc: ModelJson = serde_json::from_slice(&std::fs::read(path)?)?;
    let vertex_count = doc
        .parts
        .iter()
        .map(|p| p.vertex_indices.len())
        .sum::<usize>();
    let part_count = doc.parts.len();
    let mut labels = vec![usize::MAX; vertex_count];
    for part in &doc.parts {
        for &v in &part.vertex_indices {
            if v >= vertex_count || labels[v] != usize::MAX {
                return Err(Error::Structural(format!(
                    "part {} repeats or exceeds vertex index {v}",
                    part.id
                )));
            }
            labels[v] = part.id;
        }
    }
    let labeling = PartLabeling::new(labels, part_count)?;
    let instance_count = doc.parts.first().map_or(0, |p| p.transforms.len());
    let transforms = TransformSet::new(
        (0..instance_count)
            .map(|i| {
                doc.parts
                    .iter()
                    .map(|p| {
                        let t = &p.transforms[i];
                        RigidTransform::from_quaternion(
                            t.quaternion[0],
                            t.quaternion[1],
                            t.quaternion[2],
                            t.quaternion[3],
                            Vector3::from(t.translation),
                        )
                    })
                    .collect()
            })
            .collect(),
    )?;
    let joints = doc
        .joints
        .iter()
        .map(|j| Joint {
            parts: (j.parts[0], j.parts[1]),
            position: Point3::from(j.position),
            residual: j.residual,
            ambiguous: false,
        })
        .collect();
    Ok(LoadedModel {
        labeling,
        transforms,
        joints,
        params: doc.params,
        meta: doc.meta,
    })
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TruthJoint {
    pub parts: [usize; 2],
    pub position: [f64; 3],
}

/// Ground truth emitted by `synth` and consumed by `eval`. Unknown
/// fields are rejected on read.
#[derive(Debug, Serialize, Deserialize, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub labels: Vec<usize>,
    pub part_count: usize,
    pub joints: Vec<TruthJoint>,
    /// Vertices near true part boundaries, excluded from label scoring.
    pub boundary_band: Vec<usize>,
}

pub fn save_ground_truth(truth: &GroundTruthFile, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(truth)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// One CSV row per EM iteration.
pub fn write_trace_csv(trace: &EMTrace, path: &Path) -> Result<()> {
    let mut out = String::from("iteration,delta,objective,part_count,was_integral\n");
    for (i, it) in trace.iterations.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i, it.delta, it.objective, it.part_count, it.was_integral
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Optional artifacts written next to model.json by `export_model`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExportArtifacts {
    /// Per-part colored template mesh (parts.ply).
    pub colored_mesh: bool,
    /// Per-iteration trace CSV (trace.csv).
    pub trace_csv: bool,
}

/// Writes model.json plus optional colored mesh and trace CSV into
/// `out_dir`.
pub fn export_model(
    model: &ArticulatedModel,
    trace: &EMTrace,
    config: &EMConfig,
    meta: &ModelMeta,
    template: &crate::mesh::Mesh,
    out_dir: &Path,
    artifacts: ExportArtifacts,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    save_model(model, config, meta, &out_dir.join("model.json"))?;
    if artifacts.colored_mesh {
        super::write_colored_ply(
            &out_dir.join("parts.ply"),
            template.points(),
            template.triangles(),
            model.labeling.labels(),
        )?;
    }
    if artifacts.trace_csv {
        write_trace_csv(trace, &out_dir.join("trace.csv"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;

    fn toy_model() -> (ArticulatedModel, EMConfig, Mesh) {
        let points = (0..6)
            .map(|i| Point3::new(i as f64, 0.25 * i as f64, 0.0))
            .collect();
        let edges = (0..5).map(|i| (i, i + 1)).collect();
        let mesh = Mesh::from_edge_list(points, edges);
        let labeling = PartLabeling::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let transforms = TransformSet::new(
            (0..2)
                .map(|i| {
                    (0..3)
                        .map(|p| {
                            RigidTransform::from_rotation_vector(
                                Vector3::new(0.1 * i as f64, 0.2 * p as f64, 0.05),
                                Vector3::new(p as f64, i as f64, 0.5),
                            )
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let joints = vec![
            Joint {
                parts: (0, 1),
                position: Point3::new(1.5, 0.375, 0.0),
                residual: 0.01,
                ambiguous: false,
            },
            Joint {
                parts: (1, 2),
                position: Point3::new(3.5, 0.875, 0.0),
                residual: 0.02,
                ambiguous: false,
            },
        ];
        let model = ArticulatedModel {
            labeling,
            transforms,
            adjacency: vec![((0, 1), 1), ((1, 2), 1)],
            joints,
        };
        (model, EMConfig::new(3, 7), mesh)
    }

    #[test]
    fn single_part_model_serializes_with_no_joints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = ArticulatedModel {
            labeling: PartLabeling::new(vec![0, 0, 0], 1).unwrap(),
            transforms: TransformSet::uniform(1, 1, RigidTransform::identity()).unwrap(),
            adjacency: vec![],
            joints: vec![],
        };
        save_model(&model, &EMConfig::new(1, 0), &ModelMeta::default(), &path).unwrap();
        let doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(doc["parts"].as_array().unwrap().len(), 1);
        assert_eq!(doc["joints"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn model_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let (model, config, _) = toy_model();
        save_model(&model, &config, &ModelMeta::default(), &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.labeling.labels(), model.labeling.labels());
        for i in 0..2 {
            for p in 0..3 {
                let (a, b) = (loaded.transforms.get(i, p), model.transforms.get(i, p));
                // Serialized digits are exact; reload renormalizes the
                // quaternion, which may shift the last ulp.
                for (x, y) in a.quaternion_wxyz().iter().zip(b.quaternion_wxyz()) {
                    assert!((x - y).abs() <= 1e-15);
                }
                assert_eq!(a.translation(), b.translation());
            }
        }
        assert_eq!(loaded.joints.len(), 2);
        for (a, b) in loaded.joints.iter().zip(&model.joints) {
            assert_eq!(a.parts, b.parts);
            assert_eq!(a.position, b.position);
            assert_eq!(a.residual, b.residual);
        }
        assert_eq!(loaded.params, ParamsJson::from(&config));
    }

    #[test]
    fn ground_truth_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        std::fs::write(
            &path,
            r#"{"labels":[0],"part_count":1,"joints":[],"boundary_band":[],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(load_ground_truth(&path), Err(Error::Json(_))));
    }

    #[test]
    fn ground_truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        let truth = GroundTruthFile {
            labels: vec![0, 0, 1, 1],
            part_count: 2,
            joints: vec![TruthJoint {
                parts: [0, 1],
                position: [1.0, 0.0, 0.5],
            }],
            boundary_band: vec![1, 2],
        };
        save_ground_truth(&truth, &path).unwrap();
        assert_eq!(load_ground_truth(&path).unwrap(), truth);
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        use crate::em::EMIteration;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = EMTrace {
            iterations: (0..4)
                .map(|i| EMIteration {
                    delta: 0.1 * (i + 1) as f64,
                    objective_before: -1.0,
                    objective_after_e: -0.5,
                    objective: -0.25 * i as f64,
                    part_count: 3,
                    was_integral: true,
                    part_sizes: vec![2, 2, 2],
                })
                .collect(),
            converged: true,
        };
        write_trace_csv(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("iteration,delta,objective,part_count,was_integral\n"));
    }

    #[test]
    fn export_writes_requested_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (model, config, mesh) = toy_model();
        let trace = EMTrace {
            iterations: vec![],
            converged: true,
        };
        export_model(
            &model,
            &trace,
            &config,
            &ModelMeta::default(),
            &mesh,
            dir.path(),
            ExportArtifacts {
                colored_mesh: true,
                trace_csv: true,
            },
        )
        .unwrap();
        assert!(dir.path().join("model.json").exists());
        assert!(dir.path().join("parts.ply").exists());
        assert!(dir.path().join("trace.csv").exists());
    }
}

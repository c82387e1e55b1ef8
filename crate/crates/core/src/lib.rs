//! Recovery of articulated rigid-part models from registered mesh
//! instances: part segmentation, per-instance rigid transforms and joint
//! locations, estimated jointly by EM with an annealed LP-relaxation
//! E-step.

pub mod em;
pub mod error;
pub mod io;
pub mod labeling;
pub mod lp;
pub mod mesh;
pub mod rigid;
pub mod skeleton;
pub mod synth;

pub use em::{initialize, m_step, run_em, run_em_from, EMConfig, EMIteration, EMTrace, InitMethod};
pub use error::{Error, Result};
pub use labeling::{
    build_labeling_lp, e_step, enforce_hard_contiguity, map_labeling, objective, singleton_cost,
    EStepOutcome, ModelParams, PartLabeling, TransformSet,
};
pub use lp::{kt_round, solve_lp, LinearProgram, LpSolution, LpStatus, Relation};
pub use mesh::{build_edges, subdivide_patches, Mesh, RegisteredSet};
pub use rigid::{cluster_features, fit_rigid, local_transform, transform_feature, RigidTransform};
pub use skeleton::{
    boundary_centroids, build_skeleton, estimate_joint, joint_objective, part_adjacency,
    ArticulatedModel, Joint,
};

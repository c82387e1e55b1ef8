//! File ingestion and result export: corresponded mesh sets in PLY or
//! OBJ, the model JSON schema, colored per-part meshes, and trace CSV.

mod eval;
mod model;
mod obj;
mod ply;

pub use eval::{evaluate, EvalReport};
pub use model::{
    export_model, load_ground_truth, load_model, save_ground_truth, save_model, write_trace_csv,
    ExportArtifacts, GroundTruthFile, LoadedModel, ModelMeta, ParamsJson, TruthJoint,
};
pub use obj::{read_obj, write_obj};
pub use ply::{read_ply, write_colored_ply, write_ply_ascii, write_ply_binary};

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, RegisteredSet};

/// Reads a mesh, dispatching on the file extension (`.ply` or `.obj`).
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => read_ply(path),
        Some(e) if e.eq_ignore_ascii_case("obj") => read_obj(path),
        _ => Err(Error::Format {
            file: path.display().to_string(),
            line: 0,
            msg: "unsupported mesh format (expected .ply or .obj)".into(),
        }),
    }
}

/// Loads a template plus instance meshes into a registered set.
/// Correspondence is by vertex order; the template supplies the
/// triangles. Instance triangles that disagree with the template's are
/// ignored with a warning.
pub fn load_registered_set(
    template_path: &Path,
    instance_paths: &[&Path],
) -> Result<RegisteredSet> {
    let template = read_mesh(template_path)?;
    let mut instances = Vec::with_capacity(instance_paths.len());
    for path in instance_paths {
        let inst = read_mesh(path)?;
        if inst.vertex_count() != template.vertex_count() {
            return Err(Error::Correspondence(format!(
                "{} has {} vertices but template {} has {}",
                path.display(),
                inst.vertex_count(),
                template_path.display(),
                template.vertex_count()
            )));
        }
        if !inst.triangles().is_empty() && inst.triangles() != template.triangles() {
            eprintln!(
                "warning: {} carries triangles that differ from the template; ignoring them",
                path.display()
            );
        }
        instances.push(inst.points().to_vec());
    }
    RegisteredSet::new(template, instances)
}

/// Writes `content` to `path` atomically: a temp file in the same
/// directory is renamed into place, so a failed write leaves nothing.
pub(crate) fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, content)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

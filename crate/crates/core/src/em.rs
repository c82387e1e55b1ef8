//! The outer EM loop: initialization, alternating E/M steps, delta
//! annealing, part pruning and trace recording.

use crate::error::{Error, Result};
use crate::labeling::{
    e_step, enforce_hard_contiguity, objective, ModelParams, PartLabeling, TransformSet,
};
use crate::mesh::{subdivide_patches, Mesh, RegisteredSet};
use crate::rigid::{cluster_features, fit_rigid, local_transform, transform_feature};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// Farthest-point surface patches seed the first M-step.
    Patches,
    /// Per-vertex local rigid transforms, k-means clustered.
    Clustering,
}

#[derive(Debug, Clone)]
pub struct EMConfig {
    pub initial_part_count: usize,
    pub init_method: InitMethod,
    pub tau: f64,
    /// sigma = sigma_multiple * mesh resolution at the annealing target.
    pub sigma_multiple: f64,
    /// First delta as a fraction of the target; 1.0 disables annealing.
    pub delta_start_frac: f64,
    /// Geometric growth of delta per iteration until the target.
    pub delta_growth: f64,
    pub max_iterations: usize,
    /// Relative objective change below which a target-delta iteration
    /// counts as converged.
    pub epsilon: f64,
    /// Joint regularization weight, carried through to skeleton fitting.
    pub gamma: f64,
    /// Hop radius of the neighborhoods behind clustering initialization.
    pub hop_radius: usize,
    pub seed: u64,
}

impl EMConfig {
    pub fn new(initial_part_count: usize, seed: u64) -> Self {
        Self {
            initial_part_count,
            init_method: InitMethod::Patches,
            tau: 0.9,
            sigma_multiple: 1.0,
            delta_start_frac: 0.25,
            delta_growth: 1.5,
            max_iterations: 50,
            epsilon: 1e-6,
            gamma: 0.1,
            hop_radius: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.initial_part_count == 0 {
            return Err(Error::Parameter("initial_part_count must be >= 1".into()));
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Parameter(format!(
                "tau must lie in (0.5, 1), got {}",
                self.tau
            )));
        }
        if !self.sigma_multiple.is_finite() || self.sigma_multiple <= 0.0 {
            return Err(Error::Parameter("sigma_multiple must be positive".into()));
        }
        if !(self.delta_start_frac > 0.0 && self.delta_start_frac <= 1.0) {
            return Err(Error::Parameter(
                "delta_start_frac must lie in (0, 1]".into(),
            ));
        }
        if !self.delta_growth.is_finite() || self.delta_growth < 1.0 {
            return Err(Error::Parameter("delta_growth must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be >= 1".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Parameter("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One recorded EM iteration. The three objective values share the
/// iteration's delta, so monotonicity is checkable per stretch.
#[derive(Debug, Clone, PartialEq)]
pub struct EMIteration {
    pub delta: f64,
    pub objective_before: f64,
    pub objective_after_e: f64,
    pub objective: f64,
    pub part_count: usize,
    pub was_integral: bool,
    pub part_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EMTrace {
    pub iterations: Vec<EMIteration>,
    pub converged: bool,
}

/// Per-(instance, part) rigid least-squares fits for a labeling. Parts
/// with degenerate geometry get the fit's fallback transform; empty
/// parts are an error (compact the labeling first).
pub fn m_step(set: &RegisteredSet, labeling: &PartLabeling) -> Result<TransformSet> {
    let p_count = labeling.part_count();
    let mut members = Vec::with_capacity(p_count);
    for p in 0..p_count {
        let verts = labeling.part_vertices(p);
        if verts.is_empty() {
            return Err(Error::Structural(format!("part {p} has no vertices")));
        }
        members.push(verts);
    }
    let n = set.instance_count();
    let flat: Vec<Result<_>> = (0..n * p_count)
        .into_par_iter()
        .map(|idx| {
            let (i, p) = (idx / p_count, idx % p_count);
            let src: Vec<_> = members[p]
                .iter()
                .map(|&v| set.template().points()[v])
                .collect();
            let dst: Vec<_> = members[p].iter().map(|&v| set.instance(i)[v]).collect();
            let weights = vec![1.0; src.len()];
            match fit_rigid(&src, &dst, &weights) {
                Ok((t, _)) => Ok(t),
                Err(Error::DegenerateFit { fallback, .. }) => Ok(fallback),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut grid = vec![Vec::with_capacity(p_count); n];
    for (idx, r) in flat.into_iter().enumerate() {
        grid[idx / p_count].push(r?);
    }
    TransformSet::new(grid)
}

/// Starting labeling and transforms per the configured method. Both end
/// with an M-step so the first E-step sees fitted transforms.
pub fn initialize(
    set: &RegisteredSet,
    mesh: &Mesh,
    config: &EMConfig,
) -> Result<(PartLabeling, TransformSet)> {
    config.validate()?;
    let labeling = match config.init_method {
        InitMethod::Patches => subdivide_patches(mesh, config.initial_part_count, config.seed)?,
        InitMethod::Clustering => {
            let n = set.instance_count();
            let features: Vec<Vec<f64>> = (0..mesh.vertex_count())
                .into_par_iter()
                .map(|j| {
                    let mut f = Vec::with_capacity(6 * n);
                    for i in 0..n {
                        let t = match local_transform(set, i, j, config.hop_radius) {
                            Ok(t) => t,
                            Err(Error::DegenerateFit { fallback, .. }) => fallback,
                            Err(e) => return Err(e),
                        };
                        f.extend_from_slice(&transform_feature(&t));
                    }
                    Ok(f)
                })
                .collect::<Result<_>>()?;
            let labels = cluster_features(&features, config.initial_part_count, config.seed)?;
            let rough = PartLabeling::compacted(labels)?;
            let identity = TransformSet::uniform(
                n,
                rough.part_count(),
                crate::rigid::RigidTransform::identity(),
            )?;
            let (contiguous, _) = enforce_hard_contiguity(&rough, &identity, mesh)?;
            contiguous
        }
    };
    let ts = m_step(set, &labeling)?;
    Ok((labeling, ts))
}

/// Full EM from the configured initialization.
pub fn run_em(
    set: &RegisteredSet,
    mesh: &Mesh,
    config: &EMConfig,
) -> Result<(PartLabeling, TransformSet, EMTrace)> {
    let (labeling, ts) = initialize(set, mesh, config)?;
    run_em_from(set, mesh, config, labeling, ts)
}

/// EM continuation from an explicit starting state. The loop: E-step at
/// the current delta, contiguity split (which also drops empty parts),
/// M-step, then anneal or test convergence. If an E-step's labeling
/// would lower the objective (a rounded fractional solution can), the
/// previous labeling is kept for that iteration.
pub fn run_em_from(
    set: &RegisteredSet,
    mesh: &Mesh,
    config: &EMConfig,
    labeling: PartLabeling,
    ts: TransformSet,
) -> Result<(PartLabeling, TransformSet, EMTrace)> {
    config.validate()?;
    let resolution = mesh.resolution()?;
    let sigma_target_sq = (config.sigma_multiple * resolution).powi(2);
    let target = ModelParams::new(sigma_target_sq, config.tau, config.gamma)?;
    let delta_target = target.delta();
    let s = target.s();

    let mut delta = config.delta_start_frac * delta_target;
    let mut labeling = labeling;
    let mut ts = ts;
    let mut trace = EMTrace::default();

    for iter in 0..config.max_iterations {
        let params = target.with_sigma_sq(delta * s)?;
        let objective_before = objective(set, &ts, &labeling, mesh, &params)?;
        let e = e_step(
            set,
            &ts,
            mesh,
            &params,
            config.seed.wrapping_add(iter as u64),
        )?;
        let (candidate, objective_after_e) = if e.objective >= objective_before {
            (e.labeling, e.objective)
        } else {
            // Keep the incumbent labeling; happens only after rounding.
            (labeling.clone(), objective_before)
        };
        let (split, split_ts) = enforce_hard_contiguity(&candidate, &ts, mesh)?;
        debug_assert!(split_ts.part_count() == split.part_count());
        ts = m_step(set, &split)?;
        let objective_after_m = objective(set, &ts, &split, mesh, &params)?;
        let part_sizes = (0..split.part_count())
            .map(|p| split.part_vertices(p).len())
            .collect();
        trace.iterations.push(EMIteration {
            delta,
            objective_before,
            objective_after_e,
            objective: objective_after_m,
            part_count: split.part_count(),
            was_integral: e.was_integral,
            part_sizes,
        });

        let at_target = delta >= delta_target * (1.0 - 1e-12);
        let labels_unchanged = split.labels() == labeling.labels();
        labeling = split;
        if at_target {
            let rel =
                (objective_after_m - objective_before).abs() / (1.0 + objective_after_m.abs());
            if labels_unchanged || rel < config.epsilon {
                trace.converged = true;
                break;
            }
        } else {
            delta = (delta * config.delta_growth).min(delta_target);
        }
    }
    Ok((labeling, ts, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::singleton_cost;
    use crate::rigid::RigidTransform;
    use crate::synth::{generate, SynthSpec};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data_term(
        set: &RegisteredSet,
        ts: &TransformSet,
        labeling: &PartLabeling,
        params: &ModelParams,
    ) -> f64 {
        (0..set.template().vertex_count())
            .map(|j| singleton_cost(set, ts, j, labeling.labels()[j], params))
            .sum()
    }

    #[test]
    fn m_step_identity_on_identical_instances() {
        let (set, truth) = generate(&SynthSpec::chain(2, 30, vec![vec![0.0]], 0.0, 1)).unwrap();
        let ts = m_step(&set, &truth.labeling).unwrap();
        for i in 0..set.instance_count() {
            for p in 0..2 {
                assert!(ts.get(i, p).rotation_angle() < 1e-9);
                assert!(ts.get(i, p).translation().norm() < 1e-9);
            }
        }
    }

    #[test]
    fn m_step_recovers_generating_motions() {
        let (set, truth) = generate(&SynthSpec::chain(
            3,
            40,
            vec![vec![0.6, -0.9], vec![0.2, 1.1]],
            0.0,
            2,
        ))
        .unwrap();
        let ts = m_step(&set, &truth.labeling).unwrap();
        for i in 0..set.instance_count() {
            for p in 0..3 {
                let want = truth.transforms.get(i, p);
                let got = ts.get(i, p);
                let diff = got.compose(&want.inverse());
                assert!(diff.rotation_angle() < 1e-9, "rotation off at ({i},{p})");
                assert!(diff.translation().norm() < 1e-9);
            }
        }
    }

    #[test]
    fn m_step_rejects_empty_part() {
        let (set, _) = generate(&SynthSpec::chain(1, 30, vec![vec![]], 0.0, 1)).unwrap();
        let j = set.template().vertex_count();
        let labeling = PartLabeling::new(vec![0; j], 2).unwrap();
        assert!(matches!(m_step(&set, &labeling), Err(Error::Structural(_))));
    }

    #[test]
    fn m_step_improves_data_term() {
        let (set, truth) = generate(&SynthSpec::chain(2, 40, vec![vec![0.8]], 0.0, 3)).unwrap();
        let params = ModelParams::new(0.01, 0.9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let bad = TransformSet::new(
                (0..set.instance_count())
                    .map(|_| {
                        (0..2)
                            .map(|_| {
                                RigidTransform::from_rotation_vector(
                                    Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()) * 0.3,
                                    Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            )
            .unwrap();
            let before = data_term(&set, &bad, &truth.labeling, &params);
            let fitted = m_step(&set, &truth.labeling).unwrap();
            let after = data_term(&set, &fitted, &truth.labeling, &params);
            assert!(after >= before - 1e-9 * before.abs());
        }
    }

    #[test]
    fn initialize_single_patch_is_global_fit() {
        let (set, _) = generate(&SynthSpec::chain(2, 40, vec![vec![0.5]], 0.0, 4)).unwrap();
        let config = EMConfig::new(1, 0);
        let (labeling, ts) = initialize(&set, set.template(), &config).unwrap();
        assert_eq!(labeling.part_count(), 1);
        assert_eq!(ts.part_count(), 1);
    }

    #[test]
    fn initialize_patches_land_inside_true_parts() {
        let (set, truth) =
            generate(&SynthSpec::chain(3, 120, vec![vec![0.5, -0.5]], 0.0, 5)).unwrap();
        let config = EMConfig::new(16, 3);
        let (labeling, _) = initialize(&set, set.template(), &config).unwrap();
        // Every true part must fully contain at least one patch.
        for true_part in 0..3 {
            let mut found = false;
            for patch in 0..labeling.part_count() {
                let verts = labeling.part_vertices(patch);
                if verts
                    .iter()
                    .all(|&v| truth.labeling.labels()[v] == true_part)
                {
                    found = true;
                    break;
                }
            }
            assert!(found, "no patch inside true part {true_part}");
        }
    }

    #[test]
    fn initialize_clustering_separates_hinge_parts() {
        let (set, truth) = generate(&SynthSpec::chain(2, 80, vec![vec![1.0]], 0.0, 6)).unwrap();
        let mut config = EMConfig::new(2, 1);
        config.init_method = InitMethod::Clustering;
        let (labeling, _) = initialize(&set, set.template(), &config).unwrap();
        // Interior vertices (outside a hop_radius-wide band around the
        // true boundary) of the two parts must fall in different parts.
        let band: Vec<usize> = {
            let mut b = truth.band_union();
            for _ in 0..config.hop_radius {
                let mut next = b.clone();
                for &v in &b {
                    next.extend_from_slice(set.template().neighbors(v));
                }
                next.sort_unstable();
                next.dedup();
                b = next;
            }
            b
        };
        let mut seen = [
            std::collections::BTreeSet::new(),
            std::collections::BTreeSet::new(),
        ];
        for j in 0..set.template().vertex_count() {
            if band.binary_search(&j).is_err() {
                seen[truth.labeling.labels()[j]].insert(labeling.labels()[j]);
            }
        }
        assert!(
            seen[0].is_disjoint(&seen[1]),
            "interior clusters overlap: {seen:?}"
        );
    }

    #[test]
    fn run_em_fixed_point_converges_immediately() {
        let (set, truth) = generate(&SynthSpec::chain(
            2,
            60,
            vec![vec![0.7], vec![-0.4]],
            0.0,
            7,
        ))
        .unwrap();
        let mut config = EMConfig::new(2, 0);
        config.delta_start_frac = 1.0;
        let (labeling, ts, trace) = run_em_from(
            &set,
            set.template(),
            &config,
            truth.labeling.clone(),
            truth.transforms.clone(),
        )
        .unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(labeling.labels(), truth.labeling.labels());
        assert_eq!(ts.part_count(), 2);
    }

    #[test]
    fn run_em_recovers_two_part_chain() {
        let (set, truth) = generate(&SynthSpec::chain(
            2,
            100,
            vec![vec![0.8], vec![-0.6]],
            0.0,
            8,
        ))
        .unwrap();
        let config = EMConfig::new(6, 2);
        let (labeling, _, trace) = run_em(&set, set.template(), &config).unwrap();
        assert!(trace.converged);
        assert_eq!(labeling.part_count(), 2);
        let band = truth.band_union();
        let mut wrong = 0;
        let mut total = 0;
        // Part ids are arbitrary; count errors under the best of the two
        // possible matchings.
        let mut agree = [[0usize; 2]; 2];
        for j in 0..set.template().vertex_count() {
            if band.binary_search(&j).is_err() {
                agree[truth.labeling.labels()[j]][labeling.labels()[j]] += 1;
                total += 1;
            }
        }
        let direct = agree[0][0] + agree[1][1];
        let swapped = agree[0][1] + agree[1][0];
        wrong += total - direct.max(swapped);
        assert!(
            (wrong as f64) < 0.02 * total as f64,
            "{wrong}/{total} interior labels wrong"
        );
    }

    #[test]
    fn run_em_trace_is_monotone_within_delta_stretches() {
        let (set, _) = generate(&SynthSpec::chain(
            2,
            80,
            vec![vec![0.8], vec![-0.5]],
            0.0,
            9,
        ))
        .unwrap();
        let config = EMConfig::new(5, 4);
        let (_, _, trace) = run_em(&set, set.template(), &config).unwrap();
        assert!(!trace.iterations.is_empty());
        for it in &trace.iterations {
            let slack = 1e-9 * (1.0 + it.objective.abs());
            assert!(it.objective_after_e >= it.objective_before - slack);
            assert!(it.objective >= it.objective_after_e - slack);
            assert_eq!(it.part_sizes.len(), it.part_count);
        }
    }

    #[test]
    fn run_em_is_deterministic() {
        let (set, _) = generate(&SynthSpec::chain(2, 60, vec![vec![0.9]], 0.005, 10)).unwrap();
        let config = EMConfig::new(4, 12);
        let a = run_em(&set, set.template(), &config).unwrap();
        let b = run_em(&set, set.template(), &config).unwrap();
        assert_eq!(a.0.labels(), b.0.labels());
        assert_eq!(a.2, b.2);
        assert_relative_eq!(
            a.2.iterations.last().unwrap().objective,
            b.2.iterations.last().unwrap().objective,
            max_relative = 0.0
        );
    }

    #[test]
    fn config_validation() {
        let ok = EMConfig::new(3, 0);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.initial_part_count = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.tau = 0.4;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.delta_start_frac = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.delta_growth = 0.9;
        assert!(bad.validate().is_err());
    }
}

//! End-to-end batch pipeline: disparity bootstrap, superpixels, plane
//! fitting, sparse matches and RANSAC motion hypotheses, then the outer
//! alternation between the scene-flow solve and the latent-image solve.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::deblur::{solve_latents, LatentProblem};
use crate::energy::{total_energy, EnergyBreakdown, EnergyInputs, FeatureCorrespondences};
use crate::features::{ransac_motions, sparse_matches, MotionHypothesis};
use crate::geometry::{
    FrameAssignment, FrameId, FrameLayout, Plane, RigidMotion, SceneModel, WarpTarget,
};
use crate::sceneflow::{solve_sceneflow, ProposalConfig};
use crate::stereo::{fill_invalid, init_disparity};
use crate::superpixels::{build_superpixels, init_labels, moving_mask, LabelPrior, SemanticMask};
use crate::types::{CameraRig, DisparityMap, EnergyParams, FlowField, Image};
use crate::{Error, Result};

/// Everything configurable about a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub params: EnergyParams,
    pub proposals: ProposalConfig,
    pub superpixel_count: usize,
    /// Objects including the background.
    pub num_objects: usize,
    pub max_disp: usize,
    pub kernel_radius: usize,
    /// RANSAC inlier threshold in meters of 3D alignment error.
    pub ransac_threshold: f64,
    pub max_matches: usize,
    pub pd_iters: usize,
    pub pd_tol: f64,
    pub seed: u64,
    pub two_frame: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            params: EnergyParams::unit_scale(),
            proposals: ProposalConfig::default(),
            superpixel_count: 150,
            num_objects: 4,
            max_disp: 24,
            kernel_radius: 64,
            ransac_threshold: 0.5,
            max_matches: 300,
            pd_iters: 40,
            pd_tol: 1e-6,
            seed: 0,
            two_frame: false,
        }
    }
}

/// Input frames plus the semantic prior of the reference image.
pub struct PipelineInput {
    /// Layout order: left frames by time, then right frames by time.
    pub blurred: Vec<Image>,
    pub semantic: SemanticMask,
    pub rig: CameraRig,
    pub config: PipelineConfig,
}

/// Everything a run produces.
pub struct PipelineOutput {
    pub layout: FrameLayout,
    pub latents: Vec<Image>,
    pub model: SceneModel,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub disparity_m: DisparityMap,
    pub disparity_m1: DisparityMap,
    pub moving_mask: SemanticMask,
    /// Stage-labelled energy trace, one entry after initialization and
    /// after every half-step of the alternation.
    pub trace: Vec<(String, EnergyBreakdown)>,
}

/// Fit a plane to the valid disparities of each superpixel (least squares
/// on `d = a x + b y + c` with two reweighting passes). Fits whose induced
/// disparity leaves the plausible range anywhere on the superpixel fall
/// back to a fronto-parallel plane at the median disparity; superpixels
/// with no usable fit inherit the neighbour with the largest shared
/// boundary.
pub fn fit_planes(
    partition: &crate::superpixels::SuperpixelPartition,
    disparity: &DisparityMap,
    rig: &CameraRig,
    max_disp: usize,
) -> Vec<Plane> {
    let n_sp = partition.num_superpixels();
    let mut planes: Vec<Option<Plane>> = vec![None; n_sp];
    let d_lo = 0.05;
    let d_hi = 1.5 * max_disp as f64;
    for (i, pixels) in partition.pixels.iter().enumerate() {
        let samples: Vec<(f64, f64, f64)> = pixels
            .iter()
            .filter(|&&(x, y)| disparity.is_valid(x as usize, y as usize))
            .map(|&(x, y)| (x as f64, y as f64, disparity.at(x as usize, y as usize)))
            .collect();
        if samples.len() < 3 {
            continue;
        }
        let mut weights = vec![1.0; samples.len()];
        let mut coeffs = None;
        for _pass in 0..3 {
            // Weighted normal equations for [a, b, c].
            let mut m = [[0.0f64; 3]; 3];
            let mut rhs = [0.0f64; 3];
            for (&(x, y, d), &wt) in samples.iter().zip(&weights) {
                let row = [x, y, 1.0];
                for r in 0..3 {
                    for c in 0..3 {
                        m[r][c] += wt * row[r] * row[c];
                    }
                    rhs[r] += wt * row[r] * d;
                }
            }
            let mat = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
            let Some(inv) = mat.try_inverse() else { break };
            let sol = inv * Vector3::new(rhs[0], rhs[1], rhs[2]);
            coeffs = Some((sol.x, sol.y, sol.z));
            for ((x, y, d), wt) in samples.iter().zip(weights.iter_mut()) {
                let res = (sol.x * x + sol.y * y + sol.z - d).abs();
                *wt = 1.0 / (1.0 + res * res);
            }
        }
        let median_plane = || {
            let mut ds: Vec<f64> = samples.iter().map(|s| s.2).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = ds[ds.len() / 2].clamp(d_lo, d_hi);
            Plane::from_disparity_coeffs(0.0, 0.0, med, rig)
        };
        if let Some((a, b, c)) = coeffs {
            let plane = Plane::from_disparity_coeffs(a, b, c, rig);
            let sane = plane.n.norm() > 0.0
                && plane.n.iter().all(|v| v.is_finite())
                && pixels.iter().all(|&(x, y)| {
                    let d = a * x as f64 + b * y as f64 + c;
                    (d_lo..=d_hi).contains(&d)
                });
            planes[i] = Some(if sane { plane } else { median_plane() });
        } else {
            planes[i] = Some(median_plane());
        }
    }
    // Degenerate superpixels inherit the neighbour with the largest
    // shared boundary; iterate until stable.
    loop {
        let mut changed = false;
        for i in 0..n_sp {
            if planes[i].is_some() {
                continue;
            }
            let mut best: Option<(usize, usize)> = None;
            for &(nb, edge) in &partition.neighbors[i] {
                if planes[nb as usize].is_some() {
                    let len = partition.edges[edge as usize].2.len();
                    if best.map_or(true, |(_, l)| len > l) {
                        best = Some((nb as usize, len));
                    }
                }
            }
            if let Some((nb, _)) = best {
                planes[i] = planes[nb];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    // Whole image degenerate: fall back to a fronto plane at the median
    // valid disparity (or 10 m without any).
    let fallback = {
        let mut valid: Vec<f64> = disparity.d.iter().copied().filter(|&d| d >= 0.0).collect();
        if valid.is_empty() {
            Plane::fronto(10.0)
        } else {
            valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = valid[valid.len() / 2].max(0.1);
            Plane::fronto(rig.fx() * rig.baseline / med)
        }
    };
    planes.into_iter().map(|p| p.unwrap_or(fallback)).collect()
}

/// Search windows per warp target, in signed pixels.
fn search_window(target: WarpTarget, max_disp: usize) -> ((i64, i64), (i64, i64)) {
    let d = max_disp as i64;
    match target {
        WarpTarget::Stereo => ((-d, 1), (-1, 1)),
        WarpTarget::FlowF | WarpTarget::FlowB => ((-16, 16), (-8, 8)),
        WarpTarget::CrossF | WarpTarget::CrossB => ((-16 - d, 16), (-8, 8)),
    }
}

struct Initialization {
    model: SceneModel,
    priors: Vec<LabelPrior>,
    correspondences: FeatureCorrespondences,
    seed_motions: Vec<RigidMotion>,
}

fn initialize(input: &PipelineInput, layout: &FrameLayout) -> Result<Initialization> {
    let cfg = &input.config;
    let rig = &input.rig;
    let ref_idx = layout.reference_index();
    let reference = &input.blurred[ref_idx];
    let right_idx = layout.index(FrameId { right: true, time: 0 });

    // Disparity bootstrap on the middle pair.
    let disp0 = init_disparity(reference, &input.blurred[right_idx], cfg.max_disp)
        .map_err(|e| e.in_stage("init_disparity"))?;

    // Superpixels on the blurred reference with the raw disparity feature.
    let partition = std::sync::Arc::new(
        build_superpixels(reference, &disp0, cfg.superpixel_count)
            .map_err(|e| e.in_stage("superpixels"))?,
    );

    let planes = fit_planes(&partition, &disp0, rig, cfg.max_disp);

    // Sparse correspondences toward every warp target.
    let mut correspondences = FeatureCorrespondences::empty();
    for &target in WarpTarget::all(layout.two_frame_mode()) {
        let img = &input.blurred[layout.target_index(target)];
        let (sx, sy) = search_window(target, cfg.max_disp);
        let matches = sparse_matches(reference, img, sx, sy, cfg.max_matches);
        correspondences.per_target.insert(target, matches);
    }

    // 3D point pairs from temporal matches with valid disparities at both
    // endpoints.
    let next_left = layout.index(FrameId { right: false, time: 1 });
    let next_right = layout.index(FrameId { right: true, time: 1 });
    let disp1 = init_disparity(
        &input.blurred[next_left],
        &input.blurred[next_right],
        cfg.max_disp,
    )
    .map_err(|e| e.in_stage("init_disparity_next"))?;
    let disp0_filled = fill_invalid(&disp0);
    let disp1_filled = fill_invalid(&disp1);
    let temporal = correspondences
        .per_target
        .get(&WarpTarget::FlowF)
        .cloned()
        .unwrap_or_default();
    let mut pairs = Vec::new();
    let mut pair_pixels = Vec::new();
    let mut pair_refs = Vec::new();
    for ((x, y), (mx, my)) in temporal {
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        let (mxi, myi) = (
            (mx.round() as i64).clamp(0, reference.width as i64 - 1) as usize,
            (my.round() as i64).clamp(0, reference.height as i64 - 1) as usize,
        );
        let d0 = if disp0.is_valid(xi, yi) { disp0.at(xi, yi) } else { disp0_filled.at(xi, yi) };
        let d1 = if disp1.is_valid(mxi, myi) { disp1.at(mxi, myi) } else { disp1_filled.at(mxi, myi) };
        if d0 < 0.5 || d1 < 0.5 {
            continue;
        }
        let p0 = rig.backproject(x, y, rig.depth_from_disparity(d0));
        let p1 = rig.backproject(mx, my, rig.depth_from_disparity(d1));
        pairs.push((p0, p1));
        pair_pixels.push((xi, yi));
        pair_refs.push(((x, y), (mx, my)));
    }

    // Stage 1: ego motion from all pairs; the 3D threshold must absorb
    // the depth noise of far geometry.
    let ego_hyps = ransac_motions(&pairs, 1, cfg.ransac_threshold, cfg.seed);
    let ego = ego_hyps
        .first()
        .map(|h| h.motion)
        .unwrap_or_else(RigidMotion::identity);

    // Stage 2: matches whose image-space reprojection disagrees with the
    // ego motion are moving-object candidates; fit their motions with a
    // tighter threshold (nearby geometry carries less depth noise).
    let mut moving_idx = Vec::new();
    for (pi, &((x, y), (mx, my))) in pair_refs.iter().enumerate() {
        let _ = (x, y);
        let pred = rig.project(&ego.apply(&pairs[pi].0));
        let err = ((pred.0 - mx).powi(2) + (pred.1 - my).powi(2)).sqrt();
        if err > 1.5 {
            moving_idx.push(pi);
        }
    }
    let moving_pairs: Vec<_> = moving_idx.iter().map(|&i| pairs[i]).collect();
    let object_hyps = ransac_motions(
        &moving_pairs,
        cfg.num_objects.saturating_sub(1),
        0.5 * cfg.ransac_threshold,
        cfg.seed.wrapping_add(1),
    );

    // Sanity caps: reject motions implying implausible image displacement.
    let rot_cap = 10f64.to_radians();
    let t_cap = {
        let z_med = {
            let mut ds: Vec<f64> = disp0.d.iter().copied().filter(|&d| d > 0.5).collect();
            if ds.is_empty() {
                10.0
            } else {
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                rig.depth_from_disparity(ds[ds.len() / 2])
            }
        };
        2.0 * cfg.max_disp as f64 * z_med / rig.fx()
    };
    let sane = |m: &RigidMotion| {
        let angle = ((m.r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        angle <= rot_cap && m.t.norm() <= t_cap
    };
    let ego = if sane(&ego) { ego } else { RigidMotion::identity() };
    let mut hypotheses: Vec<MotionHypothesis> = vec![MotionHypothesis {
        motion: ego,
        inliers: ego_hyps.first().map(|h| h.inliers.clone()).unwrap_or_default(),
    }];
    for h in object_hyps {
        if sane(&h.motion) {
            hypotheses.push(MotionHypothesis {
                motion: h.motion,
                // Back to indices over the full pair list.
                inliers: h.inliers.iter().map(|&i| moving_idx[i]).collect(),
            });
        }
    }

    let mut motions = vec![ego];
    for k in 1..cfg.num_objects {
        motions.push(hypotheses.get(k).map(|h| h.motion).unwrap_or(ego));
    }

    // Labels: background prior forces object 0; foreground superpixels
    // take the non-ego hypothesis with the most supporting matches inside,
    // defaulting to object 1.
    let priors = init_labels(&partition, &input.semantic, cfg.num_objects)
        .map_err(|e| e.in_stage("init_labels"))?;
    let mut labels = vec![0usize; partition.num_superpixels()];
    for (i, prior) in priors.iter().enumerate() {
        if let LabelPrior::Foreground = prior {
            let mut votes = vec![0usize; cfg.num_objects];
            for (h, hyp) in hypotheses.iter().enumerate().skip(1).take(cfg.num_objects - 1) {
                for &pi in &hyp.inliers {
                    let (x, y) = pair_pixels[pi];
                    if partition.label_at(x, y) as usize == i {
                        votes[h] += 1;
                    }
                }
            }
            let best = votes
                .iter()
                .enumerate()
                .skip(1)
                .max_by_key(|(k, v)| (**v, std::cmp::Reverse(*k)))
                .map(|(k, _)| k)
                .unwrap_or(1);
            labels[i] = if votes[best] > 0 { best } else { 1 };
        }
    }

    let model = SceneModel {
        partition: partition.clone(),
        planes,
        labels,
        motions,
    };
    model.validate()?;
    let seed_motions: Vec<RigidMotion> = hypotheses.iter().map(|h| h.motion).collect();
    Ok(Initialization {
        model,
        priors,
        correspondences,
        seed_motions,
    })
}

/// Run the full pipeline: initialization, then `outer_iters` rounds of
/// scene-flow and latent-image solves. The energy trace is non-increasing
/// across half-steps; non-improving latent updates are rejected.
pub fn run_pipeline(input: &PipelineInput) -> Result<PipelineOutput> {
    let cfg = &input.config;
    cfg.params.validate()?;
    let layout = if cfg.two_frame {
        FrameLayout::two_frame()
    } else {
        FrameLayout::three_frame()
    };
    if input.blurred.len() != layout.num_frames() {
        return Err(Error::InvalidInput(format!(
            "expected {} frames, got {}",
            layout.num_frames(),
            input.blurred.len()
        )));
    }
    let reference = &input.blurred[layout.reference_index()];
    for img in &input.blurred {
        if !img.same_shape(reference) {
            return Err(Error::DimensionMismatch("input frames differ in shape".into()));
        }
    }
    if input.semantic.height != reference.height || input.semantic.width != reference.width {
        return Err(Error::DimensionMismatch("semantic mask does not match the frames".into()));
    }

    let init = initialize(input, &layout)?;
    let mut model = init.model;
    let mut latents = input.blurred.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();

    let energy_of = |model: &SceneModel, latents: &[Image]| -> Result<EnergyBreakdown> {
        let inp = EnergyInputs {
            rig: &input.rig,
            layout: &layout,
            latents,
            blurred: &input.blurred,
            correspondences: &init.correspondences,
            params: &cfg.params,
            kernel_radius: cfg.kernel_radius,
        };
        total_energy(model, &inp)
    };

    let mut current_energy = energy_of(&model, &latents).map_err(|e| e.in_stage("init_energy"))?;
    trace.push(("init".to_string(), current_energy));

    for outer in 0..cfg.params.outer_iters {
        // Scene-flow half-step.
        {
            let inp = EnergyInputs {
                rig: &input.rig,
                layout: &layout,
                latents: &latents,
                blurred: &input.blurred,
                correspondences: &init.correspondences,
                params: &cfg.params,
                kernel_radius: cfg.kernel_radius,
            };
            let outcome = solve_sceneflow(
                &model,
                &inp,
                &init.priors,
                &init.seed_motions,
                &cfg.proposals,
                cfg.proposals.rounds,
                &mut rng,
            )
            .map_err(|e| e.in_stage("sceneflow"))?;
            model = outcome.model;
        }
        current_energy = energy_of(&model, &latents).map_err(|e| e.in_stage("sceneflow_energy"))?;
        trace.push((format!("sceneflow_{outer}"), current_energy));

        // Latent half-step; keep the previous latents if the full energy
        // would increase (clamping can perturb the solver's own objective).
        {
            let problem = LatentProblem::from_model(
                &model,
                &input.rig,
                &layout,
                &cfg.params,
                cfg.kernel_radius,
            )
            .map_err(|e| e.in_stage("deblur_setup"))?;
            let solve = solve_latents(
                &problem,
                &input.blurred,
                &latents,
                &cfg.params,
                cfg.pd_iters,
                cfg.pd_tol,
            )
            .map_err(|e| e.in_stage("deblur"))?;
            let cand_energy = energy_of(&model, &solve.latents)?;
            if cand_energy.total <= current_energy.total {
                latents = solve.latents;
                current_energy = cand_energy;
            }
        }
        trace.push((format!("deblur_{outer}"), current_energy));
    }

    // Final outputs from the converged model.
    let flow_fwd = model.reference_flow(WarpTarget::FlowF, &input.rig)?;
    let flow_bwd = if layout.two_frame_mode() {
        let mut f = flow_fwd.clone();
        for (u, v) in f.u.iter_mut().zip(f.v.iter_mut()) {
            *u = -*u;
            *v = -*v;
        }
        f
    } else {
        model.reference_flow(WarpTarget::FlowB, &input.rig)?
    };
    let disparity_m = model.reference_disparity(&input.rig);
    let assign = FrameAssignment::from_model(&model, &input.rig, &layout)?;
    let m1_idx = layout.index(FrameId { right: false, time: 1 });
    let disparity_m1 = assign.frame_disparity(&model, &input.rig, m1_idx, reference.height, reference.width)?;
    let mask = moving_mask(&model);

    Ok(PipelineOutput {
        layout,
        latents,
        model,
        flow_fwd,
        flow_bwd,
        disparity_m,
        disparity_m1,
        moving_mask: mask,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SceneSpec};

    fn tiny_input(outer_iters: usize) -> PipelineInput {
        let mut spec = SceneSpec::default_scene();
        spec.height = 48;
        spec.width = 80;
        spec.rig = CameraRig::new(100.0, 100.0, 40.0, 24.0, 0.5).unwrap();
        spec.objects[0].rect = (24.0, 12.0, 30.0, 22.0);
        spec.n_sub = 6;
        spec.channels = 1;
        let bundle = generate(&spec).unwrap();
        let mut config = PipelineConfig {
            superpixel_count: 40,
            pd_iters: 12,
            ..PipelineConfig::default()
        };
        config.params.outer_iters = outer_iters;
        config.proposals.rounds = 2;
        config.proposals.trws_passes = 15;
        PipelineInput {
            blurred: bundle.blurred.clone(),
            semantic: bundle.semantic_prior.clone(),
            rig: spec.rig.clone(),
            config,
        }
    }

    #[test]
    fn zero_outer_iters_returns_initialization() {
        let input = tiny_input(0);
        let out = run_pipeline(&input).unwrap();
        // Latents passed through untouched.
        for (a, b) in out.latents.iter().zip(&input.blurred) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].0, "init");
    }

    #[test]
    fn energy_trace_non_increasing_and_deterministic() {
        let input = tiny_input(1);
        let out = run_pipeline(&input).unwrap();
        let mut prev = f64::INFINITY;
        for (stage, e) in &out.trace {
            assert!(
                e.total <= prev + 1e-9 * prev.abs().max(1.0),
                "energy increased at {stage}: {prev} -> {}",
                e.total
            );
            prev = e.total;
        }
        let out2 = run_pipeline(&input).unwrap();
        assert_eq!(out.trace.len(), out2.trace.len());
        for ((_, a), (_, b)) in out.trace.iter().zip(&out2.trace) {
            assert_eq!(a.total, b.total);
        }
        for (a, b) in out.latents.iter().zip(&out2.latents) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn wrong_frame_count_rejected() {
        let mut input = tiny_input(1);
        input.blurred.pop();
        match run_pipeline(&input) {
            Err(Error::InvalidInput(_)) => {}
            other => panic!("expected InvalidInput, got {:?}", other.map(|_| ())),
        }
    }
}

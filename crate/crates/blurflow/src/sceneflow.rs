//! Scene-flow subproblem: semantic-guided proposal sampling, exact
//! discretization of the data and smoothness terms onto per-superpixel
//! (plane, label) proposals, TRW-S inference, and block-coordinate
//! re-estimation of the per-object motions. Each round keeps the incumbent
//! in the proposal set and only accepts energy-reducing moves.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blur::rasterize_kernel;
use crate::energy::{
    total_energy, EnergyBreakdown, EnergyInputs,
};
use crate::geometry::{
    proposal_flows_at, FrameAssignment, Plane, RigidMotion, SceneModel, WarpTarget,
};
use crate::superpixels::LabelPrior;
use crate::trws::{trws_solve, DiscreteEdge, DiscreteProblem};
use crate::types::{bilinear_sample, truncated_l1};
use crate::Result;

/// Sampling and solver knobs for one scene-flow solve.
#[derive(Debug, Clone)]
pub struct ProposalConfig {
    /// Plane candidates per superpixel, including the incumbent.
    pub plane_candidates: usize,
    /// Random-walk motion candidates per object (incumbent is extra).
    pub motion_candidates: usize,
    /// Gaussian plane perturbation: relative and absolute std.
    pub plane_sigma_rel: f64,
    pub plane_sigma_abs: f64,
    /// Motion random walk: rotation std (radians) and translation std
    /// (relative to the norm, with an absolute floor).
    pub rot_sigma: f64,
    pub trans_sigma_rel: f64,
    pub trans_sigma_abs: f64,
    pub trws_passes: usize,
    /// Proposal rounds per scene-flow solve.
    pub rounds: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            plane_candidates: 8,
            motion_candidates: 4,
            plane_sigma_rel: 0.05,
            plane_sigma_abs: 1e-3,
            rot_sigma: 0.5f64.to_radians(),
            trans_sigma_rel: 0.02,
            trans_sigma_abs: 0.005,
            trws_passes: 30,
            rounds: 3,
        }
    }
}

/// Candidate states for one round: per-superpixel (plane, label) pairs and
/// per-object motion candidates. The incumbent state is candidate 0
/// everywhere.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub node_proposals: Vec<Vec<(Plane, usize)>>,
    pub motion_proposals: Vec<Vec<RigidMotion>>,
}

/// Draw plane, label and motion candidates around the current model.
/// Labels come from the semantic prior sets; motion candidates include the
/// externally supplied hypotheses. Deterministic for a given rng state.
pub fn sample_proposals(
    model: &SceneModel,
    priors: &[LabelPrior],
    seed_motions: &[RigidMotion],
    cfg: &ProposalConfig,
    rng: &mut ChaCha8Rng,
) -> ProposalSet {
    let num_objects = model.motions.len();
    let mut node_proposals = Vec::with_capacity(model.planes.len());
    for (i, plane) in model.planes.iter().enumerate() {
        let mut planes = vec![*plane];
        for _ in 1..cfg.plane_candidates.max(1) {
            let n = plane.n;
            let perturbed = Vector3::new(
                n.x + rng.sample::<f64, _>(rand_distr::StandardNormal)
                    * (cfg.plane_sigma_rel * n.x.abs() + cfg.plane_sigma_abs),
                n.y + rng.sample::<f64, _>(rand_distr::StandardNormal)
                    * (cfg.plane_sigma_rel * n.y.abs() + cfg.plane_sigma_abs),
                n.z + rng.sample::<f64, _>(rand_distr::StandardNormal)
                    * (cfg.plane_sigma_rel * n.z.abs() + cfg.plane_sigma_abs),
            );
            if perturbed.norm() > 0.0 {
                planes.push(Plane::new(perturbed));
            }
        }
        let labels = priors[i].allowed(num_objects);
        let mut proposals = vec![(model.planes[i], model.labels[i])];
        for &l in &labels {
            for (pi, p) in planes.iter().enumerate() {
                if pi == 0 && l == model.labels[i] {
                    continue; // incumbent already placed first
                }
                proposals.push((*p, l));
            }
        }
        node_proposals.push(proposals);
    }

    let mut motion_proposals = Vec::with_capacity(num_objects);
    for motion in &model.motions {
        let mut candidates = vec![*motion];
        for _ in 0..cfg.motion_candidates {
            let axis = Vector3::new(
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            );
            let angle = rng.sample::<f64, _>(rand_distr::StandardNormal) * cfg.rot_sigma;
            let sigma_t = cfg.trans_sigma_rel * motion.t.norm() + cfg.trans_sigma_abs;
            let dt = Vector3::new(
                rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma_t,
                rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma_t,
                rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma_t,
            );
            let walk = RigidMotion::from_axis_angle(axis, angle, dt);
            candidates.push(walk.compose(motion));
        }
        candidates.extend(seed_motions.iter().copied());
        motion_proposals.push(candidates);
    }
    ProposalSet {
        node_proposals,
        motion_proposals,
    }
}

/// Pairwise smoothness between two proposals of adjacent superpixels.
fn smoothness_term(
    a: &(Plane, usize),
    b: &(Plane, usize),
    boundary: &[(u16, u16)],
    motions: &[RigidMotion],
    inp: &EnergyInputs,
) -> f64 {
    let params = inp.params;
    let (pa, la) = a;
    let (pb, lb) = b;
    let mut depth = 0.0;
    let mut omega_sq = 0.0;
    for &(x, y) in boundary {
        let d = pa.disparity_at(x as f64, y as f64, inp.rig) - pb.disparity_at(x as f64, y as f64, inp.rig);
        depth += truncated_l1(d, params.alpha2);
        omega_sq += d * d;
    }
    let denom = pa.n.norm() * pb.n.norm();
    let cos = if denom == 0.0 { 0.0 } else { (pa.n.dot(&pb.n) / denom).abs() };
    let mut sum = params.theta4 * depth + params.theta5 * truncated_l1(1.0 - cos, params.alpha3);
    if la != lb {
        let nb = boundary.len() as f64;
        sum += params.w_label_depth * (-params.lambda / nb * omega_sq).exp() * cos;
        let g = crate::energy::motion_similarity(&motions[*la], &motions[*lb], params);
        sum += params.w_label_motion * (-params.lambda / nb * (nb * g)).exp() * cos;
    }
    sum
}

/// The discretized problem plus the surviving proposals per node.
pub struct Discretization {
    pub problem: DiscreteProblem,
    pub node_proposals: Vec<Vec<(Plane, usize)>>,
}

/// Build the discrete CRF whose labelings evaluate, exactly, to the
/// continuous energy (minus the latent-only TV term) of the assembled
/// model under the frozen frame assignment. The blur data term splits into
/// per-superpixel interior difference pairs (unary) and boundary pairs
/// (pairwise); proposals whose geometry degenerates anywhere are dropped.
pub fn discretize(
    model: &SceneModel,
    node_proposals: &[Vec<(Plane, usize)>],
    assign: &FrameAssignment,
    inp: &EnergyInputs,
) -> Result<Discretization> {
    let partition = &model.partition;
    let n_sp = partition.num_superpixels();
    let (h, w) = (partition.height, partition.width);
    let two_frame = inp.layout.two_frame_mode();
    let frames = inp.layout.frames();
    let tau = inp.params.tau;
    let radius = inp.kernel_radius as f64;

    // Per-frame pixel ownership.
    let frame_pixels: Vec<Vec<Vec<(u16, u16)>>> = (0..frames.len())
        .map(|m| assign.pixels_of(m, n_sp, w))
        .collect();

    // Filter proposals: every frame's flow chain must stay finite and
    // within the kernel radius on the superpixel's own pixels.
    let node_proposals: Vec<Vec<(Plane, usize)>> = (0..n_sp)
        .into_par_iter()
        .map(|i| {
            let mut kept = Vec::new();
            'proposal: for (pi, (plane, label)) in node_proposals[i].iter().enumerate() {
                for (m, frame) in frames.iter().enumerate() {
                    let pixels = &frame_pixels[m][i];
                    if pixels.is_empty() {
                        continue;
                    }
                    match proposal_flows_at(plane, &model.motions[*label], *frame, inp.rig, two_frame, pixels) {
                        Ok(flows) => {
                            for (u, v, ub, vb) in flows {
                                let m = (tau * u).abs().max((tau * v).abs()).max((tau * ub).abs()).max((tau * vb).abs());
                                if !m.is_finite() || m > radius {
                                    if pi == 0 {
                                        // The incumbent must stay feasible.
                                        break;
                                    }
                                    continue 'proposal;
                                }
                            }
                        }
                        Err(_) => {
                            if pi != 0 {
                                continue 'proposal;
                            }
                        }
                    }
                }
                kept.push((*plane, *label));
            }
            kept
        })
        .collect();

    // Per-superpixel feature matches, keyed by the containing superpixel.
    let mut sp_matches: Vec<Vec<((f64, f64), (f64, f64))>> = vec![Vec::new(); n_sp];
    let mut match_targets: Vec<Vec<WarpTarget>> = vec![Vec::new(); n_sp];
    for (&target, matches) in &inp.correspondences.per_target {
        for &(p, q) in matches {
            let xi = (p.0.round() as i64).clamp(0, w as i64 - 1) as usize;
            let yi = (p.1.round() as i64).clamp(0, h as i64 - 1) as usize;
            let i = partition.label_at(xi, yi) as usize;
            sp_matches[i].push((p, q));
            match_targets[i].push(target);
        }
    }

    // Unary data terms (brightness + features).
    let mut unaries: Vec<Vec<f64>> = (0..n_sp)
        .into_par_iter()
        .map(|i| {
            node_proposals[i]
                .iter()
                .map(|(plane, label)| {
                    unary_brightness_features(
                        &partition.pixels[i],
                        &sp_matches[i],
                        &match_targets[i],
                        plane,
                        *label,
                        &model.motions,
                        inp,
                    )
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // Pairwise tables on the partition adjacency (smoothness terms).
    let mut edge_tables: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for (i, j, boundary) in &partition.edges {
        let (na, nb) = (node_proposals[*i as usize].len(), node_proposals[*j as usize].len());
        let mut table = vec![0.0; na * nb];
        for (ai, a) in node_proposals[*i as usize].iter().enumerate() {
            for (bi, b) in node_proposals[*j as usize].iter().enumerate() {
                table[ai * nb + bi] = smoothness_term(a, b, boundary, &model.motions, inp);
            }
        }
        edge_tables.insert((*i, *j), table);
    }

    // Blur data term, frame by frame.
    let theta3 = inp.params.theta3;
    for (m, frame) in frames.iter().enumerate() {
        let latent = &inp.latents[m];
        let observed = &inp.blurred[m];
        let ch = latent.channels;
        let owners = &assign.label_maps[m];
        // Residuals of every proposal at its owned pixels.
        let pixel_pos: Vec<u32> = {
            let mut pos = vec![0u32; h * w];
            let mut counters = vec![0u32; n_sp];
            for (idx, &o) in owners.iter().enumerate() {
                pos[idx] = counters[o as usize];
                counters[o as usize] += 1;
            }
            pos
        };
        let residuals: Vec<Vec<Vec<f64>>> = (0..n_sp)
            .into_par_iter()
            .map(|i| {
                let pixels = &frame_pixels[m][i];
                node_proposals[i]
                    .iter()
                    .map(|(plane, label)| {
                        let mut r = vec![0.0; pixels.len() * ch];
                        if pixels.is_empty() {
                            return Ok(r);
                        }
                        let flows = proposal_flows_at(
                            plane,
                            &model.motions[*label],
                            *frame,
                            inp.rig,
                            two_frame,
                            pixels,
                        )?;
                        let mut acc = vec![0.0; ch];
                        for (pi, &(x, y)) in pixels.iter().enumerate() {
                            let (u, v, ub, vb) = flows[pi];
                            let kernel = rasterize_kernel((u, v), (ub, vb), tau, 1);
                            acc.iter_mut().for_each(|a| *a = 0.0);
                            for (dx, dy, kw) in &kernel.taps {
                                let sx = (x as i64 + *dx as i64).clamp(0, w as i64 - 1) as usize;
                                let sy = (y as i64 + *dy as i64).clamp(0, h as i64 - 1) as usize;
                                for c in 0..ch {
                                    acc[c] += kw * latent.get(sx, sy, c);
                                }
                            }
                            for c in 0..ch {
                                r[pi * ch + c] = acc[c] - observed.get(x as usize, y as usize, c);
                            }
                        }
                        Ok(r)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        // Walk the forward-difference pairs once.
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let oi = owners[idx] as usize;
                let pos_i = pixel_pos[idx] as usize;
                for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                    if nx >= w || ny >= h {
                        continue;
                    }
                    let jdx = ny * w + nx;
                    let oj = owners[jdx] as usize;
                    let pos_j = pixel_pos[jdx] as usize;
                    if oi == oj {
                        let table = &mut unaries[oi];
                        for (a, r) in residuals[oi].iter().enumerate() {
                            let mut s = 0.0;
                            for c in 0..ch {
                                let d = r[pos_j * ch + c] - r[pos_i * ch + c];
                                s += d * d;
                            }
                            table[a] += theta3 * s;
                        }
                    } else {
                        // Table rows index the smaller node's proposals.
                        let (sm, bg) = (oi.min(oj), oi.max(oj));
                        let (na, nb) = (node_proposals[sm].len(), node_proposals[bg].len());
                        let table = edge_tables
                            .entry((sm as u32, bg as u32))
                            .or_insert_with(|| vec![0.0; na * nb]);
                        for a in 0..na {
                            for b in 0..nb {
                                let (prop_i, prop_j) = if oi == sm { (a, b) } else { (b, a) };
                                let r_i = &residuals[oi][prop_i];
                                let r_j = &residuals[oj][prop_j];
                                let mut s = 0.0;
                                for c in 0..ch {
                                    let d = r_j[pos_j * ch + c] - r_i[pos_i * ch + c];
                                    s += d * d;
                                }
                                table[a * nb + b] += theta3 * s;
                            }
                        }
                    }
                }
            }
        }
    }

    let edges = edge_tables
        .into_iter()
        .map(|((a, b), costs)| DiscreteEdge {
            a: a as usize,
            b: b as usize,
            costs,
        })
        .collect();
    Ok(Discretization {
        problem: DiscreteProblem { unaries, edges },
        node_proposals,
    })
}

/// Brightness + feature unary for one proposal of one superpixel.
fn unary_brightness_features(
    pixels: &[(u16, u16)],
    matches: &[((f64, f64), (f64, f64))],
    match_targets: &[WarpTarget],
    plane: &Plane,
    label: usize,
    motions: &[RigidMotion],
    inp: &EnergyInputs,
) -> Result<f64> {
    let reference = &inp.latents[inp.layout.reference_index()];
    let mut sum = 0.0;
    let mut sample = vec![0.0; reference.channels];
    for &target in WarpTarget::all(inp.layout.two_frame_mode()) {
        let h = crate::geometry::homography(&inp.rig.k, &target.motion(&motions[label], inp.rig), plane)?;
        let img = &inp.latents[inp.layout.target_index(target)];
        let mut bright = 0.0;
        for &(x, y) in pixels {
            let (px, py, w) = crate::geometry::project_homography(&h, x as f64, y as f64);
            if w.abs() <= 1e-12
                || px < 0.0
                || py < 0.0
                || px > (img.width - 1) as f64
                || py > (img.height - 1) as f64
            {
                continue;
            }
            bilinear_sample(img, px, py, &mut sample);
            for (c, s) in sample.iter().enumerate() {
                bright += (reference.get(x as usize, y as usize, c) - s).abs();
            }
        }
        sum += inp.params.theta1 * bright;
        let mut feat = 0.0;
        for (&((fx, fy), (mx, my)), &mt) in matches.iter().zip(match_targets) {
            if mt != target {
                continue;
            }
            let (px, py, w) = crate::geometry::project_homography(&h, fx, fy);
            let err = if w.abs() <= 1e-12 {
                inp.params.alpha1
            } else {
                ((px - mx).powi(2) + (py - my).powi(2)).sqrt()
            };
            feat += truncated_l1(err, inp.params.alpha1);
        }
        sum += inp.params.theta2 * feat;
    }
    Ok(sum)
}

/// Apply a labeling of the discretization to the model.
pub fn assemble(model: &SceneModel, disc: &Discretization, labeling: &[usize]) -> SceneModel {
    let mut out = model.clone();
    for (i, &l) in labeling.iter().enumerate() {
        let (plane, label) = disc.node_proposals[i][l];
        out.planes[i] = plane;
        out.labels[i] = label;
    }
    out
}

/// Scene-flow solve outcome: the model and the accepted energy after each
/// round.
pub struct SceneflowOutcome {
    pub model: SceneModel,
    pub trace: Vec<EnergyBreakdown>,
    /// TRW-S lower-bound traces per round, for diagnostics.
    pub bound_traces: Vec<Vec<f64>>,
}

/// Alternating proposal rounds: re-estimate each object's motion over the
/// sampled candidates, then run TRW-S over (plane, label) proposals; moves
/// are accepted only when the full energy does not increase, so the energy
/// is non-increasing across rounds.
pub fn solve_sceneflow(
    model: &SceneModel,
    inp: &EnergyInputs,
    priors: &[LabelPrior],
    seed_motions: &[RigidMotion],
    cfg: &ProposalConfig,
    rounds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneflowOutcome> {
    let mut current = model.clone();
    let mut current_energy = total_energy(&current, inp)?;
    let mut trace = Vec::new();
    let mut bound_traces = Vec::new();

    for _round in 0..rounds {
        let proposals = sample_proposals(&current, priors, seed_motions, cfg, rng);

        // Block step 1: per-object motion re-estimation under the full
        // energy; candidates are evaluated with fresh assignments.
        for k in 0..current.motions.len() {
            let candidates = &proposals.motion_proposals[k];
            let scores: Vec<Option<f64>> = candidates
                .par_iter()
                .map(|cand| {
                    let mut m = current.clone();
                    m.motions[k] = *cand;
                    total_energy(&m, inp).ok().map(|e| e.total)
                })
                .collect();
            let mut best = (0, current_energy.total);
            for (ci, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    if *s < best.1 {
                        best = (ci, *s);
                    }
                }
            }
            if best.1 < current_energy.total {
                current.motions[k] = candidates[best.0];
                let mut m = current.clone();
                m.motions[k] = candidates[best.0];
                current_energy = total_energy(&current, inp)?;
            }
        }

        // Block step 2: TRW-S over (plane, label) proposals under the
        // frozen assignment of the current model.
        let assign = FrameAssignment::from_model(&current, inp.rig, inp.layout)?;
        let disc = discretize(&current, &proposals.node_proposals, &assign, inp)?;
        let res = trws_solve(&disc.problem, cfg.trws_passes);
        bound_traces.push(res.lower_bounds.clone());
        let candidate = assemble(&current, &disc, &res.labeling);
        if let Ok(cand_energy) = total_energy(&candidate, inp) {
            if cand_energy.total <= current_energy.total {
                current = candidate;
                current_energy = cand_energy;
            }
        }
        trace.push(current_energy);
    }

    Ok(SceneflowOutcome {
        model: current,
        trace,
        bound_traces,
    })
}

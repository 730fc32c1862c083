//! Sequential tree-reweighted message passing over a pairwise CRF on the
//! superpixel graph: monotone lower bound, best-seen labeling extraction,
//! exact on trees.

/// Pairwise cost table between two nodes, row-major over (label_a, label_b).
#[derive(Debug, Clone)]
pub struct DiscreteEdge {
    pub a: usize,
    pub b: usize,
    pub costs: Vec<f64>,
}

impl DiscreteEdge {
    #[inline]
    pub fn cost(&self, la: usize, lb: usize, nb: usize) -> f64 {
        self.costs[la * nb + lb]
    }
}

/// Node unaries plus pairwise tables on an arbitrary graph. Label counts
/// may differ per node.
#[derive(Debug, Clone, Default)]
pub struct DiscreteProblem {
    pub unaries: Vec<Vec<f64>>,
    pub edges: Vec<DiscreteEdge>,
}

impl DiscreteProblem {
    pub fn num_nodes(&self) -> usize {
        self.unaries.len()
    }

    pub fn labels(&self, i: usize) -> usize {
        self.unaries[i].len()
    }

    /// True energy of a labeling.
    pub fn evaluate(&self, labeling: &[usize]) -> f64 {
        let mut e: f64 = self
            .unaries
            .iter()
            .zip(labeling)
            .map(|(u, &l)| u[l])
            .sum();
        for edge in &self.edges {
            e += edge.cost(labeling[edge.a], labeling[edge.b], self.labels(edge.b));
        }
        e
    }
}

/// Output of [`trws_solve`].
#[derive(Debug, Clone)]
pub struct TrwsResult {
    /// Best labeling seen over all passes.
    pub labeling: Vec<usize>,
    /// Energy of that labeling.
    pub energy: f64,
    /// Lower bound after each backward pass.
    pub lower_bounds: Vec<f64>,
    /// Energy of the decoded labeling after each pass.
    pub energies: Vec<f64>,
}

struct Graph {
    /// Per node: (neighbor, edge index, neighbor_is_higher).
    adj: Vec<Vec<(usize, usize, bool)>>,
    gamma: Vec<f64>,
}

fn build_graph(problem: &DiscreteProblem) -> Graph {
    let n = problem.num_nodes();
    let mut adj = vec![Vec::new(); n];
    for (e, edge) in problem.edges.iter().enumerate() {
        debug_assert!(edge.a < edge.b, "edges must be stored with a < b");
        adj[edge.a].push((edge.b, e, true));
        adj[edge.b].push((edge.a, e, false));
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let gamma = adj
        .iter()
        .map(|a| {
            let fwd = a.iter().filter(|(_, _, hi)| *hi).count();
            let bwd = a.len() - fwd;
            1.0 / fwd.max(bwd).max(1) as f64
        })
        .collect();
    Graph { adj, gamma }
}

/// One directed message per edge direction, indexed [edge][dir], where
/// dir 0 is a->b and dir 1 is b->a. Message lives on the receiver's labels.
struct Messages {
    m: Vec<[Vec<f64>; 2]>,
}

impl Messages {
    fn zeros(problem: &DiscreteProblem) -> Self {
        Messages {
            m: problem
                .edges
                .iter()
                .map(|e| {
                    [
                        vec![0.0; problem.labels(e.b)],
                        vec![0.0; problem.labels(e.a)],
                    ]
                })
                .collect(),
        }
    }

    /// Message arriving at node `i` over edge `e` (from its other end).
    fn incoming(&self, e: usize, i_is_b: bool) -> &[f64] {
        &self.m[e][if i_is_b { 0 } else { 1 }]
    }
}

/// Reparameterized unary at node i: unary plus all incoming messages.
fn theta_hat(problem: &DiscreteProblem, graph: &Graph, msgs: &Messages, i: usize) -> Vec<f64> {
    let mut t = problem.unaries[i].clone();
    for &(_, e, nb_higher) in &graph.adj[i] {
        // If the neighbor is node b of the edge, then i is node a, so the
        // incoming message is the b->a one.
        let incoming = msgs.incoming(e, !nb_higher);
        for (tv, mv) in t.iter_mut().zip(incoming) {
            *tv += mv;
        }
    }
    t
}

/// Update the message i -> j over edge `e`; returns the normalization
/// constant that was subtracted.
fn update_message(
    problem: &DiscreteProblem,
    msgs: &mut Messages,
    e: usize,
    i_is_a: bool,
    scaled_theta: &[f64],
) -> f64 {
    let edge = &problem.edges[e];
    let (ni, nj) = if i_is_a {
        (problem.labels(edge.a), problem.labels(edge.b))
    } else {
        (problem.labels(edge.b), problem.labels(edge.a))
    };
    let reverse: Vec<f64> = msgs.m[e][if i_is_a { 1 } else { 0 }].clone();
    let out = &mut msgs.m[e][if i_is_a { 0 } else { 1 }];
    let mut delta = f64::INFINITY;
    for lj in 0..nj {
        let mut best = f64::INFINITY;
        for li in 0..ni {
            let c = if i_is_a {
                edge.costs[li * nj + lj]
            } else {
                edge.costs[lj * ni + li]
            };
            let v = scaled_theta[li] - reverse[li] + c;
            if v < best {
                best = v;
            }
        }
        out[lj] = best;
        if best < delta {
            delta = best;
        }
    }
    for v in out.iter_mut() {
        *v -= delta;
    }
    delta
}

/// Run sequential tree-reweighted message passing for up to `max_passes`
/// forward/backward sweeps. The lower bound is computed during each
/// backward sweep and is non-decreasing; the returned labeling is the best
/// decoded one across all passes.
pub fn trws_solve(problem: &DiscreteProblem, max_passes: usize) -> TrwsResult {
    let n = problem.num_nodes();
    if n == 0 {
        return TrwsResult {
            labeling: Vec::new(),
            energy: 0.0,
            lower_bounds: Vec::new(),
            energies: Vec::new(),
        };
    }
    let graph = build_graph(problem);
    let mut msgs = Messages::zeros(problem);
    let mut lower_bounds = Vec::new();
    let mut energies = Vec::new();
    let mut best_labeling: Vec<usize> = problem.unaries.iter().map(|u| argmin(u)).collect();
    let mut best_energy = problem.evaluate(&best_labeling);

    for _pass in 0..max_passes.max(1) {
        // Forward sweep: send to higher-ordered neighbors.
        for i in 0..n {
            let th = theta_hat(problem, &graph, &msgs, i);
            let scaled: Vec<f64> = th.iter().map(|v| v * graph.gamma[i]).collect();
            for &(_, e, nb_higher) in &graph.adj[i] {
                if nb_higher {
                    let i_is_a = problem.edges[e].a == i;
                    update_message(problem, &mut msgs, e, i_is_a, &scaled);
                }
            }
        }

        // Backward sweep with bound bookkeeping and decoding.
        let mut bound = 0.0;
        let mut labeling = vec![0usize; n];
        for i in (0..n).rev() {
            let th = theta_hat(problem, &graph, &msgs, i);
            let vmin = th.iter().cloned().fold(f64::INFINITY, f64::min);
            bound += vmin;

            // Decode conditioned on already-decoded higher nodes.
            let mut cond = problem.unaries[i].clone();
            for &(j, e, nb_higher) in &graph.adj[i] {
                if nb_higher {
                    let edge = &problem.edges[e];
                    let lj = labeling[j];
                    for (li, cv) in cond.iter_mut().enumerate() {
                        *cv += if edge.a == i {
                            edge.cost(li, lj, problem.labels(edge.b))
                        } else {
                            edge.cost(lj, li, problem.labels(edge.a))
                        };
                    }
                } else {
                    let incoming = msgs.incoming(e, !nb_higher);
                    for (cv, mv) in cond.iter_mut().zip(incoming) {
                        *cv += mv;
                    }
                }
            }
            labeling[i] = argmin(&cond);

            let scaled: Vec<f64> = th.iter().map(|v| (v - vmin) * graph.gamma[i]).collect();
            for &(_, e, nb_higher) in &graph.adj[i] {
                if !nb_higher {
                    let i_is_a = problem.edges[e].a == i;
                    bound += update_message(problem, &mut msgs, e, i_is_a, &scaled);
                }
            }
        }

        let energy = problem.evaluate(&labeling);
        if energy < best_energy {
            best_energy = energy;
            best_labeling = labeling;
        }
        lower_bounds.push(bound);
        energies.push(energy);

        // Converged when the bound stalls.
        if lower_bounds.len() >= 2 {
            let prev = lower_bounds[lower_bounds.len() - 2];
            if (bound - prev).abs() <= 1e-12 * bound.abs().max(1.0) {
                break;
            }
        }
    }

    TrwsResult {
        labeling: best_labeling,
        energy: best_energy,
        lower_bounds,
        energies,
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn exhaustive_min(p: &DiscreteProblem) -> (Vec<usize>, f64) {
        let n = p.num_nodes();
        let mut best = (vec![0; n], f64::INFINITY);
        let mut labeling = vec![0usize; n];
        loop {
            let e = p.evaluate(&labeling);
            if e < best.1 {
                best = (labeling.clone(), e);
            }
            // Odometer increment.
            let mut k = 0;
            loop {
                if k == n {
                    return best;
                }
                labeling[k] += 1;
                if labeling[k] < p.labels(k) {
                    break;
                }
                labeling[k] = 0;
                k += 1;
            }
        }
    }

    fn random_problem(
        rng: &mut ChaCha8Rng,
        n: usize,
        max_labels: usize,
        edges: &[(usize, usize)],
    ) -> DiscreteProblem {
        let unaries: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..rng.gen_range(1..=max_labels))
                    .map(|_| rng.gen_range(-5.0..5.0))
                    .collect()
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(a, b)| DiscreteEdge {
                a,
                b,
                costs: (0..unaries[a].len() * unaries[b].len())
                    .map(|_| rng.gen_range(-5.0..5.0))
                    .collect(),
            })
            .collect();
        DiscreteProblem { unaries, edges }
    }

    fn random_tree_edges(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|b| (rng.gen_range(0..b), b)).collect()
    }

    fn assert_monotone(bounds: &[f64]) {
        for w in bounds.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                "lower bound decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn chain_exact_map() {
        // Hand-set 3-node chain, 2 labels: compare to all 8 labelings.
        let p = DiscreteProblem {
            unaries: vec![vec![0.0, 2.0], vec![0.0, 0.0], vec![5.0, 0.0]],
            edges: vec![
                DiscreteEdge { a: 0, b: 1, costs: vec![0.0, 4.0, 4.0, 0.0] },
                DiscreteEdge { a: 1, b: 2, costs: vec![0.0, 4.0, 4.0, 0.0] },
            ],
        };
        let (want_labeling, want) = exhaustive_min(&p);
        let res = trws_solve(&p, 50);
        assert_eq!(res.labeling, want_labeling);
        assert_abs_diff_eq!(res.energy, want, epsilon = 1e-12);
        assert_abs_diff_eq!(*res.lower_bounds.last().unwrap(), want, epsilon = 1e-9);
        assert_monotone(&res.lower_bounds);
    }

    #[test]
    fn trees_exact_vs_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..60 {
            let n = rng.gen_range(2..=10);
            let edges = random_tree_edges(&mut rng, n);
            let p = random_problem(&mut rng, n, 3, &edges);
            let (_, want) = exhaustive_min(&p);
            let res = trws_solve(&p, 100);
            assert_abs_diff_eq!(res.energy, want, epsilon = 1e-9);
            assert_abs_diff_eq!(
                *res.lower_bounds.last().unwrap(),
                want,
                epsilon = 1e-9
            );
            assert_monotone(&res.lower_bounds);
            assert!(res.lower_bounds.iter().all(|b| *b <= want + 1e-9), "trial {trial}");
        }
    }

    #[test]
    fn zero_pairwise_decouples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(&mut rng, 6, 4, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]);
        for e in &mut p.edges {
            e.costs.iter_mut().for_each(|c| *c = 0.0);
        }
        let res = trws_solve(&p, 50);
        let want: Vec<usize> = p.unaries.iter().map(|u| argmin(u)).collect();
        assert_eq!(res.labeling, want);
    }

    #[test]
    fn cycles_bound_valid_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.gen_range(3..=8);
            let mut edges = random_tree_edges(&mut rng, n);
            // Add a couple of chords to create cycles.
            for _ in 0..2 {
                let a = rng.gen_range(0..n - 1);
                let b = rng.gen_range(a + 1..n);
                if !edges.contains(&(a, b)) {
                    edges.push((a, b));
                }
            }
            edges.sort_unstable();
            let p = random_problem(&mut rng, n, 3, &edges);
            let (_, want) = exhaustive_min(&p);
            let res = trws_solve(&p, 60);
            assert_monotone(&res.lower_bounds);
            for b in &res.lower_bounds {
                assert!(*b <= want + 1e-9, "bound {b} above optimum {want}");
            }
            assert!(res.energy >= want - 1e-9);
            assert!(res.energy >= *res.lower_bounds.last().unwrap() - 1e-9);
        }
    }

    #[test]
    fn four_cycle_beats_random_labelings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges = vec![(0, 1), (0, 3), (1, 2), (2, 3)];
        let p = random_problem(&mut rng, 4, 3, &edges);
        let res = trws_solve(&p, 60);
        for _ in 0..20 {
            let labeling: Vec<usize> = (0..4).map(|i| rng.gen_range(0..p.labels(i))).collect();
            assert!(res.energy <= p.evaluate(&labeling) + 1e-12);
        }
        assert!(res.energy >= *res.lower_bounds.last().unwrap() - 1e-9);
    }

    #[test]
    fn disconnected_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Two components: a 3-chain and an isolated pair plus a lone node.
        let edges = vec![(0, 1), (1, 2), (3, 4)];
        let p = random_problem(&mut rng, 6, 3, &edges);
        let (_, want) = exhaustive_min(&p);
        let res = trws_solve(&p, 80);
        assert_abs_diff_eq!(res.energy, want, epsilon = 1e-9);
        assert_abs_diff_eq!(*res.lower_bounds.last().unwrap(), want, epsilon = 1e-9);
        assert_monotone(&res.lower_bounds);
    }

    #[test]
    fn single_pass_still_returns_labeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_problem(&mut rng, 5, 3, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let res = trws_solve(&p, 1);
        assert_eq!(res.labeling.len(), 5);
        assert_eq!(res.lower_bounds.len(), 1);
    }
}

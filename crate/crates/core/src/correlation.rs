//! Layout graph over a frame's text boxes and attention-weighted neighbor
//! aggregation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::BoxCoords;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub d_corr: usize,
    pub max_neighbors: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            d_corr: 32,
            max_neighbors: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<usize>>,
    /// Per-node weights over `neighbors`, once computed.
    pub weights: Option<Vec<Vec<f64>>>,
    pub max_neighbors: usize,
}

impl NeighborGraph {
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// Flattened neighbor indices, node-major.
    pub fn flat(&self) -> Vec<usize> {
        self.neighbors.concat()
    }
}

/// k nearest boxes by Euclidean distance between centers; ties go to the lower index.
pub fn build_neighbor_graph(boxes: &[BoxCoords], max_neighbors: usize) -> NeighborGraph {
    let centers: Vec<(f64, f64)> = boxes.iter().map(BoxCoords::center).collect();
    let k = max_neighbors.min(boxes.len().saturating_sub(1));
    let neighbors = centers
        .iter()
        .enumerate()
        .map(|(j, &(xj, yj))| {
            let mut others: Vec<(f64, usize)> = centers
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(i, &(x, y))| ((x - xj).hypot(y - yj), i))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect();
    NeighborGraph {
        neighbors,
        weights: None,
        max_neighbors,
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `f_b(a_j) = Σ_i w(a_j, a_i) · f(a_i)` over the neighbors of `j`.
pub fn aggregate(graph: &NeighborGraph, features: &[Vec<f64>], j: usize) -> Result<Vec<f64>> {
    let d = features.get(j).map(Vec::len).ok_or_else(|| Error::Internal(format!("no box {j}")))?;
    let nbrs = &graph.neighbors[j];
    if nbrs.is_empty() {
        return Ok(vec![0.0; d]);
    }
    let w = graph
        .weights
        .as_ref()
        .and_then(|w| w.get(j))
        .ok_or_else(|| Error::Internal(format!("weights of box {j} are unset")))?;
    let total: f64 = w.iter().sum();
    if w.len() != nbrs.len() || (total - 1.0).abs() > 1e-9 || w.iter().any(|v| *v < 0.0) {
        return Err(Error::Internal(format!("weights of box {j} are not normalized (sum {total})")));
    }
    let mut out = vec![0.0; d];
    for (&i, &wi) in nbrs.iter().zip(w) {
        for (o, f) in out.iter_mut().zip(&features[i]) {
            *o += wi * f;
        }
    }
    Ok(out)
}

/// `[f_b ‖ f_1]`.
pub fn final_feature(f_b: &[f64], f_1: &[f64]) -> Result<Vec<f64>> {
    if f_b.len() != f_1.len() {
        return Err(Error::Config(format!(
            "aggregated feature has {} values, original has {}",
            f_b.len(),
            f_1.len()
        )));
    }
    Ok(f_b.iter().chain(f_1).copied().collect())
}

#[derive(Debug, Clone)]
pub struct CorrelationNet {
    pub config: CorrelationConfig,
    pub d_fused: usize,
    pub fc: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

/// Output of one CorrelationNet pass.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationOutput {
    /// `n × 2·d_fused`.
    pub features: Var,
    /// `n × degree` softmax weights, absent for isolated boxes.
    pub weights: Option<Var>,
}

impl CorrelationNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &CorrelationConfig, d_fused: usize) -> Result<Self> {
        if config.d_corr == 0 {
            return Err(Error::Config("d_corr must be positive".into()));
        }
        let d = config.d_corr;
        Ok(Self {
            config: config.clone(),
            d_fused,
            fc: Linear::new(store, rng, "corr.fc", d_fused, d, true),
            mlp1: Linear::new(store, rng, "corr.mlp1", d, d, true),
            mlp2: Linear::new(store, rng, "corr.mlp2", d, 1, true),
        })
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, diff: Var) -> Result<Var> {
        let h = self.mlp1.forward(g, p, diff)?;
        let h = g.relu(h)?;
        self.mlp2.forward(g, p, h)
    }

    /// Unnormalized scores `MLP(FC(f_j) − FC(f_k))` for every edge, `n × degree`.
    pub fn scores(&self, g: &mut Graph, p: &Bound, f1: Var, graph: &NeighborGraph) -> Result<Var> {
        let n = graph.neighbors.len();
        let k = graph.degree();
        let h = self.fc.forward(g, p, f1)?;
        let left: Vec<usize> = (0..n).flat_map(|j| std::iter::repeat_n(j, k)).collect();
        let hl = g.gather_rows(h, &left)?;
        let hr = g.gather_rows(h, &graph.flat())?;
        let diff = g.sub(hl, hr)?;
        let s = self.mlp(g, p, diff)?;
        g.reshape(s, &[n, k])
    }

    /// Attention-weighted neighbor aggregation followed by concatenation with the input features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f1: Var, graph: &NeighborGraph) -> Result<CorrelationOutput> {
        let (n, d) = (g.shape(f1)[0], g.shape(f1)[1]);
        if d != self.d_fused || n != graph.neighbors.len() {
            return Err(Error::Config(format!(
                "correlation input {:?} does not match {} boxes of width {}",
                g.shape(f1),
                graph.neighbors.len(),
                self.d_fused
            )));
        }
        if graph.degree() == 0 {
            let zeros = g.constant(Tensor::zeros(&[n, d]))?;
            let features = g.concat_cols(&[zeros, f1])?;
            return Ok(CorrelationOutput { features, weights: None });
        }
        let s = self.scores(g, p, f1, graph)?;
        let w = g.softmax(s, 1)?;
        let dense = g.scatter_dense(w, &graph.flat(), n)?;
        let agg = g.matmul(dense, f1)?;
        let features = g.concat_cols(&[agg, f1])?;
        Ok(CorrelationOutput {
            features,
            weights: Some(w),
        })
    }

    /// Aggregation replaced by zeros (the "without CorrelationNet" variant).
    pub fn bypass(&self, g: &mut Graph, f1: Var) -> Result<Var> {
        let shape = g.shape(f1).to_vec();
        let zeros = g.constant(Tensor::zeros(&shape))?;
        g.concat_cols(&[zeros, f1])
    }

    /// Score of a single ordered pair.
    pub fn pair_weight(&self, store: &ParamStore, f_j: &[f64], f_k: &[f64]) -> Result<f64> {
        if f_j.len() != self.d_fused || f_k.len() != self.d_fused {
            return Err(Error::Config(format!("pair_weight expects width {}", self.d_fused)));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let a = g.constant(Tensor::row(f_j.to_vec()))?;
        let b = g.constant(Tensor::row(f_k.to_vec()))?;
        let ha = self.fc.forward(&mut g, &p, a)?;
        let hb = self.fc.forward(&mut g, &p, b)?;
        let diff = g.sub(ha, hb)?;
        let s = self.mlp(&mut g, &p, diff)?;
        Ok(g.value(s).data()[0])
    }

    /// Fills `graph.weights` from plain feature rows.
    pub fn compute_weights(&self, store: &ParamStore, features: &[Vec<f64>], graph: &mut NeighborGraph) -> Result<()> {
        let weights = graph
            .neighbors
            .iter()
            .enumerate()
            .map(|(j, nb)| {
                let s = nb
                    .iter()
                    .map(|&i| self.pair_weight(store, &features[j], &features[i]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(softmax(&s))
            })
            .collect::<Result<Vec<_>>>()?;
        graph.weights = Some(weights);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::uniform;

    fn at_y(y: f64) -> BoxCoords {
        BoxCoords::new(0.4, y - 0.01, 0.6, y + 0.01).unwrap()
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoxCoords> {
        (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.9));
                BoxCoords::new(x, y, x + rng.gen_range(0.05..0.2), y + rng.gen_range(0.02..0.1)).unwrap()
            })
            .collect()
    }

    #[test]
    fn neighbor_graph_cases() {
        assert_eq!(build_neighbor_graph(&[at_y(0.5)], 4).neighbors, vec![Vec::<usize>::new()]);
        let g = build_neighbor_graph(&[at_y(0.2), at_y(0.5), at_y(0.9)], 1);
        assert_eq!(g.neighbors[1], vec![0]);
        // Equidistant neighbors resolve to the lower index.
        let g = build_neighbor_graph(&[at_y(0.5), at_y(0.25), at_y(0.75)], 1);
        assert_eq!(g.neighbors[0], vec![1]);
    }

    #[test]
    fn neighbor_graph_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let boxes = random_boxes(&mut rng, 8);
            let g = build_neighbor_graph(&boxes, 4);
            for (j, nb) in g.neighbors.iter().enumerate() {
                let (xj, yj) = boxes[j].center();
                let mut all: Vec<(f64, usize)> = (0..8)
                    .filter(|&i| i != j)
                    .map(|i| {
                        let (x, y) = boxes[i].center();
                        (((x - xj).powi(2) + (y - yj).powi(2)).sqrt(), i)
                    })
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<usize> = all[..4].iter().map(|e| e.1).collect();
                assert_eq!(nb, &want);
                assert!(!nb.contains(&j));
            }
        }
    }

    fn net(d_fused: usize) -> (ParamStore, CorrelationNet) {
        let mut store = ParamStore::new();
        let cfg = CorrelationConfig { d_corr: 6, max_neighbors: 4 };
        let n = CorrelationNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), &cfg, d_fused).unwrap();
        (store, n)
    }

    #[test]
    fn pair_weight_of_identical_features_is_constant() {
        let (store, n) = net(5);
        let a = n.pair_weight(&store, &[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = n.pair_weight(&store, &[-3.0; 5], &[-3.0; 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_cases() {
        let feats = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 10.0]];
        let mut g = NeighborGraph {
            neighbors: vec![vec![1], vec![0], vec![0], vec![0], vec![0]],
            weights: Some(vec![vec![1.0]; 5]),
            max_neighbors: 1,
        };
        assert_eq!(aggregate(&g, &feats, 0).unwrap(), vec![3.0, 4.0]);
        g.neighbors = vec![vec![1, 2, 3, 4]];
        g.weights = Some(vec![softmax(&[0.3; 4])]);
        let mean = aggregate(&g, &feats, 0).unwrap();
        assert!((mean[0] - 6.0).abs() < 1e-12 && (mean[1] - 7.0).abs() < 1e-12);
        g.weights = Some(vec![vec![0.5, 0.5, 0.5, 0.5]]);
        assert!(matches!(aggregate(&g, &feats, 0), Err(Error::Internal(_))));
        let isolated = NeighborGraph { neighbors: vec![vec![]], weights: None, max_neighbors: 4 };
        assert_eq!(aggregate(&isolated, &feats[..1], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn final_feature_contract() {
        assert_eq!(final_feature(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(final_feature(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0, 3.0, 4.0]);
        assert!(matches!(final_feature(&[1.0], &[3.0, 4.0]), Err(Error::Config(_))));
    }

    fn graph_forward(store: &ParamStore, n: &CorrelationNet, f1: &Tensor, graph: &NeighborGraph) -> (Tensor, Option<Tensor>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.constant(f1.clone()).unwrap();
        let out = n.forward(&mut g, &p, x, graph).unwrap();
        (g.value(out.features).clone(), out.weights.map(|w| g.value(w).clone()))
    }

    #[test]
    fn graph_forward_matches_direct_summation() {
        let (store, n) = net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let boxes = random_boxes(&mut rng, 5);
            let f1 = uniform(&mut rng, &[5, 5], 1.0);
            let rows: Vec<Vec<f64>> = (0..5).map(|i| f1.row_slice(i).to_vec()).collect();
            let mut graph = build_neighbor_graph(&boxes, 4);
            let (out, w) = graph_forward(&store, &n, &f1, &graph);
            for row in w.unwrap().data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            n.compute_weights(&store, &rows, &mut graph).unwrap();
            for j in 0..5 {
                let want = final_feature(&aggregate(&graph, &rows, j).unwrap(), &rows[j]).unwrap();
                assert_eq!(want.len(), 10);
                for (a, b) in out.row_slice(j).iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, n) = net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let boxes = random_boxes(&mut rng, 6);
        let f1 = uniform(&mut rng, &[6, 5], 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let pboxes: Vec<BoxCoords> = perm.iter().map(|&i| boxes[i]).collect();
        let pf1 = Tensor::from_rows(&perm.iter().map(|&i| f1.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, _) = graph_forward(&store, &n, &f1, &build_neighbor_graph(&boxes, 4));
        let (b, _) = graph_forward(&store, &n, &pf1, &build_neighbor_graph(&pboxes, 4));
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.row_slice(i).iter().zip(b.row_slice(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_box_aggregates_to_zero() {
        let (store, n) = net(3);
        let f1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let (out, w) = graph_forward(&store, &n, &f1, &build_neighbor_graph(&[at_y(0.5)], 4));
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(w.is_none());
    }

    #[test]
    fn gradient_through_fc_and_mlp() {
        let (store, n) = net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boxes = random_boxes(&mut rng, 4);
        let graph = build_neighbor_graph(&boxes, 2);
        let mut inputs = store.tensors().to_vec();
        inputs.push(uniform(&mut rng, &[4, 4], 1.0));
        let report = grad_check(
            |g, x| {
                let p = Bound::from_vars(x[..x.len() - 1].to_vec());
                let out = n.forward(g, &p, x[x.len() - 1], &graph)?;
                g.mul(out.features, out.features)
            },
            &inputs,
            GradCheckOptions::default(),
        );
        assert!(report.passed, "{report:?}");
    }
}

//! Random forest of Gini-grown decision trees.
//!
//! Each tree is grown greedily on a bootstrap sample with a random feature
//! subset (default sqrt(F)) per split; leaves hold the positive-class
//! fraction of their samples. Prediction averages leaf probabilities over
//! trees. Everything is deterministic for a given seed.

use std::path::Path;

use rand::Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::model::checkpoint::{Container, Payload};

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Minimum samples on each side of a split.
    pub min_leaf: usize,
    /// Features examined per split; default floor(sqrt(F)), at least 1.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 12,
            min_leaf: 1,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidConfig(
                "forest needs trees, max_depth, and min_leaf >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        prob: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut id = 0usize;
        loop {
            match &self.nodes[id] {
                Node::Leaf { prob } => return *prob,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if x[*feature as usize] < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for node in &self.nodes {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push(0);
                    out.extend_from_slice(&feature.to_le_bytes());
                    out.extend_from_slice(&threshold.to_le_bytes());
                    out.extend_from_slice(&left.to_le_bytes());
                    out.extend_from_slice(&right.to_le_bytes());
                }
                Node::Leaf { prob } => {
                    out.push(1);
                    out.extend_from_slice(&prob.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || -> Error { CheckpointError::Truncated("decision tree payload").into() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad());
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            match take(1)?[0] {
                0 => {
                    let feature = u32::from_le_bytes(take(4)?.try_into().unwrap());
                    let threshold = f64::from_le_bytes(take(8)?.try_into().unwrap());
                    let left = u32::from_le_bytes(take(4)?.try_into().unwrap());
                    let right = u32::from_le_bytes(take(4)?.try_into().unwrap());
                    nodes.push(Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    });
                }
                1 => {
                    let prob = f64::from_le_bytes(take(8)?.try_into().unwrap());
                    nodes.push(Node::Leaf { prob });
                }
                code => return Err(CheckpointError::UnknownPayload(code).into()),
            }
        }
        if nodes.is_empty() {
            return Err(bad());
        }
        Ok(DecisionTree { nodes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub n_features: usize,
    trees: Vec<DecisionTree>,
}

struct TreeBuilder<'d> {
    features: &'d [Vec<f64>],
    labels: &'d [u8],
    n_features: usize,
    per_split: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl<'d> TreeBuilder<'d> {
    fn leaf(&mut self, indices: &[usize]) -> u32 {
        let pos = indices.iter().filter(|&&i| self.labels[i] == 1).count();
        self.nodes.push(Node::Leaf {
            prob: pos as f64 / indices.len() as f64,
        });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, indices: &mut Vec<usize>, depth: usize, rng: &mut impl Rng) -> u32 {
        let pos = indices.iter().filter(|&&i| self.labels[i] == 1).count();
        let pure = pos == 0 || pos == indices.len();
        if pure || depth >= self.max_depth || indices.len() < 2 * self.min_leaf {
            return self.leaf(indices);
        }

        // Random feature subset, examined in ascending order for determinism.
        let mut pool: Vec<usize> = (0..self.n_features).collect();
        for k in 0..self.per_split.min(self.n_features) {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        let mut candidates = pool[..self.per_split.min(self.n_features)].to_vec();
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (weighted gini, feature, threshold)
        for &feature in &candidates {
            let mut pairs: Vec<(f64, u8)> = indices
                .iter()
                .map(|&i| (self.features[i][feature], self.labels[i]))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_pos = pos as f64;
            let n = pairs.len() as f64;
            let mut left_n = 0.0;
            let mut left_pos = 0.0;
            for k in 0..pairs.len() - 1 {
                left_n += 1.0;
                if pairs[k].1 == 1 {
                    left_pos += 1.0;
                }
                if pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                if (left_n as usize) < self.min_leaf
                    || (pairs.len() - left_n as usize) < self.min_leaf
                {
                    continue;
                }
                let right_n = n - left_n;
                let right_pos = total_pos - left_pos;
                let gini = |p: f64, m: f64| {
                    let q = p / m;
                    2.0 * q * (1.0 - q)
                };
                let weighted =
                    (left_n * gini(left_pos, left_n) + right_n * gini(right_pos, right_n)) / n;
                let threshold = (pairs[k].0 + pairs[k + 1].0) / 2.0;
                if best.is_none_or(|(g, _, _)| weighted < g) {
                    best = Some((weighted, feature, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(indices);
        };

        let (mut left, mut right): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.features[i][feature] < threshold);
        self.nodes.push(Node::Split {
            feature: feature as u32,
            threshold,
            left: 0,
            right: 0,
        });
        let me = self.nodes.len() - 1;
        let left_id = self.grow(&mut left, depth + 1, rng);
        let right_id = self.grow(&mut right, depth + 1, rng);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[me]
        {
            *l = left_id;
            *r = right_id;
        }
        me as u32
    }
}

/// Grow a forest on (feature vector, hard label) pairs. Requires at least two
/// samples and both classes present.
pub fn train_random_forest(
    features: &[Vec<f64>],
    labels: &[u8],
    config: &ForestConfig,
) -> Result<RandomForest> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature vectors vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 samples".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::InvalidInput(
            "training data must contain both classes".into(),
        ));
    }
    let n_features = features[0].len();
    if n_features == 0 || features.iter().any(|f| f.len() != n_features) {
        return Err(Error::InvalidInput(
            "feature vectors must share one non-zero length".into(),
        ));
    }

    let per_split = config
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
        .clamp(1, n_features);

    let mut trees = Vec::with_capacity(config.trees);
    for t in 0..config.trees {
        let mut rng = crate::rng::stream(config.seed, &[0x74726565, t as u64]); // "tree"
        let mut indices: Vec<usize> = (0..features.len())
            .map(|_| rng.random_range(0..features.len()))
            .collect();
        let mut builder = TreeBuilder {
            features,
            labels,
            n_features,
            per_split,
            max_depth: config.max_depth,
            min_leaf: config.min_leaf,
            nodes: Vec::new(),
        };
        let root = builder.grow(&mut indices, 0, &mut rng);
        debug_assert_eq!(root, 0);
        trees.push(DecisionTree {
            nodes: builder.nodes,
        });
    }
    Ok(RandomForest {
        config: config.clone(),
        n_features,
        trees,
    })
}

/// Mean of per-tree leaf probabilities, in [0,1].
pub fn rf_predict(forest: &RandomForest, x: &[f64]) -> Result<f64> {
    if x.len() != forest.n_features {
        return Err(Error::InvalidInput(format!(
            "feature vector has {} entries, forest expects {}",
            x.len(),
            forest.n_features
        )));
    }
    let sum: f64 = forest.trees.iter().map(|t| t.predict(x)).sum();
    Ok(sum / forest.trees.len() as f64)
}

impl RandomForest {
    pub fn tree_predictions(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    fn config_text(&self) -> String {
        format!(
            "kind=forest\ntrees={}\nmax_depth={}\nmin_leaf={}\nfeatures_per_split={}\nseed={}\nn_features={}\n",
            self.config.trees,
            self.config.max_depth,
            self.config.min_leaf,
            self.config.features_per_split.map_or(0, |v| v),
            self.config.seed,
            self.n_features,
        )
    }

    /// Serialize into the shared checkpoint container (tree payloads).
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .trees
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("tree{i:05}"), Payload::Bytes(t.to_bytes())))
            .collect();
        Container {
            config_text: self.config_text(),
            entries,
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::read(path)?;
        if container.kind() != Some("forest") {
            return Err(CheckpointError::BadConfig(format!(
                "expected kind=forest, got {:?}",
                container.kind().unwrap_or("<none>")
            ))
            .into());
        }
        let mut fields = std::collections::HashMap::new();
        for line in container.config_text.lines().skip(1) {
            if let Some((k, v)) = line.split_once('=') {
                let value: u64 = v
                    .parse()
                    .map_err(|_| CheckpointError::BadConfig(format!("bad value in {line:?}")))?;
                fields.insert(k.to_string(), value);
            }
        }
        let get = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| CheckpointError::BadConfig(format!("missing {k}")).into())
        };
        let config = ForestConfig {
            trees: get("trees")? as usize,
            max_depth: get("max_depth")? as usize,
            min_leaf: get("min_leaf")? as usize,
            features_per_split: match get("features_per_split")? {
                0 => None,
                v => Some(v as usize),
            },
            seed: get("seed")?,
        };
        let mut trees = Vec::with_capacity(container.entries.len());
        for (name, payload) in &container.entries {
            let Payload::Bytes(bytes) = payload else {
                return Err(CheckpointError::BadConfig(format!(
                    "forest entry {name:?} is not a tree payload"
                ))
                .into());
            };
            trees.push(DecisionTree::from_bytes(bytes)?);
        }
        if trees.len() != config.trees {
            return Err(CheckpointError::BadConfig(format!(
                "forest says {} trees but has {}",
                config.trees,
                trees.len()
            ))
            .into());
        }
        Ok(RandomForest {
            config,
            n_features: get("n_features")? as usize,
            trees,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_1d(n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let features: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i as f64 / n as f64 >= 0.5)).collect();
        (features, labels)
    }

    #[test]
    fn single_stump_separates_clustered_1d_data() {
        // Two clusters around 0.2 and 0.8: any bootstrap containing both
        // classes splits at 0.5 and reaches 100% train accuracy with one stump.
        let features: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { 0.2 } else { 0.8 }])
            .collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let config = ForestConfig {
            trees: 1,
            max_depth: 1,
            ..ForestConfig::default()
        };
        let forest = train_random_forest(&features, &labels, &config).unwrap();
        for (f, &y) in features.iter().zip(&labels) {
            let p = rf_predict(&forest, f).unwrap();
            assert_eq!(u8::from(p >= 0.5), y, "misclassified {f:?}");
        }
        assert_eq!(forest.trees[0].depth(), 1);
    }

    #[test]
    fn prediction_is_mean_of_tree_outputs() {
        use rand::Rng;
        let (features, labels) = separable_1d(40);
        let forest =
            train_random_forest(&features, &labels, &ForestConfig::default()).unwrap();
        let mut rng = crate::rng::stream(3, &[0]);
        for _ in 0..200 {
            let x = vec![rng.random_range(-0.2..1.2)];
            let votes = forest.tree_predictions(&x);
            let mean = votes.iter().sum::<f64>() / votes.len() as f64;
            let got = rf_predict(&forest, &x).unwrap();
            assert!((got - mean).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn unanimous_trees_give_hard_probabilities() {
        let (features, labels) = separable_1d(30);
        let forest = train_random_forest(
            &features,
            &labels,
            &ForestConfig {
                trees: 15,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        // Far from the boundary every tree votes the same way.
        assert_eq!(rf_predict(&forest, &[-1.0]).unwrap(), 0.0);
        assert_eq!(rf_predict(&forest, &[2.0]).unwrap(), 1.0);
        // Thresholded prediction equals the majority vote of the trees.
        for x in [-0.5, 0.2, 0.48, 0.52, 0.9] {
            let votes = forest.tree_predictions(&[x]);
            let majority = votes.iter().filter(|&&v| v >= 0.5).count() * 2 > votes.len();
            let predicted = rf_predict(&forest, &[x]).unwrap() >= 0.5;
            assert_eq!(predicted, majority, "at x={x}");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (features, labels) = separable_1d(50);
        let config = ForestConfig {
            trees: 8,
            seed: 42,
            ..ForestConfig::default()
        };
        let a = train_random_forest(&features, &labels, &config).unwrap();
        let b = train_random_forest(&features, &labels, &config).unwrap();
        let bytes = |f: &RandomForest| -> Vec<Vec<u8>> {
            f.trees.iter().map(DecisionTree::to_bytes).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));

        let c = train_random_forest(
            &features,
            &labels,
            &ForestConfig {
                seed: 43,
                ..config
            },
        )
        .unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn rejects_degenerate_training_data() {
        let features = vec![vec![0.1], vec![0.2]];
        assert!(train_random_forest(&features, &[1, 1], &ForestConfig::default()).is_err());
        assert!(train_random_forest(&features, &[0], &ForestConfig::default()).is_err());
        assert!(
            train_random_forest(&features[..1], &[1], &ForestConfig::default()).is_err()
        );
    }

    #[test]
    fn forest_round_trips_through_container() {
        let (features, labels) = separable_1d(30);
        let config = ForestConfig {
            trees: 5,
            seed: 7,
            ..ForestConfig::default()
        };
        let forest = train_random_forest(&features, &labels, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.ckpt");
        forest.save(&path).unwrap();
        let loaded = RandomForest::load(&path).unwrap();
        assert_eq!(loaded, forest);

        // Predicting with a wrong-length vector is rejected.
        assert!(rf_predict(&loaded, &[0.0, 1.0]).is_err());
    }
}

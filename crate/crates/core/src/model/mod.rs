//! The multi-branch network: a shared extractor `F`, one extractor `H_j` and
//! one softmax classifier `C_j` per source domain.

pub mod checkpoint;
mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use loss::{
    cls_loss, disc_loss, mmd_loss, total_loss, AlignmentConfig, DiscReduction, LossBreakdown,
    SourceBatch,
};

/// Widths of every block. `branch_widths` ends with the branch feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub common_widths: Vec<usize>,
    pub branch_widths: Vec<usize>,
    pub num_classes: usize,
    pub num_sources: usize,
}

impl Architecture {
    /// Desk-scale default: one shared layer of 32 units and a 2-layer branch
    /// ending in 16 features.
    pub fn desk_default(input_dim: usize, num_classes: usize, num_sources: usize) -> Self {
        Self {
            input_dim,
            common_widths: vec![32],
            branch_widths: vec![32, 16],
            num_classes,
            num_sources,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.input_dim == 0 {
            errs.push("input_dim must be >= 1".to_string());
        }
        if self.num_sources == 0 {
            errs.push("num_sources must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            errs.push("num_classes must be >= 2".to_string());
        }
        if self.common_widths.is_empty() || self.branch_widths.is_empty() {
            errs.push("common and branch blocks need at least one layer".to_string());
        }
        if self.common_widths.iter().chain(&self.branch_widths).any(|&w| w == 0) {
            errs.push("layer widths must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn common_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.common_widths.iter().copied())
            .collect()
    }

    pub fn branch_dims(&self) -> Vec<usize> {
        std::iter::once(*self.common_widths.last().unwrap_or(&self.input_dim))
            .chain(self.branch_widths.iter().copied())
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        *self.branch_widths.last().expect("validated architecture")
    }
}

/// Fully connected layers with relu between them. The output layer is
/// rectified only when `relu_output` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock<T> {
    layer_dims: Vec<usize>,
    relu_output: bool,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("glorot shape")
}

impl<T: Scalar> MlpBlock<T> {
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], relu_output: bool, rng: &mut R) -> Self {
        assert!(layer_dims.len() >= 2, "an MLP block needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            weights.push(glorot(w[0], w[1], rng));
            biases.push(Tensor::zeros(&[w[1]]));
        }
        Self {
            layer_dims: layer_dims.to_vec(),
            relu_output,
            weights,
            biases,
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.biases[layer]
    }

    fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|l| [format!("{prefix}.{l}.weight"), format!("{prefix}.{l}.bias")])
            .collect()
    }
}

/// Linear layer followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub extractor: MlpBlock<T>,
    pub classifier: Classifier<T>,
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Common,
    Branch(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfsanModel<T> {
    arch: Architecture,
    common: MlpBlock<T>,
    branches: Vec<Branch<T>>,
}

impl<T: Scalar> MfsanModel<T> {
    /// Glorot-uniform weights and zero biases. Branches draw independent values.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let common = MlpBlock::new(&arch.common_dims(), true, rng);
        let branches = (0..arch.num_sources)
            .map(|_| {
                let extractor = MlpBlock::new(&arch.branch_dims(), false, rng);
                let h = arch.feature_width();
                Branch {
                    extractor,
                    classifier: Classifier {
                        weight: glorot(h, arch.num_classes, rng),
                        bias: Tensor::zeros(&[arch.num_classes]),
                    },
                }
            })
            .collect();
        Ok(Self {
            arch,
            common,
            branches,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_sources(&self) -> usize {
        self.arch.num_sources
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn common(&self) -> &MlpBlock<T> {
        &self.common
    }

    pub fn common_mut(&mut self) -> &mut MlpBlock<T> {
        &mut self.common
    }

    pub fn branch(&self, j: usize) -> &Branch<T> {
        &self.branches[j]
    }

    pub fn branch_mut(&mut self, j: usize) -> &mut Branch<T> {
        &mut self.branches[j]
    }

    /// Every parameter in canonical order: the shared block, then per branch the
    /// extractor layers followed by the classifier weight and bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.common.params().collect();
        for b in &self.branches {
            out.extend(b.extractor.params());
            out.push(&b.classifier.weight);
            out.push(&b.classifier.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.common.params_mut().collect();
        for b in &mut self.branches {
            out.extend(b.extractor.params_mut());
            out.push(&mut b.classifier.weight);
            out.push(&mut b.classifier.bias);
        }
        out
    }

    /// Group of each entry of [`MfsanModel::params`].
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Common; 2 * self.common.num_layers()];
        for (j, b) in self.branches.iter().enumerate() {
            out.extend(std::iter::repeat_n(
                ParamGroup::Branch(j),
                2 * b.extractor.num_layers() + 2,
            ));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.common.param_names("common");
        for (j, b) in self.branches.iter().enumerate() {
            out.extend(b.extractor.param_names(&format!("branch{j}.extractor")));
            out.push(format!("branch{j}.classifier.weight"));
            out.push(format!("branch{j}.classifier.bias"));
        }
        out
    }

    /// Replaces all parameters, in canonical order.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("set_params", slot.shape(), v.shape()));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Records every parameter as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundModel<'g, T> {
        let vars: Vec<Var<'g, T>> = self.params().into_iter().map(|p| graph.param(p.clone())).collect();
        self.bound_from(graph, vars)
    }

    /// Records every parameter as a constant: forward passes without gradients.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> BoundModel<'g, T> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| graph.constant(p.clone()))
            .collect();
        self.bound_from(graph, vars)
    }

    /// Uses `vars` as the parameters, in [`MfsanModel::params`] order. Lets a
    /// gradient check drive the model through its own variables.
    pub fn bind_vars<'g>(&self, graph: &'g Graph<T>, vars: &[Var<'g, T>]) -> Result<BoundModel<'g, T>> {
        let params = self.params();
        if vars.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        for (v, p) in vars.iter().zip(&params) {
            if v.shape() != p.shape() {
                return Err(Error::shape("bind_vars", &v.shape(), p.shape()));
            }
        }
        Ok(self.bound_from(graph, vars.to_vec()))
    }

    fn bound_from<'g>(&self, graph: &'g Graph<T>, vars: Vec<Var<'g, T>>) -> BoundModel<'g, T> {
        let common_layers = self.common.num_layers();
        let branch_layers = self.branches.first().map_or(0, |b| b.extractor.num_layers());
        BoundModel {
            graph,
            vars,
            common_layers,
            branch_layers,
            common_relu_output: self.common.relu_output,
            num_sources: self.arch.num_sources,
            num_classes: self.arch.num_classes,
            input_dim: self.arch.input_dim,
        }
    }

    /// Average-vote prediction. Ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        let g = Graph::new();
        let bound = self.bind_frozen(&g);
        let outs = bound.forward_target(g.constant(x.clone()))?;
        let n = x.rows();
        let k = self.arch.num_classes;
        let nb = T::lit(outs.len() as f64);
        let mut avg = Tensor::zeros(&[n, k]);
        let mut per_branch_labels = Vec::with_capacity(outs.len());
        let mut per_branch_probs = Vec::with_capacity(outs.len());
        for out in &outs {
            let p = out.probs.value();
            for (a, &v) in avg.data_mut().iter_mut().zip(p.data()) {
                *a = *a + v;
            }
            per_branch_labels.push(argmax_rows(&p));
            per_branch_probs.push((*p).clone());
        }
        let avg = avg.map(|v| v / nb);
        Ok(Prediction {
            labels: argmax_rows(&avg),
            avg_probs: avg,
            per_branch_labels,
            per_branch_probs,
        })
    }

    /// Branch-`j` features `H_j(F(x))` as plain values.
    pub fn features(&self, j: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.bind_frozen(&g);
        let (h, _) = bound.forward_source(j, g.constant(x.clone()))?;
        let v = h.value();
        Ok((*v).clone())
    }
}

/// Row-wise argmax, first maximum wins.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub labels: Vec<usize>,
    pub avg_probs: Tensor<T>,
    /// `per_branch_labels[j][i]`: argmax of classifier `j` on row `i`.
    pub per_branch_labels: Vec<Vec<usize>>,
    pub per_branch_probs: Vec<Tensor<T>>,
}

/// Output of one branch on one batch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput<'g, T> {
    pub features: Var<'g, T>,
    pub logits: Var<'g, T>,
    pub probs: Var<'g, T>,
}

/// A model whose parameters live on a [`Graph`].
pub struct BoundModel<'g, T> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
    common_layers: usize,
    branch_layers: usize,
    common_relu_output: bool,
    num_sources: usize,
    num_classes: usize,
    input_dim: usize,
}

impl<'g, T: Scalar> BoundModel<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Parameter nodes in canonical order.
    pub fn param_vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dense(
        &self,
        x: Var<'g, T>,
        first_param: usize,
        layers: usize,
        relu_output: bool,
    ) -> Result<Var<'g, T>> {
        let mut h = x;
        for l in 0..layers {
            let w = self.vars[first_param + 2 * l];
            let b = self.vars[first_param + 2 * l + 1];
            h = h.matmul(w)?.add(b)?;
            if l + 1 < layers || relu_output {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn branch_offset(&self, j: usize) -> usize {
        2 * self.common_layers + j * (2 * self.branch_layers + 2)
    }

    fn check_branch(&self, j: usize) -> Result<()> {
        if j >= self.num_sources {
            return Err(Error::Index {
                what: "branch",
                index: j,
                len: self.num_sources,
            });
        }
        Ok(())
    }

    /// Shared representation `F(x)`.
    pub fn common(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape("common extractor input", &shape, &[0, self.input_dim]));
        }
        self.dense(x, 0, self.common_layers, self.common_relu_output)
    }

    /// `H_j` and `C_j` applied to an already shared representation.
    pub fn branch(&self, j: usize, common: Var<'g, T>) -> Result<BranchOutput<'g, T>> {
        self.check_branch(j)?;
        let off = self.branch_offset(j);
        let features = self.dense(common, off, self.branch_layers, false)?;
        let cw = self.vars[off + 2 * self.branch_layers];
        let cb = self.vars[off + 2 * self.branch_layers + 1];
        let logits = features.matmul(cw)?.add(cb)?;
        let probs = logits.softmax()?;
        Ok(BranchOutput {
            features,
            logits,
            probs,
        })
    }

    /// `(H_j(F(x)), C_j(H_j(F(x))))`.
    pub fn forward_source(&self, j: usize, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        self.check_branch(j)?;
        let out = self.branch(j, self.common(x)?)?;
        Ok((out.features, out.probs))
    }

    /// Every branch on the target batch; `F(x)` is computed once.
    pub fn forward_target(&self, x: Var<'g, T>) -> Result<Vec<BranchOutput<'g, T>>> {
        let f = self.common(x)?;
        (0..self.num_sources).map(|j| self.branch(j, f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, k: usize) -> MfsanModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MfsanModel::new(Architecture::desk_default(5, k, n), &mut rng).unwrap()
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    #[test]
    fn zero_classifier_gives_uniform_probs() {
        let mut m = model(2, 4);
        for j in 0..2 {
            let c = &mut m.branch_mut(j).classifier;
            c.weight = Tensor::zeros(c.weight.shape());
        }
        let g = Graph::new();
        let b = m.bind(&g);
        let (h, p) = b.forward_source(1, g.constant(randn(6, 5, 1))).unwrap();
        assert_eq!(h.shape(), vec![6, 16]);
        assert!(p.value().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identity_weights_reproduce_nonnegative_input() {
        let arch = Architecture {
            input_dim: 3,
            common_widths: vec![3, 3],
            branch_widths: vec![3, 3],
            num_classes: 2,
            num_sources: 1,
        };
        let mut m: MfsanModel<f64> = MfsanModel::new(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for l in 0..2 {
            *m.common_mut().weight_mut(l) = Tensor::eye(3);
            *m.branch_mut(0).extractor.weight_mut(l) = Tensor::eye(3);
        }
        let x = Tensor::new(&[2, 3], vec![0.0, 1.5, 2.0, 3.0, 0.25, 7.0]).unwrap();
        assert_eq!(m.features(0, &x).unwrap(), x);
    }

    #[test]
    fn bad_branch_index() {
        let m = model(2, 3);
        let g = Graph::new();
        let b = m.bind(&g);
        assert!(matches!(
            b.forward_source(2, g.constant(randn(2, 5, 0))),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn forward_target_single_branch_matches_source_shape() {
        let m = model(1, 3);
        let g = Graph::new();
        let b = m.bind(&g);
        let x = g.constant(randn(4, 5, 2));
        let outs = b.forward_target(x).unwrap();
        let (h, p) = b.forward_source(0, x).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].features.shape(), h.shape());
        assert_eq!(outs[0].probs.shape(), p.shape());
    }

    #[test]
    fn identical_and_distinct_branches() {
        let mut m = model(2, 3);
        let g = Graph::new();
        let x = randn(4, 5, 9);
        {
            let b = m.bind(&g);
            let outs = b.forward_target(g.constant(x.clone())).unwrap();
            assert_ne!(*outs[0].probs.value(), *outs[1].probs.value());
        }
        let b0 = m.branch(0).clone();
        *m.branch_mut(1) = b0;
        let g = Graph::new();
        let b = m.bind(&g);
        let outs = b.forward_target(g.constant(x)).unwrap();
        assert_eq!(*outs[0].probs.value(), *outs[1].probs.value());
        assert_eq!(*outs[0].features.value(), *outs[1].features.value());
    }

    #[test]
    fn params_groups_and_names_line_up() {
        let m = model(3, 4);
        let n = m.params().len();
        assert_eq!(m.param_groups().len(), n);
        assert_eq!(m.param_names().len(), n);
        assert_eq!(m.param_groups()[0], ParamGroup::Common);
        assert_eq!(*m.param_groups().last().unwrap(), ParamGroup::Branch(2));
    }

    fn with_probs(rows: &[Vec<Vec<f64>>]) -> MfsanModel<f64> {
        // rows[j] = probabilities of branch j; realised through the classifier bias
        // on a zero classifier weight: logits = log p
        let k = rows[0][0].len();
        let mut m = model(rows.len(), k);
        for (j, r) in rows.iter().enumerate() {
            let c = &mut m.branch_mut(j).classifier;
            c.weight = Tensor::zeros(c.weight.shape());
            c.bias = Tensor::new(&[k], r[0].iter().map(|p| p.ln()).collect()).unwrap();
        }
        m
    }

    #[test]
    fn predict_average_vote() {
        let m = with_probs(&[vec![vec![0.6, 0.4]], vec![vec![0.2, 0.8]]]);
        let pred = m.predict(&randn(1, 5, 0)).unwrap();
        assert!((pred.avg_probs.data()[0] - 0.4).abs() < 1e-12);
        assert!((pred.avg_probs.data()[1] - 0.6).abs() < 1e-12);
        assert_eq!(pred.labels, vec![1]);
        assert_eq!(pred.per_branch_labels, vec![vec![0], vec![1]]);
    }

    #[test]
    fn predict_single_branch_and_tie() {
        let m = with_probs(&[vec![vec![0.3, 0.7]]]);
        let pred = m.predict(&randn(3, 5, 1)).unwrap();
        assert_eq!(pred.labels, pred.per_branch_labels[0]);
        let tie = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_rows(&tie), vec![0]);
    }
}

//! MLP backbones, linear classifier heads, dimension adapters, and the
//! head sharing operations (attach a frozen teacher head, transplant a head).
//!
//! A [`ModelBundle`] computes
//!
//! ```text
//! x -> backbone -> z -> adapter -> features -> head     -> p
//!                                           \-> aux_head -> p_th
//! ```
//!
//! `features` is the vector every classifier reads and the vector used for
//! representation distillation and angle measurements. Without an adapter
//! it is the backbone embedding itself.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// Layer widths of a backbone plus the classifier it feeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl MlpArch {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            embedding_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::arg("input_dim", "must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::arg("embedding_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::arg("hidden", "widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg("num_classes", "must be at least 2"));
        }
        Ok(())
    }

    /// `in->h1->...->embedding`, for messages and checkpoints.
    pub fn describe(&self) -> String {
        let mut parts = vec![self.input_dim.to_string()];
        parts.extend(self.hidden.iter().map(usize::to_string));
        parts.push(self.embedding_dim.to_string());
        format!("{} | {} classes", parts.join("->"), self.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
    pub trainable: bool,
}

impl LinearLayer {
    /// Uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`, weights then bias, row-major.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias: Vec<f64> = (0..out_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Tensor::matrix(out_dim, in_dim, weight).expect("sized"),
            bias: Tensor::vector(bias).expect("sized"),
            trainable: true,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = weight.shape() else {
            return Err(Error::arg(
                "weight",
                format!("expected rank 2, got {:?}", weight.shape()),
            ));
        };
        if bias.shape() != [*out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight,
            bias,
            trainable: true,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[dim]),
            trainable: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// `x W^T + b`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.transpose()?)?.add(&self.bias)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.leaf(self.weight.clone(), self.trainable),
            bias: g.leaf(self.bias.clone(), self.trainable),
        }
    }
}

/// Graph leaves for one [`LinearLayer`].
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let wt = g.transpose(self.weight);
        let xw = g.matmul(x, wt);
        g.add(xw, self.bias)
    }
}

/// Linear layers with ReLU between them; no activation after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    pub layers: Vec<LinearLayer>,
}

impl MlpBackbone {
    pub fn init(arch: &MlpArch, rng: &mut Rng) -> Self {
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embedding_dim);
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if x.row_len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.map(|v| if v < 0.0 { 0.0 } else { v });
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub layer: LinearLayer,
}

impl ClassifierHead {
    pub fn init(in_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Self {
            layer: LinearLayer::init(in_dim, num_classes, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        if z.row_len() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "head",
                lhs: z.shape().to_vec(),
                rhs: self.layer.weight.shape().to_vec(),
            });
        }
        self.layer.forward(z)
    }

    /// Softmax probabilities.
    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.logits(z)?.softmax_rows())
    }

    pub fn is_frozen(&self) -> bool {
        !self.layer.trainable
    }
}

/// Linear map from one embedding width to another. With equal widths and
/// `identity_if_equal` it is the exact identity and carries no parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DimensionAdapter {
    Identity { dim: usize },
    Linear(LinearLayer),
}

impl DimensionAdapter {
    pub fn new(in_dim: usize, out_dim: usize, identity_if_equal: bool, rng: &mut Rng) -> Self {
        if identity_if_equal && in_dim == out_dim {
            DimensionAdapter::Identity { dim: in_dim }
        } else {
            DimensionAdapter::Linear(LinearLayer::init(in_dim, out_dim, rng))
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            DimensionAdapter::Identity { dim } => *dim,
            DimensionAdapter::Linear(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            DimensionAdapter::Identity { dim } => *dim,
            DimensionAdapter::Linear(l) => l.out_dim(),
        }
    }

    pub fn apply(&self, z: Tensor) -> Result<Tensor> {
        match self {
            DimensionAdapter::Identity { .. } => Ok(z),
            DimensionAdapter::Linear(l) => l.forward(&z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: MlpArch,
    pub backbone: MlpBackbone,
    pub adapter: Option<DimensionAdapter>,
    pub head: ClassifierHead,
    pub aux_head: Option<ClassifierHead>,
}

impl ModelBundle {
    /// Fresh model. `feature_dim` adds an adapter from the embedding width to
    /// that width (an identity adapter when they match). Backbone and head
    /// draw from the init stream and the adapter from its own stream, so two
    /// bundles of one architecture and seed share backbone weights whether or
    /// not they carry an adapter.
    pub fn init(arch: &MlpArch, feature_dim: Option<usize>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if feature_dim == Some(0) {
            return Err(Error::arg("feature_dim", "must be positive"));
        }
        let mut rng = Rng::stream(seed, Stream::Init, 0);
        let backbone = MlpBackbone::init(arch, &mut rng);
        let mut adapter_rng = Rng::stream(seed, Stream::Adapter, 0);
        let adapter = feature_dim
            .map(|d| DimensionAdapter::new(arch.embedding_dim, d, true, &mut adapter_rng));
        let head_in = feature_dim.unwrap_or(arch.embedding_dim);
        let head = ClassifierHead::init(head_in, arch.num_classes, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            backbone,
            adapter,
            head,
            aux_head: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    /// Width of the vector the heads read.
    pub fn feature_dim(&self) -> usize {
        self.adapter
            .as_ref()
            .map_or(self.embedding_dim(), DimensionAdapter::out_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Backbone output `z`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.embed(x)
    }

    /// Adapter applied to the embedding.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.embed(x)?;
        match &self.adapter {
            Some(a) => a.apply(z),
            None => Ok(z),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.logits(&self.features(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.head.predict(&self.features(x)?)
    }

    /// Inference prediction. With an auxiliary head the two heads' outputs
    /// are blended with weight `alpha_th` on the auxiliary one.
    pub fn predict_combined(&self, x: &Tensor, alpha_th: f64) -> Result<Tensor> {
        let f = self.features(x)?;
        let p = self.head.predict(&f)?;
        match &self.aux_head {
            Some(aux) => combine_head_predictions(&p, &aux.predict(&f)?, alpha_th),
            None => Ok(p),
        }
    }

    /// Attach a deep, frozen copy of `teacher_head` as the auxiliary head,
    /// replacing any existing one.
    pub fn attach_teacher_head(mut self, teacher_head: &ClassifierHead) -> Result<Self> {
        if teacher_head.in_dim() != self.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "teacher head reads {} features but the student produces {} (add an adapter)",
                teacher_head.in_dim(),
                self.feature_dim()
            )));
        }
        if teacher_head.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "teacher head has {} classes, student has {}",
                teacher_head.num_classes(),
                self.num_classes()
            )));
        }
        let mut aux = teacher_head.clone();
        aux.layer.trainable = false;
        self.aux_head = Some(aux);
        Ok(self)
    }

    /// Replace the main head with a copy of `source_head`; frozen when `freeze`.
    pub fn transplant_head(mut self, source_head: &ClassifierHead, freeze: bool) -> Result<Self> {
        if source_head.in_dim() != self.feature_dim()
            || source_head.num_classes() != self.num_classes()
        {
            return Err(Error::DimensionMismatch(format!(
                "cannot transplant a head of shape {:?} onto a model with {} features and {} classes",
                source_head.layer.weight.shape(),
                self.feature_dim(),
                self.num_classes()
            )));
        }
        let mut head = source_head.clone();
        head.layer.trainable = !freeze;
        self.head = head;
        Ok(self)
    }

    /// Every parameterised layer with its name, in a fixed order: backbone,
    /// adapter, head, auxiliary head.
    pub fn named_layers(&self) -> Vec<(String, &LinearLayer)> {
        let mut out: Vec<(String, &LinearLayer)> = self
            .backbone
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), l))
            .collect();
        if let Some(DimensionAdapter::Linear(l)) = &self.adapter {
            out.push(("adapter".into(), l));
        }
        out.push(("head".into(), &self.head.layer));
        if let Some(aux) = &self.aux_head {
            out.push(("aux_head".into(), &aux.layer));
        }
        out
    }

    /// Same order as [`Self::named_layers`].
    pub fn layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut out: Vec<&mut LinearLayer> = self.backbone.layers.iter_mut().collect();
        if let Some(DimensionAdapter::Linear(l)) = &mut self.adapter {
            out.push(l);
        }
        out.push(&mut self.head.layer);
        if let Some(aux) = &mut self.aux_head {
            out.push(&mut aux.layer);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundBundle {
        BoundBundle {
            backbone: self.backbone.layers.iter().map(|l| l.bind(g)).collect(),
            adapter: match &self.adapter {
                Some(DimensionAdapter::Linear(l)) => Some(l.bind(g)),
                _ => None,
            },
            head: self.head.layer.bind(g),
            aux_head: self.aux_head.as_ref().map(|h| h.layer.bind(g)),
        }
    }
}

/// A [`ModelBundle`]'s parameters as graph leaves.
#[derive(Debug, Clone)]
pub struct BoundBundle {
    pub backbone: Vec<BoundLinear>,
    pub adapter: Option<BoundLinear>,
    pub head: BoundLinear,
    pub aux_head: Option<BoundLinear>,
}

impl BoundBundle {
    pub fn embed(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.backbone.iter().enumerate() {
            h = layer.apply(g, h);
            if i + 1 < self.backbone.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn features(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let z = self.embed(g, x);
        match &self.adapter {
            Some(a) => a.apply(g, z),
            None => z,
        }
    }

    /// Leaves in the order of [`ModelBundle::named_layers`].
    pub fn layers(&self) -> Vec<BoundLinear> {
        let mut out = self.backbone.clone();
        out.extend(self.adapter);
        out.push(self.head);
        out.extend(self.aux_head);
        out
    }
}

/// `(1 - alpha_th) * p_s + alpha_th * p_s_th`
pub fn combine_head_predictions(p_s: &Tensor, p_s_th: &Tensor, alpha_th: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_th) {
        return Err(Error::arg(
            "alpha_th",
            format!("must lie in [0, 1], got {alpha_th}"),
        ));
    }
    if p_s.shape() != p_s_th.shape() {
        return Err(Error::ShapeMismatch {
            op: "combine_head_predictions",
            lhs: p_s.shape().to_vec(),
            rhs: p_s_th.shape().to_vec(),
        });
    }
    if alpha_th == 0.0 {
        return Ok(p_s.clone());
    }
    if alpha_th == 1.0 {
        return Ok(p_s_th.clone());
    }
    p_s.zip_broadcast(p_s_th, "combine_head_predictions", |a, b| {
        (1.0 - alpha_th) * a + alpha_th * b
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(hidden: &[usize], embed: usize) -> MlpArch {
        MlpArch::new(5, hidden, embed, 3)
    }

    #[test]
    fn zero_backbone_embeds_to_zero() {
        let mut b = ModelBundle::init(&arch(&[4], 3), None, 1).unwrap();
        for l in b.layers_mut() {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        let x = Tensor::matrix(2, 5, (0..10).map(f64::from).collect()).unwrap();
        assert!(b.embed(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_embeds_input() {
        let bb = MlpBackbone {
            layers: vec![LinearLayer::identity(2)],
        };
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(bb.embed(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn embed_is_reproducible() {
        let a = ModelBundle::init(&arch(&[8, 8], 4), None, 42).unwrap();
        let b = ModelBundle::init(&arch(&[8, 8], 4), None, 42).unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(a.embed(&x).unwrap(), b.embed(&x).unwrap());
    }

    #[test]
    fn embed_rejects_wrong_width() {
        let a = ModelBundle::init(&arch(&[], 4), None, 0).unwrap();
        assert!(a.embed(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn predict_uniform_and_two_thirds() {
        let mut head = ClassifierHead::init(2, 4, &mut Rng::from_seed(0));
        head.layer.weight.data_mut().fill(0.0);
        head.layer.bias.data_mut().fill(0.0);
        let p = head
            .predict(&Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap())
            .unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut head = ClassifierHead::init(1, 2, &mut Rng::from_seed(0));
        head.layer.weight.data_mut().fill(0.0);
        head.layer.bias = Tensor::vector(vec![2f64.ln(), 0.0]).unwrap();
        let p = head
            .predict(&Tensor::matrix(1, 1, vec![0.0]).unwrap())
            .unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_adapter_is_exact() {
        let a = DimensionAdapter::new(4, 4, true, &mut Rng::from_seed(1));
        let z = Tensor::matrix(1, 4, vec![0.1, -3.0, 1e-300, 7.5]).unwrap();
        assert_eq!(a.apply(z.clone()).unwrap(), z);
        assert!(matches!(
            DimensionAdapter::new(4, 4, false, &mut Rng::from_seed(1)),
            DimensionAdapter::Linear(_)
        ));
    }

    #[test]
    fn attach_replaces_and_freezes() {
        let teacher = ModelBundle::init(&arch(&[8], 6), None, 3).unwrap();
        let student = ModelBundle::init(&arch(&[4], 6), None, 4).unwrap();
        let s = student.attach_teacher_head(&teacher.head).unwrap();
        let s = s.attach_teacher_head(&teacher.head).unwrap();
        let aux = s.aux_head.as_ref().unwrap();
        assert!(aux.is_frozen());
        assert_eq!(aux.layer.weight, teacher.head.layer.weight);
        assert_eq!(
            s.named_layers()
                .iter()
                .filter(|(n, _)| n == "aux_head")
                .count(),
            1
        );
        // the teacher keeps its own, still trainable, head
        assert!(!teacher.head.is_frozen());
    }

    #[test]
    fn attach_with_adapter_gives_teacher_head_predictions() {
        let teacher = ModelBundle::init(&arch(&[16], 16), None, 3).unwrap();
        let student = ModelBundle::init(&arch(&[8], 8), Some(16), 4).unwrap();
        let s = student.attach_teacher_head(&teacher.head).unwrap();
        let x = Tensor::matrix(3, 5, vec![0.5; 15]).unwrap();
        let f = s.features(&x).unwrap();
        let p = s.aux_head.as_ref().unwrap().predict(&f).unwrap();
        assert_eq!(p.shape(), &[3, 3]);

        let bare = ModelBundle::init(&arch(&[8], 8), None, 4).unwrap();
        assert!(matches!(
            bare.attach_teacher_head(&teacher.head),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn transplant_sets_head_and_flag() {
        let src = ModelBundle::init(&arch(&[4], 8), None, 1).unwrap();
        let t = ModelBundle::init(&arch(&[32], 8), None, 2).unwrap();
        let frozen = t.clone().transplant_head(&src.head, true).unwrap();
        assert_eq!(frozen.head.layer.weight, src.head.layer.weight);
        assert!(frozen.head.is_frozen());
        let open = t.transplant_head(&src.head, false).unwrap();
        assert!(!open.head.is_frozen());

        let wide = ModelBundle::init(&arch(&[32], 16), None, 2).unwrap();
        assert!(wide.transplant_head(&src.head, true).is_err());
    }

    #[test]
    fn copied_backbone_with_teacher_head_matches_teacher() {
        let teacher = ModelBundle::init(&arch(&[8, 8], 6), None, 9).unwrap();
        let mut student = ModelBundle::init(&arch(&[8, 8], 6), None, 10).unwrap();
        student.backbone = teacher.backbone.clone();
        let student = student.attach_teacher_head(&teacher.head).unwrap();
        let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let pt = teacher.predict(&x).unwrap();
        let pth = student.predict_combined(&x, 1.0).unwrap();
        for (a, b) in pt.data().iter().zip(pth.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let b = ModelBundle::init(&arch(&[7, 6], 4), Some(9), 5).unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.11).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let bound = b.bind(&mut g);
        let xn = g.constant(x.clone());
        let f = bound.features(&mut g, xn);
        let logits = bound.head.apply(&mut g, f);
        assert_eq!(g.forward(logits).unwrap(), b.logits(&x).unwrap());
    }

    #[test]
    fn combine_heads() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(combine_head_predictions(&a, &b, 0.0).unwrap(), a);
        assert_eq!(combine_head_predictions(&a, &b, 1.0).unwrap(), b);
        assert_eq!(
            combine_head_predictions(&a, &b, 0.5).unwrap().data(),
            &[0.5, 0.5]
        );
        assert!(combine_head_predictions(&a, &Tensor::zeros(&[1, 3]), 0.5).is_err());
        assert!(combine_head_predictions(&a, &b, 1.5).is_err());
    }
}

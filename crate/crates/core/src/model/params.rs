use diffcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{NetConfig, Prior};
use crate::error::{Error, Result};

/// Parameter groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Bottleneck,
    Angular,
    Spatial,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Encoder,
        Group::Bottleneck,
        Group::Angular,
        Group::Spatial,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Bottleneck => "bottleneck",
            Group::Angular => "angular",
            Group::Spatial => "spatial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution followed by leaky ReLU.
    Conv { stride: usize },
    /// Stride-2 transpose convolution followed by leaky ReLU.
    ConvT,
    /// 3x3 convolution without activation.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub group: Group,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
}

impl LayerSpec {
    pub const KERNEL: usize = 3;

    fn new(
        name: impl Into<String>,
        group: Group,
        kind: LayerKind,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            name: name.into(),
            group,
            kind,
            cin,
            cout,
        }
    }

    /// Kernel shape: `[3, 3, cin, cout]`, or `[3, 3, cout, cin]` for
    /// transpose convolutions.
    pub fn weight_shape(&self) -> Vec<usize> {
        let k = Self::KERNEL;
        match self.kind {
            LayerKind::ConvT => vec![k, k, self.cout, self.cin],
            _ => vec![k, k, self.cin, self.cout],
        }
    }

    pub fn parameter_count(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.cin * self.cout + self.cout
    }
}

/// Branch name prefix for the `i`-th residual branch.
pub fn branch_name(i: usize) -> &'static str {
    ["res_a", "res_b"][i]
}

/// Every layer of the network in construction order.
pub fn layer_plan(c: &NetConfig) -> Vec<LayerSpec> {
    use Group::*;
    use LayerKind::*;
    let conv = Conv { stride: 1 };
    let mut out = Vec::new();
    let mut prev = c.channels;
    for k in 1..=c.depth {
        let f = c.enc_filters(k);
        out.push(LayerSpec::new(
            format!("enc{k}.conv1"),
            Encoder,
            conv,
            prev,
            f,
        ));
        out.push(LayerSpec::new(format!("enc{k}.conv2"), Encoder, conv, f, f));
        out.push(LayerSpec::new(
            format!("enc{k}.down"),
            Encoder,
            Conv { stride: 2 },
            f,
            f,
        ));
        prev = f;
    }
    let b = c.bottleneck_filters();
    out.push(LayerSpec::new(
        "bottleneck.conv1",
        Bottleneck,
        conv,
        prev,
        b,
    ));
    out.push(LayerSpec::new("bottleneck.conv2", Bottleneck, conv, b, b));

    let mut prev = b;
    for k in (1..=c.depth).rev() {
        let g = c.dec_filters(k);
        out.push(LayerSpec::new(
            format!("ang{k}.up"),
            Angular,
            ConvT,
            prev,
            g,
        ));
        out.push(LayerSpec::new(
            format!("ang{k}.conv1"),
            Angular,
            conv,
            g + c.enc_filters(k),
            g,
        ));
        out.push(LayerSpec::new(format!("ang{k}.conv2"), Angular, conv, g, g));
        prev = g;
    }
    out.push(LayerSpec::new("ang.head1", Angular, conv, prev, prev));
    out.push(LayerSpec::new("ang.head2", Angular, conv, prev, prev));
    out.push(LayerSpec::new(
        "ang.out",
        Angular,
        Linear,
        prev,
        c.flow_channels(),
    ));

    let mut prev = b;
    for k in (2..=c.depth).rev() {
        let g = c.dec_filters(k);
        out.push(LayerSpec::new(format!("sp{k}.up"), Spatial, ConvT, prev, g));
        if k > 2 {
            out.push(LayerSpec::new(format!("sp{k}.conv1"), Spatial, conv, g, g));
            out.push(LayerSpec::new(format!("sp{k}.conv2"), Spatial, conv, g, g));
        }
        prev = g;
    }
    let g1 = c.dec_filters(1);
    let r = c.residual_channels();
    for (i, &prior) in c.residual_order.branches().iter().enumerate() {
        let p = c.prior_channels(prior);
        let n = branch_name(i);
        out.push(LayerSpec::new(format!("{n}.up1"), Spatial, ConvT, prev, g1));
        out.push(LayerSpec::new(
            format!("{n}.conv1"),
            Spatial,
            conv,
            g1 + p,
            g1,
        ));
        out.push(LayerSpec::new(format!("{n}.conv2"), Spatial, conv, g1, g1));
        out.push(LayerSpec::new(format!("{n}.up2"), Spatial, ConvT, g1, r));
        out.push(LayerSpec::new(
            format!("{n}.conv3"),
            Spatial,
            conv,
            r + p,
            r,
        ));
        out.push(LayerSpec::new(format!("{n}.out"), Spatial, Linear, r, r));
    }
    out
}

/// All weights and biases of the network plus per-group freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    layers: Vec<LayerSpec>,
    /// Two tensors per layer: kernel then bias.
    tensors: Vec<Tensor>,
    frozen: [bool; 4],
}

impl ModelParams {
    /// He-initialized weights (normal, `std = sqrt(2 / fan_in)`) and zero
    /// biases, deterministic in `seed`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layer_plan(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(2 * layers.len());
        for l in &layers {
            let fan_in = (LayerSpec::KERNEL * LayerSpec::KERNEL * l.cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = l.weight_shape();
            tensors.push(Tensor::from_fn(&shape, |_| normal.sample(&mut rng)));
            tensors.push(Tensor::zeros(&[l.cout]));
        }
        Ok(Self {
            config: config.clone(),
            layers,
            tensors,
            frozen: [false; 4],
        })
    }

    /// Assembles parameters from tensors in plan order (kernel, bias per
    /// layer), checking every shape.
    pub fn from_tensors(config: &NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layers = layer_plan(config);
        if tensors.len() != 2 * layers.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * layers.len(),
                tensors.len()
            )));
        }
        for (l, pair) in layers.iter().zip(tensors.chunks_exact(2)) {
            if pair[0].shape() != l.weight_shape() || pair[1].shape() != [l.cout] {
                return Err(Error::Shape(format!(
                    "layer {} expects kernel {:?} and bias [{}], got {:?} and {:?}",
                    l.name,
                    l.weight_shape(),
                    l.cout,
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            tensors,
            frozen: [false; 4],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// `(name, group, tensor)` for every parameter tensor in plan order;
    /// names end in `.w` or `.b`.
    pub fn named(&self) -> impl Iterator<Item = (String, Group, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| {
            let l = &self.layers[i / 2];
            let suffix = if i % 2 == 0 { "w" } else { "b" };
            (format!("{}.{suffix}", l.name), l.group, t)
        })
    }

    /// Group owning tensor `i`.
    pub fn group_of(&self, i: usize) -> Group {
        self.layers[i / 2].group
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn group_parameter_count(&self, g: Group) -> usize {
        (0..self.tensors.len())
            .filter(|&i| self.group_of(i) == g)
            .map(|i| self.tensors[i].len())
            .sum()
    }

    pub fn set_frozen(&mut self, g: Group, frozen: bool) {
        self.frozen[g as usize] = frozen;
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen[g as usize]
    }

    /// Sets the kernel and bias of layer `name` to zero.
    pub fn zero_layer(&mut self, name: &str) -> Result<()> {
        let i = self
            .layer_index(name)
            .ok_or_else(|| Error::Argument(format!("no layer named {name}")))?;
        for t in &mut self.tensors[2 * i..2 * i + 2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    /// Zeroes the flow output layer, so the angular path reduces to shifting.
    pub fn zero_flow_head(&mut self) -> Result<()> {
        self.zero_layer("ang.out")
    }

    /// Zeroes the output layer of every residual branch, so the spatial path
    /// reduces to bilinear upsampling.
    pub fn zero_residual_heads(&mut self) -> Result<()> {
        for i in 0..self.config.residual_order.branches().len() {
            self.zero_layer(&format!("{}.out", branch_name(i)))?;
        }
        Ok(())
    }

    /// Order-sensitive 64-bit hash of the parameter bits of one group.
    pub fn group_hash(&self, g: Group) -> u64 {
        let mut bytes = Vec::new();
        for i in (0..self.tensors.len()).filter(|&i| self.group_of(i) == g) {
            for v in self.tensors[i].data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        super::config::fnv1a(&bytes)
    }

    /// Residual branches as `(prefix, prior)`.
    pub fn branches(&self) -> Vec<(&'static str, Prior)> {
        self.config
            .residual_order
            .branches()
            .iter()
            .enumerate()
            .map(|(i, &p)| (branch_name(i), p))
            .collect()
    }
}

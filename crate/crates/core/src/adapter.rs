//! Understanding adapters: map a frozen encoder embedding to prefix tokens
//! in model dimension.
//!
//! Pipeline: depthwise 1D convolution along the sequence axis (S rows down
//! to P), a linear projection (encoder dim up to model dim), then three
//! gated dense sub-blocks with skip connections:
//!
//! `X_i = X_{i-1} + L2_i(SiLU(L1_i(N_i(X_{i-1}))) * L3_i(N_i(X_{i-1})))`
//!
//! where `N_i` is RMS normalization with a learned gain and `*` is the
//! elementwise product. Weights are Xavier-uniform from a seeded PRNG,
//! biases start at zero, so a freshly zeroed sub-block is an exact identity.
//!
//! The convolution is depthwise (one filter per encoder channel): kernel
//! size and stride are derived from the input length so that any S >= P
//! reduces to exactly P positions, and the kernel stays small even for very
//! long video sequences.

use crate::encoders::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, Parameter, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    /// Encoder feature dimension (columns of the input embedding).
    pub in_dim: usize,
    /// Model dimension D of the prefix tokens.
    pub model_dim: usize,
    /// Number of prefix tokens P produced by the convolution.
    pub prefix_len: usize,
    /// Input sequence length S the conv geometry is built for.
    pub seq_len: usize,
}

impl AdapterConfig {
    /// Derived conv geometry: stride `floor(S/P)` and the kernel size that
    /// makes the final window end exactly at the last input position.
    pub fn conv_geometry(&self) -> Result<(usize, usize)> {
        if self.prefix_len == 0 || self.model_dim == 0 || self.in_dim == 0 {
            return Err(Error::Config(
                "adapter dimensions must be positive".into(),
            ));
        }
        if self.seq_len < self.prefix_len {
            return Err(Error::Config(format!(
                "input length {} is shorter than prefix length {}",
                self.seq_len, self.prefix_len
            )));
        }
        let stride = self.seq_len / self.prefix_len;
        let kernel = self.seq_len - (self.prefix_len - 1) * stride;
        Ok((kernel, stride))
    }
}

/// One gated dense sub-block with a skip connection.
#[derive(Debug)]
pub struct SubBlock {
    pub gain: Parameter,
    pub l1_w: Parameter,
    pub l1_b: Parameter,
    pub l2_w: Parameter,
    pub l2_b: Parameter,
    pub l3_w: Parameter,
    pub l3_b: Parameter,
}

impl SubBlock {
    fn new<R: Rng>(prefix: &str, d: usize, rng: &mut R) -> Result<SubBlock> {
        let lin = |rng: &mut R| xavier_uniform(rng, d, d, &[d, d]);
        Ok(SubBlock {
            gain: Parameter::new(format!("{prefix}.norm.gain"), Tensor::full(&[d], 1.0))?,
            l1_w: Parameter::new(format!("{prefix}.L1.weight"), lin(rng))?,
            l1_b: Parameter::new(format!("{prefix}.L1.bias"), Tensor::zeros(&[d]))?,
            l2_w: Parameter::new(format!("{prefix}.L2.weight"), lin(rng))?,
            l2_b: Parameter::new(format!("{prefix}.L2.bias"), Tensor::zeros(&[d]))?,
            l3_w: Parameter::new(format!("{prefix}.L3.weight"), lin(rng))?,
            l3_b: Parameter::new(format!("{prefix}.L3.bias"), Tensor::zeros(&[d]))?,
        })
    }

    /// `x + L2(SiLU(L1(N(x))) * L3(N(x)))` for a `[P, D]` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = x.rms_norm(self.gain.tensor())?;
        let a = normed
            .matmul(self.l1_w.tensor())?
            .add_row(self.l1_b.tensor())?
            .silu();
        let b = normed
            .matmul(self.l3_w.tensor())?
            .add_row(self.l3_b.tensor())?;
        let gated = a.mul(&b)?;
        let out = gated
            .matmul(self.l2_w.tensor())?
            .add_row(self.l2_b.tensor())?;
        x.add(&out)
    }

    fn params(&self) -> Vec<Parameter> {
        vec![
            self.gain.clone(),
            self.l1_w.clone(),
            self.l1_b.clone(),
            self.l2_w.clone(),
            self.l2_b.clone(),
            self.l3_w.clone(),
            self.l3_b.clone(),
        ]
    }
}

/// A full understanding adapter for one modality.
#[derive(Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    conv: Parameter,
    proj: Parameter,
    blocks: Vec<SubBlock>,
}

impl Adapter {
    /// Builds an adapter with fresh seeded weights. `prefix` namespaces the
    /// parameters, e.g. `adapter.music`.
    pub fn new<R: Rng>(prefix: &str, cfg: AdapterConfig, rng: &mut R) -> Result<Adapter> {
        let (kernel, _) = cfg.conv_geometry()?;
        let conv = Parameter::new(
            format!("{prefix}.conv.weight"),
            xavier_uniform(rng, kernel, 1, &[cfg.in_dim, kernel]),
        )?;
        // The projection starts hot (4x fan-based init): a fresh adapter
        // then emits prefixes at residual-stream scale, so training reshapes
        // their content instead of first spending steps growing magnitude.
        let proj = Parameter::new(
            format!("{prefix}.proj.weight"),
            xavier_uniform(rng, cfg.in_dim, cfg.model_dim, &[cfg.in_dim, cfg.model_dim]).scale(4.0),
        )?;
        let blocks = (1..=3)
            .map(|i| SubBlock::new(&format!("{prefix}.subblock{i}"), cfg.model_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Adapter {
            cfg,
            conv,
            proj,
            blocks,
        })
    }

    /// Maps an encoder embedding `[S, in_dim]` to prefix tokens `[P, D]`.
    pub fn forward(&self, emb: &ModalityEmbedding) -> Result<Tensor> {
        self.forward_tensor(&emb.tensor)
    }

    /// Same as [`Adapter::forward`] but on a bare tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.cfg.seq_len, self.cfg.in_dim] {
            return Err(Error::Shape {
                op: "adapter_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.cfg.seq_len, self.cfg.in_dim],
            });
        }
        let (_, stride) = self.cfg.conv_geometry()?;
        // [S, d_enc] -> [d_enc, S] -> conv -> [d_enc, P] -> [P, d_enc]
        let pooled = x
            .transpose()?
            .conv1d_depthwise(self.conv.tensor(), stride)?
            .transpose()?;
        let mut h = pooled.matmul(self.proj.tensor())?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    pub fn subblocks(&self) -> &[SubBlock] {
        &self.blocks
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut out = vec![self.conv.clone(), self.proj.clone()];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }
}

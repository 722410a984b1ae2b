//! The three fusion classifiers behind one interface: per-modality feature
//! sequences in, 21 genre logits out.
//!
//! * MLP: masked temporal mean per modality, concatenated, hidden layer(s)
//!   with ReLU and dropout, then the 21-way head.
//! * Single transformer: each modality is projected to `model_dim`, gets
//!   its own positional table and a leading SEP vector; segments are joined
//!   along time behind one CLS vector and run through a shared encoder. The
//!   CLS output feeds the head.
//! * Multi transformer: one projection, positional table, CLS vector and
//!   encoder per modality; CLS outputs are concatenated channel-wise.
//!   Temporally averaged modalities skip the encoder and contribute their
//!   projected mean directly.
//!
//! SEP vectors receive no positional embedding. Padding is masked out of
//! every attention and every temporal mean.

use crate::data::batch::{single_sample, Batch, ModalityInput};
use crate::data::record::VideoRecord;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::model::config::{Architecture, Modality, ModalitySpec, ModelConfig};
use crate::model::genres::NUM_GENRES;
use crate::nn::layers::{
    EncoderShape, ForwardCtx, LearnedVector, Linear, PositionalTable, TransformerEncoder,
};
use crate::nn::params::{BoundParams, ParameterStore};
use crate::rng::SeededRng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
struct MlpNet {
    hidden: Vec<Linear>,
    dropout: f64,
    head: Linear,
}

#[derive(Clone, Debug)]
struct Segment {
    spec: ModalitySpec,
    projection: Linear,
    sep: LearnedVector,
    positions: Option<PositionalTable>,
}

#[derive(Clone, Debug)]
struct SingleNet {
    cls: LearnedVector,
    segments: Vec<Segment>,
    encoder: TransformerEncoder,
    dropout: f64,
    head: Linear,
}

#[derive(Clone, Debug)]
struct BranchEncoder {
    positions: PositionalTable,
    cls: LearnedVector,
    encoder: TransformerEncoder,
}

#[derive(Clone, Debug)]
struct Branch {
    spec: ModalitySpec,
    projection: Linear,
    sequence: Option<BranchEncoder>,
}

#[derive(Clone, Debug)]
struct MultiNet {
    branches: Vec<Branch>,
    dropout: f64,
    head: Linear,
}

#[derive(Clone, Debug)]
enum Network {
    Mlp(MlpNet),
    Single(SingleNet),
    Multi(MultiNet),
}

/// Per-genre probabilities and thresholded decisions for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub decisions: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct GenreClassifier<T> {
    config: ModelConfig,
    params: ParameterStore<T>,
    net: Network,
}

impl<T: Float> GenreClassifier<T> {
    /// Builds the network for `config` and initializes its parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = SeededRng::new(seed);
        let net = build(&config, &mut params, &mut rng)?;
        Ok(GenreClassifier {
            config,
            params,
            net,
        })
    }

    /// Builds the network for `config` and adopts `params`, which must have
    /// exactly the expected names and shapes.
    pub fn from_parameters(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            let first_diff = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), got.len()));
            return Err(Error::Config(format!(
                "parameters do not match the configuration: {first_diff}"
            )));
        }
        Ok(GenreClassifier {
            config: fresh.config,
            params,
            net: fresh.net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_parameter_count()
    }

    pub fn cast<U: Float>(&self) -> GenreClassifier<U> {
        GenreClassifier {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    /// Width of the vector entering the 21-way head.
    pub fn head_input_dim(&self) -> usize {
        match &self.net {
            Network::Mlp(n) => n.head.in_dim,
            Network::Single(n) => n.head.in_dim,
            Network::Multi(n) => n.head.in_dim,
        }
    }

    /// Per-modality caps applied at unbatched inference: transformer
    /// sequences are cut to their positional table; everything else keeps
    /// full duration.
    pub fn inference_limits(&self) -> Vec<Option<usize>> {
        self.config
            .modalities
            .iter()
            .map(|m| {
                if self.config.architecture.is_transformer() && !m.temporal_average {
                    Some(m.train_max_len)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Records the forward pass into `g` and returns `[B, 21]` logits.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        batch: &Batch,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        for spec in &self.config.modalities {
            let input = batch.input(spec.name)?;
            if input.dim() != spec.input_dim {
                return Err(Error::Data(format!(
                    "{} input has dim {}, model expects {}",
                    spec.name,
                    input.dim(),
                    spec.input_dim
                )));
            }
        }
        match &self.net {
            Network::Mlp(n) => mlp_forward(n, &self.config, g, p, batch, ctx),
            Network::Single(n) => single_forward(n, g, p, batch, ctx),
            Network::Multi(n) => multi_forward(n, g, p, batch, ctx),
        }
    }

    /// Eval-mode logits for a prepared batch.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut rng = SeededRng::new(0);
        let out = self.forward(&mut g, &p, batch, &mut ForwardCtx::eval(&mut rng))?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode probabilities for one record at natural length.
    pub fn probabilities(&self, record: &VideoRecord) -> Result<Vec<f64>> {
        let batch = single_sample(record, &self.config.modalities, &self.inference_limits())?;
        let logits = self.logits(&batch)?;
        Ok(logits.data().iter().map(|&z| sigmoid(z.as_f64())).collect())
    }

    /// Probabilities plus `p >= threshold` decisions.
    pub fn predict(&self, record: &VideoRecord, threshold: f64) -> Result<Prediction> {
        let probabilities = self.probabilities(record)?;
        let decisions = probabilities.iter().map(|&p| p >= threshold).collect();
        Ok(Prediction {
            probabilities,
            decisions,
        })
    }
}

fn encoder_shape(config: &ModelConfig) -> EncoderShape {
    EncoderShape {
        dim: config.model_dim,
        heads: config.heads,
        ffn_dim: config.ffn_mult * config.model_dim,
        dropout: config.dropout,
        norm_first: config.norm_first,
        ln_eps: config.layer_norm_eps,
    }
}

fn build<T: Float>(
    config: &ModelConfig,
    store: &mut ParameterStore<T>,
    rng: &mut SeededRng,
) -> Result<Network> {
    let d = config.model_dim;
    match config.architecture {
        Architecture::Mlp => {
            let mut in_dim: usize = config.modalities.iter().map(|m| m.input_dim).sum();
            let mut hidden = Vec::with_capacity(config.layers);
            for i in 0..config.layers {
                hidden.push(Linear::register(store, &format!("mlp.hidden.{i}"), in_dim, d, rng)?);
                in_dim = d;
            }
            let head = Linear::register(store, "head", in_dim, NUM_GENRES, rng)?;
            Ok(Network::Mlp(MlpNet {
                hidden,
                dropout: config.dropout,
                head,
            }))
        }
        Architecture::SingleTransformer => {
            let cls = LearnedVector::register(store, "single.cls", d, rng)?;
            let mut segments = Vec::with_capacity(config.modalities.len());
            for spec in &config.modalities {
                let m = spec.name;
                let projection =
                    Linear::register(store, &format!("single.{m}.proj"), spec.input_dim, d, rng)?;
                let sep = LearnedVector::register(store, &format!("single.{m}.sep"), d, rng)?;
                let positions = if spec.temporal_average {
                    None
                } else {
                    Some(PositionalTable::register(
                        store,
                        &format!("single.{m}.pos"),
                        spec.train_max_len,
                        d,
                        rng,
                    )?)
                };
                segments.push(Segment {
                    spec: *spec,
                    projection,
                    sep,
                    positions,
                });
            }
            let encoder = TransformerEncoder::register(
                store,
                "single.encoder",
                config.layers,
                encoder_shape(config),
                rng,
            )?;
            let head = Linear::register(store, "head", d, NUM_GENRES, rng)?;
            Ok(Network::Single(SingleNet {
                cls,
                segments,
                encoder,
                dropout: config.dropout,
                head,
            }))
        }
        Architecture::MultiTransformer => {
            let mut branches = Vec::with_capacity(config.modalities.len());
            for spec in &config.modalities {
                let m = spec.name;
                let projection =
                    Linear::register(store, &format!("multi.{m}.proj"), spec.input_dim, d, rng)?;
                let sequence = if spec.temporal_average {
                    None
                } else {
                    Some(BranchEncoder {
                        positions: PositionalTable::register(
                            store,
                            &format!("multi.{m}.pos"),
                            spec.train_max_len,
                            d,
                            rng,
                        )?,
                        cls: LearnedVector::register(store, &format!("multi.{m}.cls"), d, rng)?,
                        encoder: TransformerEncoder::register(
                            store,
                            &format!("multi.{m}.encoder"),
                            config.layers,
                            encoder_shape(config),
                            rng,
                        )?,
                    })
                };
                branches.push(Branch {
                    spec: *spec,
                    projection,
                    sequence,
                });
            }
            let head = Linear::register(store, "head", d * branches.len(), NUM_GENRES, rng)?;
            Ok(Network::Multi(MultiNet {
                branches,
                dropout: config.dropout,
                head,
            }))
        }
    }
}

fn constant_input<T: Float>(g: &mut Graph<T>, input: &ModalityInput) -> Var {
    g.constant(input.features.cast())
}

fn mlp_forward<T: Float>(
    net: &MlpNet,
    config: &ModelConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    batch: &Batch,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let mut means = Vec::with_capacity(config.modalities.len());
    for spec in &config.modalities {
        let input = batch.input(spec.name)?;
        let x = constant_input(g, input);
        means.push(g.masked_mean(x, &input.mask)?);
    }
    let mut h = if means.len() == 1 {
        means[0]
    } else {
        g.concat(&means, 1)?
    };
    for layer in &net.hidden {
        h = layer.forward(g, p, h)?;
        h = g.relu(h);
        h = g.dropout(h, net.dropout, ctx.train, ctx.rng)?;
    }
    net.head.forward(g, p, h)
}

/// Projected temporal mean of one modality as `[B, D]`.
fn averaged_projection<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    projection: &Linear,
    input: &ModalityInput,
) -> Result<Var> {
    let x = constant_input(g, input);
    let mean = g.masked_mean(x, &input.mask)?;
    projection.forward(g, p, mean)
}

/// Projected sequence plus positions, `[B, L, D]`.
fn embedded_sequence<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    projection: &Linear,
    positions: &PositionalTable,
    input: &ModalityInput,
) -> Result<Var> {
    let x = constant_input(g, input);
    let h = projection.forward(g, p, x)?;
    positions.add_to(g, p, h)
}

/// Output at sequence position 0, `[B, D]`.
fn first_position<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let first = g.narrow(x, 1, 0, 1)?;
    g.reshape(first, &[s[0], s[2]])
}

fn single_forward<T: Float>(
    net: &SingleNet,
    g: &mut Graph<T>,
    p: &BoundParams,
    batch: &Batch,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let b = batch.len();
    let d = net.cls.dim;
    let mut parts = vec![net.cls.as_sequence(g, p, b)?];
    // per-sample masks for each part, concatenated at the end
    let mut part_masks: Vec<Vec<bool>> = vec![vec![true; b]];
    for seg in &net.segments {
        let input = batch.input(seg.spec.name)?;
        parts.push(seg.sep.as_sequence(g, p, b)?);
        part_masks.push(vec![true; b]);
        match &seg.positions {
            None => {
                let v = averaged_projection(g, p, &seg.projection, input)?;
                parts.push(g.reshape(v, &[b, 1, d])?);
                part_masks.push(vec![true; b]);
            }
            Some(table) => {
                parts.push(embedded_sequence(g, p, &seg.projection, table, input)?);
                part_masks.push(input.mask.clone());
            }
        }
    }
    let x = g.concat(&parts, 1)?;
    let total = g.shape(x)[1];
    let mut mask = Vec::with_capacity(b * total);
    for bi in 0..b {
        for m in &part_masks {
            let len = m.len() / b;
            mask.extend_from_slice(&m[bi * len..(bi + 1) * len]);
        }
    }
    let h = net.encoder.forward(g, p, x, &mask, ctx)?;
    let cls = first_position(g, h)?;
    let cls = g.dropout(cls, net.dropout, ctx.train, ctx.rng)?;
    net.head.forward(g, p, cls)
}

fn multi_forward<T: Float>(
    net: &MultiNet,
    g: &mut Graph<T>,
    p: &BoundParams,
    batch: &Batch,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let b = batch.len();
    let mut summaries = Vec::with_capacity(net.branches.len());
    for branch in &net.branches {
        let input = batch.input(branch.spec.name)?;
        let summary = match &branch.sequence {
            None => averaged_projection(g, p, &branch.projection, input)?,
            Some(seq) => {
                let body = embedded_sequence(g, p, &branch.projection, &seq.positions, input)?;
                let cls = seq.cls.as_sequence(g, p, b)?;
                let x = g.concat(&[cls, body], 1)?;
                let l = input.seq_len();
                let mut mask = Vec::with_capacity(b * (l + 1));
                for bi in 0..b {
                    mask.push(true);
                    mask.extend_from_slice(&input.mask[bi * l..(bi + 1) * l]);
                }
                let h = seq.encoder.forward(g, p, x, &mask, ctx)?;
                first_position(g, h)?
            }
        };
        summaries.push(summary);
    }
    let h = if summaries.len() == 1 {
        summaries[0]
    } else {
        g.concat(&summaries, 1)?
    };
    let h = g.dropout(h, net.dropout, ctx.train, ctx.rng)?;
    net.head.forward(g, p, h)
}

/// Modalities a model consumes, in configuration order.
pub fn modalities_of(config: &ModelConfig) -> Vec<Modality> {
    config.modalities.iter().map(|m| m.name).collect()
}

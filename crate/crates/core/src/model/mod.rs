//! The full classifier: RG-Fusion → HC-Pooling → classifier head, with the
//! VLCA branch as an auxiliary objective.

pub mod hc_pooling;
pub mod layers;
pub mod rg_fusion;
pub mod vlca;

use autograd::{ParamStore, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::atlas::CircuitAtlas;
use crate::data::{GroupTemplates, PreparedSubject, Scaler};
use crate::error::{Error, Result};

pub use hc_pooling::{HcPooling, MaskSnapshot, PoolOutput, TreeMode};
pub use layers::{Ctx, Gate, Linear};
pub use rg_fusion::{GraphOperators, NodeEmbeddings, RgFusion, RgFusionDims};
pub use vlca::{AttentionSnapshot, NoiseMode, PriorType, Vlca, VlcaOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classifier on circuit embeddings plus the variational causal objective.
    Full,
    /// Classifier on plain attention outputs; no latent or causal branch.
    StandardAttention,
    /// Causal objective with `z = mu` in both branches and no KL term.
    DeterministicCausal,
    /// Factual branch only: CE on the prediction head plus KL.
    VariationalNoCausal,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "standard_attention" => Ok(Variant::StandardAttention),
            "deterministic_causal" => Ok(Variant::DeterministicCausal),
            "variational_no_causal" => Ok(Variant::VariationalNoCausal),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_regions: usize,
    pub n_timepoints: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ve_hidden: usize,
    pub ve_latent: usize,
    pub vlca_attn: usize,
    pub vlca_latent: usize,
    pub cls_hidden: [usize; 2],
    pub cls_dropout: f64,
    pub block_dropout: f64,
    pub attn_temp: f64,
    pub depth: usize,
    pub eps: f64,
    pub tree_mode: TreeMode,
    pub variant: Variant,
    pub noise_mode: NoiseMode,
    pub prior: PriorType,
    pub beta: f64,
}

impl ModelConfig {
    pub fn desk(n_regions: usize, n_timepoints: usize) -> Self {
        ModelConfig {
            n_regions,
            n_timepoints,
            feature_dim: n_regions + crate::data::prepare::EXTRA_NODE_FEATURES,
            d_model: 32,
            n_heads: 4,
            ve_hidden: 32,
            ve_latent: 16,
            vlca_attn: 16,
            vlca_latent: 8,
            cls_hidden: [128, 64],
            cls_dropout: 0.5,
            block_dropout: 0.2,
            attn_temp: 0.1,
            depth: 3,
            eps: 0.5,
            tree_mode: TreeMode::Literal,
            variant: Variant::Full,
            noise_mode: NoiseMode::Independent,
            prior: PriorType::Zero,
            beta: 0.1,
        }
    }

    pub fn full(n_regions: usize, n_timepoints: usize) -> Self {
        ModelConfig {
            d_model: 128,
            vlca_attn: 64,
            vlca_latent: 32,
            ..Self::desk(n_regions, n_timepoints)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, p: f64| {
            if (0.0..1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1), got {p}")))
            }
        };
        rate("cls_dropout", self.cls_dropout)?;
        rate("block_dropout", self.block_dropout)?;
        if !(self.beta >= 0.0) || !(self.attn_temp > 0.0) {
            return Err(Error::Config("beta must be >= 0 and attention temperature > 0".into()));
        }
        Ok(())
    }
}

/// Per-subject model input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub id: String,
    pub label: u8,
    /// Standardized node features.
    pub x1: Tensor,
    pub x2: Tensor,
    pub fc: Tensor,
    pub graph: crate::data::BrainGraph,
    pub ops: GraphOperators,
}

impl ModelInput {
    pub fn new(p: &PreparedSubject, scaler: &Scaler) -> Self {
        Self::with_graph(p, scaler, &p.graph)
    }

    pub fn with_graph(p: &PreparedSubject, scaler: &Scaler, graph: &crate::data::BrainGraph) -> Self {
        ModelInput {
            id: p.id.clone(),
            label: p.label,
            x1: scaler.apply(&p.raw_x1),
            x2: p.x2.clone(),
            fc: p.fc.clone(),
            graph: graph.clone(),
            ops: GraphOperators::new(graph),
        }
    }

    /// Same input with a different graph.
    pub fn regraph(&self, graph: crate::data::BrainGraph) -> Self {
        ModelInput {
            ops: GraphOperators::new(&graph),
            graph,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub dropout: f64,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, fan_in: usize, hidden: [usize; 2], dropout: f64, rng: &mut RngStream) -> Self {
        Classifier {
            l1: Linear::new(store, "cls.l1", fan_in, hidden[0], true, rng),
            l2: Linear::new(store, "cls.l2", hidden[0], hidden[1], true, rng),
            l3: Linear::new(store, "cls.l3", hidden[1], 2, true, rng),
            dropout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mut rng: Option<&mut RngStream>) -> Result<Var> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.leaky_relu(h);
        let h = ctx.dropout(h, self.dropout, rng.as_deref_mut())?;
        let h = self.l2.forward(ctx, h)?;
        let h = ctx.tape.leaky_relu(h);
        let h = ctx.dropout(h, self.dropout, rng)?;
        self.l3.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct SubjectOutput {
    /// Classifier logits, `1 x 2`.
    pub logits: Var,
    pub nodes: NodeEmbeddings,
    pub pool: PoolOutput,
    pub vlca: VlcaOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub rg: RgFusion,
    pub hc: HcPooling,
    pub vlca: Vlca,
    pub classifier: Classifier,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, "init");
        let dims = RgFusionDims {
            t: config.n_timepoints,
            feature_dim: config.feature_dim,
            d: config.d_model,
            n_heads: config.n_heads,
            ve_hidden: config.ve_hidden,
            ve_latent: config.ve_latent,
            attn_temp: config.attn_temp,
            dropout: config.block_dropout,
        };
        let rg = RgFusion::new(&mut params, dims, &mut rng)?;
        let hc = HcPooling::new(
            &mut params,
            config.ve_latent,
            config.d_model,
            config.depth,
            config.eps,
            config.tree_mode,
            &mut rng,
        )?;
        let vlca = Vlca::new(&mut params, config.d_model, config.vlca_attn, config.vlca_latent, &mut rng);
        let cls_in = match config.variant {
            Variant::StandardAttention => 5 * config.vlca_attn,
            _ => 5 * config.d_model,
        };
        let classifier = Classifier::new(&mut params, cls_in, config.cls_hidden, config.cls_dropout, &mut rng);
        Ok(Model {
            config,
            params,
            rg,
            hc,
            vlca,
            classifier,
        })
    }

    /// One subject's forward pass. In training mode `rng` supplies every
    /// noise source via labelled child streams; `label` enables the
    /// adjacency prior loss.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_subject(
        &self,
        ctx: &mut Ctx,
        input: &ModelInput,
        atlas: &CircuitAtlas,
        templates: &GroupTemplates,
        tau: f64,
        label: Option<u8>,
        rng: Option<&RngStream>,
    ) -> Result<SubjectOutput> {
        if input.x1.cols() != self.config.feature_dim || input.x2.cols() != self.config.n_timepoints {
            return Err(Error::Data(format!(
                "subject {}: input shape {}x{} / {}x{} does not match the model",
                input.id,
                input.x1.rows(),
                input.x1.cols(),
                input.x2.rows(),
                input.x2.cols()
            )));
        }
        let training = ctx.training;
        let child = |name: &str| if training { rng.map(|r| r.child(name)) } else { None };
        let mut rg_rng = child("rg");
        let hc_rng = child("hc");
        let mut vlca_rng = child("vlca");
        let mut cls_rng = child("cls");
        let x1 = ctx.constant(input.x1.clone());
        let x2 = ctx.constant(input.x2.clone());
        let nodes = self.rg.forward(ctx, x1, x2, &input.ops, rg_rng.as_mut())?;
        let pool = self.hc.pool(ctx, nodes.z_ve, atlas, &input.fc, templates, label, tau, hc_rng.as_ref())?;
        let mode = match self.config.variant {
            Variant::DeterministicCausal => NoiseMode::Deterministic,
            _ => self.config.noise_mode,
        };
        let vlca = self.vlca.causal_effect(ctx, pool.embeddings, mode, false, vlca_rng.as_mut())?;
        let cls_in = match self.config.variant {
            Variant::StandardAttention => vlca.enc_input,
            _ => ctx.tape.flatten(pool.embeddings),
        };
        let logits = self.classifier.forward(ctx, cls_in, cls_rng.as_mut())?;
        Ok(SubjectOutput {
            logits,
            nodes,
            pool,
            vlca,
        })
    }
}

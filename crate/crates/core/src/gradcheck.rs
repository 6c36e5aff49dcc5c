//! Finite-difference check of the full composite loss against the tape.
//!
//! The loss is evaluated in training mode with fixed noise streams, so
//! dropout masks and Gumbel/Gaussian noise are identical in every
//! evaluation and the loss is a deterministic function of the parameters.

use autograd::{central_difference, relative_error, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::atlas::CircuitAtlas;
use crate::data::GroupTemplates;
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::train::{batch_gradients, forward_batch, schedules, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Coordinates sampled per parameter tensor (all when smaller).
    pub per_tensor: usize,
    pub step: f64,
    /// Schedule epoch; at the end of KL warm-up every term has weight.
    pub epoch: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            per_tensor: 3,
            step: 1e-5,
            epoch: 20,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares tape gradients of the composite loss on `batch` with central
/// differences at sampled coordinates of every parameter tensor.
pub fn model_gradcheck(
    model: &Model,
    batch: &[ModelInput],
    atlas: &CircuitAtlas,
    templates: &GroupTemplates,
    train: &TrainConfig,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if batch.is_empty() || cfg.per_tensor == 0 {
        return Err(Error::Config("gradient check needs a non-empty batch and at least one coordinate per tensor".into()));
    }
    let schedule = schedules(cfg.epoch, train);
    let refs: Vec<&ModelInput> = batch.iter().collect();
    let run = "gradcheck";
    let (mut tape, vars, loss) = forward_batch(model, &refs, atlas, templates, train, schedule, run, cfg.epoch)?;
    let grads = batch_gradients(&mut tape, &vars, loss.total)?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        let original = model.params.get(id).clone();
        let mut coords: Vec<usize> = (0..original.numel()).collect();
        RngStream::new(cfg.seed, format!("gradcheck/{name}")).shuffle(&mut coords);
        coords.truncate(cfg.per_tensor);
        let mut f = |x: &Tensor| -> autograd::Result<f64> {
            *probe.params.get_mut(id) = x.clone();
            let out = forward_batch(&probe, &refs, atlas, templates, train, schedule, run, cfg.epoch);
            Ok(out.map(|(_, _, l)| l.breakdown.total).unwrap_or(f64::NAN))
        };
        let mut tensor_worst: f64 = 0.0;
        for &i in &coords {
            let numeric = central_difference(&mut f, &original, i, cfg.step)?;
            tensor_worst = tensor_worst.max(relative_error(grads[k].data()[i], numeric));
        }
        *probe.params.get_mut(id) = original;
        worst = worst.max(tensor_worst);
        coordinates += coords.len();
        tensors.push(TensorCheck {
            name,
            checked: coords.len(),
            max_rel_err: tensor_worst,
        });
    }
    Ok(GradcheckReport {
        loss: loss.breakdown.total,
        max_rel_err: worst,
        coordinates,
        tensors,
    })
}

/// Model, batch and priors for a check on a synthetic cohort.
#[derive(Debug, Clone)]
pub struct GradcheckFixture {
    pub model: Model,
    pub batch: Vec<ModelInput>,
    pub atlas: CircuitAtlas,
    pub templates: GroupTemplates,
    pub train: TrainConfig,
}

/// First `batch` subjects of a generated cohort, alternating labels, with
/// scaler and templates fit on that batch.
pub fn synthetic_fixture(exp: &crate::eval::ExperimentConfig, spec: &crate::data::SynthSpec, batch: usize) -> Result<GradcheckFixture> {
    use crate::data::{generate_cohort, group_templates, prepare_subject, Scaler};
    if batch < 2 {
        return Err(Error::Config("gradient check batch needs at least two subjects".into()));
    }
    let cohort = generate_cohort(spec)?;
    exp.check_cohort(&cohort)?;
    let mut picked = Vec::with_capacity(batch);
    let mut want = 1u8;
    for s in &cohort.subjects {
        if picked.len() == batch {
            break;
        }
        if s.label == want {
            picked.push(prepare_subject(s, &exp.features)?);
            want = 1 - want;
        }
    }
    if picked.len() < batch {
        return Err(Error::Data(format!("cohort too small for a batch of {batch}")));
    }
    let scaler = Scaler::fit(picked.iter().map(|p| &p.raw_x1))?;
    let templates = group_templates(picked.iter().map(|p| (p.id.as_str(), p.label, &p.fc)))?;
    Ok(GradcheckFixture {
        model: Model::new(exp.model.clone(), exp.train.seed)?,
        batch: picked.iter().map(|p| ModelInput::new(p, &scaler)).collect(),
        atlas: cohort.atlas,
        templates,
        train: exp.train.clone(),
    })
}

//! The full network: encoder, plane generator with selection matrix and
//! union weights, and the deformation flow, all sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParameterStore};
use crate::encoder::{Encoder, InputKind, LatentPair, Observation};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geom::IndexedMesh;
use crate::shapegen::{Axis, ProceduralShape};
use crate::topology::{self, NeuralTemplate, TemplateMesh, TemplateParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input: InputKind,
    /// Voxel grid side or image side.
    pub resolution: usize,
    /// Viewing axis of silhouette inputs.
    pub image_axis: Axis,
    pub channels: Vec<usize>,
    pub trunk_width: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub generator_widths: Vec<usize>,
    pub n_h: usize,
    pub n_c: usize,
    pub flow_width: usize,
    pub t_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: InputKind::Voxel,
            resolution: 32,
            image_axis: Axis::Z,
            channels: vec![8, 16, 32],
            trunk_width: 256,
            d_t: 128,
            d_s: 128,
            generator_widths: vec![256, 512],
            n_h: 256,
            n_c: 32,
            flow_width: 128,
            t_steps: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("trunk_width", self.trunk_width),
            ("d_t", self.d_t),
            ("d_s", self.d_s),
            ("n_h", self.n_h),
            ("n_c", self.n_c),
            ("flow_width", self.flow_width),
            ("t_steps", self.t_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("model.channels must be non-empty and positive".into()));
        }
        if self.generator_widths.contains(&0) {
            return Err(Error::Config("model.generator_widths must be positive".into()));
        }
        Ok(())
    }

    /// The observation this model consumes for a ground-truth shape.
    pub fn observe(&self, shape: &ProceduralShape) -> Observation {
        match self.input {
            InputKind::Voxel => Observation::Voxels(shape.voxelize(self.resolution)),
            InputKind::Image => Observation::Image(shape.render_silhouette(self.image_axis, self.resolution)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub template: TemplateParams,
    pub flow: FlowField,
    /// 1 while training the relaxed template, 2 once `B` is binarized.
    pub stage: u8,
}

impl Model {
    /// Fresh initialisation, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            config.input,
            config.resolution,
            &config.channels,
            config.trunk_width,
            config.d_t,
            config.d_s,
        )?;
        let template = TemplateParams::new(
            &mut store,
            &mut rng,
            config.d_t,
            &config.generator_widths,
            config.n_h,
            config.n_c,
        )?;
        let flow = FlowField::new(&mut store, &mut rng, config.d_s, config.flow_width, config.t_steps)?;
        Ok(Self {
            config,
            store,
            encoder,
            template,
            flow,
            stage: 1,
        })
    }

    /// Freezes `B` to its binarized value and switches to stage 2.
    pub fn enter_stage2(&mut self) -> Result<()> {
        let b = topology::binarize(self.store.value(self.template.b));
        self.store.set(self.template.b, b)?;
        self.stage = 2;
        Ok(())
    }

    /// Parameters updated by the optimizer in the given stage.
    pub fn trainable(&self, stage: u8) -> Vec<ParamId> {
        let mut ids = self.encoder.trunk_params();
        let (head_t, head_s) = self.encoder.head_params();
        ids.extend(head_t);
        ids.extend(self.template.generator_params());
        if stage == 1 {
            ids.push(self.template.b);
            ids.push(self.template.w);
        } else {
            ids.extend(head_s);
            ids.extend(self.flow.params());
        }
        ids
    }

    pub fn encode(&self, obs: &Observation) -> Result<LatentPair> {
        self.encoder.encode(&self.store, obs)
    }

    pub fn form_template(&self, zt: &[f64]) -> Result<NeuralTemplate> {
        if zt.len() != self.config.d_t {
            return Err(Error::CodeDimension(zt.len(), self.config.d_t));
        }
        self.template.form_template(&self.store, zt, self.stage)
    }

    /// Template mesh for `zt`, deformed by the flow under `zs`.
    pub fn generate(&self, zt: &[f64], zs: &[f64]) -> Result<(TemplateMesh, IndexedMesh)> {
        if self.stage != 2 {
            return Err(Error::Stage {
                expected: 2,
                actual: self.stage,
            });
        }
        if zs.len() != self.config.d_s {
            return Err(Error::CodeDimension(zs.len(), self.config.d_s));
        }
        let tm = self.form_template(zt)?.extract_mesh();
        let mesh = self.flow.deform_mesh(&self.store, zs, &tm)?;
        Ok((tm, mesh))
    }

    /// Predicted inside test in shape space: map back through the flow and
    /// evaluate the stage-2 template.
    pub fn inside(&self, codes: &LatentPair, points: &[crate::geom::Vec3]) -> Result<Vec<bool>> {
        let template = self.form_template(&codes.zt)?;
        let mapped = self.flow.inverse_deform(&self.store, &codes.zs, points)?;
        Ok(mapped.iter().map(|&p| template.is_inside(p)).collect())
    }
}

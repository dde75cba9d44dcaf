//! Student/teacher network pair.
//!
//! Both halves share one module description ([`Networks`]). The student
//! parameter set is laid out with every EMA-tracked tensor first, followed
//! by the student-only predictors and prototypes, so the teacher set is a
//! prefix and every [`ParamId`] is valid in both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Aggregator, AggregatorConfig, MlpHead, MlpHeadConfig};
use crate::params::{ParamBuilder, ParamId, ParamSet};
use crate::vit::{Backbone, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub vit: ViTConfig,
    pub head_hidden_dim: usize,
    pub head_out_dim: usize,
    pub predictor_hidden_dim: usize,
    pub aggregator_heads: usize,
    pub k: usize,
    pub num_prototypes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            vit: ViTConfig::default(),
            head_hidden_dim: 256,
            head_out_dim: 64,
            predictor_hidden_dim: 256,
            aggregator_heads: 4,
            k: 8,
            num_prototypes: 1024,
        }
    }
}

impl Architecture {
    /// Smallest configuration exercising every component.
    pub fn micro() -> Self {
        Architecture {
            vit: ViTConfig {
                image_size_global: 8,
                image_size_local: 4,
                patch_size: 2,
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                mlp_ratio: 2,
                drop_path_rate: 0.0,
            },
            head_hidden_dim: 16,
            head_out_dim: 8,
            predictor_hidden_dim: 16,
            aggregator_heads: 2,
            k: 2,
            num_prototypes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.num_prototypes == 0 || self.k == 0 {
            return Err(Error::Config("num_prototypes and k must be positive".into()));
        }
        if self.aggregator_heads == 0 || self.vit.embed_dim % self.aggregator_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of aggregator_heads {}",
                self.vit.embed_dim, self.aggregator_heads
            )));
        }
        Ok(())
    }

    fn projection(&self) -> MlpHeadConfig {
        MlpHeadConfig {
            in_dim: self.vit.embed_dim,
            hidden_dim: self.head_hidden_dim,
            out_dim: self.head_out_dim,
            num_layers: 3,
        }
    }

    fn prediction(&self) -> MlpHeadConfig {
        MlpHeadConfig {
            in_dim: self.head_out_dim,
            hidden_dim: self.predictor_hidden_dim,
            out_dim: self.head_out_dim,
            num_layers: 2,
        }
    }
}

/// Module layout shared by student and teacher.
#[derive(Clone, Debug)]
pub struct Networks {
    pub backbone: Backbone,
    pub instance_head: MlpHead,
    pub local_group_head: MlpHead,
    pub group_head: MlpHead,
    pub aggregator: Aggregator,
    pub instance_predictor: MlpHead,
    pub local_group_predictor: MlpHead,
    pub prototypes: ParamId,
    /// Number of leading parameters tracked by the teacher.
    pub shared_count: usize,
}

#[derive(Clone, Debug)]
pub struct ModelPair {
    pub arch: Architecture,
    pub nets: Networks,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

impl ModelPair {
    /// Fresh pair; the teacher starts as a copy of the student.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut set, &mut rng);
        let backbone = Backbone::new(&mut b.child("backbone"), &arch.vit)?;
        let instance_head = MlpHead::new(&mut b.child("head_instance"), arch.projection())?;
        let local_group_head = MlpHead::new(&mut b.child("head_local_group"), arch.projection())?;
        let group_head = MlpHead::new(&mut b.child("head_group"), arch.projection())?;
        let aggregator = Aggregator::new(
            &mut b.child("aggregator"),
            AggregatorConfig::new(arch.vit.embed_dim, arch.aggregator_heads, arch.k),
        )?;
        drop(b);
        let shared_count = set.len();
        let mut b = ParamBuilder::new(&mut set, &mut rng);
        let instance_predictor = MlpHead::new(&mut b.child("predictor_instance"), arch.prediction())?;
        let local_group_predictor =
            MlpHead::new(&mut b.child("predictor_local_group"), arch.prediction())?;
        let prototypes = b.normal("prototypes", &[arch.num_prototypes, arch.head_out_dim], 0.02)?;
        let teacher = set.prefix(shared_count);
        Ok(ModelPair {
            arch: arch.clone(),
            nets: Networks {
                backbone,
                instance_head,
                local_group_head,
                group_head,
                aggregator,
                instance_predictor,
                local_group_predictor,
                prototypes,
                shared_count,
            },
            student: set,
            teacher,
        })
    }

    /// Rebuilds the module layout for `arch` and installs the given weights,
    /// checking every name and shape.
    pub fn from_params(arch: &Architecture, student: ParamSet, teacher: ParamSet) -> Result<Self> {
        let mut pair = ModelPair::new(arch, 0)?;
        check_layout("student", &pair.student, &student)?;
        check_layout("teacher", &pair.teacher, &teacher)?;
        pair.student = student;
        pair.teacher = teacher;
        Ok(pair)
    }

    /// `θ_t ← m·θ_t + (1−m)·θ_s` over every tracked tensor.
    pub fn ema_update_teacher(&mut self, momentum: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Contract(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        for id in self.teacher.ids().collect::<Vec<_>>() {
            let s = self.student.get(id);
            if s.shape() != self.teacher.get(id).shape() {
                return Err(Error::Contract(format!(
                    "EMA shape mismatch at `{}`",
                    self.teacher.name(id)
                )));
            }
            let s = s.data().to_vec();
            for (t, s) in self.teacher.get_mut(id).data_mut().iter_mut().zip(s) {
                *t = momentum * *t + (1.0 - momentum) * s;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_layout(which: &str, expected: &ParamSet, got: &ParamSet) -> Result<()> {
    for (id, name, t) in expected.iter() {
        let other = got.by_name(name).ok_or_else(|| {
            Error::Contract(format!("{which} weights are missing tensor `{name}`"))
        })?;
        if other.shape() != t.shape() {
            return Err(Error::Shape {
                op: format!("{which} tensor `{name}`"),
                lhs: t.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        if got.id(name) != Some(id) {
            return Err(Error::Contract(format!("{which} tensor `{name}` is out of order")));
        }
    }
    if got.len() != expected.len() {
        return Err(Error::Contract(format!(
            "{which} weights hold {} tensors, expected {}",
            got.len(),
            expected.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_is_prefix_of_student() {
        let pair = ModelPair::new(&Architecture::micro(), 1).unwrap();
        assert_eq!(pair.teacher.len(), pair.nets.shared_count);
        assert!(pair.student.len() > pair.teacher.len());
        for (id, name, t) in pair.teacher.iter() {
            assert_eq!(pair.student.name(id), name);
            assert_eq!(pair.student.get(id), t);
        }
        assert!(pair.teacher.by_name("prototypes").is_none());
        assert!(pair.teacher.iter().all(|(_, n, _)| !n.starts_with("predictor")));
    }

    #[test]
    fn ema_endpoints() {
        let mut pair = ModelPair::new(&Architecture::micro(), 2).unwrap();
        let ids: Vec<_> = pair.student.ids().collect();
        for id in ids {
            pair.student.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let before = pair.teacher.clone();
        pair.ema_update_teacher(1.0).unwrap();
        assert_eq!(pair.teacher, before);
        pair.ema_update_teacher(0.0).unwrap();
        assert_eq!(pair.teacher, pair.student.prefix(pair.nets.shared_count));
        assert!(pair.ema_update_teacher(1.5).is_err());
    }

    #[test]
    fn scalar_ema() {
        let mut pair = ModelPair::new(&Architecture::micro(), 3).unwrap();
        let id = pair.nets.backbone.cls_token;
        pair.teacher.get_mut(id).data_mut().fill(1.0);
        pair.student.get_mut(id).data_mut().fill(0.0);
        pair.ema_update_teacher(0.996).unwrap();
        assert!(pair.teacher.get(id).data().iter().all(|&v| v == 0.996));
    }

    #[test]
    fn from_params_rejects_mismatched_layout() {
        let small = ModelPair::new(&Architecture::micro(), 0).unwrap();
        let mut arch = Architecture::micro();
        arch.vit.embed_dim = 16;
        let err = ModelPair::from_params(&arch, small.student.clone(), small.teacher.clone());
        assert!(matches!(err, Err(Error::Shape { .. })));
        let same = ModelPair::from_params(&Architecture::micro(), small.student.clone(), small.teacher);
        assert!(same.is_ok());
    }
}

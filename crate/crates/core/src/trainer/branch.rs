use serde::{Deserialize, Serialize};

use crate::data::shared_view_rows;
use crate::error::{Error, Result};
use crate::model::{ema_update, encode, Checkpoint, ClassifierParams, DecoderParams, EncoderParams, Mlp, ParamSet};
use crate::numerics::{Matrix, SeededRng};
use crate::pseudo_label::{MemoryBank, OcmState};
use crate::scalar::Scalar;

/// B0 is the domain-shared branch (shared view, source supervision and
/// reconstruction); B1 the target-specific one (full view, contrastive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchId {
    B0,
    B1,
}

impl BranchId {
    pub fn index(self) -> usize {
        match self {
            BranchId::B0 => 0,
            BranchId::B1 => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            BranchId::B0 => BranchId::B1,
            BranchId::B1 => BranchId::B0,
        }
    }
}

/// Everything the optimiser updates in one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams<S> {
    pub encoder: EncoderParams<S>,
    pub source_head: Option<ClassifierParams<S>>,
    pub decoder: Option<DecoderParams<S>>,
    pub target_head: Option<ClassifierParams<S>>,
}

impl<S: Scalar> ParamSet<S> for StudentParams<S> {
    fn tensors(&self) -> Vec<&Matrix<S>> {
        let mut t = self.encoder.tensors();
        if let Some(h) = &self.source_head {
            t.extend(h.tensors());
        }
        if let Some(d) = &self.decoder {
            t.extend(d.tensors());
        }
        if let Some(h) = &self.target_head {
            t.extend(h.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut t = self.encoder.tensors_mut();
        if let Some(h) = &mut self.source_head {
            t.extend(h.tensors_mut());
        }
        if let Some(d) = &mut self.decoder {
            t.extend(d.tensors_mut());
        }
        if let Some(h) = &mut self.target_head {
            t.extend(h.tensors_mut());
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams<S> {
    pub encoder: EncoderParams<S>,
    pub target_head: Option<ClassifierParams<S>>,
}

#[derive(Clone, Debug)]
pub struct BranchState<S> {
    pub id: BranchId,
    pub student: StudentParams<S>,
    pub teacher: TeacherParams<S>,
    pub bank: MemoryBank<S>,
    pub ocm: OcmState<S>,
    /// Width of the view this branch consumes.
    pub view_dims: usize,
}

impl<S: Scalar> BranchState<S> {
    /// Fresh Glorot-initialised student with an identical teacher.
    pub fn new(
        id: BranchId,
        view_dims: usize,
        hidden_dim: usize,
        feature_dim: usize,
        source_classes: usize,
        num_target: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let encoder = Mlp::init(view_dims, hidden_dim, feature_dim, rng);
        let (source_head, decoder) = match id {
            BranchId::B0 => (
                Some(ClassifierParams::init(feature_dim, source_classes, rng)),
                Some(Mlp::init(feature_dim, hidden_dim, view_dims, rng)),
            ),
            BranchId::B1 => (None, None),
        };
        Self {
            id,
            teacher: TeacherParams {
                encoder: encoder.clone(),
                target_head: None,
            },
            student: StudentParams {
                encoder,
                source_head,
                decoder,
                target_head: None,
            },
            bank: MemoryBank::new(num_target, feature_dim),
            ocm: OcmState::new(),
            view_dims,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.student.encoder.output_dim()
    }

    /// The columns of `x` this branch sees.
    pub fn view(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        shared_view_rows(x, self.view_dims)
    }

    pub fn teacher_features(&self, view: &Matrix<S>) -> Result<Matrix<S>> {
        encode(&self.teacher.encoder, view)
    }

    pub fn student_features(&self, view: &Matrix<S>) -> Result<Matrix<S>> {
        encode(&self.student.encoder, view)
    }

    /// Installs the same target classifier in student and teacher.
    pub fn set_target_head(&mut self, head: ClassifierParams<S>) {
        self.student.target_head = Some(head.clone());
        self.teacher.target_head = Some(head);
    }

    /// EMA of the teacher encoder and target head towards the student.
    pub fn ema(&mut self, alpha: S) -> Result<()> {
        ema_update(&mut self.teacher.encoder, &self.student.encoder, alpha)?;
        match (&mut self.teacher.target_head, &self.student.target_head) {
            (Some(t), Some(s)) => ema_update(t, s, alpha),
            (None, None) => Ok(()),
            _ => Err(Error::Shape("teacher and student target heads disagree".into())),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        let p = format!("b{}", self.id.index());
        ck.set_meta(format!("{p}.view_dims"), self.view_dims);
        put_mlp(ck, &format!("{p}.student.encoder"), &self.student.encoder);
        put_mlp(ck, &format!("{p}.teacher.encoder"), &self.teacher.encoder);
        if let Some(h) = &self.student.source_head {
            ck.insert(format!("{p}.student.source_head"), &h.weight);
        }
        if let Some(d) = &self.student.decoder {
            put_mlp(ck, &format!("{p}.student.decoder"), d);
        }
        if let Some(h) = &self.student.target_head {
            ck.insert(format!("{p}.student.target_head"), &h.weight);
        }
        if let Some(h) = &self.teacher.target_head {
            ck.insert(format!("{p}.teacher.target_head"), &h.weight);
        }
        if let Ok(f) = self.bank.features() {
            ck.insert(format!("{p}.bank"), f);
        }
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint, id: BranchId, num_target: usize) -> Result<Self> {
        let p = format!("b{}", id.index());
        let view_dims: usize = ck
            .meta(&format!("{p}.view_dims"))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad {p}.view_dims")))?;
        let head = |name: &str| -> Result<Option<ClassifierParams<S>>> {
            let key = format!("{p}.{name}");
            Ok(if ck.contains(&key) {
                Some(ClassifierParams { weight: ck.get(&key)? })
            } else {
                None
            })
        };
        let encoder = get_mlp(ck, &format!("{p}.student.encoder"))?;
        let decoder = if ck.contains(&format!("{p}.student.decoder.hidden.weight")) {
            Some(get_mlp(ck, &format!("{p}.student.decoder"))?)
        } else {
            None
        };
        let feature_dim = encoder.output_dim();
        let bank_key = format!("{p}.bank");
        let bank = if ck.contains(&bank_key) {
            MemoryBank::restore(ck.get(&bank_key)?)?
        } else {
            MemoryBank::new(num_target, feature_dim)
        };
        if bank.len() != num_target || bank.dim() != feature_dim {
            return Err(Error::Checkpoint(format!(
                "bank of {}x{} does not fit {num_target} targets with {feature_dim} features",
                bank.len(),
                bank.dim()
            )));
        }
        if encoder.input_dim() != view_dims {
            return Err(Error::Checkpoint(format!("{p} encoder input does not match its view")));
        }
        Ok(Self {
            id,
            student: StudentParams {
                encoder,
                source_head: head("student.source_head")?,
                decoder,
                target_head: head("student.target_head")?,
            },
            teacher: TeacherParams {
                encoder: get_mlp(ck, &format!("{p}.teacher.encoder"))?,
                target_head: head("teacher.target_head")?,
            },
            bank,
            ocm: OcmState::new(),
            view_dims,
        })
    }
}

fn put_mlp<S: Scalar>(ck: &mut Checkpoint, prefix: &str, m: &Mlp<S>) {
    ck.insert(format!("{prefix}.hidden.weight"), &m.hidden.weight);
    ck.insert(format!("{prefix}.hidden.bias"), &m.hidden.bias);
    ck.insert(format!("{prefix}.output.weight"), &m.output.weight);
    ck.insert(format!("{prefix}.output.bias"), &m.output.bias);
}

fn get_mlp<S: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<Mlp<S>> {
    let mut m = Mlp::zeros(1, 1, 1);
    m.hidden.weight = ck.get(&format!("{prefix}.hidden.weight"))?;
    m.hidden.bias = ck.get(&format!("{prefix}.hidden.bias"))?;
    m.output.weight = ck.get(&format!("{prefix}.output.weight"))?;
    m.output.bias = ck.get(&format!("{prefix}.output.bias"))?;
    let consistent = m.hidden.bias.shape() == (1, m.hidden.weight.cols())
        && m.output.weight.rows() == m.hidden.weight.cols()
        && m.output.bias.shape() == (1, m.output.weight.cols());
    if !consistent {
        return Err(Error::Checkpoint(format!("{prefix} has inconsistent layer shapes")));
    }
    Ok(m)
}

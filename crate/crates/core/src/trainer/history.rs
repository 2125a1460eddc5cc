use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricsRecord;

/// Epoch-averaged raw (unweighted) loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sup: f64,
    pub dec: f64,
    pub cont: f64,
    pub ocm: f64,
    pub ccm: f64,
    pub total: f64,
}

impl LossTerms {
    pub(crate) fn accumulate(&mut self, other: &LossTerms) {
        self.sup += other.sup;
        self.dec += other.dec;
        self.cont += other.cont;
        self.ocm += other.ocm;
        self.ccm += other.ccm;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, k: f64) -> LossTerms {
        LossTerms {
            sup: self.sup * k,
            dec: self.dec * k,
            cont: self.cont * k,
            ocm: self.ocm * k,
            ccm: self.ccm * k,
            total: self.total * k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub branch: usize,
    pub metrics: Option<MetricsRecord>,
    pub losses: LossTerms,
}

pub const CSV_HEADER: &str = "stage,epoch,branch,acc,nmi,ari,uniformity,sup,dec,cont,ocm,ccm,total";

/// One CSV row per record; metric cells are empty for unevaluated epochs.
pub fn write_history_csv(w: &mut impl Write, records: &[EpochRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let stage = match r.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        };
        write!(w, "{stage},{},{}", r.epoch, r.branch)?;
        match &r.metrics {
            Some(m) => write!(w, ",{},{},{},{}", m.acc, m.nmi, m.ari, m.uniformity)?,
            None => write!(w, ",,,,")?,
        }
        let l = &r.losses;
        writeln!(w, ",{},{},{},{},{},{}", l.sup, l.dec, l.cont, l.ocm, l.ccm, l.total)?;
    }
    Ok(())
}

//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn paired<'a>(pred: &'a [Scalar], target: &'a [Scalar]) -> Result<impl Iterator<Item = Scalar> + 'a> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("metric", &[pred.len()], &[target.len()]));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| p - t))
}

pub fn mse(pred: &[Scalar], target: &[Scalar]) -> Result<Scalar> {
    Ok(paired(pred, target)?.map(|e| e * e).sum::<Scalar>() / pred.len() as Scalar)
}

pub fn mae(pred: &[Scalar], target: &[Scalar]) -> Result<Scalar> {
    Ok(paired(pred, target)?.map(Scalar::abs).sum::<Scalar>() / pred.len() as Scalar)
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> Result<Scalar> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("accuracy", &[pred.len()], &[target.len()]));
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as Scalar / pred.len() as Scalar)
}

/// Binary confusion counts with "positive" meaning anomalous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_flags(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::dim("confusion", &[pred.len()], &[truth.len()]));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// Zero when nothing was flagged.
    pub fn precision(&self) -> Scalar {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Scalar {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Scalar {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> Scalar {
    if b == 0 {
        0.0
    } else {
        a as Scalar / b as Scalar
    }
}

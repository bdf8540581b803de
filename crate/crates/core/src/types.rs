//! Shared value types: frames, clips, parameter sets, recurrent state.

use crate::error::{Error, Result};
use ndarray::{Array4, Array5, ArrayD};
use std::collections::HashMap;

/// A batch of single frames, laid out `(batch, channel, height, width)`,
/// values expected in `[-1, 1]` after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    data: Array4<f64>,
}

impl FrameTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("frame tensor contains non-finite values"));
        }
        Ok(Self { data })
    }

    /// `(batch, channel, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    /// Check that height and width are divisible by `2^depth`, as required
    /// for an exact pool/upsample round trip.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let (_, _, h, w) = self.dims();
        let d = 1usize << depth;
        if h % d != 0 {
            return Err(Error::shape("frame height", format!("multiple of {d}"), h));
        }
        if w % d != 0 {
            return Err(Error::shape("frame width", format!("multiple of {d}"), w));
        }
        Ok(())
    }
}

/// A batch of clips, laid out `(batch, time, channel, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    data: Array5<f64>,
}

impl ClipTensor {
    pub fn new(data: Array5<f64>) -> Result<Self> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("clip tensor contains non-finite values"));
        }
        Ok(Self { data })
    }

    /// `(batch, time, channel, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.data
    }

    /// Frame at time step `k` as an owned `(N, C, H, W)` array.
    pub fn frame(&self, k: usize) -> Array4<f64> {
        self.data
            .index_axis(ndarray::Axis(1), k)
            .to_owned()
            .into_dimensionality()
            .unwrap()
    }
}

/// Named, ordered collection of parameter arrays. Two sets built from the
/// same model config agree in names, order and shapes, which is what makes
/// the functional update `p - alpha * g` well defined.
#[derive(Debug, Clone)]
pub struct ParamSet {
    model_id: String,
    config_hash: String,
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(
        model_id: impl Into<String>,
        config_hash: impl Into<String>,
        entries: Vec<(String, ArrayD<f64>)>,
    ) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self {
            model_id: model_id.into(),
            config_hash: config_hash.into(),
            entries,
            index,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    /// Same names, same order, same shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, va), (nb, vb))| na == nb && va.shape() == vb.shape())
    }

    pub fn check_same_structure(&self, other: &ParamSet, what: &str) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::shape(
                what,
                format!("{} entries like {:?}", self.len(), self.entries.first().map(|e| &e.0)),
                format!("{} entries like {:?}", other.len(), other.entries.first().map(|e| &e.0)),
            ));
        }
        Ok(())
    }

    /// Functional update `self - alpha * grads`. Neither input is modified.
    pub fn sub_scaled(&self, grads: &ParamSet, alpha: f64) -> Result<ParamSet> {
        self.check_same_structure(grads, "parameter update")?;
        let entries = self
            .entries
            .iter()
            .zip(grads.entries.iter())
            .map(|((n, p), (_, g))| (n.clone(), p - &(g * alpha)))
            .collect();
        Ok(ParamSet::new(
            self.model_id.clone(),
            self.config_hash.clone(),
            entries,
        ))
    }

    /// Replace all values, keeping structure. Arrays must match pairwise.
    pub fn with_values(&self, values: Vec<ArrayD<f64>>) -> Result<ParamSet> {
        if values.len() != self.entries.len() {
            return Err(Error::shape("with_values", self.entries.len(), values.len()));
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|((n, old), v)| {
                if old.shape() != v.shape() {
                    return Err(Error::shape(
                        format!("parameter {n}"),
                        format!("{:?}", old.shape()),
                        format!("{:?}", v.shape()),
                    ));
                }
                Ok((n.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet::new(
            self.model_id.clone(),
            self.config_hash.clone(),
            entries,
        ))
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, a)| a.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(other.entries.iter())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// ConvLSTM recurrent state: hidden and cell activations, both
/// `(batch, hidden_channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub hidden: Array4<f64>,
    pub cell: Array4<f64>,
}

impl PredictorState {
    /// Fresh all-zeros state, the mandatory start of every clip.
    pub fn zeros(batch: usize, hidden_channels: usize, h: usize, w: usize) -> Self {
        Self {
            hidden: Array4::zeros((batch, hidden_channels, h, w)),
            cell: Array4::zeros((batch, hidden_channels, h, w)),
        }
    }
}

//! Feature, structure and data dropout masks.
//!
//! Masks are written as multiplicative perturbations: a feature mask `xi`
//! takes `-1` with probability `p` and `p / (1 - p)` otherwise, so
//! `(1 + xi) * h` is inverted dropout. Structure and data masks are
//! two-point scalars in `{-1, 0}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerDropScope {
    #[default]
    DecoderOnly,
    EncoderOnly,
    Both,
    None,
}

impl LayerDropScope {
    pub fn encoder(self) -> bool {
        matches!(self, LayerDropScope::EncoderOnly | LayerDropScope::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, LayerDropScope::DecoderOnly | LayerDropScope::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerDropScope::DecoderOnly => "decoder-only",
            LayerDropScope::EncoderOnly => "encoder-only",
            LayerDropScope::Both => "both",
            LayerDropScope::None => "none",
        }
    }
}

impl std::str::FromStr for LayerDropScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "decoder-only" | "decoder" => Ok(LayerDropScope::DecoderOnly),
            "encoder-only" | "encoder" => Ok(LayerDropScope::EncoderOnly),
            "both" => Ok(LayerDropScope::Both),
            "none" => Ok(LayerDropScope::None),
            other => Err(format!(
                "`{other}` is not one of decoder-only, encoder-only, both, none"
            )),
        }
    }
}

/// Train-time dropout configuration. Evaluation ignores every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// Attention weights, after softmax.
    pub fd1_rate: f64,
    /// FFN activation, after ReLU.
    pub fd2_rate: f64,
    /// Query, key and value inputs, before their projections.
    pub fd3_rate: f64,
    /// Final features, before the output projection.
    pub fd4_rate: f64,
    pub layerdrop_rate: f64,
    pub layerdrop_scope: LayerDropScope,
    /// Probability of keeping a sequence untouched.
    pub dd_keep_prob: f64,
    /// Per-token removal probability once a sequence is selected.
    pub dd_token_prob: f64,
    /// Query/key/value dropout after the projections.
    pub qkv_proj_rate: f64,
    /// Dropout on the output logits.
    pub logits_drop_rate: f64,
    /// Probability of hiding the whole encoder memory for a step.
    pub encoder_drop_rate: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self::unidrop()
    }
}

impl DropoutSpec {
    /// All four feature dropouts at 0.1, decoder LayerDrop 0.1, two-stage
    /// data dropout with `p_k = 0.5`, `p = 0.2`.
    pub fn unidrop() -> Self {
        Self {
            fd1_rate: 0.1,
            fd2_rate: 0.1,
            fd3_rate: 0.1,
            fd4_rate: 0.1,
            layerdrop_rate: 0.1,
            layerdrop_scope: LayerDropScope::DecoderOnly,
            dd_keep_prob: 0.5,
            dd_token_prob: 0.2,
            qkv_proj_rate: 0.0,
            logits_drop_rate: 0.0,
            encoder_drop_rate: 0.0,
        }
    }

    /// Every rate zero; data dropout keeps every sequence.
    pub fn none() -> Self {
        Self {
            fd1_rate: 0.0,
            fd2_rate: 0.0,
            fd3_rate: 0.0,
            fd4_rate: 0.0,
            layerdrop_rate: 0.0,
            layerdrop_scope: LayerDropScope::DecoderOnly,
            dd_keep_prob: 1.0,
            dd_token_prob: 0.0,
            qkv_proj_rate: 0.0,
            logits_drop_rate: 0.0,
            encoder_drop_rate: 0.0,
        }
    }

    pub fn set_feature_rates(&mut self, p: f64) {
        self.fd1_rate = p;
        self.fd2_rate = p;
        self.fd3_rate = p;
        self.fd4_rate = p;
    }

    pub fn has_feature_dropout(&self) -> bool {
        [self.fd1_rate, self.fd2_rate, self.fd3_rate, self.fd4_rate]
            .iter()
            .any(|&p| p > 0.0)
    }

    pub fn has_data_dropout(&self) -> bool {
        self.dd_keep_prob < 1.0 && self.dd_token_prob > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let open = [
            ("fd1_rate", self.fd1_rate),
            ("fd2_rate", self.fd2_rate),
            ("fd3_rate", self.fd3_rate),
            ("fd4_rate", self.fd4_rate),
            ("layerdrop_rate", self.layerdrop_rate),
            ("dd_token_prob", self.dd_token_prob),
            ("qkv_proj_rate", self.qkv_proj_rate),
            ("logits_drop_rate", self.logits_drop_rate),
        ];
        for (name, value) in open {
            check_rate(name, value)?;
        }
        for (name, value) in [
            ("dd_keep_prob", self.dd_keep_prob),
            ("encoder_drop_rate", self.encoder_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidRate {
                    name,
                    value,
                    reason: "must lie in [0, 1]",
                });
            }
        }
        Ok(())
    }
}

fn check_rate(name: &'static str, value: f64) -> Result<()> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidRate {
            name,
            value,
            reason: "must lie in [0, 1)",
        })
    }
}

/// Per-coordinate feature mask `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    pub xi: Tensor,
    pub p: f64,
}

impl FeatureMask {
    /// The multiplicative factors `1 + xi`.
    pub fn factors(&self) -> Tensor {
        self.xi.map(|x| 1.0 + x)
    }
}

pub fn sample_feature_mask(shape: &[usize], p: f64, rng: &mut RngStream) -> Result<FeatureMask> {
    check_rate("p", p)?;
    let keep = p / (1.0 - p);
    let mut xi = Tensor::zeros(shape);
    if p > 0.0 {
        for x in xi.data_mut() {
            *x = if rng.bernoulli(p) { -1.0 } else { keep };
        }
    }
    Ok(FeatureMask { xi, p })
}

/// Fast path used by the model: draws `1 + xi` directly.
pub(crate) fn sample_feature_factors(len: usize, p: f64, rng: &mut RngStream) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect()
}

pub fn apply_feature_dropout(h: &Tensor, mask: &FeatureMask) -> Result<Tensor> {
    h.check_same_shape(&mask.xi, "apply_feature_dropout")?;
    h.zip_map(&mask.xi, "apply_feature_dropout", |a, x| {
        if x == -1.0 {
            0.0
        } else {
            (1.0 + x) * a
        }
    })
}

/// Per-layer structure scalar `eta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureMask {
    pub eta: f64,
}

impl StructureMask {
    pub fn dropped(self) -> bool {
        self.eta == -1.0
    }
}

/// Independent LayerDrop draws; if every layer is marked the last one is kept.
pub fn sample_layer_mask(num_layers: usize, rate: f64, rng: &mut RngStream) -> Result<Vec<StructureMask>> {
    check_rate("rate", rate)?;
    let mut masks: Vec<StructureMask> = (0..num_layers)
        .map(|_| StructureMask {
            eta: if rate > 0.0 && rng.bernoulli(rate) { -1.0 } else { 0.0 },
        })
        .collect();
    if !masks.is_empty() && masks_all_dropped(&masks) {
        masks.last_mut().unwrap().eta = 0.0;
    }
    Ok(masks)
}

fn masks_all_dropped(masks: &[StructureMask]) -> bool {
    masks.iter().all(|m| m.dropped())
}

/// Two-stage data mask over one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMask {
    /// `false` when stage one kept the sequence verbatim.
    pub applied: bool,
    /// Per-token scalar in `{-1, 0}`.
    pub beta: Vec<f64>,
}

impl DataMask {
    pub fn kept(&self) -> impl Iterator<Item = bool> + '_ {
        self.beta.iter().map(|&b| b == 0.0)
    }
}

pub fn sample_data_mask(len: usize, keep_prob: f64, token_prob: f64, rng: &mut RngStream) -> Result<DataMask> {
    if len == 0 {
        return Err(Error::Empty("data dropout needs a non-empty sequence"));
    }
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::InvalidRate {
            name: "dd_keep_prob",
            value: keep_prob,
            reason: "must lie in [0, 1]",
        });
    }
    check_rate("dd_token_prob", token_prob)?;
    if rng.bernoulli(keep_prob) {
        return Ok(DataMask {
            applied: false,
            beta: vec![0.0; len],
        });
    }
    let mut beta: Vec<f64> = (0..len)
        .map(|_| if rng.bernoulli(token_prob) { -1.0 } else { 0.0 })
        .collect();
    if beta.iter().all(|&b| b == -1.0) {
        let survivor = rng.below(len);
        beta[survivor] = 0.0;
    }
    Ok(DataMask { applied: true, beta })
}

/// Stage one keeps the sequence with probability `dd_keep_prob`; otherwise
/// each token is removed with probability `dd_token_prob`. Never returns an
/// empty sequence.
pub fn apply_two_stage_data_dropout(tokens: &[usize], spec: &DropoutSpec, rng: &mut RngStream) -> Result<Vec<usize>> {
    let mask = sample_data_mask(tokens.len(), spec.dd_keep_prob, spec.dd_token_prob, rng)?;
    if !mask.applied {
        return Ok(tokens.to_vec());
    }
    Ok(tokens
        .iter()
        .zip(mask.kept())
        .filter_map(|(&t, keep)| keep.then_some(t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamId;

    fn rng() -> RngStream {
        RngStream::new(11, StreamId::FeatureMask)
    }

    #[test]
    fn zero_rate_feature_mask_is_identity() {
        let m = sample_feature_mask(&[2, 3], 0.0, &mut rng()).unwrap();
        assert!(m.xi.data().iter().all(|&x| x == 0.0));
        let h = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(apply_feature_dropout(&h, &m).unwrap(), h);
    }

    #[test]
    fn half_rate_doubles_survivors() {
        let m = sample_feature_mask(&[1, 64], 0.5, &mut rng()).unwrap();
        assert!(m.xi.data().iter().all(|&x| x == -1.0 || x == 1.0));
        let h = Tensor::full(&[1, 64], 3.0);
        let out = apply_feature_dropout(&h, &m).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0 || x == 6.0));
    }

    #[test]
    fn explicit_mask_application() {
        let h = Tensor::vector(vec![2.0, 4.0]);
        let m = FeatureMask {
            xi: Tensor::vector(vec![-1.0, 0.0]),
            p: 0.0,
        };
        assert_eq!(apply_feature_dropout(&h, &m).unwrap().data(), &[0.0, 4.0]);
        let keep = FeatureMask {
            xi: Tensor::full(&[1, 2], 0.2 / 0.8),
            p: 0.2,
        };
        let out = apply_feature_dropout(&h, &keep).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-15 && (out.data()[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn rates_out_of_range_error() {
        assert!(sample_feature_mask(&[2], 1.0, &mut rng()).is_err());
        assert!(sample_layer_mask(3, 1.0, &mut rng()).is_err());
        assert!(apply_feature_dropout(
            &Tensor::zeros(&[1, 2]),
            &sample_feature_mask(&[1, 3], 0.1, &mut rng()).unwrap()
        )
        .is_err());
        let mut spec = DropoutSpec::unidrop();
        spec.fd3_rate = -0.1;
        assert!(spec.validate().is_err());
        spec = DropoutSpec::unidrop();
        spec.encoder_drop_rate = 1.0;
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn zero_layerdrop_keeps_everything() {
        let masks = sample_layer_mask(6, 0.0, &mut rng()).unwrap();
        assert!(masks.iter().all(|m| m.eta == 0.0));
    }

    #[test]
    fn single_layer_always_survives() {
        let mut r = rng();
        for _ in 0..1000 {
            let masks = sample_layer_mask(1, 0.9, &mut r).unwrap();
            assert_eq!(masks[0].eta, 0.0);
        }
        let mut fully = 0;
        for _ in 0..2000 {
            let masks = sample_layer_mask(2, 0.9, &mut r).unwrap();
            assert!(!masks_all_dropped(&masks));
            fully += usize::from(masks[0].dropped());
        }
        assert!(fully > 0);
    }

    #[test]
    fn keep_prob_one_is_verbatim() {
        let spec = DropoutSpec {
            dd_keep_prob: 1.0,
            ..DropoutSpec::unidrop()
        };
        let toks: Vec<usize> = (4..20).collect();
        let mut r = rng();
        for _ in 0..200 {
            assert_eq!(apply_two_stage_data_dropout(&toks, &spec, &mut r).unwrap(), toks);
        }
    }

    #[test]
    fn single_token_never_removed() {
        let spec = DropoutSpec {
            dd_keep_prob: 0.0,
            dd_token_prob: 0.9,
            ..DropoutSpec::unidrop()
        };
        let mut r = rng();
        for _ in 0..500 {
            assert_eq!(apply_two_stage_data_dropout(&[7], &spec, &mut r).unwrap(), vec![7]);
        }
        assert!(apply_two_stage_data_dropout(&[], &spec, &mut r).is_err());
    }

    #[test]
    fn scope_parsing() {
        for s in [
            LayerDropScope::DecoderOnly,
            LayerDropScope::EncoderOnly,
            LayerDropScope::Both,
            LayerDropScope::None,
        ] {
            assert_eq!(s.as_str().parse::<LayerDropScope>().unwrap(), s);
        }
        assert!("sideways".parse::<LayerDropScope>().is_err());
    }
}

use std::collections::BTreeMap;
use std::fmt;

use crate::data::Batch;
use crate::data::PaddedSeqs;
use crate::dropout::{sample_feature_factors, sample_layer_mask, DropoutSpec, StructureMask};
use crate::error::{Error, Result};
use crate::model::{AttnIdx, FfnIdx, LnIdx, Model};
use crate::numerics::{AttentionLayout, NodeId, RngStream, StreamId, Tape, Tensor};

/// Mask streams consumed by a training forward pass.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub feature: RngStream,
    pub layer: RngStream,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            feature: RngStream::new(seed, StreamId::FeatureMask),
            layer: RngStream::new(seed, StreamId::LayerMask),
        }
    }
}

/// Named activations captured during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub activations: BTreeMap<String, Tensor>,
    /// Post-softmax attention weights, `[batch * heads * q_len, k_len]`.
    pub attention: BTreeMap<String, Tensor>,
}

/// Tracing and activation-injection hooks for one forward pass.
#[derive(Debug, Default)]
pub struct Probe {
    pub trace: Option<ForwardTrace>,
    pub inject: Option<(String, Tensor)>,
    injected: Option<NodeId>,
}

impl Probe {
    pub fn tracing() -> Self {
        Self {
            trace: Some(ForwardTrace::default()),
            ..Self::default()
        }
    }

    /// Replace activation `slot` with `value` when the pass reaches it.
    pub fn inject(slot: impl Into<String>, value: Tensor) -> Self {
        Self {
            inject: Some((slot.into(), value)),
            ..Self::default()
        }
    }

    pub fn take_trace(&mut self) -> Option<ForwardTrace> {
        self.trace.take()
    }
}

#[derive(Clone, Copy)]
enum SlotName {
    Global(&'static str),
    Layer(&'static str, usize, &'static str),
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotName::Global(s) => f.write_str(s),
            SlotName::Layer(stack, i, what) => write!(f, "{stack}.{i}.{what}"),
        }
    }
}

/// Everything a completed seq2seq pass produces.
pub(crate) struct PassOutput {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub loss: NodeId,
    pub logits: NodeId,
    pub injected: Option<NodeId>,
}

struct Pass<'a> {
    model: &'a Model,
    tape: Tape,
    params: Vec<NodeId>,
    spec: DropoutSpec,
    residual: f64,
    rngs: Option<&'a mut TrainRngs>,
    probe: Option<&'a mut Probe>,
}

impl<'a> Pass<'a> {
    fn new(
        model: &'a Model,
        train: Option<(&DropoutSpec, &'a mut TrainRngs)>,
        probe: Option<&'a mut Probe>,
        param_grads: bool,
    ) -> Result<Self> {
        if let Some((name, _)) = probe.as_ref().and_then(|p| p.inject.as_ref()) {
            if !model.slot_names().iter().any(|s| s == name) {
                return Err(Error::UnknownSlot(name.clone()));
            }
        }
        let mut tape = Tape::new();
        let params = model
            .params
            .tensors
            .iter()
            .map(|t| {
                if param_grads {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let (spec, residual, rngs) = match train {
            Some((spec, rngs)) => {
                spec.validate()?;
                (spec.clone(), model.config.residual_dropout, Some(rngs))
            }
            None => (DropoutSpec::none(), 0.0, None),
        };
        Ok(Self {
            model,
            tape,
            params,
            spec,
            residual,
            rngs,
            probe,
        })
    }

    fn p(&self, i: usize) -> NodeId {
        self.params[i]
    }

    fn slot(&mut self, name: SlotName, x: NodeId) -> Result<NodeId> {
        let Some(probe) = self.probe.as_deref_mut() else {
            return Ok(x);
        };
        let mut out = x;
        if probe.injected.is_none() {
            if let Some((target, value)) = &probe.inject {
                if *target == name.to_string() {
                    let current = self.tape.value(x);
                    if current.shape() != value.shape() {
                        return Err(Error::shape(
                            "inject",
                            format!("slot {name} has shape {:?}, got {:?}", current.shape(), value.shape()),
                        ));
                    }
                    out = self.tape.leaf(value.clone());
                    probe.injected = Some(out);
                }
            }
        }
        if let Some(trace) = probe.trace.as_mut() {
            trace.activations.insert(name.to_string(), self.tape.value(out).clone());
        }
        Ok(out)
    }

    fn feature_drop(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let Some(rngs) = self.rngs.as_deref_mut() else {
            return Ok(x);
        };
        let v = self.tape.value(x);
        let shape = v.shape().to_vec();
        let factors = sample_feature_factors(v.numel(), rate, &mut rngs.feature);
        self.tape.mul_const(x, Tensor::new(shape, factors)?)
    }

    fn layer_masks(&mut self, n: usize, active: bool) -> Result<Vec<StructureMask>> {
        match self.rngs.as_deref_mut() {
            Some(rngs) if active && self.spec.layerdrop_rate > 0.0 => {
                sample_layer_mask(n, self.spec.layerdrop_rate, &mut rngs.layer)
            }
            _ => Ok(vec![StructureMask { eta: 0.0 }; n]),
        }
    }

    fn linear(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.linear(x, w, b)
    }

    fn layer_norm(&mut self, x: NodeId, ln: LnIdx) -> Result<NodeId> {
        let (g, b) = (self.p(ln.gain), self.p(ln.bias));
        self.tape.layer_norm(x, g, b, self.model.config.ln_eps)
    }

    fn embed(&mut self, seqs: &PaddedSeqs, table: usize, slot: &'static str) -> Result<NodeId> {
        let max = self.model.config.max_len;
        if seqs.len > max {
            return Err(Error::SequenceTooLong { len: seqs.len, max });
        }
        let d = self.model.config.d_model;
        let tok = self.tape.gather(self.p(table), &seqs.ids)?;
        let tok = self.tape.scale(tok, (d as f64).sqrt());
        let tok = self.slot(SlotName::Global(slot), tok)?;
        let positions = self.model.positions();
        let mut pos = Vec::with_capacity(seqs.ids.len() * d);
        for _ in 0..seqs.batch {
            for t in 0..seqs.len {
                pos.extend_from_slice(positions.row(t));
            }
        }
        let pos = self.tape.constant(Tensor::new(vec![seqs.ids.len(), d], pos)?);
        self.tape.add(tok, pos)
    }

    fn attention(
        &mut self,
        xq: NodeId,
        xkv: NodeId,
        idx: AttnIdx,
        layout: AttentionLayout,
        trace_name: SlotName,
    ) -> Result<NodeId> {
        let fd3 = self.spec.fd3_rate;
        let q_in = self.feature_drop(xq, fd3)?;
        let k_in = self.feature_drop(xkv, fd3)?;
        let v_in = self.feature_drop(xkv, fd3)?;
        let q = self.linear(q_in, idx.wq, idx.bq)?;
        let k = self.linear(k_in, idx.wk, idx.bk)?;
        let v = self.linear(v_in, idx.wv, idx.bv)?;
        let proj = self.spec.qkv_proj_rate;
        let q = self.feature_drop(q, proj)?;
        let k = self.feature_drop(k, proj)?;
        let v = self.feature_drop(v, proj)?;
        let n_w = layout.batch * layout.heads * layout.q_len * layout.k_len;
        let fd1 = self.spec.fd1_rate;
        let drop = match self.rngs.as_deref_mut() {
            Some(rngs) if fd1 > 0.0 => Some(sample_feature_factors(n_w, fd1, &mut rngs.feature)),
            _ => None,
        };
        let k_len = layout.k_len;
        let (ctx, weights) = self.tape.attention(q, k, v, layout, drop)?;
        if let Some(trace) = self.probe.as_deref_mut().and_then(|p| p.trace.as_mut()) {
            let rows = weights.len() / k_len;
            trace
                .attention
                .insert(trace_name.to_string(), Tensor::new(vec![rows, k_len], weights)?);
        }
        self.linear(ctx, idx.wo, idx.bo)
    }

    fn ffn(&mut self, x: NodeId, idx: FfnIdx, stack: &'static str, layer: usize) -> Result<NodeId> {
        let h = self.linear(x, idx.w1, idx.b1)?;
        let h = self.tape.relu(h);
        let h = self.slot(SlotName::Layer(stack, layer, "ffn_act"), h)?;
        let h = self.feature_drop(h, self.spec.fd2_rate)?;
        self.linear(h, idx.w2, idx.b2)
    }

    /// Residual dropout on the sublayer output, add, then slot the pre-norm sum.
    fn add_residual(&mut self, x: NodeId, sub: NodeId, slot: SlotName) -> Result<NodeId> {
        let sub = self.feature_drop(sub, self.residual)?;
        let s = self.tape.add(x, sub)?;
        self.slot(slot, s)
    }

    fn encoder(&mut self, src: &PaddedSeqs) -> Result<NodeId> {
        let cfg = &self.model.config;
        let heads = cfg.heads;
        let layout = self.model.layout();
        let valid = src.valid();
        let mut x = self.embed(src, layout.src_embed, "src.embed")?;
        let masks = self.layer_masks(layout.enc.len(), self.spec.layerdrop_scope.encoder())?;
        for (i, layer) in layout.enc.iter().enumerate() {
            if masks[i].dropped() {
                continue;
            }
            let att_layout = AttentionLayout {
                batch: src.batch,
                q_len: src.len,
                k_len: src.len,
                heads,
                key_valid: valid.clone(),
                causal: false,
            };
            let a = self.attention(x, x, layer.attn, att_layout, SlotName::Layer("enc", i, "self_attn"))?;
            let s = self.add_residual(x, a, SlotName::Layer("enc", i, "self_sum"))?;
            x = self.layer_norm(s, layer.ln1)?;
            let f = self.ffn(x, layer.ffn, "enc", i)?;
            let s = self.add_residual(x, f, SlotName::Layer("enc", i, "ffn_sum"))?;
            x = self.layer_norm(s, layer.ln2)?;
            x = self.slot(SlotName::Layer("enc", i, "out"), x)?;
        }
        Ok(x)
    }

    /// Memory after the EncoderDrop variant.
    fn maybe_drop_memory(&mut self, memory: NodeId) -> NodeId {
        let rate = self.spec.encoder_drop_rate;
        let drop = match self.rngs.as_deref_mut() {
            Some(rngs) if rate > 0.0 => rngs.layer.bernoulli(rate),
            _ => false,
        };
        if drop {
            self.tape.scale(memory, 0.0)
        } else {
            memory
        }
    }

    fn decoder(&mut self, tgt_in: &PaddedSeqs, memory: NodeId, src_valid: &[bool], src_len: usize) -> Result<NodeId> {
        let heads = self.model.config.heads;
        let layout = self.model.layout();
        let valid = tgt_in.valid();
        let mut y = self.embed(tgt_in, layout.tgt_embed, "tgt.embed")?;
        let masks = self.layer_masks(layout.dec.len(), self.spec.layerdrop_scope.decoder())?;
        for (i, layer) in layout.dec.iter().enumerate() {
            if masks[i].dropped() {
                continue;
            }
            let self_layout = AttentionLayout {
                batch: tgt_in.batch,
                q_len: tgt_in.len,
                k_len: tgt_in.len,
                heads,
                key_valid: valid.clone(),
                causal: true,
            };
            let a = self.attention(
                y,
                y,
                layer.self_attn,
                self_layout,
                SlotName::Layer("dec", i, "self_attn"),
            )?;
            let s = self.add_residual(y, a, SlotName::Layer("dec", i, "self_sum"))?;
            y = self.layer_norm(s, layer.ln1)?;
            let cross_layout = AttentionLayout {
                batch: tgt_in.batch,
                q_len: tgt_in.len,
                k_len: src_len,
                heads,
                key_valid: src_valid.to_vec(),
                causal: false,
            };
            let c = self.attention(
                y,
                memory,
                layer.cross,
                cross_layout,
                SlotName::Layer("dec", i, "cross_attn"),
            )?;
            let s = self.add_residual(y, c, SlotName::Layer("dec", i, "cross_sum"))?;
            y = self.layer_norm(s, layer.ln2)?;
            let f = self.ffn(y, layer.ffn, "dec", i)?;
            let s = self.add_residual(y, f, SlotName::Layer("dec", i, "ffn_sum"))?;
            y = self.layer_norm(s, layer.ln3)?;
            y = self.slot(SlotName::Layer("dec", i, "out"), y)?;
        }
        self.slot(SlotName::Global("dec.final"), y)
    }

    /// FD-4 on the features, output projection, then the logits variant.
    fn project(&mut self, features: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let f = self.feature_drop(features, self.spec.fd4_rate)?;
        let logits = self.linear(f, w, b)?;
        self.feature_drop(logits, self.spec.logits_drop_rate)
    }

    fn seq2seq_logits(&mut self, batch: &Batch) -> Result<NodeId> {
        let memory = self.encoder(&batch.src)?;
        let memory = self.maybe_drop_memory(memory);
        let tgt_in = batch.decoder_input();
        let features = self.decoder(&tgt_in, memory, &batch.src.valid(), batch.src.len)?;
        let layout = self.model.layout();
        self.project(features, layout.out_w, layout.out_b)
    }

    fn classifier_logits(&mut self, src: &PaddedSeqs) -> Result<NodeId> {
        let (w, b) = self
            .model
            .layout()
            .cls
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let enc = self.encoder(src)?;
        let first: Vec<usize> = (0..src.batch).map(|b| b * src.len).collect();
        let pooled = self.tape.gather(enc, &first)?;
        let pooled = self.slot(SlotName::Global("cls.features"), pooled)?;
        self.project(pooled, w, b)
    }

    fn finish(self, loss: NodeId, logits: NodeId) -> Result<PassOutput> {
        let injected = match self.probe {
            Some(p) => match (&p.inject, p.injected) {
                (Some((name, _)), None) => {
                    return Err(Error::UnknownSlot(format!("{name} (not reached in this pass)")))
                }
                (_, id) => id,
            },
            None => None,
        };
        Ok(PassOutput {
            tape: self.tape,
            params: self.params,
            loss,
            logits,
            injected,
        })
    }
}

/// Optional training context: dropout rates and their mask streams.
pub type Train<'a> = Option<(&'a DropoutSpec, &'a mut TrainRngs)>;

impl Model {
    pub(crate) fn run_seq2seq<'a>(
        &'a self,
        batch: &Batch,
        smoothing: f64,
        train: Train<'a>,
        probe: Option<&'a mut Probe>,
        param_grads: bool,
    ) -> Result<PassOutput> {
        let mut pass = Pass::new(self, train, probe, param_grads)?;
        let logits = pass.seq2seq_logits(batch)?;
        let (loss, _) = pass.tape.cross_entropy(logits, &batch.decoder_targets(), smoothing)?;
        pass.finish(loss, logits)
    }

    /// Decoder logits `[batch * (tgt_len - 1), tgt_vocab]`.
    pub fn logits(&self, batch: &Batch, train: Train<'_>, probe: Option<&mut Probe>) -> Result<Tensor> {
        let mut pass = Pass::new(self, train, probe, false)?;
        let logits = pass.seq2seq_logits(batch)?;
        Ok(pass.tape.value(logits).clone())
    }

    /// Smoothed cross-entropy over non-pad targets.
    pub fn loss(&self, batch: &Batch, smoothing: f64, train: Train<'_>, probe: Option<&mut Probe>) -> Result<f64> {
        let out = self.run_seq2seq(batch, smoothing, train, probe, false)?;
        Ok(out.tape.value(out.loss).item())
    }

    /// Loss and its gradient for every parameter, in `params` order.
    pub fn loss_and_grads(&self, batch: &Batch, smoothing: f64, train: Train<'_>) -> Result<(f64, Vec<Tensor>)> {
        let out = self.run_seq2seq(batch, smoothing, train, None, true)?;
        let mut grads = out.tape.backward(out.loss)?;
        let loss = out.tape.value(out.loss).item();
        let g = out
            .params
            .iter()
            .zip(&self.params.tensors)
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((loss, g))
    }

    /// Dropout-free loss with `slot` replaced by `value`, and the gradient
    /// with respect to that injected activation.
    pub fn injected_loss_and_grad(
        &self,
        batch: &Batch,
        smoothing: f64,
        slot: &str,
        value: &Tensor,
    ) -> Result<(f64, Tensor)> {
        let mut probe = Probe::inject(slot, value.clone());
        let out = self.run_seq2seq(batch, smoothing, None, Some(&mut probe), false)?;
        let id = out.injected.expect("finish() checks the slot was reached");
        let grads = out.tape.backward(out.loss)?;
        Ok((out.tape.value(out.loss).item(), grads.wrt(id, value)))
    }

    /// Dropout-free loss with `slot` replaced by `value`.
    pub fn injected_loss(&self, batch: &Batch, smoothing: f64, slot: &str, value: &Tensor) -> Result<f64> {
        let mut probe = Probe::inject(slot, value.clone());
        let out = self.run_seq2seq(batch, smoothing, None, Some(&mut probe), false)?;
        Ok(out.tape.value(out.loss).item())
    }

    /// Squared Frobenius norm of the Jacobian of the logits at non-pad
    /// target positions with respect to activation `slot`, one reverse
    /// sweep per output coordinate.
    pub fn injected_jacobian_sq_norm(&self, batch: &Batch, slot: &str, value: &Tensor) -> Result<f64> {
        let mut probe = Probe::inject(slot, value.clone());
        let mut out = self.run_seq2seq(batch, 0.0, None, Some(&mut probe), false)?;
        let id = out.injected.expect("finish() checks the slot was reached");
        let shape = out.tape.value(out.logits).shape().to_vec();
        let cols = shape[1];
        let mut total = Vec::new();
        for (row, target) in batch.decoder_targets().iter().enumerate() {
            if target.is_none() {
                continue;
            }
            for c in 0..cols {
                let mut e = Tensor::zeros(&shape);
                e.data_mut()[row * cols + c] = 1.0;
                let picked = out.tape.mul_const(out.logits, e)?;
                let root = out.tape.sum(picked);
                let g = out.tape.backward(root)?.wrt(id, value);
                total.push(g.data().iter().map(|x| x * x).sum::<f64>());
            }
        }
        Ok(crate::numerics::pairwise_sum(&total))
    }

    /// Eval-mode encoder output, `[batch * src_len, d_model]`.
    pub fn encode(&self, src: &PaddedSeqs) -> Result<Tensor> {
        let mut pass = Pass::new(self, None, None, false)?;
        let memory = pass.encoder(src)?;
        Ok(pass.tape.value(memory).clone())
    }

    /// Log-probabilities of the next token after each prefix.
    ///
    /// `memory` is a [`Model::encode`] result for `src`; prefix `i` attends
    /// to source row `source_of[i]`. All prefixes must have equal length.
    pub fn next_token_log_probs(
        &self,
        memory: &Tensor,
        src: &PaddedSeqs,
        prefixes: &[Vec<usize>],
        source_of: &[usize],
    ) -> Result<Tensor> {
        let n = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if prefixes.iter().any(|p| p.len() != t) || t == 0 || source_of.len() != n {
            return Err(Error::shape(
                "next_token_log_probs",
                "prefixes must be non-empty and equal length",
            ));
        }
        let s = src.len;
        let mut rows = Vec::with_capacity(n * s);
        let mut valid = Vec::with_capacity(n * s);
        let src_valid = src.valid();
        for &b in source_of {
            rows.extend(b * s..(b + 1) * s);
            valid.extend_from_slice(&src_valid[b * s..(b + 1) * s]);
        }
        let tgt_in = PaddedSeqs::from_rows(prefixes);
        let mut pass = Pass::new(self, None, None, false)?;
        let mem = pass.tape.constant(memory.clone());
        let mem = pass.tape.gather(mem, &rows)?;
        let features = pass.decoder(&tgt_in, mem, &valid, s)?;
        let last: Vec<usize> = (0..n).map(|i| i * t + t - 1).collect();
        let last = pass.tape.gather(features, &last)?;
        let layout = self.layout();
        let logits = pass.project(last, layout.out_w, layout.out_b)?;
        let mut out = pass.tape.value(logits).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Ok(out)
    }

    /// Classification logits `[batch, num_classes]` from the first encoder
    /// position.
    pub fn classify_logits(&self, src: &PaddedSeqs, train: Train<'_>, probe: Option<&mut Probe>) -> Result<Tensor> {
        let mut pass = Pass::new(self, train, probe, false)?;
        let logits = pass.classifier_logits(src)?;
        Ok(pass.tape.value(logits).clone())
    }

    pub fn classify_loss_and_grads(
        &self,
        src: &PaddedSeqs,
        labels: &[usize],
        smoothing: f64,
        train: Train<'_>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut pass = Pass::new(self, train, None, true)?;
        let logits = pass.classifier_logits(src)?;
        let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let (loss, _) = pass.tape.cross_entropy(logits, &targets, smoothing)?;
        let mut grads = pass.tape.backward(loss)?;
        let g = pass
            .params
            .iter()
            .zip(&self.params.tensors)
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((pass.tape.value(loss).item(), g))
    }
}

//! Toy cross-modal encoder, fusion transformer and task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sws_nnkit::layers::{Embedding, EncoderLayer, FeedForward, LayerNorm, Linear};
use sws_nnkit::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::config::{ModelConfig, RelposInput, SrMode, SrTask};
use crate::data::{Batch, OBJECT_FEATURES};
use crate::error::{ModelError, Result};

/// Segment ids inside the fusion sequence.
const SEG_CLS: usize = 0;
const SEG_OBJECT: usize = 1;
const SEG_TEXT: usize = 2;
const SEG_PATCH: usize = 3;

/// Layer definitions; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    word: Embedding,
    text_pos: Embedding,
    object_feat: Linear,
    object_feat_ln: LayerNorm,
    object_box: Linear,
    object_box_ln: LayerNorm,
    object_role: Embedding,
    referent: Linear,
    cls: ParamId,
    lang: Vec<EncoderLayer>,
    visual: Vec<EncoderLayer>,
    cross: Vec<EncoderLayer>,
    segment: Embedding,
    object_slot: Embedding,
    patch_embed: Option<Linear>,
    patch_pos: Option<Embedding>,
    relpos_proj: Option<Linear>,
    fusion: Vec<EncoderLayer>,
    vqa: Linear,
    sr_reg: Option<FeedForward>,
    bin_object: Option<FeedForward>,
    bin_pair: Option<FeedForward>,
}

/// Three-stream encoder output for a batch: `x: [B, H]`, `v: [B·N, H]`,
/// `t: [B·L, H]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    pub x: Var,
    pub v: Var,
    pub t: Var,
}

/// Head outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub encoder: EncoderOutputs,
    /// Fused segments `(x̂, v̂, t̂, p̂)`; `v̂` includes late-fused offsets.
    pub fused: (Var, Var, Var, Option<Var>),
    /// `[B, A]`.
    pub vqa_logits: Var,
    /// `[B·N, D]` centroids in `[0, 1]`.
    pub sr_reg: Option<Var>,
    /// `[B·N·N, D]` pairwise differences of `sr_reg`.
    pub rpe_reg: Option<Var>,
    /// `[B·N·D, C]` per-object bin logits.
    pub bin_object: Option<Var>,
    /// `[B·N·N·D, C]` pairwise bin logits.
    pub bin_pair: Option<Var>,
    /// `[B·N, H]` projected relative-position inputs.
    pub relpos: Option<Var>,
}

fn layers<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    count: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncoderLayer>> {
    (0..count)
        .map(|i| {
            let mut l = EncoderLayer::new(
                store,
                &format!("{name}.{i}"),
                cfg.hidden,
                cfg.heads,
                cfg.ffn_mult * cfg.hidden,
                rng,
            )?;
            l.dropout = cfg.dropout;
            Ok(l)
        })
        .collect()
}

impl Model {
    /// Builds the layers and a freshly initialized parameter store.
    pub fn new<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (h, n, d) = (cfg.hidden, cfg.max_objects, cfg.dims);
        let word = Embedding::new(&mut s, "word", cfg.question_vocab.len(), h, &mut rng)?;
        let text_pos = Embedding::new(&mut s, "text_pos", cfg.max_question_len, h, &mut rng)?;
        let object_feat = Linear::new(&mut s, "object_feat", OBJECT_FEATURES - 4, h, &mut rng)?;
        let object_feat_ln = LayerNorm::new(&mut s, "object_feat_ln", h)?;
        let object_box = Linear::new(&mut s, "object_box", 4, h, &mut rng)?;
        let object_box_ln = LayerNorm::new(&mut s, "object_box_ln", h)?;
        let object_role = Embedding::new(&mut s, "object_role", 3, h, &mut rng)?;
        let referent = Linear::new(&mut s, "referent", 3 * h, h, &mut rng)?;
        let cls = s.add("cls", Tensor::uniform(&[1, h], 1.0 / (h as f64).sqrt(), &mut rng))?;
        let lang = layers(&mut s, "lang", cfg.lang_layers, cfg, &mut rng)?;
        let visual = layers(&mut s, "visual", cfg.visual_layers, cfg, &mut rng)?;
        let cross = layers(&mut s, "cross", cfg.cross_layers, cfg, &mut rng)?;
        let segment = Embedding::new(&mut s, "segment", 4, h, &mut rng)?;
        let object_slot = Embedding::new(&mut s, "object_slot", n, h, &mut rng)?;
        let (patch_embed, patch_pos) = if cfg.use_patches {
            let row = 3 * cfg.pyramid.patch_side * cfg.pyramid.patch_side;
            (
                Some(Linear::new(&mut s, "patch_embed", row, h, &mut rng)?),
                Some(Embedding::new(&mut s, "patch_pos", cfg.num_patches(), h, &mut rng)?),
            )
        } else {
            (None, None)
        };
        let relpos_proj = match cfg.relpos_input {
            RelposInput::None => None,
            _ => {
                let width = if cfg.relpos_pairwise { n * d } else { d };
                Some(Linear::new(&mut s, "relpos_proj", width, h, &mut rng)?)
            }
        };
        let fusion = layers(&mut s, "fusion", cfg.fusion_layers, cfg, &mut rng)?;
        let vqa = Linear::new(&mut s, "vqa", h, cfg.answer_vocab.len(), &mut rng)?;
        let (mut sr_reg, mut bin_object, mut bin_pair) = (None, None, None);
        match cfg.sr_mode {
            _ if cfg.sr_task == SrTask::None => {}
            SrMode::Regression => sr_reg = Some(FeedForward::new(&mut s, "sr_reg", h, h, d, &mut rng)?),
            SrMode::Bins(c) => {
                if cfg.sr_task.uses_oce() {
                    bin_object = Some(FeedForward::new(&mut s, "bin_object", h, h, c * d, &mut rng)?);
                }
                if cfg.sr_task.uses_rpe() {
                    bin_pair = Some(FeedForward::new(&mut s, "bin_pair", 3 * h, h, c * d, &mut rng)?);
                }
            }
        }
        let model = Model {
            cfg: cfg.clone(),
            word,
            text_pos,
            object_feat,
            object_feat_ln,
            object_box,
            object_box_ln,
            object_role,
            referent,
            cls,
            lang,
            visual,
            cross,
            segment,
            object_slot,
            patch_embed,
            patch_pos,
            relpos_proj,
            fusion,
            vqa,
            sr_reg,
            bin_object,
            bin_pair,
        };
        Ok((model, s))
    }

    fn stack<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        layers: &[EncoderLayer],
        mut x: Var,
        batch: usize,
        seq: usize,
        mask: &[bool],
        seed: Option<u64>,
    ) -> Result<Var> {
        for (i, l) in layers.iter().enumerate() {
            x = l.forward(
                g,
                p,
                x,
                batch,
                seq,
                Some(mask),
                seed.map(|s| s.wrapping_add(i as u64 * 7919)),
            )?;
        }
        Ok(x)
    }

    /// Lays out per-segment row blocks (each `[B·len_k, H]`) as `B`
    /// contiguous sequences of `Σ len_k` rows. Returns the permuted rows and
    /// the inverse permutation for splitting back.
    fn interleave<T: Scalar>(
        g: &mut Graph<T>,
        parts: &[Var],
        lens: &[usize],
        batch: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let cat = g.concat(parts, 0)?;
        let seq: usize = lens.iter().sum();
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            offsets.push(acc);
            acc += batch * l;
        }
        let mut idx = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            for (k, &l) in lens.iter().enumerate() {
                idx.extend((0..l).map(|r| offsets[k] + b * l + r));
            }
        }
        let mut inverse = vec![0; idx.len()];
        for (pos, &src) in idx.iter().enumerate() {
            inverse[src] = pos;
        }
        Ok((g.gather_rows(cat, &idx)?, inverse))
    }

    fn deinterleave<T: Scalar>(
        g: &mut Graph<T>,
        seqs: Var,
        inverse: &[usize],
        lens: &[usize],
        batch: usize,
    ) -> Result<Vec<Var>> {
        let back = g.gather_rows(seqs, inverse)?;
        let sizes: Vec<usize> = lens.iter().map(|l| l * batch).collect();
        Ok(g.split(back, 0, &sizes)?)
    }

    fn sequence_mask(parts: &[(&[bool], usize)], batch: usize) -> Vec<bool> {
        let mut out = Vec::new();
        for b in 0..batch {
            for &(m, l) in parts {
                out.extend_from_slice(&m[b * l..(b + 1) * l]);
            }
        }
        out
    }

    /// Language, visual and cross-modal stacks producing `(x, v, t)`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &Batch<T>,
        seed: Option<u64>,
    ) -> Result<EncoderOutputs> {
        let (b, n, l) = (batch.size, self.cfg.max_objects, self.cfg.max_question_len);
        if batch.tokens.len() != b * l || batch.objects.shape() != [b * n, OBJECT_FEATURES] {
            return Err(ModelError::Shape(format!(
                "batch of {b} needs {} tokens and [{}, {OBJECT_FEATURES}] objects",
                b * l,
                b * n
            )));
        }
        let words = self.word.forward(g, p, &batch.tokens)?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = self.text_pos.forward(g, p, &pos_ids)?;
        let t = g.add(words, pos)?;
        let t = self.stack(g, p, &self.lang, t, b, l, &batch.token_mask, seed)?;

        let objects = g.input(batch.objects.clone());
        // Appearance and box are projected and normalized separately, then
        // averaged, so the four box coordinates are not drowned out.
        let feat = g.slice(objects, 1, 0, OBJECT_FEATURES - 4)?;
        let bbox = g.slice(objects, 1, OBJECT_FEATURES - 4, 4)?;
        let feat = self.object_feat.forward(g, p, feat)?;
        // Attribute words share the question embedding table, which gives
        // text-object matching a common starting point.
        let n_slots = batch.object_words.len() / 2;
        let colors: Vec<usize> = (0..n_slots).map(|k| batch.object_words[2 * k]).collect();
        let shapes: Vec<usize> = (0..n_slots).map(|k| batch.object_words[2 * k + 1]).collect();
        let ce = self.word.forward(g, p, &colors)?;
        let se = self.word.forward(g, p, &shapes)?;
        let feat = g.add(feat, ce)?;
        let feat = g.add(feat, se)?;
        let feat = self.object_feat_ln.forward(g, p, feat)?;
        let bbox = self.object_box.forward(g, p, bbox)?;
        let bbox = self.object_box_ln.forward(g, p, bbox)?;
        let v = g.add(feat, bbox)?;
        let v = g.scale(v, T::from_f64_lossy(0.5));
        // Grounding of the question's referents, which a pretrained encoder
        // would bring with it.
        let role = self.object_role.forward(g, p, &batch.object_roles)?;
        let v = g.add(v, role)?;
        let v = self.stack(g, p, &self.visual, v, b, n, &batch.object_mask, seed.map(|s| s ^ 1))?;

        let cls = g.gather_rows(p[self.cls], &vec![0; b])?;
        let lens = [1, l, n];
        let (seq, inverse) = Self::interleave(g, &[cls, t, v], &lens, b)?;
        let ones = vec![true; b];
        let mask = Self::sequence_mask(&[(&ones, 1), (&batch.token_mask, l), (&batch.object_mask, n)], b);
        let h = self.stack(g, p, &self.cross, seq, b, 1 + l + n, &mask, seed.map(|s| s ^ 2))?;
        let parts = Self::deinterleave(g, h, &inverse, &lens, b)?;
        Ok(EncoderOutputs {
            x: parts[0],
            t: parts[1],
            v: parts[2],
        })
    }

    /// Per-object affine projection of relative-position rows to `H`.
    pub fn project_relpos<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rows: Var) -> Result<Option<Var>> {
        match &self.relpos_proj {
            Some(lin) => Ok(Some(lin.forward(g, p, rows)?)),
            None => Ok(None),
        }
    }

    /// `[v_s; v_o; v_s − v_o]` per question for its subject and object
    /// slots, zero when the question names no pair. `[B, 3H]`.
    pub fn referent_pair<T: Scalar>(&self, g: &mut Graph<T>, v: Var, batch: &Batch<T>) -> Result<Var> {
        let (b, n, h) = (batch.size, self.cfg.max_objects, self.cfg.hidden);
        let slot = |bi: usize, role: usize| (0..n).find(|&k| batch.object_roles[bi * n + k] == role);
        let mut subj = Vec::with_capacity(b);
        let mut obj = Vec::with_capacity(b);
        let mut keep = Vec::with_capacity(b * 3 * h);
        for bi in 0..b {
            let pair = slot(bi, 1).zip(slot(bi, 2));
            let (s, o) = pair.unwrap_or((0, 0));
            subj.push(bi * n + s);
            obj.push(bi * n + o);
            let m = if pair.is_some() { T::one() } else { T::zero() };
            keep.extend(std::iter::repeat(m).take(3 * h));
        }
        let vs = g.gather_rows(v, &subj)?;
        let vo = g.gather_rows(v, &obj)?;
        let diff = g.sub(vs, vo)?;
        let pair = g.concat(&[vs, vo, diff], 1)?;
        let keep = g.input(Tensor::from_vec(&[b, 3 * h], keep)?);
        Ok(g.mul(pair, keep)?)
    }

    /// Fusion transformer over `[x, v, t, p]` with optional early or late
    /// addition of `r` to the visual stream.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        enc: EncoderOutputs,
        patches: Option<Var>,
        r: Option<Var>,
        batch: &Batch<T>,
        seed: Option<u64>,
    ) -> Result<(Var, Var, Var, Option<Var>)> {
        let (b, n, l) = (batch.size, self.cfg.max_objects, self.cfg.max_question_len);
        let np = if patches.is_some() { self.cfg.num_patches() } else { 0 };
        let seg = |g: &mut Graph<T>, id: usize, rows: usize| self.segment.forward(g, p, &vec![id; rows]);

        let mut v = enc.v;
        if let (RelposInput::Early, Some(r)) = (self.cfg.relpos_input, r) {
            v = g.add(v, r)?;
        }
        let pair = self.referent_pair(g, v, batch)?;
        let pair = self.referent.forward(g, p, pair)?;
        let x = g.add(enc.x, pair)?;
        let slots: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let slot = self.object_slot.forward(g, p, &slots)?;
        v = g.add(v, slot)?;
        let sv = seg(g, SEG_OBJECT, b * n)?;
        v = g.add(v, sv)?;
        let sx = seg(g, SEG_CLS, b)?;
        let x = g.add(x, sx)?;
        let st = seg(g, SEG_TEXT, b * l)?;
        let t = g.add(enc.t, st)?;

        let mut parts = vec![x, v, t];
        let mut lens = vec![1, n, l];
        let ones = vec![true; b];
        let patch_mask = vec![true; b * np];
        let mut mask_parts: Vec<(&[bool], usize)> = vec![(&ones, 1), (&batch.object_mask, n), (&batch.token_mask, l)];
        if let Some(pv) = patches {
            let ids: Vec<usize> = (0..b).flat_map(|_| 0..np).collect();
            let pos = self
                .patch_pos
                .as_ref()
                .expect("patch layers exist")
                .forward(g, p, &ids)?;
            let pv = g.add(pv, pos)?;
            let sp = seg(g, SEG_PATCH, b * np)?;
            parts.push(g.add(pv, sp)?);
            lens.push(np);
            mask_parts.push((&patch_mask, np));
        }
        let seq_len: usize = lens.iter().sum();
        if seq_len != 1 + n + l + np {
            return Err(ModelError::Shape(format!(
                "fusion length {seq_len} != {}",
                1 + n + l + np
            )));
        }
        let (seq, inverse) = Self::interleave(g, &parts, &lens, b)?;
        let mask = Self::sequence_mask(&mask_parts, b);
        let h = self.stack(g, p, &self.fusion, seq, b, seq_len, &mask, seed.map(|s| s ^ 3))?;
        let out = Self::deinterleave(g, h, &inverse, &lens, b)?;
        let mut v_hat = out[1];
        if let (RelposInput::Late, Some(r)) = (self.cfg.relpos_input, r) {
            v_hat = g.add(v_hat, r)?;
        }
        Ok((out[0], v_hat, out[2], out.get(3).copied()))
    }

    /// Full forward pass: encoder, optional patches and offsets, fusion, heads.
    /// `dropout_seed` freezes dropout masks (required for gradient checks).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &Batch<T>,
        dropout_seed: Option<u64>,
    ) -> Result<Outputs> {
        let cfg = &self.cfg;
        let (b, n, d) = (batch.size, cfg.max_objects, cfg.dims);
        if cfg.use_patches != batch.patches.is_some()
            || (cfg.relpos_input != RelposInput::None) != batch.relpos.is_some()
        {
            return Err(ModelError::Config("batch inputs do not match the model config".into()));
        }
        let enc = self.encode(g, p, batch, dropout_seed)?;
        let patches = match (&self.patch_embed, &batch.patches) {
            (Some(lin), Some(px)) => {
                if px.shape()[0] != b * cfg.num_patches() || px.shape()[1] != lin.fan_in {
                    return Err(ModelError::Shape(format!("patch tensor {:?}", px.shape())));
                }
                let x = g.input(px.clone());
                Some(lin.forward(g, p, x)?)
            }
            _ => None,
        };
        let relpos = match &batch.relpos {
            Some(rows) => {
                let x = g.input(rows.clone());
                self.project_relpos(g, p, x)?
            }
            None => None,
        };
        let fused = self.fuse(g, p, enc, patches, relpos, batch, dropout_seed)?;
        let (x_hat, v_hat) = (fused.0, fused.1);
        let vqa_logits = self.vqa.forward(g, p, x_hat)?;

        let (mut sr_reg, mut rpe_reg, mut bin_object, mut bin_pair) = (None, None, None, None);
        if let Some(head) = &self.sr_reg {
            let o = head.forward(g, p, v_hat)?;
            let o = g.sigmoid(o);
            sr_reg = Some(o);
            rpe_reg = Some(g.pair_diff(o, n)?);
        }
        if let (Some(head), SrMode::Bins(c)) = (&self.bin_object, cfg.sr_mode) {
            let o = head.forward(g, p, v_hat)?;
            bin_object = Some(g.reshape(o, &[b * n * d, c])?);
        }
        if let (Some(head), SrMode::Bins(c)) = (&self.bin_pair, cfg.sr_mode) {
            let pairs = g.pair_features(v_hat, n)?;
            let o = head.forward(g, p, pairs)?;
            bin_pair = Some(g.reshape(o, &[b * n * n * d, c])?);
        }
        Ok(Outputs {
            encoder: enc,
            fused,
            vqa_logits,
            sr_reg,
            rpe_reg,
            bin_object,
            bin_pair,
            relpos,
        })
    }

    /// `(vqa_loss, sr_loss, total)` where `total = α·vqa + β·sr`, or `α·vqa`
    /// without an SR task. Joint OCE+RPE averages the two SR losses.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        out: &Outputs,
        batch: &Batch<T>,
    ) -> Result<(Var, Option<Var>, Var)> {
        let cfg = &self.cfg;
        let targets: Vec<Option<usize>> = batch.answers.iter().map(|&a| Some(a)).collect();
        let vqa = g.cross_entropy(out.vqa_logits, &targets)?;
        let sr = self.sr_loss(g, out, batch)?;
        let a = g.scale(vqa, T::from_f64_lossy(cfg.alpha));
        let total = match sr {
            Some(s) => {
                let bs = g.scale(s, T::from_f64_lossy(cfg.beta));
                g.add(a, bs)?
            }
            None => a,
        };
        Ok((vqa, sr, total))
    }

    /// Masked SR loss: regression MSE or bin cross-entropy, diagonal and
    /// padded pairs excluded.
    pub fn sr_loss<T: Scalar>(&self, g: &mut Graph<T>, out: &Outputs, batch: &Batch<T>) -> Result<Option<Var>> {
        let cfg = &self.cfg;
        let (n, d) = (cfg.max_objects, cfg.dims);
        let mut terms = Vec::new();
        if cfg.sr_task.uses_oce() {
            let mask = batch.object_cell_mask(d);
            let t = match (cfg.sr_mode, out.sr_reg, out.bin_object) {
                (SrMode::Regression, Some(pred), _) => {
                    g.mse(pred, batch.oce.as_ref().ok_or_else(|| missing("oce"))?, Some(&mask))?
                }
                (SrMode::Bins(_), _, Some(logits)) => {
                    let bins = batch.oce_bins.as_ref().ok_or_else(|| missing("oce bins"))?;
                    g.cross_entropy(logits, &masked_targets(bins, &mask))?
                }
                _ => return Err(ModelError::Config("OCE head missing".into())),
            };
            terms.push(t);
        }
        if cfg.sr_task.uses_rpe() {
            let mask = batch.pair_cell_mask(n, d);
            let t = match (cfg.sr_mode, out.rpe_reg, out.bin_pair) {
                (SrMode::Regression, Some(pred), _) => {
                    g.mse(pred, batch.rpe.as_ref().ok_or_else(|| missing("rpe"))?, Some(&mask))?
                }
                (SrMode::Bins(_), _, Some(logits)) => {
                    let bins = batch.rpe_bins.as_ref().ok_or_else(|| missing("rpe bins"))?;
                    g.cross_entropy(logits, &masked_targets(bins, &mask))?
                }
                _ => return Err(ModelError::Config("RPE head missing".into())),
            };
            terms.push(t);
        }
        Ok(match terms.as_slice() {
            [] => None,
            [one] => Some(*one),
            [a, b] => {
                let s = g.add(*a, *b)?;
                Some(g.scale(s, T::from_f64_lossy(0.5)))
            }
            _ => unreachable!(),
        })
    }
}

fn missing(what: &str) -> ModelError {
    ModelError::Data(format!("batch lacks {what} targets"))
}

fn masked_targets(bins: &[u16], mask: &[bool]) -> Vec<Option<usize>> {
    bins.iter().zip(mask).map(|(&c, &m)| m.then_some(c as usize)).collect()
}

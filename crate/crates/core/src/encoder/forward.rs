use super::{Activation, ModelParams, Modality};
use crate::autodiff::{Tape, Var};
use crate::corpus::{Batch, BatchItem};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Lower bound on vector norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Model parameters bound as leaves of a tape, in layout order.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    ParamVars(params.tensors().iter().map(|t| tape.leaf(t.clone())).collect())
}

/// Per-modality inputs of one video, possibly padded.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub frames: &'a Mat,
    pub frame_mask: &'a [bool],
    pub narrations: &'a Mat,
    pub narration_mask: &'a [bool],
    pub steps: &'a Mat,
    pub step_mask: &'a [bool],
}

impl<'a> ForwardInput<'a> {
    pub fn from_item(item: &'a BatchItem) -> Self {
        ForwardInput {
            frames: &item.frames,
            frame_mask: &item.frame_mask,
            narrations: &item.narrations,
            narration_mask: &item.narration_mask,
            steps: &item.steps,
            step_mask: &item.step_mask,
        }
    }
}

/// Alignment matrices for one video. Rows/columns whose mask entry is
/// `false` are padding and carry no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSet {
    /// Narrations × frames.
    pub nv: Mat,
    /// Steps × frames, direct pathway.
    pub sv: Mat,
    /// Steps × narrations.
    pub sn: Mat,
    /// Steps × frames through narrations; `None` without valid narrations.
    pub snv: Option<Mat>,
    /// Mean of `sv` and `snv`, or `sv` alone when `snv` is absent.
    pub fused: Mat,
    pub frame_mask: Vec<bool>,
    pub narration_mask: Vec<bool>,
    pub step_mask: Vec<bool>,
}

fn pick(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), cols.len());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out[(i, j)] = m[(r, c)];
        }
    }
    out
}

fn valid(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl AlignmentSet {
    /// Drops every padded row and column.
    pub fn cropped(&self) -> AlignmentSet {
        let (f, n, s) = (valid(&self.frame_mask), valid(&self.narration_mask), valid(&self.step_mask));
        AlignmentSet {
            nv: pick(&self.nv, &n, &f),
            sv: pick(&self.sv, &s, &f),
            sn: pick(&self.sn, &s, &n),
            snv: self.snv.as_ref().map(|m| pick(m, &s, &f)),
            fused: pick(&self.fused, &s, &f),
            frame_mask: vec![true; f.len()],
            narration_mask: vec![true; n.len()],
            step_mask: vec![true; s.len()],
        }
    }
}

/// Handles to the alignment matrices recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RecordedAlignment {
    pub nv: Var,
    pub sv: Var,
    pub sn: Var,
    pub snv: Option<Var>,
    pub fused: Var,
}

fn check_cols(x: &Mat, want: usize, what: &str) -> Result<()> {
    if x.cols() != want {
        return Err(Error::Shape(format!(
            "{what} features have {} columns, model expects {want}",
            x.cols()
        )));
    }
    Ok(())
}

fn record_unimodal(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: &Mat,
    modality: Modality,
) -> Result<Var> {
    let len = x.rows();
    let d = params.config().d_model;
    if len == 0 {
        return Ok(tape.leaf(Mat::zeros(0, d)));
    }
    check_cols(x, params.input_dim(modality), &format!("{modality:?}"))?;
    if len > params.max_len(modality) {
        return Err(Error::Shape(format!(
            "{len} {modality:?} tokens exceed the positional table of {}",
            params.max_len(modality)
        )));
    }
    let mlp = params.mlp_for(modality);
    let xv = tape.leaf(x.clone());
    let h = tape.matmul(xv, pv.at(mlp.w1));
    let h = tape.add_row(h, pv.at(mlp.b1));
    let h = match params.config().activation {
        Activation::Gelu => tape.gelu(h),
        Activation::Linear => h,
    };
    let h = tape.matmul(h, pv.at(mlp.w2));
    let mut h = tape.add_row(h, pv.at(mlp.b2));
    if let Some(pos) = params.pos_for(modality) {
        let p = tape.slice_rows(pv.at(pos), 0, len);
        h = tape.add(h, p);
    }
    Ok(h)
}

fn record_transformer(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    mut x: Var,
    key_mask: &[bool],
) -> Var {
    let cfg = params.config();
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for l in &params.layout().layers {
        let h = tape.layer_norm(x, pv.at(l.ln1_g), pv.at(l.ln1_b));
        let mut proj = |w: usize, b: usize| {
            let y = tape.matmul(h, pv.at(w));
            tape.add_row(y, pv.at(b))
        };
        let q = proj(l.wq, l.bq);
        let k = proj(l.wk, l.bk);
        let v = proj(l.wv, l.bv);
        let mut ctx = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s, Some(key_mask));
            ctx.push(tape.matmul(p, vh));
        }
        let c = if heads == 1 { ctx[0] } else { tape.concat_cols(&ctx) };
        let o = tape.matmul(c, pv.at(l.wo));
        let o = tape.add_row(o, pv.at(l.bo));
        x = tape.add(x, o);

        let h = tape.layer_norm(x, pv.at(l.ln2_g), pv.at(l.ln2_b));
        let f = tape.matmul(h, pv.at(l.ff_w1));
        let f = tape.add_row(f, pv.at(l.ff_b1));
        let f = tape.gelu(f);
        let f = tape.matmul(f, pv.at(l.ff_w2));
        let f = tape.add_row(f, pv.at(l.ff_b2));
        x = tape.add(x, f);
    }
    if cfg.layers > 0 {
        x = tape.layer_norm(x, pv.at(params.layout().final_g), pv.at(params.layout().final_b));
    }
    x
}

fn check_mask(mask: &[bool], rows: usize, what: &str) -> Result<()> {
    if mask.len() != rows {
        return Err(Error::Shape(format!("{what} mask has {} entries for {rows} rows", mask.len())));
    }
    Ok(())
}

/// Records the joint encoder over already-embedded tokens. Returns the
/// contextual embeddings split per modality.
fn record_multimodal(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    h: [Var; 3],
    masks: [&[bool]; 3],
) -> Result<[Var; 3]> {
    let lens: Vec<usize> = h.iter().map(|&v| tape.value(v).rows()).collect();
    for (m, (&len, name)) in masks.iter().zip(lens.iter().zip(["frame", "narration", "step"])) {
        check_mask(m, len, name)?;
    }
    let key_mask: Vec<bool> = masks.concat();
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::Contract("multimodal encoder received no valid tokens".into()));
    }
    let total = tape.concat_rows(&h);
    let z = record_transformer(tape, params, pv, total, &key_mask);
    let zv = tape.slice_rows(z, 0, lens[0]);
    let zn = tape.slice_rows(z, lens[0], lens[1]);
    let zs = tape.slice_rows(z, lens[0] + lens[1], lens[2]);
    Ok([zv, zn, zs])
}

fn record_cosine(tape: &mut Tape, a: Var, b: Var) -> Var {
    let na = tape.normalize_rows(a, COSINE_EPS);
    let nb = tape.normalize_rows(b, COSINE_EPS);
    tape.matmul_t(na, nb)
}

/// Records the full model for one video on `tape`.
pub fn record_forward(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    input: &ForwardInput<'_>,
    xi: f64,
) -> Result<RecordedAlignment> {
    let hv = record_unimodal(tape, params, pv, input.frames, Modality::Video)?;
    let hn = record_unimodal(tape, params, pv, input.narrations, Modality::Narration)?;
    let hs = record_unimodal(tape, params, pv, input.steps, Modality::Step)?;
    let [zv, zn, zs] = record_multimodal(
        tape,
        params,
        pv,
        [hv, hn, hs],
        [input.frame_mask, input.narration_mask, input.step_mask],
    )?;
    let nv = record_cosine(tape, zn, zv);
    let sv = record_cosine(tape, zs, zv);
    let sn = record_cosine(tape, zs, zn);
    let (snv, fused) = if input.narration_mask.iter().any(|&m| m) {
        let logits = tape.scale(sn, 1.0 / xi);
        let weights = tape.softmax_rows(logits, Some(input.narration_mask));
        let snv = tape.matmul(weights, nv);
        let sum = tape.add(sv, snv);
        (Some(snv), tape.scale(sum, 0.5))
    } else {
        (None, sv)
    };
    Ok(RecordedAlignment {
        nv,
        sv,
        sn,
        snv,
        fused,
    })
}

/// Evaluates the model for a single (possibly padded) video.
pub fn forward_item(input: &ForwardInput<'_>, params: &ModelParams, xi: f64) -> Result<AlignmentSet> {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params);
    let r = record_forward(&mut tape, params, &pv, input, xi)?;
    Ok(AlignmentSet {
        nv: tape.value(r.nv).clone(),
        sv: tape.value(r.sv).clone(),
        sn: tape.value(r.sn).clone(),
        snv: r.snv.map(|v| tape.value(v).clone()),
        fused: tape.value(r.fused).clone(),
        frame_mask: input.frame_mask.to_vec(),
        narration_mask: input.narration_mask.to_vec(),
        step_mask: input.step_mask.to_vec(),
    })
}

/// Alignment sets for every video in `batch`, in batch order.
pub fn forward(batch: &Batch, params: &ModelParams, xi: f64) -> Result<Vec<AlignmentSet>> {
    use rayon::prelude::*;
    batch
        .items
        .par_iter()
        .map(|item| forward_item(&ForwardInput::from_item(item), params, xi))
        .collect()
}

/// `MLP(x) + P[..rows]` for one modality.
pub fn unimodal_encode(x: &Mat, modality: Modality, params: &ModelParams) -> Result<Mat> {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params);
    let h = record_unimodal(&mut tape, params, &pv, x, modality)?;
    Ok(tape.value(h).clone())
}

/// Runs the joint transformer on embedded tokens `[hv; hn; hs]`.
pub fn multimodal_encode(
    hv: &Mat,
    hn: &Mat,
    hs: &Mat,
    masks: [&[bool]; 3],
    params: &ModelParams,
) -> Result<(Mat, Mat, Mat)> {
    let d = params.config().d_model;
    for (m, name) in [(hv, "video"), (hn, "narration"), (hs, "step")] {
        if m.cols() != d && m.rows() > 0 {
            return Err(Error::Shape(format!("{name} tokens have width {}, expected {d}", m.cols())));
        }
    }
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params);
    let fix = |m: &Mat| if m.rows() == 0 { Mat::zeros(0, d) } else { m.clone() };
    let h = [tape.leaf(fix(hv)), tape.leaf(fix(hn)), tape.leaf(fix(hs))];
    let [zv, zn, zs] = record_multimodal(&mut tape, params, &pv, h, masks)?;
    Ok((tape.value(zv).clone(), tape.value(zn).clone(), tape.value(zs).clone()))
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_alignment(a: &Mat, b: &Mat) -> Mat {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = record_cosine(&mut tape, va, vb);
    tape.value(c).clone()
}

/// Softmax of `sn / xi` over valid narrations, multiplied into `nv`.
pub fn indirect_alignment(sn: &Mat, nv: &Mat, xi: f64, narration_mask: &[bool]) -> Result<Mat> {
    if !(xi > 0.0) {
        return Err(Error::Config(format!("xi = {xi} must be > 0")));
    }
    if sn.cols() != nv.rows() || narration_mask.len() != nv.rows() {
        return Err(Error::Shape(format!(
            "step-narration {:?}, narration-video {:?}, mask {}",
            sn.shape(),
            nv.shape(),
            narration_mask.len()
        )));
    }
    if !narration_mask.iter().any(|&m| m) {
        return Err(Error::Contract(
            "indirect alignment needs at least one valid narration".into(),
        ));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(sn.clone());
    let n = tape.leaf(nv.clone());
    let logits = tape.scale(s, 1.0 / xi);
    let w = tape.softmax_rows(logits, Some(narration_mask));
    let out = tape.matmul(w, n);
    Ok(tape.value(out).clone())
}

/// Elementwise mean of the direct and indirect step-to-video matrices.
pub fn fuse(sv: &Mat, snv: &Mat) -> Result<Mat> {
    if sv.shape() != snv.shape() {
        return Err(Error::Shape(format!(
            "cannot fuse {:?} with {:?}",
            sv.shape(),
            snv.shape()
        )));
    }
    Ok(sv.zip_map(snv, |a, b| 0.5 * (a + b)))
}

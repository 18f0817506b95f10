//! Shared fusion of text and visual features.
//!
//! ```text
//! A_t = Attn_t(E_t)            A_v = Attn_v(E_v)
//! F_vt = A_t ⊙ E_v             F_tv = A_v ⊙ E_t
//! G_v = σ(E_v W_vᵀ + b_v)      G_t = σ(E_t W_tᵀ + b_t)
//! F_1 = G_v ⊙ F_tv + (1 - G_v) ⊙ F_vt
//! F_2 = G_t ⊙ F_tv + (1 - G_t) ⊙ F_vt
//! F_v = G_v ⊙ E_v  + (1 - G_v) ⊙ F_tv
//! F_t = G_t ⊙ E_t  + (1 - G_t) ⊙ F_vt
//! F_SF = α1 F_1 + α2 F_2 + β1 F_v + β2 F_t
//! ```
//!
//! Parameters are shared across samples. Explicit forward/backward passes
//! are provided for gradient verification; [`shared_fusion_on_tape`]
//! records the same computation for training.

use alloc::string::String;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, ParamGroup, ParamStore, Session, Var};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

/// Divisor applied to attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√D_f`, scaled dot-product attention.
    SqrtWidth,
    /// A raw `d_k` divisor.
    Raw(f64),
}

impl AttentionScale {
    pub fn divisor(self, width: usize) -> f64 {
        match self {
            AttentionScale::SqrtWidth => libm::sqrt(width as f64),
            AttentionScale::Raw(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub scale: AttentionScale,
}

impl AttentionParams {
    pub fn identity(width: usize) -> Self {
        Self {
            query: Matrix::identity(width),
            key: Matrix::identity(width),
            value: Matrix::identity(width),
            scale: AttentionScale::SqrtWidth,
        }
    }

    fn init<R: Rng + ?Sized>(width: usize, scale: AttentionScale, rng: &mut R) -> Self {
        let bound = init_bound(width);
        Self {
            query: Matrix::random_uniform(width, width, bound, rng),
            key: Matrix::random_uniform(width, width, bound, rng),
            value: Matrix::random_uniform(width, width, bound, rng),
            scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_v: Matrix,
    pub w_t: Matrix,
    pub b_v: Matrix,
    pub b_t: Matrix,
}

impl GateParams {
    pub fn constant(width: usize, weight: f64, bias: f64) -> Self {
        Self {
            w_v: Matrix::filled(width, width, weight),
            w_t: Matrix::filled(width, width, weight),
            b_v: Matrix::filled(1, width, bias),
            b_t: Matrix::filled(1, width, bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.25,
            alpha2: 0.25,
            beta1: 0.25,
            beta2: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub text: AttentionParams,
    pub visual: AttentionParams,
    pub gates: GateParams,
    pub mix: MixWeights,
}

fn init_bound(width: usize) -> f64 {
    libm::sqrt(6.0 / (2.0 * width as f64))
}

pub const MIX_NAMES: [&str; 4] = ["mix.alpha1", "mix.alpha2", "mix.beta1", "mix.beta2"];

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(width: usize, scale: AttentionScale, rng: &mut R) -> Self {
        let text = AttentionParams::init(width, scale, rng);
        let visual = AttentionParams::init(width, scale, rng);
        let bound = init_bound(width);
        let gates = GateParams {
            w_v: Matrix::random_uniform(width, width, bound, rng),
            w_t: Matrix::random_uniform(width, width, bound, rng),
            b_v: Matrix::zeros(1, width),
            b_t: Matrix::zeros(1, width),
        };
        Self {
            text,
            visual,
            gates,
            mix: MixWeights::default(),
        }
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        for (prefix, a) in [("attn.text", &self.text), ("attn.vis", &self.visual)] {
            store.insert(&alloc::format!("{prefix}.query"), ParamGroup::Head, a.query.clone());
            store.insert(&alloc::format!("{prefix}.key"), ParamGroup::Head, a.key.clone());
            store.insert(&alloc::format!("{prefix}.value"), ParamGroup::Head, a.value.clone());
        }
        store.insert("gate.w_v", ParamGroup::Head, self.gates.w_v.clone());
        store.insert("gate.w_t", ParamGroup::Head, self.gates.w_t.clone());
        store.insert("gate.b_v", ParamGroup::Head, self.gates.b_v.clone());
        store.insert("gate.b_t", ParamGroup::Head, self.gates.b_t.clone());
        let m = self.mix;
        for (name, v) in MIX_NAMES.iter().zip([m.alpha1, m.alpha2, m.beta1, m.beta2]) {
            store.insert(name, ParamGroup::Head, Matrix::filled(1, 1, v));
        }
    }

    pub fn from_store(store: &ParamStore, scale: AttentionScale) -> Result<Self> {
        let attn = |prefix: &str| -> Result<AttentionParams> {
            Ok(AttentionParams {
                query: store.get(&alloc::format!("{prefix}.query"))?.clone(),
                key: store.get(&alloc::format!("{prefix}.key"))?.clone(),
                value: store.get(&alloc::format!("{prefix}.value"))?.clone(),
                scale,
            })
        };
        let scalar = |name: &str| -> Result<f64> { Ok(store.get(name)?[(0, 0)]) };
        Ok(Self {
            text: attn("attn.text")?,
            visual: attn("attn.vis")?,
            gates: GateParams {
                w_v: store.get("gate.w_v")?.clone(),
                w_t: store.get("gate.w_t")?.clone(),
                b_v: store.get("gate.b_v")?.clone(),
                b_t: store.get("gate.b_t")?.clone(),
            },
            mix: MixWeights {
                alpha1: scalar(MIX_NAMES[0])?,
                alpha2: scalar(MIX_NAMES[1])?,
                beta1: scalar(MIX_NAMES[2])?,
                beta2: scalar(MIX_NAMES[3])?,
            },
        })
    }
}

/// Intermediate attention values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Matrix,
    pub out: Matrix,
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite(String::from(what)))
    }
}

fn attend(e: &Matrix, params: &AttentionParams) -> Result<AttentionCache> {
    ensure_finite(e, "attention input")?;
    let q = e.matmul(&params.query)?;
    let k = e.matmul(&params.key)?;
    let v = e.matmul(&params.value)?;
    let scores = q.matmul_t(&k)?.scale(1.0 / params.scale.divisor(e.cols()));
    let probs = scores.softmax_rows();
    let out = probs.matmul(&v)?;
    Ok(AttentionCache { q, k, v, probs, out })
}

/// `softmax(Q Kᵀ / scale) V` with `Q = E W_q`, `K = E W_k`, `V = E W_v`.
pub fn self_attend(e: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    Ok(attend(e, params)?.out)
}

/// `(F_vt, F_tv) = (A_t ⊙ E_v, A_v ⊙ E_t)`
pub fn cross_amplify(a_t: &Matrix, a_v: &Matrix, e_t: &Matrix, e_v: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((a_t.hadamard(e_v)?, a_v.hadamard(e_t)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedFusion {
    pub g_v: Matrix,
    pub g_t: Matrix,
    pub f_1: Matrix,
    pub f_2: Matrix,
    pub f_v: Matrix,
    pub f_t: Matrix,
    pub f_sf: Matrix,
}

fn blend(gate: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = gate.hadamard(a)?;
    for ((o, g), bv) in out.as_mut_slice().iter_mut().zip(gate.as_slice()).zip(b.as_slice()) {
        *o += (1.0 - g) * bv;
    }
    Ok(out)
}

fn gate(e: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(e.matmul_t(w)?.add_row(b)?.map(sigmoid))
}

/// Gates, the four gated fusions and their mixture.
pub fn fuse(
    e_t: &Matrix,
    e_v: &Matrix,
    f_vt: &Matrix,
    f_tv: &Matrix,
    gates: &GateParams,
    mix: &MixWeights,
) -> Result<GatedFusion> {
    for m in [e_t, e_v, f_vt, f_tv] {
        if m.shape() != e_t.shape() {
            return Err(CoreError::Shape {
                op: "fuse",
                lhs: e_t.shape(),
                rhs: m.shape(),
            });
        }
        ensure_finite(m, "fusion input")?;
    }
    let g_v = gate(e_v, &gates.w_v, &gates.b_v)?;
    let g_t = gate(e_t, &gates.w_t, &gates.b_t)?;
    let f_1 = blend(&g_v, f_tv, f_vt)?;
    let f_2 = blend(&g_t, f_tv, f_vt)?;
    let f_v = blend(&g_v, e_v, f_tv)?;
    let f_t = blend(&g_t, e_t, f_vt)?;
    let f_sf = f_1
        .scale(mix.alpha1)
        .add(&f_2.scale(mix.alpha2))?
        .add(&f_v.scale(mix.beta1))?
        .add(&f_t.scale(mix.beta2))?;
    ensure_finite(&f_sf, "F_SF")?;
    Ok(GatedFusion {
        g_v,
        g_t,
        f_1,
        f_2,
        f_v,
        f_t,
        f_sf,
    })
}

/// Every intermediate of the shared-fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTensors {
    pub attn_t: AttentionCache,
    pub attn_v: AttentionCache,
    pub f_vt: Matrix,
    pub f_tv: Matrix,
    pub gated: GatedFusion,
}

impl FusionTensors {
    pub fn a_t(&self) -> &Matrix {
        &self.attn_t.out
    }

    pub fn a_v(&self) -> &Matrix {
        &self.attn_v.out
    }

    pub fn f_sf(&self) -> &Matrix {
        &self.gated.f_sf
    }
}

pub fn shared_fusion(e_t: &Matrix, e_v: &Matrix, params: &FusionParams) -> Result<FusionTensors> {
    if e_t.shape() != e_v.shape() {
        return Err(CoreError::Shape {
            op: "shared_fusion",
            lhs: e_t.shape(),
            rhs: e_v.shape(),
        });
    }
    let attn_t = attend(e_t, &params.text)?;
    let attn_v = attend(e_v, &params.visual)?;
    let (f_vt, f_tv) = cross_amplify(&attn_t.out, &attn_v.out, e_t, e_v)?;
    let gated = fuse(e_t, e_v, &f_vt, &f_tv, &params.gates, &params.mix)?;
    Ok(FusionTensors {
        attn_t,
        attn_v,
        f_vt,
        f_tv,
        gated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub text: AttentionGradients,
    pub visual: AttentionGradients,
    pub w_v: Matrix,
    pub w_t: Matrix,
    pub b_v: Matrix,
    pub b_t: Matrix,
    pub mix: MixWeights,
    pub e_t: Matrix,
    pub e_v: Matrix,
}

/// Returns parameter gradients and adds `dL/dE` into `d_e`.
fn attend_backward(
    d_out: &Matrix,
    e: &Matrix,
    cache: &AttentionCache,
    params: &AttentionParams,
    d_e: &mut Matrix,
) -> Result<AttentionGradients> {
    let d_probs = d_out.matmul_t(&cache.v)?;
    let d_v = cache.probs.t_matmul(d_out)?;
    let p = &cache.probs;
    let mut d_scores = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let dot: f64 = d_probs.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
        for ((o, g), y) in d_scores.row_mut(i).iter_mut().zip(d_probs.row(i)).zip(p.row(i)) {
            *o = y * (g - dot);
        }
    }
    let d_scores = d_scores.scale(1.0 / params.scale.divisor(e.cols()));
    let d_q = d_scores.matmul(&cache.k)?;
    let d_k = d_scores.t_matmul(&cache.q)?;
    d_e.add_assign(&d_q.matmul_t(&params.query)?)?;
    d_e.add_assign(&d_k.matmul_t(&params.key)?)?;
    d_e.add_assign(&d_v.matmul_t(&params.value)?)?;
    Ok(AttentionGradients {
        query: e.t_matmul(&d_q)?,
        key: e.t_matmul(&d_k)?,
        value: e.t_matmul(&d_v)?,
    })
}

/// Backpropagates `d_f_sf = dL/dF_SF` through the whole block.
pub fn shared_fusion_backward(
    d_f_sf: &Matrix,
    e_t: &Matrix,
    e_v: &Matrix,
    tensors: &FusionTensors,
    params: &FusionParams,
) -> Result<FusionGradients> {
    let g = &tensors.gated;
    let mix = &params.mix;
    let (f_tv, f_vt) = (&tensors.f_tv, &tensors.f_vt);
    let d_f1 = d_f_sf.scale(mix.alpha1);
    let d_f2 = d_f_sf.scale(mix.alpha2);
    let d_fv = d_f_sf.scale(mix.beta1);
    let d_ft = d_f_sf.scale(mix.beta2);
    let d_mix = MixWeights {
        alpha1: d_f_sf.dot(&g.f_1),
        alpha2: d_f_sf.dot(&g.f_2),
        beta1: d_f_sf.dot(&g.f_v),
        beta2: d_f_sf.dot(&g.f_t),
    };

    let (rows, cols) = e_t.shape();
    let mut d_gv = Matrix::zeros(rows, cols);
    let mut d_gt = Matrix::zeros(rows, cols);
    let mut d_ftv = Matrix::zeros(rows, cols);
    let mut d_fvt = Matrix::zeros(rows, cols);
    let mut d_et = Matrix::zeros(rows, cols);
    let mut d_ev = Matrix::zeros(rows, cols);
    for idx in 0..rows * cols {
        let gv = g.g_v.as_slice()[idx];
        let gt = g.g_t.as_slice()[idx];
        let (tv, vt) = (f_tv.as_slice()[idx], f_vt.as_slice()[idx]);
        let (et, ev) = (e_t.as_slice()[idx], e_v.as_slice()[idx]);
        let (a1, a2, b1, b2) = (
            d_f1.as_slice()[idx],
            d_f2.as_slice()[idx],
            d_fv.as_slice()[idx],
            d_ft.as_slice()[idx],
        );
        d_gv.as_mut_slice()[idx] = a1 * (tv - vt) + b1 * (ev - tv);
        d_gt.as_mut_slice()[idx] = a2 * (tv - vt) + b2 * (et - vt);
        d_ftv.as_mut_slice()[idx] = a1 * gv + a2 * gt + b1 * (1.0 - gv);
        d_fvt.as_mut_slice()[idx] = a1 * (1.0 - gv) + a2 * (1.0 - gt) + b2 * (1.0 - gt);
        d_ev.as_mut_slice()[idx] = b1 * gv;
        d_et.as_mut_slice()[idx] = b2 * gt;
    }

    // cross amplification: F_vt = A_t ⊙ E_v, F_tv = A_v ⊙ E_t
    let d_at = d_fvt.hadamard(e_v)?;
    let d_av = d_ftv.hadamard(e_t)?;
    d_ev.add_assign(&d_fvt.hadamard(tensors.a_t())?)?;
    d_et.add_assign(&d_ftv.hadamard(tensors.a_v())?)?;

    // gates: G = σ(E Wᵀ + b)
    let gate_back = |d_gate: &Matrix, gate: &Matrix, e: &Matrix, w: &Matrix, d_e: &mut Matrix| -> Result<(Matrix, Matrix)> {
        let d_pre = d_gate.zip_map(gate, "gate", |d, y| d * y * (1.0 - y))?;
        d_e.add_assign(&d_pre.matmul(w)?)?;
        Ok((d_pre.t_matmul(e)?, d_pre.sum_rows()))
    };
    let (w_v, b_v) = gate_back(&d_gv, &g.g_v, e_v, &params.gates.w_v, &mut d_ev)?;
    let (w_t, b_t) = gate_back(&d_gt, &g.g_t, e_t, &params.gates.w_t, &mut d_et)?;

    let text = attend_backward(&d_at, e_t, &tensors.attn_t, &params.text, &mut d_et)?;
    let visual = attend_backward(&d_av, e_v, &tensors.attn_v, &params.visual, &mut d_ev)?;

    Ok(FusionGradients {
        text,
        visual,
        w_v,
        w_t,
        b_v,
        b_t,
        mix: d_mix,
        e_t: d_et,
        e_v: d_ev,
    })
}

/// Tape outputs of the fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub a_t: Var,
    pub a_v: Var,
    pub f_vt: Var,
    pub f_tv: Var,
    pub f_sf: Var,
}

fn attend_on_tape(s: &mut Session<'_>, e: Var, prefix: &str, scale: AttentionScale) -> Result<Var> {
    let wq = s.param(&alloc::format!("{prefix}.query"))?;
    let wk = s.param(&alloc::format!("{prefix}.key"))?;
    let wv = s.param(&alloc::format!("{prefix}.value"))?;
    let width = s.tape.value(e).cols();
    let q = s.tape.matmul(e, wq)?;
    let k = s.tape.matmul(e, wk)?;
    let v = s.tape.matmul(e, wv)?;
    let scores = s.tape.matmul_t(q, k)?;
    let scores = s.tape.scale(scores, 1.0 / scale.divisor(width));
    let probs = s.tape.softmax_rows(scores);
    s.tape.matmul(probs, v)
}

fn blend_on_tape(s: &mut Session<'_>, gate: Var, a: Var, b: Var) -> Result<Var> {
    let left = s.tape.mul(gate, a)?;
    let inv = s.tape.one_minus(gate);
    let right = s.tape.mul(inv, b)?;
    s.tape.add(left, right)
}

/// Records the fusion block, reading `attn.*`, `gate.*` and `mix.*` from the session.
pub fn shared_fusion_on_tape(s: &mut Session<'_>, e_t: Var, e_v: Var, scale: AttentionScale) -> Result<FusionVars> {
    let a_t = attend_on_tape(s, e_t, "attn.text", scale)?;
    let a_v = attend_on_tape(s, e_v, "attn.vis", scale)?;
    let f_vt = s.tape.mul(a_t, e_v)?;
    let f_tv = s.tape.mul(a_v, e_t)?;

    let gate_for = |s: &mut Session<'_>, e: Var, w: &str, b: &str| -> Result<Var> {
        let w = s.param(w)?;
        let b = s.param(b)?;
        let pre = s.tape.matmul_t(e, w)?;
        let pre = s.tape.add_row(pre, b)?;
        Ok(s.tape.sigmoid(pre))
    };
    let g_v = gate_for(s, e_v, "gate.w_v", "gate.b_v")?;
    let g_t = gate_for(s, e_t, "gate.w_t", "gate.b_t")?;

    let f_1 = blend_on_tape(s, g_v, f_tv, f_vt)?;
    let f_2 = blend_on_tape(s, g_t, f_tv, f_vt)?;
    let f_v = blend_on_tape(s, g_v, e_v, f_tv)?;
    let f_t = blend_on_tape(s, g_t, e_t, f_vt)?;

    let mut f_sf = None;
    for (name, f) in MIX_NAMES.iter().zip([f_1, f_2, f_v, f_t]) {
        let coeff = s.param(name)?;
        let term = s.tape.scale_by(f, coeff)?;
        f_sf = Some(match f_sf {
            None => term,
            Some(acc) => s.tape.add(acc, term)?,
        });
    }
    Ok(FusionVars {
        a_t,
        a_v,
        f_vt,
        f_tv,
        f_sf: f_sf.expect("four terms"),
    })
}

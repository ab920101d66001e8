//! Objective terms and their weighted combination.
//!
//! Every L1/L2 term is mean-reduced over all axes. Graph forms (suffix
//! `_g`) are what the trainer differentiates; the plain forms evaluate the
//! same code on constants.

mod extractor;

pub use extractor::{ConvExtractor, FeatureExtractor, IdentityExtractor, EXTRACTOR_KIND};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UstError};
use crate::graph::{Graph, Var};
use crate::kernels::PixelBox;
use crate::model::{ContentCode, ImageBatch, MaskBatch, StyleCode};
use crate::synth::roi::batch_bboxes;
use crate::tensor::Tensor;

/// Clamp applied to discriminator probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_sr: f64,
    pub lambda_lr: f64,
    pub lambda_p: f64,
    pub lambda_sym: f64,
    /// Weight of the Gram term inside the perceptual loss.
    pub lambda_gram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cc: 10.0,
            lambda_sr: 10.0,
            lambda_lr: 1.0,
            lambda_p: 1.0,
            lambda_sym: 0.3,
            lambda_gram: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_cc: 0.0,
            lambda_sr: 0.0,
            lambda_lr: 0.0,
            lambda_p: 0.0,
            lambda_sym: 0.0,
            lambda_gram: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cc", self.lambda_cc),
            ("lambda_sr", self.lambda_sr),
            ("lambda_lr", self.lambda_lr),
            ("lambda_p", self.lambda_p),
            ("lambda_sym", self.lambda_sym),
            ("lambda_gram", self.lambda_gram),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(UstError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar value of every term for one step. `_a` terms belong to the
/// A-to-B direction (take-off), `_b` terms to B-to-A (try-on).
///
/// `gan_g_*` are the generator's adversarial losses and enter `total`;
/// `gan_d_*` are the discriminator objectives (to be maximised) and are
/// reported for monitoring only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lr_a: f64,
    pub lr_b: f64,
    pub sr_a: f64,
    pub sr_b: f64,
    pub gan_g_a: f64,
    pub gan_g_b: f64,
    pub gan_d_a: f64,
    pub gan_d_b: f64,
    pub cc_a: f64,
    pub cc_b: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub sym_a: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 14] = [
        "lr_a", "lr_b", "sr_a", "sr_b", "gan_g_a", "gan_g_b", "gan_d_a", "gan_d_b", "cc_a", "cc_b", "p_a", "p_b",
        "sym_a", "total",
    ];

    pub fn values(&self) -> [f64; 14] {
        [
            self.lr_a, self.lr_b, self.sr_a, self.sr_b, self.gan_g_a, self.gan_g_b, self.gan_d_a, self.gan_d_b,
            self.cc_a, self.cc_b, self.p_a, self.p_b, self.sym_a, self.total,
        ]
    }

    /// The weighted total rebuilt from the parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut t = self.gan_g_a + self.gan_g_b;
        for (lambda, v) in [
            (w.lambda_cc, self.cc_a + self.cc_b),
            (w.lambda_sr, self.sr_a + self.sr_b),
            (w.lambda_lr, self.lr_a + self.lr_b),
            (w.lambda_p, self.p_a + self.p_b),
            (w.lambda_sym, self.sym_a),
        ] {
            if lambda != 0.0 {
                t += lambda * v;
            }
        }
        t
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

// ---- graph forms ----------------------------------------------------------

/// `mean|c_rec - c| + mean|s_rec - s|`.
pub fn latent_reconstruction_g(g: &mut Graph, c_rec: Var, c: Var, s_rec: Var, s: Var) -> Result<Var> {
    let lc = g.l1(c_rec, c)?;
    let ls = g.l1(s_rec, s)?;
    g.add(lc, ls)
}

/// Mean of `log D(real) + log(1 - D(fake))`: the discriminator's objective,
/// to be maximised.
pub fn adversarial_d_g(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let lr = g.log_clamped(real, LOG_EPS);
    let lr = g.mean(lr);
    let neg = g.scale(fake, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let lf = g.log_clamped(one_minus, LOG_EPS);
    let lf = g.mean(lf);
    g.add(lr, lf)
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn adversarial_g_g(g: &mut Graph, fake: Var) -> Var {
    let l = g.log_clamped(fake, LOG_EPS);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

/// `mean |x - flip_w(x)|`. Every mirrored pair appears twice in the full
/// mean, which equals the half-image average of the pair differences.
pub fn symmetry_g(g: &mut Graph, x: Var) -> Result<Var> {
    let w = g.shape(x)[3];
    if w % 2 != 0 {
        return Err(UstError::Contract(format!("symmetry loss needs an even width, got {w}")));
    }
    let f = g.flip_w(x);
    g.l1(x, f)
}

/// `mean |Gram(a) - Gram(b)|` over one feature layer.
pub fn gram_l1_g(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ga = g.gram(a)?;
    let gb = g.gram(b)?;
    g.l1(ga, gb)
}

/// Composed perceptual loss:
/// `sum_l mse(phi_l(self_out), phi_l(self_ref))
///  + sum_l mse(phi_l(cross_out), phi_l(cross_ref))
///  + lambda_gram * sum_l mean|Gram(phi_l(cross_out)) - Gram(phi_l(cross_ref))|`.
pub fn perceptual_g(
    g: &mut Graph,
    phi: &dyn FeatureExtractor,
    self_out: Var,
    self_ref: Var,
    cross_out: Var,
    cross_ref: Var,
    lambda_gram: f64,
) -> Result<Var> {
    let f_so = phi.features_g(g, self_out)?;
    let f_sr = phi.features_g(g, self_ref)?;
    let f_co = phi.features_g(g, cross_out)?;
    let f_cr = phi.features_g(g, cross_ref)?;
    let n = phi.num_layers();
    if [&f_so, &f_sr, &f_co, &f_cr].iter().any(|f| f.len() != n) {
        return Err(UstError::Contract(format!("feature extractor promised {n} layers")));
    }
    let mut terms = Vec::with_capacity(3 * n);
    for l in 0..n {
        terms.push(g.mse(f_so[l], f_sr[l])?);
    }
    for l in 0..n {
        terms.push(g.mse(f_co[l], f_cr[l])?);
    }
    if lambda_gram != 0.0 {
        let mut gram_terms = Vec::with_capacity(n);
        for l in 0..n {
            gram_terms.push(gram_l1_g(g, f_co[l], f_cr[l])?);
        }
        let s = sum_vars(g, &gram_terms)?;
        terms.push(g.scale(s, lambda_gram));
    }
    sum_vars(g, &terms)
}

/// Mask, crop to the mask box and resize to `out_h x out_w`, per sample.
pub fn roi_g(g: &mut Graph, x: Var, mask: &MaskBatch, out_h: usize, out_w: usize) -> Result<Var> {
    let masked = g.mul_mask(x, mask.tensor())?;
    let boxes = batch_bboxes(mask)?;
    let dst = vec![PixelBox::full(out_h, out_w); boxes.len()];
    g.resample(masked, &boxes, &dst, out_h, out_w)
}

pub(crate) fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars
        .split_first()
        .ok_or_else(|| UstError::Contract("sum of no terms".into()))?;
    let mut acc = *first;
    for v in rest {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

// ---- whole objective -------------------------------------------------------

/// Every stream output entering the objective for one batch.
///
/// Required: the inputs, the RoI of `x_a`, both self-reconstructions, both
/// translations and the discriminator scores of both translations. The
/// remaining outputs are only needed when their weight is non-zero.
#[derive(Debug, Clone)]
pub struct Streams<T> {
    pub x_a: T,
    pub x_b: T,
    /// Masked, cropped and resized object region of `x_a`.
    pub x_a_roi: T,
    pub x_aa: T,
    pub x_bb: T,
    pub x_ab: T,
    pub x_ba: T,
    /// Content and style codes of `x_a` / `x_b`.
    pub c_a: Option<T>,
    pub s_a: Option<T>,
    pub c_b: Option<T>,
    pub s_b: Option<T>,
    /// Codes re-encoded from `x_ab` (content by the B encoder) and `x_ba`
    /// (content by the A encoder).
    pub c_ab: Option<T>,
    pub s_ab: Option<T>,
    pub c_ba: Option<T>,
    pub s_ba: Option<T>,
    /// `G_A(E_B(x_ab), E_S(x_ab))` and `G_B(E_A(x_ba), E_S(x_ba))`.
    pub x_aba: Option<T>,
    pub x_bab: Option<T>,
    /// `D_B(x_ab)` and `D_A(x_ba, m_a)`.
    pub d_fake_ab: T,
    pub d_fake_ba: T,
}

impl<T> Streams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Streams<U> {
        let mut o = |v: &Option<T>| v.as_ref().map(&mut f);
        let (c_a, s_a, c_b, s_b) = (o(&self.c_a), o(&self.s_a), o(&self.c_b), o(&self.s_b));
        let (c_ab, s_ab, c_ba, s_ba) = (o(&self.c_ab), o(&self.s_ab), o(&self.c_ba), o(&self.s_ba));
        let (x_aba, x_bab) = (o(&self.x_aba), o(&self.x_bab));
        Streams {
            x_a: f(&self.x_a),
            x_b: f(&self.x_b),
            x_a_roi: f(&self.x_a_roi),
            x_aa: f(&self.x_aa),
            x_bb: f(&self.x_bb),
            x_ab: f(&self.x_ab),
            x_ba: f(&self.x_ba),
            c_a,
            s_a,
            c_b,
            s_b,
            c_ab,
            s_ab,
            c_ba,
            s_ba,
            x_aba,
            x_bab,
            d_fake_ab: f(&self.d_fake_ab),
            d_fake_ba: f(&self.d_fake_ba),
        }
    }
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| UstError::Contract(format!("objective needs stream output `{what}`")))
}

/// Per-term graph nodes of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    pub total: Var,
    terms: Vec<(&'static str, Var)>,
}

impl ObjectiveVars {
    /// Graph node of a named term (a [`LossReport`] field), if built.
    pub fn term(&self, name: &str) -> Option<Var> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }

    pub fn term_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.terms.iter().map(|t| t.0)
    }

    /// Read term values out of the graph. Discriminator objectives are not
    /// part of the generator graph and stay 0.
    pub fn report(&self, g: &Graph) -> LossReport {
        let mut r = LossReport {
            total: g.value(self.total).data()[0],
            ..LossReport::default()
        };
        for (name, v) in &self.terms {
            let x = g.value(*v).data()[0];
            match *name {
                "lr_a" => r.lr_a = x,
                "lr_b" => r.lr_b = x,
                "sr_a" => r.sr_a = x,
                "sr_b" => r.sr_b = x,
                "gan_g_a" => r.gan_g_a = x,
                "gan_g_b" => r.gan_g_b = x,
                "cc_a" => r.cc_a = x,
                "cc_b" => r.cc_b = x,
                "p_a" => r.p_a = x,
                "p_b" => r.p_b = x,
                "sym_a" => r.sym_a = x,
                _ => unreachable!("unknown term {name}"),
            }
        }
        r
    }
}

/// Generator-side objective. Zero-weighted terms are not built at all, so
/// their stream outputs may be absent. With `phi = None` the perceptual
/// terms are skipped regardless of `lambda_p`.
pub fn total_loss_g(
    g: &mut Graph,
    s: &Streams<Var>,
    mask: &MaskBatch,
    w: &LossWeights,
    phi: Option<&dyn FeatureExtractor>,
) -> Result<ObjectiveVars> {
    w.validate()?;
    let mut terms = Vec::new();
    let mut weighted = Vec::new();

    let gan_a = adversarial_g_g(g, s.d_fake_ab);
    let gan_b = adversarial_g_g(g, s.d_fake_ba);
    terms.push(("gan_g_a", gan_a));
    terms.push(("gan_g_b", gan_b));
    weighted.push(gan_a);
    weighted.push(gan_b);

    let mut pair = |g: &mut Graph, lambda: f64, names: [&'static str; 2], a: Var, b: Var| -> Result<()> {
        terms.push((names[0], a));
        terms.push((names[1], b));
        let sum = g.add(a, b)?;
        weighted.push(g.scale(sum, lambda));
        Ok(())
    };

    if w.lambda_cc != 0.0 {
        let a = g.l1(need(s.x_aba, "x_aba")?, s.x_a)?;
        let b = g.l1(need(s.x_bab, "x_bab")?, s.x_b)?;
        pair(g, w.lambda_cc, ["cc_a", "cc_b"], a, b)?;
    }
    if w.lambda_sr != 0.0 {
        let a = g.l1(s.x_aa, s.x_a)?;
        let b = g.l1(s.x_bb, s.x_b)?;
        pair(g, w.lambda_sr, ["sr_a", "sr_b"], a, b)?;
    }
    if w.lambda_lr != 0.0 {
        let a = latent_reconstruction_g(
            g,
            need(s.c_ab, "c_ab")?,
            need(s.c_a, "c_a")?,
            need(s.s_ab, "s_ab")?,
            need(s.s_a, "s_a")?,
        )?;
        let b = latent_reconstruction_g(
            g,
            need(s.c_ba, "c_ba")?,
            need(s.c_b, "c_b")?,
            need(s.s_ba, "s_ba")?,
            need(s.s_b, "s_b")?,
        )?;
        pair(g, w.lambda_lr, ["lr_a", "lr_b"], a, b)?;
    }
    if let (true, Some(phi)) = (w.lambda_p != 0.0, phi) {
        let a = perceptual_g(g, phi, s.x_aa, s.x_a, s.x_ab, s.x_a_roi, w.lambda_gram)?;
        let (_, _, hb, wb) = g.value(s.x_b).dims4();
        let ba_roi = roi_g(g, s.x_ba, mask, hb, wb)?;
        let b = perceptual_g(g, phi, s.x_bb, s.x_b, ba_roi, s.x_b, w.lambda_gram)?;
        pair(g, w.lambda_p, ["p_a", "p_b"], a, b)?;
    }
    if w.lambda_sym != 0.0 {
        let a = symmetry_g(g, s.x_ab)?;
        terms.push(("sym_a", a));
        weighted.push(g.scale(a, w.lambda_sym));
    }
    let total = sum_vars(g, &weighted)?;
    Ok(ObjectiveVars { total, terms })
}

// ---- plain forms -----------------------------------------------------------

fn eval1(t: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let v = g.constant(t.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).data()[0])
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).data()[0])
}

/// Latent reconstruction from codes already re-encoded from the translated
/// image.
pub fn latent_reconstruction_loss(
    c_orig: &ContentCode,
    s_orig: &StyleCode,
    c_rec: &ContentCode,
    s_rec: &StyleCode,
) -> Result<f64> {
    let mut g = Graph::inference();
    let c = g.constant(c_orig.0.clone());
    let s = g.constant(s_orig.0.clone());
    let cr = g.constant(c_rec.0.clone());
    let sr = g.constant(s_rec.0.clone());
    let out = latent_reconstruction_g(&mut g, cr, c, sr, s)?;
    Ok(g.value(out).data()[0])
}

pub fn self_reconstruction_loss(x_recon: &ImageBatch, x: &ImageBatch) -> Result<f64> {
    eval2(x_recon.tensor(), x.tensor(), |g, a, b| g.l1(a, b))
}

pub fn cycle_consistency_loss(x_cycled: &ImageBatch, x: &ImageBatch) -> Result<f64> {
    eval2(x_cycled.tensor(), x.tensor(), |g, a, b| g.l1(a, b))
}

fn check_scores(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(UstError::Contract("discriminator scores must be probabilities in [0, 1]".into()));
    }
    Ok(())
}

/// Discriminator objective (maximised); probabilities are clamped to
/// `[LOG_EPS, 1]` before the logarithm.
pub fn adversarial_loss_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<f64> {
    check_scores(real_scores)?;
    check_scores(fake_scores)?;
    eval2(real_scores, fake_scores, adversarial_d_g)
}

pub fn adversarial_loss_g(fake_scores: &Tensor) -> Result<f64> {
    check_scores(fake_scores)?;
    eval1(fake_scores, |g, v| Ok(adversarial_g_g(g, v)))
}

/// `F F^T / (C H W)` of a single `[C, H, W]` feature map.
pub fn gram_matrix(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(UstError::Contract(format!("gram_matrix expects a non-empty [C, H, W] array, got {s:?}")));
    }
    let mut g = Graph::inference();
    let v = g.constant(features.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let out = g.gram(v)?;
    g.value(out).clone().reshape(&[s[0], s[0]])
}

pub fn perceptual_loss(
    x_aa: &ImageBatch,
    x_a: &ImageBatch,
    x_ab: &ImageBatch,
    x_a_roi: &ImageBatch,
    phi: &dyn FeatureExtractor,
    lambda_gram: f64,
) -> Result<f64> {
    let mut g = Graph::inference();
    let v: Vec<Var> = [x_aa, x_a, x_ab, x_a_roi]
        .iter()
        .map(|x| g.constant(x.tensor().clone()))
        .collect();
    let out = perceptual_g(&mut g, phi, v[0], v[1], v[2], v[3], lambda_gram)?;
    Ok(g.value(out).data()[0])
}

pub fn symmetry_loss(x: &ImageBatch) -> Result<f64> {
    eval1(x.tensor(), symmetry_g)
}

/// Generator objective over plain stream outputs.
pub fn total_loss(
    s: &Streams<Tensor>,
    mask: &MaskBatch,
    w: &LossWeights,
    phi: Option<&dyn FeatureExtractor>,
) -> Result<LossReport> {
    let mut g = Graph::inference();
    let vars = s.map(|t| g.constant(t.clone()));
    let obj = total_loss_g(&mut g, &vars, mask, w, phi)?;
    Ok(obj.report(&g))
}

//! Token mixers: multi-head softmax attention, the circulant family, and
//! grouped-query attention, plus exact parameter accounting.
//!
//! Shared conventions: heads take contiguous column blocks of width
//! `D_h = D/H`; attention scores are scaled by `1/sqrt(D_h)`. Of the
//! circulant mixers only the averaged-key form scales its logits.
//!
//! | mechanism | kernel logits `z` (per head) | mixed values |
//! |-----------|------------------------------|--------------|
//! | `cat`     | `X·w_a`                      | `X·w_v[h]`   |
//! | `avgkey`  | `Q_h·mean(K_h)ᵀ / sqrt(D_h)` | `X·W_V[h]`   |
//! | `qonly`   | `X·w_a`                      | `V_T[h]`     |
//! | `vonly`   | `Z_T[:, c]` per value column | `X·W_V`      |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::circulant::{CatHeadParams, CatOptions, CoefficientKind, ExecPath};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mechanism {
    Attention,
    Cat,
    AvgKey,
    QOnly,
    VOnly,
    /// Grouped-query attention with `kv_groups` shared key/value heads.
    Gqa { kv_groups: usize },
    /// Half attention, half CAT layers; only meaningful for counting.
    CatAlter,
}

impl Mechanism {
    /// Grouped-query attention with reduction ratio `k`: `max(1, round(H·k))` groups.
    pub fn gqa_with_ratio(heads: usize, k: f64) -> Self {
        let g = ((heads as f64) * k).round().max(1.0) as usize;
        Mechanism::Gqa { kv_groups: g }
    }

    /// Whether this tag can instantiate a single layer.
    pub fn is_layer(self) -> bool {
        self != Mechanism::CatAlter
    }

    pub fn coefficient_kind(self) -> CoefficientKind {
        match self {
            Mechanism::Attention | Mechanism::Gqa { .. } => CoefficientKind::Attention,
            _ => CoefficientKind::Cat,
        }
    }

    pub const LAYERS: [Mechanism; 5] = [
        Mechanism::Attention,
        Mechanism::Cat,
        Mechanism::AvgKey,
        Mechanism::QOnly,
        Mechanism::VOnly,
    ];
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Attention => f.write_str("attention"),
            Mechanism::Cat => f.write_str("cat"),
            Mechanism::AvgKey => f.write_str("avgkey"),
            Mechanism::QOnly => f.write_str("qonly"),
            Mechanism::VOnly => f.write_str("vonly"),
            Mechanism::Gqa { kv_groups } => write!(f, "gqa:{kv_groups}"),
            Mechanism::CatAlter => f.write_str("cat_alter"),
        }
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "attention" | "attn" => Mechanism::Attention,
            "cat" | "cat_qv" | "qv" => Mechanism::Cat,
            "avgkey" | "avgkey_qkv" | "qkv" => Mechanism::AvgKey,
            "qonly" | "q_only" => Mechanism::QOnly,
            "vonly" | "v_only" => Mechanism::VOnly,
            "cat_alter" | "cat-alter" | "catalter" => Mechanism::CatAlter,
            other => match other.strip_prefix("gqa:") {
                Some(g) => {
                    let kv_groups: usize = g
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad group count in '{other}'")))?;
                    if kv_groups == 0 {
                        return Err(Error::invalid("gqa needs at least one group"));
                    }
                    Mechanism::Gqa { kv_groups }
                }
                None => return Err(Error::invalid(format!("unknown mechanism '{other}'"))),
            },
        })
    }
}

impl TryFrom<String> for Mechanism {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mechanism> for String {
    fn from(m: Mechanism) -> String {
        m.to_string()
    }
}

fn check_heads(d: usize, h: usize) -> Result<usize> {
    if d == 0 || h == 0 || !d.is_multiple_of(h) {
        return Err(Error::invalid(format!("D = {d} is not divisible by H = {h}")));
    }
    Ok(d / h)
}

/// Learnable scalars of one mixer layer (`CatAlter`: mean over an
/// attention/CAT pair).
pub fn param_count(mechanism: Mechanism, d: u64, h: u64, n: u64) -> Result<u64> {
    if d == 0 || h == 0 || n == 0 {
        return Err(Error::invalid("param_count arguments must be positive"));
    }
    check_heads(d as usize, h as usize)?;
    Ok(match mechanism {
        Mechanism::Attention | Mechanism::AvgKey => 3 * d * d,
        Mechanism::Cat => (d + h) * d,
        Mechanism::QOnly => (n + h) * d,
        Mechanism::VOnly => (n + d) * d,
        Mechanism::CatAlter => {
            if !h.is_multiple_of(2) {
                return Err(Error::invalid("cat_alter count needs an even head count"));
            }
            (2 * d + h / 2) * d
        }
        Mechanism::Gqa { kv_groups } => {
            let g = kv_groups as u64;
            if !h.is_multiple_of(g) {
                return Err(Error::invalid(format!("H = {h} is not divisible by {g} groups")));
            }
            d * d + 2 * d * (g * d / h)
        }
    })
}

/// Attention coefficients one layer produces: `H·N²` for the quadratic
/// mixers, one kernel of length `N` per head (per value column for `vonly`)
/// for the circulant ones.
pub fn attention_coefficients(mechanism: Mechanism, n: u64, h: u64, d: u64) -> u64 {
    match mechanism {
        Mechanism::VOnly => d * n,
        m => crate::circulant::count_attention_coefficients(n, h, m.coefficient_kind()),
    }
}

/// Parameters of one mixer layer, generic over storage (tensors, or tape
/// handles during training).
#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams<P = Tensor> {
    Attention { w_q: P, w_k: P, w_v: P, heads: usize },
    Cat { heads: Vec<CatHeadParams<P>> },
    AvgKey { w_q: P, w_k: P, w_v: P, heads: usize },
    /// `w_a`: one `D×1` column per head; `v_t`: `N×D`.
    QOnly { w_a: Vec<P>, v_t: P },
    /// `z_t`: `N×D`, one kernel per value column; `w_v`: `D×D`.
    VOnly { z_t: P, w_v: P },
    /// `w_k`, `w_v` are `D×(G·D_h)`.
    Gqa { w_q: P, w_k: P, w_v: P, heads: usize, kv_groups: usize },
}

impl<P> MixerParams<P> {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            MixerParams::Attention { .. } => Mechanism::Attention,
            MixerParams::Cat { .. } => Mechanism::Cat,
            MixerParams::AvgKey { .. } => Mechanism::AvgKey,
            MixerParams::QOnly { .. } => Mechanism::QOnly,
            MixerParams::VOnly { .. } => Mechanism::VOnly,
            MixerParams::Gqa { kv_groups, .. } => Mechanism::Gqa { kv_groups: *kv_groups },
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            MixerParams::Attention { heads, .. }
            | MixerParams::AvgKey { heads, .. }
            | MixerParams::Gqa { heads, .. } => *heads,
            MixerParams::Cat { heads } => heads.len(),
            MixerParams::QOnly { w_a, .. } => w_a.len(),
            MixerParams::VOnly { .. } => 1,
        }
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        match self {
            MixerParams::Attention { w_q, w_k, w_v, .. }
            | MixerParams::AvgKey { w_q, w_k, w_v, .. }
            | MixerParams::Gqa { w_q, w_k, w_v, .. } => {
                out.push(("w_q".to_string(), w_q));
                out.push(("w_k".to_string(), w_k));
                out.push(("w_v".to_string(), w_v));
            }
            MixerParams::Cat { heads } => {
                for (h, p) in heads.iter().enumerate() {
                    out.push((format!("head{h}.w_a"), &p.w_a));
                    out.push((format!("head{h}.w_v"), &p.w_v));
                }
            }
            MixerParams::QOnly { w_a, v_t } => {
                for (h, p) in w_a.iter().enumerate() {
                    out.push((format!("head{h}.w_a"), p));
                }
                out.push(("v_t".to_string(), v_t));
            }
            MixerParams::VOnly { z_t, w_v } => {
                out.push(("z_t".to_string(), z_t));
                out.push(("w_v".to_string(), w_v));
            }
        }
        out
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&'a P) -> Q) -> MixerParams<Q> {
        match self {
            MixerParams::Attention { w_q, w_k, w_v, heads } => MixerParams::Attention {
                w_q: f(w_q),
                w_k: f(w_k),
                w_v: f(w_v),
                heads: *heads,
            },
            MixerParams::AvgKey { w_q, w_k, w_v, heads } => MixerParams::AvgKey {
                w_q: f(w_q),
                w_k: f(w_k),
                w_v: f(w_v),
                heads: *heads,
            },
            MixerParams::Gqa { w_q, w_k, w_v, heads, kv_groups } => MixerParams::Gqa {
                w_q: f(w_q),
                w_k: f(w_k),
                w_v: f(w_v),
                heads: *heads,
                kv_groups: *kv_groups,
            },
            MixerParams::Cat { heads } => MixerParams::Cat {
                heads: heads.iter().map(|p| p.map(&mut f)).collect(),
            },
            MixerParams::QOnly { w_a, v_t } => MixerParams::QOnly {
                w_a: w_a.iter().map(&mut f).collect(),
                v_t: f(v_t),
            },
            MixerParams::VOnly { z_t, w_v } => MixerParams::VOnly {
                z_t: f(z_t),
                w_v: f(w_v),
            },
        }
    }
}

impl<T: Scalar> MixerParams<Tensor<T>> {
    /// Random initialisation. Projections use std `1/sqrt(D)`; the `N`-indexed
    /// tables use unit std.
    pub fn init(mechanism: Mechanism, d: usize, h: usize, n: usize, rng: &mut SeededRng) -> Result<Self> {
        let dh = check_heads(d, h)?;
        let std = 1.0 / (d as f64).sqrt();
        let mut m = |r: usize, c: usize, s: f64| -> Result<Tensor<T>> {
            Ok(Tensor::randn(Shape::matrix(r, c)?, s, rng))
        };
        Ok(match mechanism {
            Mechanism::Attention => MixerParams::Attention {
                w_q: m(d, d, std)?,
                w_k: m(d, d, std)?,
                w_v: m(d, d, std)?,
                heads: h,
            },
            Mechanism::AvgKey => MixerParams::AvgKey {
                w_q: m(d, d, std)?,
                w_k: m(d, d, std)?,
                w_v: m(d, d, std)?,
                heads: h,
            },
            Mechanism::Cat => MixerParams::Cat {
                heads: (0..h)
                    .map(|_| {
                        Ok(CatHeadParams {
                            w_a: m(d, 1, std)?,
                            w_v: m(d, dh, std)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            Mechanism::QOnly => MixerParams::QOnly {
                w_a: (0..h).map(|_| m(d, 1, std)).collect::<Result<_>>()?,
                v_t: m(n, d, 1.0)?,
            },
            Mechanism::VOnly => MixerParams::VOnly {
                z_t: m(n, d, 1.0)?,
                w_v: m(d, d, std)?,
            },
            Mechanism::Gqa { kv_groups } => {
                if !h.is_multiple_of(kv_groups) {
                    return Err(Error::invalid(format!(
                        "H = {h} is not divisible by {kv_groups} groups"
                    )));
                }
                MixerParams::Gqa {
                    w_q: m(d, d, std)?,
                    w_k: m(d, kv_groups * dh, std)?,
                    w_v: m(d, kv_groups * dh, std)?,
                    heads: h,
                    kv_groups,
                }
            }
            Mechanism::CatAlter => {
                return Err(Error::invalid("cat_alter is a schedule, not a layer"));
            }
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sequence length the parameters are tied to, if any.
    pub fn bound_n(&self) -> Option<usize> {
        match self {
            MixerParams::QOnly { v_t, .. } => Some(v_t.rows()),
            MixerParams::VOnly { z_t, .. } => Some(z_t.rows()),
            _ => None,
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Scaled dot-product attention over contiguous head blocks; query head
    /// `h` reads key/value group `h / (H/G)`.
    pub fn grouped_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_groups: usize,
        causal: bool,
    ) -> Result<Var> {
        let d = self.shape(q).as_matrix().1;
        let dh = check_heads(d, heads)?;
        if kv_groups == 0 || !heads.is_multiple_of(kv_groups) {
            return Err(Error::invalid(format!(
                "H = {heads} is not divisible by {kv_groups} groups"
            )));
        }
        let per_group = heads / kv_groups;
        let scale = T::one() / T::of((dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let g = h / per_group;
            let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.slice_cols(k, g * dh, (g + 1) * dh)?;
            let vh = self.slice_cols(v, g * dh, (g + 1) * dh)?;
            let s = self.matmul(qh, self.transpose(kh)?)?;
            let s = self.scale(s, scale)?;
            let p = if causal {
                self.softmax_rows_causal(s)?
            } else {
                self.softmax_rows(s)?
            };
            outs.push(self.matmul(p, vh)?);
        }
        self.concat_cols(&outs)
    }

    /// Forward pass of any mixer. `opts.path` and `opts.orientation` apply to
    /// circulant mixing; `opts.causal` restricts every mixer to past positions.
    pub fn mixer(&self, x: Var, p: &MixerParams<Var>, opts: &CatOptions) -> Result<Var> {
        let (n, d) = self.shape(x).as_matrix();
        match p {
            MixerParams::Attention { w_q, w_k, w_v, heads } => {
                let q = self.matmul(x, *w_q)?;
                let k = self.matmul(x, *w_k)?;
                let v = self.matmul(x, *w_v)?;
                self.grouped_attention(q, k, v, *heads, *heads, opts.causal)
            }
            MixerParams::Gqa { w_q, w_k, w_v, heads, kv_groups } => {
                let q = self.matmul(x, *w_q)?;
                let k = self.matmul(x, *w_k)?;
                let v = self.matmul(x, *w_v)?;
                self.grouped_attention(q, k, v, *heads, *kv_groups, opts.causal)
            }
            MixerParams::Cat { heads } => self.multihead_cat(x, heads, opts),
            MixerParams::AvgKey { w_q, w_k, w_v, heads } => {
                if opts.causal {
                    return Err(Error::Unsupported(
                        "avgkey has no causal form: the mean key reads every position".into(),
                    ));
                }
                let dh = check_heads(d, *heads)?;
                let q = self.matmul(x, *w_q)?;
                let k_avg = self.mean_rows(self.matmul(x, *w_k)?)?;
                let v = self.matmul(x, *w_v)?;
                let scale = T::one() / T::of((dh as f64).sqrt());
                let mut outs = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
                    let kh = self.slice_cols(k_avg, h * dh, (h + 1) * dh)?;
                    let z = self.matmul(qh, self.transpose(kh)?)?;
                    let kern = self.kernel_from_logits(z, Some(scale))?;
                    let vh = self.slice_cols(v, h * dh, (h + 1) * dh)?;
                    outs.push(self.apply_kernel(kern, vh, opts)?);
                }
                self.concat_cols(&outs)
            }
            MixerParams::QOnly { w_a, v_t } => {
                check_bound("qonly", n, self.shape(*v_t).as_matrix().0)?;
                let dh = check_heads(d, w_a.len())?;
                let mut outs = Vec::with_capacity(w_a.len());
                for (h, wa) in w_a.iter().enumerate() {
                    let kern = self.build_kernel(x, *wa, None)?;
                    let vh = self.slice_cols(*v_t, h * dh, (h + 1) * dh)?;
                    outs.push(self.apply_kernel(kern, vh, opts)?);
                }
                self.concat_cols(&outs)
            }
            MixerParams::VOnly { z_t, w_v } => {
                check_bound("vonly", n, self.shape(*z_t).as_matrix().0)?;
                let v = self.matmul(x, *w_v)?;
                let mut outs = Vec::with_capacity(d);
                for c in 0..d {
                    let kern = self.kernel_from_logits(self.slice_cols(*z_t, c, c + 1)?, None)?;
                    let vc = self.slice_cols(v, c, c + 1)?;
                    outs.push(self.apply_kernel(kern, vc, opts)?);
                }
                self.concat_cols(&outs)
            }
        }
    }
}

impl Tape<f64> {
    /// The `N×N` mixing matrices a mixer applies, one per head (per value
    /// column for `vonly`). For circulant mixers this materialises the kernel.
    pub fn mixer_maps(&self, x: Var, p: &MixerParams<Var>, opts: &CatOptions) -> Result<Vec<Var>> {
        let d = self.shape(x).as_matrix().1;
        let kernel_map = |k: crate::circulant::KernelVars| -> Result<Var> {
            if opts.causal {
                let m = self.circulant_matrix(k.logits, opts.orientation)?;
                self.softmax_rows_causal(m)
            } else {
                self.circulant_matrix(k.weights, opts.orientation)
            }
        };
        let attention = |w_q: Var, w_k: Var, heads: usize, groups: usize| -> Result<Vec<Var>> {
            let dh = check_heads(d, heads)?;
            let q = self.matmul(x, w_q)?;
            let k = self.matmul(x, w_k)?;
            let scale = 1.0 / (dh as f64).sqrt();
            (0..heads)
                .map(|h| {
                    let g = h / (heads / groups);
                    let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
                    let kh = self.slice_cols(k, g * dh, (g + 1) * dh)?;
                    let s = self.scale(self.matmul(qh, self.transpose(kh)?)?, scale)?;
                    if opts.causal {
                        self.softmax_rows_causal(s)
                    } else {
                        self.softmax_rows(s)
                    }
                })
                .collect()
        };
        match p {
            MixerParams::Attention { w_q, w_k, heads, .. } => attention(*w_q, *w_k, *heads, *heads),
            MixerParams::Gqa { w_q, w_k, heads, kv_groups, .. } => attention(*w_q, *w_k, *heads, *kv_groups),
            MixerParams::Cat { heads } => {
                let scale = opts
                    .scale_logits
                    .then(|| 1.0 / ((d / heads.len()) as f64).sqrt());
                heads
                    .iter()
                    .map(|h| kernel_map(self.build_kernel(x, h.w_a, scale)?))
                    .collect()
            }
            MixerParams::QOnly { w_a, .. } => w_a
                .iter()
                .map(|w| kernel_map(self.build_kernel(x, *w, None)?))
                .collect(),
            MixerParams::AvgKey { w_q, w_k, heads, .. } => {
                let dh = check_heads(d, *heads)?;
                let q = self.matmul(x, *w_q)?;
                let k_avg = self.mean_rows(self.matmul(x, *w_k)?)?;
                let scale = 1.0 / (dh as f64).sqrt();
                (0..*heads)
                    .map(|h| {
                        let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
                        let kh = self.slice_cols(k_avg, h * dh, (h + 1) * dh)?;
                        let z = self.matmul(qh, self.transpose(kh)?)?;
                        kernel_map(self.kernel_from_logits(z, Some(scale))?)
                    })
                    .collect()
            }
            MixerParams::VOnly { z_t, .. } => (0..d)
                .map(|c| kernel_map(self.kernel_from_logits(self.slice_cols(*z_t, c, c + 1)?, None)?))
                .collect(),
        }
    }
}

pub fn mixer_maps(x: &Tensor, p: &MixerParams, opts: &CatOptions) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let maps = tape.mixer_maps(xv, &constant_params(&tape, p), opts)?;
    Ok(maps.into_iter().map(|m| tape.value(m)).collect())
}

fn check_bound(name: &str, n: usize, bound: usize) -> Result<()> {
    if n != bound {
        return Err(Error::invalid(format!(
            "{name} parameters are bound to N = {bound}, got N = {n}"
        )));
    }
    Ok(())
}

fn constant_params<T: Scalar>(tape: &Tape<T>, p: &MixerParams<Tensor<T>>) -> MixerParams<Var> {
    p.map(|t| tape.constant(t.clone()))
}

/// Multi-head softmax attention (no output projection).
pub fn standard_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    w_q: &Tensor<T>,
    w_k: &Tensor<T>,
    w_v: &Tensor<T>,
    heads: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    let p = MixerParams::Attention {
        w_q: w_q.clone(),
        w_k: w_k.clone(),
        w_v: w_v.clone(),
        heads,
    };
    let opts = CatOptions {
        causal,
        ..CatOptions::default()
    };
    mixer_forward(x, &p, &opts)
}

/// Non-causal forward along `path` in the default orientation.
pub fn variant_forward<T: Scalar>(x: &Tensor<T>, p: &MixerParams<Tensor<T>>, path: ExecPath) -> Result<Tensor<T>> {
    mixer_forward(x, p, &CatOptions::with_path(path))
}

pub fn mixer_forward<T: Scalar>(x: &Tensor<T>, p: &MixerParams<Tensor<T>>, opts: &CatOptions) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.mixer(xv, &constant_params(&tape, p), opts)?;
    Ok(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::{multihead_cat_forward, Orientation};
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::oracle;
    use crate::tensor::max_rel_err;

    fn randm(r: usize, c: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::randn(Shape::matrix(r, c).unwrap(), 1.0, rng)
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(Mechanism::Attention, 768, 12, 196).unwrap(), 1_769_472);
        assert_eq!(param_count(Mechanism::Cat, 768, 12, 196).unwrap(), 599_040);
        assert_eq!(param_count(Mechanism::VOnly, 8, 2, 4).unwrap(), 96);
        assert_eq!(
            2 * param_count(Mechanism::CatAlter, 768, 12, 196).unwrap(),
            param_count(Mechanism::Attention, 768, 12, 196).unwrap()
                + param_count(Mechanism::Cat, 768, 12, 196).unwrap()
        );
        assert!(param_count(Mechanism::CatAlter, 12, 3, 4).is_err());
        assert!(param_count(Mechanism::Cat, 10, 3, 4).is_err());
        assert!(param_count(Mechanism::Cat, 0, 1, 4).is_err());
    }

    #[test]
    fn constructed_counts_match_formula() {
        let mut rng = SeededRng::new(2);
        for &(d, h, n) in &[(4, 1, 1), (4, 2, 5), (8, 4, 4), (12, 6, 7), (16, 8, 3)] {
            let mut mechs = Mechanism::LAYERS.to_vec();
            mechs.push(Mechanism::Gqa { kv_groups: 1 });
            mechs.push(Mechanism::Gqa { kv_groups: h });
            for m in mechs {
                let p = MixerParams::<Tensor>::init(m, d, h, n, &mut rng).unwrap();
                assert_eq!(
                    p.num_scalars() as u64,
                    param_count(m, d as u64, h as u64, n as u64).unwrap(),
                    "{m} {d} {h} {n}"
                );
                assert_eq!(p.mechanism(), m);
            }
        }
    }

    #[test]
    fn mechanism_tags_round_trip() {
        for m in [
            Mechanism::Attention,
            Mechanism::Cat,
            Mechanism::AvgKey,
            Mechanism::QOnly,
            Mechanism::VOnly,
            Mechanism::Gqa { kv_groups: 3 },
            Mechanism::CatAlter,
        ] {
            assert_eq!(m.to_string().parse::<Mechanism>().unwrap(), m);
            let js = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Mechanism>(&js).unwrap(), m);
        }
        assert!("gqa:0".parse::<Mechanism>().is_err());
        assert!("linear".parse::<Mechanism>().is_err());
        assert_eq!(Mechanism::gqa_with_ratio(16, 0.25), Mechanism::Gqa { kv_groups: 4 });
        assert_eq!(Mechanism::gqa_with_ratio(2, 0.1), Mechanism::Gqa { kv_groups: 1 });
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let x = randm(5, 4, &mut rng);
        let (q, k, v) = (randm(4, 4, &mut rng), randm(4, 4, &mut rng), randm(4, 4, &mut rng));
        for causal in [false, true] {
            let got = standard_attention_forward(&x, &q, &k, &v, 2, causal).unwrap();
            let want = oracle::attention_loops(&x, &q, &k, &v, 2, causal);
            assert!(max_rel_err(&got, &want, 1e-12) <= 1e-10);
        }
    }

    #[test]
    fn attention_trivial_cases() {
        let mut rng = SeededRng::new(12);
        let (q, k, v) = (randm(4, 4, &mut rng), randm(4, 4, &mut rng), randm(4, 4, &mut rng));
        let x1 = randm(1, 4, &mut rng);
        let out = standard_attention_forward(&x1, &q, &k, &v, 2, false).unwrap();
        assert!(max_rel_err(&out, &x1.matmul(&v).unwrap(), 1e-12) < 1e-14);

        let row = x1.row(0).to_vec();
        let x = Tensor::from_rows(&vec![row; 4]).unwrap();
        let out = standard_attention_forward(&x, &q, &k, &v, 2, false).unwrap();
        for i in 1..4 {
            assert_eq!(out.row(i), out.row(0));
        }
        assert!(standard_attention_forward(&x, &q, &k, &v, 3, false).is_err());
    }

    #[test]
    fn cat_variant_is_bit_identical_to_multihead() {
        let mut rng = SeededRng::new(13);
        let x = randm(7, 6, &mut rng);
        let p = MixerParams::<Tensor>::init(Mechanism::Cat, 6, 3, 7, &mut rng).unwrap();
        let MixerParams::Cat { heads } = &p else { unreachable!() };
        for path in ExecPath::ALL {
            let a = variant_forward(&x, &p, path).unwrap();
            let b = multihead_cat_forward(&x, heads, path, Orientation::ColShift).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn avgkey_zero_key_is_uniform_mix() {
        let mut rng = SeededRng::new(14);
        let x = randm(5, 4, &mut rng);
        let mut p = MixerParams::<Tensor>::init(Mechanism::AvgKey, 4, 2, 5, &mut rng).unwrap();
        if let MixerParams::AvgKey { w_k, .. } = &mut p {
            *w_k = w_k.zeros_like();
        }
        let MixerParams::AvgKey { w_v, .. } = &p else { unreachable!() };
        let xv = x.matmul(w_v).unwrap();
        let mean = oracle::column_mean(&xv);
        let out = variant_forward(&x, &p, ExecPath::Fft).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert!((out.at(i, c) - mean[c]).abs() < 1e-13);
            }
        }
        let causal = CatOptions {
            causal: true,
            ..CatOptions::default()
        };
        assert!(mixer_forward(&x, &p, &causal).is_err());
    }

    #[test]
    fn vonly_and_qonly_examples() {
        let mut rng = SeededRng::new(15);
        let x = randm(4, 4, &mut rng);
        let mut p = MixerParams::<Tensor>::init(Mechanism::VOnly, 4, 2, 4, &mut rng).unwrap();
        if let MixerParams::VOnly { z_t, .. } = &mut p {
            *z_t = z_t.zeros_like();
        }
        let MixerParams::VOnly { w_v, .. } = &p else { unreachable!() };
        let mean = oracle::column_mean(&x.matmul(w_v).unwrap());
        let out = variant_forward(&x, &p, ExecPath::Gather).unwrap();
        for i in 0..4 {
            for c in 0..4 {
                assert!((out.at(i, c) - mean[c]).abs() < 1e-13);
            }
        }

        let q = MixerParams::<Tensor>::init(Mechanism::QOnly, 4, 2, 4, &mut rng).unwrap();
        let row = randm(1, 4, &mut rng).row(0).to_vec();
        let same = Tensor::from_rows(&vec![row; 4]).unwrap();
        let MixerParams::QOnly { v_t, .. } = &q else { unreachable!() };
        let mean = oracle::column_mean(v_t);
        let out = variant_forward(&same, &q, ExecPath::Fft).unwrap();
        for i in 0..4 {
            for c in 0..4 {
                assert!((out.at(i, c) - mean[c]).abs() < 1e-13);
            }
        }
        let short = randm(3, 4, &mut rng);
        assert!(variant_forward(&short, &q, ExecPath::Fft).is_err());
        assert!(variant_forward(&short, &p, ExecPath::Fft).is_err());
    }

    #[test]
    fn gqa_full_groups_matches_attention() {
        let mut rng = SeededRng::new(16);
        let x = randm(6, 8, &mut rng);
        let a = MixerParams::<Tensor>::init(Mechanism::Attention, 8, 4, 6, &mut rng).unwrap();
        let MixerParams::Attention { w_q, w_k, w_v, heads } = a.clone() else { unreachable!() };
        let g = MixerParams::Gqa { w_q, w_k, w_v, heads, kv_groups: 4 };
        let ya = variant_forward(&x, &a, ExecPath::Fft).unwrap();
        let yg = variant_forward(&x, &g, ExecPath::Fft).unwrap();
        assert!(max_rel_err(&ya, &yg, 1e-12) <= 1e-10);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = SeededRng::new(17);
        let x = randm(6, 4, &mut rng);
        let p = MixerParams::<Tensor>::init(Mechanism::Attention, 4, 2, 6, &mut rng).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let y = variant_forward(&x, &p, ExecPath::Fft).unwrap();
        let py = variant_forward(&px, &p, ExecPath::Fft).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((py.at(r, c) - y.at(i, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn maps_reproduce_mixer_outputs() {
        let (n, d, h) = (6, 4, 2);
        for m in Mechanism::LAYERS {
            let mut rng = SeededRng::new(50);
            let x = randm(n, d, &mut rng);
            let p = MixerParams::<Tensor>::init(m, d, h, n, &mut rng).unwrap();
            let opts = CatOptions::default();
            let maps = mixer_maps(&x, &p, &opts).unwrap();
            let out = mixer_forward(&x, &p, &opts).unwrap();
            let values = match &p {
                MixerParams::Attention { w_v, .. } | MixerParams::AvgKey { w_v, .. } | MixerParams::VOnly { w_v, .. } => {
                    x.matmul(w_v).unwrap()
                }
                MixerParams::Cat { heads } => {
                    Tensor::concat_cols(&heads.iter().map(|c| x.matmul(&c.w_v).unwrap()).collect::<Vec<_>>()).unwrap()
                }
                MixerParams::QOnly { v_t, .. } => v_t.clone(),
                MixerParams::Gqa { .. } => unreachable!(),
            };
            let w = d / maps.len();
            for (k, map) in maps.iter().enumerate() {
                assert_eq!(map.shape().as_matrix(), (n, n));
                let got = map.matmul(&values.slice_cols(k * w, (k + 1) * w).unwrap()).unwrap();
                let want = out.slice_cols(k * w, (k + 1) * w).unwrap();
                assert!(max_rel_err(&got, &want, 1e-12) < 1e-9, "{m} head {k}");
                for i in 0..n {
                    assert!((map.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn all_variants_pass_gradient_checks() {
        let (n, d, h) = (5, 4, 2);
        let mut mechs = Mechanism::LAYERS.to_vec();
        mechs.push(Mechanism::Gqa { kv_groups: 1 });
        for m in mechs {
            let mut rng = SeededRng::new(40);
            let x = randm(n, d, &mut rng);
            let p = MixerParams::<Tensor>::init(m, d, h, n, &mut rng).unwrap();
            let named = p.named();
            let mut inputs = vec![x];
            inputs.extend(named.iter().map(|(_, t)| (*t).clone()));
            let template = p.clone();
            let report = check_gradients(
                |t, vars| {
                    let mut it = vars[1..].iter();
                    let params = template.map(|_| *it.next().unwrap());
                    t.mixer(vars[0], &params, &CatOptions::with_path(ExecPath::Fft))
                },
                &inputs,
                &GradCheck::weighted(3),
            )
            .unwrap();
            assert!(report.passed(1e-6), "{m}: {report:?}");
        }
    }
}

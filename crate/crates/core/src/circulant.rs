//! Circulant token mixing.
//!
//! A head turns its input `X` into one logit per position, `z = X·w_a`, and
//! a kernel `w = softmax(z)`. The mixing matrix is the circulant generated
//! by `w`, in one of two orientations:
//!
//! * [`Orientation::RowShift`]: first row is `w`, each row a one-step right
//!   rotation of the one above, `M[i][j] = w[(j-i) mod N]`. Applying it is a
//!   circular correlation, `IFFT(conj(FFT(w)) ⊙ FFT(v))`.
//! * [`Orientation::ColShift`] (default): first column is `w`,
//!   `M[i][j] = w[(i-j) mod N]`. Applying it is a circular convolution,
//!   `IFFT(FFT(w) ⊙ FFT(v))`.
//!
//! The two coincide for `N <= 2` and are transposes of each other in
//! general. Every row of either matrix is a permutation of `w`, so the
//! matrix is row-stochastic whenever `w` is.
//!
//! The product `M·V` has three interchangeable implementations, selected by
//! [`ExecPath`]: the materialised matrix (`O(N²)` memory), a weighted sum
//! of rolled copies of `V` (`O(N²)` time, `O(N)` extra memory), and the FFT
//! route (`O(N log N)`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::SpectralFilter;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    RowShift,
    #[default]
    ColShift,
}

impl Orientation {
    /// Orientation of the transposed matrix.
    pub fn transposed(self) -> Self {
        match self {
            Orientation::RowShift => Orientation::ColShift,
            Orientation::ColShift => Orientation::RowShift,
        }
    }

    /// Kernel index feeding `M[i][j]`.
    #[inline]
    pub fn index(self, i: usize, j: usize, n: usize) -> usize {
        match self {
            Orientation::RowShift => (j + n - i) % n,
            Orientation::ColShift => (i + n - j) % n,
        }
    }

    /// Row of `V` that kernel entry `m` pulls into output row `i`.
    #[inline]
    fn source_row(self, i: usize, m: usize, n: usize) -> usize {
        match self {
            Orientation::RowShift => (i + m) % n,
            Orientation::ColShift => (i + n - m) % n,
        }
    }

    pub const ALL: [Orientation; 2] = [Orientation::RowShift, Orientation::ColShift];
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::RowShift => "row_shift",
            Orientation::ColShift => "col_shift",
        })
    }
}

impl FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_shift" | "row-shift" | "row" => Ok(Orientation::RowShift),
            "col_shift" | "col-shift" | "col" => Ok(Orientation::ColShift),
            _ => Err(Error::invalid(format!("unknown orientation '{s}'"))),
        }
    }
}

/// How a circulant product is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPath {
    Explicit,
    Gather,
    #[default]
    Fft,
}

impl ExecPath {
    pub const ALL: [ExecPath; 3] = [ExecPath::Explicit, ExecPath::Gather, ExecPath::Fft];
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecPath::Explicit => "explicit",
            ExecPath::Gather => "gather",
            ExecPath::Fft => "fft",
        })
    }
}

impl FromStr for ExecPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(ExecPath::Explicit),
            "gather" => Ok(ExecPath::Gather),
            "fft" => Ok(ExecPath::Fft),
            _ => Err(Error::invalid(format!("unknown execution path '{s}'"))),
        }
    }
}

/// Imaginary residue tolerated by the FFT path before it reports misuse.
pub const FFT_RESIDUE_LIMIT: f64 = 1e-8;

fn residue_limit<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        FFT_RESIDUE_LIMIT
    } else {
        1e-3
    }
}

fn check_conform<T: Scalar>(op: &'static str, n: usize, v: &Tensor<T>) -> Result<()> {
    if v.shape().rank() != 2 || v.rows() != n {
        return Err(Error::ShapeMismatch {
            op,
            lhs: Shape::new(vec![n])?,
            rhs: v.shape().clone(),
        });
    }
    Ok(())
}

/// `N×N` circulant generated by `w`.
pub fn materialize<T: Scalar>(w: &[T], orientation: Orientation) -> Result<Tensor<T>> {
    let n = w.len();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(w[orientation.index(i, j, n)]);
        }
    }
    Tensor::checked("materialize_circulant", Shape::matrix(n, n)?, data)
}

pub fn mix_explicit<T: Scalar>(w: &[T], v: &Tensor<T>, orientation: Orientation) -> Result<Tensor<T>> {
    check_conform("cat_forward_explicit", w.len(), v)?;
    materialize(w, orientation)?.matmul(v)
}

/// `Σ_m w[m] · roll(V, ±m)`, accumulated in ascending `m`.
pub fn mix_gather<T: Scalar>(w: &[T], v: &Tensor<T>, orientation: Orientation) -> Result<Tensor<T>> {
    let n = w.len();
    check_conform("cat_forward_gather", n, v)?;
    let d = v.cols();
    let vd = v.data();
    let mut out = vec![T::zero(); n * d];
    for (m, &wm) in w.iter().enumerate() {
        for i in 0..n {
            let src = orientation.source_row(i, m, n);
            let orow = &mut out[i * d..(i + 1) * d];
            for (o, &x) in orow.iter_mut().zip(&vd[src * d..(src + 1) * d]) {
                *o = *o + wm * x;
            }
        }
    }
    Tensor::checked("cat_forward_gather", v.shape().clone(), out)
}

/// Column-by-column spectral product; never forms an `N×N` array.
pub fn mix_fft<T: Scalar>(w: &[T], v: &Tensor<T>, orientation: Orientation) -> Result<Tensor<T>> {
    let n = w.len();
    check_conform("cat_forward_fft", n, v)?;
    let d = v.cols();
    let vd = v.data();
    let mut filter = SpectralFilter::new(w, orientation == Orientation::RowShift, residue_limit::<T>())?;
    let mut out = vec![T::zero(); n * d];
    for c in 0..d {
        filter.apply("cat_forward_fft", |i| vd[i * d + c], |i, x| out[i * d + c] = x)?;
    }
    Tensor::checked("cat_forward_fft", v.shape().clone(), out)
}

pub fn mix<T: Scalar>(
    w: &[T],
    v: &Tensor<T>,
    orientation: Orientation,
    path: ExecPath,
) -> Result<Tensor<T>> {
    match path {
        ExecPath::Explicit => mix_explicit(w, v, orientation),
        ExecPath::Gather => mix_gather(w, v, orientation),
        ExecPath::Fft => mix_fft(w, v, orientation),
    }
}

/// Causal mixing from raw logits: row `i` of the circulant of `z` is
/// softmax-normalised over its entries `j <= i` only, then applied to `V`.
/// This equals masking the circulant of `softmax(z)` and renormalising each
/// row, but the row-`i` result never touches logits outside its allowed set.
pub fn mix_causal_logits<T: Scalar>(
    logits: &[T],
    v: &Tensor<T>,
    orientation: Orientation,
) -> Result<Tensor<T>> {
    check_conform("cat_forward_causal", logits.len(), v)?;
    materialize(logits, orientation)?
        .softmax_rows_causal()?
        .matmul(v)
}

/// Causal mixing from normalised weights: mask `j > i`, renormalise rows.
pub fn mix_causal_weights<T: Scalar>(
    w: &[T],
    v: &Tensor<T>,
    orientation: Orientation,
) -> Result<Tensor<T>> {
    let n = w.len();
    check_conform("cat_forward_causal", n, v)?;
    let full = materialize(w, orientation)?;
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &full.row(i)[..=i];
        let mass: T = row.iter().copied().sum();
        assert!(mass > T::zero(), "causal row {i} has no allowed mass");
        for (j, &x) in row.iter().enumerate() {
            data[i * n + j] = x / mass;
        }
    }
    Tensor::checked("cat_forward_causal", Shape::matrix(n, n)?, data)?.matmul(v)
}

/// Generator of a circulant mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CirculantKernel<T: Scalar = f64> {
    weights: Vec<T>,
    logits: Option<Vec<T>>,
    orientation: Orientation,
}

impl<T: Scalar> CirculantKernel<T> {
    /// Kernel from normalised weights: nonnegative, summing to one.
    pub fn from_weights(weights: Vec<T>, orientation: Orientation) -> Result<Self> {
        let k = Self::generator(weights, orientation)?;
        if !k.is_stochastic(1e-10) {
            return Err(Error::invalid(
                "kernel weights must be nonnegative and sum to 1",
            ));
        }
        Ok(k)
    }

    /// Any finite generator vector, without the stochastic constraint.
    pub fn generator(weights: Vec<T>, orientation: Orientation) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("kernel must have at least one entry"));
        }
        crate::tensor::check_finite("kernel", &weights)?;
        Ok(Self {
            weights,
            logits: None,
            orientation,
        })
    }

    /// Kernel `softmax(logits)`, remembering the logits for causal use.
    pub fn from_logits(logits: Vec<T>, orientation: Orientation) -> Result<Self> {
        let mut k = Self::generator(logits.clone(), orientation)?;
        crate::tensor::softmax_in_place(&mut k.weights);
        k.logits = Some(logits);
        Ok(k)
    }

    pub fn uniform(n: usize, orientation: Orientation) -> Result<Self> {
        Self::from_logits(vec![T::zero(); n], orientation)
    }

    pub fn delta(n: usize, at: usize, orientation: Orientation) -> Result<Self> {
        let mut w = vec![T::zero(); n];
        w[at % n] = T::one();
        Self::from_weights(w, orientation)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn logits(&self) -> Option<&[T]> {
        self.logits.as_deref()
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn is_stochastic(&self, tol: f64) -> bool {
        let sum: f64 = self.weights.iter().map(|w| w.as_f64()).sum();
        self.weights.iter().all(|&w| w >= T::zero()) && (sum - 1.0).abs() <= tol
    }
}

/// `Z = X·w_a`, kernel `softmax(Z)`.
pub fn build_kernel<T: Scalar>(
    x: &Tensor<T>,
    w_a: &Tensor<T>,
    orientation: Orientation,
) -> Result<CirculantKernel<T>> {
    if w_a.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "build_kernel",
            lhs: x.shape().clone(),
            rhs: w_a.shape().clone(),
        });
    }
    let z = x.matmul(w_a)?;
    CirculantKernel::from_logits(z.to_vec(), orientation)
}

pub fn materialize_circulant<T: Scalar>(k: &CirculantKernel<T>) -> Result<Tensor<T>> {
    materialize(&k.weights, k.orientation)
}

pub fn cat_forward_explicit<T: Scalar>(k: &CirculantKernel<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    mix_explicit(&k.weights, v, k.orientation)
}

pub fn cat_forward_gather<T: Scalar>(k: &CirculantKernel<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    mix_gather(&k.weights, v, k.orientation)
}

pub fn cat_forward_fft<T: Scalar>(k: &CirculantKernel<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    mix_fft(&k.weights, v, k.orientation)
}

/// Causal product. Uses the logits when the kernel carries them, otherwise
/// masks and renormalises the weights.
pub fn cat_forward_causal<T: Scalar>(k: &CirculantKernel<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    match &k.logits {
        Some(z) => mix_causal_logits(z, v, k.orientation),
        None => mix_causal_weights(&k.weights, v, k.orientation),
    }
}

/// Per-head parameters: `w_a` is `D×1`, `w_v` is `D×(D/H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CatHeadParams<P = Tensor> {
    pub w_a: P,
    pub w_v: P,
}

impl<P> CatHeadParams<P> {
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&'a P) -> Q) -> CatHeadParams<Q> {
        CatHeadParams {
            w_a: f(&self.w_a),
            w_v: f(&self.w_v),
        }
    }
}

impl<T: Scalar> CatHeadParams<Tensor<T>> {
    pub fn random(d: usize, heads: usize, std: f64, rng: &mut crate::rng::SeededRng) -> Result<Vec<Self>> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("D = {d} is not divisible by H = {heads}")));
        }
        (0..heads)
            .map(|_| {
                Ok(CatHeadParams {
                    w_a: Tensor::randn(Shape::matrix(d, 1)?, std, rng),
                    w_v: Tensor::randn(Shape::matrix(d, d / heads)?, std, rng),
                })
            })
            .collect()
    }
}

/// Options shared by every circulant mixer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CatOptions {
    pub path: ExecPath,
    pub orientation: Orientation,
    pub causal: bool,
    /// Multiply logits by `1/sqrt(D/H)` before the softmax.
    #[serde(default)]
    pub scale_logits: bool,
}

impl CatOptions {
    pub fn with_path(path: ExecPath) -> Self {
        Self {
            path,
            ..Self::default()
        }
    }
}

/// Logits and normalised weights of a kernel recorded on a tape, both `1×N`.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub logits: Var,
    pub weights: Var,
}

impl<T: Scalar> Tape<T> {
    /// Logits given as a column (`N×1`) or row (`1×N`); returns `1×N`
    /// logits and their softmax.
    pub fn kernel_from_logits(&self, z: Var, scale: Option<T>) -> Result<KernelVars> {
        let n = self.shape(z).numel();
        let mut logits = self.reshape(z, Shape::matrix(1, n)?)?;
        if let Some(s) = scale {
            logits = self.scale(logits, s)?;
        }
        let weights = self.softmax_rows(logits)?;
        Ok(KernelVars { logits, weights })
    }

    /// `N×N` circulant of a `1×N` (or length-N) generator.
    pub fn circulant_matrix(&self, w: Var, orientation: Orientation) -> Result<Var> {
        let wv = self.value(w);
        let n = wv.numel();
        let out = materialize(wv.data(), orientation)?;
        let shape = wv.shape().clone();
        Ok(self.record(out, &[w], move |g| {
            let mut dw = vec![T::zero(); n];
            for i in 0..n {
                for (j, &x) in g.row(i).iter().enumerate() {
                    let k = orientation.index(i, j, n);
                    dw[k] = dw[k] + x;
                }
            }
            Ok(vec![Some(Tensor::checked("circulant_matrix", shape.clone(), dw)?)])
        }))
    }

    /// Circulant product `M(w)·V` along `path`.
    pub fn circulant_mix(&self, w: Var, v: Var, orientation: Orientation, path: ExecPath) -> Result<Var> {
        if path == ExecPath::Explicit {
            let m = self.circulant_matrix(w, orientation)?;
            return self.matmul(m, v);
        }
        let (wv, vv) = (self.value(w), self.value(v));
        let out = mix(wv.data(), &vv, orientation, path)?;
        let wshape = wv.shape().clone();
        Ok(self.record(out, &[w, v], move |g| {
            let n = wv.numel();
            let d = vv.cols();
            let dv = mix(wv.data(), g, orientation.transposed(), path)?;
            let mut dw = vec![T::zero(); n];
            match path {
                ExecPath::Gather => {
                    for (m, acc) in dw.iter_mut().enumerate() {
                        for i in 0..n {
                            let src = orientation.source_row(i, m, n);
                            let s: T = g.row(i).iter().zip(vv.row(src)).map(|(&a, &b)| a * b).sum();
                            *acc = *acc + s;
                        }
                    }
                }
                _ => {
                    // ColShift: dw = Σ_c corr(v_c, g_c); RowShift: dw = Σ_c corr(g_c, v_c).
                    let (kern, input) = match orientation {
                        Orientation::ColShift => (&vv, g),
                        Orientation::RowShift => (g, &vv),
                    };
                    let kd = kern.data();
                    let id = input.data();
                    for c in 0..d {
                        let col: Vec<T> = (0..n).map(|i| kd[i * d + c]).collect();
                        let mut f = SpectralFilter::new(&col, true, residue_limit::<T>())?;
                        f.apply("cat_backward_fft", |i| id[i * d + c], |m, x| dw[m] = dw[m] + x)?;
                    }
                }
            }
            Ok(vec![
                Some(Tensor::checked("circulant_mix", wshape.clone(), dw)?),
                Some(dv),
            ])
        }))
    }

    /// Causal product from `1×N` logits.
    pub fn circulant_mix_causal(&self, logits: Var, v: Var, orientation: Orientation) -> Result<Var> {
        let m = self.circulant_matrix(logits, orientation)?;
        let p = self.softmax_rows_causal(m)?;
        self.matmul(p, v)
    }

    /// Kernel `softmax(x·w_a)` for one head.
    pub fn build_kernel(&self, x: Var, w_a: Var, scale: Option<T>) -> Result<KernelVars> {
        let z = self.matmul(x, w_a)?;
        self.kernel_from_logits(z, scale)
    }

    /// Mixes `v` with a kernel according to `opts` (causal uses the logits).
    pub fn apply_kernel(&self, k: KernelVars, v: Var, opts: &CatOptions) -> Result<Var> {
        if opts.causal {
            self.circulant_mix_causal(k.logits, v, opts.orientation)
        } else {
            self.circulant_mix(k.weights, v, opts.orientation, opts.path)
        }
    }

    /// Multi-head CAT: head `h` builds its kernel from `x·w_a[h]` and mixes
    /// `x·w_v[h]`; head outputs are concatenated along columns.
    pub fn multihead_cat(&self, x: Var, heads: &[CatHeadParams<Var>], opts: &CatOptions) -> Result<Var> {
        let d = self.shape(x).as_matrix().1;
        let h = heads.len();
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::invalid(format!("D = {d} is not divisible by H = {h}")));
        }
        let scale = opts
            .scale_logits
            .then(|| T::one() / T::of(((d / h) as f64).sqrt()));
        let mut outs = Vec::with_capacity(h);
        for head in heads {
            if self.shape(head.w_v).as_matrix() != (d, d / h) {
                return Err(Error::ShapeMismatch {
                    op: "multihead_cat",
                    lhs: self.shape(x),
                    rhs: self.shape(head.w_v),
                });
            }
            let k = self.build_kernel(x, head.w_a, scale)?;
            let v = self.matmul(x, head.w_v)?;
            outs.push(self.apply_kernel(k, v, opts)?);
        }
        self.concat_cols(&outs)
    }
}

/// Value-level multi-head CAT in the default (`ColShift`) orientation
/// unless `orientation` says otherwise.
pub fn multihead_cat_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &[CatHeadParams<Tensor<T>>],
    path: ExecPath,
    orientation: Orientation,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let heads: Vec<CatHeadParams<Var>> = params.iter().map(|p| p.map(|t| tape.constant(t.clone()))).collect();
    let opts = CatOptions {
        path,
        orientation,
        ..CatOptions::default()
    };
    let out = tape.multihead_cat(xv, &heads, &opts)?;
    Ok(tape.value(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Attention,
    Cat,
}

/// Attention coefficients produced per layer: `H·N²` for attention, `H·N` for CAT.
pub fn count_attention_coefficients(n: u64, heads: u64, kind: CoefficientKind) -> u64 {
    match kind {
        CoefficientKind::Attention => heads * n * n,
        CoefficientKind::Cat => heads * n,
    }
}

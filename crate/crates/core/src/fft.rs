//! Complex FFT for arbitrary lengths and real circular convolution/correlation.
//!
//! Convention: the forward transform is unnormalised,
//! `X_k = Σ_n x_n e^{-2πi kn/L}`, and the inverse carries the `1/L` factor.
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through Bluestein's chirp-z reformulation on a power-of-two
//! convolution of length `M >= 2L - 1`.
//!
//! Real inputs are promoted to complex; there is no dedicated real FFT.

use std::any::{Any, TypeId};
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::meter::Buf;
use crate::tensor::Scalar;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

fn count_multiplies(n: usize) {
    MULTIPLIES.with(|c| c.set(c.get() + n as u64));
}

/// Complex multiplications performed by transforms on this thread since the
/// last [`reset_multiply_count`].
pub fn multiply_count() -> u64 {
    MULTIPLIES.with(|c| c.get())
}

pub fn reset_multiply_count() {
    MULTIPLIES.with(|c| c.set(0));
}

/// Split real/imaginary storage, the public exchange format for transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVector<T: Scalar = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexVector<T> {
    pub fn new(re: Vec<T>, im: Vec<T>) -> Result<Self> {
        if re.len() != im.len() || re.is_empty() {
            return Err(Error::invalid(format!(
                "complex vector parts must have equal nonzero length ({} vs {})",
                re.len(),
                im.len()
            )));
        }
        if !re.iter().chain(&im).all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                op: "complex_vector",
            });
        }
        Ok(Self { re, im })
    }

    pub fn from_real(re: Vec<T>) -> Result<Self> {
        let im = vec![T::zero(); re.len()];
        Self::new(re, im)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn norm_sqr(&self) -> T {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| r * r + i * i)
            .sum()
    }

    fn to_complex(&self) -> Vec<Complex<T>> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex::new(re, im))
            .collect()
    }

    fn from_complex(v: &[Complex<T>]) -> Self {
        Self {
            re: v.iter().map(|c| c.re).collect(),
            im: v.iter().map(|c| c.im).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Radix2,
    Bluestein,
}

enum Kernel<T: Scalar> {
    Radix2 {
        twiddles: Vec<Complex<T>>,
        bitrev: Vec<usize>,
    },
    Bluestein {
        inner: Box<FftPlan<T>>,
        chirp: Vec<Complex<T>>,
        filter_spectrum: Vec<Complex<T>>,
    },
}

/// Precomputed transform of one length. Immutable and shareable.
pub struct FftPlan<T: Scalar = f64> {
    len: usize,
    kernel: Kernel<T>,
}

fn unit(angle: f64) -> (f64, f64) {
    (angle.cos(), angle.sin())
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("fft length must be at least 1"));
        }
        if len.is_power_of_two() {
            let bits = len.trailing_zeros();
            let twiddles = (0..len / 2)
                .map(|k| {
                    let (c, s) = unit(-std::f64::consts::TAU * k as f64 / len as f64);
                    Complex::new(T::of(c), T::of(s))
                })
                .collect();
            let bitrev = (0..len)
                .map(|i| {
                    if bits == 0 {
                        0
                    } else {
                        i.reverse_bits() >> (usize::BITS - bits)
                    }
                })
                .collect();
            return Ok(Self {
                len,
                kernel: Kernel::Radix2 { twiddles, bitrev },
            });
        }
        let m = (2 * len - 1).next_power_of_two();
        let inner = FftPlan::new(m)?;
        // n^2 mod 2L keeps the chirp angle small for large n.
        let two_l = 2 * len as u128;
        let chirp: Vec<Complex<T>> = (0..len)
            .map(|n| {
                let q = (n as u128 * n as u128) % two_l;
                let (c, s) = unit(-std::f64::consts::PI * q as f64 / len as f64);
                Complex::new(T::of(c), T::of(s))
            })
            .collect();
        let mut filter = vec![Complex::new(T::zero(), T::zero()); m];
        filter[0] = chirp[0].conj();
        for n in 1..len {
            filter[n] = chirp[n].conj();
            filter[m - n] = chirp[n].conj();
        }
        inner.transform(&mut filter, false);
        Ok(Self {
            len,
            kernel: Kernel::Bluestein {
                inner: Box::new(inner),
                chirp,
                filter_spectrum: filter,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn strategy(&self) -> Strategy {
        match self.kernel {
            Kernel::Radix2 { .. } => Strategy::Radix2,
            Kernel::Bluestein { .. } => Strategy::Bluestein,
        }
    }

    /// In-place unnormalised forward transform (`inverse = false`) or
    /// inverse transform including the `1/L` factor.
    pub(crate) fn transform(&self, data: &mut [Complex<T>], inverse: bool) {
        debug_assert_eq!(data.len(), self.len);
        if inverse {
            data.iter_mut().for_each(|c| *c = c.conj());
        }
        match &self.kernel {
            Kernel::Radix2 { twiddles, bitrev } => radix2(data, twiddles, bitrev),
            Kernel::Bluestein {
                inner,
                chirp,
                filter_spectrum,
            } => {
                let m = inner.len;
                let mut work = Buf::filled(Complex::new(T::zero(), T::zero()), m, 2);
                for (w, (&x, &c)) in work.iter_mut().zip(data.iter().zip(chirp)) {
                    *w = x * c;
                }
                inner.transform(&mut work, false);
                for (w, &f) in work.iter_mut().zip(filter_spectrum) {
                    *w = *w * f;
                }
                inner.transform(&mut work, true);
                for (k, out) in data.iter_mut().enumerate() {
                    *out = work[k] * chirp[k];
                }
                count_multiplies(2 * self.len + m);
            }
        }
        if inverse {
            let inv = T::one() / T::of(self.len as f64);
            data.iter_mut().for_each(|c| *c = c.conj() * inv);
        }
    }
}

fn radix2<T: Scalar>(data: &mut [Complex<T>], twiddles: &[Complex<T>], bitrev: &[usize]) {
    let n = data.len();
    for i in 0..n {
        let j = bitrev[i];
        if i < j {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * stride];
                let u = data[start + j];
                let v = data[start + j + half] * w;
                data[start + j] = u + v;
                data[start + j + half] = u - v;
            }
        }
        count_multiplies(n / 2);
        len *= 2;
    }
}

type PlanCache = Mutex<HashMap<(TypeId, usize), Arc<dyn Any + Send + Sync>>>;

/// Shared plan for `len`, built on first use.
pub fn plan<T: Scalar>(len: usize) -> Result<Arc<FftPlan<T>>> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (TypeId::of::<T>(), len);
    if let Some(p) = cache.lock().expect("plan cache poisoned").get(&key) {
        return Ok(Arc::clone(p)
            .downcast::<FftPlan<T>>()
            .expect("plan cache keyed by type"));
    }
    let built = Arc::new(FftPlan::<T>::new(len)?);
    cache
        .lock()
        .expect("plan cache poisoned")
        .insert(key, built.clone() as Arc<dyn Any + Send + Sync>);
    Ok(built)
}

fn check_len<T: Scalar>(plan: &FftPlan<T>, x: &ComplexVector<T>) -> Result<()> {
    if x.len() != plan.len() {
        return Err(Error::invalid(format!(
            "fft: input length {} does not match plan length {}",
            x.len(),
            plan.len()
        )));
    }
    Ok(())
}

pub fn fft_forward<T: Scalar>(plan: &FftPlan<T>, x: &ComplexVector<T>) -> Result<ComplexVector<T>> {
    check_len(plan, x)?;
    let mut data = x.to_complex();
    plan.transform(&mut data, false);
    Ok(ComplexVector::from_complex(&data))
}

pub fn fft_inverse<T: Scalar>(plan: &FftPlan<T>, x: &ComplexVector<T>) -> Result<ComplexVector<T>> {
    check_len(plan, x)?;
    let mut data = x.to_complex();
    plan.transform(&mut data, true);
    Ok(ComplexVector::from_complex(&data))
}

/// Applies a fixed real kernel to many real vectors of the same length
/// through its spectrum. Holds one spectrum and one work buffer.
pub(crate) struct SpectralFilter<T: Scalar> {
    plan: Arc<FftPlan<T>>,
    spectrum: Buf<Complex<T>>,
    work: Buf<Complex<T>>,
    residue_limit: f64,
}

impl<T: Scalar> SpectralFilter<T> {
    /// `correlate = false` computes `c_i = Σ_j z[(i-j) mod N] v_j`;
    /// `correlate = true` computes `c_i = Σ_j z[(j-i) mod N] v_j`.
    pub(crate) fn new(kernel: &[T], correlate: bool, residue_limit: f64) -> Result<Self> {
        let n = kernel.len();
        let plan = plan::<T>(n)?;
        let mut spectrum = Buf::new(
            kernel.iter().map(|&z| Complex::new(z, T::zero())).collect(),
            2,
        );
        plan.transform(&mut spectrum, false);
        if correlate {
            spectrum.iter_mut().for_each(|c| *c = c.conj());
        }
        let work = Buf::filled(Complex::new(T::zero(), T::zero()), n, 2);
        Ok(Self {
            plan,
            spectrum,
            work,
            residue_limit,
        })
    }

    /// Filters the vector produced by `load(i)`, passing results to `store(i, c_i)`.
    pub(crate) fn apply(
        &mut self,
        op: &'static str,
        load: impl Fn(usize) -> T,
        mut store: impl FnMut(usize, T),
    ) -> Result<()> {
        for (i, w) in self.work.iter_mut().enumerate() {
            *w = Complex::new(load(i), T::zero());
        }
        self.plan.transform(&mut self.work, false);
        for (w, &s) in self.work.iter_mut().zip(self.spectrum.iter()) {
            *w = *w * s;
        }
        count_multiplies(self.work.len());
        self.plan.transform(&mut self.work, true);
        let scale = self
            .work
            .iter()
            .fold(1.0f64, |m, c| m.max(c.re.abs().as_f64()));
        let residue = self
            .work
            .iter()
            .fold(0.0f64, |m, c| m.max(c.im.abs().as_f64()))
            / scale;
        if !(residue <= self.residue_limit) {
            return Err(Error::ImaginaryResidue {
                op,
                residue,
                limit: self.residue_limit,
            });
        }
        for (i, c) in self.work.iter().enumerate() {
            store(i, c.re);
        }
        Ok(())
    }
}

/// Residue threshold for the standalone convolution helpers.
pub const RESIDUE_LIMIT_F64: f64 = 1e-10;
const RESIDUE_LIMIT_F32: f64 = 1e-4;

pub(crate) fn default_residue_limit<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        RESIDUE_LIMIT_F64
    } else {
        RESIDUE_LIMIT_F32
    }
}

fn filter_real<T: Scalar>(z: &[T], v: &[T], correlate: bool) -> Result<Vec<T>> {
    if z.len() != v.len() || z.is_empty() {
        return Err(Error::invalid(format!(
            "circular filter: lengths {} and {} must be equal and nonzero",
            z.len(),
            v.len()
        )));
    }
    let op = if correlate {
        "circular_correlate"
    } else {
        "circular_convolve"
    };
    let mut f = SpectralFilter::new(z, correlate, default_residue_limit::<T>())?;
    let mut out = vec![T::zero(); v.len()];
    f.apply(op, |i| v[i], |i, c| out[i] = c)?;
    Ok(out)
}

/// `c_i = Σ_j z[(i-j) mod N] v_j`, computed as `IFFT(FFT(z) ⊙ FFT(v))`.
pub fn circular_convolve<T: Scalar>(z: &[T], v: &[T]) -> Result<Vec<T>> {
    filter_real(z, v, false)
}

/// `c_i = Σ_j z[(j-i) mod N] v_j`, computed as `IFFT(conj(FFT(z)) ⊙ FFT(v))`.
pub fn circular_correlate<T: Scalar>(z: &[T], v: &[T]) -> Result<Vec<T>> {
    filter_real(z, v, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::SeededRng;

    fn random_cv(n: usize, rng: &mut SeededRng) -> ComplexVector {
        ComplexVector::new(
            (0..n).map(|_| rng.normal()).collect(),
            (0..n).map(|_| rng.normal()).collect(),
        )
        .unwrap()
    }

    fn rel(a: &ComplexVector, b: &ComplexVector) -> f64 {
        let num: f64 = a
            .re
            .iter()
            .zip(&b.re)
            .chain(a.im.iter().zip(&b.im))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        (num / b.norm_sqr().max(1e-300)).sqrt()
    }

    #[test]
    fn strategy_by_length() {
        assert_eq!(FftPlan::<f64>::new(1).unwrap().strategy(), Strategy::Radix2);
        assert_eq!(FftPlan::<f64>::new(64).unwrap().strategy(), Strategy::Radix2);
        assert_eq!(
            FftPlan::<f64>::new(12).unwrap().strategy(),
            Strategy::Bluestein
        );
        assert!(FftPlan::<f64>::new(0).is_err());
    }

    #[test]
    fn delta_and_constant() {
        let p = FftPlan::new(4).unwrap();
        let delta = ComplexVector::from_real(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let spec = fft_forward(&p, &delta).unwrap();
        assert_eq!(spec.re, vec![1.0; 4]);
        assert_eq!(spec.im, vec![0.0; 4]);
        let back = fft_inverse(&p, &spec).unwrap();
        assert_eq!(back, delta);
        let ones = ComplexVector::from_real(vec![1.0; 4]).unwrap();
        let spec = fft_forward(&p, &ones).unwrap();
        assert_eq!(spec.re, vec![4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bluestein_matches_naive_dft() {
        let mut rng = SeededRng::new(12);
        for n in [3, 5, 6, 7, 12, 100, 196] {
            let x = random_cv(n, &mut rng);
            let p = FftPlan::new(n).unwrap();
            let got = fft_forward(&p, &x).unwrap();
            let want = oracle::naive_dft(&x, false);
            assert!(rel(&got, &want) < 1e-10, "n={n}");
        }
    }

    #[test]
    fn round_trip_257() {
        let mut rng = SeededRng::new(257);
        let x = random_cv(257, &mut rng);
        let p = FftPlan::new(257).unwrap();
        let back = fft_inverse(&p, &fft_forward(&p, &x).unwrap()).unwrap();
        assert!(rel(&back, &x) < 1e-10);
    }

    #[test]
    fn length_mismatch_is_error() {
        let p = FftPlan::<f64>::new(4).unwrap();
        let x = ComplexVector::from_real(vec![1.0; 3]).unwrap();
        assert!(fft_forward(&p, &x).is_err());
        assert!(fft_inverse(&p, &x).is_err());
    }

    #[test]
    fn convolve_and_correlate_shift_kernels() {
        let v = [1.0, 2.0, 3.0];
        let c = circular_convolve(&[1.0, 0.0, 0.0], &v).unwrap();
        assert!(rel_err(&c, &v) < 1e-15);
        let c = circular_convolve(&[0.0, 1.0, 0.0], &v).unwrap();
        assert!(rel_err(&c, &[3.0, 1.0, 2.0]) < 1e-15);
        let c = circular_correlate(&[0.0, 1.0, 0.0], &v).unwrap();
        assert!(rel_err(&c, &[2.0, 3.0, 1.0]) < 1e-15);
        let c = circular_correlate(&[1.0, 0.0, 0.0], &v).unwrap();
        assert!(rel_err(&c, &v) < 1e-15);
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        crate::tensor::rel_err_slices(a, b, 1e-12)
    }

    #[test]
    fn multiply_count_grows_n_log_n() {
        let count = |n: usize| {
            let p = FftPlan::<f64>::new(n).unwrap();
            let mut data = vec![Complex::new(1.0, 0.0); n];
            reset_multiply_count();
            p.transform(&mut data, false);
            multiply_count()
        };
        for n in [256usize, 512, 1024, 4096] {
            let ratio = count(2 * n) as f64 / count(n) as f64;
            assert!(ratio <= 2.5, "n={n} ratio={ratio}");
        }
    }

    #[test]
    fn f32_plans_work() {
        let z: Vec<f32> = vec![0.25, 0.5, 0.25];
        let v: Vec<f32> = vec![1.0, 2.0, 3.0];
        let c = circular_convolve(&z, &v).unwrap();
        let want = oracle::circular_convolve_naive(&z, &v);
        for (a, b) in c.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

//! Circular-convolutional attention (CAT).
//!
//! A CAT head projects the input to one logit per position, applies a
//! softmax, and uses the resulting length-N vector as the generator of a
//! circulant mixing matrix. The matrix is never needed in full: the same
//! product is available through rolled gathers or through an FFT-based
//! circular convolution in `O(N log N)`.
//!
//! Modules, bottom up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: dense tensors and reverse-mode gradients
//! * [`fft`]: radix-2 and Bluestein transforms, circular convolution/correlation
//! * [`circulant`]: kernels, the three execution paths, causal and multi-head forms
//! * [`variants`]: standard attention, GQA, the four circulant parameterisations
//! * [`model`]: toy transformer, objectives, AdamW, synthetic tasks
//! * [`bench`]: timing, allocation accounting, scaling sweeps, cost model
//! * [`maps`]: attention-map export as binary PGM images

pub mod bench;
pub mod circulant;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod maps;
pub mod meter;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod serialize;
pub mod tape;
pub mod tensor;
pub mod variants;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Shape, Tensor};

//! Transient-allocation accounting.
//!
//! Every tensor buffer and FFT work buffer reports its scalar count here
//! (a complex number counts as two scalars). [`measure`] reports the
//! high-water mark of live scalars and the largest single buffer allocated
//! while a closure runs. State is thread-local, so concurrent tests do not
//! interfere.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

#[derive(Clone, Copy, Default)]
struct State {
    live: usize,
    peak: usize,
    largest: usize,
}

thread_local! {
    static STATE: Cell<State> = Cell::new(State::default());
}

fn track(n: usize) {
    STATE.with(|s| {
        let mut st = s.get();
        st.live += n;
        st.peak = st.peak.max(st.live);
        st.largest = st.largest.max(n);
        s.set(st);
    });
}

fn release(n: usize) {
    STATE.with(|s| {
        let mut st = s.get();
        st.live = st.live.saturating_sub(n);
        s.set(st);
    });
}

/// Usage observed during one [`measure`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Usage {
    /// High-water mark of live scalars above the level at entry.
    pub peak_scalars: usize,
    /// Largest single buffer (in scalars) allocated inside the closure.
    pub largest_alloc: usize,
}

pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Usage) {
    let outer = STATE.with(|s| s.get());
    STATE.with(|s| {
        s.set(State {
            live: outer.live,
            peak: outer.live,
            largest: 0,
        })
    });
    let out = f();
    let inner = STATE.with(|s| s.get());
    STATE.with(|s| {
        s.set(State {
            live: inner.live,
            peak: outer.peak.max(inner.peak),
            largest: outer.largest.max(inner.largest),
        })
    });
    let usage = Usage {
        peak_scalars: inner.peak - outer.live,
        largest_alloc: inner.largest,
    };
    (out, usage)
}

/// Scalars currently live on this thread.
pub fn live_scalars() -> usize {
    STATE.with(|s| s.get().live)
}

/// A `Vec` whose size is reported to the meter for its whole lifetime.
#[derive(Debug)]
pub struct Buf<E> {
    data: Vec<E>,
    scalars: usize,
}

impl<E> Buf<E> {
    /// `per_elem` is the number of real scalars one element holds.
    pub fn new(data: Vec<E>, per_elem: usize) -> Self {
        let scalars = data.len() * per_elem;
        track(scalars);
        Self { data, scalars }
    }
}

impl<E: Clone> Buf<E> {
    pub fn filled(value: E, len: usize, per_elem: usize) -> Self {
        Self::new(vec![value; len], per_elem)
    }
}

impl<E> Drop for Buf<E> {
    fn drop(&mut self) {
        release(self.scalars);
    }
}

impl<E> Deref for Buf<E> {
    type Target = [E];
    fn deref(&self) -> &[E] {
        &self.data
    }
}

impl<E> DerefMut for Buf<E> {
    fn deref_mut(&mut self) -> &mut [E] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_largest() {
        let ((), usage) = measure(|| {
            let a = Buf::filled(0.0f64, 100, 1);
            {
                let _b = Buf::filled(0.0f64, 50, 2);
            }
            let _c = Buf::filled(0.0f64, 10, 1);
            drop(a);
        });
        assert_eq!(usage.peak_scalars, 200);
        assert_eq!(usage.largest_alloc, 100);
    }

    #[test]
    fn nested_measure_propagates_peak() {
        let (inner, outer) = measure(|| {
            let _keep = Buf::filled(0u8, 10, 1);
            let ((), inner) = measure(|| {
                let _x = Buf::filled(0u8, 30, 1);
            });
            inner
        });
        assert_eq!(inner.peak_scalars, 30);
        assert_eq!(outer.peak_scalars, 40);
    }
}

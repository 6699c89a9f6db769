//! Branch signatures of piecewise operations.
//!
//! Finite-difference checks are only exact when the perturbed evaluations take
//! the same side of every kink (`relu`, `leaky_relu`, `abs`) as the base point.
//! [`signature`] runs a closure and fingerprints every such decision made on
//! the current thread, so a check can tell when a step crossed one.

use std::cell::Cell;

use crate::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

thread_local! {
    static ACTIVE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns its result with a hash of all kink-side decisions.
///
/// Nested calls each see only their own decisions.
pub fn signature<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = ACTIVE.with(|a| a.replace(Some(FNV_OFFSET)));
    let r = f();
    let h = ACTIVE.with(|a| a.replace(outer)).unwrap_or(FNV_OFFSET);
    (r, h)
}

pub(crate) fn note(input: &Tensor) {
    ACTIVE.with(|a| {
        if let Some(mut h) = a.get() {
            for v in input.data() {
                h = (h ^ u64::from(*v > 0.0)).wrapping_mul(FNV_PRIME);
            }
            a.set(Some(h));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Var;

    #[test]
    fn sign_flips_change_the_signature() {
        let run = |v: f64| signature(|| Var::constant(Tensor::new(&[2], vec![v, 1.0])).relu()).1;
        assert_eq!(run(0.3), run(0.7));
        assert_ne!(run(0.3), run(-0.3));
        let (_, empty) = signature(|| Var::constant(Tensor::scalar(1.0)).square());
        assert_eq!(empty, FNV_OFFSET);
    }
}

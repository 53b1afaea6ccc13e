//! Mutation hook for testing the gradient checker: while an [`Injection`]
//! guard is alive, the named backward kernel negates its result on the
//! current thread. Nothing is injected unless a test asks for it.

use std::cell::Cell;

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    ConvInput,
    ConvWeight,
    ConvBias,
    Relu,
    Pool,
    CorrMaps,
    FsesimL1,
    FsesimCos,
    InfoNce,
}

impl Kernel {
    pub const ALL: [Kernel; 9] = [
        Kernel::ConvInput,
        Kernel::ConvWeight,
        Kernel::ConvBias,
        Kernel::Relu,
        Kernel::Pool,
        Kernel::CorrMaps,
        Kernel::FsesimL1,
        Kernel::FsesimCos,
        Kernel::InfoNce,
    ];
}

thread_local! {
    static ACTIVE: Cell<Option<Kernel>> = const { Cell::new(None) };
}

/// Restores the previous injection state on drop.
#[must_use]
pub struct Injection(Option<Kernel>);

impl Drop for Injection {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(self.0));
    }
}

pub fn inject(kernel: Kernel) -> Injection {
    Injection(ACTIVE.with(|a| a.replace(Some(kernel))))
}

pub(crate) fn flip<T: Real>(kernel: Kernel, values: &mut [T]) {
    if ACTIVE.with(|a| a.get()) == Some(kernel) {
        values.iter_mut().for_each(|v| *v = T::zero() - *v);
    }
}

//! Per-thread reusable buffers for im2col matrices, which are large enough
//! that fresh allocations would dominate small convolutions.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;

thread_local! {
    static POOL: RefCell<HashMap<TypeId, Box<dyn Any>>> = RefCell::new(HashMap::new());
}

fn take<T: Copy + Default + 'static>() -> Vec<T> {
    POOL.with(|p| {
        p.borrow_mut()
            .get_mut(&TypeId::of::<T>())
            .and_then(|b| b.downcast_mut::<Vec<Vec<T>>>())
            .and_then(Vec::pop)
            .unwrap_or_default()
    })
}

fn give<T: Copy + Default + 'static>(buf: Vec<T>) {
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        let entry = p.entry(TypeId::of::<T>()).or_insert_with(|| Box::new(Vec::<Vec<T>>::new()));
        if let Some(stack) = entry.downcast_mut::<Vec<Vec<T>>>() {
            stack.push(buf);
        }
    })
}

/// Runs `f` with a buffer of `len` elements whose contents are unspecified.
pub(crate) fn with_buffer<T: Copy + Default + 'static, R>(len: usize, f: impl FnOnce(&mut [T]) -> R) -> R {
    let mut buf = take::<T>();
    if buf.len() < len {
        buf.resize(len, T::default());
    }
    let out = f(&mut buf[..len]);
    give(buf);
    out
}

//! Shared fixtures for the benchmarks.

use dwislice_core::phantom::{make_phantom, Phantom, PhantomSpec};

pub fn phantom(dims: [usize; 3], directions: usize) -> Phantom {
    make_phantom(&PhantomSpec {
        dims,
        n_directions: directions,
        ..PhantomSpec::default()
    })
    .expect("valid phantom spec")
}

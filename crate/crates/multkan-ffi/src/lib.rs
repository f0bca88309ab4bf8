//! C ABI surface for multkan. Populated alongside the core library.

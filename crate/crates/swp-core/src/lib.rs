//! Stripe-wise pruning toolkit: filter-skeleton training, L1 skeleton
//! sparsity with threshold freezing, stripe extraction, exact stripe-wise
//! sparse inference, cost accounting, and a serialized model format.

pub mod aux;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod format;
pub mod fsconv;
pub mod net;
pub mod prune;
pub mod sparsity;
pub mod stripe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ElemOp, Tensor2, Tensor4};

pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod phantom;
pub mod projection;
pub mod tensor;
pub mod tolerance;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use phantom::{ClassLabel, ClassMix, PhantomSpec, StyleShiftParams};
pub use projection::{drr, Plane};
pub use tensor::{Precision, Real, Tape, Tensor, Var};
pub use volume::{PairedDataset, UnpairedXraySet, Volume, XrayImage};

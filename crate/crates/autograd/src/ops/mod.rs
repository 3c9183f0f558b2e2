mod conv;
mod elementwise;
mod linalg;
pub(crate) mod reduce;
mod resample;

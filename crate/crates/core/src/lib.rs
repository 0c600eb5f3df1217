//! Motor-imagery EEG decoding across heterogeneous electrode layouts.

pub mod numerics;
pub mod montage;
pub mod dsp;
pub mod adapter;
pub mod decoder;
pub mod data;
pub mod skeleton;
pub mod training;

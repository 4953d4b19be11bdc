//! Shared fixtures for the kernel benchmarks.

use supermask_core::{
    masking::{self, MaskMode},
    sparse::{self, TernaryCSR},
    SeededRng, Tensor,
};

/// Standard-normal tensor of the given shape.
pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.normal())
}

/// Ternary mask keeping roughly `keep` of the entries.
pub fn ternary(shape: &[usize], keep: f64, seed: u64) -> Tensor {
    let scores = {
        let mut r = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| r.symmetric(1.0))
    };
    masking::quantize_scores(&scores, keep - 1.0, 1.0 - keep, MaskMode::Signed)
}

/// Signed-constant `rows × cols` layer exported at the given density.
pub fn sparse_layer(rows: usize, cols: usize, keep: f64, seed: u64) -> TernaryCSR {
    let w = Tensor::full([rows, cols], 0.05);
    sparse::export("bench", &w, &ternary(&[rows, cols], keep, seed)).expect("ternary mask")
}

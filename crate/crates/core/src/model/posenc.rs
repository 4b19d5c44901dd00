/// Fixed 2-D sine/cosine table: the first half of `dim` encodes the time
/// index, the second half the frequency index. `dim` must be a multiple of 4.
pub fn sincos_2d(dim: usize, coords: &[(usize, usize)]) -> crate::tensor::Tensor {
    assert!(dim % 4 == 0, "position dimension {dim} is not a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10_000f64.powf(k as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(t, f) in coords {
        for pos in [t as f64, f as f64] {
            data.extend(omega.iter().map(|w| (pos * w).sin()));
            data.extend(omega.iter().map(|w| (pos * w).cos()));
        }
    }
    crate::tensor::Tensor::matrix(coords.len(), dim, data).expect("position table shape")
}

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Fixed sinusoidal embedding of the feature grid, shape `[h * w, c]`.
///
/// The first `c / 2` channels encode the row and the last `c / 2` the column.
/// Within each half, channel pair `(2i, 2i + 1)` holds `sin` and `cos` of
/// `pos / 10000^(2i / (c / 2))`.
pub fn build_positional_embedding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!(
            "positional embedding width {c} must be a positive multiple of 4"
        )));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                for &f in &freqs {
                    let (s, co) = (pos * f).sin_cos();
                    data.push(s);
                    data.push(co);
                }
            }
        }
    }
    Tensor::new(vec![h * w, c], data)
}

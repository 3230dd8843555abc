//! Coordinate channels for translation-variant convolutions.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalised `x`/`y` position channels of an `height × width` map, in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`; varies along columns only.
    pub x_ch: Vec<f64>,
    /// Row-major `height × width`; varies along rows only.
    pub y_ch: Vec<f64>,
}

fn linspace_coord(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

pub fn make_coord_grid(height: usize, width: usize) -> Result<CoordGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "coordinate grid needs positive dims, got {height}×{width}"
        )));
    }
    let mut x_ch = Vec::with_capacity(height * width);
    let mut y_ch = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            x_ch.push(linspace_coord(j, width));
            y_ch.push(linspace_coord(i, height));
        }
    }
    Ok(CoordGrid {
        height,
        width,
        x_ch,
        y_ch,
    })
}

impl CoordGrid {
    /// `[batch, 2, H, W]` tensor holding the grid (or zeros) for every image.
    pub fn batch_tensor(&self, batch: usize, zeroed: bool) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(batch * 2 * plane);
        for _ in 0..batch {
            if zeroed {
                data.extend(std::iter::repeat_n(0.0, 2 * plane));
            } else {
                data.extend_from_slice(&self.x_ch);
                data.extend_from_slice(&self.y_ch);
            }
        }
        Tensor::new(&[batch, 2, self.height, self.width], data).expect("grid shape")
    }
}

/// How a convolution treats its coordinate channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordMode {
    /// Plain convolution; the weight has no coordinate inputs.
    Off,
    /// Appends the coordinate grid as two extra input channels.
    Active,
    /// Appends two all-zero channels (ablation with identical weight shapes).
    Zeroed,
}

/// Convolution whose input is the feature map concatenated with its coordinate grid.
pub fn coord_conv(
    g: &mut Graph,
    features: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    mode: CoordMode,
) -> Result<Var> {
    let input = match mode {
        CoordMode::Off => features,
        CoordMode::Active | CoordMode::Zeroed => {
            let (n, _, h, w) = g.value(features).dims4();
            let grid = make_coord_grid(h, w)?.batch_tensor(n, mode == CoordMode::Zeroed);
            let grid = g.constant(grid);
            g.concat_channels(&[features, grid])?
        }
    };
    g.conv2d(input, weight, bias, stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_and_small_grids() {
        let g = make_coord_grid(1, 1).unwrap();
        assert_eq!(
            (g.x_ch.as_slice(), g.y_ch.as_slice()),
            (&[0.0][..], &[0.0][..])
        );
        let g = make_coord_grid(2, 2).unwrap();
        assert_eq!(g.x_ch, vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(g.y_ch, vec![-1.0, -1.0, 1.0, 1.0]);
        let g = make_coord_grid(1, 3).unwrap();
        assert_eq!(g.x_ch, vec![-1.0, 0.0, 1.0]);
        assert!(make_coord_grid(0, 3).is_err());
    }

    #[test]
    fn corners_are_exactly_unit() {
        for (h, w) in [(2, 7), (5, 3), (64, 64), (13, 2)] {
            let g = make_coord_grid(h, w).unwrap();
            assert_eq!(g.x_ch[0], -1.0);
            assert_eq!(g.x_ch[w - 1], 1.0);
            assert_eq!(g.y_ch[0], -1.0);
            assert_eq!(g.y_ch[(h - 1) * w], 1.0);
            // x constant down each column, y constant along each row
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(g.x_ch[i * w + j], g.x_ch[j]);
                    assert_eq!(g.y_ch[i * w + j], g.y_ch[i * w]);
                }
            }
        }
    }

    #[test]
    fn coord_conv_widens_input_by_two_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 5, 4]));
        let w = g.constant(Tensor::full(&[2, 5, 3, 3], 0.1));
        let y = coord_conv(&mut g, x, w, None, 1, 1, CoordMode::Active).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 5, 4]);
        let w_plain = g.constant(Tensor::full(&[2, 3, 3, 3], 0.1));
        assert!(coord_conv(&mut g, x, w_plain, None, 1, 1, CoordMode::Active).is_err());
    }

    #[test]
    fn identity_weights_reproduce_the_grid() {
        let (c, h, w) = (3, 4, 6);
        let mut weight = Tensor::zeros(&[2, c + 2, 1, 1]);
        weight.data_mut()[c] = 1.0; // out 0 <- x channel
        weight.data_mut()[(c + 2) + c + 1] = 1.0; // out 1 <- y channel
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, c, h, w], 0.7));
        let wv = g.constant(weight);
        let y = coord_conv(&mut g, x, wv, None, 1, 0, CoordMode::Active).unwrap();
        let grid = make_coord_grid(h, w).unwrap();
        let out = g.value(y).data();
        assert_eq!(&out[..h * w], grid.x_ch.as_slice());
        assert_eq!(&out[h * w..], grid.y_ch.as_slice());
    }

    #[test]
    fn zero_input_still_varies_with_position() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 0.5, -0.25]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![0.1]).unwrap());
        let y = coord_conv(&mut g, x, w, Some(b), 1, 0, CoordMode::Active).unwrap();
        let out = g.value(y).data();
        assert_ne!(out[0], out[15]);
        let z = coord_conv(&mut g, x, w, Some(b), 1, 0, CoordMode::Zeroed).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.1));
    }
}

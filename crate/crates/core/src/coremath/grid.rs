use super::Vec2;

/// Dense row-major, channel-last image of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// The four texel indices and weights of one bilinear lookup, plus the
/// derivative of each weight with respect to the lookup coordinate.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub d_weight_dx: [f64; 4],
    pub d_weight_dy: [f64; 4],
}

impl Grid {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn texel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = self.texel_index(x, y) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.texel_index(x, y) * self.channels;
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Clamp-to-edge bilinear taps; texel `(i, j)` sits at coordinate `(j, i)`.
    pub fn taps(&self, xy: Vec2) -> BilinearTaps {
        let (x0, fx, gx) = axis(xy.x, self.width);
        let (y0, fy, gy) = axis(xy.y, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        BilinearTaps {
            index: [
                self.texel_index(x0, y0),
                self.texel_index(x1, y0),
                self.texel_index(x0, y1),
                self.texel_index(x1, y1),
            ],
            weight: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            d_weight_dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
            d_weight_dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
        }
    }

    pub fn sample_taps(&self, taps: &BilinearTaps, out: &mut [f64]) {
        out.fill(0.0);
        let c = self.channels;
        for k in 0..4 {
            let w = taps.weight[k];
            if w == 0.0 {
                continue;
            }
            let base = taps.index[k] * c;
            for (o, v) in out.iter_mut().zip(&self.data[base..base + c]) {
                *o += w * v;
            }
        }
    }

    pub fn sample(&self, xy: Vec2) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        bilinear_sample(self, xy, &mut out);
        out
    }

    /// Gradient of the sampled value with respect to the coordinate,
    /// contracted with `d_out`.
    pub fn coord_grad(&self, taps: &BilinearTaps, d_out: &[f64]) -> Vec2 {
        let c = self.channels;
        let mut g = Vec2::zeros();
        for k in 0..4 {
            let base = taps.index[k] * c;
            let dot: f64 = self.data[base..base + c].iter().zip(d_out).map(|(a, b)| a * b).sum();
            g.x += taps.d_weight_dx[k] * dot;
            g.y += taps.d_weight_dy[k] * dot;
        }
        g
    }

    /// Scatters `d_out` back onto the texels touched by `taps`.
    pub fn scatter(&mut self, taps: &BilinearTaps, d_out: &[f64]) {
        let c = self.channels;
        for k in 0..4 {
            let w = taps.weight[k];
            if w == 0.0 {
                continue;
            }
            let base = taps.index[k] * c;
            for (t, d) in self.data[base..base + c].iter_mut().zip(d_out) {
                *t += w * d;
            }
        }
    }
}

/// Base texel, fractional offset and d(offset)/d(coord) along one axis.
fn axis(v: f64, n: usize) -> (usize, f64, f64) {
    if n <= 1 {
        return (0, 0.0, 0.0);
    }
    let max = (n - 1) as f64;
    let (c, g) = if v < 0.0 {
        (0.0, 0.0)
    } else if v > max {
        (max, 0.0)
    } else if v.is_nan() {
        (0.0, 0.0)
    } else {
        (v, 1.0)
    };
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, c - i0 as f64, g)
}

/// Bilinear lookup of all channels at pixel coordinate `xy`.
pub fn bilinear_sample(grid: &Grid, xy: Vec2, out: &mut [f64]) {
    let taps = grid.taps(xy);
    grid.sample_taps(&taps, out);
}

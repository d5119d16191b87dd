//! Procedural datasets: 2-D Gaussian blobs, two moons, and small grayscale
//! shape images (filled square, disk, cross).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Encoding};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Radius of the circle the Gaussian centroids sit on.
pub const CENTROID_RADIUS: f64 = 2.0;

pub fn gaussian_centroids(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / classes as f64;
            [CENTROID_RADIUS * a.cos(), CENTROID_RADIUS * a.sin()]
        })
        .collect()
}

/// `classes` isotropic blobs with std `spread`, centroids evenly spaced on a
/// circle of radius [`CENTROID_RADIUS`].
pub fn gen_gaussians_2d(
    classes: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || spread < 0.0 {
        return Err(Error::invalid(
            "gen_gaussians_2d: classes and per_class must be positive",
        ));
    }
    let mut r = rng::stream(seed, "data/gaussians");
    let centroids = gaussian_centroids(classes);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mu) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            for m in mu {
                data.push(m + spread * r.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    let samples = Tensor::new(vec![classes * per_class, 2], data)?;
    Dataset::new("gaussians", samples, labels, classes, Encoding::Points)
}

/// Two interleaved half circles, centred on the origin.
pub fn gen_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || noise < 0.0 {
        return Err(Error::invalid("gen_moons: need n >= 2"));
    }
    let mut r = rng::stream(seed, "data/moons");
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = PI * r.random::<f64>();
        let (x, y, c) = if i % 2 == 0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        data.push(x - 0.5 + noise * r.sample::<f64, _>(StandardNormal));
        data.push(y - 0.25 + noise * r.sample::<f64, _>(StandardNormal));
        labels.push(c);
    }
    Dataset::new(
        "moons",
        Tensor::new(vec![n, 2], data)?,
        labels,
        2,
        Encoding::Points,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

/// Renders one shape as `side * side` intensities (0 background, 255 ink).
/// `center` is in pixel units measured from the top-left corner.
pub fn render_shape(shape: Shape, side: usize, center: (f64, f64), size: f64) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let dy = i as f64 + 0.5 - center.0;
            let dx = j as f64 + 0.5 - center.1;
            let on = match shape {
                Shape::Square => dy.abs() <= size && dx.abs() <= size,
                Shape::Circle => dy * dy + dx * dx <= size * size,
                Shape::Cross => {
                    let arm = size * 0.35;
                    (dy.abs() <= arm && dx.abs() <= size) || (dx.abs() <= arm && dy.abs() <= size)
                }
            };
            if on {
                img[i * side + j] = 255.0;
            }
        }
    }
    img
}

/// `per_class` images of each of the three shapes, `[n, 1, side, side]`,
/// with size and position jitter.
pub fn gen_shapes(per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 || side < 6 {
        return Err(Error::invalid(
            "gen_shapes: need per_class >= 1 and side >= 6",
        ));
    }
    let mut r = rng::stream(seed, "data/shapes");
    let n = per_class * SHAPES.len();
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let half = side as f64 / 2.0;
    for (c, shape) in SHAPES.iter().enumerate() {
        for _ in 0..per_class {
            let size = half * r.random_range(0.55..0.8);
            let shift = (side as f64 / 8.0).floor();
            let cy = half + r.random_range(-shift..=shift);
            let cx = half + r.random_range(-shift..=shift);
            data.extend(render_shape(*shape, side, (cy, cx), size));
            labels.push(c);
        }
    }
    let samples = Tensor::new(vec![n, 1, side, side], data)?;
    Dataset::new("shapes", samples, labels, SHAPES.len(), Encoding::Pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussians_shape_and_labels() {
        let d = gen_gaussians_2d(3, 100, 0.2, 1).unwrap();
        assert_eq!(d.samples.shape(), &[300, 2]);
        let mut l = d.labels.clone();
        l.dedup();
        assert_eq!(l, vec![0, 1, 2]);
    }

    #[test]
    fn zero_spread_collapses_to_centroids() {
        let d = gen_gaussians_2d(3, 10, 0.0, 1).unwrap();
        let cs = gaussian_centroids(3);
        for i in 0..d.len() {
            assert_eq!(d.raw(i), &cs[d.labels[i]]);
        }
    }

    #[test]
    fn generators_are_pure_in_seed() {
        assert_eq!(
            gen_moons(50, 0.1, 3).unwrap(),
            gen_moons(50, 0.1, 3).unwrap()
        );
        assert_ne!(
            gen_moons(50, 0.1, 3).unwrap(),
            gen_moons(50, 0.1, 4).unwrap()
        );
        assert_eq!(gen_shapes(4, 8, 9).unwrap(), gen_shapes(4, 8, 9).unwrap());
    }

    #[test]
    fn centred_circle_has_fourfold_symmetry() {
        let side = 9;
        let img = render_shape(Shape::Circle, side, (4.5, 4.5), 3.3);
        for i in 0..side {
            for j in 0..side {
                // rotate by 90 degrees: (i, j) -> (j, side - 1 - i)
                assert_eq!(img[i * side + j], img[j * side + (side - 1 - i)]);
            }
        }
        assert!(img.contains(&255.0) && img.contains(&0.0));
    }

    #[test]
    fn shapes_are_pixel_encoded() {
        let d = gen_shapes(2, 8, 0).unwrap();
        assert_eq!(d.samples.shape(), &[6, 1, 8, 8]);
        assert_eq!(d.encoding, Encoding::Pixels);
        assert!(d.samples.data().iter().all(|v| *v == 0.0 || *v == 255.0));
    }
}

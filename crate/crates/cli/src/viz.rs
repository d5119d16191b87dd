//! Class-boundary maps for models over 2-D inputs.

use stic_core::{ClassifierModel, Error, Result, Tensor};

/// Colours for real classes, cycled when there are more classes.
pub const PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [255, 255, 51],
    [166, 86, 40],
    [247, 129, 191],
];

/// Colour of cells won by the fake class.
pub const BACKGROUND: [u8; 3] = [24, 24, 24];

pub const MARKER: [u8; 3] = [255, 255, 255];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn square(lo: f64, hi: f64) -> Self {
        Bounds {
            x0: lo,
            x1: hi,
            y0: lo,
            y1: hi,
        }
    }

    /// `x0,x1,y0,y1`.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad bound {s:?}"))
            })
            .collect::<std::result::Result<_, _>>()?;
        match v[..] {
            [x0, x1, y0, y1] if x0 < x1 && y0 < y1 => Ok(Bounds { x0, x1, y0, y1 }),
            _ => Err(format!(
                "bounds must be x0,x1,y0,y1 with x0<x1 and y0<y1, got {text:?}"
            )),
        }
    }

    /// Centre of cell `(row, col)`; row 0 is the top (largest y).
    pub fn cell_center(&self, row: usize, col: usize, res: usize) -> [f64; 2] {
        let dx = (self.x1 - self.x0) / res as f64;
        let dy = (self.y1 - self.y0) / res as f64;
        [
            self.x0 + (col as f64 + 0.5) * dx,
            self.y1 - (row as f64 + 0.5) * dy,
        ]
    }

    /// Cell containing `p`, if inside.
    pub fn cell_of(&self, p: [f64; 2], res: usize) -> Option<(usize, usize)> {
        let fx = (p[0] - self.x0) / (self.x1 - self.x0);
        let fy = (self.y1 - p[1]) / (self.y1 - self.y0);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
            return None;
        }
        Some(((fy * res as f64) as usize, (fx * res as f64) as usize))
    }
}

/// Argmax over all `C+1` outputs at every cell centre, row-major from the top.
pub fn boundary_map(model: &ClassifierModel, bounds: Bounds, res: usize) -> Result<Vec<usize>> {
    if model.arch().input_shape != [2] {
        return Err(Error::Invalid(format!(
            "boundary maps need a 2-D input model, got input shape {:?}",
            model.arch().input_shape
        )));
    }
    if res == 0 {
        return Err(Error::Invalid("grid resolution must be positive".into()));
    }
    let mut out = Vec::with_capacity(res * res);
    // One row of cells per forward pass keeps memory flat at large grids.
    for row in 0..res {
        let data: Vec<f64> = (0..res)
            .flat_map(|col| bounds.cell_center(row, col, res))
            .collect();
        out.extend(model.predict(&Tensor::new(vec![res, 2], data)?)?);
    }
    Ok(out)
}

pub fn class_color(class: usize, fake_class: usize) -> [u8; 3] {
    if class == fake_class {
        BACKGROUND
    } else {
        PALETTE[class % PALETTE.len()]
    }
}

/// RGB bytes for a class grid.
pub fn render(classes: &[usize], fake_class: usize) -> Vec<u8> {
    classes
        .iter()
        .flat_map(|&c| class_color(c, fake_class))
        .collect()
}

/// Paints each point's cell with the marker colour.
pub fn mark_points(rgb: &mut [u8], res: usize, bounds: Bounds, points: &[[f64; 2]]) {
    for p in points {
        if let Some((r, c)) = bounds.cell_of(*p, res) {
            let at = 3 * (r * res + c);
            rgb[at..at + 3].copy_from_slice(&MARKER);
        }
    }
}

/// Class indices as CSV, one grid row per line.
pub fn map_csv(classes: &[usize], res: usize) -> String {
    classes
        .chunks(res)
        .map(|row| {
            row.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stic_core::Architecture;

    fn linear(w: [[f64; 3]; 2], b: [f64; 3]) -> ClassifierModel {
        let arch = Architecture::mlp(2, &[], 2);
        let mut m = ClassifierModel::zeroed(arch).unwrap();
        m.params_mut()[0] = Tensor::new(vec![2, 3], w.concat()).unwrap();
        m.params_mut()[1] = Tensor::vector(b.to_vec());
        m
    }

    #[test]
    fn constant_logits_single_colour() {
        let m = linear([[0.0; 3]; 2], [0.0, 2.0, -1.0]);
        let map = boundary_map(&m, Bounds::square(-1.0, 1.0), 16).unwrap();
        assert!(map.iter().all(|&c| c == 1));
        let rgb = render(&map, 2);
        assert!(rgb.chunks(3).all(|p| p == PALETTE[1]));
    }

    #[test]
    fn fake_class_is_background() {
        let m = linear([[0.0; 3]; 2], [0.0, 0.0, 5.0]);
        let map = boundary_map(&m, Bounds::square(-1.0, 1.0), 4).unwrap();
        assert!(render(&map, 2).chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn uniform_logit_shift_leaves_map_unchanged() {
        let w = [[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]];
        let a = boundary_map(&linear(w, [0.1, 0.0, -0.3]), Bounds::square(-2.0, 2.0), 32).unwrap();
        let b = boundary_map(&linear(w, [5.1, 5.0, 4.7]), Bounds::square(-2.0, 2.0), 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_plane_within_one_cell() {
        // Class 0 wins where x - 0.5 y > 0.2; the fake logit is far below.
        let m = linear([[1.0, 0.0, 0.0], [-0.5, 0.0, 0.0]], [-0.2, 0.0, -100.0]);
        let bounds = Bounds::square(-2.0, 2.0);
        let res = 64;
        let map = boundary_map(&m, bounds, res).unwrap();
        let cell = 4.0 / res as f64;
        for row in 0..res {
            for col in 0..res {
                let [x, y] = bounds.cell_center(row, col, res);
                let margin = (x - 0.5 * y - 0.2) / (1.0f64 + 0.25).sqrt();
                let expect = if margin > 0.0 { 0 } else { 1 };
                if margin.abs() > cell {
                    assert_eq!(map[row * res + col], expect, "cell ({row}, {col})");
                }
            }
        }
    }

    #[test]
    fn rejects_non_planar_models() {
        let m = ClassifierModel::new(Architecture::mlp(3, &[4], 2), 0).unwrap();
        assert!(boundary_map(&m, Bounds::square(0.0, 1.0), 4).is_err());
    }

    #[test]
    fn bounds_parse_and_cells() {
        assert!(Bounds::parse("0,1,0").is_err());
        assert!(Bounds::parse("1,0,0,1").is_err());
        let b = Bounds::parse("-1, 1, -2, 2").unwrap();
        assert_eq!(b.cell_of([-0.99, 1.99], 10), Some((0, 0)));
        assert_eq!(b.cell_of([0.99, -1.99], 10), Some((9, 9)));
        assert_eq!(b.cell_of([1.5, 0.0], 10), None);
        assert_eq!(map_csv(&[0, 1, 2, 3], 2), "0,1\n2,3\n");
    }
}

use super::Grid;

#[derive(Debug, Clone)]
pub struct TerrainDerivatives {
    /// Degrees from horizontal.
    pub slope: Grid,
    /// Direction of steepest descent, degrees clockwise from north.
    pub aspect: Grid,
    pub elevation_class: Grid,
}

/// Horn 3x3 slope/aspect plus elevation classes of width `class_width`.
///
/// Border cells and cells touching nodata are nodata in slope and aspect;
/// aspect is nodata on flat cells.
pub fn terrain_derivatives(dtm: &Grid, class_width: f64) -> TerrainDerivatives {
    let g = dtm.geometry;
    let nodata = dtm.nodata;
    let mut slope = Grid::filled(g, nodata, nodata);
    let mut aspect = Grid::filled(g, nodata, nodata);
    let elevation_class = dtm.map_valid(|z| (z / class_width).floor());
    let cs = g.cellsize;

    if g.nrows >= 3 && g.ncols >= 3 {
        for r in 1..g.nrows - 1 {
            'cell: for c in 1..g.ncols - 1 {
                let mut w = [[0.0; 3]; 3];
                for (dr, row) in w.iter_mut().enumerate() {
                    for (dc, v) in row.iter_mut().enumerate() {
                        match dtm.valid(r + dr - 1, c + dc - 1) {
                            Some(z) => *v = z,
                            None => continue 'cell,
                        }
                    }
                }
                // w[0] is the northern row.
                let dz_dx = ((w[0][2] + 2.0 * w[1][2] + w[2][2]) - (w[0][0] + 2.0 * w[1][0] + w[2][0]))
                    / (8.0 * cs);
                let dz_dy = ((w[0][0] + 2.0 * w[0][1] + w[0][2]) - (w[2][0] + 2.0 * w[2][1] + w[2][2]))
                    / (8.0 * cs);
                let grad = dz_dx.hypot(dz_dy);
                slope.set(r, c, grad.atan().to_degrees());
                if grad > 1e-12 {
                    let a = (-dz_dx).atan2(-dz_dy).to_degrees();
                    aspect.set(r, c, if a < 0.0 { a + 360.0 } else { a });
                }
            }
        }
    }
    TerrainDerivatives {
        slope,
        aspect,
        elevation_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::GridGeometry;

    fn plane(f: impl Fn(f64, f64) -> f64) -> Grid {
        let g = GridGeometry::new(6, 5, 0.0, 0.0, 2.0).unwrap();
        let mut grid = Grid::filled(g, -9999.0, 0.0);
        for r in 0..5 {
            for c in 0..6 {
                let (x, y) = g.cell_center(r, c);
                grid.set(r, c, f(x, y));
            }
        }
        grid
    }

    #[test]
    fn flat_has_zero_slope_and_no_aspect() {
        let t = terrain_derivatives(&plane(|_, _| 500.0), 100.0);
        for r in 1..4 {
            for c in 1..5 {
                assert_eq!(t.slope.valid(r, c), Some(0.0));
                assert_eq!(t.aspect.valid(r, c), None);
            }
        }
        assert_eq!(t.slope.valid(0, 0), None);
    }

    #[test]
    fn east_rising_plane_faces_west() {
        let t = terrain_derivatives(&plane(|x, _| x), 100.0);
        let s = t.slope.valid(2, 2).unwrap();
        assert!((s - 45.0).abs() < 1e-9, "{s}");
        assert!((t.aspect.valid(2, 2).unwrap() - 270.0).abs() < 1e-9);
    }

    #[test]
    fn north_rising_plane_faces_south() {
        let t = terrain_derivatives(&plane(|_, y| 0.5 * y), 100.0);
        assert!((t.aspect.valid(2, 2).unwrap() - 180.0).abs() < 1e-9);
        let t = terrain_derivatives(&plane(|x, _| -x), 100.0);
        assert!((t.aspect.valid(2, 2).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn slope_matches_atan_of_gradient() {
        for k in [0.1, 0.5, 1.0, 2.0] {
            let t = terrain_derivatives(&plane(|x, _| k * x), 100.0);
            let s = t.slope.valid(2, 3).unwrap();
            assert!((s - f64::atan(k).to_degrees()).abs() < 1e-6, "k={k}: {s}");
        }
    }

    #[test]
    fn elevation_classes() {
        let t = terrain_derivatives(&plane(|x, y| 950.0 + 8.0 * x + 1.0 * y), 100.0);
        let classes: std::collections::BTreeSet<i64> =
            t.elevation_class.valid_values().map(|v| v as i64).collect();
        assert!(classes.iter().all(|c| *c == 9 || *c == 10));
        assert_eq!(classes.len(), 2);
    }

    #[test]
    fn nodata_propagates() {
        let mut g = plane(|x, _| x);
        g.set(2, 2, -9999.0);
        let t = terrain_derivatives(&g, 100.0);
        assert_eq!(t.slope.valid(1, 1), None);
        assert_eq!(t.slope.valid(3, 3), None);
        assert!(t.slope.valid(3, 4).is_some());
        assert_eq!(t.elevation_class.valid(2, 2), None);
    }
}

//! Synthetic 2-D classification datasets and their CSV interchange format.
//!
//! Generators are deterministic per seed and emit features inside
//! [0.05, 0.95]^2, leaving headroom so an epsilon-ball attack stays inside
//! the model's [0, 1] input range. Class counts are balanced within one.
//!
//! ## CSV format
//!
//! Header `label,f_0,...,f_{d-1}`, one sample per row. Floats are written
//! with Rust's shortest round-trip formatting, so export followed by load
//! reproduces a dataset bitwise.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::rng::Seed;
use crate::numerics::Matrix;

/// Margin of the affine target box inside [0, 1].
const BOX_LO: f64 = 0.05;
const BOX_HI: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d` features, each entry in [0, 1].
    pub x: Matrix,
    /// One class index per row.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Affinely maps each column of `x` from its own [min, max] onto
/// [[`BOX_LO`], [`BOX_HI`]]. A column with no spread collapses to the box
/// center.
fn map_into_box(x: &mut Matrix) {
    for c in 0..x.ncols() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in x.column(c) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for v in x.column_mut(c) {
            *v = if range < 1e-12 {
                0.5 * (BOX_LO + BOX_HI)
            } else {
                BOX_LO + (BOX_HI - BOX_LO) * (*v - lo) / range
            };
        }
    }
}

/// Two interleaved half-circles with Gaussian noise, mapped into the margin
/// box. `n` must be even (the moons stay exactly balanced); labels alternate
/// by row.
pub fn two_moons(n: usize, noise_sigma: f64, seed: Seed) -> Result<Dataset> {
    if n % 2 != 0 {
        return Err(Error::config(format!("two_moons needs an even n, got {n}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let half = n / 2;
    let mut rng = seed.rng();
    let mut x = Matrix::zeros((n, 2));
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let arc_index = i / 2;
        let theta = if half > 1 {
            std::f64::consts::PI * arc_index as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let moon = i % 2;
        let (px, py) = if moon == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        x[[i, 0]] = px + noise_sigma * rng.next_normal();
        x[[i, 1]] = py + noise_sigma * rng.next_normal();
        labels[i] = moon;
    }
    map_into_box(&mut x);
    Ok(Dataset { x, labels, num_classes: 2 })
}

/// `c` isotropic Gaussians centered on a ring, mapped into the margin box.
/// Class of row `i` is `i % c`, so counts are balanced within one.
pub fn gaussian_blobs(n: usize, c: usize, spread: f64, seed: Seed) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::config(format!("gaussian_blobs needs at least 2 classes, got {c}")));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::config(format!("spread {spread} must be >= 0")));
    }
    let mut rng = seed.rng();
    let mut x = Matrix::zeros((n, 2));
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let k = i % c;
        let angle = std::f64::consts::TAU * k as f64 / c as f64;
        x[[i, 0]] = 0.5 + 0.35 * angle.cos() + spread * rng.next_normal();
        x[[i, 1]] = 0.5 + 0.35 * angle.sin() + spread * rng.next_normal();
        labels[i] = k;
    }
    map_into_box(&mut x);
    Ok(Dataset { x, labels, num_classes: c })
}

/// Writes `label,f_0,...` CSV with round-trip float formatting.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "label")?;
    for j in 0..data.dim() {
        write!(out, ",f_{j}")?;
    }
    writeln!(out)?;
    for i in 0..data.len() {
        write!(out, "{}", data.labels[i])?;
        for j in 0..data.dim() {
            write!(out, ",{}", data.x[[i, j]])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a `label,f_0,...` CSV. Errors carry the 1-based line number;
/// features must be finite and inside [0, 1]. The class count is inferred as
/// the largest label plus one.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let fail = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, "empty file".into()))?;
    let fields: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if fields.first() != Some(&"label") || fields.len() < 2 {
        return Err(fail(1, format!("expected header `label,f_0,...`, got {header:?}")));
    }
    for (j, field) in fields[1..].iter().enumerate() {
        if *field != format!("f_{j}") {
            return Err(fail(1, format!("expected column `f_{j}`, got {field:?}")));
        }
    }
    let dim = fields.len() - 1;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (index, raw) in lines {
        let line = index + 1;
        let row: Vec<&str> = raw.trim_end_matches('\r').split(',').collect();
        if row.len() != dim + 1 {
            return Err(fail(line, format!("expected {} fields, got {}", dim + 1, row.len())));
        }
        let label: usize = row[0]
            .parse()
            .map_err(|e| fail(line, format!("bad label {:?}: {e}", row[0])))?;
        labels.push(label);
        for field in &row[1..] {
            let v: f64 = field
                .parse()
                .map_err(|e| fail(line, format!("bad feature {field:?}: {e}")))?;
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(fail(line, format!("feature {v} outside [0, 1]")));
            }
            rows.push(v);
        }
    }
    if labels.is_empty() {
        return Err(fail(1, "no data rows".into()));
    }
    let n = labels.len();
    let x = Matrix::from_shape_vec((n, dim), rows).expect("row-count bookkeeping");
    let num_classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset { x, labels, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn class_counts(data: &Dataset) -> Vec<usize> {
        let mut counts = vec![0usize; data.num_classes];
        for &y in &data.labels {
            counts[y] += 1;
        }
        counts
    }

    #[test]
    fn moons_are_deterministic_and_balanced() {
        let a = two_moons(200, 0.1, Seed(5)).unwrap();
        let b = two_moons(200, 0.1, Seed(5)).unwrap();
        let c = two_moons(200, 0.1, Seed(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(class_counts(&a), vec![100, 100]);
    }

    #[test]
    fn moons_reject_odd_n() {
        assert!(two_moons(201, 0.1, Seed(0)).is_err());
    }

    #[test]
    fn moons_fill_the_margin_box() {
        let data = two_moons(400, 0.15, Seed(9)).unwrap();
        for c in 0..2 {
            let col = data.x.column(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_abs_diff_eq!(lo, 0.05, epsilon = 1e-12);
            assert_abs_diff_eq!(hi, 0.95, epsilon = 1e-12);
        }
        assert!(data.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn noiseless_moons_land_exactly_on_the_arcs() {
        // Without noise the seed is irrelevant and every point satisfies its
        // arc's circle equation after undoing the affine map. n is chosen so
        // the angle grid hits pi/2 and pi, making the raw bounding box attain
        // its nominal corners.
        let a = two_moons(102, 0.0, Seed(1)).unwrap();
        let b = two_moons(102, 0.0, Seed(2)).unwrap();
        assert_eq!(a, b);

        // Raw arc bounding box, computed from the arc formulas directly:
        // moon 0 spans x in [-1, 1], moon 1 spans x in [0, 2]; y spans
        // [-0.5, 1].
        let (raw_x, raw_w) = (-1.0, 3.0);
        let (raw_y, raw_h) = (-0.5, 1.5);
        for i in 0..a.len() {
            let rx = raw_x + raw_w * (a.x[[i, 0]] - 0.05) / 0.9;
            let ry = raw_y + raw_h * (a.x[[i, 1]] - 0.05) / 0.9;
            let (cx, cy) = if a.labels[i] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r2 = (rx - cx) * (rx - cx) + (ry - cy) * (ry - cy);
            assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn blobs_are_deterministic_balanced_and_in_range() {
        let a = gaussian_blobs(10, 3, 0.05, Seed(4)).unwrap();
        let b = gaussian_blobs(10, 3, 0.05, Seed(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(class_counts(&a), vec![4, 3, 3]);
        assert!(a.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blobs_reject_single_class() {
        assert!(gaussian_blobs(10, 1, 0.05, Seed(0)).is_err());
    }

    #[test]
    fn blob_classes_are_spatially_separated_at_low_spread() {
        let data = gaussian_blobs(300, 3, 0.01, Seed(8)).unwrap();
        // Class centroids should be pairwise far compared to the spread.
        let mut centroids = vec![(0.0, 0.0, 0usize); 3];
        for i in 0..data.len() {
            let k = data.labels[i];
            centroids[k].0 += data.x[[i, 0]];
            centroids[k].1 += data.x[[i, 1]];
            centroids[k].2 += 1;
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let (ax, ay, an) = centroids[a];
                let (bx, by, bn) = centroids[b];
                let dx = ax / an as f64 - bx / bn as f64;
                let dy = ay / an as f64 - by / bn as f64;
                assert!((dx * dx + dy * dy).sqrt() > 0.3, "blobs {a} and {b} overlap");
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let data = two_moons(50, 0.12, Seed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        save_csv(&path, &data).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.num_classes, data.num_classes);
        assert!(loaded
            .x
            .iter()
            .zip(data.x.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn csv_loads_handcrafted_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.csv");
        std::fs::write(&path, "label,f_0,f_1\n0,0.25,0.5\n1,1,0\n0,0.125,0.875\n").unwrap();
        let data = load_csv(&path).unwrap();
        assert_eq!(data.labels, vec![0, 1, 0]);
        assert_eq!(data.num_classes, 2);
        assert_eq!(data.x[[0, 0]], 0.25);
        assert_eq!(data.x[[1, 0]], 1.0);
        assert_eq!(data.x[[2, 1]], 0.875);
    }

    #[test]
    fn csv_rejects_out_of_range_feature_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "label,f_0\n0,0.5\n1,1.2\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("1.2"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn csv_rejects_bad_header_and_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        for (name, content, want_line) in [
            ("h.csv", "labels,f_0\n0,0.5\n", 1),
            ("col.csv", "label,f_1\n0,0.5\n", 1),
            ("width.csv", "label,f_0\n0,0.5,0.5\n", 2),
            ("feat.csv", "label,f_0\n0,zero\n", 2),
            ("label.csv", "label,f_0\n-1,0.5\n", 2),
            ("empty.csv", "label,f_0\n", 1),
        ] {
            let path = dir.path().join(name);
            std::fs::write(&path, content).unwrap();
            match load_csv(&path).unwrap_err() {
                Error::Parse { line, .. } => assert_eq!(line, want_line, "{name}"),
                other => panic!("{name}: expected parse error, got {other}"),
            }
        }
    }

    #[test]
    fn select_reorders_rows_and_labels_together() {
        let data = gaussian_blobs(6, 2, 0.05, Seed(2)).unwrap();
        let picked = data.select(&[5, 0, 3]);
        assert_eq!(picked.len(), 3);
        assert_eq!(picked.labels[0], data.labels[5]);
        assert_eq!(picked.x.row(1), data.x.row(0));
        assert_eq!(picked.labels[2], data.labels[3]);
    }
}

//! Fully-connected ReLU classifiers and their binary checkpoints.
//!
//! A model is a stack of linear layers with ReLU between them and a linear
//! head. `dims = [in, h_1, ..., h_k, classes]` with `k >= 1`; the "features"
//! of a batch are the activations entering the head (the last hidden layer's
//! ReLU output), which is what the neighborhood graphs are built on.
//!
//! Shape mismatches are programmer error and panic via `assert!`; fallible
//! I/O and malformed checkpoints return errors.
//!
//! ## Checkpoint format
//!
//! Little-endian binary, in file order:
//!
//! ```text
//! magic   8 bytes  "MLPCKPT1"
//! seed    u64      run seed recorded for provenance
//! epoch   u64      epochs completed when saved
//! ndims   u32      number of entries in dims
//! dims    u32 * ndims
//! layers  per layer: W row-major f64 * (in*out), then b f64 * out
//! ```
//!
//! Loading validates the magic, the exact file length, and that every
//! parameter is finite, so a round trip is bitwise exact or an error.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::rng::Seed;
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"MLPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// One `in x out` matrix per layer.
    pub(crate) weights: Vec<Matrix>,
    /// One `1 x out` row per layer.
    pub(crate) biases: Vec<Matrix>,
}

/// A model's parameters registered on a tape for one backward pass.
pub struct StagedMlp {
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
}

impl Mlp {
    /// He-initialized model: weights drawn from N(0, 2 / fan_in), biases
    /// zero. Draw order is layer by layer, row major, so a seed pins every
    /// parameter.
    pub fn new(dims: &[usize], seed: Seed) -> Result<Mlp> {
        if dims.len() < 3 {
            return Err(Error::config(format!(
                "model needs at least one hidden layer: dims {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero-width layer in dims {dims:?}")));
        }
        let mut rng = seed.rng();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Matrix::from_shape_fn((fan_in, fan_out), |_| std * rng.next_normal());
            weights.push(w);
            biases.push(Matrix::zeros((1, fan_out)));
        }
        Ok(Mlp { dims: dims.to_vec(), weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Width of the layer the neighborhood graphs are built on.
    pub fn feature_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass without a tape: `(features, logits)`.
    ///
    /// Uses the same expressions as the taped pass, so the two agree bitwise.
    pub fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let mut h = x.clone();
        for layer in 0..self.num_layers() - 1 {
            h = h.dot(&self.weights[layer]) + &self.biases[layer].row(0);
            h.mapv_inplace(|v| v.max(0.0));
        }
        let last = self.num_layers() - 1;
        let logits = h.dot(&self.weights[last]) + &self.biases[last].row(0);
        (h, logits)
    }

    /// Class predictions: argmax over logits, lowest index on ties.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let (_, logits) = self.forward(x);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                best_c
            })
            .collect()
    }

    /// Registers every parameter as a tape leaf.
    pub fn stage(&self, tape: &mut Tape) -> StagedMlp {
        let ws = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let bs = self.biases.iter().map(|b| tape.leaf(b.clone())).collect();
        StagedMlp { ws, bs }
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Writes a checkpoint (see the module doc for the format).
    pub fn save(&self, path: &Path, seed: u64, epoch: u64) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&seed.to_le_bytes())?;
        out.write_all(&epoch.to_le_bytes())?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for layer in 0..self.num_layers() {
            for &v in self.weights[layer].iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            for &v in self.biases[layer].iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, returning the model with its recorded seed and
    /// epoch. Rejects bad magic, truncation, trailing bytes, and non-finite
    /// parameters.
    pub fn load(path: &Path) -> Result<(Mlp, u64, u64)> {
        let mut input = BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let seed = read_u64(&mut input, path)?;
        let epoch = read_u64(&mut input, path)?;
        let ndims = read_u32(&mut input, path)? as usize;
        if !(3..=64).contains(&ndims) {
            return Err(bad(format!("implausible layer count {ndims}")));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d = read_u32(&mut input, path)? as usize;
            if d == 0 {
                return Err(bad("zero-width layer".into()));
            }
            dims.push(d);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in 0..ndims - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let mut w = Matrix::zeros((fan_in, fan_out));
            for v in w.iter_mut() {
                *v = read_f64(&mut input, path)?;
            }
            let mut b = Matrix::zeros((1, fan_out));
            for v in b.iter_mut() {
                *v = read_f64(&mut input, path)?;
            }
            for (name, m) in [("weight", &w), ("bias", &b)] {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("non-finite {name} in layer {layer}")));
                }
            }
            weights.push(w);
            biases.push(b);
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after parameters".into()));
        }
        Ok((Mlp { dims, weights, biases }, seed, epoch))
    }
}

impl StagedMlp {
    /// Taped forward pass: `(features, logits)`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let layers = self.ws.len();
        let mut h = x;
        for layer in 0..layers - 1 {
            let lin = tape.matmul(h, self.ws[layer]);
            let lin = tape.add_bias(lin, self.bs[layer]);
            h = tape.relu(lin);
        }
        let logits = tape.matmul(h, self.ws[layers - 1]);
        let logits = tape.add_bias(logits, self.bs[layers - 1]);
        (h, logits)
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        Error::Checkpoint(format!("{}: truncated ({e})", path.display()))
    })
}

fn read_u64(input: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(input: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = Seed(seed).rng();
        Matrix::from_shape_fn((n, d), |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::new(&[2, 8, 3], Seed(5)).unwrap();
        let b = Mlp::new(&[2, 8, 3], Seed(5)).unwrap();
        let c = Mlp::new(&[2, 8, 3], Seed(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_he_scale() {
        let m = Mlp::new(&[64, 256, 2], Seed(0)).unwrap();
        let w = &m.weights[0];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let expected = 2.0 / 64.0;
        assert!((var - expected).abs() < 0.2 * expected, "var {var} vs {expected}");
        assert!(m.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(Mlp::new(&[2, 3], Seed(0)).is_err());
        assert!(Mlp::new(&[2, 0, 3], Seed(0)).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let mut m = Mlp::new(&[2, 2, 2], Seed(1)).unwrap();
        m.weights[0] = array![[1.0, -1.0], [0.0, 2.0]];
        m.biases[0] = array![[0.5, -0.5]];
        m.weights[1] = array![[1.0, 0.0], [1.0, 1.0]];
        m.biases[1] = array![[0.0, 0.25]];
        let x = array![[1.0, 1.0]];
        // Hidden pre-activation: (1.5, 0.5); ReLU keeps both.
        // Logits: (1.5 + 0.5, 0.5 + 0.25) = (2.0, 0.75).
        let (features, logits) = m.forward(&x);
        assert_abs_diff_eq!(features[[0, 0]], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(features[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(logits[[0, 0]], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(logits[[0, 1]], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let mut m = Mlp::new(&[1, 2, 2], Seed(1)).unwrap();
        m.weights[0] = array![[1.0, -1.0]];
        m.biases[0] = array![[0.0, 0.0]];
        let (features, _) = m.forward(&array![[2.0]]);
        assert_eq!(features[[0, 0]], 2.0);
        assert_eq!(features[[0, 1]], 0.0);
    }

    #[test]
    fn taped_forward_is_bitwise_equal_to_plain() {
        let m = Mlp::new(&[3, 16, 8, 4], Seed(9)).unwrap();
        let x = batch(2, 12, 3);
        let (features, logits) = m.forward(&x);

        let mut tape = Tape::new();
        let staged = m.stage(&mut tape);
        let xv = tape.leaf(x);
        let (fv, lv) = staged.apply(&mut tape, xv);
        assert_eq!(tape.value(fv), &features);
        assert_eq!(tape.value(lv), &logits);
    }

    #[test]
    fn gradients_reach_every_layer() {
        let m = Mlp::new(&[3, 8, 6, 3], Seed(4)).unwrap();
        let x = batch(5, 10, 3);
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let mut tape = Tape::new();
        let staged = m.stage(&mut tape);
        let xv = tape.leaf(x);
        let (_, logits) = staged.apply(&mut tape, xv);
        let loss = tape.cross_entropy_mean(logits, &labels);
        let grads = tape.backward(loss).unwrap();
        for layer in 0..m.num_layers() {
            assert!(
                grads.wrt(staged.ws[layer]).iter().any(|&v| v != 0.0),
                "dead weight gradient in layer {layer}"
            );
            assert!(
                grads.wrt(staged.bs[layer]).iter().any(|&v| v != 0.0),
                "dead bias gradient in layer {layer}"
            );
        }
    }

    #[test]
    fn predict_takes_the_argmax() {
        let mut m = Mlp::new(&[2, 2, 3], Seed(1)).unwrap();
        m.weights[0] = array![[1.0, 0.0], [0.0, 1.0]];
        m.biases[0] = array![[0.0, 0.0]];
        m.weights[1] = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        m.biases[1] = array![[0.0, 0.0, 0.0]];
        let preds = m.predict(&array![[3.0, 1.0], [1.0, 3.0], [0.0, 0.0]]);
        // Third row is a three-way tie at 0; lowest index wins.
        assert_eq!(preds, vec![0, 1, 0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = Mlp::new(&[2, 32, 16, 2], Seed(123)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path, 123, 17).unwrap();
        let (loaded, seed, epoch) = Mlp::load(&path).unwrap();
        assert_eq!(seed, 123);
        assert_eq!(epoch, 17);
        assert_eq!(loaded, m);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        let err = Mlp::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn checkpoint_rejects_truncation_and_trailing_bytes() {
        let m = Mlp::new(&[2, 4, 2], Seed(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path, 7, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("trunc.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Mlp::load(&truncated).is_err());

        let padded = dir.path().join("padded.ckpt");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&padded, &longer).unwrap();
        assert!(Mlp::load(&padded).is_err());
    }

    #[test]
    fn checkpoint_rejects_non_finite_parameters() {
        let mut m = Mlp::new(&[2, 4, 2], Seed(7)).unwrap();
        m.weights[0][[0, 0]] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ckpt");
        m.save(&path, 7, 0).unwrap();
        let err = Mlp::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}

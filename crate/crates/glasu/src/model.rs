//! Client-side GNN layers (GCN, GCNII), linear classifier, softmax
//! cross-entropy, and hand-derived backward passes over a forward tape.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GlasuError, Result};
use crate::linalg::{add, glorot_init, matmul, scale, Matrix, RngState};

/// Layer family. GCNII carries its two skip-connection hyperparameters;
/// beta_l = ln(lambda/(l+1) + 1) for 0-based layer index l.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Gcn,
    Gcnii { alpha: f64, lambda: f64 },
}

impl LayerKind {
    pub fn validate(&self) -> Result<()> {
        if let LayerKind::Gcnii { alpha, lambda } = self {
            if alpha.is_nan() || *alpha <= 0.0 || *alpha >= 1.0 {
                return Err(GlasuError::Config(format!("gcnii alpha {alpha} not in (0,1)")));
            }
            if lambda.is_nan() || *lambda <= 0.0 {
                return Err(GlasuError::Config(format!("gcnii lambda {lambda} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn beta(&self, layer: usize) -> f64 {
        match self {
            LayerKind::Gcn => 0.0,
            LayerKind::Gcnii { lambda, .. } => (lambda / (layer as f64 + 1.0) + 1.0).ln(),
        }
    }
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Per-layer state cached by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct TapeEntry {
    /// Densified bipartite block used by this layer.
    pub a_bip: Matrix,
    /// GCN: A*H_in; GCNII: (1-alpha)*A*H_in + alpha*H0_slice.
    pub pre_mix: Matrix,
    /// Pre-activation.
    pub z: Matrix,
    /// Weight snapshot the layer ran with.
    pub w: Matrix,
    pub kind: LayerKind,
    pub beta: f64,
}

/// Forward tape for one client pass: one entry per layer plus the classifier
/// input H[L].
#[derive(Clone, Debug, Default)]
pub struct ForwardTape {
    pub entries: Vec<TapeEntry>,
    pub classifier_input: Option<Matrix>,
}

/// One graph-convolution layer.
///
/// GCN:   ReLU(A * H * W).
/// GCNII: ReLU(((1-alpha) * A * H + alpha * H0_slice) * ((1-beta_l) I + beta_l W)).
pub fn layer_forward(
    h_in: &Matrix,
    a_bip: &Matrix,
    w: &Matrix,
    kind: LayerKind,
    layer: usize,
    h0_slice: Option<&Matrix>,
) -> (Matrix, TapeEntry) {
    assert_eq!(a_bip.cols(), h_in.rows(), "bipartite in-size must match h_in rows");
    let beta = kind.beta(layer);
    let (pre_mix, z) = match kind {
        LayerKind::Gcn => {
            assert_eq!(h_in.cols(), w.rows(), "h_in cols must match w rows");
            let ah = matmul(a_bip, h_in);
            let z = matmul(&ah, w);
            (ah, z)
        }
        LayerKind::Gcnii { alpha, .. } => {
            let h0 = h0_slice.expect("gcnii layer needs the initial-residual slice");
            assert_eq!(h0.rows(), a_bip.rows(), "h0 slice rows must match out rows");
            assert_eq!(h_in.cols(), w.rows(), "h_in cols must match w rows");
            assert_eq!(w.rows(), w.cols(), "gcnii weight must be square");
            let p = add(&scale(&matmul(a_bip, h_in), 1.0 - alpha), &scale(h0, alpha));
            // P * ((1-beta) I + beta W) = (1-beta) P + beta (P W)
            let z = add(&scale(&p, 1.0 - beta), &scale(&matmul(&p, w), beta));
            (p, z)
        }
    };
    let h_out = relu(&z);
    let tape = TapeEntry { a_bip: a_bip.clone(), pre_mix, z, w: w.clone(), kind, beta };
    (h_out, tape)
}

/// Gradients produced by one layer's backward step.
pub struct LayerGrads {
    pub h_in: Matrix,
    pub w: Matrix,
    /// GCNII only: gradient flowing into the initial-residual slice.
    pub h0_slice: Option<Matrix>,
}

/// Exact reverse of [`layer_forward`]; the ReLU subgradient at 0 is 0.
pub fn layer_backward(grad_h_out: &Matrix, tape: &TapeEntry) -> LayerGrads {
    let mut dz = grad_h_out.clone();
    for (g, z) in dz.data_mut().iter_mut().zip(tape.z.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    match tape.kind {
        LayerKind::Gcn => {
            let grad_w = matmul(&tape.pre_mix.transpose(), &dz);
            let grad_h_in = matmul(&tape.a_bip.transpose(), &matmul(&dz, &tape.w.transpose()));
            LayerGrads { h_in: grad_h_in, w: grad_w, h0_slice: None }
        }
        LayerKind::Gcnii { alpha, .. } => {
            let beta = tape.beta;
            // dP = (1-beta) dZ + beta dZ W^T;  dW = beta P^T dZ.
            let dp = add(&scale(&dz, 1.0 - beta), &scale(&matmul(&dz, &tape.w.transpose()), beta));
            let grad_w = scale(&matmul(&tape.pre_mix.transpose(), &dz), beta);
            let grad_h_in = scale(&matmul(&tape.a_bip.transpose(), &dp), 1.0 - alpha);
            let grad_h0 = scale(&dp, alpha);
            LayerGrads { h_in: grad_h_in, w: grad_w, h0_slice: Some(grad_h0) }
        }
    }
}

/// Linear classifier (no bias): logits = H[L] * W[L].
pub fn classify(h_last: &Matrix, w_cls: &Matrix) -> Matrix {
    assert_eq!(h_last.cols(), w_cls.rows(), "classifier width mismatch");
    matmul(h_last, w_cls)
}

/// Mean softmax cross-entropy and its gradient (softmax - onehot)/batch,
/// computed with max-subtraction.
pub fn loss_and_grad(logits: &Matrix, labels: &[u32]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), labels.len(), "one label per logit row");
    let (n, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let y = label as usize;
        assert!(y < c, "label {y} out of range for {c} classes");
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() - (row[y] - max);
        let inv_n = 1.0 / n as f64;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            grad.set(i, j, (p - if j == y { 1.0 } else { 0.0 }) * inv_n);
        }
    }
    (loss / n as f64, grad)
}

/// Central finite differences, per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let mut point = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        point[i] = params[i] + step;
        let up = f(&point);
        point[i] = params[i] - step;
        let down = f(&point);
        point[i] = params[i];
        grads.push((up - down) / (2.0 * step));
    }
    grads
}

/// One client's parameters: optional input projection (GCNII), L layer
/// weights, optional classifier (absent for non-holders in single-holder mode).
#[derive(Clone, Debug)]
pub struct ClientModel {
    pub kind: LayerKind,
    pub input_proj: Option<Matrix>,
    pub layers: Vec<Matrix>,
    pub classifier: Option<Matrix>,
}

impl ClientModel {
    /// Glorot-initializes every weight from `rng` in a fixed order.
    pub fn init(
        kind: LayerKind,
        layer_dims: &[(usize, usize)],
        input_proj_dims: Option<(usize, usize)>,
        classifier_dims: Option<(usize, usize)>,
        rng: &mut RngState,
    ) -> Self {
        let input_proj = input_proj_dims.map(|(r, c)| glorot_init(r, c, rng));
        let layers = layer_dims.iter().map(|&(r, c)| glorot_init(r, c, rng)).collect();
        let classifier = classifier_dims.map(|(r, c)| glorot_init(r, c, rng));
        ClientModel { kind, input_proj, layers, classifier }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(p) = &self.input_proj {
            out.push(p);
        }
        out.extend(self.layers.iter());
        if let Some(c) = &self.classifier {
            out.push(c);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(p) = &mut self.input_proj {
            out.push(p);
        }
        out.extend(self.layers.iter_mut());
        if let Some(c) = &mut self.classifier {
            out.push(c);
        }
        out
    }

    /// Flattened parameter vector (for finite-difference checks).
    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn unflatten_into(&mut self, params: &[f64]) {
        let mut off = 0;
        for m in self.matrices_mut() {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&params[off..off + len]);
            off += len;
        }
        assert_eq!(off, params.len(), "parameter vector length mismatch");
    }

    pub fn bits_eq(&self, other: &ClientModel) -> bool {
        let a = self.matrices();
        let b = other.matrices();
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_eq(y))
    }
}

const CKPT_MAGIC: [u8; 4] = *b"GLSW";
const CKPT_VERSION: u8 = 1;

/// Writes the model's matrices: "GLSW", version, u32 count, then each matrix
/// as u32 rows, u32 cols, f64 LE row-major.
pub fn save_checkpoint(model: &ClientModel, path: impl AsRef<Path>) -> Result<()> {
    let mats = model.matrices();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&CKPT_MAGIC)?;
    f.write_all(&[CKPT_VERSION])?;
    f.write_all(&(mats.len() as u32).to_le_bytes())?;
    for m in mats {
        f.write_all(&(m.rows() as u32).to_le_bytes())?;
        f.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the raw matrix list of a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 9];
    f.read_exact(&mut head)?;
    if head[0..4] != CKPT_MAGIC {
        return Err(GlasuError::Data("checkpoint missing GLSW magic".into()));
    }
    if head[4] != CKPT_VERSION {
        return Err(GlasuError::Data(format!("unsupported checkpoint version {}", head[4])));
    }
    let count = u32::from_le_bytes(head[5..9].try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut dims = [0u8; 8];
        f.read_exact(&mut dims)?;
        let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        f.read_exact(&mut data)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Matrix::from_vec(rows, cols, vals));
    }
    Ok(out)
}

/// Restores a model from checkpoint matrices given its shape flags.
pub fn model_from_matrices(
    kind: LayerKind,
    has_input_proj: bool,
    has_classifier: bool,
    mats: Vec<Matrix>,
) -> Result<ClientModel> {
    let expected_extra = usize::from(has_input_proj) + usize::from(has_classifier);
    if mats.len() < expected_extra + 1 {
        return Err(GlasuError::Data("checkpoint has too few matrices".into()));
    }
    let mut it = mats.into_iter();
    let input_proj = has_input_proj.then(|| it.next().unwrap());
    let mut rest: Vec<Matrix> = it.collect();
    let classifier = has_classifier.then(|| rest.pop().unwrap());
    Ok(ClientModel { kind, input_proj, layers: rest, classifier })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect())
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn gcn_identity_passes_nonnegative_input_through() {
        let h = Matrix::from_rows(&[vec![0.5, 2.0], vec![0.0, 1.0]]);
        let (out, _) = layer_forward(&h, &Matrix::identity(2), &Matrix::identity(2), LayerKind::Gcn, 0, None);
        assert!(out.bits_eq(&h));
    }

    #[test]
    fn gcn_zero_weights_zero_output() {
        let mut rng = RngState::new(1, 0);
        let h = random_matrix(3, 4, &mut rng);
        let a = Matrix::identity(3);
        let (out, _) = layer_forward(&h, &a, &Matrix::zeros(4, 2), LayerKind::Gcn, 0, None);
        assert!(out.bits_eq(&Matrix::zeros(3, 2)));
    }

    #[test]
    fn gcnii_two_node_matches_scalar_oracle() {
        // Straight-line scalar computation of one GCNII layer, 2 nodes, width 1.
        let alpha = 0.1;
        let lambda = 0.5;
        let kind = LayerKind::Gcnii { alpha, lambda };
        let a = Matrix::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]);
        let h = Matrix::from_rows(&[vec![1.0], vec![-2.0]]);
        let h0 = Matrix::from_rows(&[vec![0.5], vec![0.25]]);
        let w = Matrix::from_rows(&[vec![1.5]]);
        let layer = 1;
        let (out, _) = layer_forward(&h, &a, &w, kind, layer, Some(&h0));

        let beta = (lambda / (layer as f64 + 1.0) + 1.0).ln();
        for i in 0..2 {
            let ah = a.get(i, 0) * h.get(0, 0) + a.get(i, 1) * h.get(1, 0);
            let p = (1.0 - alpha) * ah + alpha * h0.get(i, 0);
            let z = p * ((1.0 - beta) + beta * w.get(0, 0));
            let want = z.max(0.0);
            assert!((out.get(i, 0) - want).abs() < 1e-12, "{} vs {}", out.get(i, 0), want);
        }
    }

    #[test]
    fn gcnii_with_alpha_zero_beta_one_reduces_to_gcn() {
        // alpha -> 0 and beta_l = 1 collapse both skips; compare against a
        // plain GCN layer by forcing those coefficients.
        let mut rng = RngState::new(4, 2);
        let h = random_matrix(3, 2, &mut rng);
        let a = random_matrix(3, 3, &mut rng).map(f64::abs);
        let w = random_matrix(2, 2, &mut rng);
        let h0 = random_matrix(3, 2, &mut rng);
        // lambda chosen so beta_0 = ln(lambda/1 + 1) = 1 => lambda = e - 1.
        let kind = LayerKind::Gcnii { alpha: 1e-300, lambda: std::f64::consts::E - 1.0 };
        let (out_ii, _) = layer_forward(&h, &a, &w, kind, 0, Some(&h0));
        let (out_gcn, _) = layer_forward(&h, &a, &w, LayerKind::Gcn, 0, None);
        for (x, y) in out_ii.data().iter().zip(out_gcn.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn backward_zero_cotangent_gives_zero_grads() {
        let mut rng = RngState::new(2, 1);
        let h = random_matrix(3, 2, &mut rng);
        let a = random_matrix(4, 3, &mut rng);
        let w = random_matrix(2, 2, &mut rng);
        let (_, tape) = layer_forward(&h, &a, &w, LayerKind::Gcn, 0, None);
        let g = layer_backward(&Matrix::zeros(4, 2), &tape);
        assert!(g.h_in.bits_eq(&Matrix::zeros(3, 2)));
        assert!(g.w.bits_eq(&Matrix::zeros(2, 2)));
    }

    #[test]
    fn backward_scalar_chain_rule() {
        // d/dw ReLU(a*h*w) = a*h when a*h*w > 0.
        let a = Matrix::from_vec(1, 1, vec![2.0]);
        let h = Matrix::from_vec(1, 1, vec![3.0]);
        let w = Matrix::from_vec(1, 1, vec![0.5]);
        let (_, tape) = layer_forward(&h, &a, &w, LayerKind::Gcn, 0, None);
        let g = layer_backward(&Matrix::from_vec(1, 1, vec![1.0]), &tape);
        assert_eq!(g.w.get(0, 0), 6.0);
        assert_eq!(g.h_in.get(0, 0), 2.0 * 0.5);
    }

    fn layer_loss(h: &Matrix, a: &Matrix, w: &Matrix, kind: LayerKind, h0: Option<&Matrix>) -> f64 {
        let (out, _) = layer_forward(h, a, w, kind, 1, h0);
        // Weighted sum keeps the functional generic.
        out.data().iter().enumerate().map(|(i, v)| v * ((i % 3) as f64 + 0.5)).sum()
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = RngState::new(7, 3);
        for kind in [LayerKind::Gcn, LayerKind::Gcnii { alpha: 0.2, lambda: 0.7 }] {
            let h = random_matrix(4, 3, &mut rng);
            let a = random_matrix(4, 4, &mut rng);
            let w = random_matrix(3, 3, &mut rng);
            let h0 = random_matrix(4, 3, &mut rng);
            let h0_opt = matches!(kind, LayerKind::Gcnii { .. }).then_some(&h0);

            let (out, tape) = layer_forward(&h, &a, &w, kind, 1, h0_opt);
            let mut cot = Matrix::zeros(out.rows(), out.cols());
            for (i, v) in cot.data_mut().iter_mut().enumerate() {
                *v = (i % 3) as f64 + 0.5;
            }
            let g = layer_backward(&cot, &tape);

            let fd_w = finite_diff_grad(
                |p| {
                    let wp = Matrix::from_vec(3, 3, p.to_vec());
                    layer_loss(&h, &a, &wp, kind, h0_opt)
                },
                w.data(),
                1e-5,
            );
            assert!(rel_err(g.w.data(), &fd_w) < 1e-6, "w grad rel err too large");

            let fd_h = finite_diff_grad(
                |p| {
                    let hp = Matrix::from_vec(4, 3, p.to_vec());
                    layer_loss(&hp, &a, &w, kind, h0_opt)
                },
                h.data(),
                1e-5,
            );
            assert!(rel_err(g.h_in.data(), &fd_h) < 1e-6, "h grad rel err too large");
        }
    }

    #[test]
    fn gcn_positively_homogeneous_in_w() {
        let mut rng = RngState::new(9, 9);
        let h = random_matrix(3, 2, &mut rng);
        let a = random_matrix(3, 3, &mut rng);
        let w = random_matrix(2, 2, &mut rng);
        let (out1, _) = layer_forward(&h, &a, &scale(&w, 2.0), LayerKind::Gcn, 0, None);
        let (out2, _) = layer_forward(&h, &a, &w, LayerKind::Gcn, 0, None);
        assert!(out1.bits_eq(&scale(&out2, 2.0)));
    }

    #[test]
    fn classify_examples() {
        let mut rng = RngState::new(3, 3);
        let h = random_matrix(2, 2, &mut rng);
        assert!(classify(&h, &Matrix::zeros(2, 3)).bits_eq(&Matrix::zeros(2, 3)));
        assert!(classify(&h, &Matrix::identity(2)).bits_eq(&h));
        let w = random_matrix(2, 2, &mut rng);
        let got = classify(&h, &w);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += h.get(i, k) * w.get(k, j);
                }
                assert_eq!(got.get(i, j).to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Matrix::from_vec(4, 5, vec![0.7; 20]);
        let (loss, grad) = loss_and_grad(&logits, &[0, 1, 2, 3]);
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
        // Gradient rows sum to zero.
        for i in 0..4 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn correct_logit_scaling_decreases_loss() {
        let labels = [1u32, 0];
        let mut prev = f64::INFINITY;
        for scale_factor in [1.0, 2.0, 4.0, 8.0] {
            let logits = Matrix::from_rows(&[
                vec![0.0, scale_factor],
                vec![scale_factor, 0.0],
            ]);
            let (loss, _) = loss_and_grad(&logits, &labels);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let mut rng = RngState::new(5, 5);
        let logits = random_matrix(3, 4, &mut rng);
        let labels = [2u32, 0, 3];
        let (_, grad) = loss_and_grad(&logits, &labels);
        let fd = finite_diff_grad(
            |p| loss_and_grad(&Matrix::from_vec(3, 4, p.to_vec()), &labels).0,
            logits.data(),
            1e-6,
        );
        assert!(rel_err(grad.data(), &fd) < 1e-6);
    }

    #[test]
    fn finite_diff_analytic_cases() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|p| 4.0 * p[0] - 2.0 * p[1], &[1.0, 2.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-10);
        assert!((g[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = RngState::new(11, 0);
        let model = ClientModel::init(
            LayerKind::Gcnii { alpha: 0.1, lambda: 0.5 },
            &[(4, 4), (4, 4)],
            Some((6, 4)),
            Some((4, 3)),
            &mut rng,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("client_0.bin");
        save_checkpoint(&model, &path).unwrap();
        let mats = load_checkpoint(&path).unwrap();
        let back = model_from_matrices(model.kind, true, true, mats).unwrap();
        assert!(model.bits_eq(&back));
    }
}

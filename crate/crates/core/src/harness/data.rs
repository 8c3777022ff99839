use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_matrix, phi_pair_mean, Activation, Matrix, PairCovariance, RngStream,
};

/// Hidden units of the shallow ReLU teacher.
pub const TEACHER_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Teacher {
    Linear,
    ShallowRelu,
}

impl Teacher {
    pub fn name(&self) -> &'static str {
        match self {
            Teacher::Linear => "linear",
            Teacher::ShallowRelu => "shallow-relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Teacher::Linear),
            "shallow-relu" | "shallow_relu" | "relu" => Ok(Teacher::ShallowRelu),
            _ => Err(Error::Config(format!("unknown teacher '{s}'"))),
        }
    }
}

/// Teacher network with its output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherWeights {
    pub kind: Teacher,
    /// Linear: `1 x D` unit vector. Shallow: `H x D` first layer.
    pub w: Matrix,
    /// Shallow: second-layer weights.
    pub a: Vec<f64>,
    pub shift: f64,
    pub scale: f64,
}

impl TeacherWeights {
    /// Noise-free teacher output for an input with `|x|^2 = D`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            Teacher::Linear => crate::numerics::dot(self.w.row(0), x),
            Teacher::ShallowRelu => {
                let d = x.len() as f64;
                let mut s = 0.0;
                for (k, ak) in self.a.iter().enumerate() {
                    let u = crate::numerics::dot(self.w.row(k), x) / d.sqrt();
                    s += ak * u.max(0.0);
                }
                (s - self.shift) / self.scale
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `P x D`, every row with squared norm `D`.
    pub x: Matrix,
    pub y: Vec<f64>,
    pub teacher: TeacherWeights,
    pub noise_std: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<f64>) {
        let d = self.dim();
        let mut x = Matrix::zeros(idx.len(), d);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        (x, y)
    }
}

fn normalize_rows(x: &mut Matrix) {
    let d = x.cols() as f64;
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let s = d.sqrt() / norm;
            row.iter_mut().for_each(|v| *v *= s);
        } else {
            row[0] = d.sqrt();
        }
    }
}

/// Random inputs on the sphere of radius `sqrt(D)`, so `Kx(x, x) = 1`.
pub fn sphere_inputs(p: usize, d: usize, stream: &mut RngStream) -> Matrix {
    let mut x = gaussian_matrix(p, d, 1.0, stream);
    normalize_rows(&mut x);
    x
}

fn make_teacher(kind: Teacher, d: usize, stream: &mut RngStream) -> Result<TeacherWeights> {
    match kind {
        Teacher::Linear => {
            let mut w = gaussian_matrix(1, d, 1.0, stream);
            let norm = w.sum_squares().sqrt();
            w.scale_in_place(1.0 / norm);
            Ok(TeacherWeights {
                kind,
                w,
                a: Vec::new(),
                shift: 0.0,
                scale: 1.0,
            })
        }
        Teacher::ShallowRelu => {
            let w = gaussian_matrix(TEACHER_WIDTH, d, 1.0, stream);
            let a: Vec<f64> = (0..TEACHER_WIDTH).map(|_| stream.normal()).collect();
            // u_k = w_k.x / sqrt(D) with x isotropic: Cov(u_k, u_l) = w_k.w_l / D
            let df = d as f64;
            let mut second = 0.0;
            let mut mean = 0.0;
            for k in 0..TEACHER_WIDTH {
                let ckk = w.row(k).iter().map(|v| v * v).sum::<f64>() / df;
                mean += a[k] * (ckk / (2.0 * std::f64::consts::PI)).sqrt();
                for l in 0..TEACHER_WIDTH {
                    let cll = w.row(l).iter().map(|v| v * v).sum::<f64>() / df;
                    let ckl = crate::numerics::dot(w.row(k), w.row(l)) / df;
                    let cov = PairCovariance::new(ckk, ckl, cll)?;
                    second += a[k] * a[l] * phi_pair_mean(Activation::Relu, cov)?;
                }
            }
            let var = second - mean * mean;
            Ok(TeacherWeights {
                kind,
                w,
                a,
                shift: mean,
                scale: var.sqrt(),
            })
        }
    }
}

/// Synthetic regression task: normalized Gaussian inputs, a random teacher
/// with unit output variance, and optional Gaussian label noise.
pub fn synth_dataset(
    d: usize,
    p: usize,
    teacher: Teacher,
    noise_std: f64,
    stream: &RngStream,
) -> Result<Dataset> {
    if d == 0 || p == 0 {
        return Err(Error::Config("dataset needs D >= 1 and P >= 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config("noise_std must be finite and >= 0".into()));
    }
    let mut ts = stream.substream(0);
    let tw = make_teacher(teacher, d, &mut ts)?;
    let x = sphere_inputs(p, d, &mut stream.substream(1));
    let mut ns = stream.substream(2);
    let y = (0..p)
        .map(|i| {
            let clean = tw.eval(x.row(i));
            if noise_std > 0.0 {
                clean + noise_std * ns.normal()
            } else {
                clean
            }
        })
        .collect();
    Ok(Dataset {
        x,
        y,
        teacher: tw,
        noise_std,
        seed: stream.master_seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_have_norm_sqrt_d() {
        let ds = synth_dataset(32, 100, Teacher::ShallowRelu, 0.1, &RngStream::new(1, 0)).unwrap();
        for i in 0..ds.len() {
            let n2: f64 = ds.x.row(i).iter().map(|v| v * v).sum();
            assert!((n2.sqrt() - 32f64.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_free_linear_labels_reproducible() {
        let ds = synth_dataset(8, 20, Teacher::Linear, 0.0, &RngStream::new(3, 0)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.y[i], ds.teacher.eval(ds.x.row(i)));
        }
        let again = synth_dataset(8, 20, Teacher::Linear, 0.0, &RngStream::new(3, 0)).unwrap();
        assert_eq!(ds.y, again.y);
    }

    #[test]
    fn label_variance_near_one_plus_noise() {
        for teacher in [Teacher::Linear, Teacher::ShallowRelu] {
            let noise: f64 = 0.5;
            let ds = synth_dataset(32, 1024, teacher, noise, &RngStream::new(5, 1)).unwrap();
            let m = ds.y.iter().sum::<f64>() / 1024.0;
            let v = ds.y.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / 1023.0;
            let target = 1.0 + noise * noise;
            assert!((v / target - 1.0).abs() < 0.1, "{teacher:?}: {v}");
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(synth_dataset(0, 3, Teacher::Linear, 0.0, &RngStream::new(0, 0)).is_err());
    }
}

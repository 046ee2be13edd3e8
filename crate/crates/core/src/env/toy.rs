use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::dataset::{Dataset, DatasetMeta};

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(())
}

fn build(name: &str, xs: Vec<f64>, ys: Vec<f64>, seed: u64) -> Result<Dataset> {
    let n = xs.len();
    Dataset::new(
        Tensor::new(vec![n, 1], xs)?,
        Tensor::new(vec![n, 1], ys)?,
        vec!["x".into(), "y".into()],
        DatasetMeta::new(name, seed, n),
    )
}

/// `y = 10 sin x + e` or `y = 10 cos x + e` with equal probability,
/// `x ~ U[-2, 2]`, `e ~ N(0, 1)`.
pub fn toy_bimodal(n: usize, stream: &mut RngStream) -> Result<Dataset> {
    check_n(n)?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = stream.uniform(-2.0, 2.0)?;
        let mode = if stream.next_f64() < 0.5 { x.sin() } else { x.cos() };
        xs.push(x);
        ys.push(10.0 * mode + stream.standard_normal_f64());
    }
    build("toy-bimodal", xs, ys, stream.master_seed())
}

/// `y = 7 sin x + 3 |cos(x/2)| e`, `x ~ U[-4, 4]`, `e ~ N(0, 1)`.
pub fn toy_heteroskedastic(n: usize, stream: &mut RngStream) -> Result<Dataset> {
    check_n(n)?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = stream.uniform(-4.0, 4.0)?;
        xs.push(x);
        ys.push(7.0 * x.sin() + 3.0 * (x / 2.0).cos().abs() * stream.standard_normal_f64());
    }
    build("toy-heteroskedastic", xs, ys, stream.master_seed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let mut s = RngStream::new(0, 0);
        assert_eq!(toy_bimodal(2500, &mut s).unwrap().len(), 2500);
        assert_eq!(toy_heteroskedastic(1000, &mut s).unwrap().len(), 1000);
        assert!(toy_bimodal(0, &mut s).is_err());
    }

    #[test]
    fn bimodal_mixture_proportion() {
        let d = toy_bimodal(100_000, &mut RngStream::new(4, 0)).unwrap();
        // nearest-mode assignment is biased where the modes overlap, so only
        // count points where they are well apart
        let mut near = 0usize;
        let mut sin_far = 0usize;
        for i in 0..d.len() {
            let (x, y) = (d.x.data()[i], d.y.data()[i]);
            let (a, b) = (10.0 * x.sin(), 10.0 * x.cos());
            if (a - b).abs() > 8.0 {
                near += 1;
                if (y - a).abs() < (y - b).abs() {
                    sin_far += 1;
                }
            }
        }
        let p = sin_far as f64 / near as f64;
        assert!((p - 0.5).abs() < 0.01, "{p}");
    }

    #[test]
    fn heteroskedastic_conditional_std() {
        let mut s = RngStream::new(5, 0);
        let n = 50_000;
        let at = |x: f64, s: &mut RngStream| 3.0 * (x / 2.0).cos().abs() * s.standard_normal_f64();
        let v0: Vec<f64> = (0..n).map(|_| at(0.0, &mut s)).collect();
        let sd0 = (v0.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((sd0 - 3.0).abs() < 0.05, "{sd0}");
        let vp: Vec<f64> = (0..n).map(|_| at(std::f64::consts::PI, &mut s)).collect();
        let sdp = (vp.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!(sdp < 1e-10, "{sdp}");
    }

    #[test]
    fn replay() {
        let a = toy_heteroskedastic(100, &mut RngStream::new(6, 1)).unwrap();
        let b = toy_heteroskedastic(100, &mut RngStream::new(6, 1)).unwrap();
        assert_eq!(a, b);
    }
}

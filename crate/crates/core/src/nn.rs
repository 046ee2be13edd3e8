//! Feed-forward networks with a bias column appended to every layer input.
//!
//! Layer `l` has a weight matrix of shape `out_l x (in_l + 1)`; the last
//! column multiplies the constant-one bias input. Hidden layers use
//! rectifiers, the output layer is the identity.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// `(out, in + 1)` for each layer of a `input -> hidden.. -> output` net.
pub fn layer_shapes(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden.iter().chain(std::iter::once(&output)) {
        shapes.push((h, prev + 1));
        prev = h;
    }
    shapes
}

/// Appends a column of ones along the last axis.
pub fn append_bias(g: &mut Graph, h: NodeId) -> Result<NodeId> {
    let mut shape = g.shape(h).to_vec();
    *shape.last_mut().expect("rank >= 1") = 1;
    let ones = g.constant(Tensor::ones(&shape));
    Ok(g.concat(&[h, ones], shape.len() - 1)?)
}

/// Runs `input` (`[.., rows, in]`) through the layers.
///
/// Each weight is either shared (`[out, in+1]`) or batched
/// (`[batch, out, in+1]`, matched against a `[batch, rows, in]` input).
pub fn forward(g: &mut Graph, weights: &[NodeId], input: NodeId) -> Result<NodeId> {
    let mut h = input;
    for (l, &w) in weights.iter().enumerate() {
        h = g.linear(h, w)?;
        if l + 1 < weights.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Initial means `N(0, 1/fan_in)` for every layer.
pub fn init_weights(shapes: &[(usize, usize)], stream: &mut crate::rng::RngStream) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|&(o, i)| {
            let scale = (1.0 / i as f64).sqrt();
            stream.standard_normal(&[o, i]).map(|v| v * scale)
        })
        .collect()
}

pub(crate) fn check_weight_shapes(weights: &[Tensor], shapes: &[(usize, usize)]) -> Result<()> {
    if weights.len() != shapes.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} weight matrices, got {}",
            shapes.len(),
            weights.len()
        )));
    }
    for (l, (w, &(o, i))) in weights.iter().zip(shapes).enumerate() {
        let s = w.shape();
        if s.len() < 2 || s[s.len() - 2] != o || s[s.len() - 1] != i {
            return Err(Error::InvalidArgument(format!(
                "layer {l}: weight shape {s:?} does not end in [{o}, {i}]"
            )));
        }
    }
    Ok(())
}

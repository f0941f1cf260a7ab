use super::config::NormKind;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const EPS: f64 = 1e-5;

/// Per-window, per-channel statistics removed by [`instance_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// `[B, C]` values subtracted from every step.
    pub shift: Tensor,
    /// `[B, C]` divisors, present for [`NormKind::MeanStd`].
    pub scale: Option<Tensor>,
}

/// Normalizes a `B x L x C` batch of windows.
pub fn instance_norm(x: &Tensor, kind: NormKind) -> Result<(Tensor, Anchor)> {
    let s = x.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape("instance_norm", s, &[]));
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    let xd = x.data();
    let mut shift = vec![0.0; b * c];
    let mut scale = None;
    match kind {
        NormKind::LastValue => {
            for bi in 0..b {
                shift[bi * c..(bi + 1) * c].copy_from_slice(&xd[(bi * l + l - 1) * c..(bi * l + l) * c]);
            }
        }
        NormKind::MeanStd => {
            let mut sd = vec![0.0; b * c];
            for bi in 0..b {
                for ch in 0..c {
                    let col = (0..l).map(|t| xd[(bi * l + t) * c + ch]);
                    let mean = col.clone().sum::<f64>() / l as f64;
                    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
                    shift[bi * c + ch] = mean;
                    sd[bi * c + ch] = (var + EPS).sqrt();
                }
            }
            scale = Some(Tensor::new([b, c], sd)?);
        }
    }
    let mut out = xd.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let bi = i / (l * c);
        let ch = i % c;
        *v -= shift[bi * c + ch];
        if let Some(sc) = &scale {
            *v /= sc.data()[bi * c + ch];
        }
    }
    Ok((
        Tensor::new(s.to_vec(), out)?,
        Anchor {
            shift: Tensor::new([b, c], shift)?,
            scale,
        },
    ))
}

impl Anchor {
    /// Restores the removed statistics on a `B x T x C` tensor (any `T`).
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, c) = (self.shift.shape()[0], self.shift.shape()[1]);
        if s.len() != 3 || s[0] != b || s[2] != c {
            return Err(Error::shape("denormalize", s, self.shift.shape()));
        }
        let t = s[1];
        let mut out = x.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let k = (i / (t * c)) * c + i % c;
            if let Some(sc) = &self.scale {
                *v *= sc.data()[k];
            }
            *v += self.shift.data()[k];
        }
        Tensor::new(s.to_vec(), out)
    }

    /// Differentiable denormalization of a `B x T x C` prediction.
    pub fn denormalize_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (b, c) = (self.shift.shape()[0], self.shift.shape()[1]);
        let mut y = x;
        if let Some(sc) = &self.scale {
            let s = tape.constant(sc.reshape([b, 1, c])?);
            y = tape.mul(y, s)?;
        }
        let shift = tape.constant(self.shift.reshape([b, 1, c])?);
        tape.add(y, shift)
    }
}

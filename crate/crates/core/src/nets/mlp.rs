use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::gaussian::GaussianPosterior;
use super::layers::{Activation, Linear, ParamBuilder};
use crate::error::{Error, Result};

/// Fully connected stack: `widths[0]` inputs, `widths.last()` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::invalid(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("MLP widths must be >= 1"));
        }
        Ok(())
    }
}

/// Activation between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, pb: &mut ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(pb, &format!("fc{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < n {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Variational conditional `q(s | c)`: a shared ReLU trunk with separate mean and
/// log-variance heads.
#[derive(Debug, Clone)]
pub struct ClubNet {
    trunk: Mlp,
    mean: Linear,
    logvar: Linear,
}

impl ClubNet {
    pub fn new(
        pb: &mut ParamBuilder,
        cond_dim: usize,
        target_dim: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::invalid("CLUB network needs at least one hidden layer"));
        }
        let mut widths = vec![cond_dim];
        widths.extend_from_slice(hidden);
        let last = *hidden.last().expect("non-empty");
        // the trunk's final layer feeds the heads through one more activation
        let trunk = pb.scope("trunk", |pb| {
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(pb, &format!("fc{i}"), w[0], w[1]))
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp {
                layers,
                activation: Activation::Relu,
            })
        })?;
        Ok(Self {
            trunk,
            mean: Linear::new(pb, "mean", last, target_dim)?,
            logvar: Linear::new(pb, "logvar", last, target_dim)?,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.mean.out_dim()
    }

    pub fn forward(&self, cond: &Tensor) -> Result<GaussianPosterior> {
        let h = self.trunk.forward(cond)?.relu()?;
        let logvar = self
            .logvar
            .forward(&h)?
            .clamp(-super::gaussian::LOGVAR_LIMIT, super::gaussian::LOGVAR_LIMIT)?;
        GaussianPosterior::new(self.mean.forward(&h)?, logvar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn mlp_shapes_and_validation() {
        let mut pb = ParamBuilder::new(0, DType::F32);
        let spec = MlpSpec {
            widths: vec![20, 100, 100, 100, 1],
            activation: Activation::Relu,
        };
        let mlp = Mlp::new(&spec, &mut pb).unwrap();
        let x = Tensor::zeros((7, 20), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(mlp.forward(&x).unwrap().dims(), &[7, 1]);
        assert_eq!(pb.finish().num_params(), 20 * 100 + 100 + 2 * (100 * 100 + 100) + 101);
        let bad = MlpSpec {
            widths: vec![3, 1],
            activation: Activation::Relu,
        };
        assert!(Mlp::new(&bad, &mut ParamBuilder::new(0, DType::F32)).is_err());
    }

    #[test]
    fn club_net_heads() {
        let mut pb = ParamBuilder::new(0, DType::F32);
        let q = ClubNet::new(&mut pb, 10, 4, &[256, 256]).unwrap();
        let c = Tensor::zeros((5, 10), DType::F32, &Device::Cpu).unwrap();
        let post = q.forward(&c).unwrap();
        assert_eq!(post.mean.dims(), &[5, 4]);
        assert_eq!(post.logvar.dims(), &[5, 4]);
        let single = ClubNet::new(&mut pb, 1, 1, &[8]).unwrap();
        assert_eq!(single.cond_dim(), 1);
    }
}

//! Stacked adaptive graph convolution encoder.
//!
//! Each layer runs a residual MLP, aggregates the result over the node graph
//! with diffusion convolution, and passes on the residual difference
//! `H_mlp − H_g`. The aggregated parts are summed across layers into a skip
//! state.

use crate::error::{dim_err, RaglError, Result};
use crate::graph_conv::{self, Aggregator, DiffusionWeights, GatedEmbedding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub mlp: MlpParams,
    pub diffusion: DiffusionWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h_final: Tensor,
    pub h_skip: Tensor,
}

/// Layer parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub diffusion: Vec<Var>,
}

pub fn mlp_on_tape(tape: &mut Tape, h: Var, p: &LayerVars) -> Result<Var> {
    let a = tape.linear(h, p.fc1_w, p.fc1_b)?;
    let a = tape.relu(a);
    let b = tape.linear(a, p.fc2_w, p.fc2_b)?;
    tape.add(b, h)
}

/// One encoder layer; returns `(h_next, h_g)`. Without an aggregator the
/// graph convolution is skipped and `h_g` is `None`. With `residual_difference`
/// off, `h_g` itself is passed on.
pub fn layer_on_tape(
    tape: &mut Tape,
    h_prev: Var,
    agg: Option<&Aggregator>,
    p: &LayerVars,
    residual_difference: bool,
) -> Result<(Var, Option<Var>)> {
    let h_mlp = mlp_on_tape(tape, h_prev, p)?;
    let Some(agg) = agg else {
        return Ok((h_mlp, None));
    };
    let h_g = graph_conv::diffusion_on_tape(tape, agg, h_mlp, &p.diffusion)?;
    let h_next = if residual_difference {
        tape.sub(h_mlp, h_g)?
    } else {
        h_g
    };
    Ok((h_next, Some(h_g)))
}

/// Runs every layer and returns `(h_final, h_skip)`; `h_skip` is `None` when
/// no layer produced a graph output.
pub fn encode_on_tape(
    tape: &mut Tape,
    h0: Var,
    agg: Option<&Aggregator>,
    layers: &[LayerVars],
    residual_difference: bool,
) -> Result<(Var, Option<Var>)> {
    if layers.is_empty() {
        return Err(RaglError::Config("encoder needs at least one layer".into()));
    }
    let mut h = h0;
    let mut skip: Option<Var> = None;
    for p in layers {
        let (next, h_g) = layer_on_tape(tape, h, agg, p, residual_difference)?;
        if let Some(g) = h_g {
            skip = Some(match skip {
                Some(s) => tape.add(s, g)?,
                None => g,
            });
        }
        h = next;
    }
    Ok((h, skip))
}

fn bind(tape: &mut Tape, p: &EncoderLayerParams) -> LayerVars {
    LayerVars {
        fc1_w: tape.constant(p.mlp.fc1_w.clone()),
        fc1_b: tape.constant(p.mlp.fc1_b.clone()),
        fc2_w: tape.constant(p.mlp.fc2_w.clone()),
        fc2_b: tape.constant(p.mlp.fc2_b.clone()),
        diffusion: p
            .diffusion
            .steps
            .iter()
            .map(|w| tape.constant(w.clone()))
            .collect(),
    }
}

fn check_width(h: &Tensor, p: &EncoderLayerParams) -> Result<()> {
    let d0 = h.cols();
    if p.mlp.fc1_w.rows() != d0 || p.mlp.fc2_w.cols() != d0 {
        return Err(dim_err(
            "encoder layer",
            format!(
                "state width {d0}, fc1 {:?}, fc2 {:?}",
                p.mlp.fc1_w.shape(),
                p.mlp.fc2_w.shape()
            ),
        ));
    }
    Ok(())
}

/// `FC₂(relu(FC₁(h))) + h`.
pub fn mlp_residual(h: &Tensor, params: &EncoderLayerParams) -> Result<Tensor> {
    check_width(h, params)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let p = bind(&mut tape, params);
    let out = mlp_on_tape(&mut tape, hv, &p)?;
    Ok(tape.value(out).clone())
}

pub fn encoder_layer(
    h_prev: &Tensor,
    e_hat: &GatedEmbedding,
    params: &EncoderLayerParams,
) -> Result<(Tensor, Tensor)> {
    check_width(h_prev, params)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h_prev.clone());
    let e = tape.constant(e_hat.tensor().clone());
    let p = bind(&mut tape, params);
    let agg = Aggregator::Eco { e_hat: e };
    let (next, g) = layer_on_tape(&mut tape, hv, Some(&agg), &p, true)?;
    let g = g.expect("graph branch enabled");
    Ok((tape.value(next).clone(), tape.value(g).clone()))
}

pub fn encode(
    h0: &Tensor,
    e_hat: &GatedEmbedding,
    layers: &[EncoderLayerParams],
) -> Result<EncoderOutput> {
    if layers.is_empty() {
        return Err(RaglError::Config("encoder needs at least one layer".into()));
    }
    for p in layers {
        check_width(h0, p)?;
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h0.clone());
    let e = tape.constant(e_hat.tensor().clone());
    let vars: Vec<LayerVars> = layers.iter().map(|p| bind(&mut tape, p)).collect();
    let agg = Aggregator::Eco { e_hat: e };
    let (h, skip) = encode_on_tape(&mut tape, hv, Some(&agg), &vars, true)?;
    Ok(EncoderOutput {
        h_final: tape.value(h).clone(),
        h_skip: tape.value(skip.expect("graph branch enabled")).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_conv::normalize_gated;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(d0: usize, z: usize) -> EncoderLayerParams {
        EncoderLayerParams {
            mlp: MlpParams {
                fc1_w: Tensor::zeros(&[d0, d0]),
                fc1_b: Tensor::zeros(&[d0]),
                fc2_w: Tensor::zeros(&[d0, d0]),
                fc2_b: Tensor::zeros(&[d0]),
            },
            diffusion: DiffusionWeights::new(vec![Tensor::zeros(&[d0, d0]); z + 1]).unwrap(),
        }
    }

    fn random_layer(d0: usize, z: usize, rng: &mut impl Rng) -> EncoderLayerParams {
        let s = 1.0 / (d0 as f64).sqrt();
        EncoderLayerParams {
            mlp: MlpParams {
                fc1_w: Tensor::uniform(&[d0, d0], -s, s, rng),
                fc1_b: Tensor::uniform(&[d0], -s, s, rng),
                fc2_w: Tensor::uniform(&[d0, d0], -s, s, rng),
                fc2_b: Tensor::uniform(&[d0], -s, s, rng),
            },
            diffusion: DiffusionWeights::new(
                (0..=z).map(|_| Tensor::uniform(&[d0, d0], -s, s, rng)).collect(),
            )
            .unwrap(),
        }
    }

    /// Diffusion weights drawn at random, with the last step adjusted so
    /// that `Σ_z W^(z) = I`.
    fn identity_sum(d0: usize, z: usize, rng: &mut impl Rng) -> DiffusionWeights {
        let mut steps: Vec<Tensor> = (0..z).map(|_| Tensor::uniform(&[d0, d0], -0.5, 0.5, rng)).collect();
        let mut last = Tensor::identity(d0);
        for w in &steps {
            last = last.sub(w).unwrap();
        }
        steps.push(last);
        DiffusionWeights::new(steps).unwrap()
    }

    fn gated(n: usize, k: usize, rng: &mut impl Rng) -> GatedEmbedding {
        normalize_gated(&Tensor::uniform(&[n, k], 0.0, 1.0, rng))
    }

    #[test]
    fn mlp_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        assert_eq!(mlp_residual(&h, &zero_layer(3, 2)).unwrap(), h);
    }

    #[test]
    fn mlp_hand_value() {
        let mut p = zero_layer(1, 0);
        p.mlp.fc1_w = Tensor::from_rows(&[&[1.0]]);
        p.mlp.fc2_w = Tensor::from_rows(&[&[1.0]]);
        let out = mlp_residual(&Tensor::from_rows(&[&[2.0]]), &p).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn mlp_zero_weights_jacobian_is_identity() {
        let p = zero_layer(3, 0);
        let mut tape = Tape::new();
        let h = tape.param("h", Tensor::from_rows(&[&[0.5, -1.0, 2.0]]));
        let vars = bind(&mut tape, &p);
        let out = mlp_on_tape(&mut tape, h, &vars).unwrap();
        for j in 0..3 {
            // select output j via a one-hot weight then read the gradient row
            let mut sel = Tensor::zeros(&[3, 1]);
            sel.set(j, 0, 1.0);
            let mut t2 = Tape::new();
            let hv = t2.param("h", tape.value(h).clone());
            let v2 = bind(&mut t2, &p);
            let o = mlp_on_tape(&mut t2, hv, &v2).unwrap();
            let s = t2.constant(sel);
            let y = t2.matmul(o, s).unwrap();
            let l = t2.mae_loss(y, Tensor::full(&[1, 1], -10.0), None).unwrap();
            let g = t2.backward(l).unwrap();
            let row = g.get("h").unwrap();
            for k in 0..3 {
                assert_eq!(row.data()[k], if k == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_diffusion_passes_mlp_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_layer(4, 2, &mut rng);
        p.diffusion = DiffusionWeights::new(vec![Tensor::zeros(&[4, 4]); 3]).unwrap();
        let h = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let e = gated(5, 3, &mut rng);
        let (next, g) = encoder_layer(&h, &e, &p).unwrap();
        assert_eq!(next, mlp_residual(&h, &p).unwrap());
        assert_eq!(g, Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn identity_sum_annihilates_constant_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d0 = 4;
        let mut p = zero_layer(d0, 2);
        p.diffusion = identity_sum(d0, 2, &mut rng);
        let c: Vec<f64> = (0..d0).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h = Tensor::from_rows(&vec![&c[..]; 6]);
        let (next, _) = encoder_layer(&h, &gated(6, 3, &mut rng), &p).unwrap();
        assert!(next.max_abs() <= 1e-12);
    }

    #[test]
    fn identity_sum_removes_uniform_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d0) = (7, 5);
        let mut p = random_layer(d0, 2, &mut rng);
        p.diffusion = identity_sum(d0, 2, &mut rng);
        let e = gated(n, 3, &mut rng);
        let h_mlp = Tensor::uniform(&[n, d0], -1.0, 1.0, &mut rng);
        let c: Vec<f64> = (0..d0).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut shifted = h_mlp.clone();
        for i in 0..n {
            for (v, s) in shifted.row_mut(i).iter_mut().zip(&c) {
                *v += s;
            }
        }
        // graph stage only: h_mlp − Σ A^z h_mlp W^(z)
        let stage = |h: &Tensor| {
            h.sub(&graph_conv::diffusion_convolve(&e, h, &p.diffusion).unwrap()).unwrap()
        };
        assert!(stage(&shifted).max_abs_diff(&stage(&h_mlp)) <= 1e-9);
    }

    #[test]
    fn decomposition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_layer(6, 2, &mut rng);
        let h = Tensor::uniform(&[8, 6], -1.0, 1.0, &mut rng);
        let (next, g) = encoder_layer(&h, &gated(8, 4, &mut rng), &p).unwrap();
        let recon = next.add(&g).unwrap();
        assert!(recon.max_abs_diff(&mlp_residual(&h, &p).unwrap()) <= 1e-12);
    }

    #[test]
    fn encode_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d0) = (5, 4);
        let e = gated(n, 3, &mut rng);
        let h0 = Tensor::uniform(&[n, d0], -1.0, 1.0, &mut rng);

        let l1 = random_layer(d0, 2, &mut rng);
        let single = encode(&h0, &e, std::slice::from_ref(&l1)).unwrap();
        let (next, g) = encoder_layer(&h0, &e, &l1).unwrap();
        assert_eq!(single.h_final, next);
        assert_eq!(single.h_skip, g);

        let zeros = encode(&h0, &e, &[zero_layer(d0, 2), zero_layer(d0, 2)]).unwrap();
        assert_eq!(zeros.h_final, h0);
        assert_eq!(zeros.h_skip, Tensor::zeros(&[n, d0]));

        let l2 = random_layer(d0, 2, &mut rng);
        let out = encode(&h0, &e, &[l1.clone(), l2.clone()]).unwrap();
        let (a, ga) = encoder_layer(&h0, &e, &l1).unwrap();
        let (b, gb) = encoder_layer(&a, &e, &l2).unwrap();
        assert!(out.h_final.max_abs_diff(&b) <= 1e-12);
        assert!(out.h_skip.max_abs_diff(&ga.add(&gb).unwrap()) <= 1e-12);

        assert!(matches!(encode(&h0, &e, &[]), Err(RaglError::Config(_))));
    }

    #[test]
    fn encoder_matches_explicit_algebra() {
        // single layer, Z = 1, against hand-built A = D⁻¹S
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d0) = (4, 3);
        let p = random_layer(d0, 1, &mut rng);
        let e = gated(n, 2, &mut rng);
        let h = Tensor::uniform(&[n, d0], -1.0, 1.0, &mut rng);
        let a = graph_conv::explicit_adjacency(&e).unwrap();
        let m = mlp_residual(&h, &p).unwrap();
        let g = matmul(&m, &p.diffusion.steps[0])
            .unwrap()
            .add(&matmul(&matmul(&a, &m).unwrap(), &p.diffusion.steps[1]).unwrap())
            .unwrap();
        let (next, hg) = encoder_layer(&h, &e, &p).unwrap();
        assert!(hg.max_abs_diff(&g) <= 1e-12);
        assert!(next.max_abs_diff(&m.sub(&g).unwrap()) <= 1e-12);
    }
}
